"""Width-elastic encoder-decoder transformer over one shared parameter store.

The widest model owns every parameter at ``max_width``; any narrower
sub-model is a set of top-left crops (views, never copies) into the same
arrays. Two width regimes exist: all layers at one shared width from the
menu, or io width pinned to ``max_width`` with per-layer attention widths
chosen freely from the menu.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3

NEG_BIG = -1e9  # additive mask value; finite so debug NaN guards stay quiet


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_width: int = 1024
    width_menu: tuple = tuple(range(256, 1025, 64))
    n_encoder_layers: int = 6
    n_decoder_layers: int = 6
    head_dim: int = 64
    ffn_multiplier: int = 4
    dropout_by_width: dict = field(default_factory=dict)
    max_seq_len: int = 256

    def __post_init__(self):
        menu = tuple(int(w) for w in self.width_menu)
        object.__setattr__(self, "width_menu", menu)
        if not menu or any(b <= a for a, b in zip(menu, menu[1:])):
            raise ValueError("width_menu must be strictly increasing and non-empty")
        if menu[-1] != self.max_width:
            raise ValueError("max(width_menu) must equal max_width")
        for w in menu:
            if w <= 0 or w % self.head_dim != 0:
                raise ValueError(f"menu width {w} is not a positive multiple of head_dim")
        drops = dict(self.dropout_by_width) or {w: 0.0 for w in menu}
        for w in menu:
            if w not in drops:
                raise ValueError(f"dropout_by_width missing menu width {w}")
            if not 0.0 <= drops[w] < 1.0:
                raise ValueError(f"dropout rate for width {w} outside [0, 1)")
        object.__setattr__(self, "dropout_by_width", drops)

    @property
    def n_layers(self) -> int:
        return self.n_encoder_layers + self.n_decoder_layers

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_width": self.max_width,
            "width_menu": list(self.width_menu),
            "n_encoder_layers": self.n_encoder_layers,
            "n_decoder_layers": self.n_decoder_layers,
            "head_dim": self.head_dim,
            "ffn_multiplier": self.ffn_multiplier,
            "dropout_by_width": {str(k): v for k, v in self.dropout_by_width.items()},
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["width_menu"] = tuple(d["width_menu"])
        d["dropout_by_width"] = {int(k): float(v) for k, v in d["dropout_by_width"].items()}
        return cls(**d)


@dataclass(frozen=True)
class WidthSpec:
    """Shape of one sub-model: shared io width plus per-layer attention widths."""

    io_width: int
    attn_widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "attn_widths", tuple(int(w) for w in self.attn_widths))

    def validate(self, config: ModelConfig) -> None:
        menu = set(config.width_menu)
        if self.io_width not in menu:
            raise ValueError(f"io width {self.io_width} not in menu")
        if len(self.attn_widths) != config.n_layers:
            raise ValueError(
                f"expected {config.n_layers} attention widths, got {len(self.attn_widths)}"
            )
        for w in self.attn_widths:
            if w not in menu:
                raise ValueError(f"attention width {w} not in menu")

    @property
    def is_type1(self) -> bool:
        return all(w == self.io_width for w in self.attn_widths)

    def is_type2(self, config: ModelConfig) -> bool:
        return self.io_width == config.max_width

    def is_widest(self, config: ModelConfig) -> bool:
        return self.io_width == config.max_width and all(
            w == config.max_width for w in self.attn_widths
        )

    def contains(self, other: "WidthSpec") -> bool:
        """True when every width of ``other`` fits inside this spec."""
        return other.io_width <= self.io_width and all(
            a <= b for a, b in zip(other.attn_widths, self.attn_widths)
        )

    def format(self) -> str:
        return f"{self.io_width}:{','.join(str(w) for w in self.attn_widths)}"

    @classmethod
    def parse(cls, text: str, config: ModelConfig) -> "WidthSpec":
        """Parse ``"C"`` (uniform) or ``"C:D1,...,DL"`` and validate."""
        text = text.strip()
        if ":" in text:
            io_part, rest = text.split(":", 1)
            widths = tuple(int(w) for w in rest.split(","))
        else:
            io_part = text
            widths = (int(text),) * config.n_layers
        spec = cls(int(io_part), widths)
        spec.validate(config)
        return spec


def type1_spec(config: ModelConfig, width: int) -> WidthSpec:
    spec = WidthSpec(width, (width,) * config.n_layers)
    spec.validate(config)
    return spec


def widest_spec(config: ModelConfig) -> WidthSpec:
    return type1_spec(config, config.max_width)


def sample_submodel(config: ModelConfig, variant: str, rng: np.random.Generator,
                    menu_subset=None) -> WidthSpec:
    """Draw a random sub-model spec.

    type1: one uniform width for io and every layer. type2: io width
    pinned to max_width, each layer's attention width drawn independently
    (optionally from a restricted menu subset).
    """
    menu = tuple(menu_subset) if menu_subset is not None else config.width_menu
    if menu_subset is not None and not set(menu) <= set(config.width_menu):
        raise ValueError("menu subset must be contained in the width menu")
    if variant == "type1":
        w = int(menu[rng.integers(len(menu))])
        return WidthSpec(w, (w,) * config.n_layers)
    if variant == "type2":
        widths = tuple(int(menu[i]) for i in rng.integers(len(menu), size=config.n_layers))
        return WidthSpec(config.max_width, widths)
    raise ValueError(f"unknown variant {variant!r}")


def dropout_rate_for(config: ModelConfig, spec: WidthSpec) -> float:
    """Per-width dropout: the io width's rate for uniform specs, else the
    rate at the floor of the mean menu index of the layer widths."""
    if spec.is_type1:
        return config.dropout_by_width[spec.io_width]
    menu = list(config.width_menu)
    mean_idx = sum(menu.index(w) for w in spec.attn_widths) / len(spec.attn_widths)
    return config.dropout_by_width[menu[int(mean_idx)]]


# --- parameter store -------------------------------------------------------


def crop_matrix(full: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Top-left ``rows x cols`` view of a matrix; writes flow through."""
    if full.ndim != 2:
        raise ValueError("crop_matrix expects a matrix")
    r, c = full.shape
    if rows > r or cols > c:
        raise ValueError(f"crop {rows}x{cols} exceeds {r}x{c}")
    return full[:rows, :cols]


class ParameterStore:
    """Named full-width parameter arrays; the single source of storage.

    Sub-models index into these arrays, so one optimizer step through any
    sub-model is immediately visible at every other width.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ParameterStore":
        """One init at widest size, uniform(-1/sqrt(max_width), +1/sqrt(max_width))
        for matrices; zero biases; unit layer-norm gains. Sub-models
        inherit crops, so no per-width re-init exists."""
        m = config.max_width
        f = config.ffn_multiplier * m
        bound = 1.0 / math.sqrt(m)

        params: dict[str, np.ndarray] = {}

        def mat(name, shape):
            params[name] = rng.uniform(-bound, bound, size=shape)

        def vec(name, n, value=0.0):
            params[name] = np.full(n, value, dtype=np.float64)

        mat("emb", (config.vocab_size, m))
        mat("in_proj.w", (m, m))
        vec("in_proj.b", m)
        mat("out_proj.w", (m, m))
        vec("out_proj.b", m)

        def attention_block(prefix):
            for p in ("wq", "wk", "wv"):
                mat(f"{prefix}.{p}", (m, m))
            for p in ("bq", "bk", "bv"):
                vec(f"{prefix}.{p}", m)
            mat(f"{prefix}.wo", (m, m))
            vec(f"{prefix}.bo", m)

        def norm_block(prefix):
            vec(f"{prefix}.g", m, 1.0)
            vec(f"{prefix}.b", m)

        def ffn_block(prefix):
            mat(f"{prefix}.w1", (m, f))
            vec(f"{prefix}.b1", f)
            mat(f"{prefix}.w2", (f, m))
            vec(f"{prefix}.b2", m)

        for i in range(config.n_encoder_layers):
            attention_block(f"enc.{i}.att")
            norm_block(f"enc.{i}.ln1")
            ffn_block(f"enc.{i}.ffn")
            norm_block(f"enc.{i}.ln2")
        for i in range(config.n_decoder_layers):
            attention_block(f"dec.{i}.att")
            norm_block(f"dec.{i}.ln1")
            attention_block(f"dec.{i}.cross")
            norm_block(f"dec.{i}.ln2")
            ffn_block(f"dec.{i}.ffn")
            norm_block(f"dec.{i}.ln3")

        return cls(config, params)

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.config, {k: v.copy() for k, v in self.params.items()})

    def allclose(self, other: "ParameterStore") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


# --- sub-model materialization ---------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def _view(store: ParameterStore, name: str, key) -> Tensor:
    t = Tensor._wrap(store.params[name][key], True)
    t.store_name = name
    t.store_key = key
    return t


class SubModel:
    """One materialized width choice over the shared store.

    Every linear map is a top-left crop; the word embedding stays at full
    width and the input/output projections bridge ``max_width`` and the
    active io width. Gradients recorded against these views land back in
    the store slices they came from.
    """

    def __init__(self, store: ParameterStore, spec: WidthSpec):
        spec.validate(store.config)
        self.store = store
        self.config = store.config
        self.spec = spec
        self.dropout_rate = dropout_rate_for(store.config, spec)
        c = spec.io_width
        m = store.config.max_width

        self.emb = _view(store, "emb", (slice(None), slice(None)))
        self.in_proj_w = _view(store, "in_proj.w", (slice(None), slice(0, c)))
        self.in_proj_b = _view(store, "in_proj.b", slice(0, c))
        self.out_proj_w = _view(store, "out_proj.w", (slice(0, c), slice(None)))
        # Output projection bias is deliberately left uncropped at max_width.
        self.out_proj_b = _view(store, "out_proj.b", slice(None))

        self.enc_layers = []
        self.dec_layers = []
        for i in range(store.config.n_encoder_layers):
            d = spec.attn_widths[i]
            self.enc_layers.append(
                {
                    "att": self._att_views(f"enc.{i}.att", c, d),
                    "ln1": self._norm_views(f"enc.{i}.ln1", c),
                    "ffn": self._ffn_views(f"enc.{i}.ffn", c, d),
                    "ln2": self._norm_views(f"enc.{i}.ln2", c),
                }
            )
        for j in range(store.config.n_decoder_layers):
            d = spec.attn_widths[store.config.n_encoder_layers + j]
            self.dec_layers.append(
                {
                    "att": self._att_views(f"dec.{j}.att", c, d),
                    "ln1": self._norm_views(f"dec.{j}.ln1", c),
                    "cross": self._att_views(f"dec.{j}.cross", c, d),
                    "ln2": self._norm_views(f"dec.{j}.ln2", c),
                    "ffn": self._ffn_views(f"dec.{j}.ffn", c, d),
                    "ln3": self._norm_views(f"dec.{j}.ln3", c),
                }
            )
        assert m == store.config.max_width

    def _att_views(self, prefix, c, d):
        s = self.store
        return AttentionParams(
            wq=_view(s, f"{prefix}.wq", (slice(0, c), slice(0, d))),
            bq=_view(s, f"{prefix}.bq", slice(0, d)),
            wk=_view(s, f"{prefix}.wk", (slice(0, c), slice(0, d))),
            bk=_view(s, f"{prefix}.bk", slice(0, d)),
            wv=_view(s, f"{prefix}.wv", (slice(0, c), slice(0, d))),
            bv=_view(s, f"{prefix}.bv", slice(0, d)),
            wo=_view(s, f"{prefix}.wo", (slice(0, d), slice(0, c))),
            bo=_view(s, f"{prefix}.bo", slice(0, c)),
        )

    def _norm_views(self, prefix, c):
        return (
            _view(self.store, f"{prefix}.g", slice(0, c)),
            _view(self.store, f"{prefix}.b", slice(0, c)),
        )

    def _ffn_views(self, prefix, c, d):
        f = self.config.ffn_multiplier * d
        s = self.store
        return {
            "w1": _view(s, f"{prefix}.w1", (slice(0, c), slice(0, f))),
            "b1": _view(s, f"{prefix}.b1", slice(0, f)),
            "w2": _view(s, f"{prefix}.w2", (slice(0, f), slice(0, c))),
            "b2": _view(s, f"{prefix}.b2", slice(0, c)),
        }

    # -- parameter enumeration ------------------------------------------

    def parameters(self):
        """All live parameter views, embeddings and projections included."""
        yield self.emb
        yield self.in_proj_w
        yield self.in_proj_b
        yield self.out_proj_w
        yield self.out_proj_b
        for layer in self.enc_layers + self.dec_layers:
            for part in layer.values():
                if isinstance(part, AttentionParams):
                    yield from (part.wq, part.bq, part.wk, part.bk,
                                part.wv, part.bv, part.wo, part.bo)
                elif isinstance(part, dict):
                    yield from part.values()
                else:
                    yield from part

    def active_param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward -----------------------------------------------------------

    def _embed(self, ids: np.ndarray, train: bool, rng) -> Tensor:
        c = self.spec.io_width
        x = T.gather_rows(self.emb, ids)
        x = T.add(T.matmul(x, self.in_proj_w), self.in_proj_b)
        x = T.scale(x, math.sqrt(c))
        pe = positional_encoding(ids.shape[-1], c)
        x = T.add(x, Tensor._wrap(pe, False))
        if train and self.dropout_rate > 0.0:
            x = T.dropout(x, self.dropout_rate, rng)
        return x

    def _sublayer(self, x: Tensor, y: Tensor, norm, train: bool, rng) -> Tensor:
        if train and self.dropout_rate > 0.0:
            y = T.dropout(y, self.dropout_rate, rng)
        return T.layer_norm(T.add(x, y), norm[0], norm[1])

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray | None = None,
               train: bool = False, rng=None) -> Tensor:
        """Encoder pass over ``[batch, len]`` token ids (or a single ``[len]``)."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        self._check_len(src_ids.shape[1])
        bias = padding_bias(src_mask) if src_mask is not None else None
        x = self._embed(src_ids, train, rng)
        for layer in self.enc_layers:
            a = multi_head_attention(x, x, layer["att"], self.config.head_dim, bias)
            x = self._sublayer(x, a, layer["ln1"], train, rng)
            f = self._ffn(x, layer["ffn"])
            x = self._sublayer(x, f, layer["ln2"], train, rng)
        return x

    def decode(self, tgt_ids: np.ndarray, memory: Tensor,
               src_mask: np.ndarray | None = None, train: bool = False,
               rng=None) -> Tensor:
        """Decoder pass (causal self-attention plus cross-attention); returns
        vocabulary logits ``[batch, len, vocab]`` tied to the embedding."""
        tgt_ids = np.atleast_2d(np.asarray(tgt_ids))
        self._check_len(tgt_ids.shape[1])
        causal = causal_bias(tgt_ids.shape[1])
        cross_bias = padding_bias(src_mask) if src_mask is not None else None
        x = self._embed(tgt_ids, train, rng)
        for layer in self.dec_layers:
            a = multi_head_attention(x, x, layer["att"], self.config.head_dim, causal)
            x = self._sublayer(x, a, layer["ln1"], train, rng)
            a = multi_head_attention(x, memory, layer["cross"], self.config.head_dim,
                                     cross_bias)
            x = self._sublayer(x, a, layer["ln2"], train, rng)
            f = self._ffn(x, layer["ffn"])
            x = self._sublayer(x, f, layer["ln3"], train, rng)
        x = T.add(T.matmul(x, self.out_proj_w), self.out_proj_b)
        return T.matmul(x, T.transpose(self.emb))

    def forward(self, src_ids, tgt_ids, src_mask=None, train: bool = False,
                rng=None) -> Tensor:
        memory = self.encode(src_ids, src_mask, train, rng)
        return self.decode(tgt_ids, memory, src_mask, train, rng)

    def _ffn(self, x: Tensor, p: dict) -> Tensor:
        h = T.relu(T.add(T.matmul(x, p["w1"]), p["b1"]))
        return T.add(T.matmul(h, p["w2"]), p["b2"])

    def _check_len(self, n: int) -> None:
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len "
                             f"{self.config.max_seq_len}")


def materialize(store: ParameterStore, spec: WidthSpec) -> SubModel:
    return SubModel(store, spec)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams,
                         head_dim: int, mask_bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with ``width / head_dim`` heads.

    ``mask_bias`` is an additive array broadcastable to the
    ``[batch, heads, q_len, kv_len]`` score tensor (0 to keep, a large
    negative value to mask).
    """
    d = params.wq.shape[1]
    if d % head_dim != 0:
        raise ValueError(f"attention width {d} not a multiple of head_dim {head_dim}")
    h = d // head_dim
    b, lq = q_in.shape[0], q_in.shape[1]
    lk = kv_in.shape[1]

    q = T.add(T.matmul(q_in, params.wq), params.bq)
    k = T.add(T.matmul(kv_in, params.wk), params.bk)
    v = T.add(T.matmul(kv_in, params.wv), params.bv)

    def split(t, length):
        return T.transpose(T.reshape(t, (b, length, h, head_dim)), (0, 2, 1, 3))

    q = split(q, lq)
    k = split(k, lk)
    v = split(v, lk)

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    if mask_bias is not None:
        scores = T.add(scores, Tensor._wrap(mask_bias, False))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    return T.add(T.matmul(ctx, params.wo), params.bo)


def encoder_forward(sub: SubModel, src_ids, src_mask=None) -> Tensor:
    """Inference-mode encoder features for one sequence or a batch."""
    return sub.encode(src_ids, src_mask, train=False)


def decoder_forward(sub: SubModel, tgt_ids, memory: Tensor, src_mask=None) -> Tensor:
    """Inference-mode decoder logits given encoder output."""
    return sub.decode(tgt_ids, memory, src_mask, train=False)


@functools.lru_cache(maxsize=64)
def positional_encoding(length: int, width: int) -> np.ndarray:
    """Sinusoidal position table ``[length, width]`` (read-only, cached)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(width // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / width)
    pe = np.zeros((length, width), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    pe.setflags(write=False)
    return pe


def causal_bias(n: int) -> np.ndarray:
    """Additive [1, 1, n, n] bias masking positions above the diagonal."""
    bias = np.triu(np.full((n, n), NEG_BIG), k=1)
    return bias[None, None, :, :]


def padding_bias(key_mask: np.ndarray) -> np.ndarray:
    """Additive [batch, 1, 1, kv_len] bias from a True-at-real-token mask."""
    key_mask = np.atleast_2d(np.asarray(key_mask, dtype=bool))
    return np.where(key_mask, 0.0, NEG_BIG)[:, None, None, :]
