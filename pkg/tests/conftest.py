import numpy as np
import pytest

from scalant.model import ModelConfig, ParameterStore
from scalant.tensor import Tape, backward


def finite_difference(f, tensors, h=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each tensor's data.

    f must re-read the tensors' current data on every call; dropout-free
    and deterministic paths only. Perturbation is index-wise so strided
    parameter views (crops into a store) are differentiated in place.
    """
    grads = []
    for t in tensors:
        g = np.zeros(t.data.shape)
        for idx in np.ndindex(*t.data.shape):
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = f()
            t.data[idx] = orig - h
            down = f()
            t.data[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(build_loss, tensors):
    """Backward-pass gradients for the same scalar."""
    with Tape() as tape:
        loss = build_loss()
        backward(tape, loss)
    return [tape.grad(t) for t in tensors]


def rel_err(a, b, atol=1e-8):
    """Worst elementwise relative error, with an absolute floor so
    structurally-zero gradients (e.g. attention key biases, which cancel in
    softmax) compare against finite-difference noise sanely."""
    a = np.asarray(a)
    b = np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol / 1e-4)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())


def assert_grads_close(build_loss, tensors, tol=1e-4, h=1e-5):
    an = analytic_grads(build_loss, tensors)
    fd = finite_difference(lambda: build_loss().item(), tensors, h=h)
    for t, a, f in zip(tensors, an, fd):
        assert a is not None, f"missing gradient for tensor of shape {t.shape}"
        err = rel_err(a, f)
        assert err < tol, f"gradient mismatch {err:.3g} for shape {t.shape}"


@pytest.fixture
def micro_config():
    return ModelConfig(
        vocab_size=13,
        max_width=8,
        width_menu=(4, 8),
        n_encoder_layers=2,
        n_decoder_layers=2,
        head_dim=4,
        dropout_by_width={4: 0.0, 8: 0.0},
        max_seq_len=16,
    )


@pytest.fixture
def micro_store(micro_config):
    return ParameterStore.initialize(micro_config, np.random.default_rng(42))


@pytest.fixture
def toy_config():
    return ModelConfig(
        vocab_size=64,
        max_width=256,
        width_menu=(64, 128, 192, 256),
        n_encoder_layers=2,
        n_decoder_layers=2,
        head_dim=64,
        dropout_by_width={64: 0.0, 128: 0.0, 192: 0.0, 256: 0.0},
        max_seq_len=32,
    )
