import math
from collections import Counter

import numpy as np
import pytest

from scalant.data import _build_batch
from scalant.evaluation import (
    bleu,
    cost_report,
    count_params,
    enumerate_type2_specs,
    estimate_flops,
    format_mean_std,
    random_search_type2,
    token_accuracy,
    write_search_report,
)
from scalant.model import (
    ModelConfig,
    WidthSpec,
    materialize,
    type1_spec,
    widest_spec,
)


def bleu_oracle(hyps, refs, max_n=4):
    """Independent reference implementation, straight from the definition."""
    precisions = []
    for n in range(1, max_n + 1):
        num = den = 0
        for h, r in zip(hyps, refs):
            h_grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            r_counts = Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
            den += len(h_grams)
            for g, c in Counter(h_grams).items():
                num += min(c, r_counts.get(g, 0))
        if den == 0 or num == 0:
            return 0.0
        precisions.append(num / den)
    c = sum(len(h) for h in hyps)
    r = sum(len(rr) for rr in refs)
    bp = 1.0 if c > r else math.exp(1 - r / c) if c > 0 else 0.0
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    return bp * geo


WMT_DROPOUT = {w: r for w, r in zip(range(256, 1025, 64),
                                    (0, 0, 0, .1, .1, .1, .1, .2, .2, .2, .3, .3, .3))}


@pytest.fixture
def wmt_config():
    return ModelConfig(vocab_size=32768, max_width=1024,
                       width_menu=tuple(range(256, 1025, 64)),
                       dropout_by_width=WMT_DROPOUT, max_seq_len=256)


class TestBleu:
    def test_perfect_match_is_one(self):
        hyps = [["a", "b", "c", "d"], ["x", "y", "z", "w", "v"]]
        assert bleu(hyps, [list(h) for h in hyps]) == pytest.approx(1.0)

    def test_disjoint_unigrams_zero(self):
        assert bleu([["a", "b", "c", "d"]], [["e", "f", "g", "h"]]) == 0.0

    def test_repeated_token_clipping_against_oracle(self):
        hyp = ["the", "the", "the", "cat"]
        ref = ["the", "cat", "sat"]
        # trigram precision is zero here, so 4-gram BLEU collapses to 0
        assert bleu([hyp], [ref]) == 0.0
        got = bleu([hyp], [ref], max_n=2)
        want = bleu_oracle([hyp], [ref], max_n=2)
        assert got == pytest.approx(want, rel=1e-12)
        assert want == pytest.approx(math.sqrt((2 / 4) * (1 / 3)), rel=1e-12)

    def test_matches_oracle_on_random_corpora(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            n = int(rng.integers(1, 6))
            hyps, refs = [], []
            for _ in range(n):
                hyps.append([str(x) for x in rng.integers(0, 6, size=rng.integers(1, 12))])
                refs.append([str(x) for x in rng.integers(0, 6, size=rng.integers(1, 12))])
            assert bleu(hyps, refs) == pytest.approx(bleu_oracle(hyps, refs),
                                                     rel=1e-12), trial

    def test_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            hyps = [[str(x) for x in rng.integers(0, 4, size=rng.integers(1, 9))]]
            refs = [[str(x) for x in rng.integers(0, 4, size=rng.integers(1, 9))]]
            assert 0.0 <= bleu(hyps, refs) <= 1.0

    def test_invariant_under_relabeling(self):
        rng = np.random.default_rng(2)
        hyps = [[str(x) for x in rng.integers(0, 8, size=10)] for _ in range(4)]
        refs = [[str(x) for x in rng.integers(0, 8, size=10)] for _ in range(4)]
        relabel = {str(i): f"tok{7 - i}" for i in range(8)}
        hyps2 = [[relabel[t] for t in h] for h in hyps]
        refs2 = [[relabel[t] for t in r] for r in refs]
        assert bleu(hyps, refs) == bleu(hyps2, refs2)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [])
        with pytest.raises(ValueError):
            bleu([["a"]], [])


class TestTokenAccuracy:
    def test_perfect_predictor_scores_one(self, micro_store):
        from test_decoding import rig_constant_logits

        rig_constant_logits(micro_store, peaked_id=5)
        sub = materialize(micro_store, widest_spec(micro_store.config))
        batch = _build_batch([([5, 5, 5], [5, 5, 5])] * 3)
        # every non-EOS target position predicts 5; drop EOS from the mask
        batch.tgt_mask[:, -1] = False
        assert token_accuracy(sub, [batch]) == 1.0

    def test_random_targets_score_about_one_over_n(self, micro_store):
        cfg = micro_store.config
        sub = materialize(micro_store, type1_spec(cfg, 8))
        rng = np.random.default_rng(3)
        batches = []
        for _ in range(8):
            pairs = []
            for _ in range(32):
                src = [int(x) for x in rng.integers(0, cfg.vocab_size, size=8)]
                tgt = [int(x) for x in rng.integers(0, cfg.vocab_size, size=8)]
                pairs.append((src, tgt))
            batches.append(_build_batch(pairs))
        acc = token_accuracy(sub, batches)
        assert abs(acc - 1 / cfg.vocab_size) < 0.02

    def test_empty_mask_rejected(self, micro_store):
        sub = materialize(micro_store, widest_spec(micro_store.config))
        batch = _build_batch([([4, 5], [4, 5])])
        batch.tgt_mask[:] = False
        with pytest.raises(ValueError):
            token_accuracy(sub, [batch])


class TestCountParams:
    def test_widest_wmt_row(self, wmt_config):
        got = count_params(wmt_config, widest_spec(wmt_config))
        assert abs(got / 209e6 - 1.0) < 0.03

    def test_256_wmt_row(self, wmt_config):
        got = count_params(wmt_config, type1_spec(wmt_config, 256))
        assert abs(got / 45e6 - 1.0) < 0.03

    def test_without_projection_rows(self, wmt_config):
        table = {256: 19e6, 512: 61e6, 768: 124e6, 1024: 209e6}
        for width, expected in table.items():
            got = count_params(wmt_config, type1_spec(wmt_config, width),
                               include_projections=False)
            assert abs(got / expected - 1.0) < 0.03, width

    def test_projection_delta_exact_at_widest(self, wmt_config):
        m = wmt_config.max_width
        w = widest_spec(wmt_config)
        delta = count_params(wmt_config, w) - count_params(wmt_config, w, False)
        assert delta == 2 * m * m + 2 * m

    def test_matches_materialized_active_count(self, micro_store):
        cfg = micro_store.config
        for spec in (type1_spec(cfg, 4), widest_spec(cfg), WidthSpec(8, (4, 8, 8, 4))):
            sub = materialize(micro_store, spec)
            assert count_params(cfg, spec) == sub.active_param_count(), spec

    def test_single_layer_width_bump_changes_by_layer_delta(self, wmt_config):
        base = [256] * wmt_config.n_layers
        bumped = list(base)
        bumped[2] = 512
        a = count_params(wmt_config, WidthSpec(256, tuple(base)))
        b = count_params(wmt_config, WidthSpec(256, tuple(bumped)))
        c, d1, d2 = 256, 256, 512
        f = wmt_config.ffn_multiplier
        att_delta = 3 * (c * d2 + d2) + d2 * c - (3 * (c * d1 + d1) + d1 * c)
        ffn_delta = (c * f * d2 + f * d2 + f * d2 * c) - (c * f * d1 + f * d1 + f * d1 * c)
        assert b - a == att_delta + ffn_delta

    def test_monotone_across_menu(self, wmt_config):
        counts = [count_params(wmt_config, type1_spec(wmt_config, w))
                  for w in wmt_config.width_menu]
        assert all(a < b for a, b in zip(counts, counts[1:]))


class TestEstimateFlops:
    def test_widest_wmt_row(self, wmt_config):
        got = estimate_flops(wmt_config, widest_spec(wmt_config))
        assert abs(got / 26.02e9 - 1.0) < 0.15

    def test_256_wmt_row(self, wmt_config):
        got = estimate_flops(wmt_config, type1_spec(wmt_config, 256))
        assert abs(got / 5.2e9 - 1.0) < 0.15

    def test_layer_terms_scale_roughly_quadratically(self, wmt_config):
        r = (estimate_flops(wmt_config, type1_spec(wmt_config, 512))
             / estimate_flops(wmt_config, type1_spec(wmt_config, 256)))
        assert 2.0 <= r <= 4.0

    def test_monotone_across_menu(self, wmt_config):
        flops = [estimate_flops(wmt_config, type1_spec(wmt_config, w))
                 for w in wmt_config.width_menu]
        assert all(a < b for a, b in zip(flops, flops[1:]))

    def test_monotone_in_single_layer_width(self, wmt_config):
        lo = WidthSpec(1024, (896,) * wmt_config.n_layers)
        hi = WidthSpec(1024, (896,) * (wmt_config.n_layers - 1) + (1024,))
        assert estimate_flops(wmt_config, lo) < estimate_flops(wmt_config, hi)

    def test_core_mode_is_single_pass(self, wmt_config):
        w = widest_spec(wmt_config)
        core = estimate_flops(wmt_config, w, mode="core")
        calibrated = estimate_flops(wmt_config, w, mode="calibrated")
        assert core < calibrated
        with pytest.raises(ValueError):
            estimate_flops(wmt_config, w, mode="wrong")

    def test_cost_report_bundles_both(self, wmt_config):
        rep = cost_report(wmt_config, type1_spec(wmt_config, 256))
        assert rep.params == count_params(wmt_config, type1_spec(wmt_config, 256))
        assert rep.flops == estimate_flops(wmt_config, type1_spec(wmt_config, 256))
        assert rep.src_len == rep.tgt_len == 20


def _val_batches(cfg, seed=0, n=24):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        seq = [int(x) for x in rng.integers(4, cfg.vocab_size, size=4)]
        pairs.append((seq, seq))
    return [_build_batch(pairs)]


class TestRandomSearch:
    def test_counting_law_by_enumeration(self, micro_config):
        specs = enumerate_type2_specs(micro_config, (4, 8))
        assert len(specs) == 2 ** micro_config.n_layers
        assert len(set(specs)) == len(specs)
        for s in specs:
            assert s.io_width == micro_config.max_width

    def test_subset_must_be_in_menu(self, micro_store):
        with pytest.raises(ValueError):
            random_search_type2(micro_store, (4, 6), 3, _val_batches(micro_store.config))

    def test_single_width_subset_yields_widest(self, micro_store):
        cfg = micro_store.config
        res = random_search_type2(micro_store, (8,), 1, _val_batches(cfg), seed=0)
        assert len(res.ranked) == 1
        assert res.ranked[0][0] == widest_spec(cfg)
        assert res.ranked[0][1] == res.widest_score

    def test_distinct_when_space_allows(self, micro_store):
        cfg = micro_store.config
        res = random_search_type2(micro_store, (4, 8), 10, _val_batches(cfg), seed=1)
        specs = [s for s, _ in res.ranked]
        assert len(specs) == 10
        assert len(set(specs)) == 10
        for s in specs:
            assert set(s.attn_widths) <= {4, 8}
            assert s.io_width == cfg.max_width

    def test_oversampling_allowed_with_duplicates(self, micro_store):
        cfg = micro_store.config
        res = random_search_type2(micro_store, (4, 8), 30, _val_batches(cfg), seed=2)
        assert len(res.ranked) == 30
        assert len({s for s, _ in res.ranked}) <= 16

    def test_ranked_descending_and_topk_stats(self, micro_store):
        cfg = micro_store.config
        res = random_search_type2(micro_store, (4, 8), 12, _val_batches(cfg),
                                  top_k=5, seed=3)
        scores = [x for _, x in res.ranked]
        assert scores == sorted(scores, reverse=True)
        assert res.top_mean == pytest.approx(np.mean(scores[:5]))
        assert res.top_std == pytest.approx(np.std(scores[:5], ddof=1))

    def test_deterministic_under_seed(self, micro_store):
        cfg = micro_store.config
        a = random_search_type2(micro_store, (4, 8), 8, _val_batches(cfg), seed=4)
        b = random_search_type2(micro_store, (4, 8), 8, _val_batches(cfg), seed=4)
        assert a.ranked == b.ranked

    def test_report_format(self, micro_store, tmp_path):
        cfg = micro_store.config
        res = random_search_type2(micro_store, (4, 8), 6, _val_batches(cfg),
                                  top_k=3, seed=5)
        path = tmp_path / "search.csv"
        write_search_report(res, path)
        text = path.read_text()
        assert "±" in text
        assert text.count("\n") == 6 + 4  # header + rows + 3 summary lines
        assert format_mean_std(res.top_mean, res.top_std) in text
