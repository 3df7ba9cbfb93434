from __future__ import annotations

import numpy as np
import pytest

from cassandra_sd.container import DraftConfig, compression_stats, decode_draft
from cassandra_sd.specdecode import (
    GREEDY,
    SAMPLED,
    DraftKvStore,
    SpecRunStats,
    build_draft_model,
    draft_generate,
    first_token_trials,
    greedy_verify,
    nominal_ratio,
    random_prompts,
    run_autoregressive,
    run_speculative,
    sweep_tradeoff,
    tradeoff_configs,
    verify_and_accept,
)
from cassandra_sd.tinylm import KvStore, TinyLMConfig, forward, init_tiny_lm, softmax

DEGENERATE = DraftConfig(1, 0.0, 0, 0.0, 0, 4)


class ScriptedRng:
    """Returns queued uniforms from ``random()``."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


@pytest.fixture(scope="module")
def model():
    return init_tiny_lm(21)


def one_hot_ratio_dists(ratios, vocab=4):
    """p, q pairs where token 0 has p/q equal to the given ratio."""
    p, q = [], []
    for r in ratios:
        qi = np.full(vocab, 0.5 / (vocab - 1))
        qi[0] = 0.5
        pi = np.full(vocab, 0.0)
        pi[0] = 0.5 * r
        pi[1:] = (1 - pi[0]) / (vocab - 1)
        p.append(pi)
        q.append(qi)
    return p, q


class TestVerifyAndAccept:
    def test_equal_distributions_accept_all(self, rng):
        p = softmax(rng.normal(size=(5, 8)))
        drafted = [int(rng.integers(8)) for _ in range(4)]
        for _ in range(50):
            n, _ = verify_and_accept(p, p[:4], drafted, rng)
            assert n == 4

    def test_hand_ratios(self):
        p, q = one_hot_ratio_dists([1.2, 0.5])
        p.append(np.full(4, 0.25))
        n, nxt = verify_and_accept(np.array(p), np.array(q), [0, 0], ScriptedRng([0.9, 0.6, 0.0]))
        assert n == 1
        # residual max(0, p - q) at step 2 puts no mass on token 0
        assert nxt != 0

    def test_zero_ratio_rejects(self):
        p, q = one_hot_ratio_dists([0.0])
        p.append(np.full(4, 0.25))
        n, _ = verify_and_accept(np.array(p), np.array(q), [0], ScriptedRng([1e-9, 0.3]))
        assert n == 0

    def test_residual_distribution(self):
        p = np.array([[0.1, 0.6, 0.3], [1 / 3] * 3])
        q = np.array([[0.5, 0.2, 0.3]])
        rng = np.random.default_rng(0)
        counts = np.zeros(3)
        for _ in range(4000):
            # force rejection of token 0 (ratio 0.2) with r = 0.99
            n, nxt = verify_and_accept(p, q, [0], ScriptedRng([0.99, rng.random()]))
            assert n == 0
            counts[nxt] += 1
        # residual = norm(max(0, p - q)) = [0, 1, 0]
        assert counts.tolist() == [0, 4000, 0]

    def test_zero_draft_probability_asserts(self):
        with pytest.raises(AssertionError):
            verify_and_accept(np.full((2, 2), 0.5), np.array([[1.0, 0.0]]), [1], ScriptedRng([0.5]))


class TestGreedyVerify:
    @pytest.mark.parametrize(
        "target, drafted, expected",
        [([1, 2, 3, 4], [1, 2, 3], (3, 4)), ([5, 2, 3, 4], [1, 2, 3], (0, 5)), ([7, 8, 9, 10], [7, 8, 6], (2, 9))],
    )
    def test_examples(self, target, drafted, expected):
        assert greedy_verify(target, drafted) == expected


class TestDraftGenerate:
    def test_degenerate_matches_target(self, model):
        dm = build_draft_model(model, DEGENERATE)
        kv = KvStore(model.config)
        drafted, qs = draft_generate(dm.draft, kv, 3, 6)
        expected = run_autoregressive(model, [3], 6)
        assert drafted == expected
        assert np.allclose(qs.sum(1), 1.0, atol=1e-6)

    def test_deterministic_sampling(self, model):
        dm = build_draft_model(model, DraftConfig())
        runs = [draft_generate(dm.draft, KvStore(model.config), 3, 5, SAMPLED, np.random.default_rng(4))[0]
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_gamma_positive(self, model):
        with pytest.raises(ValueError):
            draft_generate(model.raw_view(), KvStore(model.config), 0, 0)


class TestDraftModel:
    def test_degenerate_views_match_raw(self, model):
        dm = build_draft_model(model, DEGENERATE)
        toks = [1, 5, 9]
        raw = forward(model.raw_view(), KvStore(model.config), toks)
        assert np.array_equal(forward(dm.draft, KvStore(model.config), toks), raw)
        assert np.array_equal(forward(dm.target, KvStore(model.config), toks), raw)

    def test_target_view_lossless_in_mode1(self, model):
        dm = build_draft_model(model, DraftConfig(1, 0.6, 5, 0.6, 5))
        for i, layer in enumerate(dm.target.layers):
            assert np.array_equal(layer[0], model.raw_view().layers[i][0])

    def test_byte_accounting(self, model):
        dm = build_draft_model(model, DraftConfig())
        spec = sum(compression_stats(t).spec_bits for t in dm.tensors.values()) / 8
        assert dm.spec_bytes == spec
        assert dm.raw_bytes == 2 * model.n_params
        assert dm.spec_bytes < dm.total_bytes

    def test_nominal_ratio(self):
        assert nominal_ratio(DraftConfig(1, 0.4, 4)) == pytest.approx(16 / (0.6 * 12))


class TestDraftKv:
    @pytest.mark.parametrize("cfg", [DraftConfig(1, 0.4, 4, 0.4, 4), DraftConfig(2, 0.3, 2, 0.6, 5)])
    def test_rows_equal_encoded_target_rows(self, model, cfg):
        tkv = KvStore(model.config)
        forward(model.raw_view(), tkv, list(range(12)))
        tkv.commit(12)
        dkv = DraftKvStore(model.config, cfg)
        spec = total = 0
        for start, n in [(0, 5), (5, 1), (6, 6)]:
            dkv.commit_from(tkv, start, n)
        for layer in range(model.config.layers):
            for pos in range(12):
                kb, vb = tkv.row_bits(layer, pos)
                for which, (bits, store) in enumerate(((kb, dkv.k), (vb, dkv.v))):
                    c = dkv.encode_row(bits)
                    assert np.array_equal(c.bitmap.bits(), dkv.row_container(layer, which, pos).bitmap.bits())
                    draft = (store[layer, pos].view(np.uint32) >> 16).astype(np.uint16)
                    assert np.array_equal(draft, decode_draft(c))
                    s = compression_stats(c)
                    spec += s.spec_bits
                    total += s.total_bits
        assert (dkv.spec_bits, dkv.total_bits) == (spec, total)
        assert dkv.length == 12

    def test_commit_must_continue(self, model):
        dkv = DraftKvStore(model.config, DraftConfig())
        with pytest.raises(ValueError):
            dkv.commit_from(KvStore(model.config), 3, 1)

    def test_uncommitted_row(self, model):
        dkv = DraftKvStore(model.config, DraftConfig())
        with pytest.raises(IndexError):
            dkv.row_container(0, 0, 0)


class TestRunSpeculative:
    @pytest.mark.parametrize(
        "cfg",
        [DEGENERATE, DraftConfig(), DraftConfig(1, 0.6, 5, 0.6, 5, 5), DraftConfig(1, 0.3, 0, 0.0, 7, 3)],
    )
    def test_greedy_lossless(self, model, cfg):
        prompt = [4, 8, 15, 16, 23, 42]
        out, stats = run_speculative(model, cfg, prompt, 64)
        assert out == run_autoregressive(model, prompt, 64)
        assert sum(stats.accepted_histogram) == stats.rounds
        assert 0.0 <= stats.alpha <= 1.0
        assert stats.tokens_generated == 64

    def test_degenerate_alpha_one(self, model):
        for mode in (GREEDY, SAMPLED):
            _, stats = run_speculative(model, DEGENERATE, [1, 2], 40, mode, seed=3)
            assert stats.alpha == 1.0

    def test_sampled_deterministic(self, model):
        a = run_speculative(model, DraftConfig(), [1, 2], 30, SAMPLED, seed=9)
        b = run_speculative(model, DraftConfig(), [1, 2], 30, SAMPLED, seed=9)
        assert a[0] == b[0] and a[1].accepted_histogram == b[1].accepted_histogram

    def test_byte_records(self, model):
        _, stats = run_speculative(model, DraftConfig(), [1, 2, 3], 20)
        assert len(stats.bytes_draft) == stats.rounds
        d, t, b = stats.mean_bytes()
        assert 0 < d < t
        assert b > 0

    def test_errors(self, model):
        with pytest.raises(ValueError):
            run_speculative(model, DraftConfig(), [], 5)
        small = init_tiny_lm(0, TinyLMConfig(max_len=16))
        with pytest.raises(ValueError, match="context overflow"):
            run_speculative(small, DraftConfig(), [1, 2], 12)


class TestRunAutoregressive:
    def test_prefix_property(self, model):
        prompt = [9, 9, 1]
        for k in (1, 7, 20):
            assert run_autoregressive(model, prompt, k) == run_autoregressive(model, prompt, k + 1)[:k]

    def test_deterministic(self, model):
        assert run_autoregressive(model, [3], 25, SAMPLED, 5) == run_autoregressive(model, [3], 25, SAMPLED, 5)
        assert run_autoregressive(model, [3], 25) == run_autoregressive(model, [3], 25)


class TestStats:
    def test_alpha_and_merge(self):
        a = SpecRunStats(4)
        a.record(4, 1, 2, 3)
        a.record(0, 1, 2, 3)
        assert a.rounds == 2 and a.mean_accepted == 2 and a.alpha == 0.5
        b = SpecRunStats(4)
        b.record(2, 1, 2, 3)
        a.merge(b)
        assert a.accepted_histogram == [1, 0, 1, 0, 1]
        with pytest.raises(ValueError):
            a.merge(SpecRunStats(3))

    def test_empty(self):
        s = SpecRunStats(3)
        assert s.alpha == 0 and s.mean_bytes() == (0.0, 0.0, 0.0)
        assert s.report()["histogram"] == "0 0 0 0"


class TestSweep:
    def test_rows(self, model):
        configs = tradeoff_configs((0.3, 0.6), (0, 4))
        rows = sweep_tradeoff(model, configs, random_prompts(0, 2, 6, 64), max_tokens=16)
        assert len(rows) == len(configs)
        assert rows[0].kind == "none" and rows[0].alpha == 1.0 and rows[0].nominal_ratio == 1.0
        vpmt = {(r.cfg.w_p, r.cfg.w_t) for r in rows if r.kind == "VP+MT"}
        assert vpmt == {(p, t) for p in (0.3, 0.6) for t in (0, 4)}
        assert all(0 <= r.alpha <= 1 for r in rows)

    def test_prompt_order_invariance(self, model):
        prompts = random_prompts(3, 4, 6, 64)
        configs = [("x", DraftConfig(1, 0.5, 3, 0.5, 3))]
        a = sweep_tradeoff(model, configs, prompts, max_tokens=16)
        b = sweep_tradeoff(model, configs, prompts[::-1], max_tokens=16)
        assert a[0].alpha == b[0].alpha


class TestFirstTokenTrials:
    def test_counts_sum(self, model):
        counts = first_token_trials(model, DraftConfig(1, 0.5, 4, 0.5, 4, 2), [1, 2, 3], 500)
        assert counts.sum() == 500
