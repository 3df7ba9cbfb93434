from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cassandra_sd.container import DraftConfig, encode_tensor
from cassandra_sd.perfmodel import (
    GridRow,
    HardwareProfile,
    entropy_report,
    expected_tokens,
    format_table,
    grid_search,
    objective_denominator,
    objective_j,
    objective_measured,
    search_grid,
    pick_best,
    speedup_estimate,
    speedup_from_stats,
)
from cassandra_sd.specdecode import SpecRunStats, random_prompts
from cassandra_sd.tinylm import init_tiny_lm

HW = HardwareProfile(1e11)
fractions = st.floats(0.0, 0.9)
truncs = st.integers(0, 7)
sizes = st.floats(1.0, 1e9)


class TestObjective:
    def test_example(self):
        cfg = DraftConfig(1, 0.4, 4, 0.4, 4)
        # 100 * 0.6 * 12 + 20 * 0.6 * 12 = 864
        assert abs(objective_j(0.8, 100, 20, cfg) - 0.8 / 864) < 1e-12

    def test_zero_alpha(self):
        assert objective_j(0.0, 100, 20, DraftConfig()) == 0.0

    @given(st.floats(0.01, 1.0), sizes, sizes, fractions, fractions, truncs, truncs, st.floats(0.1, 100))
    def test_homogeneous(self, alpha, sw, skv, wp, kp, wt, kt, c):
        cfg = DraftConfig(1, wp, wt, kp, kt)
        assert objective_j(alpha, c * sw, c * skv, cfg) == pytest.approx(objective_j(alpha, sw, skv, cfg) / c)

    @given(st.floats(0.01, 1.0), sizes, sizes, fractions, fractions, st.integers(0, 6), truncs)
    def test_monotone(self, alpha, sw, skv, wp, kp, wt, kt):
        cfg = DraftConfig(1, wp, wt, kp, kt)
        j = objective_j(alpha, sw, skv, cfg)
        assert objective_j(alpha, sw, skv, DraftConfig(1, wp, wt + 1, kp, kt)) > j
        assert objective_j(alpha, sw, skv, DraftConfig(1, min(wp + 0.05, 0.95), wt, kp, kt)) > j
        assert objective_j(min(1.0, alpha * 1.1), sw, skv, cfg) >= j

    def test_zero_denominator(self):
        with pytest.raises(ValueError):
            objective_j(0.5, 0, 0, DraftConfig())

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            objective_j(alpha, 1, 1, DraftConfig())

    def test_measured(self):
        assert objective_measured(0.5, 1000) == 5e-4
        with pytest.raises(ValueError):
            objective_measured(0.5, 0)


class TestGrid:
    def test_full_grid(self):
        g = search_grid()
        assert len(g) == 576 and len(set(g)) == 576
        assert DraftConfig(1, 0.4, 4, 0.4, 4) in g

    def test_pick_best_ties(self):
        a = GridRow(DraftConfig(1, 0.3, 0), 0.5, 1.0, 10.0, 0, 0)
        b = GridRow(DraftConfig(1, 0.4, 0), 0.5, 1.0, 5.0, 0, 0)
        c = GridRow(DraftConfig(1, 0.5, 0), 0.5, 0.9, 1.0, 0, 0)
        assert pick_best([a, b, c]) is b
        with pytest.raises(ValueError):
            pick_best([])

    def test_search_small(self):
        model = init_tiny_lm(3)
        grid = search_grid((0.3, 0.6), (0, 5))[:6]
        res = grid_search(model, random_prompts(0, 2, 6, 64), grid, max_tokens=12)
        assert [r.cfg for r in res.rows] == grid
        best = max(res.rows, key=lambda r: (r.j, -r.denominator))
        assert res.best == best.cfg and res.best_row is best
        for r in res.rows:
            assert 0 <= r.alpha <= 1 and r.j >= 0 and r.spec_bytes > 0

    def test_single_config(self):
        model = init_tiny_lm(3)
        cfg = DraftConfig()
        res = grid_search(model, [[1, 2, 3]], [cfg], max_tokens=8)
        assert res.best == cfg

    def test_errors(self):
        model = init_tiny_lm(3)
        with pytest.raises(ValueError):
            grid_search(model, [[1]], [])
        with pytest.raises(ValueError):
            grid_search(model, [], [DraftConfig()])


class TestSpeedup:
    def test_upper_limit(self):
        for gamma in (1, 4, 8):
            hist = [0] * gamma + [10]
            g = speedup_estimate(0.0, 1e9, HW, hist, gamma, overhead_fraction=0.0)
            assert abs(g - (gamma + 1)) < 1e-9

    def test_all_reject(self):
        # every round yields one token and costs gamma draft passes + a target pass
        g = speedup_estimate(1e8, 1e9, HW, [7, 0, 0, 0, 0], 4, overhead_fraction=0.0)
        assert g == pytest.approx(1e9 / (4e8 + 1e9))

    @given(st.lists(st.integers(0, 50), min_size=5, max_size=5).filter(lambda h: sum(h) > 0),
           st.integers(0, 3), st.floats(0, 1e9), st.floats(1e6, 1e10), st.floats(0, 0.5))
    def test_monotone_in_acceptance(self, hist, bucket, draft, target, overhead):
        moved = list(hist)
        if moved[bucket] == 0:
            moved[bucket] = 1
            hist = list(moved)
        moved[bucket] -= 1
        moved[bucket + 1] += 1
        a = speedup_estimate(draft, target, HW, hist, 4, overhead)
        b = speedup_estimate(draft, target, HW, moved, 4, overhead)
        assert b > a

    @given(st.lists(st.integers(0, 50), min_size=5, max_size=5).filter(lambda h: sum(h) > 0))
    def test_free_draft_never_slower(self, hist):
        assert speedup_estimate(0.0, 1e9, HW, hist, 4, 0.0) >= 1.0

    def test_expected_tokens(self):
        assert expected_tokens([1, 1]) == 1.5
        with pytest.raises(ValueError):
            expected_tokens([0, 0])

    def test_errors(self):
        with pytest.raises(ValueError):
            speedup_estimate(1, 1, HW, [1, 1], 4)
        with pytest.raises(ValueError):
            speedup_estimate(1, 1, HW, [1, 1], 0)
        with pytest.raises(ValueError):
            HardwareProfile(0)

    def test_from_stats(self):
        s = SpecRunStats(2)
        s.record(2, 10, 100, 100)
        assert speedup_from_stats(s, HW, 0.0) == pytest.approx(3 * 100 / 120)


class TestEntropyReport:
    def test_single_symbol(self):
        rows = entropy_report({"w": np.full(100, 0x3F80, np.uint16)})
        assert (rows[0].entropy, rows[0].avg_unary_bits) == (0.0, 1.0)
        assert rows[-1].name == "aggregate"

    def test_aggregate_weighted(self, rng):
        from conftest import gaussian_bf16

        a = gaussian_bf16(rng, (1000,))
        b = np.array([0x3F80, 0x4000] * 50, np.uint16)
        rows = entropy_report({"a": a, "b": b})
        agg = rows[-1]
        assert agg.elements == 1100
        assert agg.entropy == pytest.approx((1000 * rows[0].entropy + 100 * rows[1].entropy) / 1100)
        for r in rows:
            assert r.avg_unary_bits >= r.entropy - 1e-12

    def test_container_uses_kept_elements(self):
        bits = np.array([0x3F80, 0x4000, 0x4080, 0x3F80], np.uint16)
        keep = np.array([True, False, False, True])
        rows = entropy_report({"c": encode_tensor(bits, keep, 1, 4)})
        assert rows[0].elements == 2 and rows[0].entropy == 0.0


def test_format_table():
    assert format_table(["a", "b"], [[1, 0.123456789]]) == "a\tb\n1\t0.123457"
