"""Analytical performance layer.

Three pieces: the configuration objective (acceptance rate per bit of
speculation data), an exhaustive grid search over draft configs driven by
measured acceptance, and a memory-bound throughput model in which every
decode step costs its bytes divided by bandwidth.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .container import CassandraTensor, DraftConfig, decode_kept_exponents
from .expcodec import avg_unary_bits, shannon_entropy
from .specdecode import GREEDY, SpecRunStats, build_draft_model, run_speculative
from .tinylm import TinyLM

BF16_BITS = 16
DEFAULT_OVERHEAD = 0.05
DEFAULT_DEV_PROMPTS = 8
GRID_PRUNES = (0.3, 0.4, 0.5, 0.6)
GRID_TRUNCS = (0, 1, 2, 3, 4, 5)


@dataclass(frozen=True)
class HardwareProfile:
    memory_bandwidth: float  # bytes / second
    label: str = "custom"

    def __post_init__(self):
        if not self.memory_bandwidth > 0:
            raise ValueError("memory_bandwidth must be positive")

    def seconds(self, nbytes: float) -> float:
        return nbytes / self.memory_bandwidth


def objective_j(alpha: float, s_w: float, s_kv: float, cfg: DraftConfig, bits: int = BF16_BITS) -> float:
    """alpha / (S_w (1-w_p)(B-w_t) + S_kv (1-kv_p)(B-kv_t))."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    denom = objective_denominator(s_w, s_kv, cfg, bits)
    if denom == 0:
        raise ValueError("objective denominator is zero")
    return alpha / denom


def objective_denominator(s_w: float, s_kv: float, cfg: DraftConfig, bits: int = BF16_BITS) -> float:
    return s_w * (1 - cfg.w_p) * (bits - cfg.w_t) + s_kv * (1 - cfg.kv_p) * (bits - cfg.kv_t)


def objective_measured(alpha: float, spec_bits: float) -> float:
    """Variant on the measured speculation stream size (bitmap and coded exponents included)."""
    if spec_bits <= 0:
        raise ValueError("spec_bits must be positive")
    return alpha / spec_bits


def search_grid(prunes=GRID_PRUNES, truncs=GRID_TRUNCS, mode: int = 1, gamma: int = 4) -> list[DraftConfig]:
    """Every (w_p, kv_p, w_t, kv_t) combination of the prune and truncation ranges."""
    return [
        DraftConfig(mode, wp, wt, kp, kt, gamma)
        for wp, kp, wt, kt in itertools.product(prunes, prunes, truncs, truncs)
    ]


@dataclass
class GridRow:
    cfg: DraftConfig
    alpha: float
    j: float
    denominator: float
    j_measured: float
    spec_bytes: float  # weights + mean draft KV, measured


@dataclass
class GridResult:
    best: DraftConfig
    rows: list[GridRow]

    @property
    def best_row(self) -> GridRow:
        return next(r for r in self.rows if r.cfg == self.best)


def pick_best(rows: list[GridRow]) -> GridRow:
    """Highest J; equal J goes to the smaller compressed size."""
    if not rows:
        raise ValueError("empty grid")
    return min(rows, key=lambda r: (-r.j, r.denominator))


def grid_search(model: TinyLM, dev_prompts, grid, max_tokens: int = 32, mode: str = GREEDY,
                seed: int = 0, bits: int = BF16_BITS) -> GridResult:
    """Measure alpha for every config on the dev prompts and maximise the objective.

    S_w is the raw weight size; S_kv is the raw KV size at the mean context
    length seen during verification.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid must not be empty")
    prompts = [list(p) for p in dev_prompts]
    if not prompts:
        raise ValueError("need at least one dev prompt")
    s_w = 2.0 * model.n_params
    rows = []
    for cfg in grid:
        dm = build_draft_model(model, cfg)
        stats = SpecRunStats(cfg.gamma)
        ctx_bytes = []
        for i, prompt in enumerate(prompts):
            _, st = run_speculative(model, cfg, prompt, max_tokens, mode, seed + i, draft_model=dm)
            stats.merge(st)
            ctx_bytes += [b - s_w for b in st.bytes_baseline]
        s_kv = float(np.mean(ctx_bytes))
        draft_bytes, _, _ = stats.mean_bytes()
        alpha = stats.alpha
        rows.append(GridRow(
            cfg,
            alpha,
            objective_j(alpha, s_w, s_kv, cfg, bits),
            objective_denominator(s_w, s_kv, cfg, bits),
            objective_measured(alpha, 8 * draft_bytes),
            draft_bytes,
        ))
    return GridResult(pick_best(rows).cfg, rows)


def expected_tokens(alpha_histogram) -> float:
    """E[n] + 1: tokens produced per round."""
    h = np.asarray(alpha_histogram, dtype=np.float64)
    if h.ndim != 1 or h.size < 1 or (h < 0).any() or h.sum() <= 0:
        raise ValueError("histogram must be non-negative with a positive total")
    return float((np.arange(h.size) * h).sum() / h.sum()) + 1.0


def speedup_estimate(bytes_draft_per_tok: float, bytes_target_pass: float, hw: HardwareProfile,
                     alpha_histogram, gamma: int, overhead_fraction: float = DEFAULT_OVERHEAD,
                     bytes_baseline: float | None = None) -> float:
    """Throughput gain of speculative decoding over one-token-per-pass decoding.

    Every pass is memory bound: its time is bytes moved / bandwidth. The
    baseline token moves the full model (``bytes_baseline``, defaulting to
    the target pass bytes).
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if len(alpha_histogram) != gamma + 1:
        raise ValueError("histogram must have gamma + 1 buckets")
    if overhead_fraction < 0:
        raise ValueError("overhead_fraction must be non-negative")
    baseline = bytes_target_pass if bytes_baseline is None else bytes_baseline
    t_draft = hw.seconds(bytes_draft_per_tok)
    t_target = hw.seconds(bytes_target_pass)
    t_base = hw.seconds(baseline)
    round_time = gamma * t_draft + t_target * (1.0 + overhead_fraction)
    if round_time <= 0:
        raise ValueError("round time must be positive")
    return expected_tokens(alpha_histogram) * t_base / round_time


def speedup_from_stats(stats: SpecRunStats, hw: HardwareProfile,
                       overhead_fraction: float = DEFAULT_OVERHEAD) -> float:
    d, t, b = stats.mean_bytes()
    return speedup_estimate(d, t, hw, stats.accepted_histogram, stats.gamma, overhead_fraction, b)


@dataclass(frozen=True)
class EntropyRow:
    name: str
    elements: int
    entropy: float
    avg_unary_bits: float


def entropy_report(tensors) -> list[EntropyRow]:
    """Per-tensor exponent entropy and unary cost, then an element-weighted aggregate row.

    ``tensors`` maps names to either bf16 bit arrays (all elements) or
    mode-1 containers (kept elements).
    """
    rows = []
    for name, t in dict(tensors).items():
        if isinstance(t, CassandraTensor):
            exps = decode_kept_exponents(t)
        else:
            exps = (np.asarray(t, dtype=np.uint16).ravel() >> 7) & 0xFF
        if exps.size == 0:
            continue
        rows.append(EntropyRow(name, int(exps.size), shannon_entropy(exps), avg_unary_bits(exps)))
    if rows:
        w = np.array([r.elements for r in rows], dtype=np.float64)
        rows.append(EntropyRow(
            "aggregate",
            int(w.sum()),
            float(np.dot(w, [r.entropy for r in rows]) / w.sum()),
            float(np.dot(w, [r.avg_unary_bits for r in rows]) / w.sum()),
        ))
    return rows


def format_table(header, rows, sep: str = "\t") -> str:
    """Delimiter-separated table; floats get 6 significant digits."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)
    lines = [sep.join(header)]
    lines += [sep.join(cell(v) for v in row) for row in rows]
    return "\n".join(lines)
