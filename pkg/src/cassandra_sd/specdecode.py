"""Self-speculative decoding on the tiny LM.

The draft model is the target's own weights and KV cache seen through the
speculation sections only (pruned elements and truncated mantissa bits read
as zero). Drafted tokens are checked by one target pass over gamma+1
positions; only the accepted positions' target K/V rows are committed, and
the draft KV cache is re-encoded from those rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bf16 import bf16_to_f32
from .container import (
    MODE_UNARY,
    CassandraTensor,
    DraftConfig,
    compression_stats,
    decode,
    draft_rows,
    encode_tensor,
    row_section_bits,
)
from .selection import calibration_norms, kv_select_per_token, select_topk_per_row, wanda_scores
from .tinylm import KvStore, TinyLM, WeightsView, calibration_activations, forward, softmax

GREEDY = "greedy"
SAMPLED = "sampled"


@dataclass
class DraftModel:
    """Draft and target weight views for one config, plus their byte costs."""

    cfg: DraftConfig
    draft: WeightsView
    target: WeightsView
    tensors: dict[str, CassandraTensor]
    spec_bytes: float
    total_bytes: float
    raw_bytes: float
    mx_underflow: int = 0

    @property
    def compression_ratio(self) -> float:
        return self.raw_bytes / self.spec_bytes


def build_draft_model(model: TinyLM, cfg: DraftConfig) -> DraftModel:
    key = ("draft", cfg.mode, cfg.w_p, cfg.w_t)
    if key in model._cache:
        cached = model._cache[key]
        return DraftModel(cfg, cached.draft, cached.target, cached.tensors, cached.spec_bytes,
                          cached.total_bytes, cached.raw_bytes, cached.mx_underflow)
    acts = calibration_activations(model)
    keep = 1.0 - cfg.w_p
    draft_bits, target_bits, tensors = {}, {}, {}
    spec = total = 0
    underflow = 0
    for name, w in model.weights.items():
        scores = wanda_scores(bf16_to_f32(w), calibration_norms(acts[name]))
        t = encode_tensor(w, select_topk_per_row(scores, keep), cfg.mode, cfg.w_t)
        tensors[name] = t
        d = decode(t, "draft")
        draft_bits[name] = d.values
        underflow += d.underflow
        target_bits[name] = decode(t, "target").values
        st = compression_stats(t)
        spec += st.spec_bits
        total += st.total_bits
    dm = DraftModel(
        cfg,
        WeightsView.from_bits(model.config, draft_bits),
        WeightsView.from_bits(model.config, target_bits),
        tensors,
        spec / 8,
        total / 8,
        2.0 * model.n_params,
        underflow,
    )
    model._cache[key] = dm
    return dm


class DraftKvStore(KvStore):
    """Draft-side KV cache holding the draft view of every committed target row.

    Rows are encoded in batches; ``row_container`` rebuilds the container of
    any committed row on demand.
    """

    def __init__(self, config, cfg: DraftConfig):
        super().__init__(config)
        self.cfg = cfg
        shape = (config.layers, 2, config.max_len, config.d_model)
        self.target_bits = np.zeros(shape, dtype=np.uint16)
        self.bitmaps = np.zeros(shape, dtype=bool)
        self.spec_bits = 0
        self.total_bits = 0

    def select(self, rows: np.ndarray) -> np.ndarray:
        return select_topk_per_row(np.abs(bf16_to_f32(rows)), 1.0 - self.cfg.kv_p).bits

    def encode_row(self, row_bits: np.ndarray) -> CassandraTensor:
        bitmap = kv_select_per_token(bf16_to_f32(row_bits), 1.0 - self.cfg.kv_p)
        return encode_tensor(row_bits, bitmap, self.cfg.mode, self.cfg.kv_t)

    def row_container(self, layer: int, which: int, pos: int) -> CassandraTensor:
        """Container of committed row ``pos`` (``which``: 0 = K, 1 = V)."""
        if not 0 <= pos < self.length:
            raise IndexError(f"row {pos} is not committed")
        return encode_tensor(self.target_bits[layer, which, pos], self.bitmaps[layer, which, pos],
                             self.cfg.mode, self.cfg.kv_t)

    def commit_from(self, target: KvStore, start: int, n: int):
        """Encode target rows ``start .. start+n-1`` and commit their draft views."""
        if start != self.length:
            raise ValueError("draft KV commit must continue the committed context")
        if n <= 0:
            return
        end = start + n
        c = self.config
        rows = np.stack([target.k[:, start:end], target.v[:, start:end]], axis=1)  # [L, 2, n, d]
        bits = (rows.view(np.uint32) >> 16).astype(np.uint16).reshape(-1, c.d_model)
        keep = self.select(bits)
        draft = draft_rows(bits, keep, self.cfg.mode, self.cfg.kv_t)
        spec, total = row_section_bits(bits, keep, self.cfg.mode, self.cfg.kv_t)
        shape = (c.layers, 2, n, c.d_model)
        self.target_bits[:, :, start:end] = bits.reshape(shape)
        self.bitmaps[:, :, start:end] = keep.reshape(shape)
        draft = bf16_to_f32(draft).reshape(shape)
        self.k[:, start:end] = draft[:, 0]
        self.v[:, start:end] = draft[:, 1]
        self.spec_bits += int(spec.sum())
        self.total_bits += int(total.sum())
        self.commit(n)


def _pick(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), probs.size - 1))


def choose(logits: np.ndarray, mode: str, rng: np.random.Generator | None, temperature: float = 1.0):
    """(token, distribution) for one position."""
    p = softmax(logits, temperature)
    if mode == GREEDY:
        return int(np.argmax(logits)), p
    return _pick(p, rng), p


def draft_generate(view: WeightsView, kv: KvStore, pending: int, gamma: int, mode: str = GREEDY,
                   rng: np.random.Generator | None = None, temperature: float = 1.0):
    """gamma autoregressive draft steps starting from the pending token.

    Returns the drafted tokens and the full per-step draft distributions.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    start = kv.length
    tokens, qs = [], []
    tok = pending
    for i in range(gamma):
        logits = forward(view, kv, [tok], start=start + i)[0]
        tok, q = choose(logits, mode, rng, temperature)
        tokens.append(tok)
        qs.append(q)
    return tokens, np.array(qs)


def verify_and_accept(p: np.ndarray, q: np.ndarray, drafted, rng: np.random.Generator):
    """Rejection-sampling acceptance over gamma drafted tokens.

    ``p`` holds gamma+1 target distributions, ``q`` gamma draft ones.
    Returns (accepted count, next token).
    """
    gamma = len(drafted)
    for i, x in enumerate(drafted):
        qx = q[i][x]
        assert qx > 0, "drafted token has zero draft probability"
        r = rng.random()
        if r > p[i][x] / qx:
            residual = np.maximum(p[i] - q[i], 0.0)
            if residual.sum() <= 0:
                residual = p[i]
            return i, _pick(residual / residual.sum(), rng)
    return gamma, _pick(p[gamma], rng)


def greedy_verify(target_argmaxes, drafted):
    n = 0
    for d, t in zip(drafted, target_argmaxes):
        if d != t:
            break
        n += 1
    return n, int(target_argmaxes[n])


@dataclass
class SpecRunStats:
    gamma: int
    accepted_histogram: list[int] = field(default_factory=list)
    tokens_generated: int = 0
    bytes_draft: list[float] = field(default_factory=list)  # per draft token, one entry per round
    bytes_target: list[float] = field(default_factory=list)  # per verification pass
    bytes_baseline: list[float] = field(default_factory=list)  # one plain bf16 decode step

    def __post_init__(self):
        if not self.accepted_histogram:
            self.accepted_histogram = [0] * (self.gamma + 1)

    @property
    def rounds(self) -> int:
        return sum(self.accepted_histogram)

    @property
    def mean_accepted(self) -> float:
        if not self.rounds:
            return 0.0
        return sum(n * c for n, c in enumerate(self.accepted_histogram)) / self.rounds

    @property
    def alpha(self) -> float:
        return self.mean_accepted / self.gamma

    def record(self, n: int, draft_bytes: float, target_bytes: float, baseline_bytes: float):
        self.accepted_histogram[n] += 1
        self.bytes_draft.append(draft_bytes)
        self.bytes_target.append(target_bytes)
        self.bytes_baseline.append(baseline_bytes)

    def merge(self, other: "SpecRunStats"):
        if other.gamma != self.gamma:
            raise ValueError("cannot merge stats with different gamma")
        for i, c in enumerate(other.accepted_histogram):
            self.accepted_histogram[i] += c
        self.tokens_generated += other.tokens_generated
        self.bytes_draft += other.bytes_draft
        self.bytes_target += other.bytes_target
        self.bytes_baseline += other.bytes_baseline

    def mean_bytes(self) -> tuple[float, float, float]:
        if not self.bytes_draft:
            return 0.0, 0.0, 0.0
        return (float(np.mean(self.bytes_draft)), float(np.mean(self.bytes_target)),
                float(np.mean(self.bytes_baseline)))

    def report(self) -> dict[str, object]:
        d, t, b = self.mean_bytes()
        return {
            "gamma": self.gamma,
            "rounds": self.rounds,
            "tokens": self.tokens_generated,
            "alpha": round(self.alpha, 6),
            "mean_accepted": round(self.mean_accepted, 6),
            "histogram": " ".join(str(c) for c in self.accepted_histogram),
            "bytes_draft_per_token": round(d, 2),
            "bytes_target_pass": round(t, 2),
            "bytes_baseline_token": round(b, 2),
        }


def _prefill(view: WeightsView, kv: KvStore, prompt):
    if len(prompt) > 1:
        forward(view, kv, prompt[:-1])
        kv.commit(len(prompt) - 1)


def _check_prompt(model: TinyLM, prompt, max_tokens: int, gamma: int = 0):
    if not prompt:
        raise ValueError("prompt must hold at least one token")
    if len(prompt) + max_tokens + gamma + 1 > model.config.max_len:
        raise ValueError("context overflow: prompt + max_tokens exceeds max_len")


def run_speculative(model: TinyLM, cfg: DraftConfig, prompt, max_tokens: int, mode: str = GREEDY,
                    seed: int = 0, temperature: float = 1.0, draft_model: DraftModel | None = None):
    """Draft/verify loop until ``max_tokens`` tokens are produced."""
    prompt = [int(t) for t in prompt]
    _check_prompt(model, prompt, max_tokens, cfg.gamma)
    dm = draft_model or build_draft_model(model, cfg)
    rng = np.random.default_rng(seed)
    c = model.config
    kv_row_bytes = 2.0 * c.layers * 2 * c.d_model
    tkv = KvStore(c)
    dkv = DraftKvStore(c, cfg)
    _prefill(dm.target, tkv, prompt)
    dkv.commit_from(tkv, 0, tkv.length)
    stats = SpecRunStats(cfg.gamma)
    out: list[int] = []
    pending = prompt[-1]
    while len(out) < max_tokens:
        ctx = tkv.length
        drafted, qs = draft_generate(dm.draft, dkv, pending, cfg.gamma, mode, rng, temperature)
        logits = forward(dm.target, tkv, [pending] + drafted)
        if mode == GREEDY:
            n, nxt = greedy_verify([int(i) for i in np.argmax(logits, axis=1)], drafted)
        else:
            n, nxt = verify_and_accept(softmax(logits, temperature), qs, drafted, rng)
        stats.record(
            n,
            dm.spec_bytes + dkv.spec_bits / 8,
            dm.total_bytes + dkv.total_bits / 8,
            dm.raw_bytes + kv_row_bytes * ctx,
        )
        tkv.commit(n + 1)
        dkv.commit_from(tkv, ctx, n + 1)
        out.extend(drafted[:n])
        out.append(nxt)
        pending = nxt
    out = out[:max_tokens]
    stats.tokens_generated = len(out)
    return out, stats


def run_autoregressive(model: TinyLM, prompt, max_tokens: int, mode: str = GREEDY, seed: int = 0,
                       temperature: float = 1.0):
    """Plain one-token-per-step decoding on the raw bf16 weights."""
    prompt = [int(t) for t in prompt]
    _check_prompt(model, prompt, max_tokens)
    view = model.raw_view()
    rng = np.random.default_rng(seed)
    kv = KvStore(model.config)
    _prefill(view, kv, prompt)
    out = []
    tok = prompt[-1]
    for _ in range(max_tokens):
        logits = forward(view, kv, [tok])[0]
        kv.commit(1)
        tok, _ = choose(logits, mode, rng, temperature)
        out.append(tok)
    return out


def first_token_trials(model: TinyLM, cfg: DraftConfig, context, trials: int, seed: int = 0,
                       temperature: float = 1.0, draft_model: DraftModel | None = None) -> np.ndarray:
    """Counts of the first token emitted by one speculative round, over many rounds.

    The context is fixed, so forward results are memoised per token prefix;
    the sampling, acceptance and residual draws are fresh every trial.
    """
    context = [int(t) for t in context]
    _check_prompt(model, context, 1, cfg.gamma)
    dm = draft_model or build_draft_model(model, cfg)
    c = model.config
    tkv = KvStore(c)
    dkv = DraftKvStore(c, cfg)
    _prefill(dm.target, tkv, context)
    dkv.commit_from(tkv, 0, tkv.length)
    base = tkv.length
    q_memo: dict[tuple, np.ndarray] = {}
    p_memo: dict[tuple, np.ndarray] = {}

    def q_dist(prefix: tuple) -> np.ndarray:
        # prefix = drafted tokens so far; position base + len(prefix)
        if prefix not in q_memo:
            toks = (context[-1],) + prefix
            for i, tok in enumerate(toks):
                logits = forward(dm.draft, dkv, [tok], start=base + i)[0]
            q_memo[prefix] = softmax(logits, temperature)
        return q_memo[prefix]

    def p_dists(drafted: tuple) -> np.ndarray:
        if drafted not in p_memo:
            logits = forward(dm.target, tkv, [context[-1], *drafted])
            p_memo[drafted] = softmax(logits, temperature)
        return p_memo[drafted]

    rng = np.random.default_rng(seed)
    counts = np.zeros(c.vocab, dtype=np.int64)
    for _ in range(trials):
        drafted: tuple = ()
        qs = []
        for _ in range(cfg.gamma):
            q = q_dist(drafted)
            qs.append(q)
            drafted = drafted + (_pick(q, rng),)
        n, nxt = verify_and_accept(p_dists(drafted), np.array(qs), list(drafted), rng)
        counts[drafted[0] if n >= 1 else nxt] += 1
    return counts


@dataclass
class TradeoffRow:
    kind: str
    cfg: DraftConfig
    nominal_ratio: float
    measured_ratio: float
    alpha: float


def tradeoff_configs(prunes=(0.3, 0.4, 0.5, 0.6), truncs=(0, 1, 2, 3, 4, 5), mode: int = MODE_UNARY,
                     gamma: int = 5):
    """Zero-compression reference, VP-only, MT-only and VP+MT grid points."""
    rows = [("none", DraftConfig(mode, 0.0, 0, 0.0, 0, gamma))]
    rows += [("VP", DraftConfig(mode, p, 0, p, 0, gamma)) for p in prunes]
    rows += [("MT", DraftConfig(mode, 0.0, t, 0.0, t, gamma)) for t in truncs if t > 0]
    rows += [("VP+MT", DraftConfig(mode, p, t, p, t, gamma)) for p in prunes for t in truncs]
    return rows


def nominal_ratio(cfg: DraftConfig, bits: int = 16) -> float:
    """bits / kept bits per weight, the uncoded compression ratio."""
    return bits / ((1 - cfg.w_p) * (bits - cfg.w_t))


def sweep_tradeoff(model: TinyLM, configs, prompts, max_tokens: int = 32, mode: str = GREEDY,
                   seed: int = 0) -> list[TradeoffRow]:
    rows = []
    for item in configs:
        kind, cfg = item if isinstance(item, tuple) else ("custom", item)
        dm = build_draft_model(model, cfg)
        stats = SpecRunStats(cfg.gamma)
        for i, prompt in enumerate(prompts):
            _, st = run_speculative(model, cfg, prompt, max_tokens, mode, seed + i, draft_model=dm)
            stats.merge(st)
        rows.append(TradeoffRow(kind, cfg, nominal_ratio(cfg), dm.compression_ratio, stats.alpha))
    return rows


def random_prompts(seed: int, count: int, length: int, vocab: int) -> list[list[int]]:
    rng = np.random.default_rng([seed, 0x9807])
    return [rng.integers(0, vocab, size=length).tolist() for _ in range(count)]
