"""A tiny deterministic decoder-only LM used as the draft/target model.

Weights are bf16 bit patterns drawn from a splitmix64 stream; inference
widens them to float32. Every position is evaluated with the same sequence
of vector ops whether it arrives alone or as part of a verification batch,
so per-position logits are bit-identical across both paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bf16

GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
WEIGHT_RANGE = 0.1


class SplitMix64:
    """Plain sequential splitmix64."""

    def __init__(self, seed: int):
        self.state = seed & 0xFFFFFFFFFFFFFFFF

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & 0xFFFFFFFFFFFFFFFF
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        return z ^ (z >> 31)


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of ``SplitMix64(seed)``, vectorised."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform_bf16(seed: int, start: int, shape, scale: float = WEIGHT_RANGE) -> np.ndarray:
    """bf16 draws in [-scale, scale]; values rounding past the bound step back toward zero."""
    count = int(np.prod(shape))
    u = (splitmix64_block(seed, start, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    bits = bf16.f32_to_bf16((2.0 * u - 1.0) * scale)
    over = np.abs(bf16.bf16_to_f32(bits).astype(np.float64)) > scale
    bits = np.where(over, bits - 1, bits).astype(np.uint16)
    return bits.reshape(shape)


@dataclass(frozen=True)
class TinyLMConfig:
    vocab: int = 64
    d_model: int = 64
    layers: int = 2
    ffn_mult: int = 4
    max_len: int = 512

    def __post_init__(self):
        for name in ("vocab", "d_model", "layers", "ffn_mult", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model


LAYER_MATRICES = ("wq", "wk", "wv", "wo", "w1", "w2")


def matrix_shapes(cfg: TinyLMConfig) -> dict[str, tuple[int, int]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embed": (cfg.vocab, d)}
    for layer in range(cfg.layers):
        shapes.update({
            f"l{layer}.wq": (d, d),
            f"l{layer}.wk": (d, d),
            f"l{layer}.wv": (d, d),
            f"l{layer}.wo": (d, d),
            f"l{layer}.w1": (f, d),
            f"l{layer}.w2": (d, f),
        })
    return shapes


@dataclass
class TinyLM:
    config: TinyLMConfig
    seed: int
    weights: dict[str, np.ndarray]  # name -> bf16 bits, [out, in]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def raw_view(self) -> "WeightsView":
        if "raw" not in self._cache:
            self._cache["raw"] = WeightsView.from_bits(self.config, self.weights)
        return self._cache["raw"]


def init_tiny_lm(seed: int, config: TinyLMConfig | None = None) -> TinyLM:
    config = config or TinyLMConfig()
    weights = {}
    offset = 0
    for name, shape in matrix_shapes(config).items():
        weights[name] = uniform_bf16(seed, offset, shape)
        offset += shape[0] * shape[1]
    return TinyLM(config, seed, weights)


class WeightsView:
    """float32 matrices the forward pass runs on (draft or target flavour).

    RMS-norm gains are fixed at 1 and are not part of the compressed data.
    """

    def __init__(self, config: TinyLMConfig, mats: dict[str, np.ndarray]):
        self.config = config
        self.embed = np.ascontiguousarray(mats["embed"], dtype=np.float32)
        self.layers = []
        for i in range(config.layers):
            wq, wk, wv, wo, w1, w2 = (np.asarray(mats[f"l{i}.{m}"], dtype=np.float32) for m in LAYER_MATRICES)
            # K and V share one matvec; every path runs the same fused op
            wkv = np.ascontiguousarray(np.concatenate([wk, wv]))
            self.layers.append(tuple(np.ascontiguousarray(w) for w in (wq, wkv, wo, w1, w2)))

    @classmethod
    def from_bits(cls, config: TinyLMConfig, bits: dict[str, np.ndarray]) -> "WeightsView":
        return cls(config, {k: bf16.bf16_to_f32(v) for k, v in bits.items()})


_U16 = np.uint32(16)
_ONE = np.uint32(1)
_HALF = np.uint32(0x7FFF)
_HIGH = np.uint32(0xFFFF0000)


def round_to_bf16(x: np.ndarray) -> np.ndarray:
    """float32 -> nearest-even bf16 value, still as float32."""
    u = x.view(np.uint32)
    r = (u >> _U16) & _ONE
    r += u
    r += _HALF
    r &= _HIGH
    return r.view(np.float32)


class KvStore:
    """Per-layer K/V rows; rows past ``length`` are uncommitted scratch."""

    def __init__(self, config: TinyLMConfig):
        self.config = config
        shape = (config.layers, config.max_len, config.d_model)
        self.k = np.zeros(shape, dtype=np.float32)
        self.v = np.zeros(shape, dtype=np.float32)
        self.length = 0

    def commit(self, n: int):
        if self.length + n > self.config.max_len:
            raise ValueError("context overflow")
        self.length += n

    def row_bits(self, layer: int, pos: int) -> tuple[np.ndarray, np.ndarray]:
        """Committed K and V rows as bf16 bits."""
        k = (self.k[layer, pos].view(np.uint32) >> 16).astype(np.uint16)
        v = (self.v[layer, pos].view(np.uint32) >> 16).astype(np.uint16)
        return k, v


_EPS = np.float32(1e-6)
_ZERO = np.float32(0)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.dot(x, x) / np.float32(x.size) + _EPS)


def forward_position(view: WeightsView, kv: KvStore, token: int, pos: int, capture: list | None = None) -> np.ndarray:
    """Logits for one position; writes this position's K/V row into ``kv``."""
    d = view.config.d_model
    scale = np.float32(1.0 / np.sqrt(d))
    x = view.embed[token].copy()
    for li, (wq, wkv, wo, w1, w2) in enumerate(view.layers):
        h = _rmsnorm(x)
        q = wq @ h
        kvrow = round_to_bf16(wkv @ h)
        kv.k[li, pos] = kvrow[:d]
        kv.v[li, pos] = kvrow[d:]
        s = (kv.k[li, : pos + 1] @ q) * scale
        p = np.exp(s - s.max())
        p /= p.sum()
        o = p @ kv.v[li, : pos + 1]
        x = x + wo @ o
        h2 = _rmsnorm(x)
        a = np.maximum(w1 @ h2, _ZERO)
        x = x + w2 @ a
        if capture is not None:
            capture.append((li, h, o, h2, a))
    hf = _rmsnorm(x)
    if capture is not None:
        capture.append((None, hf))
    return view.embed @ hf


def forward(view: WeightsView, kv: KvStore, tokens, start: int | None = None) -> np.ndarray:
    """Causal forward over ``tokens`` placed at ``start`` (default: right after the committed context).

    K/V rows land in scratch; nothing is committed.
    """
    start = kv.length if start is None else start
    tokens = list(tokens)
    if start + len(tokens) > kv.config.max_len:
        raise ValueError("context overflow")
    out = np.empty((len(tokens), kv.config.vocab), dtype=np.float32)
    for i, tok in enumerate(tokens):
        if not 0 <= tok < kv.config.vocab:
            raise ValueError(f"token {tok} outside vocabulary")
        out[i] = forward_position(view, kv, int(tok), start + i)
    return out


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def calibration_activations(model: TinyLM, samples: int = 128, seed: int | None = None) -> dict[str, np.ndarray]:
    """Inputs seen by every matrix while the target runs over a seeded random token sequence."""
    cfg = model.config
    seed = model.seed if seed is None else seed
    key = ("calib", samples, seed)
    if key in model._cache:
        return model._cache[key]
    rng = np.random.default_rng([seed, 0xCA11B])
    tokens = rng.integers(0, cfg.vocab, size=samples)
    view = model.raw_view()
    kv = KvStore(TinyLMConfig(cfg.vocab, cfg.d_model, cfg.layers, cfg.ffn_mult, max(cfg.max_len, samples)))
    acts: dict[str, list] = {name: [] for name in matrix_shapes(cfg)}
    for pos, tok in enumerate(tokens):
        cap: list = []
        forward_position(view, kv, int(tok), pos, capture=cap)
        for entry in cap:
            if entry[0] is None:
                acts["embed"].append(entry[1])
                continue
            li, h, o, h2, a = entry
            for m in ("wq", "wk", "wv"):
                acts[f"l{li}.{m}"].append(h)
            acts[f"l{li}.wo"].append(o)
            acts[f"l{li}.w1"].append(h2)
            acts[f"l{li}.w2"].append(a)
    out = {name: np.stack(rows) for name, rows in acts.items()}
    model._cache[key] = out
    return out
