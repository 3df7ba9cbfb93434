"""Command line entry point.

Verbs: encode, decode, inspect, simulate, sweep, gridsearch, entropy.
Exit codes: 0 success, 2 bad input, 3 corrupt or malformed container data.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import superblock
from .bf16 import bf16_to_f32
from .container import (
    MAGIC,
    MODE_UNARY,
    SECTIONS,
    DraftConfig,
    compression_stats,
    decode,
    encode_tensor,
    from_bytes,
    header_size,
    to_bytes,
)
from .errors import FormatError
from .perfmodel import (
    DEFAULT_DEV_PROMPTS,
    DEFAULT_OVERHEAD,
    GRID_PRUNES,
    GRID_TRUNCS,
    HardwareProfile,
    entropy_report,
    format_table,
    search_grid,
    grid_search,
    speedup_from_stats,
)
from .selection import select_topk_per_row
from .specdecode import (
    GREEDY,
    SAMPLED,
    SpecRunStats,
    build_draft_model,
    nominal_ratio,
    random_prompts,
    run_autoregressive,
    run_speculative,
    sweep_tradeoff,
    tradeoff_configs,
)
from .tensorio import read_bf16, write_tensor_file
from .tinylm import KvStore, TinyLMConfig, forward, init_tiny_lm

EXIT_INPUT = 2
EXIT_FORMAT = 3


class InputError(ValueError):
    """Bad command line input (files, prompts, manifests)."""


# -- run manifest ---------------------------------------------------------------


@dataclass
class RunManifest:
    """Everything needed to repeat a run, stored as ``key=value`` lines."""

    command: str
    seed: int
    model: TinyLMConfig
    cfg: DraftConfig
    bandwidth: float
    hardware: str = "custom"
    sampling: str = GREEDY
    temperature: float = 1.0
    max_tokens: int = 64
    prompt_source: str = ""
    outputs: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"command={self.command}",
            f"seed={self.seed}",
        ]
        lines += [f"model.{k}={v}" for k, v in asdict(self.model).items()]
        lines += [f"draft.{k}={v}" for k, v in asdict(self.cfg).items()]
        lines += [
            f"hardware.bandwidth={self.bandwidth!r}",
            f"hardware.label={self.hardware}",
            f"sampling={self.sampling}",
            f"temperature={self.temperature!r}",
            f"max_tokens={self.max_tokens}",
            f"prompt_source={self.prompt_source}",
            f"outputs={','.join(self.outputs)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        kv = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"manifest line {n}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            model = TinyLMConfig(**{k: int(kv[f"model.{k}"]) for k in asdict(TinyLMConfig())})
            cfg = DraftConfig(
                int(kv["draft.mode"]), float(kv["draft.w_p"]), int(kv["draft.w_t"]),
                float(kv["draft.kv_p"]), int(kv["draft.kv_t"]), int(kv["draft.gamma"]),
            )
            return cls(
                command=kv.get("command", "simulate"),
                seed=int(kv["seed"]),
                model=model,
                cfg=cfg,
                bandwidth=float(kv["hardware.bandwidth"]),
                hardware=kv.get("hardware.label", "custom"),
                sampling=kv.get("sampling", GREEDY),
                temperature=float(kv.get("temperature", 1.0)),
                max_tokens=int(kv.get("max_tokens", 64)),
                prompt_source=kv.get("prompt_source", ""),
                outputs=[o for o in kv.get("outputs", "").split(",") if o],
            )
        except KeyError as e:
            raise InputError(f"manifest is missing {e.args[0]}") from None

    @property
    def hw(self) -> HardwareProfile:
        return HardwareProfile(self.bandwidth, self.hardware)


def write_manifest(manifest: RunManifest, directory: Path) -> Path:
    path = directory / "manifest.txt"
    path.write_text(manifest.to_text())
    return path


# -- prompts ----------------------------------------------------------------------


def parse_tokens(text: str, vocab: int) -> list[int]:
    try:
        toks = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"prompt must be integer token ids: {text!r}") from None
    if not toks:
        raise InputError("empty prompt")
    bad = [t for t in toks if not 0 <= t < vocab]
    if bad:
        raise InputError(f"token {bad[0]} outside vocabulary of {vocab}")
    return toks


def resolve_prompts(source: str, vocab: int) -> list[list[int]]:
    """Prompt sources: ``tokens:1 2 3``, ``file:PATH`` (one prompt per line) or
    ``random:seed=S,count=C,length=L``."""
    kind, _, rest = source.partition(":")
    if kind == "tokens":
        return [parse_tokens(rest, vocab)]
    if kind == "file":
        try:
            lines = Path(rest).read_text().splitlines()
        except OSError as e:
            raise InputError(f"cannot read prompt file: {e}") from None
        prompts = [parse_tokens(line, vocab) for line in lines if line.strip()]
        if not prompts:
            raise InputError("prompt file holds no prompts")
        return prompts
    if kind == "random":
        try:
            opts = dict(item.split("=") for item in rest.split(","))
            return random_prompts(int(opts["seed"]), int(opts["count"]), int(opts["length"]), vocab)
        except (KeyError, ValueError):
            raise InputError(f"bad random prompt source {source!r}") from None
    raise InputError(f"unknown prompt source {source!r}")


def prompt_source_from_args(args) -> str:
    if args.prompt is not None:
        return "tokens:" + " ".join(args.prompt.replace(",", " ").split())
    if args.prompt_file is not None:
        return f"file:{args.prompt_file}"
    return f"random:seed={args.seed},count={args.prompts},length={args.prompt_len}"


# -- argument helpers ---------------------------------------------------------------


def draft_config(args) -> DraftConfig:
    return DraftConfig(args.mode, args.prune, args.truncate, args.kv_prune, args.kv_truncate, args.gamma)


def model_config(args) -> TinyLMConfig:
    return TinyLMConfig(vocab=args.vocab, d_model=args.d_model, layers=args.layers)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("format / draft configuration")
    g.add_argument("--mode", type=int, choices=(1, 2), default=MODE_UNARY,
                   help="1 = unary exponents (lossless), 2 = MX shared exponents")
    g.add_argument("--prune", type=float, default=0.4, help="weight prune fraction")
    g.add_argument("--truncate", type=int, default=4, help="weight mantissa bits moved to verification data")
    g.add_argument("--kv-prune", type=float, default=0.0, help="KV prune fraction")
    g.add_argument("--kv-truncate", type=int, default=4, help="KV mantissa bits moved to verification data")
    g.add_argument("--gamma", type=int, default=4, help="draft tokens per round")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bandwidth", type=float, default=100.0, help="memory bandwidth in GB/s")
    g.add_argument("--superblock", type=int, default=0,
                   help="blocks per superblock for packed output (0 = no packing)")
    return p


def _model_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("toy model")
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--layers", type=int, default=2)


def _prompt_args(p: argparse.ArgumentParser, count: int, max_tokens: int):
    g = p.add_argument_group("prompts")
    g.add_argument("--prompt", help="token ids, e.g. '1 2 3'")
    g.add_argument("--prompt-file", help="one prompt of token ids per line")
    g.add_argument("--prompts", type=int, default=count, help="number of random prompts")
    g.add_argument("--prompt-len", type=int, default=8)
    g.add_argument("--max-tokens", type=int, default=max_tokens)
    g.add_argument("--sampling", choices=(GREEDY, SAMPLED), default=GREEDY)
    g.add_argument("--temperature", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="cassandra-sd",
        description="Speculation/verification tensor format and self-speculative decoding simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", parents=[common], help="raw tensor file -> .cass container")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--view", choices=("draft", "target"), default="target",
                   help="streams included in the packed superblock section")

    p = sub.add_parser("decode", parents=[common], help=".cass container -> raw BF16 tensor file")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--view", choices=("draft", "target"), default="target")

    p = sub.add_parser("inspect", parents=[common], help="show a container's header and section sizes")
    p.add_argument("input")

    p = sub.add_parser("simulate", parents=[common], help="speculative vs autoregressive decoding on the toy LM")
    _model_args(p)
    _prompt_args(p, count=1, max_tokens=64)
    p.add_argument("--manifest", help="rerun from a saved manifest (overrides flags)")
    p.add_argument("--overhead", type=float, default=DEFAULT_OVERHEAD)
    p.add_argument("--out", help="directory for tokens, report and manifest")

    p = sub.add_parser("sweep", parents=[common], help="acceptance rate vs compression ratio")
    _model_args(p)
    _prompt_args(p, count=4, max_tokens=32)
    p.add_argument("--prunes", type=_float_list, default=GRID_PRUNES)
    p.add_argument("--truncs", type=_int_list, default=GRID_TRUNCS)
    p.add_argument("--out", help="directory for the table and manifest")

    p = sub.add_parser("gridsearch", parents=[common], help="objective-driven search over draft configs")
    _model_args(p)
    _prompt_args(p, count=DEFAULT_DEV_PROMPTS, max_tokens=32)
    p.add_argument("--prunes", type=_float_list, default=GRID_PRUNES)
    p.add_argument("--truncs", type=_int_list, default=GRID_TRUNCS)
    p.add_argument("--out", help="directory for the table and manifest")

    p = sub.add_parser("entropy", parents=[common], help="exponent entropy and unary cost per tensor")
    _model_args(p)
    p.add_argument("inputs", nargs="*", help="raw tensor or .cass files (default: toy model tensors)")
    p.add_argument("--source", choices=("weights", "kv"), default="weights",
                   help="toy model tensors to report when no files are given")
    return parser


# -- commands ----------------------------------------------------------------------


def _hw(args) -> HardwareProfile:
    return HardwareProfile(args.bandwidth * 1e9, f"{args.bandwidth:g}GB/s")


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


def _load_container(path):
    return from_bytes(_read_file(path))


def _stats_lines(t) -> list[str]:
    st = compression_stats(t)
    return [
        f"elements={st.n}",
        f"kept={st.k}",
        f"spec_bits={st.spec_bits}",
        f"verify_bits={st.verify_bits}",
        f"spec_bits_per_elem={st.spec_bits_per_elem:.6g}",
        f"total_bits_per_elem={st.total_bits_per_elem:.6g}",
        f"compression_ratio={st.compression_ratio:.6g}",
    ]


def cmd_encode(args) -> int:
    try:
        values = read_bf16(args.input)
    except OSError as e:
        raise InputError(f"cannot read {args.input}: {e.strerror}") from None
    # no calibration data for a bare tensor: plain magnitude per row
    rows = values.reshape(-1, values.shape[-1]) if values.ndim >= 1 else values.reshape(1, 1)
    if rows.size == 0:
        raise InputError("tensor is empty")
    mags = np.abs(bf16_to_f32(rows).astype(np.float64))
    bitmap = select_topk_per_row(mags, 1.0 - args.prune).bits.reshape(values.shape)
    t = encode_tensor(values, bitmap, args.mode, args.truncate)
    packed = b""
    if args.superblock:
        packed = superblock.serialize(superblock.pack(t, args.view, args.superblock), args.view)
    out = Path(args.output)
    out.write_bytes(to_bytes(t, packed))
    manifest = RunManifest(
        "encode", args.seed, TinyLMConfig(), draft_config(args), args.bandwidth * 1e9,
        prompt_source=f"file:{args.input}", outputs=[str(out)],
    )
    (out.parent / (out.name + ".manifest")).write_text(manifest.to_text())
    print(f"wrote {out} ({out.stat().st_size} bytes)")
    print(f"mode={t.mode}")
    print("\n".join(_stats_lines(t)))
    return 0


def cmd_decode(args) -> int:
    t, _ = _load_container(args.input)
    res = decode(t, args.view)
    write_tensor_file(args.output, res.values)
    print(f"wrote {args.output} view={args.view} elements={t.n}")
    if res.underflow:
        print(f"mx_underflow={res.underflow}")
    return 0


def cmd_inspect(args) -> int:
    data = _read_file(args.input)
    t, packed = from_bytes(data)
    names = {1: "unary (lossless)", 2: "MX (lossy)"}
    print(f"file={args.input}")
    print(f"file_bytes={len(data)}")
    print(f"header_bytes={header_size(t)}")
    print(f"mode={t.mode} {names[t.mode]}")
    print(f"dims={'x'.join(str(d) for d in t.dims)}")
    print(f"m_s={t.m_s} truncated_bits={t.truncated_bits}")
    if t.mode == MODE_UNARY:
        print(f"codebook={' '.join(str(int(s)) for s in t.codebook.ranked_symbols)}")
    else:
        print(f"mx_block_size={t.block_size}")
    total = 0
    for name in SECTIONS:
        nbytes = t.section(name).nbytes
        total += nbytes
        print(f"section.{name}={nbytes}")
    print(f"sections_total={total}")
    print(f"packed_bytes={len(packed)}")
    if packed:
        view, sbs = superblock.deserialize(packed)
        print(f"packed_view={view} superblocks={len(sbs)}")
    print("\n".join(_stats_lines(t)))
    return 0


def _manifest_from_args(args, command: str) -> RunManifest:
    if getattr(args, "manifest", None):
        text = _read_file(args.manifest).decode("utf-8", errors="replace")
        return RunManifest.from_text(text)
    return RunManifest(
        command, args.seed, model_config(args), draft_config(args), args.bandwidth * 1e9,
        f"{args.bandwidth:g}GB/s", args.sampling, args.temperature, args.max_tokens,
        prompt_source_from_args(args),
    )


def run_simulation(manifest: RunManifest, overhead: float = DEFAULT_OVERHEAD):
    """(report lines, per-prompt speculative outputs) for one manifest."""
    model = init_tiny_lm(manifest.seed, manifest.model)
    cfg = manifest.cfg
    prompts = resolve_prompts(manifest.prompt_source, manifest.model.vocab)
    dm = build_draft_model(model, cfg)
    stats = SpecRunStats(cfg.gamma)
    outputs, match = [], True
    for i, prompt in enumerate(prompts):
        seed = manifest.seed + i
        out, st = run_speculative(model, cfg, prompt, manifest.max_tokens, manifest.sampling, seed,
                                  manifest.temperature, draft_model=dm)
        base = run_autoregressive(model, prompt, manifest.max_tokens, manifest.sampling, seed,
                                  manifest.temperature)
        match &= out == base
        stats.merge(st)
        outputs.append(out)
    lines = [f"config={cfg.label()}", f"sampling={manifest.sampling}", f"prompts={len(prompts)}"]
    lines += [f"{k}={v}" for k, v in stats.report().items()]
    lines += [
        f"weight_compression_ratio={dm.compression_ratio:.6g}",
        f"nominal_compression_ratio={nominal_ratio(cfg):.6g}",
        f"mx_underflow={dm.mx_underflow}",
        f"modeled_gain={speedup_from_stats(stats, manifest.hw, overhead):.6g}",
        f"bandwidth={manifest.hw.label}",
    ]
    if manifest.sampling == GREEDY:
        lines.append(f"lossless: outputs match baseline = {'true' if match else 'false'}")
    return lines, outputs


def cmd_simulate(args) -> int:
    manifest = _manifest_from_args(args, "simulate")
    lines, outputs = run_simulation(manifest, args.overhead)
    print("\n".join(lines))
    for out in outputs:
        print("tokens: " + " ".join(str(t) for t in out))
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "tokens.txt").write_text("".join(" ".join(map(str, o)) + "\n" for o in outputs))
        (d / "report.txt").write_text("\n".join(lines) + "\n")
        manifest.outputs = [str(d / "tokens.txt"), str(d / "report.txt")]
        write_manifest(manifest, d)
    return 0


def _save_table(args, manifest: RunManifest, name: str, text: str):
    if not args.out:
        return
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text + "\n")
    manifest.outputs = [str(d / name)]
    write_manifest(manifest, d)


def cmd_sweep(args) -> int:
    manifest = _manifest_from_args(args, "sweep")
    model = init_tiny_lm(args.seed, manifest.model)
    prompts = resolve_prompts(manifest.prompt_source, manifest.model.vocab)
    configs = tradeoff_configs(args.prunes, args.truncs, args.mode, args.gamma)
    rows = sweep_tradeoff(model, configs, prompts, args.max_tokens, args.sampling, args.seed)
    table = format_table(
        ("kind", "w_p", "w_t", "kv_p", "kv_t", "nominal_ratio", "measured_ratio", "alpha"),
        [(r.kind, r.cfg.w_p, r.cfg.w_t, r.cfg.kv_p, r.cfg.kv_t, r.nominal_ratio, r.measured_ratio, r.alpha)
         for r in rows],
    )
    print(table)
    _save_table(args, manifest, "sweep.tsv", table)
    return 0


def cmd_gridsearch(args) -> int:
    manifest = _manifest_from_args(args, "gridsearch")
    model = init_tiny_lm(args.seed, manifest.model)
    prompts = resolve_prompts(manifest.prompt_source, manifest.model.vocab)
    grid = search_grid(args.prunes, args.truncs, args.mode, args.gamma)
    res = grid_search(model, prompts, grid, args.max_tokens, args.sampling, args.seed)
    table = format_table(
        ("w_p", "kv_p", "w_t", "kv_t", "alpha", "J", "J_measured", "draft_bytes"),
        [(r.cfg.w_p, r.cfg.kv_p, r.cfg.w_t, r.cfg.kv_t, r.alpha, r.j, r.j_measured, r.spec_bytes)
         for r in res.rows],
    )
    print(table)
    print(f"best: {res.best.label()} J={res.best_row.j:.6g} alpha={res.best_row.alpha:.6g}")
    _save_table(args, manifest, "gridsearch.tsv", table + f"\n# best: {res.best.label()}")
    return 0


def _kv_tensors(args) -> dict[str, np.ndarray]:
    model = init_tiny_lm(args.seed, model_config(args))
    cfg = model.config
    prompt = random_prompts(args.seed, 1, 64, cfg.vocab)[0]
    kv = KvStore(cfg)
    forward(model.raw_view(), kv, prompt)
    out = {}
    for li in range(cfg.layers):
        out[f"l{li}.k"] = (kv.k[li, : len(prompt)].view(np.uint32) >> 16).astype(np.uint16)
        out[f"l{li}.v"] = (kv.v[li, : len(prompt)].view(np.uint32) >> 16).astype(np.uint16)
    return out


def cmd_entropy(args) -> int:
    tensors = {}
    if args.inputs:
        for path in args.inputs:
            data = _read_file(path)
            if data[:4] == MAGIC:
                tensors[path] = from_bytes(data)[0]
            else:
                tensors[path] = read_bf16(path)
    elif args.source == "kv":
        tensors = _kv_tensors(args)
    else:
        tensors = init_tiny_lm(args.seed, model_config(args)).weights
    rows = entropy_report(tensors)
    print(format_table(("tensor", "elements", "entropy", "avg_unary_bits"),
                       [(r.name, r.elements, r.entropy, r.avg_unary_bits) for r in rows]))
    return 0


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "inspect": cmd_inspect,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "gridsearch": cmd_gridsearch,
    "entropy": cmd_entropy,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
