"""Command-line harness: run, verify and report the attention model.

Reports are JSON with sorted keys so equal inputs give byte-identical
output; wall-clock timings are included only with ``--timing``.  Exit
status is 0 when every requested verification passes, 1 when one fails and
2 on a usage error.
"""
import argparse
import contextlib
import csv
import dataclasses
import itertools
import json
import logging
import sys
import time
from pathlib import Path

from . import burble
from .backward import backward_fused, permutation_spread
from .config import AttnConfig, default_seed
from .exceptions import (
    DimensionMismatch,
    InvalidValue,
    SparkAttnException,
    UnsupportedMode,
    VerificationFailed,
    exit_status,
)
from .forward import forward_fused, forward_traditional
from .half import AccMode
from .io.binary import binread, binwrite
from .mma import ENGINES
from .oracle import attention_grad_ref, attention_ref, error_metrics
from .prng import WORKLOAD_STREAMS, generate_workload

logger = logging.getLogger(__name__)

# norm-relative error bounds against the binary64 oracle
TOLERANCES = {
    "fused_fp32": 1e-3,
    "fused_fp16": 2e-2,
    "traditional_fp32": 2e-3,
    "traditional_fp16": 4e-2,
    "backward": 1e-2,
}

# dropout rate of default runs
DEFAULT_DROPOUT = 0.1

SWEEP_FIELDS = [
    "batch",
    "heads",
    "n",
    "d",
    "causal",
    "acc_mode",
    "path",
    "mean_rel",
    "max_rel",
    "norm_rel",
    "passed",
    "matrix_pass_reads",
    "matrix_pass_writes",
    "element_reads",
    "element_writes",
    "mma_invocations",
    "shuffle_events",
    "convert_events",
    "layout_converts",
    "atomic_adds",
]


@dataclasses.dataclass
class RunReport:
    """Everything a ``forward`` or ``backward`` run reports."""

    command: str
    config: dict
    paths: dict = dataclasses.field(default_factory=dict)
    verified: bool = None
    failures: list = dataclasses.field(default_factory=list)

    def check(self, name, metrics, tolerance, key="norm_rel"):
        ok = metrics[key] <= tolerance
        if not ok:
            self.failures.append(f"{name}: {key} {metrics[key]:.3e} exceeds {tolerance:.3e}")
        return ok

    def as_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _shape_args(parser):
    parser.add_argument("--batch", type=int, default=1)
    parser.add_argument("--heads", type=int, default=1)
    parser.add_argument("--n", type=int, default=64, help="Sequence length.")
    parser.add_argument("--d", type=int, default=64, help="Head dimension.")
    parser.add_argument("--hidden", type=int, default=None,
                        help="Model width; sets heads to hidden // d.")
    parser.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                        help="Seed for workloads and dropout.  Default: $SPARKATTN_SEED or 0.")


def _run_args(parser):
    parser.add_argument("--br", type=int, default=None, help="Query tile rows.")
    parser.add_argument("--bc", type=int, default=None, help="Key tile columns.")
    parser.add_argument("--causal", action="store_true")
    parser.add_argument("--dropout", type=float, default=DEFAULT_DROPOUT)
    parser.add_argument("--scale", type=float, default=None, help="Default: 1/sqrt(d).")
    parser.add_argument("--engine", choices=ENGINES, default="vector")
    parser.add_argument("--warps", type=int, default=4)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--verify", action="store_true", help="Compare against the oracle.")
    parser.add_argument("--out", help="Write the report here instead of stdout.")
    parser.add_argument("--timing", action="store_true", help="Add wall-clock seconds.")
    parser.add_argument("--save", help="Directory for SPAT output tensors.")


def build_parser():
    parser = argparse.ArgumentParser(prog="sparkattn", description=__doc__.splitlines()[0])
    parser.add_argument("--burble", action="store_true", help="Diagnostics on stderr.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="Fused forward pass.")
    _shape_args(p)
    _run_args(p)
    p.add_argument("--acc", choices=["fp16", "fp32", "both"], default="fp32")
    p.add_argument("--traditional", action="store_true", help="Also run the 3-pass baseline.")
    for name in ("q", "k", "v"):
        p.add_argument(f"--{name}", help=f"SPAT file for {name.upper()}.")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("backward", help="Fused backward pass.")
    _shape_args(p)
    _run_args(p)
    p.add_argument("--acc", choices=["fp16", "fp32"], default="fp16")
    p.add_argument("--replay", type=int, default=0,
                   help="Random dQ accumulation orders to compare.")
    for name in WORKLOAD_STREAMS:
        p.add_argument(f"--{name}", help=f"SPAT file for {name}.")
    p.set_defaults(func=cmd_backward)

    p = sub.add_parser("sweep", help="CSV table over a grid of configurations.")
    p.add_argument("--n", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--d", type=int, nargs="+", default=[64, 128])
    p.add_argument("--causal", choices=["off", "on"], nargs="+", default=["off"])
    p.add_argument("--acc", choices=["fp16", "fp32"], nargs="+", default=["fp16", "fp32"])
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--hidden", type=int, default=None,
                   help="Model width; heads = hidden // d for each d.")
    p.add_argument("--tokens", type=int, default=None,
                   help="Tokens per batch; batch = tokens // n for each n.")
    p.add_argument("--br", type=int, default=None)
    p.add_argument("--bc", type=int, default=None)
    p.add_argument("--dropout", type=float, default=DEFAULT_DROPOUT)
    p.add_argument("--seed", type=lambda s: int(s, 0), default=None)
    p.add_argument("--engine", choices=ENGINES, default="vector")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--traditional", action="store_true")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--out", help="Write CSV here instead of stdout.")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("generate", help="Write seeded Q, K, V and dO SPAT files.")
    _shape_args(p)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_generate)
    return parser


def _seed(args):
    return default_seed() if args.seed is None else args.seed


def _per(total, part, what, of):
    """``total // part``, which must divide evenly."""
    if part <= 0 or total <= 0 or total % part:
        raise InvalidValue(f"{what} {total} must be a positive multiple of {of} {part}")
    return total // part


def _heads(args, d):
    if args.hidden is None:
        return args.heads
    return _per(args.hidden, d, "--hidden", "d")


def _config(args, acc, **shape):
    return AttnConfig(
        batch=shape.get("batch", args.batch),
        heads=shape.get("heads") or _heads(args, shape.get("head_dim", args.d)),
        seq_len=shape.get("seq_len", args.n),
        head_dim=shape.get("head_dim", args.d),
        tile_rows=args.br,
        tile_cols=args.bc,
        causal=args.causal,
        dropout_p=args.dropout,
        seed=_seed(args),
        acc_mode=acc,
        softmax_scale=args.scale,
        engine=args.engine,
        warps=args.warps,
        workers=args.workers,
    )


def _inputs(args, names):
    """Tensors read from SPAT files and the shape they imply, or ``(None, {})``."""
    given = [name for name in names if getattr(args, name) is not None]
    if given and len(given) != len(names):
        raise InvalidValue(f"give all of {', '.join('--' + n for n in names)} or none")
    if given:
        tensors = {name: binread(getattr(args, name)) for name in names}
        shape = tensors[names[0]].shape
        for name, x in tensors.items():
            if x.ndim != 4 or x.shape != shape:
                raise DimensionMismatch(f"--{name}: expected a 4-d tensor shaped {shape}")
        return tensors, dict(zip(("batch", "heads", "seq_len", "head_dim"), shape))
    return None, {}


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _save(directory, **tensors):
    if directory is None:
        return
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, x in tensors.items():
        binwrite(x, directory / f"{name}.spat")


def _timed(fn, *args):
    start = time.perf_counter()
    result = fn(*args)
    return result, time.perf_counter() - start


def _finish(report, args):
    if args.verify:
        report.verified = not report.failures
    _emit(report.dumps(), args.out)
    if report.failures:
        raise VerificationFailed("; ".join(report.failures))
    return 0


def cmd_forward(args):
    tensors, shape = _inputs(args, ["q", "k", "v"])
    modes = ["fp16", "fp32"] if args.acc == "both" else [args.acc]
    configs = [_config(args, mode, **shape) for mode in modes]
    if tensors is None:
        tensors = generate_workload(configs[0].shape, configs[0].seed, names=("q", "k", "v"))
    Q, K, V = tensors["q"], tensors["k"], tensors["v"]
    config = configs[0].as_dict()
    if len(configs) > 1:
        config["acc_mode"] = args.acc
    report = RunReport("forward", config)
    reference = attention_ref(Q, K, V, configs[0]) if args.verify else None

    for cfg in configs:
        runs = [("fused", forward_fused)]
        if args.traditional:
            runs.append(("traditional", forward_traditional))
        for path, fn in runs:
            name = f"{path}_{cfg.acc_mode.value}"
            out, seconds = _timed(fn, Q, K, V, cfg)
            entry = {"traffic": out.traffic.as_dict(), "mask_hash": out.mask_hash}
            if args.timing:
                entry["wall_clock_s"] = seconds
            if reference is not None:
                entry["errors"] = {
                    "O": error_metrics(out.O, reference[0]),
                    "lse": error_metrics(out.lse, reference[2]),
                }
                report.check(name, entry["errors"]["O"], TOLERANCES[name])
            report.paths[name] = entry
            if path == "fused":
                _save(args.save, **{f"o_{cfg.acc_mode.value}": out.O,
                                    f"lse_{cfg.acc_mode.value}": out.lse})
    return _finish(report, args)


def cmd_backward(args):
    tensors, shape = _inputs(args, list(WORKLOAD_STREAMS))
    cfg = _config(args, args.acc, **shape)
    if cfg.acc_mode is not AccMode.FP16_ACC:
        raise UnsupportedMode("backward runs only with --acc fp16")
    if tensors is None:
        tensors = generate_workload(cfg.shape, cfg.seed)
    Q, K, V, dO = (tensors[name] for name in WORKLOAD_STREAMS)
    report = RunReport("backward", cfg.as_dict())

    # forward first: it supplies lse
    fwd, fwd_seconds = _timed(forward_fused, Q, K, V, cfg)
    grads, seconds = _timed(backward_fused, Q, K, V, dO, fwd.lse, cfg)
    forward_entry = {"traffic": fwd.traffic.as_dict(), "mask_hash": fwd.mask_hash}
    backward_entry = {
        "traffic": grads.traffic.as_dict(),
        "recompute_traffic": grads.recompute_traffic.as_dict(),
        "mask_hash": grads.mask_hash,
        "mask_hash_match": grads.mask_hash == fwd.mask_hash,
    }
    if args.timing:
        forward_entry["wall_clock_s"] = fwd_seconds
        backward_entry["wall_clock_s"] = seconds
    if args.replay:
        backward_entry["dq_replay_ulp_spread"] = permutation_spread(
            grads.dq, trials=args.replay, seed=cfg.seed
        )
    if args.verify:
        ref = attention_grad_ref(Q, K, V, dO, cfg)
        backward_entry["errors"] = {}
        for name, test, expected in zip(("dQ", "dK", "dV"), (grads.dQ, grads.dK, grads.dV), ref):
            metrics = error_metrics(test, expected)
            backward_entry["errors"][name] = metrics
            report.check(name, metrics, TOLERANCES["backward"])
        if not backward_entry["mask_hash_match"]:
            report.failures.append("dropout masks differ between forward and backward")
    report.paths["forward_fp16"] = forward_entry
    report.paths["backward_fp16"] = backward_entry
    _save(args.save, dq=grads.dQ, dk=grads.dK, dv=grads.dV)
    return _finish(report, args)


def sweep_rows(args):
    """One row per (n, d, causal, acc) and path, in grid order."""
    if not (args.n and args.d and args.causal and args.acc):
        raise InvalidValue("sweep needs at least one value for each of --n, --d, --causal, --acc")
    seed = _seed(args)
    for n, d, causal, acc in itertools.product(args.n, args.d, args.causal, args.acc):
        cfg = AttnConfig(
            batch=args.batch if args.tokens is None else _per(args.tokens, n, "--tokens", "n"),
            heads=_heads(args, d),
            seq_len=n,
            head_dim=d,
            tile_rows=args.br,
            tile_cols=args.bc,
            causal=causal == "on",
            dropout_p=args.dropout,
            seed=seed,
            acc_mode=acc,
            engine=args.engine,
            workers=args.workers,
        )
        t = generate_workload(cfg.shape, seed, names=("q", "k", "v"))
        reference = attention_ref(t["q"], t["k"], t["v"], cfg)[0] if args.verify else None
        runs = [("fused", forward_fused)]
        if args.traditional:
            runs.append(("traditional", forward_traditional))
        for path, fn in runs:
            out = fn(t["q"], t["k"], t["v"], cfg)
            row = {
                "batch": cfg.batch,
                "heads": cfg.heads,
                "n": n,
                "d": d,
                "causal": causal,
                "acc_mode": acc,
                "path": path,
            }
            if reference is not None:
                metrics = error_metrics(out.O, reference)
                for key in ("mean_rel", "max_rel", "norm_rel"):
                    row[key] = metrics[key]
                row["passed"] = metrics["norm_rel"] <= TOLERANCES[f"{path}_{acc}"]
            row.update(out.traffic.as_dict())
            logger.debug("sweep row %s", row)
            yield row


def cmd_sweep(args):
    if args.out is None:
        f = sys.stdout
    else:
        f = open(args.out, "w", newline="")
    failed = []
    try:
        writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for row in sweep_rows(args):
            writer.writerow(row)
            if row.get("passed") is False:
                failed.append(f"n={row['n']} d={row['d']} {row['causal']} {row['acc_mode']}")
    finally:
        if f is not sys.stdout:
            f.close()
    if failed:
        raise VerificationFailed("sweep rows above tolerance: " + ", ".join(failed))
    return 0


def cmd_generate(args):
    seed = _seed(args)
    cfg = AttnConfig(batch=args.batch, heads=_heads(args, args.d), seq_len=args.n,
                     head_dim=args.d, seed=seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, x in generate_workload(cfg.shape, seed).items():
        path = out_dir / f"{name}.spat"
        binwrite(x, path)
        files[name] = str(path)
    _emit(json.dumps({"files": files, "seed": seed, "shape": list(cfg.shape)},
                     indent=2, sort_keys=True) + "\n", None)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with burble() if args.burble else contextlib.nullcontext():
            return args.func(args)
    except SparkAttnException as exc:
        print(f"sparkattn: error: {exc}", file=sys.stderr)
        return exit_status(exc)
