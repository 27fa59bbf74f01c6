"""``vnm`` command line.

Exit status: 0 on success, 2 on invalid input, 1 on an internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ActivationNorms, SparseMask, VnmError, VnmPattern, validate_mask
from .importance import CRITERIA, scores_for
from .io import (
    dump_json,
    read_packed,
    read_speedup_table,
    read_tensor,
    write_packed,
    write_speedup_table,
    write_tensor,
)
from .packformat import REPEATS, WARMUP, bench, count_mults, pack, spmm, unpack
from .permutation import alternate_cp, apply_permutation_pair
from .pruner import apply_mask, prune_vnm
from .selection import SelectionQuery, sift
from .toytrain import MODES, STRATEGIES, ToyTask, TrainConfig, ablate, train

log = logging.getLogger("vnm")

SPMM_TOL = 1e-5


def _int_list(text: str) -> list[int]:
    """``"16,32"`` or an inclusive range ``"0..4"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc


def _size(text: str) -> tuple[int, int, int]:
    try:
        r, c, n = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; expected RxCxN") from exc
    return r, c, n


def _pattern(args) -> VnmPattern:
    return VnmPattern(args.v, args.m)


def _acts(args, cols: int) -> Optional[ActivationNorms]:
    if not getattr(args, "acts", None):
        return None
    a = read_tensor(args.acts)
    act = ActivationNorms(a, args.a) if a.ndim == 1 else ActivationNorms.from_inputs(a, args.a)
    if len(act) != cols:
        raise VnmError(f"{len(act)} activation norms for {cols} input channels")
    return act


def _weights(path) -> np.ndarray:
    w = read_tensor(path)
    if w.ndim != 2:
        raise VnmError(f"{path}: expected a 2-D weight tensor, got ndim={w.ndim}")
    return w


def _emit(obj, as_json: bool = True) -> None:
    if as_json:
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        print(obj)


# --------------------------------------------------------------------------
# subcommands


def cmd_select(args) -> int:
    table = read_speedup_table(args.table, args.batch_size)
    res = sift(SelectionQuery(args.threshold, table, tuple(args.vset), (4, args.mmax)))
    if args.json:
        _emit(res.to_json())
    else:
        v = "*" if res.v is None else res.v
        print(f"{v}:2:{res.m} speedup={res.speedup:g} ln_k={res.ln_k:.6f}")
    return 0


def cmd_prune(args) -> int:
    w = _weights(args.weights)
    pattern = _pattern(args)
    pattern.check_divisible(*w.shape)
    mask = prune_vnm(scores_for(w, args.criterion, _acts(args, w.shape[1])), pattern)
    write_tensor(mask.bits.astype(np.float32), args.out_mask)
    if args.out_weights:
        write_tensor(apply_mask(w, mask), args.out_weights)
    _emit({"pattern": str(pattern), "density": mask.density(), "kept": int(mask.bits.sum())})
    return 0


def cmd_permute(args) -> int:
    w = _weights(args.weights)
    pattern = _pattern(args)
    res = alternate_cp(w, pattern, _acts(args, w.shape[1]), args.iters, args.criterion)
    dump_json(res.perm.to_json(), args.out_perm)
    if args.out_weights:
        write_tensor(apply_permutation_pair(w, res.perm), args.out_weights)
    _emit({"before": res.initial, "after": res.objective, "trace": res.trace})
    return 0


def cmd_pack(args) -> int:
    w = _weights(args.weights)
    pattern = _pattern(args)
    if args.mask:
        bits = read_tensor(args.mask)
        if not np.isin(bits, (0.0, 1.0)).all():
            raise VnmError("mask tensor must hold only 0 and 1")
        mask = SparseMask.checked(bits.astype(bool), pattern)
    else:
        mask = prune_vnm(np.abs(w), pattern)
        w = apply_mask(w, mask)
    packed = pack(w, mask)
    write_packed(packed, args.out)
    _emit({"pattern": str(pattern), "rows": packed.rows, "cols": packed.cols, "values": int(packed.a_n.size)})
    return 0


def cmd_spmm_check(args) -> int:
    packed = read_packed(args.packed)
    if args.x:
        x = read_tensor(args.x)
        x = x.reshape(-1, 1) if x.ndim == 1 else x
    else:
        x = np.random.default_rng(args.seed).standard_normal((packed.cols, args.batch)).astype(np.float32)
    dense = _weights(args.weights) if args.weights else unpack(packed)
    ref = dense.astype(np.float64) @ x.astype(np.float64)
    got = spmm(packed, x).astype(np.float64)
    err = float(np.linalg.norm(got - ref) / max(float(np.linalg.norm(ref)), 1e-30))
    mults = count_mults(packed, x.shape[1])
    ok = err <= args.tol
    _emit({
        "rel_error": err,
        "tolerance": args.tol,
        "ok": ok,
        "mults": mults,
        "dense_mults": packed.rows * packed.cols * x.shape[1],
        "ratio": mults / max(packed.rows * packed.cols * x.shape[1], 1),
    })
    return 0 if ok else 2


def cmd_bench(args) -> int:
    res = bench(args.sizes, [VnmPattern.parse(p) for p in args.patterns.split(",")],
                seed=args.seed, warmup=args.warmup, repeats=args.repeats, include_dense=args.dense_control)
    write_speedup_table(res.table, args.out)
    if args.rows_json:
        dump_json({"warmup": res.warmup, "repeats": res.repeats, "rows": [asdict(r) for r in res.rows]},
                  args.rows_json)
    for r in res.rows:
        print(f"{r.pattern:>10} {r.rows}x{r.cols}x{r.x_cols}  dense {r.dense_s * 1e3:8.2f} ms  "
              f"sparse {r.sparse_s * 1e3:8.2f} ms  speedup {r.speedup:5.2f}")
    return 0


def _task(args) -> ToyTask:
    return ToyTask(in_features=args.in_features, out_features=args.out_features,
                   hidden=args.hidden, samples=args.samples, seed=args.seed)


def _train_config(args, strategy: str, seed: int) -> TrainConfig:
    return TrainConfig(
        mode=args.mode, strategy=strategy, learning_rate=args.lr, srste_lambda=args.lam,
        total_iters=args.iters, mask_update_interval=args.interval,
        mask_update_epochs=args.interval_epochs, criterion=args.criterion,
        v=args.v, m=args.m, seed=seed,
    )


def cmd_train_toy(args) -> int:
    run = train(_task(args), _train_config(args, args.strategy, args.seed))
    dump_json(run.to_json(), args.out)
    _emit({"final_loss": run.final_loss, "iters": len(run.loss), "out": str(args.out)})
    return 0


def cmd_ablate(args) -> int:
    strategies = [s.strip().upper() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad or not strategies:
        raise VnmError(f"unknown strategies {bad}; choose from {','.join(STRATEGIES)}")
    rows = ablate(strategies, args.seeds, _train_config(args, "E", 0), _task(args), jobs=args.jobs)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["strategy", "seed", "v", "m", "final_loss"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "final_loss": repr(r["final_loss"])})
    for s in strategies:
        losses = [r["final_loss"] for r in rows if r["strategy"] == s]
        print(f"{s}  mean final loss {np.mean(losses):.6f}  over {len(losses)} seeds")
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import load_config, run_pipeline

    report = run_pipeline(load_config(args.config), args.out)
    summary = {k: report.get(k) for k in ("setting", "pattern", "seed", "final_loss", "speedup")}
    if "cp" in report:
        summary["cp_before"], summary["cp_after"] = report["cp"]["before"], report["cp"]["after"]
    _emit(summary)
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    rows = write_report(args.artifacts, args.out)
    print(f"{len(rows)} rows -> {Path(args.out) / 'summary.csv'}")
    return 0


def cmd_validate(args) -> int:
    bits = read_tensor(args.mask)
    report = validate_mask(SparseMask(bits.astype(bool), _pattern(args)))
    print("ok" if report.ok else report.describe())
    return 0 if report.ok else 2


# --------------------------------------------------------------------------
# parser


def _add_pattern(p, v: int = 64, m: int = 5) -> None:
    p.add_argument("--v", type=int, default=v, help=f"block rows (default {v})")
    p.add_argument("--m", type=int, default=m, help=f"block columns (default {m})")


def _add_acts(p) -> None:
    p.add_argument("--acts", help="activation norms (1-D) or input samples (2-D) tensor")
    p.add_argument("--a", type=float, default=0.5, help="activation exponent (default 0.5)")


def _add_training(p) -> None:
    _add_pattern(p, 16, 5)
    p.add_argument("--mode", choices=MODES, default="lora")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lambda", dest="lam", type=float, default=2e-4, help="SR-STE decay")
    p.add_argument("--interval", type=int, default=20, help="LoRA mask update interval (iterations)")
    p.add_argument("--interval-epochs", type=int, default=5, help="SR-STE mask update interval (epochs)")
    p.add_argument("--criterion", choices=CRITERIA, default=None)
    p.add_argument("--in-features", type=int, default=80)
    p.add_argument("--out-features", type=int, default=32)
    p.add_argument("--hidden", type=int, default=0, help="hidden width; 0 for a linear model")
    p.add_argument("--samples", type=int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vnm", description="V:N:M sparsity toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", help="pick (V, M) from a speedup table")
    p.add_argument("--table", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--vset", type=_int_list, default=[16, 32, 64, 128])
    p.add_argument("--mmax", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("prune", help="one-shot V:N:M pruning")
    p.add_argument("--weights", required=True)
    _add_pattern(p)
    p.add_argument("--criterion", choices=CRITERIA, default="ria")
    _add_acts(p)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-weights")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("permute", help="channel permutation search")
    p.add_argument("--weights", required=True)
    _add_pattern(p)
    p.add_argument("--criterion", choices=CRITERIA, default="ria")
    _add_acts(p)
    p.add_argument("--iters", type=int, default=2)
    p.add_argument("--out-perm", required=True)
    p.add_argument("--out-weights")
    p.set_defaults(func=cmd_permute)

    p = sub.add_parser("pack", help="compress masked weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--mask", help="0/1 mask tensor; omitted = ABS-prune the weights first")
    _add_pattern(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("spmm-check", help="compare packed matmul with the dense product")
    p.add_argument("--packed", required=True)
    p.add_argument("--weights", help="dense masked weights to compare against (default: unpacked)")
    p.add_argument("--x", help="right operand tensor (default: random)")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=SPMM_TOL)
    p.set_defaults(func=cmd_spmm_check)

    p = sub.add_parser("bench", help="measure spmm speedups")
    p.add_argument("--sizes", type=lambda s: [_size(t) for t in s.split(",")], default=[(1024, 1024, 1024)])
    p.add_argument("--patterns", default="64:2:5,64:2:8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=WARMUP)
    p.add_argument("--repeats", type=int, default=REPEATS)
    p.add_argument("--dense-control", action="store_true", help="also time dense against dense")
    p.add_argument("--rows-json", help="write per-size timings here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="train the toy student once")
    _add_training(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="E")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate", help="final loss per LoRA strategy and seed")
    _add_training(p)
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--seeds", type=_int_list, default=list(range(5)))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate, seed=0)

    p = sub.add_parser("pipeline", help="run a TS1/TS2/TS3 workflow from a config file")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="summarize artifacts into CSV/JSON")
    p.add_argument("artifacts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check a 0/1 mask tensor against a pattern")
    p.add_argument("--mask", required=True)
    _add_pattern(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (VnmError, OSError) as exc:
        print(f"vnm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit status
        log.debug("internal error", exc_info=True)
        print(f"vnm: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
