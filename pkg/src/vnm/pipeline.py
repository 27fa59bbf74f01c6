"""End-to-end workflow: select a pattern, permute, prune, train, pack, check.

Config (TOML or JSON)::

    setting = "TS1"            # TS1 | TS2 | TS3
    seed = 0

    [pattern]                  # either a fixed pattern ...
    v = 16
    m = 5

    [selection]                # ... or a sift over a measured speedup table
    table = "speedups.csv"     # relative to the config file
    threshold = 1.34
    vset = [16, 32, 64, 128]
    mmax = 16

    [task]                     # toy teacher-student task (or weights = "W.vnmt")
    in_features = 80
    out_features = 32
    samples = 512

    [train]
    iters = 2000
    lr = 0.01

    [permute]
    iterations = 2

    [bench]                    # optional; timings are written to bench.csv only
    sizes = ["256x320x16"]

TS1 runs channel permutation, RIA pruning and fixed-mask training. TS2 runs
ABS pruning and SR-STE. TS3 runs three-stage LoRA (strategy E unless
``train.strategy`` says otherwise). Every artifact is listed with its sha256
in ``manifest.json``; files holding wall-clock timings are flagged there.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ActivationNorms, SparseMask, VnmError, VnmPattern
from .io import dump_json, read_speedup_table, read_tensor, write_packed, write_speedup_table, write_tensor
from .packformat import bench, count_mults, pack, spmm
from .permutation import alternate_cp
from .pruner import apply_mask
from .selection import SelectionQuery, ln_k, sift, sparsity_of
from .toytrain import TaskData, ToyTask, TrainConfig, three_stage_schedule, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

SETTINGS = ("TS1", "TS2", "TS3")
SECTIONS = {"setting", "seed", "pattern", "selection", "task", "train", "permute", "bench", "weights"}
LORA_KEYS = {"rank", "alpha", "strategy", "fractions"}
SEED_ENV = "VNM_SEED"


def load_config(path) -> dict:
    """Read a TOML or JSON config; relative paths inside resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise VnmError(f"config file {path} not found")
    text = path.read_text()
    try:
        cfg = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise VnmError(f"cannot parse {path}: {exc}") from exc
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def _resolve(cfg: dict, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def _seed(cfg: dict) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            return int(raw)
        except ValueError as exc:
            raise VnmError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    return int(cfg.get("seed", 0))


def _pattern(cfg: dict, report: dict) -> tuple[VnmPattern, Optional[float]]:
    if "selection" in cfg:
        sel = cfg["selection"]
        if "table" not in sel or "threshold" not in sel:
            raise VnmError("selection needs 'table' and 'threshold'")
        table = read_speedup_table(_resolve(cfg, sel["table"]))
        query = SelectionQuery(
            float(sel["threshold"]),
            table,
            tuple(sel.get("vset", (16, 32, 64, 128))),
            (4, int(sel.get("mmax", 16))),
        )
        res = sift(query)
        report["selection"] = res.to_json()
        # the 2:4 baseline takes its stripe height from the pattern section (default 16)
        v = res.v if res.v is not None else int(cfg.get("pattern", {}).get("v", 16))
        return VnmPattern(v, res.m), res.speedup
    if "pattern" not in cfg:
        raise VnmError("config needs a [pattern] or a [selection] section")
    p = cfg["pattern"]
    return VnmPattern(int(p.get("v", 16)), int(p.get("m", 5))), None


def _task(cfg: dict, seed: int) -> TaskData:
    t = dict(cfg.get("task", {}))
    weights = cfg.get("weights") or t.pop("weights", None)
    if weights:
        w = read_tensor(_resolve(cfg, weights))
        if w.ndim != 2:
            raise VnmError("weights must be a 2-D tensor")
        return ToyTask.from_weights(w, samples=int(t.get("samples", 512)), seed=seed)
    allowed = {"in_features", "out_features", "hidden", "samples", "shift_rank", "shift_scale"}
    unknown = set(t) - allowed
    if unknown:
        raise VnmError(f"unknown task keys {sorted(unknown)}")
    return ToyTask(seed=seed, **{k: t[k] for k in t}).build()


def _train_config(cfg: dict, setting: str, pattern: VnmPattern, seed: int, report: dict) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    if setting == "TS2":
        ignored = sorted(LORA_KEYS & set(t))
        if ignored:
            msg = f"TS2 trains all weights; ignoring LoRA settings {ignored}"
            warnings.warn(msg, stacklevel=3)
            report["warnings"].append(msg)
            for k in ignored:
                t.pop(k)
    kw = dict(
        mode={"TS1": "fixed", "TS2": "srste", "TS3": "lora"}[setting],
        v=pattern.v,
        m=pattern.m,
        seed=seed,
        criterion={"TS1": "ria", "TS2": "abs", "TS3": "ria"}[setting],
    )
    rename = {
        "iters": "total_iters",
        "lr": "learning_rate",
        "lambda": "srste_lambda",
        "interval": "mask_update_interval",
        "interval_epochs": "mask_update_epochs",
        "fractions": "stage_fractions",
        "batch": "batch_size",
        "a": "ria_exponent",
    }
    fields = set(TrainConfig.__dataclass_fields__)
    for key, val in t.items():
        name = rename.get(key, key)
        if name not in fields or name in ("mode", "v", "m", "seed"):
            raise VnmError(f"unknown train key {key!r}")
        kw[name] = tuple(val) if name == "stage_fractions" else val
    return TrainConfig(**kw)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Artifacts:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: dict[str, dict] = {}

    def path(self, name: str, timing: bool = False) -> Path:
        self.files[name] = {"timing": timing}
        return self.dir / name

    def json(self, name: str, obj) -> None:
        dump_json(obj, self.path(name))

    def manifest(self) -> dict:
        entries = {
            name: {"sha256": _sha256(self.dir / name), "timing": meta["timing"]}
            for name, meta in sorted(self.files.items())
        }
        dump_json({"files": entries}, self.dir / "manifest.json")
        return entries


def _parse_size(text: str) -> tuple[int, int, int]:
    try:
        r, c, n = (int(p) for p in str(text).lower().split("x"))
    except ValueError as exc:
        raise VnmError(f"bad size {text!r}; expected RxCxN") from exc
    return r, c, n


def run_pipeline(cfg: dict, out_dir) -> dict:
    """Run one setting end to end and return the JSON report (also written to disk)."""
    unknown = set(cfg) - SECTIONS - {"_base"}
    if unknown:
        raise VnmError(f"unknown config keys {sorted(unknown)}")
    setting = str(cfg.get("setting", "")).upper()
    if setting not in SETTINGS:
        raise VnmError(f"unknown setting {cfg.get('setting')!r}; expected one of {SETTINGS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = _Artifacts(out)
    seed = _seed(cfg)
    report: dict = {"setting": setting, "seed": seed, "warnings": []}

    pattern, speedup = _pattern(cfg, report)
    data = _task(cfg, seed)
    tcfg = _train_config(cfg, setting, pattern, seed, report)
    report["pattern"] = str(pattern)
    report.update(
        v=pattern.v,
        m=pattern.m,
        sparsity=sparsity_of(pattern.m),
        ln_k=ln_k(None if pattern.is_baseline else pattern.v, pattern.m),
        speedup=speedup,
    )
    for i, w in enumerate(data.base):
        write_tensor(w, art.path(f"weights_l{i}.vnmt"))
    log.info("%s with pattern %s, seed %d", setting, pattern, seed)

    if setting == "TS1":
        if len(data.base) != 1:
            raise VnmError("TS1 channel permutation needs a linear task (hidden = 0)")
        act = ActivationNorms.from_inputs(data.x, tcfg.ria_exponent)
        iters = int(cfg.get("permute", {}).get("iterations", 2))
        cp = alternate_cp(data.base[0], pattern, act, iters, "ria")
        art.json("perm.json", cp.perm.to_json())
        report["cp"] = {"before": cp.initial, "after": cp.objective, "trace": cp.trace}
        data = data.permuted(cp.perm.input_perm, cp.perm.output_perm)
    if setting == "TS3":
        sched = three_stage_schedule(tcfg.total_iters, tcfg.stage_fractions)
        report["schedule"] = [{"stage": s, "start": a, "end": b} for s, a, b in sched]

    run = train(data, tcfg)
    art.json("run.json", run.to_json())
    report["final_loss"] = run.final_loss
    report["strategy"] = tcfg.strategy if tcfg.mode == "lora" else None

    checks = []
    rng = np.random.default_rng(seed)
    for i, (w, mask_bits) in enumerate(zip(run.final_weights, run.final_masks)):
        write_tensor(mask_bits.astype(np.float32), art.path(f"mask_l{i}.vnmt"))
        mask = SparseMask.checked(mask_bits, pattern)
        wm = apply_mask(w, mask)
        write_tensor(wm, art.path(f"trained_l{i}.vnmt"))
        packed = pack(wm, mask)
        write_packed(packed, art.path(f"packed_l{i}.vnmp"))
        x = rng.standard_normal((w.shape[1], 8)).astype(np.float32)
        ref = wm.astype(np.float64) @ x.astype(np.float64)
        got = spmm(packed, x).astype(np.float64)
        err = float(np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-30))
        checks.append({"layer": i, "rel_error": err, "mults": count_mults(packed, 8), "dense_mults": w.size * 8})
    report["spmm_check"] = checks

    if "bench" in cfg:
        b = cfg["bench"]
        sizes = [_parse_size(s) for s in b.get("sizes", ["256x320x16"])]
        pats = [VnmPattern.parse(p) for p in b.get("patterns", [str(pattern)])]
        res = bench(sizes, pats, seed=seed, repeats=int(b.get("repeats", 9)))
        write_speedup_table(res.table, art.path("bench.csv", timing=True))
        report["bench_file"] = "bench.csv"

    art.json("report.json", report)
    report["manifest"] = art.manifest()
    return report


def verify_manifest(out_dir) -> list[str]:
    """Names of artifacts whose content no longer matches the manifest."""
    out = Path(out_dir)
    entries = json.loads((out / "manifest.json").read_text())["files"]
    return [n for n, e in sorted(entries.items()) if not (out / n).exists() or _sha256(out / n) != e["sha256"]]

