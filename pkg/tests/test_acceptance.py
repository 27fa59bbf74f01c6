"""End-to-end acceptance checks, one test per criterion.

Each test tags itself through the ``criterion`` fixture; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import csv
import itertools
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from vnm.core import PermutationPair, SpeedupTable, VnmPattern, validate_mask
from vnm.hungarian import assignment_value, hungarian
from vnm.io import parse_speedup_table, read_speedup_table
from vnm.packformat import count_mults, pack, spmm, unpack
from vnm.permutation import alternate_cp, cp_objective
from vnm.pruner import apply_mask, block_keep, prune_vnm, retained_columns
from vnm.report import write_report
from vnm.selection import SelectionQuery, ln_k, network_log_md, sift
from vnm.toytrain import (
    STRATEGIES,
    LoraLayer,
    ToyTask,
    TrainConfig,
    ablate,
    effective_weight,
    fixed_mask_step,
    grad_norm_report,
    loss_and_grads,
    srste_step,
    train,
)

REFERENCE_BS1 = {(None, 4): 1.26, (64, 5): 1.49, (128, 5): 1.65, (128, 7): 1.99, (128, 8): 2.16}


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# 1 ---------------------------------------------------------------------------


def test_c01_mask_validity(criterion):
    criterion(1, "mask validity, density exactly 2/m over 1000 matrices")
    rng = np.random.default_rng(1)
    combos = list(itertools.product((1, 2, 16, 64), (4, 5, 8, 16)))

    def run():
        for i in range(1000):
            v, m = combos[i % len(combos)]
            shape = (v * int(rng.integers(1, 4)), m * int(rng.integers(1, 5)))
            mask = prune_vnm(np.abs(rng.standard_normal(shape)), VnmPattern(v, m))
            assert validate_mask(mask).ok, (v, m)
            assert mask.bits.sum() * m == 2 * mask.bits.size
        for m, sparsity in ((5, 0.60), (8, 0.75)):
            mask = prune_vnm(rng.random((16, 40)), VnmPattern(16, m))
            assert 1.0 - mask.density() == pytest.approx(sparsity, abs=0)

    _, dt = _timed(run)
    assert dt < 30


# 2 ---------------------------------------------------------------------------


def test_c02_pruner_matches_exhaustive(criterion):
    criterion(2, "block prune equals exhaustive C(m,4) and C(4,2) search on 200 blocks")
    rng = np.random.default_rng(2)

    def run():
        for _ in range(200):
            v, m = int(rng.integers(1, 5)), int(rng.integers(4, 9))
            block = rng.random((v, m))
            best_cols = max(itertools.combinations(range(m), 4),
                            key=lambda cs: np.abs(block[:, list(cs)]).sum())
            assert tuple(retained_columns(block)) == best_cols
            keep = block_keep(block)
            for r in range(v):
                best_pair = max(itertools.combinations(best_cols, 2), key=lambda cs: block[r, list(cs)].sum())
                assert tuple(np.flatnonzero(keep[r])) == best_pair

    _, dt = _timed(run)
    assert dt < 10


# 3 ---------------------------------------------------------------------------


def _ln_k_oracle(v, m):
    mpmath.mp.dps = 40
    return (mpmath.log(mpmath.binomial(m, 4)) + v * mpmath.log(6)) / (v * m)


def test_c03_md_ordering(criterion):
    criterion(3, "network MD ordering equals ln K ordering; (16,16) > (32,16) > (128,15)")
    rng = np.random.default_rng(3)
    grid = [(v, m) for v in (16, 32, 64, 128) for m in range(5, 17)]

    mpmath.mp.dps = 40
    # log of the mask count of one V x M block: C(m,4) column picks times 6 row picks per row
    per_block = {(v, m): mpmath.log(mpmath.binomial(m, 4)) + v * mpmath.log(6) for v, m in grid}

    def run():
        for v, m in grid:
            assert ln_k(v, m) == pytest.approx(float(_ln_k_oracle(v, m)), rel=1e-12)
        for _ in range(100):
            # every dimension divisible by all V and M in the grid
            shapes = [(int(rng.integers(1, 16)) * 128, int(rng.integers(1, 8)) * 720720)
                      for _ in range(int(rng.integers(1, 8)))]
            md = {k: sum((r // k[0]) * (c // k[1]) for r, c in shapes) * per_block[k] for k in grid}
            for a, b in itertools.combinations(grid, 2):
                net = np.sign(network_log_md(*a, shapes) - network_log_md(*b, shapes))
                assert net == np.sign(ln_k(*a) - ln_k(*b))
                assert net == np.sign(float(md[a] - md[b]))
        assert ln_k(16, 16) > ln_k(32, 16) > ln_k(128, 15)

    _, dt = _timed(run)
    assert dt < 5


# 4 ---------------------------------------------------------------------------


def test_c04_selection_reproduction(criterion):
    criterion(4, "sift picks (64,5) at 1.34 and (128,7) at 1.88")
    table = parse_speedup_table("v,m,speedup\n*,4,1.26\n64,5,1.49\n128,5,1.65\n128,7,1.99\n128,8,2.16\n")
    assert table.entries == SpeedupTable(REFERENCE_BS1).entries

    def run():
        a = sift(SelectionQuery(1.34, table))
        b = sift(SelectionQuery(1.88, table))
        assert (a.v, a.m) == (64, 5)
        assert (b.v, b.m) == (128, 7)

    _, dt = _timed(run)
    assert dt < 1


# 5 ---------------------------------------------------------------------------


def test_c05_hungarian_brute_force(criterion):
    criterion(5, "hungarian equals brute force on 500 matrices, n <= 7")
    rng = np.random.default_rng(5)
    perms = {n: np.array(list(itertools.permutations(range(n)))) for n in range(1, 8)}

    def run():
        for i in range(500):
            n = 1 + i % 7
            cost = rng.integers(-20, 21, size=(n, n)).astype(float) if i % 2 else rng.random((n, n))
            totals = cost[np.arange(n), perms[n]].sum(axis=1)
            for maximize, best in ((False, totals.min()), (True, totals.max())):
                assign = hungarian(cost, maximize=maximize)
                assert sorted(assign.tolist()) == list(range(n))
                assert assignment_value(cost, assign) == pytest.approx(best, abs=1e-9)

    _, dt = _timed(run)
    assert dt < 10


# 6 ---------------------------------------------------------------------------


def _set_partitions(items, size):
    """All ways to split ``items`` into unordered blocks of ``size``."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for others in itertools.combinations(rest, size - 1):
        remaining = [x for x in rest if x not in others]
        for tail in _set_partitions(remaining, size):
            yield [(first, *others)] + tail


def test_c06_cp_monotone(criterion):
    criterion(6, "CP trace non-decreasing, final >= identity, bounded by exhaustive search")
    rng = np.random.default_rng(6)

    def run():
        pattern = VnmPattern(2, 5)
        for _ in range(100):
            w = rng.standard_normal((8, 10))
            res = alternate_cp(w, pattern, iterations=2)
            assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
            assert res.objective >= res.initial
            assert res.objective == cp_objective(w, res.perm, pattern)
        pattern = VnmPattern(1, 5)
        for _ in range(5):
            w = rng.standard_normal((4, 10))
            identity = cp_objective(w, PermutationPair.identity(4, 10), pattern)
            best = max(
                cp_objective(w, PermutationPair(np.concatenate(part), np.arange(4)), pattern)
                for part in _set_partitions(list(range(10)), 5)
            )
            res = alternate_cp(w, pattern, iterations=2)
            assert identity <= res.objective <= best + 1e-9

    _, dt = _timed(run)
    assert dt < 120


# 7 ---------------------------------------------------------------------------


def test_c07_pack_spmm(criterion):
    criterion(7, "pack round trip exact, spmm rel error <= 1e-5, mults = 2/m of dense")
    rng = np.random.default_rng(7)
    patterns = [VnmPattern(v, m) for v in (1, 2, 4, 16) for m in (4, 5, 8)]

    def run():
        for i in range(500):
            p = patterns[i % len(patterns)]
            shape = (p.v * int(rng.integers(1, 4)), p.m * int(rng.integers(1, 5)))
            w = rng.standard_normal(shape).astype(np.float32)
            mask = prune_vnm(np.abs(w), p)
            wm = apply_mask(w, mask)
            assert np.array_equal(unpack(pack(wm, mask)), wm)
        for (r, c, n), p in [((256, 320, 64), VnmPattern(16, 5)), ((256, 320, 64), VnmPattern(64, 8)),
                             ((64, 40, 8), VnmPattern(16, 5)), ((128, 128, 32), VnmPattern(32, 4))]:
            w = rng.standard_normal((r, c)).astype(np.float32)
            x = rng.standard_normal((c, n)).astype(np.float32)
            mask = prune_vnm(np.abs(w), p)
            wm = apply_mask(w, mask)
            packed = pack(wm, mask)
            ref = wm.astype(np.float64) @ x.astype(np.float64)
            got = spmm(packed, x).astype(np.float64)
            assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-5
            assert count_mults(packed, n) * p.m == 2 * r * c * n

    _, dt = _timed(run)
    assert dt < 60


# 8 ---------------------------------------------------------------------------


def test_c08_bench_direction(criterion, tmp_path):
    out = tmp_path / "speedups.csv"

    def run():
        subprocess.run(
            [sys.executable, "-m", "vnm.cli", "bench", "--sizes", "1024x1024x256",
             "--patterns", "64:2:5,64:2:8", "--out", str(out)],
            check=True, capture_output=True, text=True,
        )
        return read_speedup_table(out)

    table, dt = _timed(run)
    s5, s8 = table.get(64, 5), table.get(64, 8)
    criterion(8, "spmm speedup m=8 >= m=5 on 1024^2; table CSV parses", f"m=5 {s5:.3f}x, m=8 {s8:.3f}x")
    assert s8 >= s5
    assert dt < 180


# 9 ---------------------------------------------------------------------------


def _fd_check(f, params, grads, masks=None, rel_tol=1e-3, eps=1e-6):
    """Central differences on every entry (or every masked entry) of every parameter."""
    worst = 0.0
    masks = masks or [np.ones(p.shape, bool) for p in params]
    for p, g, mk in zip(params, grads, masks):
        idx = np.argwhere(mk)
        num = np.empty(len(idx))
        for k, (i, j) in enumerate(idx):
            old = p[i, j]
            p[i, j] = old + eps
            up = f()
            p[i, j] = old - eps
            down = f()
            p[i, j] = old
            num[k] = (up - down) / (2 * eps)
        ana = g[tuple(idx.T)]
        worst = max(worst, np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))
    assert worst <= rel_tol
    return worst


def test_c09_training_invariants(criterion):
    criterion(9, "masked updates, SR-STE decay, stage-3 mask frozen, gradients match finite differences")

    def run():
        pattern = VnmPattern(4, 5)
        # fixed-mask training keeps off-mask entries at exactly zero every step
        run_fixed = train(ToyTask(in_features=20, out_features=8, samples=64),
                          TrainConfig(mode="fixed", total_iters=0, v=4, m=5, batch_size=16))
        mask = run_fixed.final_masks[0]
        data = ToyTask(in_features=20, out_features=8, samples=64).build()
        w = run_fixed.final_weights[0]
        for t in range(50):
            _, (g,) = loss_and_grads([w], data.x, data.y)
            w = fixed_mask_step(w, g, 0.05, mask)
            assert np.all(w[~mask] == 0.0)

        # SR-STE with zero gradient shrinks pruned entries by (1 - lr*lam) per step
        rng = np.random.default_rng(9)
        w = rng.standard_normal((8, 20))
        mask = prune_vnm(np.abs(w), pattern).bits
        lr, lam = 0.1, 0.5
        for t in range(1, 21):
            w_next = srste_step(w, np.zeros_like(w), mask, lr, lam)
            assert np.all(np.abs(w_next[~mask] - (1 - lr * lam) * w[~mask]) <= 1e-6)
            assert np.array_equal(w_next[mask], w[mask])
            w = w_next

        # stage 3 of strategy E never changes the mask
        run_e = train(ToyTask(seed=0), TrainConfig(strategy="E", seed=0))
        stage3 = [c for c, s in zip(run_e.mask_changed, run_e.stage) if s == "fixed"]
        assert stage3 and not any(stage3)

        # analytic gradients against central differences
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            for hidden in (0, 12):
                task = ToyTask(in_features=10, out_features=4, hidden=hidden, samples=16, seed=seed)
                d = task.build()
                ws = [w + 0.1 * rng.standard_normal(w.shape) for w in d.base]
                masks = [prune_vnm(np.abs(w), VnmPattern(2, 5) if w.shape[1] % 5 == 0 else VnmPattern(2, 4)).bits
                         for w in ws]
                eff = lambda: [w * mk for w, mk in zip(ws, masks)]  # noqa: E731
                _, g = loss_and_grads(eff(), d.x, d.y)
                # straight-through gradient on retained entries
                _fd_check(lambda: loss_and_grads(eff(), d.x, d.y)[0], ws, g, masks)
            # LoRA adapters, all entries
            d = ToyTask(in_features=10, out_features=4, samples=16, seed=seed).build()
            layer = LoraLayer(d.base[0].copy(), 0.1 * rng.standard_normal((4, 3)),
                              rng.standard_normal((3, 10)), alpha=6.0,
                              mask=prune_vnm(np.abs(d.base[0]), VnmPattern(2, 5)).bits)
            _, (g_eff,) = loss_and_grads([effective_weight(layer)], d.x, d.y)
            gb, ga = layer.adapter_grads(g_eff)
            _fd_check(lambda: loss_and_grads([effective_weight(layer)], d.x, d.y)[0], [layer.b, layer.a], [gb, ga])

    _, dt = _timed(run)
    assert dt < 60


# 10 --------------------------------------------------------------------------


def test_c10_strategy_ordering(criterion, tmp_path):
    def run():
        rows = ablate(STRATEGIES, range(5), TrainConfig(total_iters=2000), ToyTask())
        again = ablate(STRATEGIES, range(5), TrainConfig(total_iters=2000), ToyTask())
        assert rows == again
        return rows

    rows, dt = _timed(run)
    mean = {s: float(np.mean([r["final_loss"] for r in rows if r["strategy"] == s])) for s in STRATEGIES}
    detail = " ".join(f"{s}={mean[s]:.4f}" for s in STRATEGIES)
    criterion(10, "mean final loss E <= C and E <= A over 5 seeds x 2000 iters", detail)
    abl = tmp_path / "ablation.csv"
    with abl.open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["strategy", "seed", "v", "m", "final_loss"])
        w.writeheader()
        w.writerows(rows)
    summary = write_report(tmp_path, tmp_path / "report")
    assert len(summary) == 25
    assert {r["strategy"] for r in summary} == set(STRATEGIES)
    assert mean["E"] <= mean["C"]
    assert mean["E"] <= mean["A"]
    assert dt < 300


# 11 --------------------------------------------------------------------------


def test_c11_grad_norm_report(criterion):
    def run():
        fixed = train(ToyTask(seed=0), TrainConfig(strategy="A", seed=0))
        dynamic = train(ToyTask(seed=0), TrainConfig(strategy="C", seed=0))
        return grad_norm_report(fixed, dynamic, window=50)

    rep, dt = _timed(run)
    criterion(11, "grad-norm comparison table produced (fraction is an observation)",
              f"fraction of windows dynamic < fixed = {rep.fraction_dynamic_lower:.3f}")
    assert len(rep.rows()) == len(rep.fixed_windows) == 40
    assert 0.0 <= rep.fraction_dynamic_lower <= 1.0
    json.dumps(rep.to_json())
    assert dt < 120


# 12 --------------------------------------------------------------------------


def _stable_files(out: Path) -> dict:
    manifest = json.loads((out / "manifest.json").read_text())["files"]
    return {name: (out / name).read_bytes() for name, e in manifest.items() if not e["timing"]}


def test_c12_pipeline_determinism(criterion, tmp_path):
    criterion(12, "vnm pipeline twice gives byte-identical artifacts (timings excluded)")
    configs = {
        "ts1.toml": 'setting = "TS1"\nseed = 3\n[pattern]\nv = 16\nm = 5\n[train]\niters = 400\n'
                    '[bench]\nsizes = ["64x80x8"]\nrepeats = 3\n',
        "ts2.json": json.dumps({"setting": "TS2", "seed": 3, "pattern": {"v": 16, "m": 5},
                                "train": {"iters": 400}}),
        "ts3.toml": 'setting = "TS3"\nseed = 3\n[pattern]\nv = 16\nm = 5\n[train]\niters = 400\n',
    }
    env = {k: v for k, v in os.environ.items() if k != "VNM_SEED"}

    def run():
        for name, text in configs.items():
            cfg = tmp_path / name
            cfg.write_text(text)
            outs = []
            for k in range(2):
                out = tmp_path / f"{cfg.stem}_{k}"
                subprocess.run([sys.executable, "-m", "vnm.cli", "pipeline", str(cfg), "--out", str(out)],
                               check=True, capture_output=True, text=True, env=env)
                outs.append(_stable_files(out))
            assert outs[0].keys() == outs[1].keys() and outs[0]
            for f in outs[0]:
                assert outs[0][f] == outs[1][f], f"{name}: {f} differs"

    _, dt = _timed(run)
    assert dt < 300
