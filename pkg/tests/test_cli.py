import csv
import json

import numpy as np
import pytest

from vnm.cli import main
from vnm.core import SpeedupTable, VnmPattern, validate_mask, SparseMask
from vnm.io import read_packed, read_speedup_table, read_tensor, write_speedup_table, write_tensor


@pytest.fixture
def weights(tmp_path):
    path = tmp_path / "W.vnmt"
    write_tensor(np.random.default_rng(0).standard_normal((128, 80)), path)
    return path


def test_select(tmp_path, capsys):
    write_speedup_table(SpeedupTable({(None, 4): 1.26, (64, 5): 1.49, (128, 5): 1.65, (128, 7): 1.99}),
                        tmp_path / "t.csv")
    assert main(["select", "--table", str(tmp_path / "t.csv"), "--threshold", "1.34"]) == 0
    assert capsys.readouterr().out.startswith("64:2:5")
    assert main(["select", "--table", str(tmp_path / "t.csv"), "--threshold", "1.88", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["pattern"] == "128:2:7"
    assert main(["select", "--table", str(tmp_path / "t.csv"), "--threshold", "9"]) == 2


def test_prune_pack_check(tmp_path, weights, capsys):
    mask, wp, packed = tmp_path / "M.vnmt", tmp_path / "Wp.vnmt", tmp_path / "P.vnmp"
    acts = tmp_path / "A.vnmt"
    write_tensor(np.linspace(0.5, 2, 80), acts)
    assert main(["prune", "--weights", str(weights), "--v", "64", "--m", "5", "--criterion", "ria",
                 "--acts", str(acts), "--out-mask", str(mask), "--out-weights", str(wp)]) == 0
    assert validate_mask(SparseMask(read_tensor(mask).astype(bool), VnmPattern(64, 5))).ok
    assert main(["validate", "--mask", str(mask), "--v", "64", "--m", "5"]) == 0
    assert main(["pack", "--weights", str(wp), "--mask", str(mask), "--v", "64", "--m", "5",
                 "--out", str(packed)]) == 0
    assert read_packed(packed).shape == (128, 80)
    capsys.readouterr()
    assert main(["spmm-check", "--packed", str(packed), "--weights", str(wp)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] and out["ratio"] == pytest.approx(0.4)


def test_permute(tmp_path, weights, capsys):
    assert main(["permute", "--weights", str(weights), "--v", "64", "--m", "5", "--iters", "1",
                 "--out-perm", str(tmp_path / "p.json"), "--out-weights", str(tmp_path / "Wq.vnmt")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["after"] >= out["before"]
    perm = json.loads((tmp_path / "p.json").read_text())
    assert sorted(perm["output_perm"]) == list(range(128))


def test_bench(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["bench", "--sizes", "32x40x4", "--patterns", "16:2:5,16:2:8", "--repeats", "2",
                 "--warmup", "0", "--out", str(out), "--rows-json", str(tmp_path / "rows.json")]) == 0
    assert {k for k, _ in read_speedup_table(out)} == {(16, 5), (16, 8)}
    assert len(json.loads((tmp_path / "rows.json").read_text())["rows"]) == 2


def test_train_and_ablate(tmp_path):
    run = tmp_path / "run.json"
    assert main(["train-toy", "--strategy", "C", "--iters", "40", "--out", str(run)]) == 0
    log = json.loads(run.read_text())
    assert {"loss", "grad_norm", "mask_changed", "stage"} <= set(log) and len(log["loss"]) == 40
    abl = tmp_path / "abl.csv"
    assert main(["ablate", "--strategies", "A,E", "--seeds", "0..2", "--iters", "20", "--out", str(abl)]) == 0
    with abl.open() as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["strategy"], r["seed"]) for r in rows] == [("A", "0"), ("A", "1"), ("A", "2"),
                                                          ("E", "0"), ("E", "1"), ("E", "2")]
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").read_text().startswith("v,m,sparsity,ln_k,speedup,final_loss,seed\n")


def test_pipeline_command(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('setting = "TS3"\n[pattern]\nv = 16\nm = 5\n[train]\niters = 30\n')
    assert main(["pipeline", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["setting"] == "TS3"


def test_exit_codes(tmp_path, weights):
    assert main(["prune", "--weights", str(weights), "--v", "64", "--m", "7",
                 "--out-mask", str(tmp_path / "m.vnmt")]) == 2
    assert main(["prune", "--weights", str(tmp_path / "none.vnmt"), "--out-mask", str(tmp_path / "m.vnmt")]) == 2
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--seeds", "x..y", "--out", "a.csv"])
    assert exc.value.code == 2


def test_internal_error_exit_code(monkeypatch, tmp_path):
    import vnm.cli as cli

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "sift", boom)
    write_speedup_table(SpeedupTable({(64, 5): 1.49}), tmp_path / "t.csv")
    assert main(["select", "--table", str(tmp_path / "t.csv"), "--threshold", "1"]) == 1
