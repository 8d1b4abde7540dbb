import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from glsl_wsn.cli import main, split_seeds
from glsl_wsn.data import load_grid

SMALL = ["--synth-nodes", "4", "--synth-ticks", "400", "--window", "8", "--d", "8", "--dg", "4", "--seed", "3"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", *SMALL, "--epochs", "3", "--out", str(out)]) == 0
    return out


# -- dispatch and configuration ---------------------------------------------------


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and '"kind": "usage"' in err


def test_unknown_subcommand_is_usage_error():
    assert main(["fly"]) == 2


def test_odd_latent_width_names_the_field(tmp_path, capsys):
    assert main(["train", "--d", "7", "--out", str(tmp_path)]) == 1
    line = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(line.removeprefix("error: "))
    assert payload["field"] == "train.d" and payload["kind"] == "config"


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epoch: 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "train.epoch" in capsys.readouterr().err


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("# comments are fine\ntrain:\n  epochs: 9\n  window: 12\n")
    out = tmp_path / "o"
    assert main(["ingest", "--config", str(cfg), "--window", "8", "--synth-ticks", "100", "--out", str(out)]) == 0
    rec = yaml.safe_load((out / "run_config.yaml").read_text())
    assert rec["train"]["epochs"] == 9 and rec["train"]["window"] == 8
    assert rec["command"] == "ingest"
    assert rec["derived_seeds"] == split_seeds(0)


def test_seed_split_is_deterministic_and_distinct():
    s = split_seeds(11)
    assert s == split_seeds(11)
    assert len(set(s.values())) == 3


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "glsl_wsn.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "export-curves" in r.stdout


# -- train / eval ------------------------------------------------------------------


def test_train_outputs(trained):
    assert (trained / "model.ckpt").exists()
    hist = read_csv(trained / "loss_history.csv")
    assert [int(r["epoch"]) for r in hist] == [1, 2, 3]
    assert float(hist[0]["blended"]) == float(hist[0]["rec"])
    assert "train_seconds" in json.loads((trained / "timing.json").read_text())


def test_eval_writes_metrics(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--T", "20", "--p", "40", "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert {"precision", "recall", "f1", "accuracy"} <= set(m)
    rows = read_csv(out / "decisions.csv")
    assert list(rows[0]) == ["checkpoint", "set", "kind", "decision_window", "verdict"]
    assert len(rows) == 20


def test_eval_is_byte_reproducible(trained, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "model.ckpt"), "--T", "16"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.json", "decisions.csv"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_retraining_from_written_config_reproduces(trained, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", str(trained / "run_config.yaml"), "--out", str(out)]) == 0
    assert digest(out / "loss_history.csv") == digest(trained / "loss_history.csv")
    assert digest(out / "model.ckpt") == digest(trained / "model.ckpt")


def test_eval_needs_checkpoint(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_sweep_csv(trained, tmp_path):
    out = tmp_path / "sw"
    args = ["sweep", "--checkpoint", str(trained / "model.ckpt"), "--T", "10", "--p-values", "10,20,40,80"]
    assert main([*args, "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [float(r["p"]) for r in rows] == [10, 20, 40, 80]


# -- inject / export-curves ------------------------------------------------------


def inject_point(tmp_path, t_start=300):
    out = tmp_path / "inj"
    args = ["inject", *SMALL, "--kind", "sudden", "--t-start", str(t_start), "--tau", "1",
            "--node", "1", "--mode", "0", "--out", str(out)]
    assert main(args) == 0
    return out


def test_inject_labels_and_locality(tmp_path):
    cache = tmp_path / "grid.bin"
    assert main(["ingest", *SMALL, "--grid-cache", str(cache), "--out", str(tmp_path / "ing")]) == 0
    before = cache.read_bytes()
    out = tmp_path / "inj"
    assert main(["inject", *SMALL, "--grid-cache", str(cache), "--kind", "negation", "--t-start", "50",
                 "--tau", "5", "--node", "2", "--mode", "1", "--out", str(out)]) == 0
    assert cache.read_bytes() == before  # input untouched
    (label,) = read_csv(out / "labels.csv")
    assert label == {"t_s": "50", "t_e": "55", "kind": "negation", "injnode": "3", "injmodal": "mode2"}
    a, b = load_grid(cache).values, load_grid(out / "injected.grid").values
    changed = {tuple(int(i) for i in idx) for idx in np.argwhere(a != b)}
    assert changed and changed <= {(1, 2, t) for t in range(50, 56)}


def export(trained, out, *extra):
    args = ["export-curves", "--checkpoint", str(trained / "model.ckpt"), "--node", "1", "--mode", "0",
            "--out", str(out), *extra]
    assert main(args) == 0
    return read_csv(out / "curves.csv")


def test_export_columns_aligned(trained, tmp_path):
    rows = export(trained, tmp_path / "ex")
    assert list(rows[0])[:4] == ["t", "raw", "standardized", "reconstruction"]
    assert [k for k in rows[0] if k.startswith("latent_")] == [f"latent_{i}" for i in range(4)]
    assert all(None not in r.values() and "" not in r.values() for r in rows)
    assert len(rows) == 400 - 7
    p = np.array([float(r["p_anomaly"]) for r in rows])
    assert np.all((p >= 0) & (p <= 1))


def test_export_node_out_of_range(trained, tmp_path, capsys):
    args = ["export-curves", "--checkpoint", str(trained / "model.ckpt"), "--node", "9", "--out", str(tmp_path)]
    assert main(args) == 1
    assert "export.node" in capsys.readouterr().err


def test_export_reacts_near_injection_only(trained, tmp_path):
    clean = export(trained, tmp_path / "e1")
    inj = inject_point(tmp_path)
    dirty = export(trained, tmp_path / "e2", "--grid-cache", str(inj / "injected.grid"))
    t = np.array([int(r["t"]) for r in clean])
    diff = np.abs(np.array([float(r["reconstruction"]) for r in clean])
                  - np.array([float(r["reconstruction"]) for r in dirty]))
    w, t_s, t_e = 8, 300, 301
    near = (t >= t_s) & (t <= t_e + w)
    assert np.all(diff[t < t_s] == 0)
    assert diff[near].max() > 0
    # the recurrent carry lets the effect fade rather than stop at W
    assert diff[t > t_e + w].max() < diff[near].max()
    assert diff[t > t_e + 3 * w].max() < 0.05 * diff[near].max()
