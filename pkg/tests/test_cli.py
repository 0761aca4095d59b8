import csv
import json

import numpy as np
import pytest

from dyadimp.cli import main
from dyadimp.signalprep import EMITTER_DIM, RECEIVER_DIM, default_schema
from dyadimp.dyadgen import read_session
from dyadimp.trainer import ABLATION_COLUMNS

TINY = {"model": {"d_model": 8, "d_lstm": 4, "d_attn": 16, "n_heads": 16, "fc_hidden": 4},
        "train": {"batch_size": 16, "window_width": 10, "stride": 10}}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--sessions", "3", "--timeline", "120", "--out-dir", str(data)]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return root, data, cfg


def test_gen_writes_sessions(synth):
    _, data, _ = synth
    files = sorted(data.glob("*.session"))
    assert [f.name for f in files] == [f"synth-7-000{i}.session" for i in range(3)]
    assert json.loads((data / "manifest.json").read_text())["sessions"] == 3
    assert read_session(files[0]).T == 120


def test_train_then_eval(synth, capsys):
    root, data, cfg = synth
    out = root / "run"
    assert main(["train", "--data-dir", str(data), "--config", str(cfg), "--epochs", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert len(rows) == 2 and float(rows[0]["lr"]) == 1e-3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["model"]["d_model"] == 8
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data-dir", str(data)]) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["split"] == "test"
    assert got["ccc_competence"] == summary["test_ccc_competence"]
    assert got["ccc_warmth"] == summary["test_ccc_warmth"]


def test_train_flags_toggle_ablation(synth):
    root, data, cfg = synth
    out = root / "nointer"
    assert main(["train", "--data-dir", str(data), "--config", str(cfg), "--epochs", "1", "--no-inter",
                 "--no-kd", "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())["config"]
    assert s["model"]["ablation"]["use_inter"] is False and s["train"]["kd_on"] is False


def test_ablate_writes_table(synth):
    root, data, cfg = synth
    out = root / "abl"
    assert main(["ablate", "--data-dir", str(data), "--config", str(cfg), "--epochs", "1",
                 "--runs", "minus-se,minus-facial-e", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert list(rows[0]) == list(ABLATION_COLUMNS)
    assert [r["run"] for r in rows] == ["full", "minus-se", "minus-facial-e"]
    assert (out / "minus-se" / "report.csv").exists()


def test_config_errors(synth, tmp_path):
    _, data, _ = synth
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optim": {}}))
    assert main(["train", "--data-dir", str(data), "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"model": {"heads": 3}}))
    assert main(["train", "--data-dir", str(data), "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("{not json")
    assert main(["train", "--data-dir", str(data), "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["ablate", "--data-dir", str(data), "--runs", "minus-zzz", "--out", str(tmp_path / "o")]) == 2


def test_data_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--data-dir", str(empty), "--out", str(tmp_path / "o")]) == 3
    (empty / "x.session").write_bytes(b"DYADSESS\x01")
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.bin"), "--data-dir", str(empty)]) == 3
    assert main(["train", "--data-dir", str(empty), "--out", str(tmp_path / "o")]) == 3


def write_raw_session(d, rng, T, rates, drop=None):
    d.mkdir(parents=True)
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["competence", "warmth"])
        w.writerows(rng.normal(size=(T, 2)).tolist())
    for source, mods in default_schema().items():
        for mod, names in mods.items():
            if (source, mod) == drop:
                continue
            with open(d / f"{source}_{mod}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(names)
                w.writerows(rng.normal(size=(rates[mod] * T // 10, len(names))).round(5).tolist())


def test_prep_aligns_raw_streams(tmp_path):
    rng = np.random.default_rng(0)
    rates = {"audio": 30, "eye": 10, "facial": 25, "physio": 73}  # per 10 label steps
    raw = tmp_path / "raw"
    for i in range(2):
        write_raw_session(raw / f"sess{i}", rng, 40, rates)
    out = tmp_path / "prepped"
    assert main(["prep", "--input-dir", str(raw), "--output-dir", str(out), "--normalize", "on",
                 "--window-width", "10", "--stride", "5"]) == 0
    b = read_session(out / "sess0.session")
    assert b.emitter.features.shape == (40, EMITTER_DIM)
    assert b.receiver.features.shape == (40, RECEIVER_DIM)
    assert json.loads((out / "manifest.json").read_text())["window_width"] == 10
    pooled = np.concatenate([read_session(out / f"sess{i}.session").receiver.features for i in range(2)])
    assert np.abs(pooled.mean(axis=0)).max() < 1e-9


def test_prep_rejects_incomplete_schema(tmp_path):
    rng = np.random.default_rng(1)
    raw = tmp_path / "raw"
    write_raw_session(raw / "s", rng, 20, {"audio": 10, "eye": 10, "facial": 10, "physio": 10},
                      drop=("receiver", "physio"))
    assert main(["prep", "--input-dir", str(raw), "--output-dir", str(tmp_path / "o")]) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1", "--max-coords", "3"]) == 0
    assert "PASS" in capsys.readouterr().out
