import csv
import json

import numpy as np
import pytest
from PIL import Image

from protolab import cli


@pytest.fixture
def small_cfg(tmp_path):
    cfg = {
        "image_size": 32,
        "synth": {"count": 10, "size": 32},
        "model": {"width": 4, "proto_dim": 8, "blocks": 1},
        "train": {"epochs": 1, "batch_size": 4},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path, small_cfg):
    out = tmp_path / "data"
    assert run("synth", "--config", small_cfg, "--out", out) == 0
    return out


def test_synth_layout(dataset):
    assert len(list((dataset / "images").glob("*.png"))) == 10
    assert len(list((dataset / "masks").glob("*.png"))) == 10
    splits = json.loads((dataset / "splits.json").read_text())
    assert sum(len(v) for v in splits.values()) == 10
    resolved = json.loads((dataset / cli.RESOLVED).read_text())
    assert resolved["synth"]["count"] == 10


def test_synth_refuses_non_empty_without_force(dataset, small_cfg, capsys):
    assert run("synth", "--config", small_cfg, "--out", dataset) == 2
    assert "not empty" in capsys.readouterr().err
    assert run("synth", "--config", small_cfg, "--out", dataset, "--force") == 0


def test_synth_deterministic(tmp_path, small_cfg):
    for d in ("a", "b"):
        run("synth", "--config", small_cfg, "--out", tmp_path / d)
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "images" / p.name).read_bytes()


def test_seed_env_and_set_override(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    run("synth", "--config", small_cfg, "--set", "synth.count=3", "--out", tmp_path / "d")
    resolved = json.loads((tmp_path / "d" / cli.RESOLVED).read_text())
    assert resolved["seed"] == 7 and resolved["synth"]["count"] == 3
    assert len(list((tmp_path / "d" / "images").glob("*.png"))) == 3


@pytest.mark.parametrize("bad", ["{not json", '{"model": {"width": "x"}}', '{"bogus": 1}',
                                 '{"synth": {"size": 50}}', '{"model": {"row": 9}}'])
def test_malformed_config(tmp_path, bad, capsys):
    path = tmp_path / "bad.json"
    path.write_text(bad)
    assert run("synth", "--config", path, "--out", tmp_path / "o") == 2
    assert "error" in capsys.readouterr().err


def test_bad_override(tmp_path, capsys):
    assert run("synth", "--set", "nokey", "--out", tmp_path / "o") == 2
    assert run("synth", "--set", "train.nope=1", "--out", tmp_path / "o") == 2


def test_train_eval_predict(tmp_path, small_cfg, dataset):
    ds = f"dataset={json.dumps(str(dataset))}"
    assert run("train", "--config", small_cfg, "--set", ds, "--out", tmp_path / "run") == 0
    log_rows = list(csv.reader(open(tmp_path / "run" / "log.csv")))
    assert len(log_rows) == 2
    ck = tmp_path / "run" / "best"

    assert run("eval", "--config", small_cfg, "--set", ds, "--set", f"checkpoint={json.dumps(str(ck))}",
               "--out", tmp_path / "ev") == 0
    report = list(csv.reader(open(tmp_path / "ev" / "report.csv")))
    assert report[-1][0] == "MEAN"

    imgs = tmp_path / "imgs"
    imgs.mkdir()
    Image.fromarray(np.full((32, 32, 3), 100, np.uint8)).save(imgs / "a.png")
    Image.fromarray(np.full((48, 40, 3), 30, np.uint8)).save(imgs / "b.png")
    assert run("predict", "--config", small_cfg, "--set", f"checkpoint={json.dumps(str(ck))}",
               "--set", f"images={json.dumps(str(imgs))}", "--out", tmp_path / "pred") == 0
    for name, size in (("a.png", (32, 32)), ("b.png", (40, 48))):
        m = Image.open(tmp_path / "pred" / "masks" / name)
        assert m.size == size
        assert set(np.unique(np.asarray(m))) <= {0, 255}
        assert Image.open(tmp_path / "pred" / "overlays" / name).size == size


def test_train_resume_continues(tmp_path, small_cfg, dataset):
    ds = f"dataset={json.dumps(str(dataset))}"
    run("train", "--config", small_cfg, "--set", ds, "--out", tmp_path / "r")
    last = tmp_path / "r" / "last"
    step = json.loads((last / "trainer.json").read_text())["step"]
    assert run("train", "--config", small_cfg, "--set", ds, "--set", "train.epochs=2",
               "--set", f"resume={json.dumps(str(last))}", "--out", tmp_path / "r") == 0
    assert json.loads((last / "trainer.json").read_text())["step"] == 2 * step
    assert len(list(csv.reader(open(tmp_path / "r" / "log.csv")))) == 3


def test_missing_checkpoint_named(tmp_path, small_cfg, dataset, capsys):
    code = run("eval", "--config", small_cfg, "--set", f"dataset={json.dumps(str(dataset))}",
               "--set", 'checkpoint="/nonexistent/ck"', "--out", tmp_path / "ev")
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_train_without_dataset(tmp_path, small_cfg, capsys):
    assert run("train", "--config", small_cfg, "--out", tmp_path / "o") == 2
    assert "dataset" in capsys.readouterr().err
    assert (tmp_path / "o" / cli.RESOLVED).exists()


def test_ablate_rows_and_determinism(tmp_path, small_cfg, dataset):
    ds = f"dataset={json.dumps(str(dataset))}"
    for d in ("a", "b"):
        assert run("ablate", "--config", small_cfg, "--set", ds, "--out", tmp_path / d) == 0
    a = (tmp_path / "a" / "ablation.csv").read_text()
    assert a == (tmp_path / "b" / "ablation.csv").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert len(rows) == 6
    params = [int(r["params"]) for r in rows]
    assert params[0] < params[1] < params[5]


def test_dataset_not_mutated(tmp_path, small_cfg, dataset):
    before = {p: p.read_bytes() for p in dataset.rglob("*") if p.is_file()}
    run("train", "--config", small_cfg, "--set", f"dataset={json.dumps(str(dataset))}", "--out", tmp_path / "t")
    after = {p: p.read_bytes() for p in dataset.rglob("*") if p.is_file()}
    assert before == after
