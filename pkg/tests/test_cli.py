import json

import pytest

from vqtraj.cli import main
from vqtraj.config import ConfigError, RunConfig, load_config, parse_config

TINY = ["--set", "n_synth=60", "--set", "n_train=36", "--set", "n_val=12",
        "--set", "vq_epochs=1", "--set", "lm_epochs=1", "--set", "eval_every=1",
        "--set", "K=8", "--set", "n_k=4", "--set", "hidden=8", "--set", "d_model=8",
        "--set", "heads=2", "--set", "layers=1", "--set", "ff=8", "--set", "K_samples=2",
        "--set", "bench_trials=5", "--set", "plot_count=1", "--set", "thetas=4,8"]


def run(tmp_path, *args):
    return main([*args, "--workdir", str(tmp_path), *TINY])


# --- config ---------------------------------------------------------------------

def test_config_round_trip():
    cfg = RunConfig(seed=4, rotate=True, vq_lr=3e-3)
    assert parse_config(cfg.serialize()) == cfg
    assert parse_config(cfg.serialize()).digest() == cfg.digest()


def test_config_comments_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# run\nseed = 5  # trailing\n\nmask = causal\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.mask) == (5, "causal")
    assert cfg.with_overrides({"rotate": "yes"}).rotate is True


@pytest.mark.parametrize("text", ["bogus = 1\n", "seed = x\n", "w = 3\n", "d_model = 10\n",
                                  "mask = full\n", "seed\n", "thetas = 1,2\n"])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_derived_sizes():
    pc = RunConfig(K=32).pipeline()
    assert (pc.lm.K, pc.lm.o, pc.lm.p) == (32, 4, 6)
    assert pc.predict.K_samples == 20 and pc.lm_train.variant == "semi"


# --- command line ---------------------------------------------------------------------

def test_eval_without_checkpoint_names_train_vq(tmp_path, capsys):
    assert run(tmp_path, "eval") == 3
    assert "train-vq" in capsys.readouterr().err


def test_missing_dataset_names_synth(tmp_path, capsys):
    assert run(tmp_path, "train-vq") == 3
    assert "`vqtraj synth`" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--workdir", str(tmp_path), "--set", "nope=1"]) == 2
    assert main(["synth", "--workdir", str(tmp_path), "--config", str(tmp_path / "missing.cfg")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "env.cfg"
    cfg.write_text("seed = 9\nn_synth = 30\nn_train = 10\nn_val = 10\n")
    monkeypatch.setenv("VQTRAJ_CONFIG", str(cfg))
    assert main(["synth", "--workdir", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest_synth.json").read_text())
    assert manifest["seed"] == 9 and manifest["results"]["n_test"] == 10


def test_full_pipeline_and_manifests(tmp_path):
    for cmd in ["synth", "train-vq", "encode", "train-lm", "predict", "eval", "bench",
                "export-plot", "sweep-theta", "compare-masks"]:
        assert run(tmp_path, cmd) == 0, cmd
    for name in ["vq.ckpt", "codebook.ckpt", "lm.ckpt", "predictions.csv", "metrics.csv",
                 "metrics.txt", "latency.txt", "sweep_theta.csv", "compare_masks.csv",
                 "plots/traj_0000.csv", "plots/traj_0000.svg"]:
        assert (tmp_path / name).is_file(), name
    m = json.loads((tmp_path / "manifest_eval.json").read_text())
    assert set(m["inputs"]) == {"vq.ckpt", "lm.ckpt", "data_test.bin", "predictions.csv"}
    assert len(m["config_sha256"]) == 64 and "seed = 0" in m["config"]
    assert "timestamp" not in json.dumps(m)
    rows = (tmp_path / "sweep_theta.csv").read_text().splitlines()
    assert rows[0].startswith("theta,storage_bytes") and len(rows) == 3
    assert (tmp_path / "plots/traj_0000.svg").read_text().startswith("<svg")


def test_ethucy_ingestion(tmp_path):
    paths = []
    for name, n in [("train", 30), ("val", 22), ("test", 25)]:
        p = tmp_path / f"{name}.txt"
        p.write_text("".join(f"{10 * i} 1 {0.4 * i} 0.0\n" for i in range(n)))
        paths.append(str(p))
    work = tmp_path / "work"
    assert main(["synth", "--workdir", str(work), "--ethucy", *paths]) == 0
    m = json.loads((work / "manifest_synth.json").read_text())
    assert m["results"] == {"n_train": 11, "n_val": 3, "n_test": 6}


def test_malformed_ethucy_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 x y\n")
    assert main(["synth", "--workdir", str(tmp_path), "--ethucy", str(bad), str(bad), str(bad)]) == 1
    assert "line 1" in capsys.readouterr().err
