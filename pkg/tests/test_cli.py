import json
import shutil

import numpy as np
import pytest
import yaml

from countdiffusion.cli import main
from countdiffusion.config import RESOLVED_NAME
from countdiffusion.predictor import Predictor, load_checkpoint
from countdiffusion.kernel import make_rng
from countdiffusion.sampler import MissingnessMask, save_mask
from countdiffusion.synth import load_counts, save_counts


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Small synth + train shared by the command tests."""
    root = tmp_path_factory.mktemp("toy")
    assert run("synth", "--n", 300, "--out", root / "data") == 0
    assert run("train", "--data", root / "data" / "data.csv", "--max_steps", 300,
               "--out", root / "model") == 0
    return root


class TestSynth:
    def test_defaults(self, tmp_path):
        assert run("synth", "--out", tmp_path) == 0
        x, labels = load_counts(tmp_path / "data.csv")
        assert x.shape == (4000, 10) and labels is None
        assert (x == 0).mean() > 0.5
        rec = json.loads((tmp_path / "data_params.json").read_text())
        assert len(rec["mu"]) == 10 and rec["spec"]["dim"] == 10
        assert (tmp_path / RESOLVED_NAME).exists()

    def test_single_row(self, tmp_path):
        assert run("synth", "--n", 1, "--out", tmp_path) == 0
        assert load_counts(tmp_path / "data.csv")[0].shape == (1, 10)

    def test_invalid_bounds(self, tmp_path, capsys):
        assert run("synth", "--set", "data.mu_range=[0.5, 0.05]", "--out", tmp_path) == 2
        assert "mu_range" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        assert run("synth", "--set", "data.size=3", "--out", tmp_path) == 2
        assert run("synth", "--set", "nonsense", "--out", tmp_path) == 2

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump({"data": {"n": 7, "dim": 3}, "seed": 4}))
        assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 0
        assert load_counts(tmp_path / "o" / "data.csv")[0].shape == (7, 3)
        echo = yaml.safe_load((tmp_path / "o" / RESOLVED_NAME).read_text())
        assert echo["seed"] == 4 and echo["train"]["hidden"] == [48]

    def test_missing_config(self, tmp_path):
        assert run("synth", "--config", tmp_path / "nope.yaml", "--out", tmp_path) == 3


class TestTrain:
    def test_outputs(self, toy_run):
        out = toy_run / "model"
        model, echo = load_checkpoint(out / "checkpoint.json")
        assert model.layer_dims == [12, 48, 10]
        assert echo["max_steps"] == 300
        lines = (out / "loss_trace.csv").read_text().splitlines()
        assert lines[0] == "step,loss,smoothed" and len(lines) == 301
        assert (out / "figures" / "loss.png").stat().st_size > 0

    def test_loss_goes_down(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d") == 0
        assert run("train", "--data", tmp_path / "d" / "data.csv", "--out", tmp_path / "m") == 0
        sm = np.loadtxt(tmp_path / "m" / "loss_trace.csv", delimiter=",", skiprows=1)[:, 2]
        assert len(sm) == 4000 and sm[-1] < sm[0]

    def test_zero_steps_equals_initialization(self, toy_run, tmp_path):
        data = toy_run / "data" / "data.csv"
        assert run("train", "--data", data, "--max_steps", 0, "--seed", 3, "--out", tmp_path) == 0
        model, _ = load_checkpoint(tmp_path / "checkpoint.json")
        x, _ = load_counts(data)
        ref = Predictor(10, (48,), scale=np.maximum(x.max(0), 1), schedule=model.schedule).init(make_rng(3))
        for k in ref.params:
            np.testing.assert_array_equal(model.params[k], ref.params[k])

    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "absent.csv"
        assert run("train", "--data", missing, "--out", tmp_path) == 3
        assert str(missing) in capsys.readouterr().err

    def test_bad_cell(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("d0,d1\n1,x\n")
        assert run("train", "--data", p, "--out", tmp_path / "o") == 3
        assert "row 1" in capsys.readouterr().err

    def test_nan_loss_exit_code(self, toy_run, tmp_path, monkeypatch):
        import countdiffusion.cli as cli
        from countdiffusion.predictor import NumericalError

        def boom(*a, **k):
            raise NumericalError(7, float("nan"))

        monkeypatch.setattr(cli, "train", boom)
        assert run("train", "--data", toy_run / "data" / "data.csv", "--out", tmp_path) == 4

    def test_labels_make_conditional_model(self, tmp_path, rng):
        x = rng.integers(0, 4, (60, 3))
        save_counts(x, tmp_path / "l.csv", labels=rng.integers(0, 2, 60))
        assert run("train", "--data", tmp_path / "l.csv", "--max_steps", 20, "--out", tmp_path / "m") == 0
        model, _ = load_checkpoint(tmp_path / "m" / "checkpoint.json")
        assert model.n_classes == 2
        assert run("sample", "--checkpoint", tmp_path / "m" / "checkpoint.json", "--n", 5,
                   "--class_id", 1, "--gamma", 2.0, "--num_steps", 10, "--out", tmp_path / "s") == 0


class TestSample:
    def test_default_steps_and_rows(self, toy_run, tmp_path):
        ck = toy_run / "model" / "checkpoint.json"
        assert run("sample", "--checkpoint", ck, "--n", 25, "--out", tmp_path) == 0
        x, _ = load_counts(tmp_path / "samples.csv")
        assert x.shape == (25, 10)
        assert yaml.safe_load((tmp_path / RESOLVED_NAME).read_text())["sample"]["num_steps"] == 200

    def test_zero_rows_header_only(self, toy_run, tmp_path):
        ck = toy_run / "model" / "checkpoint.json"
        assert run("sample", "--checkpoint", ck, "--n", 0, "--out", tmp_path) == 0
        assert (tmp_path / "samples.csv").read_text() == ",".join(f"d{j}" for j in range(10)) + "\n"

    def test_gamma_on_unconditional(self, toy_run, tmp_path, capsys):
        ck = toy_run / "model" / "checkpoint.json"
        assert run("sample", "--checkpoint", ck, "--gamma", 2.0, "--out", tmp_path) == 2
        assert "guidance" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        assert run("sample", "--checkpoint", tmp_path / "x.json", "--out", tmp_path) == 3


class TestImpute:
    def test_zero_missing_mask_returns_input(self, toy_run, tmp_path):
        data = toy_run / "data" / "data.csv"
        x, _ = load_counts(data)
        save_mask(MissingnessMask(np.ones_like(x, bool)), tmp_path / "m.csv")
        assert run("impute", "--checkpoint", toy_run / "model" / "checkpoint.json", "--data", data,
                   "--mask", tmp_path / "m.csv", "--num_steps", 20, "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "imputed_0.csv").read_bytes() == data.read_bytes()

    def test_five_imputations(self, toy_run, tmp_path):
        data = toy_run / "data" / "data.csv"
        assert run("impute", "--checkpoint", toy_run / "model" / "checkpoint.json", "--data", data,
                   "--n_imputations", 5, "--num_steps", 20, "--out", tmp_path) == 0
        files = sorted(p.name for p in tmp_path.glob("imputed_*.csv"))
        assert files == [f"imputed_{i}.csv" for i in range(5)] + ["imputed_ensemble.csv"]
        x, _ = load_counts(data)
        mask = np.loadtxt(tmp_path / "mask.csv", delimiter=",", skiprows=2).astype(bool)
        for f in files:
            y, _ = load_counts(tmp_path / f)
            np.testing.assert_array_equal(y[mask], x[mask])

    def test_mcar_fraction_recorded(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d") == 0
        assert run("train", "--data", tmp_path / "d" / "data.csv", "--max_steps", 5, "--out", tmp_path / "m") == 0
        assert run("impute", "--checkpoint", tmp_path / "m" / "checkpoint.json",
                   "--data", tmp_path / "d" / "data.csv", "--mechanism", "mcar:0.5",
                   "--num_steps", 5, "--out", tmp_path / "i") == 0
        meta = json.loads((tmp_path / "i" / "mask.csv").read_text().splitlines()[0][2:])
        assert meta["mechanism"] == "mcar:0.5"
        assert abs(meta["missing_fraction"] - 0.5) < 0.01

    def test_mask_shape_mismatch(self, toy_run, tmp_path, capsys):
        save_mask(MissingnessMask(np.ones((3, 10), bool)), tmp_path / "m.csv")
        assert run("impute", "--checkpoint", toy_run / "model" / "checkpoint.json",
                   "--data", toy_run / "data" / "data.csv", "--mask", tmp_path / "m.csv",
                   "--out", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert "(3, 10)" in err and "(300, 10)" in err


class TestEval:
    def test_identical_inputs(self, toy_run, tmp_path):
        data = toy_run / "data" / "data.csv"
        x, _ = load_counts(data)
        mask = MissingnessMask(make_rng(0).random(x.shape) > 0.5)
        save_mask(mask, tmp_path / "m.csv")
        assert run("eval", "--generated", data, "--reference", data, "--mask", tmp_path / "m.csv",
                   "--out", tmp_path / "e") == 0
        rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert rep["joint_mmd"] == 0 and rep["joint_swd"] == 0
        assert all(d["wasserstein1"] == 0 and d["mmd"] == 0 for d in rep["per_dim"])
        assert rep["sample_level"]["spearman"] == pytest.approx(1.0)
        assert (tmp_path / "e" / "figures" / "marginals.png").exists()
        assert (tmp_path / "e" / "figures" / "variances.png").exists()

    def test_shape_mismatch(self, toy_run, tmp_path, capsys, rng):
        save_counts(rng.integers(0, 3, (20, 4)), tmp_path / "g.csv")
        assert run("eval", "--generated", tmp_path / "g.csv", "--reference", toy_run / "data" / "data.csv",
                   "--out", tmp_path / "e") == 2
        err = capsys.readouterr().err
        assert "(20, 4)" in err and "(300, 10)" in err

    def test_no_figures(self, toy_run, tmp_path):
        data = toy_run / "data" / "data.csv"
        assert run("eval", "--generated", data, "--reference", data, "--no_figures", "--out", tmp_path) == 0
        assert not (tmp_path / "figures").exists()
        assert (tmp_path / "metrics.csv").read_text().startswith("metric,value\n")


def _pipeline(out, threads=None):
    extra = [] if threads is None else ["--threads", threads]
    assert run("synth", "--n", 400, "--out", out / "data", *extra) == 0
    assert run("synth", "--n", 400, "--seed", 1, "--out", out / "ref", *extra) == 0
    assert run("train", "--data", out / "data" / "data.csv", "--max_steps", 200,
               "--out", out / "model", *extra) == 0
    assert run("sample", "--checkpoint", out / "model" / "checkpoint.json", "--n", 400,
               "--num_steps", 50, "--out", out / "gen", *extra) == 0
    assert run("impute", "--checkpoint", out / "model" / "checkpoint.json", "--data", out / "data" / "data.csv",
               "--n_imputations", 2, "--num_steps", 30, "--out", out / "imp", *extra) == 0
    assert run("eval", "--generated", out / "gen" / "samples.csv", "--reference", out / "ref" / "data.csv",
               "--out", out / "eval", *extra) == 0
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_pipeline_is_byte_identical_and_echoes_config(tmp_path, capsys):
    first = _pipeline(tmp_path / "run")
    shutil.rmtree(tmp_path / "run")
    second = _pipeline(tmp_path / "run", threads=1)
    assert first.keys() == {k for k in second}
    resolved = [k for k in first if k.name == RESOLVED_NAME]
    assert len(resolved) == 6
    for k in first:
        if k.name == RESOLVED_NAME:
            continue  # the echo records the thread cap, which differs on purpose
        assert first[k] == second[k], k
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert np.isfinite(summary["joint_mmd"]) and np.isfinite(summary["joint_swd"])
