import json

import numpy as np
import pytest

from lfraug import ConfigError
from lfraug.bench import MsdParams, msd_generate, save_dataset
from lfraug.cli import load_model, main, save_model
from lfraug.config import build_run_config, load_run_config, parse_config_text
from lfraug.model import LfrDims, Normalizer, simulate
from lfraug.param import init_fp_equivalent
from test_model import lti_baseline, small_dims

QUICK_CFG = """
schema_version = 1
experiment = msd-quick
baseline = msd
out_dir = {out}
seed = 0
generator.name = msd
generator.n_train = 300
generator.n_test = 150
generator.seed = 1
dims.n_xb = 2
dims.n_xa = 0
dims.n_u = 1
dims.n_y = 1
dims.n_za = 1
dims.n_wa = 1
train.param_mode = well_posed
train.l_mode = paper
train.adam_epochs = 40
train.lbfgs_epochs = 60
train.adam_lr = 0.01
train.rho_b = 0.0
train.n_init_test = 20
"""


class TestConfigParsing:
    def test_dotted_keys_nest(self):
        tree = parse_config_text("a.b.c = 1\na.b.d = [1, 2]\nname = hello\n")
        assert tree == {"a": {"b": {"c": 1, "d": [1, 2]}}, "name": "hello"}

    def test_comments_and_blanks(self):
        tree = parse_config_text("# full comment\nx = 1  # trailing\n\n")
        assert tree == {"x": 1}

    def test_missing_equals_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("x = 1\nbroken line\n")

    def test_validation_collects_all_errors(self):
        tree = parse_config_text("schema_version = 99\ntrain.adam_lr = -1\n")
        with pytest.raises(ConfigError) as err:
            build_run_config(tree)
        msg = str(err.value)
        assert "schema_version" in msg
        assert "adam_lr" in msg
        assert "baseline" in msg

    def test_unknown_keys_rejected(self):
        tree = parse_config_text(
            "schema_version = 1\nbaseline = msd\ngenerator.name = msd\n"
            "dims.n_xb = 2\ndims.n_u = 1\ndims.n_y = 1\ntrain.bogus = 3\n"
        )
        with pytest.raises(ConfigError, match="bogus"):
            build_run_config(tree)


class TestModelDump:
    def test_roundtrip_simulation_identical(self, tmp_path):
        m = init_fp_equivalent(small_dims(), lti_baseline(), Normalizer.identity(1, 1, 1),
                               "well_posed", seed=4, ann_hidden=(3,))
        path = tmp_path / "model.json"
        save_model(m, np.array([0.25, 0.0, 0.0])[: m.dims.n_x], path)
        doc = json.loads(path.read_text())
        assert doc["format"] == "lfraug-model"
        assert "realized_blocks" in doc and "params" in doc
        # built-in baselines reconstruct; plugin baselines are passed through
        m2, x0 = load_model(path, baseline=lti_baseline())
        rng = np.random.default_rng(0)
        u = rng.uniform(-1, 1, (25, 1))
        y1, _, _ = simulate(x0, u, m)
        y2, _, _ = simulate(x0, u, m2)
        assert np.array_equal(y1, y2)

    def test_msd_model_reconstructs_builtin_baseline(self, tmp_path):
        from lfraug.bench import msd_baseline

        bl = msd_baseline(MsdParams())
        data = msd_generate(MsdParams(), 100, seed=2)
        from lfraug.model import fit_normalizer

        m = init_fp_equivalent(LfrDims(2, 0, 1, 1, 1, 1), bl,
                               fit_normalizer(data, bl), "well_posed", seed=0,
                               l_mode="paper")
        path = tmp_path / "msd_model.json"
        save_model(m, np.zeros(2), path)
        m2, _ = load_model(path)
        y1, _, _ = simulate(np.zeros(2), data.u[:50], m)
        y2, _, _ = simulate(np.zeros(2), data.u[:50], m2)
        np.testing.assert_allclose(y1, y2, atol=1e-12)

    def test_corrupt_model_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["eval", "--model", str(path)]) == 3


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg_path = base / "run.cfg"
    cfg_path.write_text(QUICK_CFG.format(out=base / "out"))
    code = main(["train", "--config", str(cfg_path)])
    assert code == 0
    return base


class TestCommands:
    def test_train_writes_artifacts(self, trained_run):
        out = trained_run / "out"
        for name in ("model.json", "metrics.csv", "certificates.txt", "loss_trace.csv"):
            assert (out / name).exists(), name
        metrics_text = (out / "metrics.csv").read_text()
        assert "nrmse" in metrics_text
        assert "train," in metrics_text and "test," in metrics_text

    def test_train_reproducible_bit_identical(self, trained_run, tmp_path):
        cfg_path = tmp_path / "rerun.cfg"
        cfg_path.write_text(QUICK_CFG.format(out=tmp_path / "out2"))
        assert main(["train", "--config", str(cfg_path)]) == 0
        m1 = (trained_run / "out" / "metrics.csv").read_text()
        m2 = (tmp_path / "out2" / "metrics.csv").read_text()
        assert m1 == m2

    def test_simulate_consistent_with_training_report(self, trained_run, tmp_path):
        data = msd_generate(MsdParams(), 150, seed=2)  # generator.seed + 1
        ds_path = tmp_path / "test.csv"
        save_dataset(data, ds_path)
        out = tmp_path / "sim"
        code = main([
            "simulate", "--model", str(trained_run / "out" / "model.json"),
            "--dataset", str(ds_path), "--ts", "0.01", "--n-init", "20",
            "--out", str(out),
        ])
        assert code == 0
        sim_metrics = (out / "metrics.csv").read_text().splitlines()
        train_metrics = (trained_run / "out" / "metrics.csv").read_text().splitlines()
        test_row = [r for r in train_metrics if r.startswith("test,")][0]
        assert sim_metrics[1].replace("test,", "") == test_row.replace("test,", "")

    def test_eval_prints_certificates(self, trained_run, capsys):
        code = main(["eval", "--model", str(trained_run / "out" / "model.json")])
        assert code == 0
        out = capsys.readouterr().out
        assert "wp_margin" in out

    def test_validate_only_runs_no_compute(self, tmp_path, capsys):
        cfg_path = tmp_path / "v.cfg"
        cfg_path.write_text(QUICK_CFG.format(out=tmp_path / "o"))
        code = main(["train", "--config", str(cfg_path), "--validate-only"])
        assert code == 0
        assert not (tmp_path / "o").exists()
        assert "generator" in capsys.readouterr().out

    def test_gen_data_roundtrip(self, tmp_path):
        cfg_path = tmp_path / "g.cfg"
        cfg_path.write_text(QUICK_CFG.format(out=tmp_path / "data"))
        assert main(["gen-data", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "data" / "train.csv").exists()
        assert (tmp_path / "data" / "test.csv").exists()


class TestExitCodes:
    def test_missing_config_is_config_error(self):
        assert main(["train", "--config", "/nonexistent.cfg"]) == 2

    def test_missing_dataset_is_data_error(self, tmp_path):
        cfg = QUICK_CFG.format(out=tmp_path / "o") + "dataset.train = missing.csv\ndataset.ts = 0.01\n"
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(cfg)
        assert main(["train", "--config", str(cfg_path)]) == 3

    def test_dims_mismatch_is_config_error(self, tmp_path):
        cfg = QUICK_CFG.format(out=tmp_path / "o").replace("dims.n_xb = 2", "dims.n_xb = 3")
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(cfg)
        assert main(["train", "--config", str(cfg_path)]) == 2

    def test_empty_rho_grid_is_config_error(self, tmp_path):
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(QUICK_CFG.format(out=tmp_path / "o"))
        assert main(["order-select", "--config", str(cfg_path)]) == 2
