"""Config grammar, CLI surface, artifact schemas, and byte-level determinism."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from daehn.cli import main
from daehn.config import ConfigError, parse_config, parse_config_text
from daehn.outputs import emit_heatmap, emit_learning_curve, emit_parity

VALID = """
# forward run on the coupled oscillator pair
problem=ode_system
model=daehn
num_epochs=50
model_depth=2
hidden_dim=8
lr=0.001
num_points=100
taylor_offset=0.1
taylor_order=1
eta=0.01
"""


class TestParse:
    def test_round_trip(self):
        cfg = parse_config_text(VALID)
        text = cfg.serialize()
        again = parse_config_text(text)
        assert again.serialize() == text

    def test_defaults_come_from_problem(self):
        cfg = parse_config_text(VALID)
        assert cfg.train.noise_scale == 0.01  # per-problem default
        assert cfg.train.max_newton_iter == 10

    def test_taylor_order_validation_names_key(self):
        with pytest.raises(ConfigError, match="taylor_order"):
            parse_config_text(VALID.replace("taylor_order=1", "taylor_order=3"))

    def test_missing_keys_listed_exhaustively(self):
        with pytest.raises(ConfigError) as err:
            parse_config_text("problem=quadratic\nmodel=mlp\n")
        msg = str(err.value)
        for key in ("num_epochs", "model_depth", "hidden_dim", "lr", "num_points"):
            assert key in msg

    def test_missing_lr_named(self):
        text = "\n".join(
            l for l in VALID.splitlines() if not l.startswith("lr=")
        )
        with pytest.raises(ConfigError, match="lr"):
            parse_config_text(text)

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ConfigError, match="velocity"):
            parse_config_text(VALID + "velocity=9\n")

    def test_unknown_model_and_problem(self):
        with pytest.raises(ConfigError, match="model"):
            parse_config_text(VALID.replace("model=daehn", "model=transformer"))
        with pytest.raises(ConfigError, match="problem"):
            parse_config_text(VALID.replace("problem=ode_system", "problem=x"))

    def test_overrides_win(self):
        cfg = parse_config_text(VALID, overrides={"seed": 7, "model": "mlp"})
        assert cfg.train.seed == 7 and cfg.train.model == "mlp"

    def test_estimate_params_parsing(self):
        cfg = parse_config_text(VALID + "estimate_params=alpha=0.05,beta=0.01\n")
        assert cfg.train.estimate_params == {"alpha": 0.05, "beta": 0.01}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "none.cfg")


class TestEmitters:
    def test_empty_rows_header_only(self, tmp_path):
        p = tmp_path / "lc.csv"
        emit_learning_curve([], p)
        assert p.read_text().strip() == (
            "epoch,split,mse_data,mse_derivative,abs_violation,nonconverged_fraction"
        )
        p2 = tmp_path / "par.csv"
        emit_parity([], p2)
        assert p2.read_text().strip() == "quantity,true,predicted"
        p3 = tmp_path / "hm.csv"
        emit_heatmap([], p3)
        assert p3.read_text().strip() == "x1,x2,true,predicted,abs_error,abs_violation"


SMOKE = """
problem={problem}
model={model}
num_epochs=50
model_depth=2
hidden_dim=8
lr=0.003
num_points=200
eval_every=10
seed=3
out_dir={out}
emit_plots=true
"""


def run_cli(tmp_path, model="daehn", extra="", name="smoke", problem="quadratic"):
    out = tmp_path / f"{name}_{model}"
    cfg = tmp_path / f"{name}_{model}.cfg"
    cfg.write_text(SMOKE.format(model=model, out=out, problem=problem) + extra)
    code = main(["run", "--config", str(cfg)])
    return code, out


class TestRunArtifacts:
    def test_smoke_run_writes_all_artifacts(self, tmp_path):
        code, out = run_cli(tmp_path, "daehn")
        assert code == 0
        for name in ("learning_curve.csv", "metrics.json", "predictions.csv",
                     "parity.csv", "heatmap.csv", "checkpoint.npz",
                     "learning_curve_mse.svg", "learning_curve_violation.svg"):
            assert (out / name).exists(), name

    def test_learning_curve_row_count(self, tmp_path):
        code, out = run_cli(tmp_path, "mlp")
        rows = list(csv.DictReader(open(out / "learning_curve.csv")))
        assert len(rows) == 2 * (50 // 10)
        assert rows[0]["mse_derivative"] == ""  # N/A for mlp

    def test_heatmap_grid_size(self, tmp_path):
        code, out = run_cli(tmp_path, "mlp")
        rows = list(csv.DictReader(open(out / "heatmap.csv")))
        assert len(rows) == 100 * 100

    def test_metrics_schema(self, tmp_path):
        extra = "eta=inf\n"
        _, out_d = run_cli(tmp_path, "daehn", extra=extra, problem="lotka_volterra")
        _, out_m = run_cli(tmp_path, "mlp", extra="", problem="lotka_volterra")
        md = json.load(open(out_d / "metrics.json"))
        mm = json.load(open(out_m / "metrics.json"))
        for payload in (md, mm):
            for split in ("train", "val"):
                for key in ("mse_data", "rmse", "abs_violation"):
                    assert payload["best"][split][key] is not None
        # mse_derivative key present iff the model projects
        assert md["best"]["val"]["mse_derivative"] is not None
        assert "mse_derivative" not in mm["best"]["val"]

    def test_identical_runs_are_byte_identical(self, tmp_path):
        _, a = run_cli(tmp_path, "daehn", name="rep1")
        _, b = run_cli(tmp_path, "daehn", name="rep2")
        for name in ("learning_curve.csv", "predictions.csv", "parity.csv",
                     "heatmap.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        ma = json.load(open(a / "metrics.json"))
        mb = json.load(open(b / "metrics.json"))
        ma.pop("timing_seconds"), mb.pop("timing_seconds")  # wall clock only
        assert ma == mb

    def test_checkpoint_reload_inference_only(self, tmp_path):
        _, out = run_cli(tmp_path, "daehn")
        out2 = tmp_path / "reload"
        cfg = tmp_path / "reload.cfg"
        cfg.write_text(
            SMOKE.format(model="daehn", out=out2, problem="quadratic")
            + f"load_checkpoint={out / 'checkpoint.npz'}\n"
        )
        assert main(["run", "--config", str(cfg)]) == 0
        m1 = json.load(open(out / "metrics.json"))
        m2 = json.load(open(out2 / "metrics.json"))
        assert m2["best"]["val"]["mse_data"] == pytest.approx(
            m1["best"]["val"]["mse_data"], rel=1e-12
        )
        assert not (out2 / "learning_curve.csv").exists()


class TestCliSurface:
    def test_list_problems(self, capsys):
        assert main(["list-problems"]) == 0
        text = capsys.readouterr().out
        for name in ("quadratic", "ode_system", "co_oxidation", "lotka_volterra",
                     "lv_inverse", "pde_multisol", "heat_1d"):
            assert name in text

    def test_validate_ok(self, tmp_path, capsys):
        cfg = tmp_path / "ok.cfg"
        cfg.write_text(VALID)
        assert main(["validate", "--config", str(cfg)]) == 0

    def test_validate_error_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(VALID + "taylor_order=5\n")
        assert main(["validate", "--config", str(cfg)]) == 1

    def test_run_config_error_exit_code(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("problem=quadratic\n")
        assert main(["run", "--config", str(cfg)]) == 1

    def test_flag_overrides(self, tmp_path):
        out = tmp_path / "ovr"
        cfg = tmp_path / "ovr.cfg"
        cfg.write_text(SMOKE.format(model="daehn", out=tmp_path / "ignored", problem="quadratic"))
        code = main([
            "run", "--config", str(cfg), "--model", "mlp",
            "--out-dir", str(out), "--seed", "9",
        ])
        assert code == 0
        payload = json.load(open(out / "metrics.json"))
        assert payload["model"] == "mlp"

    def test_sweep(self, tmp_path):
        cfgs = []
        for i, model in enumerate(["mlp", "pinn"]):
            p = tmp_path / f"s{i}.cfg"
            p.write_text(SMOKE.format(model=model, out=tmp_path / f"s{i}", problem="quadratic"))
            cfgs.append(str(p))
        assert main(["sweep", "--configs", *cfgs]) == 0
        assert (tmp_path / "s0" / "metrics.json").exists()
        assert (tmp_path / "s1" / "metrics.json").exists()
