import copy
import json
import hashlib

import numpy as np
import pytest

from kscontrol.cli import main
from kscontrol.config import parse_config
from kscontrol.errors import ConfigError


def base_config(outdir, **over):
    doc = {
        "model": "linear-ks-control",
        "params": {"gamma1": 1.0, "gamma2": 1.0, "a": 1.0, "b": 1.0, "c": 0.0},
        "grid": {"n_interior": 32, "n_steps": 64},
        "window": {"omega": [0.3, 0.7], "target_equation": "ks"},
        "horizon": 1.0,
        "initial": {"u0": {"kind": "sine", "mode": 1, "amplitude": 1.0}},
        "hum": {"penalty": 1e-10, "cg_tol": 1e-9, "cg_maxit": 500},
        "seed": 1234,
        "output_dir": str(outdir),
    }
    for key, val in copy.deepcopy(over).items():
        if isinstance(val, dict) and isinstance(doc.get(key), dict):
            doc[key].update(val)
        else:
            doc[key] = val
    return doc


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def run_cli(command, cfg_path, *extra):
    return main([command, "--config", cfg_path, "--quiet", *extra])


class TestConfigValidation:
    def test_unknown_top_level_key(self, tmp_path):
        doc = base_config(tmp_path / "o")
        doc["mystery"] = 1
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2

    def test_unknown_nested_key(self, tmp_path):
        doc = base_config(tmp_path / "o", params={"zeta": 2.0})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2

    def test_elliptic_control_requires_a_nonzero(self, tmp_path, capsys):
        doc = base_config(tmp_path / "o", model="linear-elliptic-control",
                          params={"a": 0.0},
                          window={"omega": [0.3, 0.7],
                                  "target_equation": "elliptic"})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2
        assert "a != 0" in capsys.readouterr().err

    def test_ks_control_requires_b_nonzero(self, tmp_path, capsys):
        doc = base_config(tmp_path / "o", params={"b": 0.0})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2
        assert "b != 0" in capsys.readouterr().err

    def test_eps_model_requires_v0(self, tmp_path):
        doc = base_config(tmp_path / "o", model="eps-parabolic",
                          params={"eps": 0.5},
                          window={"omega": [0.3, 0.7],
                                  "target_equation": "elliptic"})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2

    def test_eps_out_of_range(self, tmp_path):
        doc = base_config(tmp_path / "o", model="eps-parabolic",
                          params={"eps": 1.5},
                          window={"omega": [0.3, 0.7],
                                  "target_equation": "elliptic"})
        doc["initial"]["v0"] = {"kind": "zero"}
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2

    def test_window_channel_mismatch(self, tmp_path):
        doc = base_config(tmp_path / "o",
                          window={"omega": [0.3, 0.7],
                                  "target_equation": "elliptic"})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2

    def test_c_below_floor(self, tmp_path, capsys):
        doc = base_config(tmp_path / "o", params={"c": -10.0})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 2
        assert "pi^2" in capsys.readouterr().err

    def test_parse_config_roundtrip(self, tmp_path):
        cfg = parse_config(base_config(tmp_path / "o"))
        assert cfg.model == "linear-ks-control"
        assert cfg.params.gamma1 == 1.0
        with pytest.raises(ConfigError):
            parse_config({"model": "nope"})


class TestSimulate:
    def test_zero_data_zero_trajectory(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out, initial={"u0": {"kind": "zero"}})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 0
        rows = (out / "trajectory.csv").read_text().strip().split("\n")[1:]
        vals = np.array([[float(v) for v in r.split(",")] for r in rows])
        assert np.all(vals[:, 2] == 0.0) and np.all(vals[:, 3] == 0.0)
        assert len(rows) == 65 * 32

    def test_golden_rerun_byte_identical(self, tmp_path):
        doc = base_config(tmp_path / "o1",
                          initial={"u0": {"kind": "random", "amplitude": 0.5}})
        cfg_path = write_config(tmp_path, doc)
        assert run_cli("simulate", cfg_path) == 0
        assert run_cli("simulate", cfg_path, "--output-dir",
                       str(tmp_path / "o2")) == 0
        b1 = (tmp_path / "o1" / "trajectory.csv").read_bytes()
        b2 = (tmp_path / "o2" / "trajectory.csv").read_bytes()
        assert b1 == b2

    def test_divergence_exit_code(self, tmp_path):
        doc = base_config(tmp_path / "o", model="nonlinear-ks",
                          params={"gamma1": 1e-6, "blowup_guard": 100.0},
                          initial={"u0": {"kind": "sine", "amplitude": 1e3}})
        assert run_cli("simulate", write_config(tmp_path, doc)) == 3

    def test_manifest_lists_outputs_with_checksums(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out)
        assert run_cli("simulate", write_config(tmp_path, doc)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["rng"] == {"generator": "pcg64", "seed": 1234}
        names = {o["path"] for o in manifest["outputs"]}
        assert names == {"trajectory.csv"}
        for o in manifest["outputs"]:
            digest = hashlib.sha256((out / o["path"]).read_bytes()).hexdigest()
            assert digest == o["sha256"]


class TestControl:
    def test_zero_data_zero_control(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out, initial={"u0": {"kind": "zero"}})
        assert run_cli("control", write_config(tmp_path, doc)) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["cost"] == 0.0
        rows = (out / "control.csv").read_text().strip().split("\n")[1:]
        assert all(float(r.split(",")[2]) == 0.0 for r in rows)

    def test_linear_desk_terminal_quality(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out)
        assert run_cli("control", write_config(tmp_path, doc)) == 0
        m = json.loads((out / "metrics.json").read_text())
        assert m["terminal_u_norm"] <= 1e-6 * m["initial_u_norm_neg2"]

    def test_elliptic_channel_reports_v_tail(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out, model="linear-elliptic-control",
                          window={"omega": [0.3, 0.7],
                                  "target_equation": "elliptic"})
        assert run_cli("control", write_config(tmp_path, doc)) == 0
        m = json.loads((out / "metrics.json").read_text())
        assert m["terminal_u_norm"] <= 1e-6 * m["initial_u_norm_neg2"]
        assert "v_tail_max" in m and np.isfinite(m["v_tail_max"])

    def test_control_rerun_byte_identical(self, tmp_path):
        doc = base_config(tmp_path / "o1")
        cfg_path = write_config(tmp_path, doc)
        assert run_cli("control", cfg_path) == 0
        assert run_cli("control", cfg_path, "--output-dir",
                       str(tmp_path / "o2")) == 0
        for name in ("control.csv", "metrics.json"):
            assert ((tmp_path / "o1" / name).read_bytes()
                    == (tmp_path / "o2" / name).read_bytes())

    def test_nonlinear_run_and_contraction_artifacts(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out, model="nonlinear-ks",
                          initial={"u0": {"kind": "sine", "amplitude": 1e-3,
                                          "normalize": "neg1"}},
                          source_term={"q": 1.2, "K": 1.5, "k_max": 8},
                          fixed_point={"radius": 1e-2, "tol": 1e-10,
                                       "max_iter": 12},
                          hum={"penalty": 1e-10, "cg_tol": 1e-9,
                               "cg_maxit": 800})
        assert run_cli("control", write_config(tmp_path, doc)) == 0
        m = json.loads((out / "metrics.json").read_text())
        assert m["converged"]
        assert m["terminal_u_norm"] <= 1e-6 * m["initial_u_norm_neg1"]
        assert all(r < 1 for r in m["contraction_estimates"])
        rows = (out / "contraction.csv").read_text().strip().split("\n")[1:]
        assert len(rows) == len(m["iterates"])

    def test_oversized_nonlinear_data_exit5(self, tmp_path, capsys):
        doc = base_config(tmp_path / "o", model="nonlinear-ks",
                          initial={"u0": {"kind": "sine", "amplitude": 1.0,
                                          "normalize": "neg1"}},
                          source_term={"q": 1.2, "K": 1.5, "k_max": 8},
                          fixed_point={"radius": 1e-2, "tol": 1e-10,
                                       "max_iter": 12})
        assert run_cli("control", write_config(tmp_path, doc)) == 5
        assert "shrink" in capsys.readouterr().err


MILD_SWEEP = dict(
    model="linear-ks-control",
    params={"gamma1": 0.01, "gamma2": 0.05, "a": 1.0, "b": 1.0, "c": 0.0},
    grid={"n_interior": 24, "n_steps": 48},
    horizon=0.2,
    cost_sweep={"horizons": [0.2, 0.175, 0.15, 0.125], "steps_per_unit": 240},
)


class TestCostSweep:
    def test_standard_sweep(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out, **MILD_SWEEP)
        assert run_cli("cost-sweep", write_config(tmp_path, doc)) == 0
        fit = json.loads((out / "fit.json").read_text())
        assert fit["fit_K"] > 0
        assert fit["r_squared"] >= 0.95
        rows = (out / "cost_curve.csv").read_text().strip().split("\n")[1:]
        assert len(rows) == 4
        costs = [float(r.split(",")[2]) for r in rows]
        assert all(c0 < c1 for c0, c1 in zip(costs, costs[1:]))

    def test_single_horizon_rejected(self, tmp_path):
        doc = base_config(tmp_path / "o", **MILD_SWEEP)
        doc["cost_sweep"]["horizons"] = [0.5]
        assert run_cli("cost-sweep", write_config(tmp_path, doc)) == 2

    def test_doubled_data_doubles_costs_same_slope(self, tmp_path):
        doc1 = base_config(tmp_path / "o1", **MILD_SWEEP)
        doc2 = base_config(tmp_path / "o2", **MILD_SWEEP)
        doc2["initial"] = {"u0": {"kind": "sine", "mode": 1, "amplitude": 2.0}}
        assert run_cli("cost-sweep", write_config(tmp_path, doc1, "c1.json")) == 0
        assert run_cli("cost-sweep", write_config(tmp_path, doc2, "c2.json")) == 0
        f1 = json.loads((tmp_path / "o1" / "fit.json").read_text())
        f2 = json.loads((tmp_path / "o2" / "fit.json").read_text())
        assert f2["fit_K"] == pytest.approx(f1["fit_K"], abs=1e-6)
        c1 = [float(r.split(",")[2]) for r in
              (tmp_path / "o1" / "cost_curve.csv").read_text().strip().split("\n")[1:]]
        c2 = [float(r.split(",")[2]) for r in
              (tmp_path / "o2" / "cost_curve.csv").read_text().strip().split("\n")[1:]]
        assert np.allclose(np.array(c2), 2.0 * np.array(c1), rtol=1e-8)

    def test_cg_starvation_exit4(self, tmp_path):
        doc = base_config(tmp_path / "o", **MILD_SWEEP,
                          hum={"penalty": 1e-10, "cg_tol": 1e-12, "cg_maxit": 1})
        assert run_cli("cost-sweep", write_config(tmp_path, doc)) == 4


def eps_config(outdir, **over):
    doc = base_config(
        outdir,
        model="eps-parabolic",
        params={"gamma1": 0.01, "gamma2": 0.05, "a": 1.0, "b": 1.0,
                "c": 30.0, "eps": 1.0},
        grid={"n_interior": 32, "n_steps": 64},
        window={"omega": [0.3, 0.7], "target_equation": "elliptic"},
        horizon=0.1,
        hum={"penalty": 1e-10, "cg_tol": 1e-9, "cg_maxit": 800},
        eps_sweep={"ladder": [1.0, 0.1, 0.01, 0.001]},
    )
    doc["initial"]["v0"] = {"kind": "bump", "center": 0.5, "width": 0.25,
                            "amplitude": 0.5}
    for key, val in over.items():
        doc[key] = val
    return doc


class TestEpsSweep:
    def test_ladder_outputs(self, tmp_path):
        out = tmp_path / "out"
        doc = eps_config(out)
        assert run_cli("eps-sweep", write_config(tmp_path, doc)) == 0
        rows = [r.split(",") for r in
                (out / "eps_curve.csv").read_text().strip().split("\n")[1:]]
        assert len(rows) == 4
        costs = [float(r[1]) for r in rows]
        vdiffs = [float(r[2]) for r in rows]
        assert max(costs) / min(costs) <= 10.0
        assert all(d0 > d1 for d0, d1 in zip(vdiffs, vdiffs[1:]))

    def test_eps_one_matches_control_run_bitwise(self, tmp_path):
        out1 = tmp_path / "sweep"
        doc = eps_config(out1)
        assert run_cli("eps-sweep", write_config(tmp_path, doc, "s.json")) == 0
        out2 = tmp_path / "ctrl"
        doc2 = eps_config(out2)
        assert run_cli("control", write_config(tmp_path, doc2, "c.json")) == 0
        first = (out1 / "eps_curve.csv").read_text().strip().split("\n")[1]
        cost_sweep_eps1 = first.split(",")[1]
        metrics = json.loads((out2 / "metrics.json").read_text())
        # same code path: the printed 17-digit decimal values agree exactly
        assert float(cost_sweep_eps1) == metrics["cost"]


class TestCarlemanAudit:
    def test_ratio_table(self, tmp_path):
        out = tmp_path / "out"
        doc = base_config(out,
                          initial={"u0": {"kind": "random", "amplitude": 1.0}},
                          carleman={"mu": [1.0, 4.0], "lambda": [1.0],
                                    "k": 2.0, "n_samples": 10})
        assert run_cli("carleman-audit", write_config(tmp_path, doc)) == 0
        rows = [r.split(",") for r in
                (out / "audit.csv").read_text().strip().split("\n")[1:]]
        assert len(rows) == 2
        assert all(np.isfinite(float(r[2])) and np.isfinite(float(r[3]))
                   for r in rows)
        # min ratio does not drop when mu quadruples
        assert float(rows[1][2]) >= float(rows[0][2])

    def test_rerun_byte_identical(self, tmp_path):
        doc = base_config(tmp_path / "a1",
                          carleman={"mu": [1.0], "lambda": [1.0], "k": 2.0,
                                    "n_samples": 5})
        cfg_path = write_config(tmp_path, doc)
        assert run_cli("carleman-audit", cfg_path) == 0
        assert run_cli("carleman-audit", cfg_path, "--output-dir",
                       str(tmp_path / "a2")) == 0
        assert ((tmp_path / "a1" / "audit.csv").read_bytes()
                == (tmp_path / "a2" / "audit.csv").read_bytes())
