import csv
import json
import os

import numpy as np
import pytest

from thermoconv import harness
from thermoconv.cli import main as cli_main
from thermoconv.errors import ConfigError

LOCKING = {"kind": "ou", "B": [[2, 1, 0], [1, 2, 1], [0, -1, 2]], "dx": 1, "dy": 2}
SCALAR = {
    "kind": "ou",
    "B": [[2, 1], [0, 1]],
    "dx": 1,
    "dy": 1,
    "rho0_mean": [1.0, 1.0],
    "rho0_cov_scale": 0.5,
}
EPS_GRID = [0.2, 0.1, 0.05, 0.025, 0.0125]


def sweep_config(model, **overrides):
    cfg = {
        "experiment": "ou-sweep",
        "model": model,
        "eps_grid": EPS_GRID,
        "times": [0.5],
        "tolerances": {"gap_tol": 0.06},
    }
    cfg.update(overrides)
    return harness.ExperimentConfig.from_dict(cfg)


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_unknown_experiment():
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict({"experiment": "nope"})


def test_config_rejects_increasing_grid():
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(
            {"experiment": "ou-sweep", "eps_grid": [0.1, 0.2]}
        )


def test_config_rejects_bad_tolerances():
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(
            {"experiment": "ou-sweep", "tolerances": {"gap_tol": -1}}
        )
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(
            {"experiment": "ou-sweep", "tolerances": {"slope_band": [1.3, 0.7]}}
        )


def test_config_rejects_nonpositive_times_and_eps():
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(
            {"experiment": "ou-sweep", "times": [0.0]}
        )
    with pytest.raises(ConfigError):
        harness.ExperimentConfig.from_dict(
            {"experiment": "ou-sweep", "eps_grid": [0.1, -0.05]}
        )


def test_config_unknown_required_verdict():
    cfg = sweep_config(LOCKING, require_bogus=True)
    with pytest.raises(ConfigError):
        harness.run(cfg)


# ---------------------------------------------------------------------------
# ou-sweep experiment


def test_ou_sweep_files_and_verdicts(tmp_path):
    cfg = sweep_config(LOCKING, require_level4=True)
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    assert all(res.verdicts[f"level{i}"] for i in range(1, 5))
    assert res.verdicts["rate_band"]
    data = json.load(open(tmp_path / "ou-sweep.json"))
    assert data["verdicts"] == res.verdicts
    assert data["config"]["model"]["B"] == LOCKING["B"]
    with open(tmp_path / "ou-sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(EPS_GRID)
    assert list(rows[0]) == harness.OU_SWEEP_COLUMNS


def test_ou_sweep_verdicts_recomputable_from_csv(tmp_path):
    cfg = sweep_config(LOCKING)
    res = harness.run(cfg, out_dir=str(tmp_path))
    with open(tmp_path / "ou-sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    recomputed = harness.recompute_ou_verdicts(rows, gap_tol=0.06)
    for name, val in recomputed.items():
        assert res.verdicts[name] == val


def test_ou_sweep_nonlocking_required_level4_fails(tmp_path):
    cfg = sweep_config(SCALAR, require_level4=True)
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 1
    assert res.extra["required_failed"] == ["level4"]
    data = json.load(open(tmp_path / "ou-sweep.json"))
    gap = data["extrapolation"]["0.5"]["R_extrapolated"]
    assert gap > 0.3  # positive locking defect is reported, not hidden


def test_ou_sweep_level_monotonicity():
    res = harness.run(sweep_config(SCALAR))
    v = res.verdicts
    assert v["level4"] <= v["level3"] <= v["level2"] <= v["level1"]


# ---------------------------------------------------------------------------
# other experiments


def test_cd_check_double_well(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "cd-check",
            "model": {"kind": "double-well-1d", "kappa": 0.5},
            "require_satisfied": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 1
    verdict = res.extra["cd_verdict"]
    assert abs(verdict["worst_point"][0]) < 0.011
    assert verdict["worst_eigenvalue"] == pytest.approx(-0.5, abs=1e-12)
    ok = harness.run(
        harness.ExperimentConfig.from_dict(
            {
                "experiment": "cd-check",
                "model": {"kind": "double-well-1d", "kappa": 1.0},
                "require_satisfied": True,
            }
        )
    )
    assert ok.status == 0


def test_cd_check_ou_auto_kappa():
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "cd-check",
            "model": {"kind": "ou", "B": [[2, 1], [0, 1]], "eps": 0.1},
        }
    )
    res = harness.run(cfg)
    assert res.verdicts["satisfied"]


def test_sync_couple_experiment(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "sync-couple",
            "model": {
                "kind": "ou",
                "B": [[2, 1], [0, 1]],
                "pairs": [[[1, 1], [-1, 0]]],
            },
            "eps_grid": [0.1],
            "times": [0.5, 1.0],
            "n_paths": 200,
            "dt": 0.001,
            "require_pass": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    with open(tmp_path / "sync-couple.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == harness.SYNC_COLUMNS
    assert all(int(r["pass"]) == 1 for r in rows)


def test_ikb_experiment(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "ikb",
            "model": {"bounds": {"K_x_W": 1.0, "L_eta1_x": 0.5}},
            "require_gap_holds": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    assert res.extra["constants"]["alpha0"] == 1.5
    names = {r["name"] for r in res.rows}
    assert {"alpha0", "beta0", "c", "d", "rho", "gap_holds"} <= names


def test_ikb_bad_bounds_is_config_error():
    cfg = harness.ExperimentConfig.from_dict(
        {"experiment": "ikb", "model": {"bounds": {"nonsense": 1.0}}}
    )
    with pytest.raises(ConfigError):
        harness.run(cfg)


def test_avg_steady_experiment(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "avg-steady",
            "model": {"kind": "avg-demo", "alpha": [0.0, 0.5]},
            "eps_grid": [0.2, 0.1, 0.05],
            "n_paths": 30_000,
            "require_level3ss": True,
            "require_gap_matches": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    with open(tmp_path / "avg-steady.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == harness.AVG_COLUMNS
    assert len(rows) == 2 * 3


def test_stiff_sweep_experiment(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "stiff-sweep",
            "model": {"kind": "stiff-quadratic"},
            "eps_grid": [0.3, 0.1],
            "n_paths": 20_000,
            "require_concentration": True,
            "require_w1": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    for row in res.rows:
        assert abs(row["residual_norm"] - 1.0) < 0.05


def test_stiff_sweep_with_dynamics(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "stiff-sweep",
            "model": {
                "kind": "stiff-quadratic",
                "P": [[2.0, 0.0], [0.0, 1.0]],
                "dynamics": True,
                "z0": [2.0, -1.0],
            },
            "eps_grid": [0.3, 0.1],
            "times": [0.5],
            "n_paths": 4_000,
            "require_dynamics_decreasing": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    assert res.rows[0]["dyn_gap"] is not None


def test_coeff_check_ou(tmp_path):
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "coeff-check",
            "model": {"kind": "ou", "B": [[2, 1], [0, 1]], "dx": 1, "dy": 1},
            "eps_grid": [0.2, 0.1],
            "n_paths": 40_000,
            "require_reference_match": True,
        }
    )
    res = harness.run(cfg, out_dir=str(tmp_path))
    assert res.status == 0
    with open(tmp_path / "coeff-check.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == harness.COEFF_COLUMNS
    # 8 functions x 2 quantities + 1 hk row, per eps
    assert len(rows) == 2 * (8 * 2 + 1)


def test_coeff_check_demo_increments():
    cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "coeff-check",
            "model": {"kind": "avg-demo", "alpha": 0.5},
            "eps_grid": [0.2, 0.1, 0.05],
            "n_paths": 30_000,
            "require_increments_noise": True,
        }
    )
    res = harness.run(cfg)
    assert res.status == 0
    assert abs(res.extra["sup_hk_projected"] - 2.5) < 0.1


def test_test_function_library_fixed_and_bounded():
    lib = harness.test_function_library(2)
    assert len(lib) == 8
    rng = np.random.default_rng(0)
    y = rng.standard_normal((100, 2)) * 3
    for name, fn, direction in lib:
        vals = fn(y)
        assert np.all(np.abs(vals) <= 1.0 + 1e-12)
        assert np.linalg.norm(direction) == pytest.approx(1.0)
    # deterministic across calls
    again = harness.test_function_library(2)
    for (n1, f1, d1), (n2, f2, d2) in zip(lib, again):
        assert n1 == n2
        assert np.array_equal(f1(y), f2(y))


def test_steady_state_check_families():
    reversible_cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "coeff-check",
            "model": {"kind": "ou", "B": [[2, 1], [1, 2]], "dx": 1, "dy": 1},
            "eps_grid": [0.2, 0.1, 0.05],
        }
    )
    rev = harness.steady_state_check(reversible_cfg)
    assert rev["pass"]
    assert rev["bar"] == pytest.approx(0.0, abs=1e-12)
    assert max(abs(m) for m in rev["margins"]) < 1e-12  # both sides zero
    ou_cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "coeff-check",
            "model": {"kind": "ou", "B": [[2, 1], [0, 1]], "dx": 1, "dy": 1},
            "eps_grid": [0.2, 0.1, 0.05],
        }
    )
    out = harness.steady_state_check(ou_cfg)
    assert out["pass"]
    assert min(out["margins"]) > 0  # strictly positive margin, closed form
    demo_cfg = harness.ExperimentConfig.from_dict(
        {
            "experiment": "coeff-check",
            "model": {"kind": "avg-demo", "alpha": 0.5},
            "eps_grid": [0.2, 0.1, 0.05],
            "n_paths": 30_000,
        }
    )
    out2 = harness.steady_state_check(demo_cfg)
    assert out2["pass"]
    assert abs(np.mean(out2["margins"]) - 0.5) < 0.1


# ---------------------------------------------------------------------------
# CLI


def test_cli_roundtrip(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    json.dump(
        {
            "model": LOCKING,
            "eps_grid": EPS_GRID,
            "times": [0.5],
            "tolerances": {"gap_tol": 0.06},
            "require_level4": True,
        },
        open(cfg_path, "w"),
    )
    out_dir = tmp_path / "out"
    code = cli_main(
        ["ou-sweep", "--config", str(cfg_path), "--out", str(out_dir)]
    )
    assert code == 0
    assert (out_dir / "ou-sweep.csv").exists()
    assert (out_dir / "ou-sweep.json").exists()


def test_cli_seed_override(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    json.dump(
        {
            "model": {"kind": "avg-demo", "alpha": 0.5},
            "eps_grid": [0.1],
            "n_paths": 5_000,
            "seed": 1,
        },
        open(cfg_path, "w"),
    )
    out1 = tmp_path / "o1"
    out2 = tmp_path / "o2"
    assert cli_main(["avg-steady", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert (
        cli_main(
            ["avg-steady", "--config", str(cfg_path), "--out", str(out2), "--seed", "2"]
        )
        == 0
    )
    a = open(out1 / "avg-steady.csv").read()
    b = open(out2 / "avg-steady.csv").read()
    assert a != b  # seed override reaches the sampler


def test_cli_bad_config_returns_2(tmp_path):
    missing = tmp_path / "missing.json"
    assert cli_main(["ikb", "--config", str(missing), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli_main(["ikb", "--config", str(bad), "--out", str(tmp_path)]) == 2
