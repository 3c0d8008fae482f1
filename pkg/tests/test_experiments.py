import csv
import json

import numpy as np
import pytest

from varreg.cli import main
from varreg.errors import ConfigError, PreconditionError
from varreg.experiments import (TARGETS, ExperimentConfig, StudyReport, approximate,
                                engineer_source_element, fit_loglog, rademacher_pairing,
                                run_counterexample, run_density, run_forward_check, run_rates,
                                run_semiconv, run_stability, target_penalty, trend_decreasing)
from varreg.forward_groundwater import GroundwaterModel
from varreg.mesh_fields import ParallelepipedMesh, PiecewiseConstantField
from varreg.regularizers import Kind, RegularizerSpec, evaluate, subgradient_membership_residual

FAST_SOLVER = {"max_iters": 300}


def cfg(**kw):
    return ExperimentConfig.from_dict(kw)


# -- helpers ------------------------------------------------------------------

def test_fit_loglog_recovers_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    fit = fit_loglog(x, 3 * x**-2)
    assert fit["slope"] == pytest.approx(-2) and fit["r2"] == pytest.approx(1)
    assert np.isnan(fit_loglog([1.0], [1.0])["slope"])


@pytest.mark.parametrize("values,ok", [
    ([5, 4, 3, 2, 1], True),
    ([5, 4, 4.5, 2, 1], True),          # one inversion
    ([5, 6, 4, 4.5, 1], False),         # two inversions
    ([1, 0.5, 0.4, 0.3, 2], False),     # ends above the start
])
def test_trend(values, ok):
    assert trend_decreasing(values) is ok


def test_trend_tolerance():
    assert trend_decreasing([1e-6, 2e-6, 1e-6, 3e-6], atol=1e-5)
    assert not trend_decreasing([1e-6, 2e-6, 1e-6, 3e-6])


# -- config -------------------------------------------------------------------

def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        cfg(study="nope")
    with pytest.raises(ConfigError):
        cfg(study="density", space="H1")
    with pytest.raises(ConfigError):
        cfg(study="density", grids=[])
    with pytest.raises(ConfigError):
        cfg(study="semiconv", deltas=[0.1, 0.2])
    with pytest.raises(ConfigError):
        cfg(study="density", bogus=1)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"space": "BD"})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(bad)


def test_config_hash_ignores_output():
    a = cfg(study="counterexample")
    b = cfg(study="counterexample", output="/elsewhere")
    assert a.config_hash == b.config_hash
    assert a.config_hash != cfg(study="counterexample", seeds=[1]).config_hash


def test_incompatible_target_rejected():
    with pytest.raises(ConfigError):
        run_density(cfg(study="density", space="BD", target="bump_2d", grids=[2]))
    with pytest.raises(ConfigError):
        run_density(cfg(study="density", space="BV_L1", target="affine_x0", grids=[2]))
    with pytest.raises(ConfigError):
        run_density(cfg(study="density", space="BV_L2", target="sin2pi_x", grids=[2]))
    with pytest.raises(ConfigError):
        run_density(cfg(study="density", target="unknown", grids=[2]))


def test_missing_ground_truth_rejected():
    with pytest.raises(ConfigError):
        run_semiconv(cfg(study="semiconv", deltas=[0.1], grids=[2], fem=[8]))
    with pytest.raises(ConfigError):
        run_stability(cfg(study="stability", grids=[2], fem=[8]))


# -- targets ------------------------------------------------------------------

def test_target_penalties_match_closed_forms():
    assert target_penalty(TARGETS["sin2pi_x"], "BV_L1") == pytest.approx(4.0, rel=1e-10)
    assert target_penalty(TARGETS["affine_x0"], "BD") == pytest.approx(1.0)
    assert target_penalty(TARGETS["shear_yx"], "BD") == pytest.approx(2.0)
    assert target_penalty(TARGETS["sin2pi_x"], "LINF") == 1.0
    # x-only target: isotropic and anisotropic TV coincide
    assert target_penalty(TARGETS["xbump_2d"], "BV_L2") == pytest.approx(
        target_penalty(TARGETS["xbump_2d"], "BV_L1"), rel=1e-12)


def test_target_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    for t in TARGETS.values():
        x = 0.1 + 0.8 * rng.random((5, t.dim))
        J = t.jac(x)
        h = 1e-6
        for j in range(t.dim):
            e = np.zeros(t.dim)
            e[j] = h
            fd = (np.asarray(t.f(x + e)).reshape(5, -1) - np.asarray(t.f(x - e)).reshape(5, -1)) / (2 * h)
            np.testing.assert_allclose(J[:, :, j], fd, atol=1e-6, err_msg=t.name)


def test_approximation_operators():
    assert approximate(TARGETS["sin2pi_x"], "BV_L1", 4).coeffs.size == 4
    assert approximate(TARGETS["xbump_2d"], "BV_L2", 4).coeffs.size == 64
    assert approximate(TARGETS["swirl"], "BD", 4).coeffs.shape == (2, 25)


# -- studies ------------------------------------------------------------------

def test_density_bd_affine_exact():
    rep = run_density(cfg(study="density", space="BD", target="affine_x0", grids=[2, 4, 8]))
    assert max(r["d"] for r in rep.rows) < 1e-10
    assert all(r["reg_gap"] < 1e-12 for r in rep.rows)
    assert rep.passed


def test_density_bd_seminorm_gap_vanishes():
    rep = run_density(cfg(study="density", space="BD", target="sinsin_0", grids=[4, 8, 16, 32]))
    gaps = [r["reg_gap"] for r in sorted(rep.rows, key=lambda r: r["n"])]
    assert trend_decreasing(gaps, max_inversions=0)
    assert gaps[-1] < 1e-3


def test_density_linf_sine():
    rep = run_density(cfg(study="density", space="LINF", target="sin2pi_x", grids=[8, 16, 32, 64],
                          metric_p=2.0))
    assert rep.passed


def test_counterexample_values():
    rep = run_counterexample(cfg(study="counterexample"))
    assert rep.passed
    assert all(r["sup_norm"] == 1.0 and r["l1_distance"] == 1.0 for r in rep.rows)
    for r in rep.rows:
        # per-interval cancellation bound for phi(t) = t
        assert abs(r["pairing[t]"]) <= 2.0 ** (-r["n"] - 1) + 1e-15


def test_rademacher_pairing_exact():
    assert rademacher_pairing(1, lambda t: t * t / 2) == pytest.approx(-0.25)
    assert rademacher_pairing(3, lambda t: t) == 0.0


def test_forward_check_study():
    rep = run_forward_check(cfg(study="forward-check", fem=[8, 16, 32, 64], thresholds={"adjoint_pairs": 10}))
    assert rep.passed
    assert {s["name"] for s in rep.fitted_slopes} >= {"rho_m[a0]", "fd_remainder_vs_t"}


SEMI = dict(study="semiconv", deltas=[0.25, 0.125, 0.0625], grids=[2, 4, 8], fem=[8, 16, 32],
            problem={"f": 10.0, "a_true": 1.5}, reg={"kind": "TV_L1"}, solver=FAST_SOLVER)


def test_semiconv_records_columns_and_caveat():
    rep = run_semiconv(cfg(**SEMI))
    assert {"residual_to_exact", "reg_gap", "strict_d", "alpha"} <= set(rep.rows[0])
    assert any("subsequential" in c for c in rep.caveats)


def test_semiconv_noise_free_is_seed_independent_and_recovers_zero_tv():
    base = dict(SEMI, deltas=[0.0], grids=[8], fem=[64])
    r0 = run_semiconv(cfg(**base, seeds=[0])).rows[0]
    r1 = run_semiconv(cfg(**base, seeds=[1])).rows[0]
    for key in ("residual_to_exact", "reg_value", "strict_d"):
        assert r0[key] == r1[key]
    # R(u_bar) = 0: recovered penalty within the smoothing resolution
    assert r0["reg_value"] <= r0["resolution"]


RATES = dict(study="rates", deltas=[0.1, 0.01], grids=[8], fem=[64], seeds=[0],
             problem={"f": 1000.0, "a_true": {"type": "cells", "values": [1, 1, 2, 2, 2, 2, 1, 1]}},
             reg={"kind": "TV_L1"}, solver=FAST_SOLVER)


def test_engineered_source_element_in_subdifferential():
    c = cfg(**RATES)
    model = GroundwaterModel(c.diffusion_problem(), 64, 1024)
    u_bar = PiecewiseConstantField(ParallelepipedMesh(1, 8), [1, 1, 2, 2, 2, 2, 1, 1])
    omega = engineer_source_element(model, u_bar, RegularizerSpec(Kind.TV_L1))
    xi = model.adjoint(u_bar, omega)
    assert subgradient_membership_residual(RegularizerSpec(Kind.TV_L1), u_bar, xi) < 1e-9
    # pairs to R(u_bar) (one-homogeneous penalty)
    assert xi @ u_bar.coeffs == pytest.approx(evaluate(RegularizerSpec(Kind.TV_L1), u_bar), rel=1e-8)


def test_rates_precondition_aborts():
    with pytest.raises(PreconditionError):
        run_rates(cfg(**RATES, c_nonlin=100.0))


def test_rates_zero_source_warns(caplog):
    rep = run_rates(cfg(**dict(RATES, deltas=[0.1]), omega="zero"))
    assert any("omega = 0" in c for c in rep.caveats)
    # xi = 0: Bregman distance reduces to R(u) - R(u_bar)
    r = rep.rows[0]
    assert r["lambda_n"] == 0.0 and r["gamma_n"] == 0.0


def test_rates_violated_source_condition_is_reported():
    rep = run_rates(cfg(**dict(RATES, deltas=[0.1]), thresholds={"membership": -1.0}))
    assert "source condition violated" in rep.caveats
    assert not any(v["name"] == "bregman_rate_slope" for v in rep.verdicts)


def test_stability_study_and_determinism():
    c = cfg(study="stability", grids=[4], fem=[32], deltas=[0.01], perturbations=[0.1, 0.01],
            problem={"f": 10.0, "a_true": {"type": "cells", "values": [1, 1, 2, 2]}},
            alpha_rule={"alpha": 1e-3}, solver=FAST_SOLVER)
    rep = run_stability(c)
    base = [r for r in rep.rows if r["perturbation"] == 0.0][0]
    assert base["strict_d"] == 0.0 and base["reg_gap"] == 0.0


def test_stability_huge_alpha_gives_constant_fields():
    c = cfg(study="stability", grids=[4], fem=[32], deltas=[0.01], perturbations=[0.1, 0.01],
            problem={"f": 10.0, "a_true": {"type": "cells", "values": [1, 1, 2, 2]}},
            alpha_rule={"alpha": 1e6}, solver=FAST_SOLVER)
    rep = run_stability(c)
    fields = [np.array([float(v) for v in r["coeffs"].split()]) for r in rep.rows]
    for f in fields:
        assert np.ptp(f) < 1e-3
    assert np.ptp([f.mean() for f in fields]) < 1e-2


# -- reports and CLI ---------------------------------------------------------

def test_report_rows_sorted():
    rep = StudyReport("x", "h")
    rep.rows = [{"delta": 0.01, "n": 4}, {"delta": 0.1, "n": 8}, {"delta": 0.1, "n": 2}]
    assert [(r["delta"], r["n"]) for r in rep.sorted_rows()] == [(0.1, 2), (0.1, 8), (0.01, 4)]


def write_cfg(tmp_path, data, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def test_cli_writes_outputs_and_exit_zero(tmp_path):
    path = write_cfg(tmp_path, {"study": "counterexample"})
    assert main(["counterexample", "--config", path, "--out", str(tmp_path / "o")]) == 0
    for name in ("report.csv", "slopes.csv", "verdicts.csv"):
        assert (tmp_path / "o" / name).exists()
    header = next(csv.reader(open(tmp_path / "o" / "verdicts.csv")))
    assert header == ["name", "passed", "value", "threshold", "claim"]


def test_cli_byte_identical_reruns(tmp_path):
    path = write_cfg(tmp_path, {"study": "density", "space": "BV_L1", "target": "bump_1d", "grids": [4, 8]})
    main(["density", "--config", path, "--out", str(tmp_path / "a")])
    main(["density", "--config", path, "--out", str(tmp_path / "b"), "--jobs", "2"])
    for name in ("report.csv", "slopes.csv", "verdicts.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_verdict_failure_exit_one(tmp_path):
    path = write_cfg(tmp_path, {"study": "density", "space": "BV_L1", "target": "bump_1d", "grids": [2, 4],
                                "thresholds": {"final_d": 1e-9}})
    assert main(["density", "--config", path, "--out", str(tmp_path / "o")]) == 1


def test_cli_config_errors_exit_two(tmp_path):
    assert main(["density", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    path = write_cfg(tmp_path, {"study": "counterexample"})
    assert main(["density", "--config", path, "--out", str(tmp_path)]) == 2
    path = write_cfg(tmp_path, {"study": "rates", **{k: v for k, v in RATES.items() if k != "study"},
                                "c_nonlin": 100.0})
    assert main(["rates", "--config", path, "--out", str(tmp_path)]) == 2


def test_cli_solver_failure_exit_three(tmp_path, monkeypatch):
    from varreg import experiments
    from varreg.errors import SolverError

    def boom(*a, **k):
        raise SolverError("non-finite objective")

    monkeypatch.setattr(experiments, "minimize_tikhonov", boom)
    path = write_cfg(tmp_path, {**SEMI, "deltas": [0.1], "grids": [2], "fem": [8]})
    assert main(["semiconv", "--config", path, "--out", str(tmp_path)]) == 3


def test_cli_trace(tmp_path):
    path = write_cfg(tmp_path, {**SEMI, "deltas": [0.1], "grids": [2], "fem": [8]})
    main(["semiconv", "--config", path, "--out", str(tmp_path / "o"), "--trace"])
    rows = list(csv.reader(open(tmp_path / "o" / "trace.csv")))
    assert rows[0][:4] == ["delta", "n", "m", "seed"] and len(rows) > 1
