import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from shedecay.experiments import (
    PROBES,
    ExperimentPlan,
    PlanError,
    ProbeSpec,
    UnknownProbeError,
    brownian_exceedance,
    brownian_exceedance_exact,
    build_solver_config,
    lower_verdict,
    merge_solver,
    run_plan,
    tau_surrogate,
    upper_verdict,
    verdict_table,
)
from shedecay.noise import RngSeed, stream_generator

SMALL = {"n_space": 16, "horizon": 1.0, "lambda": 1.0, "seed": 3}


def plan(probes=(), solver=None, n=20, **kw):
    return ExperimentPlan(name="t", solver={**SMALL, **(solver or {})}, n_trajectories=n,
                          probes=tuple(ProbeSpec(*p) if isinstance(p, tuple) else ProbeSpec(p) for p in probes), **kw)


# verdict rules ---------------------------------------------------------------

@given(st.floats(0, 1), st.floats(0, 0.5), st.floats(0, 1))
def test_verdict_rules(est, se, bound):
    assert (upper_verdict(est, se, bound) == "pass") == (est <= bound + 3 * se)
    assert (lower_verdict(est, se, bound) == "pass") == (est >= bound - 3 * se)


def test_tau_surrogate():
    assert tau_surrogate(2.0, 1.0) == pytest.approx(6.25e-4)
    assert tau_surrogate(0.1, 1.0) == 1.0
    assert tau_surrogate(0.0, 1.0) == 1.0


# plans -----------------------------------------------------------------------

def test_unknown_probe_lists_known_ones():
    with pytest.raises(UnknownProbeError) as err:
        plan(["mass_decya"])
    for name in PROBES:
        assert name in str(err.value)


def test_plan_validation():
    with pytest.raises(PlanError, match="unknown params"):
        plan([("mass_decay", {"epsilon": 0.5})])
    with pytest.raises(PlanError, match="n_trajectories"):
        plan(n=1)
    with pytest.raises(PlanError, match="unknown solver keys"):
        plan(solver={"lamda": 2})
    with pytest.raises(PlanError, match="at most one"):
        build_solver_config({"n_space": 16, "dt": 1e-3, "dt_divisor": 8})


def test_dt_divisor_and_merge():
    cfg = build_solver_config({"n_space": 32, "dt_divisor": 16})
    assert cfg.dt == pytest.approx((2 / 32) ** 2 / 16)
    merged = merge_solver({"n_space": 32, "dt_divisor": 16}, {"dt": 1e-4})
    assert "dt_divisor" not in merged and merged["dt"] == 1e-4


def test_digest_ignores_runtime_settings():
    assert plan(workers=1).digest() == plan(workers=3, output_dir="/x").digest()
    assert plan().digest() != plan(solver={"seed": 4}).digest()


# bundles ---------------------------------------------------------------------

def _read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_empty_plan_writes_metadata_only(tmp_path):
    bundle = run_plan(plan(), tmp_path)
    rows = _read_jsonl(tmp_path / "results.jsonl")
    assert len(rows) == 1 and rows[0]["type"] == "metadata"
    assert rows[0]["n_probes"] == 0 and rows[0]["tool"] == "shedecay"
    assert not (tmp_path / "trajectories").exists()
    assert bundle.ok


def test_same_plan_same_artifacts(tmp_path):
    p = plan(["mass_martingale", "quadratic_variation"])
    a = run_plan(p, tmp_path / "a")
    b = run_plan(p, tmp_path / "b")
    assert a.artifacts == b.artifacts
    for name in a.artifacts:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_worker_count_does_not_change_artifacts(tmp_path):
    probes = ["mass_martingale"]
    a = run_plan(plan(probes, n=300, workers=1), tmp_path / "a")
    b = run_plan(plan(probes, n=300, workers=2), tmp_path / "b")
    assert a.artifacts == b.artifacts


def test_trajectory_csvs_capped_and_stamped(tmp_path):
    run_plan(plan(["mass_martingale"], n=30, max_trajectory_csvs=5), tmp_path)
    csvs = sorted((tmp_path / "trajectories").rglob("*.csv"))
    assert len(csvs) == 5
    head = csvs[0].read_text().splitlines()[:3]
    assert head[0].startswith("# tool=shedecay") and head[1].startswith("# config_digest=") and "seed=3" in head[2]


def test_one_failing_probe_keeps_the_others(tmp_path):
    # mass_decay needs horizon >= 2t; with horizon 1 and t = 4 it errors
    bundle = run_plan(plan(["mass_martingale", "mass_decay", "quadratic_variation"]), tmp_path)
    verdicts = [r.verdict for r in bundle.results]
    assert verdicts[1] == "error" and "error" not in (verdicts[0], verdicts[2])
    err = bundle.results[1].error
    assert err["type"] == "HorizonError" and "horizon" in err["message"]
    assert bundle.failed == ["mass_decay"] + [r.probe for r in bundle.results if r.verdict == "fail"]
    rows = _read_jsonl(tmp_path / "results.jsonl")
    assert [r["probe"] for r in rows[1:]] == ["mass_martingale", "mass_decay", "quadratic_variation"]
    assert rows[2]["error"]["type"] == "HorizonError"
    assert "mass_decay" in verdict_table(bundle)


def test_wall_time_only_when_asked():
    assert run_plan(plan(["bernoulli_ld"])).results[0].wall_ms is None
    assert run_plan(plan(["bernoulli_ld"], record_wall_time=True)).results[0].wall_ms >= 0


def test_verdicts_recomputable_from_rows(tmp_path):
    run_plan(plan(["quadratic_variation", ("mass_decay", {"t": 0.25})], n=40), tmp_path)
    for row in _read_jsonl(tmp_path / "results.jsonl")[1:]:
        rule = upper_verdict if row["direction"] == "upper" else lower_verdict
        assert rule(row["estimate"], row["se"], row["bound"]) == row["verdict"]
        if row["probe"] == "mass_decay":
            assert 0 <= row["estimate"] <= 1
            n = row["n"]
            assert row["se"] == pytest.approx(math.sqrt(row["estimate"] * (1 - row["estimate"]) / n))


# SPDE probes -------------------------------------------------------------------

def test_degenerate_mode_is_not_applicable():
    p = plan(["mass_decay", "quadratic_variation", "void_event", "decay_pathwise"],
             solver={"lambda": 0.0, "test_mode": True, "horizon": 8.0}, n=4)
    res = {r.probe: r for r in run_plan(p).results}
    assert res["mass_decay"].verdict == "not_applicable" and res["mass_decay"].estimate == 1.0
    assert res["void_event"].verdict == "not_applicable" and res["void_event"].estimate == 0.0
    assert res["quadratic_variation"].verdict == "not_applicable"
    assert res["decay_pathwise"].verdict == "not_applicable"


def test_mass_decay_se_scales_with_sqrt_n():
    # quadrupling the ensemble halves the standard error
    solver = {"lambda": 2.0, "horizon": 1.0}
    small = run_plan(plan([("mass_decay", {"t": 0.5})], solver=solver, n=400)).results[0]
    large = run_plan(plan([("mass_decay", {"t": 0.5})], solver=solver, n=1600)).results[0]
    assert 0.1 < small.estimate < 0.9
    assert small.se / large.se == pytest.approx(2.0, rel=0.2)


def test_ensemble_shared_between_probes():
    # the prefix of a larger shared ensemble is the smaller ensemble
    both = run_plan(plan(["mass_martingale", ("quadratic_variation", {"n_trajectories": 10})], n=30))
    alone = run_plan(plan(["quadratic_variation"], n=10))
    assert both.results[1].estimate == alone.results[0].estimate


def test_large_lambda_refuses_time_zero():
    res = run_plan(plan([("large_lambda", {"t": 0.0})])).results[0]
    assert res.verdict == "error" and "t > 0" in res.error["message"]


def test_large_lambda_rule_of_three():
    p = plan([("large_lambda", {"lambdas": [1.0, 2.0], "t": 0.25})], n=50,
             solver={"horizon": 0.25, "dt_divisor": 16}, initial={"kind": "constant", "value": 0.01})
    res = run_plan(p).results[0]
    for row in res.details["sweep"]:
        assert row["count"] == 0 and row["value_is_upper_bound"]
        assert row["value"] == pytest.approx(math.log(3 / 50) / row["lambda"] ** 2)
    assert res.verdict == "indeterminate"


def test_large_lambda_warns_on_rough_steps():
    p = plan([("large_lambda", {"lambdas": [1.0, 4.0], "t": 0.1})], n=4, solver={"horizon": 0.1})
    res = run_plan(p).results[0]
    assert any("lam=4.0" in w for w in res.details["warnings"])


def test_mass_martingale_on_small_ensemble():
    res = run_plan(plan(["mass_martingale"], n=200)).results[0]
    assert res.details["identity_max_rel_error"] <= 1e-12
    assert res.verdict == "pass"


# synthetic probes ----------------------------------------------------------------

def test_exact_brownian_exceedance_formula():
    # [DERIVED] P{B_s >= eps s, some s >= S} = P{sup_r<=1/S W_r >= eps} = 2 P{N >= eps sqrt(S)}
    assert brownian_exceedance_exact(4.0, 1.0) == pytest.approx(2 * stats.norm.sf(2.0), rel=1e-14)
    assert brownian_exceedance_exact(4.0, 1.0) <= math.exp(-2.0)


def test_bridge_corrected_exceedance_matches_exact():
    probs = brownian_exceedance(4.0, 1.0, 4000, 400.0, 0.05, stream_generator(RngSeed(1), 101))
    se = probs.std(ddof=1) / math.sqrt(probs.size)
    assert abs(probs.mean() - brownian_exceedance_exact(4.0, 1.0)) <= 3 * se


def test_martingale_tail_probe():
    p = plan([("martingale_tail", {"n_paths": 2000, "ks_paths": 2000, "ks_points": 200})])
    res = run_plan(p).results[0]
    assert res.verdict == "pass"
    assert res.bound == pytest.approx(math.exp(-2))
    assert res.details["checks"]["time_inversion_ks"]


def test_martingale_tail_far_tail_is_empty():
    p = plan([("martingale_tail", {"eps": 5.0, "n_paths": 500, "ks_paths": 500, "ks_points": 100,
                                   "variant_horizon_factor": 5.0})])
    res = run_plan(p).results[0]
    assert res.estimate < 1e-6 and res.details["time_changed_estimate"] == 0.0
    assert res.verdict == "pass"


def test_bernoulli_iid_matches_binomial():
    res = run_plan(plan(["bernoulli_ld"])).results[0]
    exact = stats.binom.cdf(16, 64, 0.5)  # P{S <= 64 * 0.5 * 0.5}
    iid = res.details["constructions"]["iid"]
    assert abs(iid["estimate"] - exact) <= 3 * math.sqrt(exact * (1 - exact) / 20_000)
    assert res.bound == pytest.approx(math.exp(-4))
    assert res.verdict == "pass"


def test_bernoulli_rejects_eps_one():
    res = run_plan(plan([("bernoulli_ld", {"eps": 1.0})])).results[0]
    assert res.verdict == "error" and "eps" in res.error["message"]
