"""Acceptance criteria 1-12, each reported on one line as CRITERION n PASS/FAIL."""
import math
import time

import numpy as np
import pytest

from shedecay.cli import main as cli_main
from shedecay.experiments import ExperimentPlan, ProbeSpec, run_plan
from shedecay.grid import initial_profile
from shedecay.inequalities import verify_lattice
from shedecay.kernel_checks import check_chapman_kolmogorov, check_conservation, check_sandwich, check_time_difference
from shedecay.noise import RngSeed, sample_noise
from shedecay.solver import SolverConfig, final_state, picard_iterates, picard_tolerance

pytestmark = pytest.mark.acceptance

SEED = 2024
# lambda-family runs use the half Laplacian, the form in which the lambda statements are made
LAMBDA_FAMILY = {"n_space": 32, "dt_divisor": 16, "horizon": 8.0, "lambda": 2.0, "seed": SEED, "nu": 0.5}


@pytest.fixture
def report(capsys):
    def emit(n, ok, summary):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {summary}")
        assert ok, summary
    return emit


# ---------------------------------------------------------------------------
# deterministic kernel and integral criteria

def test_criterion_01_kernel_sandwich(report):
    start = time.perf_counter()
    rows = list(check_sandwich())
    elapsed = time.perf_counter() - start
    bad = [r.row() for r in rows if not r.passed]
    ok = len(rows) == 2 * 40 * 25 and not bad and elapsed < 1.0
    report(1, ok, f"{len(rows)} sandwich rows, {len(bad)} violations, {elapsed:.2f}s (limit 1s)")


def test_criterion_02_conservation_and_composition(report):
    start = time.perf_counter()
    cons = list(check_conservation())
    comp = list(check_chapman_kolmogorov())
    elapsed = time.perf_counter() - start
    worst_cons = max(r.lhs for r in cons)
    worst_comp = max(r.lhs for r in comp)
    ok = worst_cons < 1e-8 and worst_comp < 1e-6 and elapsed < 5.0 and len(cons) == len(comp) == 40
    report(2, ok, f"max |int p - 1| = {worst_cons:.1e} (<1e-8), max composition error = {worst_comp:.1e} (<1e-6), "
                  f"{elapsed:.2f}s (limit 5s)")


def test_criterion_03_time_difference(report):
    rows = list(check_time_difference())
    bound_rows = [r for r in rows if r.check == "time_difference"]
    quad_rows = [r for r in rows if r.check == "time_difference_quadrature"]
    ok = len(bound_rows) == 81 and all(r.passed for r in rows)
    worst_ratio = max(r.lhs / r.rhs for r in bound_rows)
    worst_quad = max(r.lhs for r in quad_rows)
    report(3, ok, f"81 (t, delta, x) tuples, max value/bound = {worst_ratio:.3f}, "
                  f"max |closed form - quadrature| = {worst_quad:.1e} (<1e-6)")


def test_criterion_04_integral_lattice(report):
    start = time.perf_counter()
    certs = verify_lattice()
    elapsed = time.perf_counter() - start
    min_margin = min(c.margin for c in certs)
    worst_change = max(c.refinement_change for c in certs)
    ok = len(certs) == 144 and all(c.passed for c in certs) and min_margin > 0 and worst_change < 1e-6 and elapsed < 30
    report(4, ok, f"{len(certs)} tuples pass, min margin {min_margin:.3g}, max refinement change {worst_change:.1e}, "
                  f"{elapsed:.1f}s (limit 30s)")


# ---------------------------------------------------------------------------
# Monte Carlo criteria

@pytest.fixture(scope="module")
def lambda_family_bundle():
    plan = ExperimentPlan(
        name="acceptance-lambda-family",
        solver=LAMBDA_FAMILY,
        n_trajectories=2000,
        probes=(
            ProbeSpec("mass_decay", {"t": 4.0, "eps": 0.5}),
            ProbeSpec("decay_pathwise", {"n_trajectories": 1000, "window": [4.0, 8.0]}),
            ProbeSpec("void_event", {"t_grid": [2.0, 4.0, 6.0]}),
        ),
    )
    return run_plan(plan)


@pytest.mark.slow
def test_criterion_05_mass_martingale(report):
    plan = ExperimentPlan(
        name="acceptance-martingale",
        solver={"n_space": 128, "dt_divisor": 4, "horizon": 1.0, "lambda": 1.0, "seed": SEED},
        n_trajectories=2000,
        probes=(ProbeSpec("mass_martingale", {"identity_rel_tol": 1e-12}),),
    )
    res = run_plan(plan).results[0]
    d = res.details
    ok = res.verdict == "pass" and res.estimate <= 3 and d["identity_max_rel_error"] <= 1e-12
    report(5, ok, f"max_t |mean M_t - M_0|/SE = {res.estimate:.2f} (<=3) over {d['n_times']} times, "
                  f"identity error {d['identity_max_rel_error']:.1e} (<=1e-12), "
                  f"increment corr {d['increment_correlation']:.3f}")


@pytest.mark.slow
def test_criterion_06_mass_decay(report, lambda_family_bundle):
    res = lambda_family_bundle.by_probe("mass_decay")
    literal = math.exp(-1)
    ok = res.verdict == "pass" and res.estimate <= literal + 3 * res.se
    report(6, ok, f"violation frequency {res.estimate:.4f} +- {res.se:.4f}; bound exp(-eps^2 lam^2 t/16) = "
                  f"{res.bound:.4f}, also below exp(-1) = {literal:.4f} (n={res.n})")


def test_criterion_07_martingale_tail(report):
    plan = ExperimentPlan(name="acceptance-tail", solver={"seed": SEED}, n_trajectories=2,
                          probes=(ProbeSpec("martingale_tail", {"T": 4.0, "c": 1.0, "eps": 1.0, "n_paths": 5000}),))
    res = run_plan(plan).results[0]
    d = res.details
    ok = res.verdict == "pass" and res.estimate <= math.exp(-2) + 3 * res.se and d["ks_pvalue"] >= 1e-3
    report(7, ok, f"BM exceedance {res.estimate:.4f} +- {res.se:.4f} <= exp(-2) = {res.bound:.4f} "
                  f"(exact {d['brownian_exact_infinite_horizon']:.4f}); time-changed {d['time_changed_estimate']:.4f}; "
                  f"time-inversion KS p = {d['ks_pvalue']:.3f}")


@pytest.mark.slow
def test_criterion_08_pathwise_decay(report, lambda_family_bundle):
    res = lambda_family_bundle.by_probe("decay_pathwise")
    d = res.details
    ok = res.verdict == "pass" and res.n == 1000
    report(8, ok, f"median (1/T) log sup u(T) = {d['median_rate']:.3f}, q90 = {d['q90_rate']:.3f}, "
                  f"negative slope on [4, 8] for {res.estimate:.1%} (>=95%) of {res.n}")


@pytest.mark.slow
def test_criterion_09_large_lambda(report):
    plan = ExperimentPlan(
        name="acceptance-large-lambda",
        solver={"n_space": 32, "dt_divisor": 64, "horizon": 1.0, "seed": SEED, "nu": 0.5},
        n_trajectories=2000,
        initial={"kind": "constant", "value": 2.0},
        probes=(ProbeSpec("large_lambda", {"lambdas": [1.0, 2.0, 4.0], "t": 1.0}),),
    )
    res = run_plan(plan).results[0]
    sweep = res.details["sweep"]
    values = [r["value"] for r in sweep]
    ok = res.details["checks"]["strictly_decreasing"] and res.verdict in ("pass", "indeterminate") \
        and all(b < a for a, b in zip(values, values[1:]))
    shown = ", ".join(f"lam={r['lambda']:g}: {r['value']:.3f}{' (rule of three)' if r['value_is_upper_bound'] else ''}"
                      for r in sweep)
    report(9, ok, f"(1/lam^2) log p(lam): {shown}; verdict {res.verdict}")


@pytest.mark.slow
def test_criterion_10_void_event(report, lambda_family_bundle):
    res = lambda_family_bundle.by_probe("void_event")
    d = res.details
    fit = d["moment_fits"]["2"]
    ok = res.verdict == "pass" and d["checks"]["nondecreasing"] and d["p_b"][-1] >= 0.9 and fit["ci"][1] < 0
    report(10, ok, f"P(B(t)) at t=2,4,6: {', '.join(f'{v:.3f}' for v in d['p_b'])}; "
                   f"log E(sup^2; B) slope {fit['slope']:.3f}, 95% CI [{fit['ci'][0]:.3f}, {fit['ci'][1]:.3f}]")


# ---------------------------------------------------------------------------
# Picard oracle and determinism

def test_criterion_11_picard_consistency(report):
    n, dt, t = 64, 1e-3, 0.25  # dx = 1/32
    cfg = SolverConfig(n_space=n, dt=dt, horizon=t, lam=0.5, seed=RngSeed(SEED), scheme="semi_implicit_em")
    u0 = initial_profile({"kind": "cosine", "mean": 1.0, "amplitude": 0.5}, n)
    noise = sample_noise(dt, n, int(round(t / dt)), RngSeed(SEED))
    res = picard_iterates(u0, noise, cfg, 8, t)
    d = res.successive_sup_distance
    decreases = [b < a for a, b in zip(d, d[1:])]
    longest = run = 0
    for flag in decreases:
        run = run + 1 if flag else 0
        longest = max(longest, run)
    gap = float(np.max(np.abs(res.iterate.values - final_state(u0, cfg, noise).values)))
    tol = picard_tolerance(cfg.dx, dt)
    ok = longest >= 3 and gap <= tol
    report(11, ok, f"successive sup distances {', '.join(f'{v:.1e}' for v in d)}; {longest} consecutive decreases; "
                   f"|iterate 8 - direct| = {gap:.3g} <= {tol:.3g}")


def test_criterion_12_determinism(report, tmp_path):
    probes = (ProbeSpec("mass_martingale"), ProbeSpec("mass_decay", {"t": 0.5}), ProbeSpec("bernoulli_ld", {"trials": 2000}))
    base = dict(name="acceptance-determinism", solver={"n_space": 16, "horizon": 1.0, "lambda": 2.0, "seed": SEED},
                n_trajectories=300, probes=probes)
    one = run_plan(ExperimentPlan(**base, workers=1), tmp_path / "w1").artifacts
    four = run_plan(ExperimentPlan(**base, workers=4), tmp_path / "w4").artifacts
    again = run_plan(ExperimentPlan(**base, workers=1), tmp_path / "again").artifacts
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(f"n_space: 16\nhorizon: 0.2\nlambda: 2\nseed: {SEED}\nn_trajectories: 6\n")
    cli = [cli_main(["simulate", "--config", str(cfg), "--workers", w, "--output-dir", str(tmp_path / f"sim{w}")])
           for w in ("1", "4")]
    sim_same = all(f.read_bytes() == (tmp_path / "sim4" / f.name).read_bytes() for f in (tmp_path / "sim1").iterdir())
    ok = one == four == again and cli == [0, 0] and sim_same
    report(12, ok, f"{len(one)} plan artifacts identical for 1 and 4 workers and on re-run; "
                   f"simulate output byte-identical for 1 and 4 workers")
