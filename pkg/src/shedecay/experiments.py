"""Monte Carlo probes of the dissipation bounds, and the plan runner that persists them.

A probe turns an ensemble (or a synthetic simulation) into one result row
with an estimate, a standard error, the bound it is compared with and a
verdict. Single-inequality probes use the fixed rule

    upper bound:  pass iff estimate <= bound + 3 * se
    lower bound:  pass iff estimate >= bound - 3 * se

Composite probes (monotone sequences, quantile conditions) record each
sub-check in ``details`` and pass only when all of them do.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special, stats

from . import TOOL_NAME, __version__
from .grid import initial_profile
from .noise import RngSeed, stream_generator
from .observables import (
    HEAVY_TAIL_CAVEAT,
    HorizonError,
    NonPositiveError,
    TrajectoryRecord,
    excursion_times,
    log_decay_slope,
    mass_event_indicator,
    moment_lyapunov_estimate,
    proportion_se,
)
from .sigma import SigmaSpec
from .solver import SolverConfig, run_ensemble

SE_MULTIPLIER = 3.0
VERDICTS = ("pass", "fail", "indeterminate", "not_applicable", "error")
SOLVER_KEYS = (
    "n_space", "dt", "dt_divisor", "horizon", "lambda", "sigma", "seed", "scheme",
    "negativity_policy", "nu", "output_every", "test_mode",
)

# purposes for synthetic generators; SPDE noise uses purpose 0
_PURPOSE_BM = 101
_PURPOSE_VARIANT = 102
_PURPOSE_KS_LEFT = 103
_PURPOSE_KS_RIGHT = 104
_PURPOSE_BERNOULLI_IID = 105
_PURPOSE_BERNOULLI_DEP = 106
_PURPOSE_BOOTSTRAP = 107


class UnknownProbeError(ValueError):
    pass


class PlanError(ValueError):
    pass


def upper_verdict(estimate: float, se: float, bound: float) -> str:
    return "pass" if estimate <= bound + SE_MULTIPLIER * se else "fail"


def lower_verdict(estimate: float, se: float, bound: float) -> str:
    return "pass" if estimate >= bound - SE_MULTIPLIER * se else "fail"


# ---------------------------------------------------------------------------
# solver templates

def build_solver_config(template: dict) -> SolverConfig:
    """SolverConfig from a flat dict; ``dt_divisor`` d means dt = dx^2 / d."""
    unknown = set(template) - set(SOLVER_KEYS)
    if unknown:
        raise PlanError(f"unknown solver keys {sorted(unknown)}; allowed: {list(SOLVER_KEYS)}")
    kw = {k: v for k, v in template.items() if k not in ("lambda", "sigma", "seed", "dt_divisor")}
    if "lambda" in template:
        kw["lam"] = float(template["lambda"])
    if "sigma" in template:
        sig = template["sigma"]
        kw["sigma"] = sig if isinstance(sig, SigmaSpec) else SigmaSpec.from_dict(dict(sig))
    if "seed" in template:
        kw["seed"] = RngSeed(int(template["seed"]))
    divisor = template.get("dt_divisor")
    if divisor is not None:
        if template.get("dt") is not None:
            raise PlanError("give at most one of dt and dt_divisor")
        dx = 2.0 / int(template.get("n_space", SolverConfig.n_space))
        kw["dt"] = dx * dx / float(divisor)
    return SolverConfig(**kw)


def merge_solver(base: dict, override: dict | None) -> dict:
    merged = dict(base)
    for key, value in (override or {}).items():
        if key == "dt":
            merged.pop("dt_divisor", None)
        elif key == "dt_divisor":
            merged.pop("dt", None)
        merged[key] = value
    return merged


# ---------------------------------------------------------------------------
# plan and results

@dataclass(frozen=True)
class ProbeSpec:
    name: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params}


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    solver: dict
    n_trajectories: int
    probes: tuple[ProbeSpec, ...] = ()
    initial: dict = field(default_factory=lambda: {"kind": "constant", "value": 1.0})
    output_dir: str | None = None
    workers: int = 1
    max_trajectory_csvs: int = 20
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.n_trajectories < 2:
            raise PlanError("n_trajectories must be >= 2")
        if self.workers < 1:
            raise PlanError("workers must be >= 1")
        if self.max_trajectory_csvs < 0:
            raise PlanError("max_trajectory_csvs must be >= 0")
        object.__setattr__(self, "probes", tuple(p if isinstance(p, ProbeSpec) else ProbeSpec(**p) for p in self.probes))
        for p in self.probes:
            if p.name not in PROBES:
                raise UnknownProbeError(f"unknown probe {p.name!r}; known probes: {', '.join(sorted(PROBES))}")
            extra = set(p.params) - set(PROBES[p.name].defaults) - _COMMON_PARAMS
            if extra:
                raise PlanError(f"probe {p.name!r}: unknown params {sorted(extra)}")
        build_solver_config(self.solver)

    @property
    def seed(self) -> int:
        return int(self.solver.get("seed", 0))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "solver": _jsonable(self.solver),
            "n_trajectories": self.n_trajectories,
            "probes": [p.to_dict() for p in self.probes],
            "initial": self.initial,
            "max_trajectory_csvs": self.max_trajectory_csvs,
            "record_wall_time": self.record_wall_time,
        }

    def digest(self) -> str:
        """Hash of everything that determines results (worker count and output path excluded)."""
        return _digest(self.to_dict())


@dataclass
class ProbeResult:
    probe: str
    params: dict
    estimate: float | None
    se: float | None
    bound: float | None
    verdict: str
    n: int
    seed: int
    config_digest: str | None
    direction: str = "upper"
    details: dict = field(default_factory=dict)
    wall_ms: float | None = None
    error: dict | None = None

    def row(self) -> dict:
        out = {
            "probe": self.probe,
            "params": self.params,
            "estimate": self.estimate,
            "se": self.se,
            "bound": self.bound,
            "verdict": self.verdict,
            "direction": self.direction,
            "n": self.n,
            "seed": self.seed,
            "wall_ms": self.wall_ms,
            "config_digest": self.config_digest,
            "details": self.details,
        }
        if self.error is not None:
            out["error"] = self.error
        return _jsonable(out)


@dataclass
class EnsembleResult:
    """All probe rows of one plan run plus the bookkeeping needed to reproduce them."""

    plan: ExperimentPlan
    results: list[ProbeResult]
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [r.probe for r in self.results if r.verdict in ("fail", "error")]

    @property
    def ok(self) -> bool:
        return not self.failed

    def by_probe(self, name: str) -> ProbeResult:
        for r in self.results:
            if r.probe == name:
                return r
        raise KeyError(name)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, SigmaSpec):
        return obj.to_dict()
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return obj


def _digest(obj) -> str:
    text = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _dumps(row: dict) -> str:
    return json.dumps(row, sort_keys=True, allow_nan=False)


# ---------------------------------------------------------------------------
# ensemble cache

@dataclass(frozen=True)
class EnsembleRequest:
    solver: dict
    initial: dict
    n: int
    snapshot_times: tuple[float, ...] = ()

    @property
    def key(self) -> str:
        # the ensemble size is not part of the key: stream k never depends on n
        return _digest({"solver": self.solver, "initial": self.initial})


class _Context:
    """Runs each distinct ensemble once, at the largest size and with every snapshot any probe asked for."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.snapshots: dict[str, set] = defaultdict(set)
        self.sizes: dict[str, int] = defaultdict(int)
        self.cache: dict[str, list[TrajectoryRecord]] = {}
        self.configs: dict[str, SolverConfig] = {}

    def register(self, req: EnsembleRequest) -> None:
        self.snapshots[req.key].update(req.snapshot_times)
        self.sizes[req.key] = max(self.sizes[req.key], req.n)

    def ensemble(self, req: EnsembleRequest) -> tuple[SolverConfig, list[TrajectoryRecord]]:
        key = req.key
        have = self.cache.get(key)
        missing = set(req.snapshot_times) - set(have[0].snapshots if have else ())
        if have is None or len(have) < req.n or missing:
            config = build_solver_config(req.solver)
            u0 = initial_profile(req.initial, config.n_space)
            n = max(req.n, self.sizes.get(key, 0))
            snaps = tuple(sorted(self.snapshots.get(key, set()) | set(req.snapshot_times)))
            self.cache[key] = run_ensemble(u0, config, n, workers=self.plan.workers, snapshot_times=snaps)
            self.configs[key] = config
        return self.configs[key], self.cache[key][: req.n]


# ---------------------------------------------------------------------------
# probes on SPDE ensembles

_COMMON_PARAMS = {"solver", "initial", "n_trajectories"}


def _request(plan: ExperimentPlan, params: dict, solver_extra: dict | None = None,
             snapshot_times=()) -> EnsembleRequest:
    solver = merge_solver(merge_solver(plan.solver, params.get("solver")), solver_extra)
    return EnsembleRequest(
        solver=solver,
        initial=params.get("initial", plan.initial),
        n=int(params.get("n_trajectories", plan.n_trajectories)),
        snapshot_times=tuple(snapshot_times),
    )


def _degenerate(config: SolverConfig) -> bool:
    return config.test_mode or config.lam == 0


def _base_result(name, params, config, n, **kw) -> ProbeResult:
    return ProbeResult(probe=name, params=params, n=n, seed=int(config.seed.master_seed),
                       config_digest=config.digest(), **kw)


def _mass_decay_needs(plan, p):
    return [_request(plan, p)]


def _mass_decay(plan, p, ctx) -> ProbeResult:
    """P{M_s >= M0 exp(-(1-eps) lam^2 L^2 s / 4) for some s >= t} vs exp(-eps^2 lam^2 L^2 t / 16)."""
    t, eps = float(p["t"]), float(p["eps"])
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    req = _request(plan, p)
    config = build_solver_config(req.solver)
    if config.horizon < 2 * t:
        raise HorizonError(f"mass_decay needs horizon >= 2t = {2 * t}, have {config.horizon}")
    config, records = ctx.ensemble(req)
    lam, L = config.lam, config.sigma.L_sigma
    rate = (1 - eps) * (lam * L) ** 2 / 4.0
    times = records[0].times
    sel = times >= t - 1e-12
    viol = np.array([np.any(r.mass[sel] >= r.mass[0] * np.exp(-rate * times[sel])) for r in records])
    est = float(viol.mean())
    se = proportion_se(est, len(records))
    bound = math.exp(-(eps * lam * L) ** 2 * t / 16.0)
    details = {
        "window": [t, float(times[-1])],
        "decay_rate": rate,
        "negative_trajectories": int(sum(r.negativity_count > 0 for r in records)),
        "monitoring": "recorded cadence",
    }
    verdict = "not_applicable" if _degenerate(config) else upper_verdict(est, se, bound)
    if verdict == "not_applicable":
        details["reason"] = "bound requires lam > 0"
    return _base_result("mass_decay", p, config, len(records), estimate=est, se=se, bound=bound,
                        verdict=verdict, direction="upper", details=details)


def _mass_martingale(plan, p, ctx) -> ProbeResult:
    """E M_t = M_0 at every recorded time, the discrete noise-sum identity, and uncorrelated increments."""
    config, records = ctx.ensemble(_request(plan, p))
    n = len(records)
    M = np.stack([r.mass for r in records])
    m0 = M[0, 0]
    mean = M.mean(axis=0)
    se = M.std(axis=0, ddof=1) / math.sqrt(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(mean - m0) / se, 0.0)
    max_z = float(np.max(z))
    mart = np.stack([r.martingale for r in records])
    identity_err = float(np.max(np.abs(M - M[:, :1] - mart)) / abs(m0))
    half = M.shape[1] // 2
    inc1, inc2 = M[:, half] - M[:, 0], M[:, -1] - M[:, half]
    if np.std(inc1) > 0 and np.std(inc2) > 0:
        corr = float(np.corrcoef(inc1, inc2)[0, 1])
    else:
        corr = 0.0
    corr_ok = abs(corr) <= SE_MULTIPLIER / math.sqrt(n)
    tol = float(p["identity_rel_tol"])
    identity_ok = config.scheme != "explicit_em" or identity_err <= tol
    verdict = "pass" if (max_z <= SE_MULTIPLIER and identity_ok and corr_ok) else "fail"
    details = {
        "statistic": "max over recorded t of |mean M_t - M_0| / se_t",
        "m0": float(m0),
        "identity_max_rel_error": identity_err,
        "identity_tol": tol,
        "identity_checked": config.scheme == "explicit_em",
        "increment_correlation": corr,
        "increment_correlation_limit": SE_MULTIPLIER / math.sqrt(n),
        "n_times": int(M.shape[1]),
    }
    return _base_result("mass_martingale", p, config, n, estimate=max_z, se=0.0, bound=SE_MULTIPLIER,
                        verdict=verdict, direction="upper", details=details)


def _quadratic_variation(plan, p, ctx) -> ProbeResult:
    """min over trajectories and t >= t_min of (<N>_t / t) / (lam^2 L^2 / 2), against 1 - slack."""
    config, records = ctx.ensemble(_request(plan, p))
    lam, L = config.lam, config.sigma.L_sigma
    if _degenerate(config):
        return _base_result("quadratic_variation", p, config, len(records), estimate=None, se=None, bound=None,
                            verdict="not_applicable", details={"reason": "test mode: <N> is identically 0"})
    slack, t_min = float(p["slack"]), float(p["t_min"])
    times = records[0].times
    sel = times >= t_min
    ratios = np.stack([r.qv_n[sel] / times[sel] for r in records]) / (0.5 * (lam * L) ** 2)
    est = float(ratios.min())
    bound = 1.0 - slack
    details = {"mean_ratio": float(ratios.mean()), "t_min": t_min, "slack": slack}
    return _base_result("quadratic_variation", p, config, len(records), estimate=est, se=0.0, bound=bound,
                        verdict=lower_verdict(est, 0.0, bound), direction="lower", details=details)


def _decay_pathwise(plan, p, ctx) -> ProbeResult:
    """Quantiles of (1/T) log sup u(T) and per-trajectory log-sup slopes over the last part of the horizon."""
    config, records = ctx.ensemble(_request(plan, p))
    T = config.horizon
    window = tuple(p["window"]) if p.get("window") else (T / 2, T)
    sup_T = np.array([r.sup[-1] for r in records])
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(sup_T > 0, np.log(np.where(sup_T > 0, sup_T, 1.0)) / T, np.inf)
    slopes = []
    for r in records:
        try:
            slopes.append(log_decay_slope(r, window, "sup"))
        except NonPositiveError:
            slopes.append(math.inf)
    slopes = np.asarray(slopes)
    frac = float(np.mean(slopes < 0))
    median, q90 = float(np.median(rates)), float(np.quantile(rates, 0.9))
    need = float(p["min_fraction"])
    checks = {"median_negative": median < 0, "q90_negative": q90 < 0, "slope_fraction": frac >= need}
    verdict = "not_applicable" if _degenerate(config) else ("pass" if all(checks.values()) else "fail")
    details = {
        "median_rate": median, "q90_rate": q90, "slope_window": list(window),
        "median_slope": float(np.median(slopes)), "checks": checks,
        "substitute": "ensemble quantiles stand in for the almost-sure statement",
    }
    return _base_result("decay_pathwise", p, config, len(records), estimate=frac,
                        se=proportion_se(frac, len(records)), bound=need, verdict=verdict,
                        direction="lower", details=details)


def tau_surrogate(lam: float, lip: float, delta: float = 0.1) -> float:
    """delta^2 / (lam Lip)^4, capped at 1."""
    if lam * lip == 0:
        return 1.0
    return min(delta ** 2 / (lam * lip) ** 4, 1.0)


def _void_event_needs(plan, p):
    return [_request(plan, p)]


def _void_event(plan, p, ctx) -> ProbeResult:
    """P(B(t)) with B = A1 n A2 over a t-grid, and the decay of E(sup_x u(t)^k; B(t))."""
    config, records = ctx.ensemble(_request(plan, p))
    lam, L, lip = config.lam, config.sigma.L_sigma, config.sigma.Lip_sigma
    t_grid = [float(t) for t in p["t_grid"]]
    if max(t_grid) > config.horizon + 1e-12:
        raise HorizonError(f"t_grid reaches {max(t_grid)} beyond horizon {config.horizon}")
    tau = float(p["tau"]) if p.get("tau") is not None else tau_surrogate(lam, lip, float(p["delta"]))
    n = len(records)
    in_b = np.zeros((n, len(t_grid)), dtype=bool)
    sup_t = np.zeros((n, len(t_grid)))
    a1_freq, a2_freq = [], []
    for j, t in enumerate(t_grid):
        a1 = np.array([mass_event_indicator(r, t, lam, L) for r in records])
        idx = records[0].index_at(t)
        a2 = np.array([r.min_inf[idx] >= math.exp(-4.0 * t / tau) * r.inf[0] for r in records])
        in_b[:, j] = a1 & a2
        sup_t[:, j] = [r.sup[idx] for r in records]
        a1_freq.append(float(a1.mean()))
        a2_freq.append(float(a2.mean()))
    p_b = in_b.mean(axis=0)
    se_b = [proportion_se(float(v), n) for v in p_b]
    details: dict = {
        "t_grid": t_grid, "tau": tau, "tau_is_surrogate": p.get("tau") is None,
        "p_b": [float(v) for v in p_b], "se_b": se_b, "p_a1": a1_freq, "p_a2": a2_freq,
        "a1_lower_bound": [1.0 - math.exp(-(lam * L) ** 2 * t / 64.0) for t in t_grid],
    }
    if _degenerate(config):
        details["reason"] = "test mode: A1 cannot occur"
        return _base_result("void_event", p, config, n, estimate=float(p_b[-1]), se=se_b[-1], bound=None,
                            verdict="not_applicable", direction="lower", details=details)
    rng = stream_generator(RngSeed(int(config.seed.master_seed)), _PURPOSE_BOOTSTRAP)
    boot_idx = rng.integers(0, n, size=(int(p["n_boot"]), n))
    tg = np.asarray(t_grid)
    moment_fits = {}
    for k in p["moments"]:
        weighted = np.where(in_b, sup_t ** float(k), 0.0)
        moments = weighted.mean(axis=0)
        if np.any(moments <= 0):
            moment_fits[str(k)] = {"moments": moments.tolist(), "slope": None, "ci": None}
            continue
        slope = _ls_slope(tg, np.log(moments))
        boots = weighted[boot_idx].mean(axis=1)
        ok = np.all(boots > 0, axis=1)
        bslopes = np.array([_ls_slope(tg, np.log(b)) for b in boots[ok]])
        ci = [float(np.quantile(bslopes, 0.025)), float(np.quantile(bslopes, 0.975))] if bslopes.size else None
        moment_fits[str(k)] = {"moments": moments.tolist(), "slope": slope, "ci": ci}
    details["moment_fits"] = moment_fits
    first = moment_fits[str(p["moments"][0])]
    min_prob = float(p["min_probability"])
    checks = {
        "nondecreasing": bool(np.all(np.diff(p_b) >= 0)),
        "terminal_probability": bool(p_b[-1] >= min_prob),
        "moment_slope_negative": bool(first["ci"] is not None and first["ci"][1] < 0),
    }
    details["checks"] = checks
    verdict = "indeterminate" if first["ci"] is None else ("pass" if all(checks.values()) else "fail")
    return _base_result("void_event", p, config, n, estimate=float(p_b[-1]), se=se_b[-1], bound=min_prob,
                        verdict=verdict, direction="lower", details=details)


def _ls_slope(x, y) -> float:
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def _excursions(plan, p, ctx) -> ProbeResult:
    """Pooled frequency of excursion gaps T_{n+1} - T_n > tau (n >= 1), against 1/2."""
    config, records = ctx.ensemble(_request(plan, p))
    lam, lip = config.lam, config.sigma.Lip_sigma
    tau = float(p["tau"]) if p.get("tau") is not None else tau_surrogate(lam, lip, float(p["delta"]))
    gaps = []
    open_count = 0
    for r in records:
        ex = excursion_times(r, int(p["max_n"]))
        if ex.open_after is not None:
            open_count += 1
        gaps.extend(np.diff(ex.times).tolist())
    gaps = np.asarray(gaps)
    details = {"tau": tau, "tau_is_surrogate": p.get("tau") is None, "n_gaps": int(gaps.size),
               "cadence": float(records[0].cadence_dt), "tau_below_cadence": tau < records[0].cadence_dt,
               "trajectories_with_open_last_passage": open_count}
    if _degenerate(config) or gaps.size == 0:
        details["reason"] = "no completed excursion gaps" if gaps.size == 0 else "test mode"
        return _base_result("excursions", p, config, len(records), estimate=None, se=None, bound=0.5,
                            verdict="indeterminate" if not _degenerate(config) else "not_applicable",
                            direction="lower", details=details)
    est = float(np.mean(gaps > tau))
    se = proportion_se(est, gaps.size)
    details["mean_gap"] = float(gaps.mean())
    return _base_result("excursions", p, config, len(records), estimate=est, se=se, bound=0.5,
                        verdict=lower_verdict(est, se, 0.5), direction="lower", details=details)


def _large_lambda_requests(plan, p):
    t = float(p["t"])
    if not t > 0:
        raise ValueError("large_lambda needs t > 0 (at t = 0 the threshold is 1 and sup u0 may exceed it)")
    return [_request(plan, p, {"lambda": float(lam), "horizon": t}) for lam in p["lambdas"]]


def _large_lambda(plan, p, ctx) -> ProbeResult:
    """(1/lam^2) log P{sup_x u(t) > exp(-L^2 lam^2 t / 64)} along an increasing lam sweep."""
    lambdas = [float(v) for v in p["lambdas"]]
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambdas must increase strictly")
    t = float(p["t"])
    rows = []
    warnings = []
    config = None
    for lam, req in zip(lambdas, _large_lambda_requests(plan, p)):
        config, records = ctx.ensemble(req)
        L = config.sigma.L_sigma
        n = len(records)
        threshold = math.exp(-(L * lam) ** 2 * t / 64.0)
        count = int(sum(r.sup[-1] > threshold for r in records))
        p_hat = count / n
        if count == 0:
            value, upper, se = math.log(3.0 / n) / lam ** 2, True, None
        else:
            value, upper = math.log(p_hat) / lam ** 2, False
            se = proportion_se(p_hat, n) / (p_hat * lam ** 2)
        step_noise = lam * config.sigma.Lip_sigma * math.sqrt(config.dt / config.dx)
        if step_noise > float(p["step_noise_limit"]):
            warnings.append(f"lam={lam}: relative noise per step {step_noise:.3f} exceeds {p['step_noise_limit']}")
        rows.append({"lambda": lam, "count": count, "n": n, "p_hat": p_hat, "threshold": threshold,
                     "value": value, "value_is_upper_bound": upper, "value_se": se,
                     "config_digest": config.digest()})
    L = config.sigma.L_sigma
    target = -(L ** 2) * t / 64.0
    decreasing, undecided = True, False
    for a, b in zip(rows, rows[1:]):
        if a["value_is_upper_bound"]:
            undecided = True
        elif not b["value"] < a["value"]:
            decreasing = False
    last = rows[-1]
    terminal = last["value_is_upper_bound"] or last["value"] <= target * (1.0 - float(p["slack"]))
    checks = {"strictly_decreasing": decreasing, "terminal_value": terminal}
    if not decreasing or not terminal:
        verdict = "fail"
    elif undecided:
        verdict = "indeterminate"
    else:
        verdict = "pass"
    details = {"sweep": rows, "target": target, "checks": checks, "warnings": warnings,
               "note": "finite sweep; the limit in lam is not desk-verifiable"}
    return _base_result("large_lambda", p, config, sum(r["n"] for r in rows), estimate=last["value"],
                        se=last["value_se"], bound=target, verdict=verdict, direction="upper", details=details)


def _lyapunov_times(p) -> tuple[float, ...]:
    a, b = (float(v) for v in p["window"])
    k = int(round((b - a) / float(p["snapshot_every"])))
    return tuple(a + i * (b - a) / k for i in range(k + 1))


def _lyapunov(plan, p, ctx) -> ProbeResult:
    """Moment Lyapunov slopes for several k; gamma(k)/k must be nondecreasing within half-widths."""
    req = _request(plan, p, snapshot_times=_lyapunov_times(p))
    config, records = ctx.ensemble(req)
    window = tuple(float(v) for v in p["window"])
    ests = [moment_lyapunov_estimate(records, float(k), window, n_boot=int(p["n_boot"]),
                                     seed=int(config.seed.master_seed)) for k in p["ks"]]
    ok = True
    for a, b in zip(ests, ests[1:]):
        for side in ("lower", "upper"):
            va, vb = getattr(a, side) / a.k, getattr(b, side) / b.k
            slack = getattr(a, side + "_halfwidth") / a.k + getattr(b, side + "_halfwidth") / b.k
            ok &= vb >= va - slack
    details = {
        "estimates": [{"k": e.k, "lower": e.lower, "upper": e.upper, "lower_halfwidth": e.lower_halfwidth,
                       "upper_halfwidth": e.upper_halfwidth} for e in ests],
        "caveat": HEAVY_TAIL_CAVEAT,
    }
    return _base_result("lyapunov", p, config, len(records), estimate=ests[0].upper, se=ests[0].upper_halfwidth / 1.96,
                        bound=None, verdict="pass" if ok else "fail", direction="monotone", details=details)


# ---------------------------------------------------------------------------
# synthetic probes

def brownian_exceedance(S: float, eps: float, n_paths: int, horizon: float, step: float,
                        rng: np.random.Generator, block: int = 512) -> np.ndarray:
    """Per-path probability that B_s >= eps s for some s in [S, horizon], given B on a grid.

    Between grid points the Brownian bridge crosses the line eps*s with
    probability exp(-2 a b / h), a and b the gaps below the line at the ends,
    so the returned values are exact conditional probabilities.
    """
    n_steps = int(math.ceil((horizon - S) / step))
    b = rng.standard_normal(n_paths) * math.sqrt(S)
    gap = eps * S - b
    log_survive = np.where(gap > 0, 0.0, -np.inf)
    s = S
    done = 0
    while done < n_steps:
        rows = min(block, n_steps - done)
        z = rng.standard_normal((rows, n_paths)) * math.sqrt(step)
        for r in range(rows):
            b = b + z[r]
            s = s + step
            new_gap = eps * s - b
            with np.errstate(divide="ignore", invalid="ignore"):
                cross = np.where((gap > 0) & (new_gap > 0), np.exp(-2.0 * gap * new_gap / step), 1.0)
                log_survive = log_survive + np.log1p(-np.minimum(cross, 1.0))
            gap = new_gap
        done += rows
    return -np.expm1(log_survive)


def brownian_exceedance_exact(S: float, eps: float) -> float:
    """P{B_s >= eps s for some s >= S} = 2 P{N(0,1) >= eps sqrt(S)}."""
    return float(special.erfc(eps * math.sqrt(S) / math.sqrt(2.0)))


def variant_exceedance(T: float, c: float, eps: float, n_paths: int, horizon: float, dt: float,
                       rng: np.random.Generator, block: int = 512) -> np.ndarray:
    """dX = s(X) dB with s^2 = c (1 + tanh^2(X) / 2), so <X>_t >= c t; indicator of X_t >= eps <X>_t, t >= T."""
    x = np.zeros(n_paths)
    qv = np.zeros(n_paths)
    hit = np.zeros(n_paths, dtype=bool)
    n_steps = int(round(horizon / dt))
    start = int(round(T / dt))
    done = 0
    while done < n_steps:
        rows = min(block, n_steps - done)
        z = rng.standard_normal((rows, n_paths)) * math.sqrt(dt)
        for r in range(rows):
            th = np.tanh(x)
            s2 = c * (1.0 + 0.5 * th * th)
            x = x + np.sqrt(s2) * z[r]
            qv = qv + s2 * dt
            if done + r + 1 >= start:
                hit |= x >= eps * qv
        done += rows
    return hit.astype(float)


def time_inversion_samples(S: float, n_paths: int, n_points: int, rng_left: np.random.Generator,
                           rng_right: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """sup_{s >= S} B(s)/s and sup_{r <= 1/S} W(r) on matched grids s_i = 1/r_i (each floored at 0)."""
    h = 1.0 / (S * n_points)
    r = h * np.arange(1, n_points + 1)
    s = np.sort(1.0 / r)
    ds = np.diff(np.concatenate([[0.0], s]))
    left = np.cumsum(rng_left.standard_normal((n_paths, n_points)) * np.sqrt(ds), axis=1) / s
    right = np.cumsum(rng_right.standard_normal((n_paths, n_points)) * math.sqrt(h), axis=1)
    return np.maximum(left.max(axis=1), 0.0), np.maximum(right.max(axis=1), 0.0)


def _martingale_tail(plan, p, ctx) -> ProbeResult:
    T, c, eps = float(p["T"]), float(p["c"]), float(p["eps"])
    n_paths = int(p["n_paths"])
    seed = RngSeed(plan.seed)
    bound = math.exp(-c * T * eps ** 2 / 2.0)
    S = c * T
    bm = brownian_exceedance(S, eps, n_paths, S * float(p["horizon_factor"]), float(p["grid_step"]),
                             stream_generator(seed, _PURPOSE_BM))
    est = float(bm.mean())
    se = float(bm.std(ddof=1) / math.sqrt(n_paths))
    var = variant_exceedance(T, c, eps, n_paths, T * float(p["variant_horizon_factor"]), float(p["variant_dt"]),
                             stream_generator(seed, _PURPOSE_VARIANT))
    v_est = float(var.mean())
    v_se = proportion_se(v_est, n_paths)
    left, right = time_inversion_samples(S, int(p["ks_paths"]), int(p["ks_points"]),
                                         stream_generator(seed, _PURPOSE_KS_LEFT),
                                         stream_generator(seed, _PURPOSE_KS_RIGHT))
    ks = stats.ks_2samp(left, right)
    checks = {
        "brownian": upper_verdict(est, se, bound) == "pass",
        "time_changed": upper_verdict(v_est, v_se, bound) == "pass",
        "time_inversion_ks": bool(ks.pvalue >= float(p["ks_level"])),
    }
    details = {
        "brownian_exact_infinite_horizon": brownian_exceedance_exact(S, eps),
        "brownian_window": [S, S * float(p["horizon_factor"])],
        "time_changed_estimate": v_est, "time_changed_se": v_se,
        "time_changed_diffusion": "s(x)^2 = c (1 + tanh(x)^2 / 2)",
        "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue), "checks": checks,
    }
    return ProbeResult(probe="martingale_tail", params=p, estimate=est, se=se, bound=bound,
                       verdict="pass" if all(checks.values()) else "fail", n=n_paths, seed=plan.seed,
                       config_digest=None, direction="upper", details=details)


def bernoulli_sums(q: float, n: int, trials: int, rng: np.random.Generator, dependent: bool) -> np.ndarray:
    """Row sums of J_1..J_n; dependent rows use P(J_{k+1} = 1 | past) = max(q, running mean of J)."""
    if not dependent:
        return (rng.random((trials, n)) < q).sum(axis=1)
    total = np.zeros(trials)
    u = rng.random((n, trials))
    for k in range(n):
        prob = np.maximum(q, total / k) if k else np.full(trials, q)
        total += u[k] < prob
    return total


def _bernoulli_ld(plan, p, ctx) -> ProbeResult:
    q, eps, n, trials = float(p["q"]), float(p["eps"]), int(p["n"]), int(p["trials"])
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    seed = RngSeed(plan.seed)
    level = n * q * (1 - eps)
    bound = math.exp(-n * q * eps ** 2 / 2)
    freqs = {}
    for name, dep, purpose in (("iid", False, _PURPOSE_BERNOULLI_IID), ("dependent", True, _PURPOSE_BERNOULLI_DEP)):
        sums = bernoulli_sums(q, n, trials, stream_generator(seed, purpose), dep)
        f = float(np.mean(sums <= level))
        freqs[name] = {"estimate": f, "se": proportion_se(f, trials), "verdict": upper_verdict(f, proportion_se(f, trials), bound)}
    verdict = "pass" if all(v["verdict"] == "pass" for v in freqs.values()) else "fail"
    details = {"level": level, "constructions": freqs,
               "dependent_rule": "P(J_{k+1}=1 | past) = max(q, mean(J_1..J_k))"}
    return ProbeResult(probe="bernoulli_ld", params=p, estimate=freqs["iid"]["estimate"], se=freqs["iid"]["se"],
                       bound=bound, verdict=verdict, n=trials, seed=plan.seed, config_digest=None,
                       direction="upper", details=details)


# ---------------------------------------------------------------------------
# registry

@dataclass(frozen=True)
class _Probe:
    evaluate: Callable
    defaults: dict
    needs: Callable | None = None


def _default_needs(plan, p):
    return [_request(plan, p)]


PROBES: dict[str, _Probe] = {
    "mass_decay": _Probe(_mass_decay, {"t": 4.0, "eps": 0.5}, _mass_decay_needs),
    "mass_martingale": _Probe(_mass_martingale, {"identity_rel_tol": 1e-12}, _default_needs),
    "quadratic_variation": _Probe(_quadratic_variation, {"slack": 0.15, "t_min": 0.1}, _default_needs),
    "decay_pathwise": _Probe(_decay_pathwise, {"window": None, "min_fraction": 0.95}, _default_needs),
    "void_event": _Probe(_void_event, {"t_grid": [2.0, 4.0, 6.0], "tau": None, "delta": 0.1, "moments": [2, 4],
                                       "n_boot": 400, "min_probability": 0.9}, _void_event_needs),
    "excursions": _Probe(_excursions, {"tau": None, "delta": 0.1, "max_n": 10_000}, _default_needs),
    "large_lambda": _Probe(_large_lambda, {"lambdas": [1.0, 2.0, 4.0], "t": 1.0, "slack": 0.0,
                                           "step_noise_limit": 0.15}, _large_lambda_requests),
    "lyapunov": _Probe(_lyapunov, {"ks": [2, 3, 4], "window": [1.0, 3.0], "snapshot_every": 0.25, "n_boot": 200},
                       lambda plan, p: [_request(plan, p, snapshot_times=_lyapunov_times(p))]),
    "martingale_tail": _Probe(_martingale_tail, {"T": 4.0, "c": 1.0, "eps": 1.0, "n_paths": 5000,
                                                 "horizon_factor": 100.0, "grid_step": 0.05,
                                                 "variant_horizon_factor": 25.0, "variant_dt": 0.01,
                                                 "ks_paths": 10_000, "ks_points": 1000, "ks_level": 1e-3}),
    "bernoulli_ld": _Probe(_bernoulli_ld, {"q": 0.5, "eps": 0.5, "n": 64, "trials": 20_000}),
}


def _with_defaults(spec: ProbeSpec) -> dict:
    return {**PROBES[spec.name].defaults, **spec.params}


# ---------------------------------------------------------------------------
# runner

def run_probe(plan: ExperimentPlan, spec: ProbeSpec, ctx: _Context | None = None) -> ProbeResult:
    ctx = ctx or _Context(plan)
    params = _with_defaults(spec)
    return PROBES[spec.name].evaluate(plan, params, ctx)


def run_plan(plan: ExperimentPlan, output_dir: str | Path | None = None) -> EnsembleResult:
    """Run every probe in order; a probe that raises becomes a structured error row.

    With an output directory the bundle is ``results.jsonl`` (one metadata
    line, then one line per probe), per-trajectory CSVs under
    ``trajectories/<config digest>/`` and ``manifest.json`` listing file hashes.
    """
    ctx = _Context(plan)
    for spec in plan.probes:
        needs = PROBES[spec.name].needs
        if needs is None:
            continue
        try:
            for req in needs(plan, _with_defaults(spec)):
                ctx.register(req)
        except Exception:  # reported when the probe itself runs
            pass
    results = []
    for spec in plan.probes:
        params = _with_defaults(spec)
        start = time.perf_counter()
        try:
            res = PROBES[spec.name].evaluate(plan, params, ctx)
        except Exception as exc:  # noqa: BLE001 - partial failure is part of the contract
            res = ProbeResult(probe=spec.name, params=params, estimate=None, se=None, bound=None, verdict="error",
                              n=0, seed=plan.seed, config_digest=None,
                              error={"type": type(exc).__name__, "message": str(exc)})
        if plan.record_wall_time:
            res.wall_ms = round((time.perf_counter() - start) * 1000.0, 3)
        results.append(res)
    bundle = EnsembleResult(plan, results)
    out = output_dir if output_dir is not None else plan.output_dir
    if out is not None:
        bundle.artifacts = write_bundle(bundle, ctx, Path(out))
    return bundle


def metadata_row(plan: ExperimentPlan) -> dict:
    return {"type": "metadata", "tool": TOOL_NAME, "version": __version__, "plan": plan.name,
            "plan_digest": plan.digest(), "seed": plan.seed, "n_probes": len(plan.probes)}


def write_bundle(bundle: EnsembleResult, ctx: _Context, out: Path) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    plan = bundle.plan
    files: dict[str, bytes] = {}
    lines = [_dumps(metadata_row(plan))] + [_dumps({"type": "result", **r.row()}) for r in bundle.results]
    files["results.jsonl"] = ("\n".join(lines) + "\n").encode()
    for key in sorted(ctx.cache):
        config, records = ctx.configs[key], ctx.cache[key]
        digest = config.digest()
        for rec in records[: plan.max_trajectory_csvs]:
            header = [
                f"tool={TOOL_NAME} {__version__}",
                f"config_digest={digest}",
                f"seed={rec.seed} stream={rec.stream}",
                f"lambda={rec.lam!r} nu={rec.nu!r} cadence_dt={rec.cadence_dt!r} test_mode={rec.test_mode}",
            ]
            files[f"trajectories/{digest[:16]}/stream_{rec.stream:06d}.csv"] = rec.to_csv(header).encode("ascii")
    hashes = {}
    for name in sorted(files):
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(files[name])
        hashes[name] = hashlib.sha256(files[name]).hexdigest()
    manifest = {"tool": TOOL_NAME, "version": __version__, "plan_digest": plan.digest(), "seed": plan.seed,
                "plan": plan.to_dict(), "files": hashes}
    text = json.dumps(_jsonable(manifest), sort_keys=True, indent=1) + "\n"
    (out / "manifest.json").write_text(text)
    hashes["manifest.json"] = hashlib.sha256(text.encode()).hexdigest()
    return hashes


def verdict_table(bundle: EnsembleResult) -> str:
    """Plain-text table of probe, estimate, se, bound and verdict."""
    def fmt(v):
        return "-" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))

    rows = [("probe", "estimate", "se", "bound", "n", "verdict")]
    for r in bundle.results:
        rows.append((r.probe, fmt(r.estimate), fmt(r.se), fmt(r.bound), str(r.n), r.verdict))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)
