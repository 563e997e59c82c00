"""Command-line entry point: simulate, verify, probe, kernel-eval.

Exit status: 0 success; 1 a bound or probe failed; 2 configuration error;
3 numerical failure during simulation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import TOOL_NAME, __version__
from .config import ConfigError, RunConfig
from .experiments import UnknownProbeError, run_plan, verdict_table
from .inequalities import (
    IJQuery,
    QuadratureError,
    default_lattice,
    verify_beta_bound,
    verify_lemma_ij,
)
from .kernel import KernelParams, TruncationError, kernel_eval
from .kernel_checks import run_kernel_suite
from .solver import DivergenceError, NumericalFailure, StabilityError, run_ensemble

OUTPUT_ENV = "SHEDECAY_OUTPUT_DIR"
DEFAULT_OUTPUT = "shedecay-output"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger(TOOL_NAME)


def _output_dir(arg: str | None, cfg: RunConfig | None = None) -> Path:
    if arg:
        return Path(arg)
    if cfg is not None and cfg.data.get("output_dir"):
        return Path(cfg.data["output_dir"])
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    cfg = RunConfig.load(args.config, overrides)
    logging.basicConfig(level=str(cfg.data["log_level"]).upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    return cfg


# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _output_dir(args.output_dir, cfg)
    config = cfg.solver
    digest = cfg.digest()
    log.info("simulating %d trajectories, %d steps each", cfg.n_trajectories, config.n_steps)
    records = run_ensemble(cfg.initial, config, cfg.n_trajectories, workers=cfg.workers)
    lines = [_dumps({"type": "run", "tool": TOOL_NAME, "version": __version__, "config_digest": digest,
                     "seed": int(config.seed.master_seed), "effective_config": cfg.canonical(),
                     "solver_digest": config.digest()})]
    for rec in records:
        name = f"trajectory_{rec.stream:06d}.csv"
        header = [
            f"tool={TOOL_NAME} {__version__}",
            f"config_digest={digest}",
            f"seed={rec.seed} stream={rec.stream}",
            f"lambda={rec.lam!r} nu={rec.nu!r} cadence_dt={rec.cadence_dt!r} test_mode={rec.test_mode}",
        ]
        sha = _write(out / name, rec.to_csv(header))
        lines.append(_dumps({"type": "trajectory", "stream": rec.stream, "file": name, "sha256": sha,
                             "negativity_count": rec.negativity_count, "config_digest": digest,
                             "seed": rec.seed, "version": __version__}))
    _write(out / "manifest.jsonl", "\n".join(lines) + "\n")
    print(f"wrote {len(records)} trajectories to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    out = _output_dir(args.output_dir)
    if args.target == "kernel":
        if args.constants is not None and not Path(args.constants).is_file():
            raise ConfigError(f"constants file not found: {args.constants}")
        rows = run_kernel_suite(args.constants)
        text = "".join(_dumps(r.row()) + "\n" for r in rows)
        _write(out / "kernel_certificates.jsonl", text)
        failed = [r for r in rows if not r.passed]
        for r in failed:
            print(f"FAIL {r.check} {_dumps(r.params)} lhs={r.lhs!r} rhs={r.rhs!r}", file=sys.stderr)
        print(f"kernel suite: {len(rows) - len(failed)}/{len(rows)} checks passed")
        return EXIT_FAIL if failed else EXIT_OK

    single = [v is not None for v in (args.eps, args.alpha, args.beta)]
    if any(single) and not all(single):
        raise ConfigError("--eps, --alpha and --beta must be given together")
    try:
        queries = [IJQuery(args.eps, args.alpha, args.beta)] if all(single) else default_lattice()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows, failed = [], []
    for q in queries:
        cert = verify_lemma_ij(q)
        rows.append(cert.row())
        if not cert.passed:
            failed.append(cert.row())
    if not all(single):
        for eps, alpha in sorted({(q.eps, q.alpha) for q in queries}):
            b = verify_beta_bound(eps, alpha)
            rows.append({"check": "beta", **b.row()})
            if not b.passed:
                failed.append(b.row())
    _write(out / "inequality_certificates.jsonl", "".join(_dumps(r) + "\n" for r in rows))
    for r in rows:
        print(_dumps(r))
    for r in failed:
        print(f"FAIL {_dumps(r)}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    out = _output_dir(args.output_dir, cfg)
    try:
        plan = cfg.plan()
    except UnknownProbeError as exc:
        raise ConfigError(str(exc)) from exc
    bundle = run_plan(plan, out)
    print(verdict_table(bundle))
    for r in bundle.results:
        if r.error:
            print(f"ERROR {r.probe}: {r.error['type']}: {r.error['message']}", file=sys.stderr)
    return EXIT_OK if bundle.ok else EXIT_FAIL


def cmd_kernel_eval(args) -> int:
    params = KernelParams(truncation_order=args.order, abs_tolerance=args.tol)
    value = kernel_eval(args.t, args.x, args.y, params)
    print(repr(float(value)))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=TOOL_NAME,
        description="Simulate the multiplicative stochastic heat equation on [-1, 1] and certify its bounds.",
        epilog=f"Exit status: 0 ok, 1 bound/probe failure, 2 config error, 3 numerical failure. "
               f"Default output directory: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}.",
    )
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def config_args(p):
        p.add_argument("--config", metavar="PATH", help="YAML or JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted paths for nested keys; repeatable, last wins)")
        p.add_argument("--workers", type=int, metavar="N", help="worker processes (results do not depend on it)")
        p.add_argument("--output-dir", metavar="DIR", help=f"artifact directory (default ${OUTPUT_ENV})")

    p = sub.add_parser("simulate", help="run trajectories and write one CSV each plus a JSONL manifest")
    config_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the kernel bound suite or the integral-inequality lattice")
    p.add_argument("target", choices=("kernel", "inequalities"), help="which verifier to run")
    p.add_argument("--constants", metavar="PATH", help="kernel: fixture with frozen constants (default: packaged)")
    p.add_argument("--eps", type=float, help="inequalities: a single eps in (0, 1)")
    p.add_argument("--alpha", type=float, help="inequalities: a single alpha in [0, 1)")
    p.add_argument("--beta", type=float, help="inequalities: a single beta >= 1")
    p.add_argument("--output-dir", metavar="DIR", help=f"certificate directory (default ${OUTPUT_ENV})")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("probe", help="run the Monte Carlo probes of a plan and print a verdict table")
    config_args(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("kernel-eval", help="evaluate the periodic heat kernel p_t(x, y)")
    p.add_argument("--t", type=float, required=True, help="time t > 0")
    p.add_argument("--x", type=float, required=True, help="first point in [-1, 1]")
    p.add_argument("--y", type=float, required=True, help="second point in [-1, 1]")
    p.add_argument("--order", type=int, help="image-sum truncation order (default: automatic)")
    p.add_argument("--tol", type=float, default=1e-12, help="absolute truncation tolerance (default 1e-12)")
    p.set_defaults(func=cmd_kernel_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, StabilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TruncationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DivergenceError, QuadratureError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
