"""Command line: ``validate``, ``synth-weights``, ``simulate`` and ``photonbox``.

Exit codes: 0 success, 1 contract violation during computation, 2 bad
configuration or degenerate control.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import RunConfig, build_detection, build_family, photonbox_params
from .controller import control_grid
from .detection import check_kernel_inclusion
from .ensemble import _jsonable, dump_json, run_ensemble
from .kraus import ConfigurationError, ContractError, check_distinguishable, kraus_derivatives
from .lyapunov import (
    DegenerateControlError,
    NumericalError,
    SynthesisError,
    build_metzler,
    check_strong_connectivity,
    metzler_violations,
    second_derivative_check,
    synthesize,
)
from .photonbox import default_lambda, detector_matrix

EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG = 0, 1, 2


def _load(args) -> tuple[RunConfig, dict]:
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"/: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw), raw


def _emit(report: dict, out: str | None, name: str) -> None:
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        dump_json(report, Path(out) / name)


def _check(name: str, ok: bool, **detail) -> dict:
    return {"check": name, "pass": bool(ok), **detail}


def validate_report(cfg: RunConfig) -> dict:
    """Machine-readable pass/fail for every structural assumption of the model."""
    family = build_family(cfg)
    u_bar = cfg.controller.u_bar or (photonbox_params(cfg).u_bar if cfg.is_photonbox else 0.1)
    defects = [family.completeness_defect(u) for u in control_grid(u_bar, cfg.controller.grid_points)]
    checks = [_check("completeness", max(defects) <= family.completeness_tol, max_defect=max(defects), u_bar=u_bar)]
    a1 = family.qnd_defect()
    checks.append(_check("qnd_form", a1 <= 1e-12, max_off_diagonal=a1))
    norm = float(np.max(np.abs(np.sum(np.abs(family.qnd_coefficients) ** 2, axis=0) - 1.0)))
    checks.append(_check("qnd_normalization", norm <= 1e-10, max_defect=norm))
    ok2, pairs2 = check_distinguishable(family)
    checks.append(_check("distinguishable_outcomes", ok2, witnesses=[list(p) for p in pairs2]))
    try:
        derivs = kraus_derivatives(family)
        checks.append(_check("derivatives_available", True, mode=family.derivative_mode))
    except ConfigurationError as exc:
        derivs = None
        checks.append(_check("derivatives_available", False, mode=family.derivative_mode, error=str(exc)))
    detection = detector_matrix(photonbox_params(cfg)) if cfg.experiment == "photonbox" else build_detection(cfg, family)
    if detection is not None:
        ok4, pairs4 = check_kernel_inclusion(detection, family)
        checks.append(_check("detector_kernel_inclusion", ok4, witnesses=[list(p) for p in pairs4]))
    if derivs is not None:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                r = build_metzler(family, derivs)
            problems = metzler_violations(r)
            checks.append(_check("metzler", not problems, problems=problems))
            conn = check_strong_connectivity(r)
            checks.append(_check("strong_connectivity", conn.strongly_connected, components=conn.components))
        except DegenerateControlError as exc:
            checks.append(_check("metzler", False, problems=[str(exc)]))
    return {"family": family.name, "dim": family.dim, "outcomes": family.outcome_count,
            "all_pass": all(c["pass"] for c in checks), "checks": checks}


def synth_report(cfg: RunConfig) -> dict:
    family = build_family(cfg)
    target = cfg.resolved_target()
    lam = cfg.lyapunov.get("lambda")
    if cfg.is_photonbox:
        params = photonbox_params(cfg)
        lam = default_lambda(params) if lam is None else lam
        eps, u_bar = (0.0 if cfg.controller.epsilon is None else cfg.controller.epsilon), params.u_bar
    else:
        eps, u_bar = ("ceiling" if cfg.controller.epsilon is None else cfg.controller.epsilon), cfg.controller.u_bar or 0.1
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        synth = synthesize(family, target, lam, epsilon=eps, u_bar=u_bar)
    tol = 1e-3 if family.derivative_mode == "finite-difference" else 1e-4
    report = synth.to_dict()
    report["second_derivative_check"] = second_derivative_check(synth.spec, family, tol=tol)
    report["derivative_mode"] = family.derivative_mode
    report["warnings"] = sorted({str(w.message) for w in caught})
    if synth.spec.epsilon == 0:
        report["warnings"].append("epsilon = 0: outside the range covered by the convergence guarantee")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qndfeedback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        if run:
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")
            p.add_argument("--trajectories", type=int, help="number of trajectories")
            p.add_argument("--steps", type=int, help="steps per trajectory")
            p.add_argument("--emit-trajectories", action="store_true", help="write one CSV per trajectory")
        return p

    common(sub.add_parser("validate", help="check the model assumptions"))
    common(sub.add_parser("synth-weights", help="synthesize the Lyapunov weights"))
    sim = common(sub.add_parser("simulate", help="run a trajectory ensemble"), run=True)
    sim.add_argument("--kind", choices=["open", "closed", "robustness"], help="experiment kind")
    common(sub.add_parser("photonbox", help="run the photon-box feedback experiment"), run=True)
    return parser


def _run(args, cfg: RunConfig, raw: dict) -> int:
    kind = "photonbox" if args.command == "photonbox" else (args.kind or cfg.experiment)
    if args.command == "simulate" and kind == "photonbox":
        raise ConfigurationError("/experiment: use the photonbox subcommand for photonbox runs")
    for name, value in (("seed", args.seed), ("trajectories", args.trajectories), ("steps", args.steps)):
        if value is not None and value < 0:
            raise ConfigurationError(f"--{name.replace('_', '-')}: must be nonnegative")
    if args.seed is not None and args.seed >= 2**64:
        raise ConfigurationError("--seed: must fit in 64 bits")
    summary = run_ensemble(
        cfg,
        kind=kind,
        seed=args.seed,
        trajectories=args.trajectories,
        steps=args.steps,
        out=args.out,
        emit=True if args.emit_trajectories else None,
        raw=raw,
    )
    summary.pop("_timing", None)
    brief = {k: summary.get(k) for k in ("experiment", "trajectories", "histogram", "reach", "time_average",
                                         "supermartingale", "aborted")}
    print(json.dumps(_jsonable(brief), indent=2, sort_keys=True))
    if summary.get("supermartingale") and summary["supermartingale"]["violations"]:
        print("error: supermartingale property violated", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, raw = _load(args)
        if args.command == "validate":
            _emit(validate_report(cfg), args.out, "validate.json")
            return EXIT_OK
        if args.command == "synth-weights":
            _emit(synth_report(cfg), args.out, "synthesis.json")
            return EXIT_OK
        return _run(args, cfg, raw)
    except (ConfigurationError, DegenerateControlError, SynthesisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, NumericalError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
