"""Ensemble execution: scenario construction, fixed-block scheduling, ordered reduction, file output."""
from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, build_detection, build_family, build_state, photonbox_params
from .controller import ControllerConfig
from .detection import DetectionModel
from .engine import BlockResult, Scenario, run_block
from .kraus import ConfigurationError, ControlledKrausFamily
from .lyapunov import Synthesis, synthesize
from .photonbox import PhotonBox, PhotonBoxController, default_lambda, detector_matrix

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class Prepared:
    """A scenario plus the objects it was built from (reported in the summary)."""

    scenario: Scenario
    family: ControlledKrausFamily
    synthesis: Synthesis | None
    detection: DetectionModel | None
    params: object | None


def _synthesis(cfg: RunConfig, family, target: int) -> Synthesis:
    ctl = cfg.controller
    lam = cfg.lyapunov.get("lambda")
    if cfg.is_photonbox:
        params = photonbox_params(cfg)
        lam = default_lambda(params) if lam is None else lam
        eps, u_bar = (0.0 if ctl.epsilon is None else ctl.epsilon), params.u_bar
    else:
        eps, u_bar = ("ceiling" if ctl.epsilon is None else ctl.epsilon), (ctl.u_bar or 0.1)
    with warnings.catch_warnings():
        if cfg.is_photonbox and eps == 0.0:
            warnings.simplefilter("ignore", RuntimeWarning)
        return synthesize(family, target, lam, epsilon=eps, u_bar=u_bar)


def prepare(cfg: RunConfig, kind: str | None = None, steps: int | None = None) -> Prepared:
    """Build every model object the run needs from a validated config."""
    kind = kind or cfg.experiment
    if kind == "photonbox" and not cfg.is_photonbox:
        raise ConfigurationError("/family/builtin: photonbox experiments need the photon-box family")
    if cfg.resolved_mode() == "quadratic" and kind in ("closed", "robustness"):
        raise ConfigurationError("/controller/mode: quadratic feedback is only available in photonbox runs")
    family = build_family(cfg)
    d = family.dim
    target = cfg.resolved_target()
    if not 0 <= target < d:
        raise ConfigurationError(f"/target: {target} out of range for dimension {d}")
    default_rho = "coherent" if kind == "photonbox" else "maximally_mixed"
    rho0 = build_state(cfg.initial_state or default_rho, d, cfg, "/initial_state")
    est_desc = cfg.estimate_initial_state
    if est_desc is None:
        est_desc = cfg.initial_state or default_rho if kind == "photonbox" else "maximally_mixed"
    rho_est0 = build_state(est_desc, d, cfg, "/estimate_initial_state") if kind in ("robustness", "photonbox") else None
    conv = cfg.convergence
    common = dict(
        steps=cfg.ensemble.steps if steps is None else steps,
        target=target,
        rho0=rho0,
        family=family,
        rho_est0=rho_est0,
        record_every=cfg.ensemble.record_every,
        hit_threshold=conv.hit_threshold,
        average_from=conv.average_from,
        convergence_threshold=conv.threshold,
        convergence_window=conv.window,
        jump_threshold=conv.jump_threshold,
    )
    if kind == "open":
        return Prepared(Scenario(kind, **common), family, None, None, None)
    synth = _synthesis(cfg, family, target)
    if kind == "photonbox":
        params = photonbox_params(cfg)
        box = PhotonBox(params, detector_matrix(params))
        ctrl = PhotonBoxController(box, synth.spec.sigma, cfg.resolved_mode(), cfg.controller.grid_points)
        sc = Scenario(kind, box=box, pb_controller=ctrl, **common)
        return Prepared(sc, family, synth, box.detection, params)
    detection = build_detection(cfg, family) if kind == "robustness" else None
    ctl = ControllerConfig(
        synth.spec, "grid", u_bar=synth.spec.u_bar, grid_points=cfg.controller.grid_points, tau=cfg.controller.tau or 0
    )
    sc = Scenario(kind, controller=ctl, detection=detection, **common)
    return Prepared(sc, family, synth, detection, None)


# ---------------------------------------------------------------------------
# execution


def blocks(n: int, size: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _worker(raw: dict, kind: str, steps: int, seed: int, indices, emit: bool) -> BlockResult:
    prep = prepare(RunConfig.from_dict(raw), kind, steps)
    return run_block(prep.scenario, seed, indices, emit=emit)


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def execute(prep: Prepared, seed: int, trajectories: int, block_size: int, *, emit=False, workers=1, raw=None):
    """Run every block, returning results in trajectory order."""
    parts = blocks(trajectories, block_size)
    if workers <= 1 or len(parts) <= 1 or raw is None:
        return [run_block(prep.scenario, seed, idx, emit=emit) for idx in parts]
    sc = prep.scenario
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_worker, raw, sc.kind, sc.steps, seed, idx, emit) for idx in parts]
        return [f.result() for f in futures]


def _cat(results, name):
    vals = [getattr(r, name) for r in results]
    if not vals or vals[0] is None:
        return None
    return np.concatenate(vals)


def _stats(series: np.ndarray) -> dict:
    q = np.quantile(series, QUANTILES, axis=0)
    out = {"mean": series.mean(axis=0).tolist()}
    for level, row in zip(QUANTILES, q):
        out[f"q{int(round(level * 100)):02d}"] = row.tolist()
    return out


def summarize(prep: Prepared, results: list[BlockResult], seed: int, trajectories: int) -> dict:
    """Deterministic reduction over blocks in trajectory order."""
    sc = prep.scenario
    d = sc.family.dim
    summary: dict = {
        "experiment": sc.kind,
        "seed": int(seed),
        "trajectories": int(trajectories),
        "steps": int(sc.steps),
        "target": int(sc.target),
        "dim": int(d),
        "convergence_rule": {
            "threshold": sc.convergence_threshold,
            "window": sc.convergence_window,
            "hit_threshold": sc.hit_threshold,
            "average_from": sc.average_from,
        },
        "synthesis": prep.synthesis.to_dict() if prep.synthesis is not None else None,
        "detection": (
            {"eta": prep.detection.to_rows(), "labels": list(prep.detection.labels or [])}
            if prep.detection is not None
            else None
        ),
        "photonbox": prep.params.to_dict() if prep.params is not None else None,
    }
    if trajectories == 0:
        summary.update(histogram={}, reach={}, time_average={}, series={}, supermartingale=None, aborted=0)
        return summary
    label = _cat(results, "label")
    hist = {str(n): float(np.mean(label == n)) for n in range(d)}
    hist["unconverged"] = float(np.mean(label < 0))
    final = _cat(results, "final_target")
    hit = sc.hit_threshold
    reach = {"true": float(np.mean(final >= hit))}
    first = _cat(results, "first_hit")
    reach["true_any_time"] = float(np.mean(first >= 0))
    average = {"true": float(np.mean(_cat(results, "average_target")))}
    series = {"step": sc.record_times[: results[0].series.shape[1]].tolist(), "true": _stats(_cat(results, "series"))}
    if sc.has_estimate:
        final_est = _cat(results, "final_target_est")
        reach["estimate"] = float(np.mean(final_est >= hit))
        reach["both"] = float(np.mean((final >= hit) & (final_est >= hit)))
        reach["estimate_any_time"] = float(np.mean(_cat(results, "first_hit_est") >= 0))
        average["estimate"] = float(np.mean(_cat(results, "average_target_est")))
        series["estimate"] = _stats(_cat(results, "series_est"))
    hits = first[first >= 0]
    summary.update(
        histogram=hist,
        reach=reach,
        first_hit={"median": float(np.median(hits)), "max": int(hits.max())} if len(hits) else None,
        time_average=average,
        series=series,
        steps_run=int(max(r.steps_run for r in results)),
        aborted=int(np.sum(_cat(results, "aborted_step") >= 0)),
    )
    if sc.kind == "closed":
        excess = _cat(results, "max_excess")
        summary["supermartingale"] = {
            "violations": int(np.sum(_cat(results, "violations"))),
            "max_excess": float(excess.max()) if sc.steps else None,
        }
    else:
        summary["supermartingale"] = None
    if sc.kind == "photonbox":
        jumps = _cat(results, "downward_jumps")
        summary["downward_jumps"] = {"mean": float(jumps.mean()), "total": int(jumps.sum())}
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def run_ensemble(
    cfg: RunConfig,
    *,
    kind: str | None = None,
    seed: int | None = None,
    trajectories: int | None = None,
    steps: int | None = None,
    out: str | Path | None = None,
    emit: bool | None = None,
    raw: dict | None = None,
) -> dict:
    """Run the configured experiment; write ``summary.json`` (and CSVs) when ``out`` is set."""
    ens = cfg.ensemble
    seed = ens.seed if seed is None else seed
    n = ens.trajectories if trajectories is None else trajectories
    emit = cfg.output.emit_trajectories if emit is None else emit
    out = out if out is not None else cfg.output.dir
    workers = ens.workers or default_workers()
    t0 = time.perf_counter()
    prep = prepare(cfg, kind, steps)
    t1 = time.perf_counter()
    results = execute(prep, seed, n, ens.block_size, emit=emit and out is not None, workers=workers, raw=raw)
    t2 = time.perf_counter()
    summary = summarize(prep, results, seed, n)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(summary, out / "summary.json")
        if emit:
            tdir = out / "trajectories"
            tdir.mkdir(exist_ok=True)
            for res in results:
                for rec in res.records or []:
                    rec.write_csv(tdir / f"traj_{rec.index:06d}.csv")
        dump_json(
            {"setup_seconds": t1 - t0, "simulate_seconds": t2 - t1, "workers": workers, "blocks": len(results)},
            out / "timing.json",
        )
    summary_wall = {"setup_seconds": t1 - t0, "simulate_seconds": t2 - t1}
    return {**summary, "_timing": summary_wall}
