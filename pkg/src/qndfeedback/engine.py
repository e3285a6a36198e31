"""Batched simulation of a block of trajectories.

All trajectories of a block advance together as ``(B, d, d)`` arrays.  Each
step consumes exactly ``SLOTS`` uniforms per trajectory from its own stream,
so results do not depend on how trajectories are grouped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import ControllerConfig, LyapunovGridController, q1_chain_batch, w_epsilon_batch
from .detection import DetectionModel
from .dynamics import CONVERGENCE_THRESHOLD, CONVERGENCE_WINDOW, ConvergenceTracker, TrajectoryRecord, inverse_cdf
from .kraus import P_FLOOR, ConfigurationError, ControlledKrausFamily, conjugate, hermitize, populations, trace
from .photonbox import PhotonBox, PhotonBoxController
from .rng import UniformBlocks

SLOTS = 3  # outcome, detector symbol, decoherence jump
SUPERMARTINGALE_TOL = 1e-9
KINDS = ("open", "closed", "robustness", "photonbox")


@dataclass
class Scenario:
    """Everything needed to simulate trajectories of one experiment."""

    kind: str
    steps: int
    target: int
    rho0: np.ndarray
    family: ControlledKrausFamily
    controller: ControllerConfig | None = None
    rho_est0: np.ndarray | None = None
    detection: DetectionModel | None = None
    box: PhotonBox | None = None
    pb_controller: PhotonBoxController | None = None
    record_every: int = 1
    hit_threshold: float = 0.99
    average_from: int = 0
    convergence_threshold: float = CONVERGENCE_THRESHOLD
    convergence_window: int = CONVERGENCE_WINDOW
    jump_threshold: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        if self.kind in ("closed", "robustness") and self.controller is None:
            raise ConfigurationError(f"{self.kind} runs need a controller")
        if self.kind == "photonbox" and (self.box is None or self.pb_controller is None):
            raise ConfigurationError("photonbox runs need the box and its controller")
        if self.kind == "photonbox" and self.detection is not None:
            raise ConfigurationError("photonbox runs take their detector from the box")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")

    @property
    def tau(self) -> int:
        if self.kind == "photonbox":
            return self.box.params.tau
        return self.controller.tau if self.controller is not None else 0

    @property
    def has_estimate(self) -> bool:
        return self.kind in ("robustness", "photonbox")

    @property
    def record_times(self) -> np.ndarray:
        return np.arange(0, self.steps + 1, self.record_every)


@dataclass
class BlockResult:
    """Per-trajectory outcomes of one block; arrays are indexed like ``indices``."""

    indices: np.ndarray
    steps_run: int
    label: np.ndarray
    converged_step: np.ndarray
    first_hit: np.ndarray
    final_target: np.ndarray
    average_target: np.ndarray
    violations: np.ndarray
    max_excess: np.ndarray
    aborted_step: np.ndarray
    series: np.ndarray
    first_hit_est: np.ndarray | None = None
    final_target_est: np.ndarray | None = None
    average_target_est: np.ndarray | None = None
    series_est: np.ndarray | None = None
    downward_jumps: np.ndarray | None = None
    records: list[TrajectoryRecord] | None = None
    states: dict | None = field(default=None, repr=False)


def _broadcast(rho: np.ndarray, b: int) -> np.ndarray:
    return np.repeat(np.asarray(rho, dtype=complex)[None], b, axis=0)


def _first_hit(hit: np.ndarray, values: np.ndarray, threshold: float, k: int) -> None:
    fresh = (hit < 0) & (values >= threshold)
    hit[fresh] = k


def run_block(
    sc: Scenario,
    seed: int,
    indices,
    *,
    emit: bool = False,
    keep_states: bool = False,
    check_supermartingale: bool = True,
) -> BlockResult:
    """Simulate trajectories ``indices`` of the run seeded with ``seed``."""
    idx = np.asarray(indices, dtype=int)
    b, d, n_bar, tau = len(idx), sc.family.dim, sc.target, sc.tau
    rows = np.arange(b)
    uniforms = UniformBlocks(seed, idx, SLOTS)
    rho = _broadcast(sc.rho0, b)
    est = _broadcast(sc.rho_est0 if sc.rho_est0 is not None else sc.rho0, b) if sc.has_estimate else None
    pending = np.zeros((b, tau))
    if sc.kind == "photonbox" and not (np.any(rho.imag) or np.any(est.imag)):
        # every photon-box map is real, so real initial states stay real
        rho, est = rho.real.copy(), est.real.copy()
    closed = sc.kind != "open"
    grid_ctrl = LyapunovGridController(sc.controller, sc.family) if sc.kind in ("closed", "robustness") else None
    check = check_supermartingale and sc.kind == "closed"
    detection = sc.box.detection if sc.kind == "photonbox" else sc.detection
    eta = detection.eta if detection is not None else None

    tracker = ConvergenceTracker(b, sc.convergence_threshold, sc.convergence_window)
    first_hit = np.full(b, -1)
    first_hit_est = np.full(b, -1) if est is not None else None
    violations = np.zeros(b, dtype=int)
    max_excess = np.full(b, -np.inf)
    aborted = np.full(b, -1)
    jumps = np.zeros(b, dtype=int) if sc.kind == "photonbox" else None
    times = sc.record_times
    series = np.empty((b, len(times)))
    series_est = np.empty((b, len(times))) if est is not None else None
    avg = np.zeros(b)
    avg_est = np.zeros(b) if est is not None else None
    n_avg = 0

    pops = populations(rho)
    series[:, 0] = pops[:, n_bar]
    _first_hit(first_hit, pops[:, n_bar], sc.hit_threshold, 0)
    if est is not None:
        pe0 = populations(est)[:, n_bar]
        series_est[:, 0] = pe0
        _first_hit(first_hit_est, pe0, sc.hit_threshold, 0)

    records = None
    if emit:
        records = [
            TrajectoryRecord(
                seed,
                int(i),
                w_eps=[] if sc.kind in ("closed", "robustness") else None,
                detector_outcomes=[] if est is not None else None,
                est_populations=[] if est is not None else None,
            )
            for i in idx
        ]
    states = None
    if keep_states:
        states = {
            "rho": np.empty((b, sc.steps, d, d), dtype=complex),
            "pending": np.empty((b, sc.steps, tau)),
            "control": np.empty((b, sc.steps)),
        }
    ops0 = sc.family.operators(0.0)
    # photon box: displacement unitaries of the pending controls, aligned with ``pending``
    dms = np.broadcast_to(np.eye(d), (b, tau, d, d)).copy() if sc.kind == "photonbox" else None
    steps_run = 0
    for k in range(sc.steps):
        u = uniforms.draw(k)
        alive = aborted < 0
        # -- control --------------------------------------------------------
        if sc.kind == "open":
            u_new = np.zeros(b)
        elif sc.kind == "photonbox":
            u_new = sc.pb_controller(est, pending, dms)
            dm_new = sc.box.displacements(u_new)
        else:
            u_new, diag = grid_ctrl(est if est is not None else rho, pending, diagnostics=check)
            if check:
                excess = diag["expected"] - diag["w"]
                max_excess = np.maximum(max_excess, excess)
                violations += excess > SUPERMARTINGALE_TOL
        if keep_states:
            states["rho"][:, k] = rho
            states["pending"][:, k] = pending
            states["control"][:, k] = u_new
        applied = pending[:, -1] if tau else u_new

        # -- hidden system --------------------------------------------------
        if sc.kind == "photonbox":
            box = sc.box
            before = populations(rho)[:, n_bar]
            x, jump = box.sample_decoherence(rho, u[:, 2])
            jumps += (jump == 1) & (before >= sc.jump_threshold) & alive
            dm_applied = dms[:, -1] if tau else dm_new
            x = box.displace(x, dm=dm_applied)
            p = populations(x) @ (box.diag**2).T
            mu = inverse_cdf(p, u[:, 0])
            new = x * box.outer[mu] / p[rows, mu][:, None, None]
            ops = None
        else:
            ops = sc.family.operators_batch(applied) if closed else np.broadcast_to(ops0, (b,) + ops0.shape)
            y = conjugate(ops, rho)
            p = trace(y)
            mu = inverse_cdf(p, u[:, 0])
            new = y[rows, mu] / p[rows, mu][:, None, None]
        rho = np.where(alive[:, None, None], hermitize(new), rho)

        # -- detector and filter --------------------------------------------
        mu_rec = mu
        if est is not None:
            if eta is not None:
                mu_rec = inverse_cdf(eta[:, mu].T, u[:, 1])
            if sc.kind == "photonbox":
                out, pe = sc.box.record_update(sc.box.displace(sc.box.decohere(est), dm=dm_applied), mu_rec)
            else:
                ye = conjugate(ops, est)
                weights = eta[mu_rec] if eta is not None else np.eye(ops.shape[1])[mu_rec]
                out = np.einsum("bm,bmij->bij", weights, ye)
                pe = trace(out)
            bad = alive & (pe <= P_FLOOR)
            aborted[bad] = k
            ok = alive & ~bad
            est = np.where(ok[:, None, None], hermitize(out / np.where(ok, pe, 1.0)[:, None, None]), est)

        if tau:
            pending = np.concatenate([u_new[:, None], pending[:, :-1]], axis=1)
            if dms is not None:
                dms = np.concatenate([dm_new[:, None], dms[:, :-1]], axis=1)
        steps_run = k + 1

        # -- bookkeeping ----------------------------------------------------
        pops = populations(rho)
        tracker.update(k, pops)
        _first_hit(first_hit, pops[:, n_bar], sc.hit_threshold, steps_run)
        if est is not None:
            pest = populations(est)
            _first_hit(first_hit_est, pest[:, n_bar], sc.hit_threshold, steps_run)
        if steps_run > sc.average_from:
            avg += pops[:, n_bar]
            if est is not None:
                avg_est += pest[:, n_bar]
            n_avg += 1
        if steps_run % sc.record_every == 0:
            j = steps_run // sc.record_every
            series[:, j] = pops[:, n_bar]
            if est is not None:
                series_est[:, j] = pest[:, n_bar]
        if emit:
            _append_records(records, sc, rho, est, pending, mu, mu_rec, u_new, pops)
        if sc.kind == "open" and tracker.done:
            break

    # open-loop runs may stop early once every trajectory is labeled
    last = steps_run // sc.record_every
    if last + 1 < len(times):
        series[:, last + 1 :] = series[:, last : last + 1]
    n_avg = n_avg if n_avg else np.nan  # nothing past average_from
    return BlockResult(
        indices=idx,
        steps_run=steps_run,
        label=tracker.label.copy(),
        converged_step=tracker.step.copy(),
        first_hit=first_hit,
        final_target=populations(rho)[:, n_bar],
        average_target=avg / n_avg,
        violations=violations,
        max_excess=max_excess,
        aborted_step=aborted,
        series=series,
        first_hit_est=first_hit_est,
        final_target_est=populations(est)[:, n_bar] if est is not None else None,
        average_target_est=avg_est / n_avg if est is not None else None,
        series_est=series_est,
        downward_jumps=jumps,
        records=records,
        states=states,
    )


def _append_records(records, sc: Scenario, rho, est, pending, mu, mu_rec, u_new, pops) -> None:
    from .dynamics import gamma, pairwise_q1

    c2 = np.abs(sc.family.qnd_coefficients) ** 2
    branch = c2[None] * pops[:, None, :]
    p = branch.sum(axis=-1)
    q1 = pairwise_q1(p, branch / np.where(p > P_FLOOR, p, 1.0)[..., None])
    g = gamma(pops[:, :, None] * np.eye(pops.shape[1]))
    w = None
    if sc.kind in ("closed", "robustness"):
        w = w_epsilon_batch(sc.controller.spec, sc.family, est if est is not None else rho, pending)
    pest = populations(est) if est is not None else None
    for j, rec in enumerate(records):
        rec.outcomes.append(int(mu[j]))
        rec.controls.append(float(u_new[j]))
        rec.populations.append(pops[j].copy())
        rec.gamma.append(float(g[j]))
        rec.q1.append(float(q1[j]))
        if w is not None:
            rec.w_eps.append(float(w[j]))
        if est is not None:
            rec.detector_outcomes.append(int(mu_rec[j]))
            rec.est_populations.append(pest[j].copy())


def identity_residuals(sc: Scenario, states: dict) -> dict:
    """Batched ``E[W | chi, f(chi)] - (W - Q1 - Q2)`` over stored closed-loop states."""
    rho = states["rho"].reshape((-1,) + states["rho"].shape[2:])
    pending = states["pending"].reshape(-1, states["pending"].shape[-1])
    ctrl = LyapunovGridController(sc.controller, sc.family)
    vals = ctrl.evaluator.values(rho, pending)
    u, diag = ctrl(rho, pending, diagnostics=True)
    q1 = q1_chain_batch(sc.controller.spec, sc.family, rho, pending)
    q2 = vals[:, ctrl.evaluator.zero] - vals.min(axis=1)
    resid = diag["expected"] - (diag["w"] - q1 - q2)
    return {"residual": resid, "q1": q1, "q2": q2, "control": u}
