"""Open-loop and delayed closed-loop stepping of the measured Markov chain."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kraus import (
    P_FLOOR,
    ContractError,
    ControlledKrausFamily,
    FilterDivergenceError,
    apply_jump,
    conjugate,
    outcome_probabilities,
    populations,
)

CONVERGENCE_THRESHOLD = 0.999
CONVERGENCE_WINDOW = 50


def inverse_cdf(p: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Batched inverse-CDF sampling; rows of ``p`` need not be normalized.

    Entries at or below ``P_FLOOR`` are never selected.
    """
    p = np.where(p > P_FLOOR, p, 0.0)
    c = np.cumsum(p, axis=-1)
    x = np.asarray(uniforms)[..., None] * c[..., -1:]
    idx = np.sum(c <= x, axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def sample_outcome(probabilities, rng: np.random.Generator) -> int:
    """Draw an outcome index from one uniform of ``rng``."""
    p = np.asarray(probabilities, dtype=float)
    if np.any(p < -1e-12):
        raise ContractError(f"negative probability {p.min():.3e}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"probabilities sum to {p.sum():.12g}")
    return int(inverse_cdf(p, rng.random()))


def step_open_loop(family: ControlledKrausFamily, rho: np.ndarray, rng: np.random.Generator):
    p = outcome_probabilities(family, 0.0, rho)
    mu = sample_outcome(p, rng)
    return apply_jump(family, 0.0, mu, rho), mu


@dataclass(frozen=True)
class DelayChainState:
    """State ``(rho, beta_1, ..., beta_tau)``; ``beta_r`` is the control issued ``r`` steps ago."""

    rho: np.ndarray
    pending: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pending", tuple(float(b) for b in self.pending))

    @property
    def tau(self) -> int:
        return len(self.pending)

    @property
    def next_control(self) -> float | None:
        """Control that acts on the next measurement (``beta_tau``), if any."""
        return self.pending[-1] if self.pending else None

    def check_bounds(self, u_bar: float) -> None:
        if any(abs(b) > u_bar + 1e-15 for b in self.pending):
            raise ContractError(f"pending controls {self.pending} exceed u_bar={u_bar}")


def shift_pending(pending: Sequence[float], u_new: float) -> tuple[float, ...]:
    if not pending:
        return ()
    return (float(u_new),) + tuple(pending[:-1])


def step_delay_chain(
    family: ControlledKrausFamily,
    chi: DelayChainState,
    u_new: float,
    rng: np.random.Generator,
    u_bar: float | None = None,
):
    """Apply ``beta_tau`` to the measurement, then push ``u_new`` into the pipeline."""
    if u_bar is not None and abs(u_new) > u_bar + 1e-15:
        raise ContractError(f"|u|={abs(u_new)} exceeds u_bar={u_bar}")
    applied = chi.pending[-1] if chi.pending else u_new
    p = outcome_probabilities(family, applied, chi.rho)
    mu = sample_outcome(p, rng)
    rho = apply_jump(family, applied, mu, chi.rho)
    return DelayChainState(rho, shift_pending(chi.pending, u_new)), mu


def gamma(rho: np.ndarray) -> np.ndarray | float:
    """``-sum_n <n|rho|n>^2 / 2``."""
    out = -0.5 * np.sum(populations(rho) ** 2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def pairwise_q1(p: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``sum_{n,mu,nu} p_mu p_nu / 4 (x_{mu,n} - x_{nu,n})^2``.

    ``p`` has shape ``(..., m)`` and ``x`` (normalized post-measurement
    populations) ``(..., m, d)``; outcomes with ``p <= P_FLOOR`` are skipped.
    """
    keep = p > P_FLOOR
    p = np.where(keep, p, 0.0)
    x = np.where(keep[..., None], x, 0.0)
    diff = x[..., :, None, :] - x[..., None, :, :]
    w = p[..., :, None] * p[..., None, :]
    return 0.25 * np.sum(w[..., None] * diff**2, axis=(-3, -2, -1))


def q1(family: ControlledKrausFamily, rho: np.ndarray) -> float:
    """Expected decrease of ``gamma`` over one open-loop step."""
    c2 = np.abs(family.qnd_coefficients) ** 2  # (m, d)
    pops = populations(rho)
    unnorm = c2 * pops[None, :]
    p = unnorm.sum(axis=-1)
    x = unnorm / np.where(p > P_FLOOR, p, 1.0)[:, None]
    return float(pairwise_q1(p, x))


def simple_filter_step(family: ControlledKrausFamily, rho_est: np.ndarray, u: float, mu: int) -> np.ndarray:
    """Filter update driven by an outcome sampled from the true system."""
    m = family.operators(u)[mu]
    x = m @ rho_est @ m.conj().T
    p = float(np.real(np.trace(x)))
    if p <= P_FLOOR:
        raise FilterDivergenceError(f"filter gives observed outcome {mu} probability {p:.3e}")
    return apply_jump(family, u, mu, rho_est)


def expected_populations_open_loop(family: ControlledKrausFamily, rho: np.ndarray) -> np.ndarray:
    """``sum_mu p_mu <n|M_mu^0(rho)|n>`` by exact enumeration."""
    x = conjugate(family.operators(0.0), rho)
    return populations(x.sum(axis=0))


class ConvergenceTracker:
    """Labels a trajectory once one population stays above ``threshold`` for ``window`` steps."""

    def __init__(self, batch: int, threshold: float = CONVERGENCE_THRESHOLD, window: int = CONVERGENCE_WINDOW):
        self.threshold = threshold
        self.window = window
        self.run = np.zeros(batch, dtype=int)
        self.leader = np.full(batch, -1)
        self.label = np.full(batch, -1)
        self.step = np.full(batch, -1)

    def update(self, k: int, pops: np.ndarray) -> None:
        lead = np.argmax(pops, axis=-1)
        high = pops[np.arange(len(lead)), lead] >= self.threshold
        same = high & (lead == self.leader)
        self.run = np.where(same, self.run + 1, np.where(high, 1, 0))
        self.leader = np.where(high, lead, -1)
        fresh = (self.label < 0) & (self.run >= self.window)
        self.label[fresh] = lead[fresh]
        self.step[fresh] = k

    @property
    def done(self) -> bool:
        return bool(np.all(self.label >= 0))


@dataclass
class TrajectoryRecord:
    """Per-step history of one trajectory.

    ``populations[k]`` is the diagonal after step ``k``; ``controls[k]`` the
    control issued at step ``k``.
    """

    master_seed: int
    index: int
    outcomes: list[int] = field(default_factory=list)
    controls: list[float] = field(default_factory=list)
    populations: list[np.ndarray] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    q1: list[float] = field(default_factory=list)
    w_eps: list[float] | None = None
    detector_outcomes: list[int] | None = None
    est_populations: list[np.ndarray] | None = None

    def columns(self) -> list[str]:
        d = len(self.populations[0]) if self.populations else 0
        cols = ["step", "outcome"]
        if self.detector_outcomes is not None:
            cols.append("detector_outcome")
        cols.append("control")
        cols += [f"pop_{n}" for n in range(d)]
        if self.est_populations is not None:
            cols += [f"est_pop_{n}" for n in range(d)]
        cols += ["gamma", "q1"]
        if self.w_eps is not None:
            cols.append("w_eps")
        return cols

    def rows(self):
        fmt = "{:.17g}".format
        for k in range(len(self.outcomes)):
            row = [str(k), str(self.outcomes[k])]
            if self.detector_outcomes is not None:
                row.append(str(self.detector_outcomes[k]))
            row.append(fmt(self.controls[k]))
            row += [fmt(v) for v in self.populations[k]]
            if self.est_populations is not None:
                row += [fmt(v) for v in self.est_populations[k]]
            row += [fmt(self.gamma[k]), fmt(self.q1[k])]
            if self.w_eps is not None:
                row.append(fmt(self.w_eps[k]))
            yield row

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            w.writerows(self.rows())
