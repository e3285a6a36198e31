"""State feedback minimizing the expected Lyapunov value over the delay pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DelayChainState, pairwise_q1, q1
from .kraus import (
    P_FLOOR,
    ConfigurationError,
    ControlledKrausFamily,
    apply_jump,
    conjugate,
    kraus_map,
    outcome_probabilities,
    populations,
    trace,
)
from .lyapunov import LyapunovSpec, v_epsilon, w_epsilon

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ControllerConfig:
    spec: LyapunovSpec
    mode: str = "grid"
    u_bar: float | None = None
    grid_points: int = 21
    tau: int = 0

    def __post_init__(self):
        if self.mode not in ("grid", "quadratic"):
            raise ConfigurationError(f"unknown controller mode {self.mode!r}")
        if self.grid_points < 3 or self.grid_points % 2 == 0:
            raise ConfigurationError("grid_points must be odd and >= 3 so that 0 is a candidate")
        if self.u_bar is None:
            object.__setattr__(self, "u_bar", self.spec.u_bar)
        if not self.u_bar > 0:
            raise ConfigurationError("u_bar must be positive")
        if self.tau < 0:
            raise ConfigurationError("tau must be >= 0")

    @property
    def grid(self) -> np.ndarray:
        return control_grid(self.u_bar, self.grid_points)


def control_grid(u_bar: float, points: int) -> np.ndarray:
    """Symmetric uniform grid on ``[-u_bar, u_bar]`` containing an exact 0."""
    half = points // 2
    return u_bar * np.arange(-half, half + 1) / half


def tie_order(grid: np.ndarray) -> np.ndarray:
    """Candidate preference: smallest ``|xi|`` first, then smallest ``xi``."""
    return np.lexsort((grid, np.abs(grid)))


def select_min(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the minimizing candidate per row, with the tie rule applied."""
    values = np.atleast_2d(values)
    best = values.min(axis=1, keepdims=True)
    near = values <= best + TIE_RTOL * np.maximum(1.0, np.abs(best))
    order = tie_order(grid)
    return order[np.argmax(near[:, order], axis=1)]


def select_max(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return select_min(-np.asarray(values), grid)


# ---------------------------------------------------------------------------
# exact expectation, scalar reference path


def expected_w(spec: LyapunovSpec, family: ControlledKrausFamily, chi: DelayChainState, xi: float) -> float:
    """``E[W_eps(chi_next) | chi, u = xi]`` by enumerating outcomes."""
    rho = chi.rho
    total = 0.0
    if chi.tau == 0:
        p = outcome_probabilities(family, xi, rho)
        for mu in np.flatnonzero(p > P_FLOOR):
            total += p[mu] * v_epsilon(spec, apply_jump(family, xi, mu, rho))
        return float(total)
    applied = chi.pending[-1]
    p = outcome_probabilities(family, applied, rho)
    for mu in np.flatnonzero(p > P_FLOOR):
        r = apply_jump(family, applied, mu, rho)
        for beta in reversed(chi.pending[:-1]):
            r = kraus_map(family, beta, r)
        total += p[mu] * v_epsilon(spec, kraus_map(family, xi, r))
    return float(total)


# ---------------------------------------------------------------------------
# batched evaluation used by the feedback and the Monte Carlo engine


def _transfer(ops: np.ndarray) -> np.ndarray:
    """``T[..., n, i, j] = M[..., n, i] conj(M[..., n, j])``."""
    return ops[..., :, :, None] * np.conj(ops[..., :, None, :])


def apply_kraus_batch(family: ControlledKrausFamily, us: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``K^{u_b}`` applied to ``x[b, ...]``; ``x`` has shape ``(B, ..., d, d)``."""
    sup = family.superoperators_batch(us)  # (B, d*d, d*d)
    d = x.shape[-1]
    flat = x.reshape(x.shape[0], -1, d * d)
    return (flat @ np.swapaxes(sup, -1, -2)).reshape(x.shape)


def predicted_outcome_states(family: ControlledKrausFamily, rho: np.ndarray, pending: np.ndarray):
    """Unnormalized ``K^{beta_1}...K^{beta_{tau-1}}(M_mu rho M_mu^dag)`` and ``p_mu``.

    Shapes ``(B, m, d, d)`` and ``(B, m)``; requires ``tau >= 1``.
    """
    ops = family.operators_batch(pending[:, -1])
    y = conjugate(ops, rho)
    p = trace(y)
    for r in range(pending.shape[1] - 2, -1, -1):
        y = apply_kraus_batch(family, pending[:, r], y)
    return y, p


class GridEvaluator:
    """Expected next Lyapunov value on a fixed control grid, for a batch of states."""

    def __init__(self, spec: LyapunovSpec, family: ControlledKrausFamily, grid: np.ndarray):
        self.spec = spec
        self.family = family
        self.grid = np.asarray(grid, dtype=float)
        self.zero = int(np.flatnonzero(self.grid == 0.0)[0])
        ops = family.operators_batch(self.grid)  # (N, m, d, d)
        n_grid, m, d, _ = ops.shape
        t = _transfer(ops)  # (N, m, d, d, d)
        # tau = 0: populations of each outcome branch, (d*d) -> (N, m, d)
        self._t_branch = t.reshape(n_grid * m * d, d * d).T
        # tau >= 1: populations after the full map K^xi, (d*d) -> (N, d)
        self._t_map = t.sum(axis=1).reshape(n_grid * d, d * d).T
        self.shape = (n_grid, m, d)

    def _score(self, pops: np.ndarray, p: np.ndarray) -> np.ndarray:
        # sum_mu p_mu V(pops_mu / p_mu) with pops unnormalized
        keep = p > P_FLOOR
        lin = pops @ self.spec.sigma
        quad = np.sum(pops**2, axis=-1) / np.where(keep, p, 1.0)
        val = np.where(keep, lin - 0.5 * self.spec.epsilon * quad, 0.0)
        return val.sum(axis=-1)

    def values(self, rho: np.ndarray, pending: np.ndarray) -> np.ndarray:
        """``E[W_eps | chi, u = xi]`` for every grid point: shape ``(B, N)``."""
        n_grid, m, d = self.shape
        b = rho.shape[0]
        if pending.shape[1] == 0:
            pops = np.real(rho.reshape(b, d * d) @ self._t_branch).reshape(b, n_grid, m, d)
            p = pops.sum(axis=-1)
            return self._score(pops, p)
        y, p = predicted_outcome_states(self.family, rho, pending)
        pops = np.real(y.reshape(b * m, d * d) @ self._t_map).reshape(b, m, n_grid, d)
        pops = np.swapaxes(pops, 1, 2)  # (B, N, m, d)
        return self._score(pops, p[:, None, :])


def w_epsilon_batch(spec: LyapunovSpec, family: ControlledKrausFamily, rho: np.ndarray, pending: np.ndarray) -> np.ndarray:
    x = rho
    for r in range(pending.shape[1] - 1, -1, -1):
        x = apply_kraus_batch(family, pending[:, r], x)
    return v_epsilon(spec, x)


class LyapunovGridController:
    """Batched feedback ``argmin_xi E[W_eps(chi_next) | chi, xi]`` over the grid."""

    def __init__(self, config: ControllerConfig, family: ControlledKrausFamily):
        if config.mode != "grid":
            raise ConfigurationError("generic families support only grid feedback")
        self.config = config
        self.family = family
        self.evaluator = GridEvaluator(config.spec, family, config.grid)

    def __call__(self, rho: np.ndarray, pending: np.ndarray, diagnostics: bool = False):
        vals = self.evaluator.values(rho, pending)
        idx = select_min(vals, self.evaluator.grid)
        u = self.evaluator.grid[idx]
        if not diagnostics:
            return u, None
        rows = np.arange(len(idx))
        diag = {
            "expected": vals[rows, idx],
            "expected_zero": vals[:, self.evaluator.zero],
            "expected_min": vals.min(axis=1),
            "w": w_epsilon_batch(self.config.spec, self.family, rho, pending),
        }
        return u, diag


def feedback(config: ControllerConfig, family: ControlledKrausFamily, chi: DelayChainState) -> float:
    ctrl = LyapunovGridController(config, family)
    pending = np.array([chi.pending], dtype=float).reshape(1, chi.tau)
    u, _ = ctrl(chi.rho[None], pending)
    return float(u[0])


def q2(spec: LyapunovSpec, family: ControlledKrausFamily, chi: DelayChainState, grid: np.ndarray) -> float:
    """Gap between keeping the control at zero and the best grid control."""
    ev = GridEvaluator(spec, family, grid)
    vals = ev.values(chi.rho[None], np.array([chi.pending], dtype=float).reshape(1, chi.tau))[0]
    return float(vals[ev.zero] - vals.min())


def q1_chain(spec: LyapunovSpec, family: ControlledKrausFamily, chi: DelayChainState) -> float:
    """Measurement-induced decrease ``W_eps(chi) - E[W_eps | chi, u = 0]``.

    Evaluated with the pairwise formula on the delayed outcome branches and
    weighted by ``epsilon`` (the linear part of ``V_eps`` cancels exactly).
    """
    if chi.tau == 0:
        return spec.epsilon * q1(family, chi.rho)
    y, p = predicted_outcome_states(family, chi.rho[None], np.array([chi.pending], dtype=float))
    pops = populations(y[0])
    x = pops / np.where(p[0] > P_FLOOR, p[0], 1.0)[:, None]
    return spec.epsilon * float(pairwise_q1(p[0], x))


def q1_chain_batch(spec: LyapunovSpec, family: ControlledKrausFamily, rho: np.ndarray, pending: np.ndarray) -> np.ndarray:
    """Batched :func:`q1_chain`."""
    if pending.shape[1] == 0:
        c2 = np.abs(family.qnd_coefficients) ** 2  # (m, d)
        pops = c2[None] * populations(rho)[:, None, :]
        p = pops.sum(axis=-1)
    else:
        y, p = predicted_outcome_states(family, rho, pending)
        pops = populations(y)
    x = pops / np.where(p > P_FLOOR, p, 1.0)[..., None]
    return spec.epsilon * pairwise_q1(p, x)


# ---------------------------------------------------------------------------
# quadratic approximation (photon box)


def quadratic_operators(sigma: np.ndarray):
    """Commutators ``C1 = [A, sigma_N]`` and ``C2 = [C1, A]`` with ``A = a^dag - a``."""
    from .photonbox import fock_operators

    a, adag, _ = fock_operators(len(sigma))
    gen = adag - a
    s = np.diag(np.asarray(sigma, dtype=float)).astype(complex)
    c1 = gen @ s - s @ gen
    c2 = c1 @ gen - gen @ c1
    return c1, c2


def quadratic_coefficients(sigma: np.ndarray, rho: np.ndarray):
    """``a1 = Tr(C1 rho)`` and ``a2 = Tr(C2 rho)`` (batch aware)."""
    c1, c2 = quadratic_operators(sigma)
    a1 = np.real(np.einsum("ij,...ji->...", c1, rho))
    a2 = np.real(np.einsum("ij,...ji->...", c2, rho))
    return a1, a2


def quadratic_argmax(a1, a2, u_bar: float) -> np.ndarray:
    """Maximizer of ``a1 xi + a2 xi^2 / 2`` on ``[-u_bar, u_bar]`` (batch aware)."""
    a1 = np.atleast_1d(np.asarray(a1, dtype=float))
    a2 = np.atleast_1d(np.asarray(a2, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(a2 < 0, -a1 / a2, 0.0)
    inside = (a2 < 0) & (np.abs(stat) <= u_bar)
    stat = np.where(inside, stat, 0.0)
    # candidates ordered by preference for ties: the stationary point, 0, -u_bar, +u_bar
    cands = np.stack([stat, np.zeros_like(a1), np.full_like(a1, -u_bar), np.full_like(a1, u_bar)], axis=-1)
    vals = a1[:, None] * cands + 0.5 * a2[:, None] * cands**2
    vals[:, 0] = np.where(inside, vals[:, 0], -np.inf)
    best = vals.max(axis=1, keepdims=True)
    near = vals >= best - TIE_RTOL * np.maximum(1.0, np.abs(best))
    # among tied candidates prefer the smallest |xi|, then the smallest xi
    mag = np.where(near, np.abs(cands), np.inf)
    smallest = near & (mag == mag.min(axis=1, keepdims=True))
    pick = np.argmin(np.where(smallest, cands, np.inf), axis=1)
    return cands[np.arange(len(pick)), pick]


def feedback_quadratic(sigma: np.ndarray, rho_pred: np.ndarray, u_bar: float) -> float:
    a1, a2 = quadratic_coefficients(sigma, rho_pred)
    return float(quadratic_argmax(a1, a2, u_bar)[0])
