"""Strict control-Lyapunov weights from the second-order effect of the control.

The pipeline is ``build_metzler -> build_P -> perron_left_vector ->
solve_weights``; ``synthesize`` runs it end to end.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .kraus import ControlledKrausFamily, basis_state, kraus_derivatives, kraus_map, populations


class DegenerateControlError(ValueError):
    """The control has no second-order effect on the populations."""


class SynthesisError(ValueError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def build_metzler(
    family: ControlledKrausFamily,
    derivatives: tuple[np.ndarray, np.ndarray] | None = None,
    row_tol: float = 1e-8,
) -> np.ndarray:
    """``R[n1, n2] = sum_mu 2|<n1|dM^dag|n2>|^2 + 2 delta Re(c <n1|d2M^dag|n2>)``."""
    d1, d2 = derivatives if derivatives is not None else kraus_derivatives(family)
    c = family.qnd_coefficients  # (m, d)
    # <n1|dM^dag|n2> = conj(dM[n2, n1])
    r = 2.0 * np.sum(np.abs(d1) ** 2, axis=0).T
    diag2 = np.conj(np.diagonal(d2, axis1=-2, axis2=-1))  # <n|d2M^dag|n>
    r = r + np.diag(2.0 * np.sum(np.real(c * diag2), axis=0))
    if np.max(np.abs(r)) <= 1e-14:
        raise DegenerateControlError("R = 0: the control has no second-order effect")
    problems = metzler_violations(r, row_tol)
    if problems:
        warnings.warn("R violates Metzler structure: " + "; ".join(problems), RuntimeWarning, stacklevel=2)
    return r


def metzler_violations(r: np.ndarray, row_tol: float = 1e-8) -> list[str]:
    off = r - np.diag(np.diag(r))
    out = []
    if off.min() < -1e-10:
        out.append(f"negative off-diagonal entry {off.min():.3e}")
    rows = np.abs(r.sum(axis=1)).max()
    if rows > row_tol:
        out.append(f"row sums up to {rows:.3e}")
    if np.diag(r).max() > 1e-10:
        out.append(f"positive diagonal entry {np.diag(r).max():.3e}")
    return out


def build_P(r: np.ndarray) -> np.ndarray:
    """Right stochastic ``I - R / tr(R)``.

    The diagonal is set so rows sum to one exactly; this only absorbs the
    round-off or finite-difference error in the row sums of ``R``.
    """
    tr = float(np.trace(r))
    if not tr < 0:
        raise DegenerateControlError(f"tr(R) = {tr} is not negative")
    p = np.eye(len(r)) - r / tr
    p[(p < 0) & (p >= -1e-12)] = 0.0
    off = p - np.diag(np.diag(p))
    np.fill_diagonal(p, 1.0 - off.sum(axis=1))
    return p


def balance_rows(r: np.ndarray) -> np.ndarray:
    """Copy of ``R`` with the diagonal reset so every row sums to zero exactly."""
    out = np.array(r, dtype=float)
    off = out - np.diag(np.diag(out))
    np.fill_diagonal(out, -off.sum(axis=1))
    return out


@dataclass
class ConnectivityReport:
    strongly_connected: bool
    components: list[list[int]]


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(len(adj), dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i] & ~seen):
            seen[j] = True
            queue.append(j)
    return seen


def graph_edges(r: np.ndarray, edge_tol: float = 1e-10) -> np.ndarray:
    off = r - np.diag(np.diag(r))
    scale = max(np.max(np.abs(r)), np.finfo(float).tiny)
    return off > edge_tol * scale


def check_strong_connectivity(r: np.ndarray, edge_tol: float = 1e-10) -> ConnectivityReport:
    """Edge ``n1 -> n2`` whenever ``R[n1, n2]`` is (relatively) positive."""
    adj = graph_edges(r, edge_tol)
    ok = bool(_reachable(adj, 0).all() and _reachable(adj.T, 0).all())
    if ok:
        return ConnectivityReport(True, [list(range(len(r)))])
    ncomp, labels = connected_components(adj.astype(int), directed=True, connection="strong")
    comps = [np.flatnonzero(labels == k).tolist() for k in range(ncomp)]
    comps.sort(key=lambda c: c[0])
    return ConnectivityReport(False, comps)


def perron_left_vector(
    p: np.ndarray, target: int = 0, tol: float = 1e-12, max_iter: int = 100_000
) -> np.ndarray:
    """Positive ``e`` with ``P^T e = e`` and ``e[target] = 1``.

    Power iteration on the lazy chain ``(I + P^T) / 2`` (aperiodic, same
    fixed vector), then one inverse-iteration polish.
    """
    d = len(p)
    pt = p.T
    e = np.full(d, 1.0 / d)
    for _ in range(max_iter):
        nxt = 0.5 * (e + pt @ e)
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - e)) <= tol:
            e = nxt
            break
        e = nxt
    else:
        res = float(np.max(np.abs(pt @ e - e)))
        raise NumericalError("Perron power iteration did not converge", res)
    shift = float(e @ pt @ e / (e @ e))
    try:
        polished = np.linalg.solve(pt - (shift + 1e-9) * np.eye(d), e)
        polished /= polished.sum()
        if np.max(np.abs(pt @ polished - polished)) < np.max(np.abs(pt @ e - e)):
            e = polished
    except np.linalg.LinAlgError:
        pass
    e = e / e[target]
    res = float(np.max(np.abs(pt @ e - e)))
    if res > 1e-10 or e.min() <= 0:
        raise NumericalError("Perron vector is not positive or inaccurate", res)
    return e


@dataclass(frozen=True)
class LyapunovSpec:
    """Weights of ``V_eps(rho) = sum sigma_n rho_nn - eps/2 sum rho_nn^2``."""

    target: int
    sigma: np.ndarray
    lam: np.ndarray
    perron: np.ndarray
    epsilon: float = 0.0
    u_bar: float = 0.1

    @property
    def dim(self) -> int:
        return len(self.sigma)

    def with_epsilon(self, epsilon: float) -> "LyapunovSpec":
        return LyapunovSpec(self.target, self.sigma, self.lam, self.perron, float(epsilon), self.u_bar)

    def scaled(self, c: float) -> "LyapunovSpec":
        return LyapunovSpec(self.target, c * self.sigma, c * self.lam, self.perron, c * self.epsilon, self.u_bar)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "sigma": self.sigma.tolist(),
            "lambda": self.lam.tolist(),
            "perron": self.perron.tolist(),
            "epsilon": self.epsilon,
            "u_bar": self.u_bar,
        }


def _full_lambda(lam, d: int, target: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape == (d - 1,):
        lam = np.insert(lam, target, 0.0)
    elif lam.shape != (d,):
        raise SynthesisError(f"lambda must have length {d - 1} or {d}, got {lam.shape}")
    return lam.copy()


def solve_weights(
    r: np.ndarray,
    target: int,
    lam=None,
    *,
    epsilon: float = 0.0,
    u_bar: float = 0.1,
    perron: np.ndarray | None = None,
) -> LyapunovSpec:
    """Solve ``R sigma = lambda`` with ``sigma[target] = 0``.

    ``lam`` lists ``lambda_n`` for ``n != target`` (length ``d - 1``) or is a
    length-``d`` array whose target entry is ignored; default all ``-1``.
    The target entry is set to ``-sum e_n lambda_n``.
    """
    d = len(r)
    if not 0 <= target < d:
        raise SynthesisError(f"target {target} out of range")
    lam = _full_lambda(-np.ones(d - 1) if lam is None else lam, d, target)
    others = np.arange(d) != target
    if np.any(lam[others] >= 0):
        raise SynthesisError("lambda_n must be negative for n != target")
    e = perron if perron is not None else perron_left_vector(build_P(r), target)
    lam[target] = -np.sum(e[others] * lam[others])
    sigma = np.zeros(d)
    sigma[others] = np.linalg.solve(r[np.ix_(others, others)], lam[others])
    residual = float(np.max(np.abs(r @ sigma - lam)))
    if residual > 1e-8 * max(1.0, np.max(np.abs(lam))):
        raise NumericalError("R sigma = lambda not satisfied", residual)
    if np.any(sigma[others] <= 0):
        raise SynthesisError(f"non-positive weights {sigma}")
    return LyapunovSpec(target, sigma, lam, e, float(epsilon), float(u_bar))


def epsilon_ceiling(spec: LyapunovSpec, r: np.ndarray) -> float:
    """``min_{n != target} lambda_n / R_nn``."""
    others = np.arange(spec.dim) != spec.target
    diag = np.diag(r)[others]
    if np.any(diag >= 0):
        raise DegenerateControlError("some R_nn (n != target) is not negative")
    return float(np.min(spec.lam[others] / diag))


def check_epsilon(spec: LyapunovSpec, r: np.ndarray) -> None:
    ceiling = epsilon_ceiling(spec, r)
    if spec.epsilon == 0:
        warnings.warn("epsilon = 0: outside the range covered by the convergence guarantee", RuntimeWarning, stacklevel=2)
    elif not 0 < spec.epsilon <= ceiling * (1 + 1e-12):
        raise SynthesisError(f"epsilon {spec.epsilon} outside (0, {ceiling}]")


def v_epsilon(spec: LyapunovSpec, rho: np.ndarray):
    pops = populations(rho)
    out = pops @ spec.sigma - 0.5 * spec.epsilon * np.sum(pops**2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def w_epsilon(spec: LyapunovSpec, family: ControlledKrausFamily, chi) -> float:
    """``V_eps(K^{beta_1}(... K^{beta_tau}(rho)))``."""
    rho = chi.rho
    for beta in reversed(chi.pending):
        rho = kraus_map(family, beta, rho)
    return v_epsilon(spec, rho)


def second_derivative_check(spec: LyapunovSpec, family: ControlledKrausFamily, h: float = 1e-4, tol: float = 1e-4):
    """Finite-difference ``d2/du2 V_0(K^u(|n><n|))`` at zero against ``lambda_n``."""
    v0 = spec.with_epsilon(0.0)
    scale = max(1.0, float(np.max(np.abs(spec.sigma))))
    bound = max(tol, 10 * h**2 * scale)
    report = []
    for n in range(spec.dim):
        ket = basis_state(spec.dim, n)
        g = [v_epsilon(v0, kraus_map(family, x, ket)) for x in (h, 0.0, -h)]
        fd = (g[0] - 2 * g[1] + g[2]) / h**2
        dev = abs(fd - spec.lam[n])
        report.append(
            {
                "n": n,
                "finite_difference": float(fd),
                "lambda": float(spec.lam[n]),
                "deviation": float(dev),
                "tolerance": float(bound),
                "ok": bool(dev <= bound),
            }
        )
    return report


@dataclass
class Synthesis:
    R: np.ndarray
    P: np.ndarray
    connectivity: ConnectivityReport
    spec: LyapunovSpec
    epsilon_ceiling: float

    def to_dict(self) -> dict:
        return {
            "R": self.R.tolist(),
            "P": self.P.tolist(),
            "e": self.spec.perron.tolist(),
            "sigma": self.spec.sigma.tolist(),
            "lambda": self.spec.lam.tolist(),
            "epsilon_ceiling": self.epsilon_ceiling,
            "epsilon": self.spec.epsilon,
            "target": self.spec.target,
            "strongly_connected": self.connectivity.strongly_connected,
            "components": self.connectivity.components,
        }


def synthesize(
    family: ControlledKrausFamily,
    target: int,
    lam=None,
    *,
    epsilon: float | str = 0.0,
    u_bar: float = 0.1,
    row_tol: float = 1e-6,
) -> Synthesis:
    """Full weight synthesis; ``epsilon="ceiling"`` picks the largest admissible value.

    Row sums of ``R`` within ``row_tol`` of zero are treated as derivative
    error and removed before solving.
    """
    r = balance_rows(build_metzler(family, row_tol=row_tol))
    p = build_P(r)
    conn = check_strong_connectivity(r)
    if not conn.strongly_connected:
        raise SynthesisError(f"graph of R is not strongly connected: components {conn.components}")
    spec = solve_weights(r, target, lam, u_bar=u_bar, perron=perron_left_vector(p, target))
    ceiling = epsilon_ceiling(spec, r)
    eps = ceiling if epsilon == "ceiling" else float(epsilon)
    return Synthesis(r, p, conn, spec.with_epsilon(eps), ceiling)
