"""Density matrices and controlled Kraus families.

States are plain complex ``(d, d)`` numpy arrays; every helper here also
accepts a leading batch axis so the Monte Carlo engine can reuse it.
Basis indices are 0-based throughout the package.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

P_FLOOR = 1e-12
HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = -1e-10
COMPLETENESS_TOL = 1e-10
DEFAULT_FD_STEP = 1e-3


class ContractError(ValueError):
    """An input violates an operation's preconditions."""


class ZeroProbabilityError(ContractError):
    """A jump was requested for an outcome of (numerically) zero probability."""


class FilterDivergenceError(ZeroProbabilityError):
    """The filter state assigns zero probability to an observed outcome."""


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# density matrices


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def populations(rho: np.ndarray) -> np.ndarray:
    """Diagonal ``<n|rho|n>`` as a real array (batch aware)."""
    return np.real(np.diagonal(rho, axis1=-2, axis2=-1)).copy()


def trace(a: np.ndarray) -> np.ndarray:
    return np.real(np.trace(a, axis1=-2, axis2=-1))


def hermitize(rho: np.ndarray) -> np.ndarray:
    return 0.5 * (rho + dagger(rho))


def basis_state(d: int, n: int) -> np.ndarray:
    rho = np.zeros((d, d), dtype=complex)
    rho[n, n] = 1.0
    return rho


def maximally_mixed(d: int) -> np.ndarray:
    return np.eye(d, dtype=complex) / d


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex).ravel()
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise ContractError("zero state vector")
    psi = psi / norm
    return np.outer(psi, psi.conj())


def diagonal_state(pops) -> np.ndarray:
    pops = np.asarray(pops, dtype=float)
    return np.diag(pops / pops.sum()).astype(complex)


def density_violations(rho: np.ndarray) -> list[str]:
    rho = np.asarray(rho)
    problems = []
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        return [f"not a square matrix: shape {rho.shape}"]
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > HERMITIAN_TOL:
        problems.append(f"not Hermitian (max deviation {herm:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        problems.append(f"trace {tr.real:.15g} != 1")
    lmin = np.linalg.eigvalsh(hermitize(rho)).min()
    if lmin < PSD_TOL:
        problems.append(f"negative eigenvalue {lmin:.3e}")
    return problems


def is_density(rho: np.ndarray) -> bool:
    return not density_violations(rho)


def validate_density(rho, dim: int | None = None) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if dim is not None and rho.shape != (dim, dim):
        raise ContractError(f"expected a {dim}x{dim} state, got shape {rho.shape}")
    problems = density_violations(rho)
    if problems:
        raise ContractError("invalid density matrix: " + "; ".join(problems))
    return rho


def project_psd(rho: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues and renormalize (drift repair for long runs)."""
    w, v = np.linalg.eigh(hermitize(rho))
    w = np.clip(w, 0.0, None)
    out = (v * w[..., None, :]) @ dagger(v)
    return out / trace(out)[..., None, None]


def conjugate(ops: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``M rho M^dag`` for every operator.

    ``ops`` has shape ``(..., m, d, d)`` and ``rho`` ``(..., d, d)``; the
    result has shape ``(..., m, d, d)``.
    """
    return ops @ rho[..., None, :, :] @ dagger(ops)


# ---------------------------------------------------------------------------
# controlled Kraus families


class ControlledKrausFamily:
    """A map ``u -> (M_1^u, ..., M_m^u)`` with derivative access at ``u = 0``.

    ``operators`` is any callable returning an ``(m, d, d)`` array.  When
    ``derivatives`` is given it must return ``(dM/du, d2M/du2)`` at zero as two
    ``(m, d, d)`` arrays; otherwise central finite differences with step
    ``fd_step`` are used.
    """

    def __init__(
        self,
        operators: Callable[[float], np.ndarray],
        derivatives: Callable[[], tuple[np.ndarray, np.ndarray]] | None = None,
        *,
        fd_step: float = DEFAULT_FD_STEP,
        labels: Sequence[str] | None = None,
        completeness_tol: float = COMPLETENESS_TOL,
        name: str = "custom",
        cache_size: int = 512,
    ):
        self._operators = operators
        self._derivatives = derivatives
        self.fd_step = float(fd_step)
        self.completeness_tol = completeness_tol
        self.name = name
        self._cache: OrderedDict[float, np.ndarray] = OrderedDict()
        self._super_cache: OrderedDict[float, np.ndarray] = OrderedDict()
        self._cache_size = cache_size
        m0 = self.operators(0.0)
        if m0.ndim != 3 or m0.shape[1] != m0.shape[2]:
            raise ContractError(f"Kraus operators must have shape (m, d, d), got {m0.shape}")
        self.outcome_count, self.dim = m0.shape[0], m0.shape[1]
        self.labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(self.outcome_count))
        if len(self.labels) != self.outcome_count:
            raise ContractError("one label per outcome required")

    @property
    def derivative_mode(self) -> str:
        return "analytic" if self._derivatives is not None else "finite-difference"

    def operators(self, u: float) -> np.ndarray:
        u = float(u)
        hit = self._cache.get(u)
        if hit is not None:
            return hit
        ops = np.asarray(self._compute(u), dtype=complex)
        ops.setflags(write=False)
        self._cache[u] = ops
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return ops

    def _compute(self, u: float) -> np.ndarray:
        return self._operators(u)

    def operators_batch(self, us) -> np.ndarray:
        """Stack of operators for each control in ``us``: shape ``(B, m, d, d)``."""
        us = np.asarray(us, dtype=float)
        uniq, inverse = np.unique(us, return_inverse=True)
        table = np.stack([self.operators(u) for u in uniq])
        return table[inverse.reshape(us.shape)]

    def superoperator(self, u: float) -> np.ndarray:
        """Matrix of ``K^u`` on row-major vectorized states, ``(d*d, d*d)``."""
        u = float(u)
        hit = self._super_cache.get(u)
        if hit is None:
            ops = self.operators(u)
            d = self.dim
            hit = np.einsum("mik,mjl->ijkl", ops, ops.conj()).reshape(d * d, d * d)
            hit.setflags(write=False)
            self._super_cache[u] = hit
            if len(self._super_cache) > self._cache_size:
                self._super_cache.popitem(last=False)
        return hit

    def superoperators_batch(self, us) -> np.ndarray:
        us = np.asarray(us, dtype=float)
        uniq, inverse = np.unique(us, return_inverse=True)
        table = np.stack([self.superoperator(u) for u in uniq])
        return table[inverse.reshape(us.shape)]

    @property
    def qnd_coefficients(self) -> np.ndarray:
        """``c[mu, n] = <n|M_mu^0|n>``, shape ``(m, d)``."""
        return np.diagonal(self.operators(0.0), axis1=-2, axis2=-1).copy()

    def analytic_derivatives(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self._derivatives is None:
            return None
        d1, d2 = self._derivatives()
        return np.asarray(d1, dtype=complex), np.asarray(d2, dtype=complex)

    def completeness_defect(self, u: float) -> float:
        ops = self.operators(u)
        s = np.einsum("mji,mjk->ik", ops.conj(), ops)
        return float(np.max(np.abs(s - np.eye(self.dim))))

    def qnd_defect(self) -> float:
        m0 = self.operators(0.0)
        off = m0 - np.einsum("mii->mi", m0)[..., None] * np.eye(self.dim)
        return float(np.max(np.abs(off))) if off.size else 0.0

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, d={self.dim}, m={self.outcome_count})"


def _antihermitian_eig(generator: np.ndarray):
    # G anti-Hermitian => i*G Hermitian, exp(uG) = V exp(-i u w) V^dag with i*G = V w V^dag
    h = 1j * np.asarray(generator, dtype=complex)
    if np.max(np.abs(h - h.conj().T)) > 1e-12:
        raise ContractError("generator must be anti-Hermitian")
    w, v = np.linalg.eigh(h)
    return w, v


class UnitaryKickFamily(ControlledKrausFamily):
    """``M_mu^u = exp(u G_mu) M_mu^0`` (``side="left"``) or ``M_mu^0 exp(u G_mu)``.

    ``G`` is anti-Hermitian, either shared by all outcomes or given per
    outcome.  Completeness holds for every ``u`` because the kicks are
    unitary.  Derivatives are analytic unless ``analytic=False``, in which
    case they come from central finite differences.
    """

    def __init__(self, qnd_operators, generators, side: str = "left", analytic: bool = True, **kwargs):
        m0 = np.asarray(qnd_operators, dtype=complex)
        gens = np.asarray(generators, dtype=complex)
        if gens.ndim == 2:
            gens = np.broadcast_to(gens, m0.shape).copy()
        if gens.shape != m0.shape:
            raise ContractError(f"generator shape {gens.shape} does not match operators {m0.shape}")
        if side not in ("left", "right"):
            raise ConfigurationError(f"side must be 'left' or 'right', got {side!r}")
        self.qnd_operators = m0
        self.generators = gens
        self.side = side
        # one eigendecomposition per distinct generator
        self._eig = []
        self._which = np.zeros(len(gens), dtype=int)
        for mu, g in enumerate(gens):
            for j, (g_seen, _) in enumerate(self._eig):
                if np.array_equal(g, g_seen):
                    self._which[mu] = j
                    break
            else:
                self._which[mu] = len(self._eig)
                self._eig.append((g, _antihermitian_eig(g)))
        kwargs.setdefault("name", "unitary-kick")
        super().__init__(self._kicked, self._analytic if analytic else None, **kwargs)

    def kick_batch(self, us) -> np.ndarray:
        """Unitaries ``exp(u G_j)`` for each distinct generator: ``(B, k, d, d)``."""
        us = np.atleast_1d(np.asarray(us, dtype=float))
        out = []
        for _, (w, v) in self._eig:
            phase = np.exp(-1j * us[:, None] * w[None, :])
            out.append(np.einsum("ij,bj,kj->bik", v, phase, v.conj()))
        return np.stack(out, axis=1)

    def _kicked(self, u: float) -> np.ndarray:
        return self._kick_ops(np.array([u]))[0]

    def _kick_ops(self, flat: np.ndarray) -> np.ndarray:
        kicks = self.kick_batch(flat)[:, self._which]
        if self.side == "left":
            return kicks @ self.qnd_operators[None]
        return self.qnd_operators[None] @ kicks

    def operators_batch(self, us) -> np.ndarray:
        us = np.asarray(us, dtype=float)
        uniq, inverse = np.unique(us, return_inverse=True)
        if len(uniq) <= self._cache_size // 4:
            # few distinct controls (e.g. a control grid): reuse the cache
            return super().operators_batch(us)
        return self._kick_ops(uniq)[inverse.reshape(us.shape)]

    def _analytic(self):
        g, m0 = self.generators, self.qnd_operators
        if self.side == "left":
            return g @ m0, g @ g @ m0
        return m0 @ g, m0 @ g @ g


def rotation_generator(d: int) -> np.ndarray:
    """Real tridiagonal generator; for ``d = 2`` ``exp(uG)`` rotates by angle ``u``."""
    g = np.zeros((d, d))
    idx = np.arange(d - 1)
    g[idx + 1, idx] = 1.0
    g[idx, idx + 1] = -1.0
    return g


def toy_rotation_family(d: int = 2, phases: Sequence[float] | None = None) -> UnitaryKickFamily:
    """Two-outcome QND toy model with a rotation kick after the measurement.

    ``M_g^0 = diag(cos phi_n)``, ``M_e^0 = diag(sin phi_n)`` and
    ``M^u = D_u M^0`` with ``D_u = exp(u G)``.  Default phases are evenly
    spaced on ``[0.3, 1.1]`` (``(0.3, 1.1)`` for ``d = 2``).
    """
    if phases is None:
        phases = np.linspace(0.3, 1.1, d)
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (d,):
        raise ConfigurationError(f"need {d} phases, got {phases.shape}")
    m0 = np.stack([np.diag(np.cos(phases)), np.diag(np.sin(phases))]).astype(complex)
    return UnitaryKickFamily(m0, rotation_generator(d), side="left", labels=("g", "e"), name="toy-rotation")


def constant_family(qnd_operators) -> ControlledKrausFamily:
    """Family whose operators ignore the control (useful as a degenerate case)."""
    m0 = np.asarray(qnd_operators, dtype=complex)
    zeros = np.zeros_like(m0)
    return ControlledKrausFamily(lambda u: m0, lambda: (zeros, zeros), name="constant")


# ---------------------------------------------------------------------------
# operations


def _check_dims(family: ControlledKrausFamily, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape[-2:] != (family.dim, family.dim):
        raise ContractError(f"state shape {rho.shape} does not match family dimension {family.dim}")
    return rho


def kraus_map(family: ControlledKrausFamily, u: float, rho: np.ndarray) -> np.ndarray:
    """Unconditional update ``sum_mu M_mu^u rho M_mu^u^dag``."""
    rho = _check_dims(family, rho)
    return conjugate(family.operators(u), rho).sum(axis=-3)


def outcome_probabilities(family: ControlledKrausFamily, u: float, rho: np.ndarray) -> np.ndarray:
    rho = _check_dims(family, rho)
    p = trace(conjugate(family.operators(u), rho))
    # round-off can push impossible outcomes slightly negative
    return np.clip(p, 0.0, None)


def apply_jump(family: ControlledKrausFamily, u: float, mu: int, rho: np.ndarray) -> np.ndarray:
    """Conditional update ``M rho M^dag / tr(M rho M^dag)`` for outcome ``mu``."""
    rho = _check_dims(family, rho)
    if not 0 <= mu < family.outcome_count:
        raise ContractError(f"outcome {mu} out of range for m={family.outcome_count}")
    m = family.operators(u)[mu]
    x = m @ rho @ m.conj().T
    p = float(np.real(np.trace(x)))
    if p <= P_FLOOR:
        raise ZeroProbabilityError(f"outcome {mu} has probability {p:.3e} at u={u}")
    return hermitize(x / p)


def check_distinguishable(family: ControlledKrausFamily, tol: float = 1e-8) -> tuple[bool, list[tuple[int, int]]]:
    """Every pair of basis states is told apart by some outcome's statistics."""
    stats = np.abs(family.qnd_coefficients) ** 2
    violations = []
    d = family.dim
    for n1 in range(d):
        for n2 in range(n1 + 1, d):
            if np.max(np.abs(stats[:, n1] - stats[:, n2])) <= tol:
                violations.append((n1, n2))
    return not violations, violations


def kraus_derivatives(
    family: ControlledKrausFamily, mode: str | None = None, step: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``(dM/du, d2M/du2)`` at ``u = 0`` for every outcome.

    ``mode`` defaults to the family's own (analytic when available).
    """
    mode = mode or family.derivative_mode
    if mode == "analytic":
        d = family.analytic_derivatives()
        if d is None:
            raise ConfigurationError(f"{family!r} has no analytic derivatives")
        return d
    if mode != "finite-difference":
        raise ConfigurationError(f"unknown derivative mode {mode!r}")
    h = family.fd_step if step is None else float(step)
    if not h > 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    # fourth-order central stencils
    m2, m1, m0, p1, p2 = (np.asarray(family._compute(k * h), dtype=complex) for k in (-2, -1, 0, 1, 2))
    # grouped as differences so a constant family gives exact zeros
    d1 = (8 * (p1 - m1) - (p2 - m2)) / (12 * h)
    d2 = (16 * ((p1 - m0) + (m1 - m0)) - ((p2 - m0) + (m2 - m0))) / (12 * h**2)
    return d1, d2
