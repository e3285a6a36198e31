"""Cavity field probed by flying atoms: Fock-space operators, decoherence,
displacement kicks, atomic measurement and the composite filter."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from math import exp, factorial, pi

import numpy as np
from scipy.linalg import expm

from .controller import control_grid, quadratic_argmax, quadratic_coefficients, select_min
from .detection import DetectionModel, atom_detector_model
from .kraus import P_FLOOR, ContractError, FilterDivergenceError, UnitaryKickFamily, hermitize, populations
from .lyapunov import Synthesis, synthesize

OUTCOME_LABELS = ("none", "g", "e", "gg", "eg", "ge", "ee")
_ATOM_STRINGS = ("", "g", "e", "gg", "eg", "ge", "ee")


@dataclass(frozen=True)
class PhotonBoxParams:
    n_ph_max: int = 8
    phi0: float = 0.245 * pi
    phi_r: float | None = None  # None: put the target on the steepest fringe
    mean_atoms: float = 0.6
    det_efficiency: float = 0.35
    flip_e: float = 0.13
    flip_g: float = 0.11
    theta: float = 0.014
    n_th: float = 0.05
    tau: int = 4
    u_bar: float = 0.1
    target: int = 3

    def __post_init__(self):
        if self.n_ph_max < 1:
            raise ContractError("n_ph_max must be at least 1")
        if not 0 <= self.target <= self.n_ph_max:
            raise ContractError(f"target {self.target} outside 0..{self.n_ph_max}")
        if self.theta < 0 or self.n_th < 0:
            raise ContractError("theta and n_th must be nonnegative")
        for name in ("det_efficiency", "flip_e", "flip_g"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.mean_atoms <= 0:
            raise ContractError("mean_atoms must be positive")
        if self.tau < 0 or self.u_bar <= 0:
            raise ContractError("tau must be >= 0 and u_bar > 0")
        if self.phi_r is None:
            object.__setattr__(self, "phi_r", pi / 2 - self.phi0 * (self.target + 0.5))

    @property
    def dim(self) -> int:
        return self.n_ph_max + 1

    def to_dict(self) -> dict:
        return asdict(self)


def fock_operators(d: int):
    """Truncated ``(a, a^dag, N)``; ``a^dag |d-1> = 0`` in the matrix."""
    if d < 2:
        raise ContractError("Fock space needs d >= 2")
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), k=1)
    return a, a.T.copy(), np.diag(np.arange(d, dtype=float))


def displacement_generator(d: int) -> np.ndarray:
    a, adag, _ = fock_operators(d)
    return adag - a


def displacement(u: float, d: int) -> np.ndarray:
    return expm(float(u) * displacement_generator(d))


def decoherence_operators(params: PhotonBoxParams):
    """``(L0, L-, L+)`` of the one-step thermal damping channel."""
    a, adag, n = fock_operators(params.dim)
    th, nth = params.theta, params.n_th
    l0 = np.eye(params.dim) - th * (0.5 + nth) * n - 0.5 * th * nth * np.eye(params.dim)
    return l0, np.sqrt(th * (1 + nth)) * a, np.sqrt(th * nth) * adag


def decoherence_step(params: PhotonBoxParams, rho: np.ndarray) -> np.ndarray:
    """Trace-renormalized damping channel (batch aware)."""
    if params.theta > 0.1:
        warnings.warn(f"theta={params.theta} is outside the small-decay regime", RuntimeWarning, stacklevel=2)
    out = sum(k @ rho @ k.conj().T for k in decoherence_operators(params))
    tr = np.real(np.trace(out, axis1=-2, axis2=-1))
    return hermitize(out / np.asarray(tr)[..., None, None])


def atom_number_distribution(mean_atoms: float) -> np.ndarray:
    """Poisson masses at 0, 1, 2 renormalized to sum to one."""
    p = np.array([exp(-mean_atoms) * mean_atoms**k / factorial(k) for k in range(3)])
    return p / p.sum()


def fringe_phases(params: PhotonBoxParams) -> np.ndarray:
    return 0.5 * (params.phi_r + params.phi0 * (np.arange(params.dim) + 0.5))


def measurement_diagonals(params: PhotonBoxParams) -> np.ndarray:
    """Diagonals of the seven atomic operators, shape ``(7, d)``."""
    pa = atom_number_distribution(params.mean_atoms)
    phi = fringe_phases(params)
    c, s = np.cos(phi), np.sin(phi)
    one, two = np.sqrt(pa[1]), np.sqrt(pa[2])
    return np.stack(
        [np.full(params.dim, np.sqrt(pa[0])), one * c, one * s, two * c * c, two * s * c, two * c * s, two * s * s]
    )


def atomic_measurement_operators(params: PhotonBoxParams) -> np.ndarray:
    diag = measurement_diagonals(params)
    return np.stack([np.diag(x) for x in diag]).astype(complex)


def photonbox_family(params: PhotonBoxParams, analytic: bool = True) -> UnitaryKickFamily:
    """Decoherence-free family ``M_mu^u = L_mu D_u``."""
    return UnitaryKickFamily(
        atomic_measurement_operators(params),
        displacement_generator(params.dim),
        side="right",
        analytic=analytic,
        labels=OUTCOME_LABELS,
        name="photonbox",
    )


def detector_matrix(params: PhotonBoxParams) -> DetectionModel:
    return atom_detector_model(_ATOM_STRINGS, params.det_efficiency, params.flip_e, params.flip_g)


def default_lambda(params: PhotonBoxParams) -> np.ndarray:
    lam = -1.0 / (np.arange(params.dim) + 1.0)
    return np.delete(lam, params.target)


def default_synthesis(params: PhotonBoxParams, lam=None) -> Synthesis:
    """Weights for the target from ``lambda_n = -1/(n+1)`` with ``epsilon = 0``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # epsilon = 0 is the intended setting here
        return synthesize(
            photonbox_family(params),
            params.target,
            default_lambda(params) if lam is None else lam,
            epsilon=0.0,
            u_bar=params.u_bar,
        )


def initial_state(params: PhotonBoxParams) -> np.ndarray:
    """Coherent state with mean photon number equal to the target."""
    d = params.dim
    psi = displacement(np.sqrt(params.target), d)[:, 0]
    return np.outer(psi, psi.conj())


class PhotonBox:
    """Operators of one parameter set, built once, with batched superoperators.

    Every method accepts a single ``(d, d)`` state or a ``(B, d, d)`` batch;
    controls broadcast against the batch.
    """

    def __init__(self, params: PhotonBoxParams, detection: DetectionModel | None = None):
        self.params = params
        self.dim = d = params.dim
        self.detection = detection if detection is not None else detector_matrix(params)
        if self.detection.true_outcomes != 7:
            raise ContractError("photon-box detection model needs 7 true outcomes")
        self.diag = measurement_diagonals(params)  # (7, d)
        self.outer = self.diag[:, :, None] * self.diag[:, None, :]  # L_mu rho L_mu = rho * outer[mu]
        self.recorded_outer = np.tensordot(self.detection.eta, self.outer, axes=(1, 0))
        self.kraus_outer = self.outer.sum(axis=0)
        self.l0, self.lm, self.lp = decoherence_operators(params)
        self._jump_ops = np.stack([self.l0, self.lm, self.lp])  # real
        gen = displacement_generator(d)
        w, v = np.linalg.eigh(1j * gen)
        self._w, self._v, self._vh = w, v, v.conj().T
        l0 = np.diag(self.l0).real
        shift = np.sqrt(np.arange(1, d, dtype=float))
        shift = shift[:, None] * shift[None, :]
        self._w0 = l0[:, None] * l0[None, :]
        self._wm = params.theta * (1 + params.n_th) * shift
        self._wp = params.theta * params.n_th * shift
        n = np.arange(d)
        self._jump_rates = np.stack(
            [np.diag(self.l0).real ** 2, params.theta * (1 + params.n_th) * n, params.theta * params.n_th * (n + 1.0)]
        )
        self._jump_rates[2, -1] = 0.0  # truncated creation

    # -- elementary maps -------------------------------------------------

    def displacements(self, us) -> np.ndarray:
        """``D_u`` for each control; real orthogonal since ``a^dag - a`` is real."""
        us = np.asarray(us, dtype=float)
        phase = np.exp(-1j * us[..., None] * self._w)
        return ((self._v * phase[..., None, :]) @ self._vh).real

    def displace(self, rho: np.ndarray, u=None, dm: np.ndarray | None = None) -> np.ndarray:
        """``D_u rho D_u^dag``; pass precomputed unitaries as ``dm`` to skip building them."""
        if dm is None:
            dm = self.displacements(u)
        dm_t = np.swapaxes(dm, -1, -2)
        return dm @ rho @ (dm_t.conj() if np.iscomplexobj(dm_t) else dm_t)

    def decohere(self, rho: np.ndarray, normalize: bool = True) -> np.ndarray:
        # L0 is diagonal and L-, L+ are weighted shifts, so the channel is elementwise
        out = rho * self._w0
        out[..., :-1, :-1] += self._wm * rho[..., 1:, 1:]
        out[..., 1:, 1:] += self._wp * rho[..., :-1, :-1]
        if not normalize:
            return out
        return out / np.real(np.trace(out, axis1=-2, axis2=-1))[..., None, None]

    def kraus_theta(self, rho: np.ndarray, u=None, dm: np.ndarray | None = None, normalize: bool = True) -> np.ndarray:
        """Averaged step ``sum_mu L_mu D_u T(rho) D_u^dag L_mu^dag``."""
        return self.displace(self.decohere(rho, normalize), u, dm) * self.kraus_outer

    def record_update(self, rho: np.ndarray, mu_prime):
        """Unnormalized imperfect update and its probability."""
        out = rho * self.recorded_outer[mu_prime]
        return out, np.real(np.trace(out, axis1=-2, axis2=-1))

    # -- filter and prediction -------------------------------------------

    def filter_step(self, rho_est: np.ndarray, u_applied=None, mu_prime=0, dm: np.ndarray | None = None) -> np.ndarray:
        out, p = self.record_update(self.displace(self.decohere(rho_est), u_applied, dm), mu_prime)
        if np.any(p <= P_FLOOR):
            raise FilterDivergenceError(f"recorded outcome has probability {np.min(p):.3e} under the estimate")
        return hermitize(out / np.asarray(p)[..., None, None])

    def predict(self, rho_est: np.ndarray, pending, dms: np.ndarray | None = None) -> np.ndarray:
        """Pre-displacement predicted state ``T(K^{b1}(...K^{b_tau}(rho)))``.

        ``pending`` lists ``(b1, ..., b_tau)`` with ``b_tau`` the oldest;
        shape ``(tau,)`` or ``(B, tau)``.  ``dms`` optionally holds the
        matching displacement unitaries, shape ``(..., tau, d, d)``.
        """
        pending = np.asarray(pending, dtype=float)
        x = np.asarray(rho_est)
        # every map is linear, so one trace normalization at the end suffices
        for r in range(pending.shape[-1] - 1, -1, -1):
            dm = dms[..., r, :, :] if dms is not None else None
            x = self.kraus_theta(x, pending[..., r], dm, normalize=False)
        x = self.decohere(x, normalize=False)
        return x / np.real(np.trace(x, axis1=-2, axis2=-1))[..., None, None]

    def v0_after(self, sigma: np.ndarray, rho_pre: np.ndarray, u) -> np.ndarray:
        return populations(self.displace(rho_pre, u)) @ np.asarray(sigma, dtype=float)

    # -- hidden true state -----------------------------------------------

    def sample_decoherence(self, rho: np.ndarray, uniforms: np.ndarray):
        """Quantum-jump unraveling of the damping channel on a batch.

        Returns the new states and the jump index (0 none, 1 loss, 2 gain).
        """
        pops = populations(rho)
        w = pops @ self._jump_rates.T  # (B, 3)
        c = np.cumsum(w, axis=-1)
        j = np.minimum(np.sum(c <= uniforms[:, None] * c[:, -1:], axis=-1), 2)
        ops = self._jump_ops[j]
        out = ops @ rho @ np.swapaxes(ops, -1, -2)
        out /= np.real(np.trace(out, axis1=-2, axis2=-1))[:, None, None]
        return hermitize(out), j


@lru_cache(maxsize=8)
def _box(params: PhotonBoxParams) -> PhotonBox:
    return PhotonBox(params)


def photonbox_filter_step(params: PhotonBoxParams, rho_est, u_applied: float, mu_prime: int) -> np.ndarray:
    return _box(params).filter_step(np.asarray(rho_est, dtype=complex), u_applied, mu_prime)


def predict_for_control(params: PhotonBoxParams, sigma, rho_est, pending, u: float) -> float:
    """``V_0`` of the predicted state displaced by the candidate ``u``."""
    box = _box(params)
    pre = box.predict(np.asarray(rho_est, dtype=complex), np.asarray(pending, dtype=float))
    return float(box.v0_after(sigma, pre, u))


@dataclass
class PhotonBoxController:
    """Feedback on the predicted state: quadratic expansion or an exact grid."""

    box: PhotonBox
    sigma: np.ndarray
    mode: str = "quadratic"
    grid_points: int = 21

    def __post_init__(self):
        if self.mode not in ("quadratic", "grid"):
            raise ContractError(f"unknown photon-box controller mode {self.mode!r}")
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.grid = control_grid(self.box.params.u_bar, self.grid_points)
        dm = self.box.displacements(self.grid)  # (N, d, d)
        d = self.box.dim
        t = dm[:, :, :, None] * dm.conj()[:, :, None, :]  # (N, n, i, j)
        self._grid_tensor = np.einsum("n,gnij->gij", self.sigma, t).reshape(len(self.grid), d * d)

    def grid_values(self, rho_pre: np.ndarray) -> np.ndarray:
        x = np.asarray(rho_pre).reshape(-1, self.box.dim**2)
        return np.real(x @ self._grid_tensor.T)

    def __call__(self, rho_est: np.ndarray, pending: np.ndarray, dms: np.ndarray | None = None) -> np.ndarray:
        pre = self.box.predict(rho_est, pending, dms)
        if self.mode == "quadratic":
            a1, a2 = quadratic_coefficients(self.sigma, pre)
            return quadratic_argmax(a1, a2, self.box.params.u_bar)
        return self.grid[select_min(self.grid_values(pre), self.grid)]


__all__ = [
    "OUTCOME_LABELS",
    "PhotonBox",
    "PhotonBoxController",
    "PhotonBoxParams",
    "atom_number_distribution",
    "atomic_measurement_operators",
    "decoherence_operators",
    "decoherence_step",
    "default_synthesis",
    "detector_matrix",
    "displacement",
    "fock_operators",
    "initial_state",
    "photonbox_family",
    "photonbox_filter_step",
    "predict_for_control",
]
