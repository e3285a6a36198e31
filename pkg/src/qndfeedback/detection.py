"""Imperfect detection: a left stochastic matrix between true and recorded outcomes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kraus import (
    P_FLOOR,
    ContractError,
    ControlledKrausFamily,
    FilterDivergenceError,
    conjugate,
    hermitize,
    kraus_map,
    trace,
)


@dataclass(frozen=True)
class DetectionModel:
    """``eta[mu', mu]`` = probability of recording ``mu'`` when the true outcome is ``mu``."""

    eta: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float)
        if eta.ndim != 2:
            raise ContractError("eta must be a matrix")
        if eta.min() < 0 or eta.max() > 1:
            raise ContractError("eta entries must lie in [0, 1]")
        cols = np.abs(eta.sum(axis=0) - 1.0).max()
        if cols > 1e-12:
            raise ContractError(f"eta columns must sum to 1 (max deviation {cols:.3e})")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != eta.shape[0]:
                raise ContractError("one label per detector outcome required")

    @property
    def detector_outcomes(self) -> int:
        return self.eta.shape[0]

    @property
    def true_outcomes(self) -> int:
        return self.eta.shape[1]

    @classmethod
    def identity(cls, m: int) -> "DetectionModel":
        return cls(np.eye(m))

    @classmethod
    def from_rows(cls, rows) -> "DetectionModel":
        return cls(np.asarray(rows, dtype=float))

    def to_rows(self) -> list[list[float]]:
        return self.eta.tolist()


def _check(model: DetectionModel, family: ControlledKrausFamily) -> None:
    if model.true_outcomes != family.outcome_count:
        raise ContractError(f"eta has {model.true_outcomes} columns, family has {family.outcome_count} outcomes")


def l_superoperator(model: DetectionModel, family: ControlledKrausFamily, u: float, mu_prime: int, rho):
    """``sum_mu eta[mu', mu] M_mu rho M_mu^dag`` and its trace."""
    _check(model, family)
    branches = conjugate(family.operators(u), np.asarray(rho, dtype=complex))
    out = np.tensordot(model.eta[mu_prime], branches, axes=(0, 0))
    return out, float(np.real(np.trace(out)))


def detector_probabilities(model: DetectionModel, family: ControlledKrausFamily, u: float, rho) -> np.ndarray:
    _check(model, family)
    p_true = trace(conjugate(family.operators(u), np.asarray(rho, dtype=complex)))
    return model.eta @ np.clip(p_true, 0.0, None)


def imperfect_filter_step(model: DetectionModel, family: ControlledKrausFamily, rho_est, u: float, mu_prime: int):
    out, p = l_superoperator(model, family, u, mu_prime, rho_est)
    if p <= P_FLOOR:
        raise FilterDivergenceError(f"filter gives recorded outcome {mu_prime} probability {p:.3e}")
    return hermitize(out / p)


def sample_detector_outcome(model: DetectionModel, mu_true: int, rng: np.random.Generator) -> int:
    from .dynamics import inverse_cdf

    return int(inverse_cdf(model.eta[:, mu_true], rng.random()))


def check_kernel_inclusion(model: DetectionModel, family: ControlledKrausFamily, tol: float = 1e-8):
    """Every pair of basis states yields different recorded statistics for some ``mu'``."""
    _check(model, family)
    stats = model.eta @ (np.abs(family.qnd_coefficients) ** 2)  # (m', d)
    bad = []
    for n1 in range(family.dim):
        for n2 in range(n1 + 1, family.dim):
            if np.max(np.abs(stats[:, n1] - stats[:, n2])) <= tol:
                bad.append((n1, n2))
    return not bad, bad


def markov_consistency_check(model: DetectionModel, family: ControlledKrausFamily, rho, u: float) -> float:
    """``max |sum_mu' L_mu'(rho) - K^u(rho)|``; zero up to round-off for left stochastic ``eta``."""
    _check(model, family)
    total = sum(l_superoperator(model, family, u, k, rho)[0] for k in range(model.detector_outcomes))
    return float(np.max(np.abs(total - kraus_map(family, u, rho))))


# ---------------------------------------------------------------------------
# independent-atom detector


def _canonical_key(label: str):
    return (len(label), tuple(reversed([0 if ch == "g" else 1 for ch in label])))


def atom_detector_model(
    true_labels: Sequence[str], efficiency: float, flip_e: float, flip_g: float
) -> DetectionModel:
    """Detector matrix for outcomes that are strings of atom states (``"g"``, ``"ge"``, ...).

    Each atom is detected with probability ``efficiency``; a detected atom in
    state ``s`` is read as the other state with probability ``flip_s``; missed
    atoms leave no trace in the record.  Recorded labels are all reachable
    strings, ordered by length then as ``"", g, e, gg, eg, ge, ee``.
    """
    for name, v in (("efficiency", efficiency), ("flip_e", flip_e), ("flip_g", flip_g)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"{name} must lie in [0, 1]")
    true_labels = ["" if lab in ("", "0", "none", "∅") else lab for lab in true_labels]
    if any(set(lab) - {"g", "e"} for lab in true_labels):
        raise ContractError("labels must be strings over {'g', 'e'}")
    flip = {"g": flip_g, "e": flip_e}
    other = {"g": "e", "e": "g"}
    columns = []
    for lab in true_labels:
        dist = {"": 1.0}
        for s in lab:
            nxt: dict[str, float] = {}
            for read, pr in dist.items():
                for add, q in (("", 1 - efficiency), (s, efficiency * (1 - flip[s])), (other[s], efficiency * flip[s])):
                    if q > 0:
                        nxt[read + add] = nxt.get(read + add, 0.0) + pr * q
            dist = nxt
        columns.append(dist)
    reads = set(true_labels)
    for col in columns:
        reads.update(col)
    recorded = sorted(reads, key=_canonical_key)
    eta = np.zeros((len(recorded), len(true_labels)))
    for j, col in enumerate(columns):
        for read, pr in col.items():
            eta[recorded.index(read), j] += pr
    eta /= eta.sum(axis=0, keepdims=True)
    return DetectionModel(eta, tuple(lab or "none" for lab in recorded))
