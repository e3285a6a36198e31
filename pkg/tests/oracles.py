"""Independent straight-line reference computations.

Nothing here imports the package under test.  Values frozen in the tests were
produced by these functions.
"""
from __future__ import annotations

import itertools
from math import exp, factorial, pi, sqrt

import numpy as np
from scipy.linalg import expm


def rotation_gen(d):
    g = np.zeros((d, d))
    for i in range(d - 1):
        g[i + 1, i] = 1.0
        g[i, i + 1] = -1.0
    return g


def toy_ops(u, phases):
    d = len(phases)
    kick = expm(u * rotation_gen(d))
    mg = np.diag([np.cos(p) for p in phases])
    me = np.diag([np.sin(p) for p in phases])
    return [kick @ mg, kick @ me]


def kraus(ops, rho):
    out = np.zeros_like(rho, dtype=complex)
    for m in ops:
        out = out + m @ rho @ m.conj().T
    return out


def jump(ops, mu, rho):
    x = ops[mu] @ rho @ ops[mu].conj().T
    return x / np.trace(x).real


def probs(ops, rho):
    return np.array([np.trace(m @ rho @ m.conj().T).real for m in ops])


def pops(rho):
    return np.array([rho[i, i].real for i in range(rho.shape[0])])


def gamma(rho):
    return -0.5 * sum(p * p for p in pops(rho))


def q1_by_expectation(ops0, rho):
    p = probs(ops0, rho)
    after = sum(p[mu] * gamma(jump(ops0, mu, rho)) for mu in range(len(ops0)) if p[mu] > 1e-12)
    return gamma(rho) - after


def metzler_fd(ops_at, d, h=1e-4):
    """R from central differences of ``ops_at(u)`` with explicit loops."""
    plus, zero, minus = ops_at(h), ops_at(0.0), ops_at(-h)
    r = np.zeros((d, d))
    for mu in range(len(zero)):
        d1 = (plus[mu] - minus[mu]) / (2 * h)
        d2 = (plus[mu] - 2 * zero[mu] + minus[mu]) / h**2
        d1h, d2h = d1.conj().T, d2.conj().T
        for n1 in range(d):
            for n2 in range(d):
                r[n1, n2] += 2 * abs(d1h[n1, n2]) ** 2
            r[n1, n1] += 2 * (zero[mu][n1, n1] * d2h[n1, n1]).real
    return r


def perron_dense(p, target):
    w, v = np.linalg.eig(p.T)
    k = int(np.argmin(abs(w - 1)))
    e = v[:, k].real
    return e / e[target]


def weights_lstsq(r, target, lam_others):
    """Minimum-norm solve of R sigma = lambda on sigma[target] = 0."""
    d = len(r)
    p = np.eye(d) - r / np.trace(r)
    e = perron_dense(p, target)
    others = [n for n in range(d) if n != target]
    lam = np.zeros(d)
    lam[others] = lam_others
    lam[target] = -sum(e[n] * lam[n] for n in others)
    sol, *_ = np.linalg.lstsq(r[:, others], lam, rcond=None)
    sigma = np.zeros(d)
    sigma[others] = sol
    return sigma, lam, e


def v_eps(sigma, eps, rho):
    x = pops(rho)
    return float(x @ sigma - 0.5 * eps * (x @ x))


def expected_w_enum(ops_at, sigma, eps, rho, pending, xi):
    """Sum over outcomes of V(K^xi(K^{b1}(...K^{b_{tau-1}}(M_mu^{b_tau}(rho))))) weighted by p."""
    applied = pending[-1] if pending else xi
    ops = ops_at(applied)
    p = probs(ops, rho)
    total = 0.0
    for mu in range(len(ops)):
        if p[mu] <= 1e-12:
            continue
        x = jump(ops, mu, rho)
        if pending:
            for b in reversed(pending[:-1]):
                x = kraus(ops_at(b), x)
            x = kraus(ops_at(xi), x)
        total += p[mu] * v_eps(sigma, eps, x)
    return total


# ---------------------------------------------------------------------------
# photon box


def fock(d):
    a = np.zeros((d, d))
    for n in range(1, d):
        a[n - 1, n] = sqrt(n)
    return a, a.T.copy(), np.diag(np.arange(d, dtype=float))


def disp(u, d):
    a, ad, _ = fock(d)
    return expm(u * (ad - a))


def poisson_truncated(mean):
    w = [exp(-mean) * mean**k / factorial(k) for k in range(3)]
    s = sum(w)
    return [x / s for x in w]


def atom_ops(n_max=8, phi0=0.245 * pi, target=3, mean=0.6):
    d = n_max + 1
    phi_r = pi / 2 - phi0 * (target + 0.5)
    pa = poisson_truncated(mean)
    phi = np.array([(phi_r + phi0 * (n + 0.5)) / 2 for n in range(d)])
    c, s = np.cos(phi), np.sin(phi)
    return [
        np.sqrt(pa[0]) * np.eye(d),
        np.sqrt(pa[1]) * np.diag(c),
        np.sqrt(pa[1]) * np.diag(s),
        np.sqrt(pa[2]) * np.diag(c * c),
        np.sqrt(pa[2]) * np.diag(s * c),
        np.sqrt(pa[2]) * np.diag(c * s),
        np.sqrt(pa[2]) * np.diag(s * s),
    ]


def decohere(rho, theta=0.014, nth=0.05):
    d = rho.shape[0]
    a, ad, n = fock(d)
    l0 = np.eye(d) - theta * (0.5 + nth) * n - theta * nth / 2 * np.eye(d)
    lm = sqrt(theta * (1 + nth)) * a
    lp = sqrt(theta * nth) * ad
    out = l0 @ rho @ l0.T + lm @ rho @ lm.T + lp @ rho @ lp.T
    return out / np.trace(out)


def detector_enum(eff=0.35, fe=0.13, fg=0.11):
    """7x7 read-out matrix by brute-force enumeration of per-atom fates."""
    labels = ["", "g", "e", "gg", "eg", "ge", "ee"]
    flip = {"g": fg, "e": fe}
    swap = {"g": "e", "e": "g"}
    eta = np.zeros((7, 7))
    for j, lab in enumerate(labels):
        for fates in itertools.product(("miss", "ok", "flip"), repeat=len(lab)):
            pr, read = 1.0, ""
            for s, f in zip(lab, fates):
                if f == "miss":
                    pr *= 1 - eff
                elif f == "ok":
                    pr *= eff * (1 - flip[s])
                    read += s
                else:
                    pr *= eff * flip[s]
                    read += swap[s]
            eta[labels.index(read), j] += pr
    return eta


def photonbox_filter(rho, u, mu_rec, eta, theta=0.014):
    x = disp(u, rho.shape[0])
    y = x @ decohere(rho, theta) @ x.T
    ops = atom_ops()
    out = sum(eta[mu_rec, mu] * ops[mu] @ y @ ops[mu].T for mu in range(7))
    return out / np.trace(out)


def coherent_rho(nbar=3, d=9):
    psi = disp(sqrt(nbar), d)[:, 0]
    return np.outer(psi, psi)
