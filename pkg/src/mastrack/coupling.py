"""Heterogeneous coupling gains and the weight chain Xi, Pi, Phi, Lambda."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CertificateError, NoSpanningTreeError
from .graph import DirectedTopology, has_directed_spanning_tree

BETA_SAFETY = 0.99
GAMMA_RESIDUAL_TOL = 1e-10
PI_NOISE = 1e-9


@dataclass(frozen=True, eq=False)
class CouplingWeights:
    """Coupling gain and Lyapunov weights for one topology.

    ``xi`` and ``pi`` are diagonal matrices, ``phi = pi xi Lhat + Lhat^T pi xi``
    with ``Lhat = (L + D) gamma`` and ``lam = xibar^-1 phi xibar^-1`` where
    ``xibar = sqrt(pi xi)``.
    """

    gamma: np.ndarray
    xi: np.ndarray
    pi: np.ndarray
    phi: np.ndarray
    lam: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return 1.0 / np.diag(self.xi)

    @property
    def pi_xi(self) -> np.ndarray:
        return self.pi @ self.xi

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh(self.lam)[0])

    @property
    def beta(self) -> float:
        """Largest admissible beta for this topology alone (with the safety factor)."""
        return BETA_SAFETY * self.lambda_min

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "xi_diag": np.diag(self.xi).tolist(),
            "pi_diag": np.diag(self.pi).tolist(),
            "lambda_min": self.lambda_min,
        }


def coupling_gains(topology: DirectedTopology) -> np.ndarray:
    """Gamma = (L + D)^-1, the unique solution of (L + D) Gamma = I."""
    if not has_directed_spanning_tree(topology):
        raise NoSpanningTreeError("topology has no spanning tree rooted at the leader")
    pinned = topology.pinned
    gamma = np.linalg.solve(pinned, np.eye(pinned.shape[0]))
    residual = np.abs(pinned @ gamma - np.eye(pinned.shape[0])).sum(axis=1).max()
    if residual > GAMMA_RESIDUAL_TOL:
        raise NoSpanningTreeError(f"(L + D) Gamma - I residual {residual:.3g} too large")
    return gamma


def _project_scaled_simplex(v: np.ndarray, total: float, floor: float) -> np.ndarray:
    # Euclidean projection onto {x >= floor, sum x = total}
    n = v.size
    u = v - floor
    s = total - n * floor
    srt = np.sort(u)[::-1]
    css = np.cumsum(srt) - s
    k = np.arange(1, n + 1)
    rho = np.nonzero(srt - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(u - tau, 0.0) + floor


def diagonal_certificate(m: np.ndarray, iterations: int = 200) -> np.ndarray:
    """Positive diagonal Theta with m^T Theta + Theta m > 0 (normalized to trace n).

    Starts from theta_i = p_i / q_i with p = m^-T 1, q = m^-1 1 and refines the
    smallest eigenvalue of the symmetric part by projected subgradient ascent
    with step 1/k, keeping the best iterate.
    """
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    ones = np.ones(n)
    try:
        p = np.linalg.solve(m.T, ones)
        q = np.linalg.solve(m, ones)
        theta = p / q if np.all(p > 0) and np.all(q > 0) else ones.copy()
    except np.linalg.LinAlgError:
        theta = ones.copy()
    theta = theta * (n / theta.sum())
    floor = 1e-6

    def score(th):
        s = m.T * th + (th[:, None] * m)
        w, v = np.linalg.eigh(0.5 * (s + s.T))
        return w[0], v[:, 0]

    best_val, vec = score(theta)
    best = theta.copy()
    scale = max(1.0, float(np.abs(m).max()))
    cur = theta.copy()
    for k in range(1, iterations + 1):
        val, vec = score(cur)
        if val > best_val:
            best_val, best = val, cur.copy()
        grad = 2.0 * vec * (m @ vec)
        cur = _project_scaled_simplex(cur + grad / (k * scale), float(n), floor)
    val, _ = score(cur)
    if val > best_val:
        best_val, best = val, cur
    if best_val <= 0:
        raise CertificateError("no diagonal certificate found; matrix is not a nonsingular M-matrix")
    return np.diag(best)


def incremental_pi(xi: np.ndarray, lhat: np.ndarray) -> np.ndarray:
    """Build diag(pi) one agent at a time so every leading block of Phi stays positive.

    With pi_1 .. pi_i fixed, the Schur complement of the (i+1)-th leading block
    is a concave quadratic g(pi) = -alpha pi^2 + (s - 2 c) pi - kappa; its
    positive set is solved in closed form.  The chosen value is 1.1 times the
    lower root when that stays inside the interval, the midpoint otherwise,
    and min(1, upper / 2) when every small positive value works.
    """
    xd = np.diag(xi)
    n = xd.size
    pis = np.zeros(n)
    diag0 = 2.0 * xd[0] * lhat[0, 0]
    if diag0 <= 0:
        raise CertificateError("first diagonal entry of Phi is not positive")
    pis[0] = 1.0
    for i in range(1, n):
        head = pis[:i, None] * xd[:i, None] * lhat[:i, :i]
        phi_i = head + head.T
        a = xd[i] * lhat[i, :i]
        b = pis[:i] * xd[:i] * lhat[:i, i]
        s = 2.0 * xd[i] * lhat[i, i]
        inv_a = np.linalg.solve(phi_i, a)
        inv_b = np.linalg.solve(phi_i, b)
        alpha = float(a @ inv_a)
        c = float(a @ inv_b)
        kappa = float(b @ inv_b)
        lin = s - 2.0 * c
        if alpha <= 1e-14 * max(1.0, abs(lin)):
            if lin <= 0:
                raise CertificateError(f"no positive pi for agent {i + 1}")
            lo, hi = max(kappa / lin, 0.0), np.inf
        else:
            disc = lin * lin - 4.0 * alpha * kappa
            if disc <= 0:
                raise CertificateError(f"no positive pi for agent {i + 1}")
            r = np.sqrt(disc)
            lo = max((lin - r) / (2.0 * alpha), 0.0)
            hi = (lin + r) / (2.0 * alpha)
            if hi <= 0:
                raise CertificateError(f"no positive pi for agent {i + 1}")
        if lo <= PI_NOISE * max(1.0, float(pis[:i].max())):
            lo = 0.0  # round-off from an (almost) decoupled agent
        if lo > 0:
            pis[i] = 1.1 * lo if 1.1 * lo < hi else 0.5 * (lo + hi)
        else:
            pis[i] = 1.0 if hi == np.inf else min(1.0, 0.5 * hi)
    return np.diag(pis)


def weight_chain(topology: DirectedTopology, gamma: np.ndarray) -> CouplingWeights:
    """Assemble Xi, Pi, Phi and Lambda for one topology and its coupling gain."""
    pinned = topology.pinned
    n = pinned.shape[0]
    gamma = np.asarray(gamma, dtype=float)
    if np.abs(pinned @ gamma - np.eye(n)).max() > 1e-8:
        raise CertificateError("gamma does not satisfy (L + D) gamma = I")
    lhat = pinned @ gamma
    xi = diagonal_certificate(pinned)
    pi = incremental_pi(xi, lhat)
    px = pi @ xi
    phi = px @ lhat + lhat.T @ px
    xibar_inv = np.diag(1.0 / np.sqrt(np.diag(px)))
    lam = xibar_inv @ phi @ xibar_inv
    lam = 0.5 * (lam + lam.T)
    if np.linalg.eigvalsh(lam)[0] <= 0:
        raise CertificateError("Lambda is not positive definite")
    return CouplingWeights(gamma=gamma, xi=xi, pi=pi, phi=phi, lam=lam)


def beta_bound(weights: Sequence[CouplingWeights]) -> float:
    """0.99 * min over topologies of lambda_min(Lambda)."""
    if not weights:
        raise CertificateError("need at least one weight set")
    mins = [w.lambda_min for w in weights]
    if min(mins) <= 0:
        raise CertificateError("Lambda not positive definite for some topology")
    return BETA_SAFETY * min(mins)
