"""LMI certificates for the tracking protocol, gain synthesis and rate bounds.

Block conventions (all blocks are symmetrized after assembly):

* ``Q1 = [[A P1 + P1 A^T + rho^2 I + beta P1 - beta (1 - l/2) B B^T, P1], [P1, -I]]``
* ``Q2 = [[A P2 + P2 A^T + rho^2 I + Qbar + Qbar^T + beta P2, P2, M^T],
  [P2, -I, 0], [M, 0, -(2 l / beta) I]]`` with ``M = K P2`` and ``Qbar = G C P2``.

A block is feasible when its largest eigenvalue is negative.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import block_diag, solve_continuous_lyapunov

from .coupling import CouplingWeights
from .dynamics import CommSchedule
from .errors import CertificateError, SynthesisInfeasible
from .lmi import Var, minimize_lambda_max, sym

log = logging.getLogger(__name__)

SYM_TOL = 1e-9
PINV_RCOND = 1e-10
BOUND_WEIGHT = 100.0
MARGIN_FRACTIONS = (0.5, 0.25, 0.1, 0.03)


@dataclass(frozen=True, eq=False)
class LmiReport:
    name: str
    matrix: np.ndarray = field(repr=False)
    lambda_max: float

    @property
    def feasible(self) -> bool:
        return self.lambda_max < 0.0

    def to_dict(self) -> dict:
        return {"block": self.name, "lambda_max": self.lambda_max, "feasible": self.feasible}


def _as2d(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


def _check_square_sym(P: np.ndarray, n: int, name: str) -> np.ndarray:
    P = _as2d(P)
    if P.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}, got {P.shape}")
    if np.abs(P - P.T).max() > SYM_TOL * max(1.0, np.abs(P).max()):
        raise ValueError(f"{name} is not symmetric")
    return P


def _report(name: str, block: np.ndarray) -> LmiReport:
    block = sym(block)
    return LmiReport(name, block, float(np.linalg.eigvalsh(block)[-1]))


def q1_block(P1, A, B, beta: float, l: float, rho: float) -> np.ndarray:
    n = A.shape[0]
    I = np.eye(n)
    top = A @ P1 + P1 @ A.T + rho ** 2 * I + beta * P1 - beta * (1.0 - 0.5 * l) * (B @ B.T)
    return sym(np.block([[top, P1], [P1, -I]]))


def q2_block(P2, M, Qbar, A, beta: float, l: float, rho: float) -> np.ndarray:
    n = A.shape[0]
    m = M.shape[0]
    I = np.eye(n)
    top = A @ P2 + P2 @ A.T + rho ** 2 * I + Qbar + Qbar.T + beta * P2
    return sym(np.block([
        [top, P2, M.T],
        [P2, -I, np.zeros((n, m))],
        [M, np.zeros((m, n)), -(2.0 * l / beta) * np.eye(m)],
    ]))


def check_lmi_q1(P1, B, A, beta: float, l: float, rho: float) -> LmiReport:
    """Largest eigenvalue of the Q1 block and its feasibility verdict."""
    A, B = _as2d(A), _as2d(B)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n:
        raise ValueError("A must be square and B must have as many rows as A")
    P1 = _check_square_sym(P1, n, "P1")
    return _report("Q1", q1_block(P1, A, B, beta, l, rho))


def check_lmi_q2(P2, M, Qbar, A, beta: float, l: float, rho: float) -> LmiReport:
    A = _as2d(A)
    n = A.shape[0]
    P2 = _check_square_sym(P2, n, "P2")
    M, Qbar = _as2d(M), _as2d(Qbar)
    if M.shape[1] != n or Qbar.shape != (n, n):
        raise ValueError("M must have n columns and Qbar must be n x n")
    if not beta > 0 or not l > 0:
        raise ValueError("beta and l must be positive")
    return _report("Q2", q2_block(P2, M, Qbar, A, beta, l, rho))


def q3_q4(P1, P2, Qbar, A, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Growth matrices used by the silent-interval rate: both symmetrized."""
    A = _as2d(A)
    n = A.shape[0]
    P1, P2, Qbar = _as2d(P1), _as2d(P2), _as2d(Qbar)
    if P1.shape != (n, n) or P2.shape != (n, n) or Qbar.shape != (n, n):
        raise ValueError("P1, P2 and Qbar must match the size of A")
    I = np.eye(n)
    q3 = A @ P1 + P1 @ A.T + rho ** 2 * I + P1.T @ P1
    q4 = A @ P2 + P2 @ A.T + rho ** 2 * I + Qbar + Qbar.T + P2.T @ P2
    return sym(q3), sym(q4)


def qbar(G_obs, C, P2) -> np.ndarray:
    """The observer coupling term of Q2, taken as ``G C P2``."""
    return _as2d(G_obs) @ _as2d(C) @ _as2d(P2)


def feedback_gain(P1, B) -> np.ndarray:
    """K = -B^T P1^-1 (via a linear solve)."""
    P1, B = _as2d(P1), _as2d(B)
    try:
        return -np.linalg.solve(P1, B).T
    except np.linalg.LinAlgError:
        raise CertificateError("P1 is singular") from None


def observer_gain_from_mbar(Mbar, C, P2) -> np.ndarray:
    """Least-squares G from ``Mbar = G C P2`` with truncated pseudoinverse."""
    CP = _as2d(C) @ _as2d(P2)
    return _as2d(Mbar) @ np.linalg.pinv(CP, rcond=PINV_RCOND)


# -- certificate audit ------------------------------------------------------

@dataclass(frozen=True)
class CertificateAudit:
    symmetric: bool
    min_eigenvalue: float
    failing_minors: tuple  # (indices, determinant) for non-positive principal minors

    @property
    def positive_definite(self) -> bool:
        return self.symmetric and not self.failing_minors and self.min_eigenvalue > 0

    def to_dict(self) -> dict:
        return {
            "symmetric": self.symmetric,
            "min_eigenvalue": self.min_eigenvalue,
            "positive_definite": self.positive_definite,
            "failing_minors": [{"indices": [i + 1 for i in idx], "det": d} for idx, d in self.failing_minors],
        }


def audit_certificate(P, max_full: int = 10) -> CertificateAudit:
    """Principal-minor positivity test (all minors up to size ``max_full``, leading minors beyond)."""
    P = _as2d(P)
    n = P.shape[0]
    symmetric = P.shape == (n, n) and bool(np.abs(P - P.T).max() <= SYM_TOL * max(1.0, np.abs(P).max()))
    S = sym(P)
    if n <= max_full:
        subsets = (c for r in range(1, n + 1) for c in itertools.combinations(range(n), r))
    else:
        subsets = (tuple(range(r)) for r in range(1, n + 1))
    failing = []
    for idx in subsets:
        d = float(np.linalg.det(S[np.ix_(idx, idx)]))
        if d <= 0:
            failing.append((idx, d))
    return CertificateAudit(symmetric, float(np.linalg.eigvalsh(S)[0]), tuple(failing))


# -- gain sets --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GainSet:
    """Feedback and observer gains together with the certificates they came from."""

    K: np.ndarray
    G_obs: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    beta: float
    l: float
    rho: float
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)
    gamma_per_topology: Mapping[int, np.ndarray] = field(default_factory=dict, repr=False)
    source: str = "synthesized"

    def __post_init__(self):
        for name in ("K", "G_obs", "P1", "P2", "A", "B", "C"):
            object.__setattr__(self, name, _as2d(getattr(self, name)))
        if not (self.beta > 0 and self.l > 0 and self.rho > 0):
            raise ValueError("beta, l and rho must be positive")
        n = self.A.shape[0]
        if self.K.shape != (self.B.shape[1], n) or self.G_obs.shape != (n, self.C.shape[0]):
            raise ValueError("gain shapes do not match the plant")

    @property
    def M(self) -> np.ndarray:
        return self.K @ self.P2

    @property
    def Qbar(self) -> np.ndarray:
        return qbar(self.G_obs, self.C, self.P2)

    def q1(self) -> LmiReport:
        return check_lmi_q1(self.P1, self.B, self.A, self.beta, self.l, self.rho)

    def q2(self) -> LmiReport:
        return check_lmi_q2(self.P2, self.M, self.Qbar, self.A, self.beta, self.l, self.rho)

    def feedback_residual(self) -> float:
        """max |K + B^T P1^-1|; zero for synthesized sets."""
        return float(np.abs(self.K - feedback_gain(self.P1, self.B)).max())

    def certified(self, tol: float = 1e-6) -> bool:
        return (audit_certificate(self.P1).positive_definite and audit_certificate(self.P2).positive_definite
                and self.q1().lambda_max < -tol and self.q2().lambda_max < -tol)

    def to_dict(self) -> dict:
        q1, q2 = self.q1(), self.q2()
        return {
            "source": self.source,
            "K": self.K.tolist(),
            "G_obs": self.G_obs.tolist(),
            "P1": self.P1.tolist(),
            "P2": self.P2.tolist(),
            "beta": self.beta, "l": self.l, "rho": self.rho,
            "Q1": q1.to_dict(), "Q2": q2.to_dict(),
            "P1_audit": audit_certificate(self.P1).to_dict(),
            "P2_audit": audit_certificate(self.P2).to_dict(),
            "feedback_residual": self.feedback_residual(),
            "closed_loop_eigs": {
                "A+BK": [[float(z.real), float(z.imag)] for z in np.linalg.eigvals(self.A + self.B @ self.K)],
                "A+GC": [[float(z.real), float(z.imag)] for z in np.linalg.eigvals(self.A + self.G_obs @ self.C)],
            },
            "gamma_per_topology": {str(k): np.asarray(v).tolist() for k, v in self.gamma_per_topology.items()},
        }


@dataclass(frozen=True)
class SynthesisOptions:
    """Search controls.

    The feedback stage bisects on a lower bound ``floor * I`` for P1: a larger
    floor gives a smaller ``K``.  The observer stage works with ``X = P2^-1``
    and ``Y = X G``; ``X >= observer_floor * I`` together with
    ``||Y|| <= observer_gain_cap * observer_floor`` bounds ``||G|| <= observer_gain_cap``.
    """

    max_iter: int = 5000
    tol: float = 1e-6
    floor_range: tuple = (1e-4, 1e2)
    bisection_steps: int = 14
    observer_floor: float = 1.0
    observer_gain_cap: float = 50.0
    best_effort_slack: float = 0.5
    best_effort: bool = False


def _stabilizable(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> bool:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            mat = np.hstack([A - lam * np.eye(n), B.astype(complex)])
            if np.linalg.matrix_rank(mat, tol=1e-8 * max(1.0, np.abs(mat).max())) < n:
                return False
    return True


def _hurwitz(M: np.ndarray) -> bool:
    return bool(np.all(np.linalg.eigvals(M).real < 0))


def _q1_solve(A, B, beta, l, rho, floor, init, opts, target=None):
    n = A.shape[0]
    BB = B @ B.T
    I = np.eye(n)
    c = beta * (1.0 - 0.5 * l)

    def block(P):
        top = A @ P + P @ A.T + rho ** 2 * I + beta * P - c * BB
        return np.block([[top, P], [P, -I]])

    return minimize_lambda_max(block, [Var("P", (n, n), "psd", floor)], {"P": init},
                               max_iter=opts.max_iter, target=target)


def _q2_solve(A, C, K, beta, l, rho, opts):
    # congruence of Q2 by diag(P2^-1, I, I) followed by a Schur step on the last block
    n, z = A.shape[0], C.shape[0]
    I = np.eye(n)
    W = I + (beta / (2.0 * l)) * (K.T @ K)
    At = A + 0.5 * beta * I
    kap = opts.observer_gain_cap * opts.observer_floor

    def block(X, Y):
        main = np.block([[X @ At + At.T @ X + Y @ C + C.T @ Y.T + W, rho * X], [rho * X, -I]])
        # weighted so the cap binds even when the main block stays positive
        bound = np.block([[-kap * I, Y], [Y.T, -kap * np.eye(z)]]) * (BOUND_WEIGHT / kap)
        return block_diag(main, bound)

    init = {"X": 2.0 * opts.observer_floor * I, "Y": np.zeros((n, z))}
    res = minimize_lambda_max(block, [Var("X", (n, n), "psd", opts.observer_floor), Var("Y", (n, z))],
                              init, max_iter=opts.max_iter)
    X, Y = res.values["X"], res.values["Y"]
    P2 = sym(np.linalg.inv(X))
    return P2, P2 @ Y, res


def _initial_p(A: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    if _hurwitz(A):
        P = solve_continuous_lyapunov(A, -np.eye(n))
        return sym(P)
    return np.eye(n)


def _largest_floor(A, B, beta, l, rho, base, lo, hi, P0, target, opts):
    # Q1's optimum is nondecreasing in the floor, so bisection in log-floor is valid
    n = A.shape[0]
    chosen, chosen_floor = base, lo
    a, b = math.log(lo), math.log(hi)
    for _ in range(opts.bisection_steps):
        mid = 0.5 * (a + b)
        fl = math.exp(mid)
        init = chosen.values["P"] + (fl - chosen_floor) * np.eye(n)
        res = _q1_solve(A, B, beta, l, rho, fl, init, opts, target=target)
        if res.lambda_max <= target:
            chosen, chosen_floor, a = res, fl, mid
        else:
            b = mid
    P1 = sym(chosen.values["P"])
    return P1, feedback_gain(P1, B), chosen_floor


def synthesize_gains(A, B, C, beta: float, l: float, rho: float,
                     gammas: Mapping[int, np.ndarray] | None = None,
                     options: SynthesisOptions | None = None) -> GainSet:
    """Search P1, P2 and read off K = -B^T P1^-1 and G.

    Stage one picks the largest floor on P1 whose best Q1 value reaches the
    target (half the best attainable margin when Q1 is feasible).  Stage two
    minimizes the observer block with K fixed.  When either block stays
    non-negative :class:`SynthesisInfeasible` is raised, unless
    ``options.best_effort`` is set and the (A, B), (C, A) pairs admit
    stabilizing gains; the best candidate is then returned with
    ``source = "best-effort"``.
    """
    opts = options or SynthesisOptions()
    A, B, C = _as2d(A), _as2d(B), _as2d(C)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
        raise ValueError("inconsistent plant dimensions")
    if not (beta > 0 and l > 0 and rho > 0):
        raise ValueError("beta, l and rho must be positive")
    started = time.perf_counter()
    gammas = dict(gammas or {})

    if not _stabilizable(A, B):
        lam = _q1_solve(A, B, beta, l, rho, opts.floor_range[0], _initial_p(A), opts).lambda_max
        raise SynthesisInfeasible("Q1", lam, message="(A, B) is not stabilizable; Q1 cannot be negative")

    lo, hi = opts.floor_range
    P0 = _initial_p(A)
    base = _q1_solve(A, B, beta, l, rho, lo, P0 + lo * np.eye(n), opts)
    best_lam = base.lambda_max
    feasible1 = best_lam < -opts.tol
    if feasible1:
        # a larger floor shrinks K and eases Q2; give up Q1 margin step by step
        targets = [frac * best_lam for frac in MARGIN_FRACTIONS]
    else:
        targets = [best_lam + opts.best_effort_slack * abs(best_lam)]
    log.info("Q1 best value %.6g at floor %.3g", best_lam, lo)

    gains = None
    for target in targets:
        P1, K, floor = _largest_floor(A, B, beta, l, rho, base, lo, hi, P0, target, opts)
        if not feasible1:
            # best-effort: back off until A + BK is Hurwitz
            while not _hurwitz(A + B @ K) and floor > lo:
                floor = max(lo, 0.7 * floor)
                res = _q1_solve(A, B, beta, l, rho, floor, P0 + floor * np.eye(n), opts)
                P1 = sym(res.values["P"])
                K = feedback_gain(P1, B)
        P2, G, _ = _q2_solve(A, C, K, beta, l, rho, opts)
        gains = GainSet(K=K, G_obs=G, P1=P1, P2=P2, beta=beta, l=l, rho=rho, A=A, B=B, C=C,
                        gamma_per_topology=gammas, source="synthesized")
        q1, q2 = gains.q1(), gains.q2()
        log.info("floor %.4g: Q1 %.4g, Q2 %.4g (%.2fs)", floor, q1.lambda_max, q2.lambda_max,
                 time.perf_counter() - started)
        if q1.lambda_max < -opts.tol and q2.lambda_max < -opts.tol:
            return gains
    failing = q1 if q1.lambda_max >= -opts.tol else q2
    best = GainSet(K=K, G_obs=G, P1=P1, P2=P2, beta=beta, l=l, rho=rho, A=A, B=B, C=C,
                   gamma_per_topology=gammas, source="best-effort")
    if opts.best_effort and _hurwitz(A + B @ K) and _hurwitz(A + G @ C):
        log.warning("block %s not certified (lambda_max %.4g); using best-effort gains",
                    failing.name, failing.lambda_max)
        return best
    raise SynthesisInfeasible(failing.name, failing.lambda_max, best=best)


# -- rates ------------------------------------------------------------------

def _pair_max(X: np.ndarray, Y: np.ndarray) -> float:
    return max(float(np.linalg.eigvalsh(sym(X))[-1]), float(np.linalg.eigvalsh(sym(Y))[-1]))


def _pair_min(X: np.ndarray, Y: np.ndarray) -> float:
    return min(float(np.linalg.eigvalsh(sym(X))[0]), float(np.linalg.eigvalsh(sym(Y))[0]))


@dataclass(frozen=True)
class ThreeModeReport:
    m1: LmiReport
    m2: LmiReport
    m3: np.ndarray = field(repr=False)
    m4: np.ndarray = field(repr=False)
    m5: np.ndarray = field(repr=False)
    m6: np.ndarray = field(repr=False)
    l_hat_prime: float
    chi_hat: float

    @property
    def feasible(self) -> bool:
        return self.m1.feasible and self.m2.feasible


def check_lemma6(P1p, P2p, Qbarp, Mp, A, B, beta: float, l: float, rho: float) -> ThreeModeReport:
    """Three-mode certificate blocks and their growth rates.

    M1, M2 have the Q1, Q2 form; M5, M6 the Q3, Q4 form; M3 is M5 minus
    ``beta (1 - l/2) B B^T`` and M4 equals M6.
    """
    A, B = _as2d(A), _as2d(B)
    P1p, P2p = _as2d(P1p), _as2d(P2p)
    m1 = check_lmi_q1(P1p, B, A, beta, l, rho)
    m1 = LmiReport("M1", m1.matrix, m1.lambda_max)
    m2 = check_lmi_q2(P2p, Mp, Qbarp, A, beta, l, rho)
    m2 = LmiReport("M2", m2.matrix, m2.lambda_max)
    m5, m6 = q3_q4(P1p, P2p, Qbarp, A, rho)
    m3 = sym(m5 - beta * (1.0 - 0.5 * l) * (B @ B.T))
    m4 = m6.copy()
    inv_top = _pair_max(np.linalg.inv(P1p), np.linalg.inv(P2p))
    return ThreeModeReport(m1, m2, m3, m4, m5, m6,
                        l_hat_prime=_pair_max(m3, m4) * inv_top,
                        chi_hat=_pair_max(m5, m6) * inv_top)


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 700.0 else math.inf


@dataclass(frozen=True)
class RateReport:
    gamma_hat_min: float
    gamma_hat_max: float
    l_hat: float
    chi_hat: float | None
    delta_threshold_max: float
    delta_threshold_min: float
    eta_min: float
    eta_max: float
    omega0: float
    omega1: float
    upsilon: tuple
    w: float
    mode: str
    condition_holds: bool
    margin_values: tuple = ()

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def rate_quantities(gains: GainSet, weights: Sequence[CouplingWeights], schedule: CommSchedule,
                    v0: float = 1.0, t_hat: float = 0.0, periods: int | None = None) -> RateReport:
    """Decay and growth rates, the communication thresholds and the envelope constants.

    ``periods`` sets how many per-period exponents are listed (default: one
    full cycle of the per-period duration sequence).
    """
    if not weights:
        raise CertificateError("need coupling weights for at least one topology")
    for name, P in (("P1", gains.P1), ("P2", gains.P2)):
        if np.linalg.eigvalsh(sym(P))[0] <= 0:
            raise CertificateError(f"{name} is not positive definite")
    w = float(schedule.w)
    inv1, inv2 = np.linalg.inv(gains.P1), np.linalg.inv(gains.P2)
    lmin, lmax = _pair_min(inv1, inv2), _pair_max(inv1, inv2)
    etas = [np.diag(wt.pi_xi) for wt in weights]
    eta_min = float(min(e.min() for e in etas))
    eta_max = float(max(e.max() for e in etas))
    g_min = gains.beta * eta_min * lmin / (eta_max * lmax)
    g_max = gains.beta * lmin / lmax
    if periods is None:
        periods = max(len(schedule.deltas), len(schedule.hs) or 1)
    chi = None
    vals: tuple = ()
    if schedule.three_mode:
        rep = check_lemma6(gains.P1, gains.P2, gains.Qbar, gains.M, gains.A, gains.B,
                           gains.beta, gains.l, gains.rho)
        lh, chi = rep.l_hat_prime, rep.chi_hat
        ups = []
        vals_l = []
        for j in range(periods):
            d, hj = schedule.delta_at(j), schedule.h_at(j)
            ups.append(g_min * d - lh * (w - hj - d) - chi * (hj - d))
            vals_l.append((g_min * d + lh * (hj + d) - chi * (hj - d)) / lh if lh != 0 else math.inf)
        vals = tuple(vals_l)
        omega0 = _safe_exp(w * (g_min + lh + chi)) * v0
        upsilon = tuple(ups)
        holds = all(v > t_hat for v in vals)
        l_hat = lh
    else:
        q3, q4 = q3_q4(gains.P1, gains.P2, gains.Qbar, gains.A, gains.rho)
        l_hat = _pair_max(q3, q4) * lmax
        upsilon = tuple(g_min * schedule.delta_at(j) - l_hat * (w - schedule.delta_at(j))
                        for j in range(periods))
        omega0 = _safe_exp(w * l_hat) * v0
        holds = None
    thr_max = l_hat * w / (g_min + l_hat)
    thr_min = l_hat * w / (g_max + l_hat)
    if holds is None:
        d = schedule.deltas
        holds = max(d) > thr_max and min(d) > thr_min
    omega1 = min(upsilon) / w
    return RateReport(gamma_hat_min=g_min, gamma_hat_max=g_max, l_hat=l_hat, chi_hat=chi,
                      delta_threshold_max=thr_max, delta_threshold_min=thr_min,
                      eta_min=eta_min, eta_max=eta_max, omega0=omega0, omega1=omega1,
                      upsilon=upsilon, w=w, mode=schedule.mode, condition_holds=bool(holds),
                      margin_values=vals)


def delta_thresholds(gamma_hat_min: float, gamma_hat_max: float, l_hat: float,
                     w: float) -> tuple[float, float]:
    """The two communication-duration thresholds ``l w / (gamma + l)``."""
    return l_hat * w / (gamma_hat_min + l_hat), l_hat * w / (gamma_hat_max + l_hat)
