"""Lyapunov evaluation, envelope checks and tracking metrics over traces."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .coupling import CouplingWeights

if TYPE_CHECKING:
    from .dynamics import SimulationTrace
    from .synthesis import RateReport

DEFAULT_SLACK = 0.05
# relative level below which V is treated as numerically zero
V_NOISE_FLOOR = 1e-24


def _blocks(x: np.ndarray, N: int, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size != N * n:
        raise ValueError(f"expected {N * n} entries, got {x.size}")
    return x.reshape(N, n)


def _inv_quadratic(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    # row-wise x^T P^-1 x for the last axis of X
    c = cho_factor(np.asarray(P, dtype=float))
    flat = X.reshape(-1, X.shape[-1])
    sol = cho_solve(c, flat.T).T
    return np.einsum("ij,ij->i", flat, sol).reshape(X.shape[:-1])


def lyapunov_value(e, psi, weights: CouplingWeights, P1, P2) -> float:
    """V = e^T (PiXi (x) P1^-1) e + psi^T (PiXi (x) P2^-1) psi, one agent block at a time."""
    P1 = np.atleast_2d(np.asarray(P1, dtype=float))
    P2 = np.atleast_2d(np.asarray(P2, dtype=float))
    wdiag = np.diag(weights.pi_xi)
    N, n = wdiag.size, P1.shape[0]
    if P2.shape != (n, n):
        raise ValueError("P1 and P2 must have the same size")
    E, S = _blocks(e, N, n), _blocks(psi, N, n)
    return float(wdiag @ _inv_quadratic(P1, E) + wdiag @ _inv_quadratic(P2, S))


def lyapunov_series(trace: "SimulationTrace", weights: Mapping[int, CouplingWeights], P1,
                    P2) -> np.ndarray:
    """V at every record, using the weights of the active topology."""
    qe = _inv_quadratic(P1, trace.errors)      # (K, N)
    qp = _inv_quadratic(P2, trace.psi)
    W = np.array([np.diag(weights[int(k)].pi_xi) for k in trace.topology])
    return np.einsum("kn,kn->k", W, qe + qp)


@dataclass(frozen=True)
class ConvergenceReport:
    final_tracking_error: float
    final_observer_error: float
    time_to_tolerance: float | None
    envelope_violations: int | None
    per_period_V: tuple
    recursion_violations: int | None = None
    tolerance: float = 1e-2

    def to_dict(self) -> dict:
        return dict(self.__dict__, per_period_V=list(self.per_period_V))


def _period_indices(t: np.ndarray, w: float) -> list:
    step = float(np.min(np.diff(t))) if t.size > 1 else w
    out = []
    k = 0
    while k * w <= t[-1] + 1e-9 * max(1.0, t[-1]):
        j = int(np.argmin(np.abs(t - k * w)))
        if abs(t[j] - k * w) <= 0.5 * step + 1e-12:
            out.append(j)
        k += 1
    return out


def per_period_values(trace: "SimulationTrace", w: float) -> tuple:
    """V(k w) for every period start present in the trace."""
    if trace.V is None:
        return ()
    return tuple(float(trace.V[j]) for j in _period_indices(trace.t, w))


def consensus_metrics(trace: "SimulationTrace", tol: float = 1e-2,
                      w: float | None = None) -> ConvergenceReport:
    """Final errors and the first time after which all tracking errors stay below ``tol``."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    track = np.linalg.norm(trace.errors, axis=2).max(axis=1)
    obs = np.linalg.norm(trace.psi, axis=2).max(axis=1)
    worst = np.maximum(track, obs)
    above = np.flatnonzero(worst >= tol)
    if above.size == 0:
        ttt = float(trace.t[0])
    elif above[-1] + 1 < len(trace):
        ttt = float(trace.t[above[-1] + 1])
    else:
        ttt = None
    ppv = per_period_values(trace, w) if w is not None else ()
    return ConvergenceReport(float(track[-1]), float(obs[-1]), ttt, None, ppv, None, tol)


def envelope_log_bound(t: np.ndarray, rates: "RateReport", v0: float | None = None) -> np.ndarray:
    """ln(Omega0) - Omega1 t; ``v0`` rescales Omega0 when the report used V(0) = 1."""
    with np.errstate(divide="ignore"):
        log0 = math.log(rates.omega0) if rates.omega0 > 0 else -math.inf
    if v0 is not None:
        log0 += math.log(v0) if v0 > 0 else -math.inf
    return log0 - rates.omega1 * np.asarray(t, dtype=float)


def envelope_bound(t: np.ndarray, rates: "RateReport", v0: float | None = None) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(envelope_log_bound(t, rates, v0))


def envelope_check(trace: "SimulationTrace", rates: "RateReport", slack: float = DEFAULT_SLACK,
                   tol: float = 1e-2, v0: float | None = None) -> ConvergenceReport:
    """Count records above the exponential envelope and periods breaking the recursion.

    The recursion test compares V((k+1) w) with V(0) exp(-sum_{j<=k} Upsilon_j).
    Comparisons run on logarithms so very loose bounds do not overflow.
    """
    if trace.V is None:
        raise ValueError("trace has no Lyapunov values")
    base = consensus_metrics(trace, tol, rates.w)
    pad = math.log1p(slack)
    with np.errstate(divide="ignore"):
        logv = np.log(np.maximum(trace.V, 0.0))
    viol = int(np.count_nonzero(logv > envelope_log_bound(trace.t, rates, v0) + pad))
    ppv = base.per_period_V
    rec = 0
    if ppv and ppv[0] > 0:
        log_start = math.log(ppv[0])
        ups = rates.upsilon
        acc = 0.0
        for k in range(1, len(ppv)):
            acc += ups[(k - 1) % len(ups)]
            if ppv[k] > 0 and math.log(ppv[k]) > log_start - acc + pad:
                rec += 1
    return ConvergenceReport(base.final_tracking_error, base.final_observer_error,
                             base.time_to_tolerance, viol, ppv, rec, tol)


def log_derivative(t: np.ndarray, V: np.ndarray, floor: float | None = None) -> np.ndarray:
    """Forward difference of ln V; NaN where either end point is below the noise floor."""
    t = np.asarray(t, dtype=float)
    V = np.asarray(V, dtype=float)
    if floor is None:
        floor = V_NOISE_FLOOR * max(float(V.max()), 1e-300)
    ok = (V[:-1] > floor) & (V[1:] > floor)
    out = np.full(t.size - 1, np.nan)
    out[ok] = (np.log(V[1:][ok]) - np.log(V[:-1][ok])) / np.diff(t)[ok]
    return out


def eventually_decreasing(values: Sequence[float], floor: float | None = None) -> int | None:
    """Smallest index from which the sequence never increases (values under ``floor`` count as zero).

    Returns ``None`` when the last step still increases.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None
    if floor is None:
        floor = V_NOISE_FLOOR * max(float(v.max()), 1e-300)
    v = np.where(v < floor, 0.0, v)
    rises = np.flatnonzero(np.diff(v) > 0)
    if rises.size == 0:
        return 0
    start = int(rises[-1]) + 1
    return None if start == v.size - 1 else start


def summary_text(report: ConvergenceReport) -> str:
    ttt = "never" if report.time_to_tolerance is None else f"{report.time_to_tolerance:.4g}"
    lines = [
        f"final tracking error  {report.final_tracking_error:.3e}",
        f"final observer error  {report.final_observer_error:.3e}",
        f"time to tolerance {report.tolerance:g}: {ttt}",
    ]
    if report.envelope_violations is not None:
        lines.append(f"envelope violations   {report.envelope_violations}")
    if report.recursion_violations is not None:
        lines.append(f"recursion violations  {report.recursion_violations}")
    return "\n".join(lines)
