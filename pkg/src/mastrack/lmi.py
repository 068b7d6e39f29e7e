"""Small first-order solver for lambda_max minimization of affine symmetric blocks.

A block ``F(X_1, ..., X_k)`` that is affine in its matrix arguments is turned
into an explicit basis ``F0 + sum_j x_j F_j`` once, then the largest
eigenvalue is minimized through a log-sum-exp smoothing with a decreasing
temperature.  Symmetric positive-definite variables are parametrized as
``floor * I + R R^T`` so the search itself is unconstrained; the inner
quasi-Newton steps use scipy's L-BFGS.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize


@dataclass(frozen=True)
class Var:
    """Decision variable: ``kind`` is ``"psd"`` (square, >= floor * I) or ``"free"``."""

    name: str
    shape: tuple
    kind: str = "free"
    floor: float = 0.0


@dataclass
class LambdaMaxResult:
    values: dict
    lambda_max: float
    iterations: int
    converged: bool


def sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.T)


def _affine_basis(fn: Callable[..., np.ndarray], variables: Sequence[Var]):
    zeros = {v.name: np.zeros(v.shape) for v in variables}
    f0 = sym(np.asarray(fn(**zeros), dtype=float))
    basis = []
    for v in variables:
        size = int(np.prod(v.shape))
        for k in range(size):
            e = np.zeros(size)
            e[k] = 1.0
            args = dict(zeros)
            args[v.name] = e.reshape(v.shape)
            basis.append(sym(np.asarray(fn(**args), dtype=float)) - f0)
    return f0, np.array(basis)


class _Problem:
    def __init__(self, fn, variables, init):
        self.variables = list(variables)
        self.f0, self.basis = _affine_basis(fn, self.variables)
        self.z0 = []
        for v in self.variables:
            x = np.asarray(init[v.name], dtype=float).reshape(v.shape)
            if v.kind == "psd":
                n = v.shape[0]
                shifted = sym(x) - v.floor * np.eye(n)
                w, q = np.linalg.eigh(shifted)
                w = np.maximum(w, 1e-8 * max(1.0, abs(w).max()))
                r = q * np.sqrt(w)
                self.z0.append(r.ravel())
            else:
                self.z0.append(x.ravel())
        self.z0 = np.concatenate(self.z0)

    def unpack(self, z):
        out, raw, pos = {}, [], 0
        for v in self.variables:
            size = int(np.prod(v.shape))
            chunk = z[pos:pos + size].reshape(v.shape)
            pos += size
            if v.kind == "psd":
                val = chunk @ chunk.T + v.floor * np.eye(v.shape[0])
                out[v.name] = val
                raw.append(chunk)
            else:
                out[v.name] = chunk.copy()
                raw.append(None)
        return out, raw

    def matrix(self, values):
        x = np.concatenate([values[v.name].ravel() for v in self.variables])
        return self.f0 + np.tensordot(x, self.basis, axes=1)

    def lambda_max(self, z):
        values, _ = self.unpack(z)
        return float(np.linalg.eigvalsh(self.matrix(values))[-1])

    def smooth(self, z, mu):
        values, raw = self.unpack(z)
        w, q = np.linalg.eigh(self.matrix(values))
        top = w[-1]
        ex = np.exp((w - top) / mu)
        s = ex.sum()
        f = top + mu * np.log(s)
        wm = (q * (ex / s)) @ q.T
        gx = np.tensordot(self.basis, wm, axes=([1, 2], [0, 1]))
        grads, pos = [], 0
        for v, r in zip(self.variables, raw):
            size = int(np.prod(v.shape))
            g = gx[pos:pos + size].reshape(v.shape)
            pos += size
            if v.kind == "psd":
                grads.append(((g + g.T) @ r).ravel())
            else:
                grads.append(g.ravel())
        return f, np.concatenate(grads)


def minimize_lambda_max(fn: Callable[..., np.ndarray], variables: Sequence[Var], init: dict,
                        max_iter: int = 5000, target: float | None = None,
                        mu_schedule: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
                        ) -> LambdaMaxResult:
    """Minimize lambda_max(fn(**vars)) over the given variables.

    ``fn`` must be affine in every variable.  Stops early once the exact
    lambda_max drops below ``target``.
    """
    prob = _Problem(fn, variables, init)
    z = prob.z0.copy()
    best_z, best = z.copy(), prob.lambda_max(z)
    scale = max(1.0, abs(best))
    used = 0
    per_stage = max(1, max_iter // len(mu_schedule))
    for mu_rel in mu_schedule:
        if target is not None and best < target:
            break
        if used >= max_iter:
            break
        mu = mu_rel * scale
        res = minimize(prob.smooth, z, args=(mu,), jac=True, method="L-BFGS-B",
                       options={"maxiter": min(per_stage, max_iter - used), "gtol": 1e-12,
                                "ftol": 1e-15, "maxcor": 30})
        used += int(res.nit)
        z = res.x
        lm = prob.lambda_max(z)
        if lm < best:
            best, best_z = lm, z.copy()
        scale = max(min(scale, abs(best) + mu_rel * scale), 1e-12)
    values, _ = prob.unpack(best_z)
    return LambdaMaxResult(values=values, lambda_max=best, iterations=used,
                           converged=target is None or best < target)
