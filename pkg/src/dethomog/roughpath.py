"""Finite-dimensional rough paths on a grid.

A :class:`RoughDriver` stores the path ``W(t)``, its second level ``WW(t)``
(the candidate for int_0^t W (x) dW) and the grid-native step increments
``WW(t_n, t_{n+1})``.  Two-parameter increments follow
``WW(s,t) = WW(t) - WW(s) - W(s) (x) W(s,t)``.

Integrals are left-point sums: Young sums for the ``dV`` part and
compensated Riemann sums for the ``dW`` part.  :func:`solve_rde` is the
Davie-type step those sums induce, optionally completed with the cross
terms of the joint path (V, W).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ExponentConditionError(ValueError):
    """Young integration needs beta + gamma > 1."""


class GridMismatch(ValueError):
    pass


class RDEBlowUp(RuntimeError):
    def __init__(self, time: float, bound: float):
        self.time = time
        super().__init__(f"RDE solution left |X| <= {bound:g} at t={time:.6g}")


@dataclass(frozen=True)
class HolderPath:
    """Samples of a path R -> R^e on an increasing grid."""

    grid: np.ndarray
    values: np.ndarray
    exponent_hint: float = 1.0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if len(grid) != len(values):
            raise GridMismatch("grid and values differ in length")
        if len(grid) > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def anchored(self) -> bool:
        return bool(np.all(self.values[0] == 0.0))

    def rebased(self) -> "HolderPath":
        """The same path shifted to start at 0."""
        return HolderPath(self.grid, self.values - self.values[0], self.exponent_hint)

    def __add__(self, other: "HolderPath") -> "HolderPath":
        _same_grid(self.grid, other.grid)
        return HolderPath(self.grid, self.values + other.values, min(self.exponent_hint, other.exponent_hint))

    def scaled(self, alpha: float) -> "HolderPath":
        return HolderPath(self.grid, alpha * self.values, self.exponent_hint)


@dataclass(frozen=True)
class RoughDriver:
    W: HolderPath
    WW: np.ndarray
    steps: np.ndarray
    gamma: float = 0.5

    def __post_init__(self):
        WW = np.asarray(self.WW, dtype=float)
        steps = np.asarray(self.steps, dtype=float)
        k, e = self.W.values.shape
        if WW.shape != (k, e, e) or steps.shape != (k - 1, e, e):
            raise GridMismatch("second level does not match the path grid")
        if not self.W.anchored or np.any(WW[0] != 0.0):
            raise ValueError("a rough driver starts at (0, 0)")
        if not (1.0 / 3.0 < self.gamma <= 0.5):
            raise ValueError("gamma must lie in (1/3, 1/2]")
        object.__setattr__(self, "WW", WW)
        object.__setattr__(self, "steps", steps)

    @property
    def grid(self) -> np.ndarray:
        return self.W.grid

    @classmethod
    def from_levels(cls, W: HolderPath, WW: np.ndarray, gamma: float = 0.5) -> "RoughDriver":
        """Driver whose step increments are read off the stored second level."""
        WW = np.asarray(WW, dtype=float)
        w = W.values
        dW = np.diff(w, axis=0)
        steps = WW[1:] - WW[:-1] - w[:-1, :, None] * dW[:, None, :]
        return cls(W, WW, steps, gamma)

    def increment(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(W(t_i, t_j), WW(t_i, t_j)) from the stored path levels."""
        w, P = self.W.values, self.WW
        dW = w[j] - w[i]
        return dW, P[j] - P[i] - np.outer(w[i], dW)

    def to_csv(self, path, sidecar=None, provenance: dict | None = None) -> None:
        import csv
        import json

        k, e = self.W.values.shape
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            head = ["t"] + [f"W{a + 1}" for a in range(e)]
            head += [f"WW{a + 1}{b + 1}" for a in range(e) for b in range(e)]
            writer.writerow(head)
            for n in range(k):
                row = [self.grid[n], *self.W.values[n], *self.WW[n].ravel()]
                writer.writerow([repr(float(x)) for x in row])
        if sidecar is not None:
            with open(sidecar, "w") as fh:
                json.dump({"gamma": self.gamma, "points": k, "dim": e, "provenance": provenance or {}}, fh, indent=2)


def _same_grid(g1, g2):
    if len(g1) != len(g2) or not np.allclose(g1, g2, rtol=0.0, atol=1e-12):
        raise GridMismatch("paths live on different grids")


def _pairwise_sup(grid, increment_fn, exponent, chunk=256):
    """sup over i < j of |increment_fn(i, js)| / (t_j - t_i)^exponent."""
    k = len(grid)
    best = 0.0
    for i in range(k - 1):
        for start in range(i + 1, k, chunk):
            js = np.arange(start, min(k, start + chunk))
            num = increment_fn(i, js)
            den = (grid[js] - grid[i]) ** exponent
            best = max(best, float(np.max(num / den)))
    return best


def holder_seminorm(path: HolderPath, gamma: float) -> float:
    """Discrete sup_{s<t} |V(s,t)| / |t - s|^gamma over all grid pairs."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    if len(path.grid) < 2:
        raise ValueError("need at least two grid points")
    v = path.values
    return _pairwise_sup(path.grid, lambda i, js: np.linalg.norm(v[js] - v[i], axis=-1), gamma)


def lift_smooth(path: HolderPath, gamma: float = 0.5) -> RoughDriver:
    """Second level int_0^t W (x) dW by trapezoid accumulation on the grid."""
    W = path if path.anchored else path.rebased()
    w = W.values
    dW = np.diff(w, axis=0)
    mids = 0.5 * (w[:-1] + w[1:])
    increments = mids[:, :, None] * dW[:, None, :]
    WW = np.concatenate([np.zeros((1,) + increments.shape[1:]), np.cumsum(increments, axis=0)])
    steps = 0.5 * dW[:, :, None] * dW[:, None, :]
    return RoughDriver(W, WW, steps, gamma)


def chen_defect(driver: RoughDriver) -> float:
    """Largest violation of Chen's relation by the stored second level.

    Composing the step increments with Chen's relation gives a second
    level C with C(t_{n+1}) = C(t_n) + WW(t_n, t_{n+1}) + W(t_n) (x) W(t_n, t_{n+1}).
    For every pair s < t the stored increment WW(s,t) and the composed one
    differ by D(t) - D(s) with D = WW - C, so the maximum over all pairs (and
    all triples s < t < u) is the spread of D.
    """
    w = driver.W.values
    dW = np.diff(w, axis=0)
    comp = driver.steps + w[:-1, :, None] * dW[:, None, :]
    C = np.concatenate([np.zeros((1,) + comp.shape[1:]), np.cumsum(comp, axis=0)])
    D = (driver.WW - C).reshape(len(w), -1)
    if len(D) < 2:
        return 0.0
    return float(np.max(np.max(D, axis=0) - np.min(D, axis=0)))


def rough_metric(d1: RoughDriver, d2: RoughDriver, gamma: float | None = None) -> float:
    """Discrete inhomogeneous gamma-rough-path distance on a shared grid."""
    _same_grid(d1.grid, d2.grid)
    gamma = d1.gamma if gamma is None else gamma
    w1, w2 = d1.W.values, d2.W.values
    P1, P2 = d1.WW, d2.WW
    grid = d1.grid
    dw = w1 - w2

    def first(i, js):
        return np.linalg.norm(dw[js] - dw[i], axis=-1)

    def second(i, js):
        a = P1[js] - P1[i] - w1[i][None, :, None] * (w1[js] - w1[i])[:, None, :]
        b = P2[js] - P2[i] - w2[i][None, :, None] * (w2[js] - w2[i])[:, None, :]
        return np.linalg.norm((a - b).reshape(len(js), -1), axis=-1)

    return _pairwise_sup(grid, first, gamma) + _pairwise_sup(grid, second, 2.0 * gamma)


def young_integral(integrand: np.ndarray, V: HolderPath, beta: float, gamma: float) -> HolderPath:
    """Left-point Riemann sums of ``integrand`` against ``V``.

    ``integrand`` holds Y(t_n) on V's grid with shape ``(K, d, e)`` (a matrix
    acting on V-increments) or ``(K, e)`` (paired with V componentwise and
    summed, giving a scalar path).
    """
    if not beta + gamma > 1.0:
        raise ExponentConditionError(f"beta + gamma = {beta + gamma:g} <= 1")
    Y = np.asarray(integrand, dtype=float)
    if len(Y) != len(V.grid):
        raise GridMismatch("integrand is not sampled on V's grid")
    dV = np.diff(V.values, axis=0)
    if Y.ndim == 2:
        terms = np.einsum("ne,ne->n", Y[:-1], dV)[:, None]
    else:
        terms = np.einsum("nde,ne->nd", Y[:-1], dV)
    vals = np.concatenate([np.zeros((1, terms.shape[1])), np.cumsum(terms, axis=0)])
    return HolderPath(V.grid, vals, min(beta, gamma))


def rough_integral(
    H: Callable[[np.ndarray], np.ndarray],
    dH: Callable[[np.ndarray], np.ndarray],
    X: HolderPath,
    Xprime: np.ndarray,
    driver: RoughDriver,
) -> HolderPath:
    """Compensated Riemann sum of H(X) against the rough driver.

    ``H(x)`` has shape ``(q, e)``, ``dH(x)[i, b, k]`` = d/dx_k H^i_b(x) and
    ``Xprime[n, k, a]`` is the Gubinelli derivative of X^k in direction W^a.
    Each step adds H^i_b(X) W^b(s,t) + sum_k X'_{k,a} dH^i_{b,k} WW^{ab}(s,t).
    """
    _same_grid(X.grid, driver.grid)
    Xp = np.asarray(Xprime, dtype=float)
    if len(Xp) != len(X.grid):
        raise GridMismatch("Xprime is not aligned with X")
    dW = np.diff(driver.W.values, axis=0)
    out = [None] * len(X.grid)
    acc = None
    for n in range(len(X.grid) - 1):
        x = X.values[n]
        Hx = np.asarray(H(x), dtype=float)
        term = Hx @ dW[n]
        corr = np.einsum("ka,ibk,ab->i", Xp[n], np.asarray(dH(x), dtype=float), driver.steps[n])
        if acc is None:
            acc = np.zeros_like(term)
            out[0] = acc
        acc = acc + term + corr
        out[n + 1] = acc
    return HolderPath(X.grid, np.stack(out), driver.gamma)


@dataclass(frozen=True)
class VectorFieldPair:
    """Vector fields of dX = F(X) dV + H(X) dW.

    ``F(x)`` is ``(d, e_V)``, ``H(x)`` is ``(d, e)``, ``dH(x)[i, b, k]`` is
    the x_k-derivative of ``H(x)[i, b]`` and the optional ``dF`` likewise for
    F.  All accept a leading batch axis.
    """

    F: Callable[[np.ndarray], np.ndarray]
    H: Callable[[np.ndarray], np.ndarray]
    dH: Callable[[np.ndarray], np.ndarray]
    dF: Callable[[np.ndarray], np.ndarray] | None = None

    def validate(self, points, h: float = 1e-6, tol: float = 1e-6) -> None:
        """Check dH (and dF) against central differences at the given points."""
        pairs = [(self.H, self.dH)] + ([(self.F, self.dF)] if self.dF is not None else [])
        for x in np.atleast_2d(np.asarray(points, dtype=float)):
            for arr in (self.F(x), self.H(x), self.dH(x)):
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"non-finite vector field value at {x}")
            for fn, dfn in pairs:
                approx = np.stack(
                    [(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(len(x))], axis=-1
                )
                err = np.max(np.abs(approx - dfn(x)))
                if err > tol * max(1.0, np.max(np.abs(approx))):
                    raise ValueError(f"derivative does not match its field at {x} (error {err:.3g})")


def solve_rde(
    fields: VectorFieldPair,
    V: HolderPath,
    driver: RoughDriver,
    xi,
    bound: float = 1e6,
    scheme: str | None = None,
) -> HolderPath:
    """Davie-type scheme for dX = F(X) dV + H(X) dW with X' = H(X).

    ``first_order`` takes per step
    X += F(X) V(s,t) + H(X) W(s,t) + sum_{k,a,b} H^k_a(X) dH^i_{b,k}(X) WW^{ab}(s,t).
    ``joint`` (needs ``dF``; the default when it is given) treats (V, W) as
    one rough path and also adds the V-V, V-W and W-V second-level terms,
    with their step increments taken from the trapezoid rule.  For smooth
    drivers this makes the scheme second order; the extra terms vanish in
    the rough limit because V is a Young path.
    ``xi`` may carry a leading batch axis (solves share the driver).
    """
    _same_grid(V.grid, driver.grid)
    if scheme is None:
        scheme = "joint" if fields.dF is not None else "first_order"
    if scheme not in ("first_order", "joint"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "joint" and fields.dF is None:
        raise ValueError("the joint scheme needs dF")
    x = np.array(xi, dtype=float)
    dV = np.diff(V.values, axis=0)
    dW = np.diff(driver.W.values, axis=0)
    out = np.empty((len(V.grid),) + x.shape)
    out[0] = x
    for n in range(len(V.grid) - 1):
        Hx = fields.H(x)
        dHx = fields.dH(x)
        Fx = fields.F(x)
        step = Fx @ dV[n] + Hx @ dW[n] + np.einsum("...ka,...ibk,ab->...i", Hx, dHx, driver.steps[n])
        if scheme == "joint":
            dFx = fields.dF(x)
            vv = 0.5 * np.outer(dV[n], dV[n])
            vw = 0.5 * np.outer(dV[n], dW[n])
            step = (
                step
                + np.einsum("...ka,...ibk,ab->...i", Fx, dFx, vv)
                + np.einsum("...ka,...ibk,ab->...i", Fx, dHx, vw)
                + np.einsum("...ka,...ibk,ab->...i", Hx, dFx, vw.T)
            )
        x = x + step
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            raise RDEBlowUp(V.grid[n + 1], bound)
        out[n + 1] = x
    if out.ndim == 2:
        return HolderPath(V.grid, out, driver.gamma)
    return out
