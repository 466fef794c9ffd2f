"""Fast-slow ODE ensembles and Euler-Maruyama for the limiting SDE.

The fast state runs in fast time with a fixed RK4 step ``dt_fast``; the slow
state is advanced on the same clock with the induced slow step
``h = eps**2 * dt_fast`` by Heun's method, using the orbit values at both
ends of the step.  With additive noise this reduces to the trapezoid rule
on the fast orbit, so ``x(T) - xi`` equals ``W^(eps)(T)`` built by
:func:`dethomog.observables.wip_path_eps` on the same grid.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fastflow import FlowSpec, FlowState, IntegrationDiverged, rk4_step, sample_members
from .homog import CoeffField
from .observables import LevelTwo, Observable, constant
from .roughpath import HolderPath, RoughDriver, VectorFieldPair

DEFAULT_GUARD = 1e3


class StepTooCoarse(UserWarning):
    pass


def _fd_jacobian(fn, x, h=1e-6):
    return np.stack([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(len(x))], axis=-1)


@dataclass(frozen=True)
class SlowSystem:
    """dx/dt = a(x, y) + eps^-1 b(x, y) with the analytic derivative of b.

    Callables take ``x`` of shape ``(..., d)`` and ``y`` of shape
    ``(..., M)`` with broadcastable leading axes.  ``db(x, y)[..., i, k]`` is
    the x_k-derivative of b^i.  Product systems carry ``h(x)`` ``(..., d, e)``,
    ``dh(x)`` ``(..., d, e, d)``, the fast observable ``v`` (arity e), and
    ``a = f(x) u(y)`` with ``f(x)`` ``(..., d, e_V)``.
    """

    d: int
    a: Callable
    b: Callable
    db: Callable | None = None
    form: str = "general"
    h: Callable | None = None
    dh: Callable | None = None
    v: Observable | None = None
    f: Callable | None = None
    df: Callable | None = None
    u: Observable | None = None

    @classmethod
    def general(cls, d: int, a: Callable, b: Callable, db: Callable | None = None) -> "SlowSystem":
        return cls(d, a, b, db)

    @classmethod
    def product(
        cls,
        h: Callable,
        dh: Callable,
        v: Observable,
        d: int,
        f: Callable | None = None,
        df: Callable | None = None,
        u: Observable | None = None,
    ) -> "SlowSystem":
        """b(x, y) = h(x) v(y) and a(x, y) = f(x) u(y); u defaults to 1."""
        if not v.centered:
            raise ValueError("the fast observable v must be centered")
        u = constant(1.0) if u is None else u
        if f is None:
            e_v = u.arity

            def f(x):
                x = np.asarray(x, dtype=float)
                return np.zeros(x.shape[:-1] + (d, e_v))

            def df(x):
                x = np.asarray(x, dtype=float)
                return np.zeros(x.shape[:-1] + (d, e_v, d))

        def a(x, y):
            return np.einsum("...ia,...a->...i", f(x), u(y))

        def b(x, y):
            return np.einsum("...ia,...a->...i", h(x), v(y))

        def db(x, y):
            return np.einsum("...iak,...a->...ik", dh(x), v(y))

        return cls(d, a, b, db, "product", h, dh, v, f, df, u)

    def fields(self) -> VectorFieldPair:
        """The (F, H) vector-field pair of the product case."""
        if self.form != "product":
            raise ValueError("only product systems have a rough-path form")
        return VectorFieldPair(self.f, self.h, self.dh, self.df)

    def validate(self, xs, ys, tol: float = 1e-10, fd_tol: float = 1e-6) -> None:
        """Check the product identity and db against finite differences."""
        for x in np.atleast_2d(np.asarray(xs, dtype=float)):
            for y in np.atleast_2d(np.asarray(ys, dtype=float)):
                bx = np.asarray(self.b(x, y))
                if self.form == "product":
                    if np.max(np.abs(bx - self.h(x) @ self.v(y))) > tol:
                        raise ValueError("b differs from h(x) v(y)")
                if self.db is not None:
                    approx = _fd_jacobian(lambda z: np.asarray(self.b(z, y)), x)
                    err = np.max(np.abs(approx - self.db(x, y)))
                    if err > fd_tol * max(1.0, np.max(np.abs(approx))):
                        raise ValueError(f"db does not match b (error {err:.3g})")


@dataclass(frozen=True)
class SlowPath:
    grid: np.ndarray
    values: np.ndarray
    escaped: bool
    escape_time: float | None = None


@dataclass
class EnsembleResult:
    """Endpoints at T of the members that stayed inside the guard."""

    eps: float | None
    endpoints: np.ndarray
    escaped: np.ndarray
    seeds: dict = field(default_factory=dict)
    paths: np.ndarray | None = None
    path_grid: np.ndarray | None = None

    def __post_init__(self):
        self.escaped = np.asarray(self.escaped, dtype=bool)
        self.endpoints = np.asarray(self.endpoints, dtype=float)
        if len(self.endpoints) + self.escapes != self.size:
            raise ValueError("endpoints and escapes must account for every member")

    @property
    def size(self) -> int:
        return len(self.escaped)

    @property
    def escapes(self) -> int:
        return int(self.escaped.sum())

    def to_csv(self, path, meta_path=None, meta: dict | None = None) -> None:
        d = self.endpoints.shape[1] if self.endpoints.ndim == 2 and len(self.endpoints) else 0
        d = d or (self.paths.shape[-1] if self.paths is not None else 1)
        kept = iter(self.endpoints)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["member", "escaped"] + [f"x{i + 1}" for i in range(d)])
            for m, esc in enumerate(self.escaped):
                row = ["nan"] * d if esc else [repr(float(x)) for x in next(kept)]
                writer.writerow([m, int(esc)] + row)
        if meta_path is not None:
            doc = {"eps": self.eps, "members": self.size, "escapes": self.escapes, "seeds": self.seeds, **(meta or {})}
            with open(meta_path, "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True, default=float)


def _slow_steps(eps, T, dt_fast):
    n = max(1, int(math.ceil(T / (eps**2 * dt_fast) - 1e-9)))
    h = T / n
    return n, h, h / eps**2


def _fast_slow_batch(spec, sys, eps, x, y, T, dt_fast, guard, record_stride=None, max_dt_fast=0.02):
    if not eps > 0:
        raise ValueError("eps must be positive")
    if dt_fast > max_dt_fast:
        warnings.warn(f"dt_fast={dt_fast:g} exceeds {max_dt_fast:g}; fast flow may be under-resolved", StepTooCoarse)
    n, h, hf = _slow_steps(eps, T, dt_fast)
    x = np.array(x, dtype=float)
    y = np.array(y, dtype=float)
    escaped = np.zeros(x.shape[:-1], dtype=bool)
    esc_time = np.full(x.shape[:-1], np.nan)
    inv = 1.0 / eps
    k1 = sys.a(x, y) + inv * sys.b(x, y)
    rec_idx, rec = [], []
    if record_stride:
        rec_idx.append(0)
        rec.append(x.copy())
    for i in range(1, n + 1):
        y = rk4_step(spec, y, hf)
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(i * h)
        x_pred = x + h * k1
        k2 = sys.a(x_pred, y) + inv * sys.b(x_pred, y)
        x_new = x + (0.5 * h) * (k1 + k2)
        out = ~np.isfinite(x_new).all(axis=-1) | (np.max(np.abs(np.nan_to_num(x_new, nan=np.inf)), axis=-1) > guard)
        fresh = out & ~escaped
        if np.any(fresh):
            esc_time = np.where(fresh, i * h, esc_time)
            escaped = escaped | fresh
        # escaped members stay frozen at their last admissible value
        x = np.where(escaped[..., None], x, x_new)
        k1 = sys.a(x, y) + inv * sys.b(x, y)
        if record_stride and (i % record_stride == 0 or i == n):
            rec_idx.append(i)
            rec.append(x.copy())
    grid = np.array(rec_idx) * h if record_stride else None
    return x, escaped, esc_time, grid, (np.stack(rec, axis=-2) if record_stride else None)


def integrate_fast_slow(
    spec: FlowSpec,
    sys: SlowSystem,
    eps: float,
    xi,
    y0,
    T: float,
    dt_fast: float,
    guard: float = DEFAULT_GUARD,
    record_stride: int = 1,
    max_dt_fast: float = 0.02,
) -> SlowPath:
    """x_eps on the slow grid (every ``record_stride`` slow steps)."""
    y = y0.point if isinstance(y0, FlowState) else np.asarray(y0, dtype=float)
    x, esc, tesc, grid, path = _fast_slow_batch(spec, sys, eps, xi, y, T, dt_fast, guard, record_stride, max_dt_fast)
    return SlowPath(grid, path, bool(esc), None if not esc else float(tesc))


@dataclass(frozen=True)
class EnsemblePlan:
    burn_in: float = 100.0
    burn_dt: float = 0.01
    dt_fast: float = 0.005
    guard: float = DEFAULT_GUARD
    chunk: int = 500
    workers: int = 1
    record_stride: int | None = None
    max_dt_fast: float = 0.02


def _chunks(N, size):
    return [np.arange(s, min(N, s + size)) for s in range(0, N, size)]


def _map_ordered(fn, chunks, workers):
    if workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def initial_states(spec: FlowSpec, seed: int, members, plan: EnsemblePlan = EnsemblePlan()) -> np.ndarray:
    return sample_members(spec, seed, members, plan.burn_in, plan.burn_dt)


def run_ensemble(
    spec: FlowSpec,
    sys: SlowSystem,
    eps: float,
    xi,
    T: float,
    N: int,
    seed: int,
    plan: EnsemblePlan = EnsemblePlan(),
) -> EnsembleResult:
    """N fast-slow solutions, y0 drawn from independent burned-in chains."""
    if N < 1:
        raise ValueError("N must be >= 1")
    xi = np.asarray(xi, dtype=float)

    def work(idx):
        y = initial_states(spec, seed, idx, plan)
        x = np.broadcast_to(xi, (len(idx), sys.d))
        return _fast_slow_batch(spec, sys, eps, x, y, T, plan.dt_fast, plan.guard, plan.record_stride, plan.max_dt_fast)

    parts = _map_ordered(work, _chunks(N, plan.chunk), plan.workers)
    x = np.concatenate([p[0] for p in parts])
    esc = np.concatenate([p[1] for p in parts])
    paths = np.concatenate([p[4] for p in parts]) if plan.record_stride else None
    seeds = {"seed": seed, "members": N, "initial_state": "sample_members"}
    return EnsembleResult(eps, x[~esc], esc, seeds, paths, parts[0][3])


def member_generator(seed: int, member: int) -> np.random.Generator:
    """Counter-based stream for one ensemble member."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(member)])))


def solve_sde(
    coeff: CoeffField,
    xi,
    T: float,
    dt: float,
    N: int,
    seed: int,
    guard: float = DEFAULT_GUARD,
    chunk: int = 1000,
    workers: int = 1,
    record_stride: int | None = None,
) -> EnsembleResult:
    """Euler-Maruyama for dX = a~(X) dt + sigma(X) dB.

    Member ``k`` draws its increments from its own Philox stream keyed on
    ``(seed, k)``, so the result is independent of chunking and threads.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    h = T / n
    d = coeff.d
    xi = np.asarray(xi, dtype=float)

    def work(idx):
        Z = np.stack([member_generator(seed, k).standard_normal((n, d)) for k in idx], axis=1)
        x = np.array(np.broadcast_to(xi, (len(idx), d)))
        escaped = np.zeros(len(idx), dtype=bool)
        rec = [x.copy()] if record_stride else []
        sq = math.sqrt(h)
        for i in range(n):
            drift = coeff.drift_at(x)
            sig = coeff.diffusion_at(x)
            x_new = x + h * drift + sq * np.einsum("nij,nj->ni", sig, Z[i])
            bad = ~np.isfinite(x_new).all(axis=-1) | (np.max(np.abs(np.nan_to_num(x_new, nan=np.inf)), axis=-1) > guard)
            escaped |= bad
            x = np.where(escaped[:, None], x, x_new)
            if record_stride and ((i + 1) % record_stride == 0 or i + 1 == n):
                rec.append(x.copy())
        return x, escaped, (np.stack(rec, axis=1) if record_stride else None)

    parts = _map_ordered(work, _chunks(N, chunk), workers)
    x = np.concatenate([p[0] for p in parts])
    esc = np.concatenate([p[1] for p in parts])
    paths = np.concatenate([p[2] for p in parts]) if record_stride else None
    grid = None
    if record_stride:
        steps = sorted(set(list(range(0, n + 1, record_stride)) + [n]))
        grid = np.array(steps) * h
    seeds = {"seed": seed, "members": N, "generator": "philox(seed, member)"}
    return EnsembleResult(None, x[~esc], esc, seeds, paths, grid)


def product_case_drivers(
    spec: FlowSpec,
    sys: SlowSystem,
    eps: float,
    y0,
    T: float,
    dt_fast: float,
    stride: int = 1,
) -> tuple[HolderPath, RoughDriver]:
    """(V_eps, (W_eps, WW_eps)) from one fast orbit on the slow grid.

    W_eps(t) = eps^-1 int_0^t v(y_eps) and V_eps(t) = int_0^t u(y_eps), so
    V(t) = t when u is the constant 1.  The grid is every ``stride`` slow
    steps of the fast-slow integrator with the same ``dt_fast``.
    """
    if sys.form != "product":
        raise ValueError("product_case_drivers needs a product system")
    n, h, hf = _slow_steps(eps, T, dt_fast)
    y = y0.point if isinstance(y0, FlowState) else np.asarray(y0, dtype=float)
    e, ev = sys.v.arity, sys.u.arity
    joint = LevelTwo.zeros((), e + ev)

    def sig(y):
        return np.concatenate([sys.v(y) / eps, sys.u(y)])

    left = sig(y)
    keep = [0]
    firsts = [joint.first.copy()]
    seconds = [joint.second[:e, :e].copy()]
    for i in range(1, n + 1):
        y = rk4_step(spec, y, hf)
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(i * h)
        right = sig(y)
        joint.update(left, right, h)
        left = right
        if i % stride == 0 or i == n:
            keep.append(i)
            firsts.append(joint.first.copy())
            seconds.append(joint.second[:e, :e].copy())
    grid = np.array(keep) * h
    F = np.stack(firsts)
    W = HolderPath(grid, F[:, :e], 0.5)
    V = HolderPath(grid, F[:, e:], 1.0)
    return V, RoughDriver.from_levels(W, np.stack(seconds), 0.5)
