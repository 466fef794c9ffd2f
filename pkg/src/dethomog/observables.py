"""Mean-zero observables of the fast flow and their time integrals.

Quadrature is the trapezoid rule on the integrator grid.  The second-level
integral is accumulated as the trapezoid lift of the first-level path, so the
product rule ``S(v,w) + S(w,v) = v_{s,t} (x) w_{s,t}`` and Chen's relation
hold up to rounding on any grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .fastflow import FlowSpec, FlowState, IntegrationDiverged, rk4_step


@dataclass(frozen=True)
class Observable:
    """A map R^M -> R^m evaluated on arrays of shape ``(..., M)``.

    ``fn`` returns ``(..., m)``.  When ``centered`` is set, ``mean`` is
    subtracted on every evaluation.
    """

    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    arity: int = 1
    mean: np.ndarray = None
    centered: bool = False
    name: str = "v"

    def __post_init__(self):
        if self.arity < 1:
            raise ValueError("arity must be >= 1")
        mean = np.zeros(self.arity) if self.mean is None else np.asarray(self.mean, dtype=float)
        if mean.shape != (self.arity,):
            raise ValueError("mean has wrong shape")
        object.__setattr__(self, "mean", mean)

    def raw(self, y: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(y, dtype=float)), dtype=float)
        if out.shape[-1:] != (self.arity,):
            out = out[..., None] if self.arity == 1 else out
        return out

    def __call__(self, y: np.ndarray) -> np.ndarray:
        out = self.raw(y)
        return out - self.mean if self.centered else out

    def __getitem__(self, i: int) -> "Observable":
        return component(self, i)


# --- built-in library -------------------------------------------------------


class _Coordinate:
    def __init__(self, index: int):
        self.index = index

    def __call__(self, y):
        return y[..., self.index : self.index + 1]


class _Constant:
    def __init__(self, values):
        self.values = np.atleast_1d(np.asarray(values, dtype=float))

    def __call__(self, y):
        return np.broadcast_to(self.values, y.shape[:-1] + self.values.shape).copy()


class _Monomials:
    """sum_j c_j * prod_i y_i^{p_ji}."""

    def __init__(self, terms):
        self.terms = [(float(c), tuple(int(p) for p in powers)) for c, powers in terms]

    def __call__(self, y):
        out = np.zeros(y.shape[:-1])
        for c, powers in self.terms:
            term = np.full(y.shape[:-1], c)
            for i, p in enumerate(powers):
                if p:
                    term = term * y[..., i] ** p
            out = out + term
        return out[..., None]


class _Stack:
    def __init__(self, parts):
        self.parts = list(parts)

    def __call__(self, y):
        return np.concatenate([p(y) for p in self.parts], axis=-1)


class _Combination:
    def __init__(self, coeffs, parts):
        self.coeffs = [float(c) for c in coeffs]
        self.parts = list(parts)

    def __call__(self, y):
        out = self.coeffs[0] * self.parts[0](y)
        for c, p in zip(self.coeffs[1:], self.parts[1:]):
            out = out + c * p(y)
        return out


class _Component:
    def __init__(self, obs, i):
        self.obs, self.i = obs, i

    def __call__(self, y):
        return self.obs(y)[..., self.i : self.i + 1]


def coordinate(index: int, mean: float | None = None) -> Observable:
    """Projection y -> y[index].

    Passing ``mean`` declares the invariant mean analytically (for example 0
    for a coordinate that is odd under a symmetry of the flow), which marks the
    observable centered without a calibration sample.
    """
    obs = Observable(_Coordinate(index), 1, name=f"y{index + 1}")
    if mean is not None:
        obs = replace(obs, mean=np.array([mean], dtype=float), centered=True)
    return obs


def constant(value) -> Observable:
    values = np.atleast_1d(np.asarray(value, dtype=float))
    return Observable(_Constant(values), len(values), name="const")


def polynomial(terms, name: str = "poly") -> Observable:
    """Scalar polynomial in the coordinates, ``terms = [(coef, powers), ...]``."""
    return Observable(_Monomials(terms), 1, name=name)


def stack(*observables: Observable) -> Observable:
    """Concatenate observables into one vector observable.

    Parts are evaluated with their own centering, so the stacked observable
    is centered exactly when every part is.
    """
    return Observable(
        _Stack(list(observables)),
        sum(o.arity for o in observables),
        centered=all(o.centered for o in observables),
        name="(" + ",".join(o.name for o in observables) + ")",
    )


def combine(coeffs: Sequence[float], observables: Sequence[Observable]) -> Observable:
    """Linear combination sum_j c_j v_j of equal-arity observables."""
    arity = observables[0].arity
    if any(o.arity != arity for o in observables):
        raise ValueError("arity mismatch")
    return Observable(
        _Combination(coeffs, list(observables)),
        arity,
        centered=all(o.centered for o in observables),
        name="+".join(f"{c:g}*{o.name}" for c, o in zip(coeffs, observables)),
    )


def component(obs: Observable, i: int) -> Observable:
    return Observable(_Component(obs, i), 1, centered=obs.centered, name=f"{obs.name}[{i}]")


def from_config(cfg: dict) -> Observable:
    """Build a library observable from a config block.

    ``{"kind": "coordinate", "index": 0, "mean": 0.0}``,
    ``{"kind": "polynomial", "terms": [[c, [p1, p2, p3]], ...]}``,
    ``{"kind": "constant", "value": c}``; an optional ``scale`` multiplies
    the result.
    """
    kind = cfg.get("kind")
    if kind == "coordinate":
        obs = coordinate(int(cfg["index"]), cfg.get("mean"))
    elif kind == "polynomial":
        obs = polynomial(cfg["terms"], cfg.get("name", "poly"))
        if "mean" in cfg:
            obs = replace(obs, mean=np.array([cfg["mean"]], dtype=float), centered=True)
    elif kind == "constant":
        obs = constant(cfg["value"])
    else:
        raise ValueError(f"unknown observable kind {kind!r}")
    scale = cfg.get("scale")
    if scale is not None:
        obs = scale_observable(obs, float(scale))
    return obs


def scale_observable(obs: Observable, alpha: float) -> Observable:
    return combine([alpha], [obs])


def center(obs: Observable, calibration) -> Observable:
    """Subtract the empirical mean over a calibration sample.

    ``calibration`` is a sequence of FlowState or an ``(K, M)`` array.
    """
    pts = _as_points(calibration)
    if len(pts) == 0:
        raise ValueError("empty calibration set")
    mean = obs.raw(pts).mean(axis=0)
    return replace(obs, mean=mean, centered=True)


def _as_points(calibration) -> np.ndarray:
    if isinstance(calibration, np.ndarray):
        return np.atleast_2d(calibration)
    calibration = list(calibration)
    if not calibration:
        return np.empty((0, 0))
    if isinstance(calibration[0], FlowState):
        return np.stack([s.point for s in calibration])
    return np.atleast_2d(np.asarray(calibration, dtype=float))


# --- integrals ---------------------------------------------------------------


def integration_grid(s: float, t: float, dt: float, marks: Sequence[float] = ()) -> np.ndarray:
    """Nodes k*dt in [0, t] plus ``s``, ``t`` and any ``marks``.

    Always anchored at 0 so that intervals sharing endpoints share nodes.
    """
    n = int(math.floor(t / dt + 1e-9))
    nodes = dt * np.arange(n + 1)
    extra = np.array([s, t, *marks], dtype=float)
    grid = np.union1d(nodes, extra)
    # drop nodes that duplicate a mark up to rounding
    keep = np.concatenate(([True], np.diff(grid) > 1e-12 * max(1.0, dt)))
    grid = grid[keep]
    return grid[grid <= t + 1e-12]


@dataclass
class LevelTwo:
    """Running first- and second-level trapezoid integrals of a vector signal."""

    first: np.ndarray
    second: np.ndarray

    @classmethod
    def zeros(cls, batch_shape, m):
        return cls(np.zeros(batch_shape + (m,)), np.zeros(batch_shape + (m, m)))

    def update(self, u_left: np.ndarray, u_right: np.ndarray, h: float) -> None:
        inc = (0.5 * h) * (u_left + u_right)
        new_first = self.first + inc
        self.second = self.second + (0.5 * (self.first + new_first))[..., :, None] * inc[..., None, :]
        self.first = new_first


def _march(spec, u, y, grid, window_start_index, record_at=None):
    """Integrate along ``grid``; accumulate from ``grid[window_start_index]`` on.

    Returns the final state, the accumulator and, if ``record_at`` (sorted
    indices) is given, snapshots of (first, second) at those indices.
    """
    y = np.asarray(y, dtype=float)
    acc = LevelTwo.zeros(y.shape[:-1], u.arity)
    snaps = []
    rec = list(record_at) if record_at is not None else []
    ri = 0
    while ri < len(rec) and rec[ri] <= window_start_index:
        snaps.append((acc.first.copy(), acc.second.copy()))
        ri += 1
    u_left = u(y) if window_start_index == 0 else None
    for i in range(1, len(grid)):
        h = grid[i] - grid[i - 1]
        y = rk4_step(spec, y, h)
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(grid[i])
        if i == window_start_index:
            u_left = u(y)
        elif i > window_start_index:
            u_right = u(y)
            acc.update(u_left, u_right, h)
            u_left = u_right
        while ri < len(rec) and rec[ri] == i:
            snaps.append((acc.first.copy(), acc.second.copy()))
            ri += 1
    return y, acc, snaps


def _start(y0):
    return y0.point if isinstance(y0, FlowState) else np.asarray(y0, dtype=float)


def birkhoff_integral(spec: FlowSpec, v: Observable, y0, s: float, t: float, dt: float) -> np.ndarray:
    """v_{s,t} = int_s^t v(phi_r y0) dr (trapezoid); ``y0`` may be a batch."""
    if s > t:
        raise ValueError("need s <= t")
    y = _start(y0)
    if s == t:
        return np.zeros(y.shape[:-1] + (v.arity,))
    grid = integration_grid(s, t, dt)
    _, acc, _ = _march(spec, v, y, grid, int(np.searchsorted(grid, s)))
    return acc.first


def iterated_integral(
    spec: FlowSpec, v: Observable, w: Observable, y0, s: float, t: float, dt: float
) -> np.ndarray:
    """S_{s,t}^{ij} = int_s^t (int_s^r v^i(phi_u y0) du) w^j(phi_r y0) dr.

    One orbit pass with the running inner integral; returns ``(m_v, m_w)``
    (batched inputs give a leading batch axis).
    """
    if s > t:
        raise ValueError("need s <= t")
    y = _start(y0)
    if s == t:
        return np.zeros(y.shape[:-1] + (v.arity, w.arity))
    u = stack(v, w)
    grid = integration_grid(s, t, dt)
    _, acc, _ = _march(spec, u, y, grid, int(np.searchsorted(grid, s)))
    return acc.second[..., : v.arity, v.arity :]


@dataclass(frozen=True)
class PathSample:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.grid) != len(self.values):
            raise ValueError("grid and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path values must be finite")

    def to_csv(self, path) -> None:
        flat = self.values.reshape(len(self.grid), -1)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"c{i + 1}" for i in range(flat.shape[1])])
            for t, row in zip(self.grid, flat):
                writer.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def _scaled_paths(spec, v, y0, horizon_fast, times_fast, dt, first_scale, second_scale, grid):
    y = _start(y0)
    marks = [float(x) for x in times_fast]
    fgrid = integration_grid(0.0, horizon_fast, dt, marks)
    idx = np.searchsorted(fgrid, times_fast - 1e-12 * max(1.0, dt))
    _, _, snaps = _march(spec, v, y, fgrid, 0, record_at=idx)
    # time is the leading axis; a batch of starts follows it
    first = np.stack([f for f, _ in snaps]) * first_scale
    second = np.stack([s for _, s in snaps]) * second_scale
    return PathSample(grid, first), PathSample(grid, second)


def wip_path(spec: FlowSpec, v: Observable, y0, n: float, grid, dt: float = 1e-2):
    """(W_{v,n}, WW_{v,n}) on ``grid`` within [0, 1].

    W_{v,n}(t) = n^{-1/2} v_{0,tn} and WW_{v,n}(t) = n^{-1} S_{0,tn}(v, v).
    Values have shape ``(len(grid), m)`` and ``(len(grid), m, m)``; a batch
    of starts adds an axis after the time axis.
    """
    if not n > 0:
        raise ValueError("n must be positive")
    if not v.centered:
        raise ValueError("wip_path needs a centered observable")
    grid = np.asarray(grid, dtype=float)
    return _scaled_paths(spec, v, y0, grid[-1] * n, grid * n, dt, n ** -0.5, 1.0 / n, grid)


def wip_path_eps(spec: FlowSpec, v: Observable, y0, eps: float, horizon: float, grid, dt: float = 1e-2):
    """(W^(eps), WW^(eps)) on ``grid`` within [0, horizon].

    W^(eps)(t) = eps v_{0, t/eps^2}, WW^(eps)(t) = eps^2 S_{0, t/eps^2}.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    grid = np.asarray(grid, dtype=float)
    if grid[-1] > horizon + 1e-12:
        raise ValueError("grid exceeds horizon")
    return _scaled_paths(spec, v, y0, grid[-1] / eps**2, grid / eps**2, dt, eps, eps**2, grid)


def ergodic_center(
    spec: FlowSpec,
    obs: Observable,
    seed: int,
    members: int = 200,
    horizon: float = 200.0,
    burn_in: float = 100.0,
    dt: float = 1e-2,
) -> Observable:
    """Center ``obs`` by its time average over ``members`` independent chains.

    Time averages converge much faster than averages over snapshot states,
    which matters because a mean error delta biases window estimates of
    B(v, v) by about delta**2 * n / 2.
    """
    from .fastflow import sample_members

    y = sample_members(spec, seed, np.arange(members), burn_in, dt)
    raw = Observable(obs.fn, obs.arity, name=obs.name)
    avg = birkhoff_integral(spec, raw, y, 0.0, horizon, dt) / horizon
    return replace(obs, mean=avg.mean(axis=0), centered=True)
