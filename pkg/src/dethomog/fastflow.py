"""Fast chaotic flows: fixed-step RK4 integration, invariant-measure sampling
and Poincare-section return data.

Every vector field works on arrays of shape ``(..., M)`` so that a single
state and a batch of ensemble members go through the same arithmetic.  The
arithmetic is purely elementwise, which keeps batched results bit-identical
to one-member-at-a-time results.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LORENZ_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
# A point on (or very near) the Lorenz attractor used as the seed orbit origin.
LORENZ_ORIGIN = (0.0, 1.0, 1.05)


class IntegrationDiverged(RuntimeError):
    """A trajectory produced a non-finite state."""

    def __init__(self, time: float, message: str = ""):
        self.time = float(time)
        super().__init__(message or f"integration diverged at t={self.time:.6g}")


class NoCrossingFound(RuntimeError):
    """No section crossing occurred within the search horizon."""


@dataclass(frozen=True)
class FlowSpec:
    """A named fast vector field on R^M.

    ``custom`` flows supply ``vector_field``, a callable mapping ``(..., M)``
    arrays to ``(..., M)`` arrays.
    """

    name: str
    dimension: int
    params: dict = field(default_factory=dict)
    vector_field: Callable[[np.ndarray], np.ndarray] | None = field(
        default=None, compare=False, repr=False
    )

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.name == "lorenz":
            if self.dimension != 3:
                raise ValueError("lorenz flow has dimension 3")
            missing = set(LORENZ_DEFAULTS) - set(self.params)
            if missing:
                raise ValueError(f"lorenz params missing: {sorted(missing)}")
        elif self.name == "rotation_test":
            if self.dimension != 2:
                raise ValueError("rotation_test flow has dimension 2")
        elif self.name == "custom":
            if self.vector_field is None:
                raise ValueError("custom flow needs a vector_field callable")
        else:
            raise ValueError(f"unknown flow {self.name!r}")

    @classmethod
    def lorenz(cls, **params) -> "FlowSpec":
        p = dict(LORENZ_DEFAULTS)
        p.update({k: float(v) for k, v in params.items()})
        return cls("lorenz", 3, p)

    @classmethod
    def rotation(cls) -> "FlowSpec":
        return cls("rotation_test", 2, {})

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self.name == "lorenz":
            s, r, b = self.params["sigma"], self.params["rho"], self.params["beta"]
            y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
            return np.stack((s * (y2 - y1), y1 * (r - y3) - y2, y1 * y2 - b * y3), axis=-1)
        if self.name == "rotation_test":
            return np.stack((-y[..., 1], y[..., 0]), axis=-1)
        return np.asarray(self.vector_field(y), dtype=float)

    def default_origin(self) -> np.ndarray:
        if self.name == "lorenz":
            return np.array(LORENZ_ORIGIN)
        if self.name == "rotation_test":
            return np.array([1.0, 0.0])
        return np.zeros(self.dimension)


@dataclass(frozen=True)
class FlowState:
    point: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))


@dataclass(frozen=True)
class Orbit:
    grid: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        if len(self.grid) != len(self.points):
            raise ValueError("grid and points differ in length")
        if len(self.grid) > 1 and not np.all(np.diff(self.grid) > 0):
            raise ValueError("orbit grid must be strictly increasing")

    def __len__(self):
        return len(self.grid)

    @property
    def final(self) -> FlowState:
        return FlowState(self.points[-1].copy(), float(self.grid[-1]))

    def to_csv(self, path) -> None:
        m = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"y{i + 1}" for i in range(m)])
            for t, p in zip(self.grid, self.points):
                writer.writerow([repr(float(t))] + [repr(float(x)) for x in p])


@dataclass(frozen=True)
class SectionSpec:
    """The hyperplane ``<normal, y> = offset`` crossed in a given direction."""

    normal: np.ndarray
    offset: float
    direction: str = "downward"
    min_return_time: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))
        if not np.linalg.norm(self.normal) > 0:
            raise ValueError("section normal must be nonzero")
        if self.direction not in ("upward", "downward"):
            raise ValueError("direction must be 'upward' or 'downward'")
        if not self.min_return_time > 0:
            raise ValueError("min_return_time must be positive")

    @classmethod
    def lorenz_standard(cls, spec: FlowSpec, min_return_time: float = 0.2) -> "SectionSpec":
        """The plane y3 = rho - 1 crossed downward."""
        return cls(np.array([0.0, 0.0, 1.0]), spec.params["rho"] - 1.0, "downward", min_return_time)

    def height(self, y: np.ndarray) -> np.ndarray:
        return y @ self.normal - self.offset

    def signed(self, y: np.ndarray) -> np.ndarray:
        """Height oriented so that a crossing goes from negative to positive."""
        h = self.height(y)
        return h if self.direction == "upward" else -h


@dataclass(frozen=True)
class ReturnSample:
    base_point: np.ndarray
    return_time: float
    intra_orbit: Orbit


def _lorenz_rk4_point(p, y, dt):
    # Same operation order as the array path, so results are bit-identical.
    s, r, b = p["sigma"], p["rho"], p["beta"]
    y1, y2, y3 = y
    h = 0.5 * dt

    def f(a1, a2, a3):
        return s * (a2 - a1), a1 * (r - a3) - a2, a1 * a2 - b * a3

    k1 = f(y1, y2, y3)
    k2 = f(y1 + h * k1[0], y2 + h * k1[1], y3 + h * k1[2])
    k3 = f(y1 + h * k2[0], y2 + h * k2[1], y3 + h * k2[2])
    k4 = f(y1 + dt * k3[0], y2 + dt * k3[1], y3 + dt * k3[2])
    c = dt / 6.0
    return np.array([
        yi + c * (((a + 2.0 * bb) + 2.0 * cc) + d)
        for yi, a, bb, cc, d in zip(y, k1, k2, k3, k4)
    ])


def rk4_step(spec: FlowSpec, y: np.ndarray, dt: float) -> np.ndarray:
    if spec.name == "lorenz" and y.ndim == 1:
        return _lorenz_rk4_point(spec.params, y.tolist(), dt)
    k1 = spec(y)
    k2 = spec(y + (0.5 * dt) * k1)
    k3 = spec(y + (0.5 * dt) * k2)
    k4 = spec(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(y: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(y)):
        raise IntegrationDiverged(t)


def step_flow(spec: FlowSpec, state: FlowState, dt: float) -> FlowState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_finite(state.point, state.time)
    y = rk4_step(spec, state.point, dt)
    _check_finite(y, state.time + dt)
    return FlowState(y, state.time + dt)


def time_grid(t0: float, horizon: float, dt: float) -> np.ndarray:
    """Uniform grid on [t0, t0 + horizon] with a final partial step if needed."""
    n = int(math.floor(horizon / dt + 1e-9))
    grid = t0 + dt * np.arange(n + 1)
    if t0 + horizon - grid[-1] > 1e-9 * max(1.0, dt):
        grid = np.append(grid, t0 + horizon)
    else:
        grid[-1] = t0 + horizon
    return grid


def integrate_grid(spec: FlowSpec, y0: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """RK4 along an arbitrary increasing grid; ``y0`` may be batched ``(N, M)``.

    Returns an array of shape ``(len(grid),) + y0.shape``.
    """
    y = np.asarray(y0, dtype=float)
    out = np.empty((len(grid),) + y.shape)
    out[0] = y
    for i in range(1, len(grid)):
        y = rk4_step(spec, y, grid[i] - grid[i - 1])
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(grid[i])
        out[i] = y
    return out


def evolve(spec: FlowSpec, state: FlowState, horizon: float, dt: float) -> Orbit:
    if not (horizon > 0 and dt > 0):
        raise ValueError("horizon and dt must be positive")
    _check_finite(state.point, state.time)
    grid = time_grid(state.time, horizon, dt)
    return Orbit(grid, integrate_grid(spec, state.point, grid))


def advance(spec: FlowSpec, y: np.ndarray, horizon: float, dt: float, t0: float = 0.0) -> np.ndarray:
    """Final state after ``horizon`` without storing the orbit (batched ok)."""
    grid = time_grid(t0, horizon, dt)
    y = np.asarray(y, dtype=float)
    for i in range(1, len(grid)):
        y = rk4_step(spec, y, grid[i] - grid[i - 1])
    if not np.all(np.isfinite(y)):
        raise IntegrationDiverged(grid[-1])
    return y


def _perturbation(seed: int, stream: int, m: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))
    return scale * rng.standard_normal(m)


def sample_invariant(
    spec: FlowSpec,
    seed: int,
    burn_in: float = 100.0,
    count: int = 1,
    gap: float = 1.0,
    dt: float = 1e-3,
) -> list[FlowState]:
    """States along one long orbit: ``burn_in`` discarded, then every ``gap``.

    The seed perturbs the orbit origin.  Consecutive samples are a stationary
    sequence, not independent draws.
    """
    if not (burn_in > 0 and gap > 0 and count >= 1):
        raise ValueError("need burn_in > 0, gap > 0, count >= 1")
    y = spec.default_origin() + _perturbation(seed, 0, spec.dimension, 1e-3)
    y = advance(spec, y, burn_in, dt)
    states = [FlowState(y, burn_in)]
    t = burn_in
    for _ in range(count - 1):
        y = advance(spec, y, gap, dt, t)
        t += gap
        states.append(FlowState(y, t))
    return states


def sample_members(
    spec: FlowSpec,
    seed: int,
    members: Sequence[int] | np.ndarray,
    burn_in: float = 100.0,
    dt: float = 1e-3,
) -> np.ndarray:
    """Independent draws from the invariant measure, one chain per member.

    Member ``k`` starts at the seed orbit origin perturbed by a stream keyed on
    ``(seed, k + 1)`` and is burned in for ``burn_in``.  Chains are integrated
    as one batch; each row depends only on ``(seed, k)``.
    """
    members = np.asarray(members, dtype=int)
    base = spec.default_origin()
    y = np.stack([base + _perturbation(seed, k + 1, spec.dimension, 1.0) for k in members])
    return advance(spec, y, burn_in, dt)


def _crossing_time(spec, section, y_left, t_left, h, tol):
    """Bisect the sub-step length tau in (0, h] at which the section is hit."""
    lo, hi = 0.0, h
    y_hi = rk4_step(spec, y_left, h)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        y_mid = rk4_step(spec, y_left, mid)
        if section.signed(y_mid) >= 0.0:
            hi, y_hi = mid, y_mid
        else:
            lo = mid
    return t_left + hi, y_hi


def iter_crossings(
    spec: FlowSpec,
    section: SectionSpec,
    start: FlowState,
    dt: float,
    max_search: float = 1e3,
    tol: float = 1e-10,
    record: bool = True,
) -> Iterator[tuple[float, np.ndarray, list[float], list[np.ndarray]]]:
    """Yield ``(t_cross, y_cross, grid_times, grid_points)`` per section crossing.

    ``grid_times``/``grid_points`` are the integrator grid nodes strictly
    between the previous crossing and this one (empty lists if ``record`` is
    false).  The first yielded crossing is the first one after ``start``.
    """
    y = start.point.copy()
    t = start.time
    last_cross = -math.inf
    since = t
    times: list[float] = []
    pts: list[np.ndarray] = []
    g = section.signed(y)
    while True:
        y_new = rk4_step(spec, y, dt)
        if not np.all(np.isfinite(y_new)):
            raise IntegrationDiverged(t + dt)
        g_new = section.signed(y_new)
        if g < 0.0 <= g_new:
            tc, yc = _crossing_time(spec, section, y, t, dt, tol)
            if tc - last_cross >= section.min_return_time or last_cross == -math.inf:
                yield tc, yc, times, pts
                times, pts = [], []
                last_cross = tc
                since = tc
        y, t, g = y_new, t + dt, g_new
        if record:
            times.append(t)
            pts.append(y)
        if t - since > max_search:
            raise NoCrossingFound(f"no crossing within {max_search} time units after t={since:.6g}")


def poincare_returns(
    spec: FlowSpec,
    section: SectionSpec,
    start: FlowState,
    count: int,
    dt: float = 1e-3,
    max_search: float = 1e3,
    tol: float = 1e-10,
) -> list[ReturnSample]:
    """``count`` consecutive first returns to the section.

    The first crossing after ``start`` becomes the first base point.  Each
    ``intra_orbit`` runs from a crossing to the next one, with the two
    bisected crossing points as its endpoints.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out: list[ReturnSample] = []
    prev = None
    for tc, yc, times, pts in iter_crossings(spec, section, start, dt, max_search, tol):
        if prev is not None:
            t0, y0 = prev
            inner_t = [s for s in times if s < tc]
            inner_y = pts[: len(inner_t)]
            grid = np.array([t0] + inner_t + [tc])
            points = np.vstack([y0] + inner_y + [yc])
            keep = np.concatenate(([True], np.diff(grid) > 0))
            out.append(ReturnSample(y0, tc - t0, Orbit(grid[keep], points[keep])))
            if len(out) == count:
                return out
        prev = (tc, yc)
    raise AssertionError("unreachable")
