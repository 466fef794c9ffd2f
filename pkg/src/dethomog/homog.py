"""Estimators of the bilinear form B(v, w) and the limiting SDE coefficients.

Three routes to B(v, w):

* ``window``: ensemble average of S_n(v, w) / n over windows of length n;
* ``correlation``: time integral of the lagged cross-correlation
  E[v(y) w(phi_t y)] over [0, t_max] (mixing flows);
* ``suspension``: Poincare-section returns, lag sums of induced
  observables plus the per-return iterated integral.

Every estimator works on a stacked vector observable ``u`` and returns the
full matrix B(u^a, u^b) with a standard error per entry, computed from the
spread of independent ensemble members.  Members are processed in fixed
chunks and reduced in member order, so results do not depend on the number
of worker threads.
"""
from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .fastflow import (
    FlowSpec,
    IntegrationDiverged,
    ReturnSample,
    SectionSpec,
    _crossing_time,
    rk4_step,
    sample_members,
)
from .observables import LevelTwo, Observable, _march, integration_grid, stack

COEFF_FORMAT_VERSION = 1
# Absolute floor of the default PSD tolerance, so an identically zero
# diffusion matrix with rounding noise is accepted.
PSD_ABS_FLOOR = 1e-12


class NotPositiveSemidefinite(ValueError):
    """An eigenvalue fell below -tol_psd."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingPlan:
    """How an estimator draws its ensemble.

    ``members`` independent chains (each burned in from its own seeded
    perturbation), ``origins`` windows per chain separated by ``gap`` flow-time
    units.  ``chunk`` fixes the batch composition; ``workers`` only sets the
    thread count.
    """

    members: int = 200
    seed: int = 0
    burn_in: float = 100.0
    dt: float = 0.01
    origins: int = 1
    gap: float = 5.0
    chunk: int = 256
    workers: int = 1

    def meta(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d


def run_members(plan: SamplingPlan, fn: Callable[[np.ndarray], object]) -> list:
    """Apply ``fn`` to member-index chunks; results in member order."""
    chunks = [
        np.arange(s, min(plan.members, s + plan.chunk)) for s in range(0, plan.members, plan.chunk)
    ]
    if plan.workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=plan.workers) as pool:
        return list(pool.map(fn, chunks))


@dataclass(frozen=True)
class BEstimate:
    value: float
    std_error: float
    method: str
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"value": self.value, "std_error": self.std_error, "method": self.method,
                "meta": json.dumps(self.meta, sort_keys=True, default=float)}


@dataclass(frozen=True)
class BMatrix:
    """B(u^a, u^b) for all component pairs of a vector observable."""

    value: np.ndarray
    std_error: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)
    per_member: np.ndarray | None = field(default=None, repr=False)

    def entry(self, a: int, b: int) -> BEstimate:
        return BEstimate(float(self.value[a, b]), float(self.std_error[a, b]), self.method, dict(self.meta))


@dataclass(frozen=True)
class BDecomposition:
    sym: float
    antisym: float


def append_csv(path, estimates: Sequence[BEstimate], labels: Sequence[str] | None = None) -> None:
    """Append estimate rows to a CSV experiment log (header written once)."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["label", "value", "std_error", "method", "meta"])
        if new:
            writer.writeheader()
        for i, est in enumerate(estimates):
            writer.writerow({"label": labels[i] if labels else "", **est.row()})


def _summarize(per_member: np.ndarray, method: str, meta: dict) -> BMatrix:
    k = len(per_member)
    value = per_member.mean(axis=0)
    se = per_member.std(axis=0, ddof=1) / math.sqrt(k) if k > 1 else np.full(value.shape, np.inf)
    return BMatrix(value, se, method, meta, per_member)


# --- window estimator -------------------------------------------------------


def _window_members(spec, u, plan, n):
    grid = integration_grid(0.0, n, plan.dt)
    gap_grid = integration_grid(0.0, plan.gap, plan.dt)

    def work(idx):
        y = sample_members(spec, plan.seed, idx, plan.burn_in, plan.dt)
        total = np.zeros((len(idx), u.arity, u.arity))
        for o in range(plan.origins):
            if o:
                y, _, _ = _march(spec, u, y, gap_grid, len(gap_grid))
            y, acc, _ = _march(spec, u, y, grid, 0)
            total += acc.second / n
        return total / plan.origins

    return np.concatenate(run_members(plan, work))


def estimate_B_matrix_window(spec: FlowSpec, u: Observable, n: float, plan: SamplingPlan, min_n: float = 50.0) -> BMatrix:
    if not n > 0:
        raise ValueError("n must be positive")
    meta = {"n": n, **plan.meta()}
    if n < min_n:
        meta["warning"] = f"n={n:g} below configured minimum {min_n:g}"
        warnings.warn(meta["warning"])
    return _summarize(_window_members(spec, u, plan, n), "window", meta)


def estimate_B_window(spec: FlowSpec, v: Observable, w: Observable, n: float, plan: SamplingPlan, min_n: float = 50.0) -> BEstimate:
    """B(v, w) as the ensemble mean of S_n(v, w) / n."""
    _require_scalar(v, w)
    return estimate_B_matrix_window(spec, stack(v, w), n, plan, min_n).entry(0, 1)


def _require_scalar(*obs):
    for o in obs:
        if o.arity != 1:
            raise ValueError("scalar observables expected")
        if not o.centered:
            raise ValueError(f"observable {o.name} is not centered")


# --- correlation estimator --------------------------------------------------


def _lag_correlation(U: np.ndarray, n_origins: int, n_lags: int) -> np.ndarray:
    """C[j, :, a, b] = mean_{o < n_origins} U[o, :, a] U[o + j, :, b]."""
    K, N, m = U.shape
    size = 1 << int(math.ceil(math.log2(K + n_origins)))
    head = np.zeros((size, N, m))
    head[:n_origins] = U[:n_origins]
    fa = np.fft.rfft(head, axis=0)
    fb = np.fft.rfft(U, n=size, axis=0)
    # cross-correlation sum_o a[o] b[o + j] via conj(FFT a) * FFT b
    C = np.fft.irfft(np.conj(fa)[:, :, :, None] * fb[:, :, None, :], n=size, axis=0)
    return C[:n_lags] / n_origins


def estimate_B_matrix_correlation(
    spec: FlowSpec,
    u: Observable,
    t_max: float,
    plan: SamplingPlan,
    lag_step: float | None = None,
    span: float | None = None,
) -> BMatrix:
    """Trapezoid integral over [0, t_max] of the lagged cross-correlation.

    Each member records ``u`` every ``lag_step`` over ``span + t_max`` and
    averages over time origins in [0, span] (default ``origins * gap``).
    """
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    lag_step = plan.dt if lag_step is None else lag_step
    stride = max(1, int(round(lag_step / plan.dt)))
    lag_step = stride * plan.dt
    span = plan.origins * plan.gap if span is None else span
    n_lags = int(round(t_max / lag_step)) + 1
    n_origins = max(1, int(round(span / lag_step)))
    n_rec = n_origins + n_lags - 1

    def work(idx):
        y = sample_members(spec, plan.seed, idx, plan.burn_in, plan.dt)
        U = np.empty((n_rec, len(idx), u.arity))
        U[0] = u(y)
        for r in range(1, n_rec):
            for _ in range(stride):
                y = rk4_step(spec, y, plan.dt)
            if not np.all(np.isfinite(y)):
                raise IntegrationDiverged(r * lag_step)
            U[r] = u(y)
        C = _lag_correlation(U, n_origins, n_lags)
        integral = lag_step * (C.sum(axis=0) - 0.5 * (C[0] + C[-1]))
        return integral, C[-1]

    parts = run_members(plan, work)
    per_member = np.concatenate([p[0] for p in parts])
    tail = np.concatenate([p[1] for p in parts]).mean(axis=0)
    meta = {"t_max": t_max, "lag_step": lag_step, "span": span, "tail": np.abs(tail).tolist(), **plan.meta()}
    return _summarize(per_member, "correlation", meta)


def estimate_B_correlation(spec: FlowSpec, v: Observable, w: Observable, t_max: float, plan: SamplingPlan, **kw) -> BEstimate:
    """B(v, w) = int_0^t_max E[v w(phi_t)] dt (truncated)."""
    _require_scalar(v, w)
    est = estimate_B_matrix_correlation(spec, stack(v, w), t_max, plan, **kw)
    out = est.entry(0, 1)
    out.meta["tail"] = abs(float(est.meta["tail"][0][1]))
    return out


# --- suspension estimator ---------------------------------------------------


@dataclass(frozen=True)
class ReturnData:
    """Per-member, per-return quantities: roof r, induced u~ and S(u^a, u^b)."""

    roof: np.ndarray
    induced: np.ndarray
    iterated: np.ndarray


def collect_returns(
    spec: FlowSpec,
    section: SectionSpec,
    u: Observable,
    y0: np.ndarray,
    returns: int,
    dt: float,
    max_search: float = 1e3,
    tol: float = 1e-10,
) -> ReturnData:
    """Integrate a batch of chains and record ``returns`` full returns each.

    Accumulation starts at each chain's first crossing.  Crossing times are
    bisected on the RK4 step exactly as in :func:`poincare_returns`.
    """
    y = np.array(y0, dtype=float)
    N = len(y)
    roof = np.zeros((N, returns))
    induced = np.zeros((N, returns, u.arity))
    iterated = np.zeros((N, returns, u.arity, u.arity))
    count = np.zeros(N, dtype=int)
    started = np.zeros(N, dtype=bool)
    last = np.full(N, -np.inf)
    acc = LevelTwo.zeros((N,), u.arity)
    t = 0.0
    g = section.signed(y)
    u_left = u(y)
    since = np.zeros(N)
    while np.any(count < returns):
        y_new = rk4_step(spec, y, dt)
        if not np.all(np.isfinite(y_new)):
            raise IntegrationDiverged(t + dt)
        g_new = section.signed(y_new)
        u_right = u(y_new)
        first, second = acc.first.copy(), acc.second.copy()
        acc.update(u_left, u_right, dt)
        hits = np.nonzero((g < 0.0) & (g_new >= 0.0))[0]
        for m in hits:
            tc, yc = _crossing_time(spec, section, y[m], t, dt, tol)
            if started[m] and tc - last[m] < section.min_return_time:
                continue
            uc = u(yc)
            tau = tc - t
            part = LevelTwo(first[m].copy(), second[m].copy())
            part.update(u_left[m], uc, tau)
            if started[m] and count[m] < returns:
                k = count[m]
                roof[m, k] = tc - last[m]
                induced[m, k] = part.first
                iterated[m, k] = part.second
                count[m] += 1
            started[m] = True
            last[m] = tc
            since[m] = tc
            part = LevelTwo(np.zeros(u.arity), np.zeros((u.arity, u.arity)))
            part.update(uc, u_right[m], dt - tau)
            acc.first[m] = part.first
            acc.second[m] = part.second
        y, g, u_left = y_new, g_new, u_right
        t += dt
        if np.any(t - since > max_search):
            from .fastflow import NoCrossingFound

            raise NoCrossingFound(f"a chain saw no crossing for {max_search} time units")
    return ReturnData(roof, induced, iterated)


def suspension_from_returns(data: ReturnData, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-member B matrices and the lag-``n_max`` tail term."""
    N, K, m = data.induced.shape
    if K <= n_max:
        raise ValueError("need more returns than n_max")
    rbar = data.roof.mean(axis=1)
    lag = np.zeros((N, m, m))
    tail = None
    for n in range(1, n_max + 1):
        term = np.einsum("nka,nkb->nab", data.induced[:, : K - n], data.induced[:, n:]) / (K - n)
        lag += term
        tail = term
    local = data.iterated.mean(axis=1)
    B = (lag + local) / rbar[:, None, None]
    return B, tail / rbar[:, None, None]


def estimate_B_matrix_suspension(
    spec: FlowSpec,
    section: SectionSpec,
    u: Observable,
    n_max: int,
    plan: SamplingPlan,
    returns: int = 1000,
    tail_threshold: float = 0.05,
) -> BMatrix:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")

    def work(idx):
        y0 = sample_members(spec, plan.seed, idx, plan.burn_in, plan.dt)
        data = collect_returns(spec, section, u, y0, returns, plan.dt)
        B, tail = suspension_from_returns(data, n_max)
        return B, tail, data.roof.mean(axis=1)

    parts = run_members(plan, work)
    per_member = np.concatenate([p[0] for p in parts])
    tail = np.concatenate([p[1] for p in parts]).mean(axis=0)
    rbar = float(np.concatenate([p[2] for p in parts]).mean())
    scale = np.maximum(np.abs(per_member.mean(axis=0)), 1e-300)
    meta = {"n_max": n_max, "returns": returns, "rbar": rbar, "tail": np.abs(tail).tolist(), **plan.meta()}
    if np.any(np.abs(tail) > tail_threshold * scale):
        meta["warning"] = "lag-sum tail at n_max exceeds threshold"
    return _summarize(per_member, "suspension", meta)


def estimate_B_suspension(
    spec: FlowSpec, section: SectionSpec, v: Observable, w: Observable, n_max: int, plan: SamplingPlan, **kw
) -> BEstimate:
    """B(v, w) from first returns to a Poincare section."""
    _require_scalar(v, w)
    est = estimate_B_matrix_suspension(spec, section, stack(v, w), n_max, plan, **kw)
    out = est.entry(0, 1)
    out.meta["tail"] = abs(float(est.meta["tail"][0][1]))
    return out


def decompose(b_vw: BEstimate, b_wv: BEstimate) -> BDecomposition:
    """Symmetric and antisymmetric parts of B on the pair (v, w)."""
    return BDecomposition(0.5 * (b_vw.value + b_wv.value), 0.5 * (b_vw.value - b_wv.value))


def return_integrals(sample: ReturnSample, v: Observable, w: Observable) -> tuple[float, float, float, float]:
    """(v~, w~, S(v,w), S(w,v)) along one return, trapezoid on its grid."""
    u = stack(v, w)
    vals = u(sample.intra_orbit.points)
    acc = LevelTwo.zeros((), 2)
    for i in range(1, len(vals)):
        acc.update(vals[i - 1], vals[i], sample.intra_orbit.grid[i] - sample.intra_orbit.grid[i - 1])
    return float(acc.first[0]), float(acc.first[1]), float(acc.second[0, 1]), float(acc.second[1, 0])


def signed_area(sample: ReturnSample, v: Observable, w: Observable) -> float:
    """(S(v,w) - S(w,v)) / 2 along one return.

    This is the signed area enclosed by the planar path
    t -> (int_0^t v, int_0^t w) over the return, closed by its secant.
    """
    _, _, s_vw, s_wv = return_integrals(sample, v, w)
    return 0.5 * (s_vw - s_wv)


def loop_area(points: np.ndarray) -> float:
    """Signed area of a sampled planar path closed by its secant."""
    p = np.asarray(points, dtype=float)
    p = p - p[0]
    d = np.diff(p, axis=0)
    mids = 0.5 * (p[:-1] + p[1:])
    return float(0.5 * np.sum(mids[:, 0] * d[:, 1] - mids[:, 1] * d[:, 0]))


# --- coefficient fields -------------------------------------------------------


def matrix_sqrt_psd(S, tol_psd: float | None = None) -> np.ndarray:
    """Symmetric PSD square root via the symmetric eigendecomposition.

    Eigenvalues in [-tol_psd, 0) are clipped to zero; anything below
    -tol_psd raises.  The default tolerance is 1e-6 times the largest
    eigenvalue magnitude, but at least ``PSD_ABS_FLOOR``.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("square matrix expected")
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-10):
        raise ValueError("matrix is not symmetric")
    lam, Q = np.linalg.eigh(0.5 * (S + S.T))
    if tol_psd is None:
        tol_psd = max(1e-6 * float(np.max(np.abs(lam))), PSD_ABS_FLOOR)
    if lam.min() < -tol_psd:
        raise NotPositiveSemidefinite(f"eigenvalue {lam.min():.3g} below -{tol_psd:.3g}")
    root = np.sqrt(np.clip(lam, 0.0, None))
    R = (Q * root) @ Q.T
    return 0.5 * (R + R.T)


@dataclass
class CoeffField:
    """Drift and diffusion tabulated on a tensor grid.

    ``axes`` are the 1-D coordinate axes; arrays have shape
    ``axis_lengths + (d,)`` and ``axis_lengths + (d, d)``.  ``outside`` is
    ``"clamp"`` (nearest grid value) or ``"error"``.
    """

    axes: tuple
    drift: np.ndarray
    diffusion_sq: np.ndarray
    diffusion: np.ndarray | None = None
    interpolation: str = "multilinear"
    outside: str = "clamp"
    tol_psd: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.drift = np.asarray(self.drift, dtype=float)
        self.diffusion_sq = np.asarray(self.diffusion_sq, dtype=float)
        if self.interpolation not in ("nearest", "multilinear"):
            raise ValueError("interpolation must be 'nearest' or 'multilinear'")
        if self.outside not in ("clamp", "error"):
            raise ValueError("outside must be 'clamp' or 'error'")
        shape = tuple(len(a) for a in self.axes)
        d = len(self.axes)
        if self.drift.shape != shape + (d,) or self.diffusion_sq.shape != shape + (d, d):
            raise ValueError("coefficient arrays do not match the grid")
        if self.diffusion is None:
            self.diffusion = np.empty_like(self.diffusion_sq)
            for idx in np.ndindex(*shape):
                self.diffusion[idx] = matrix_sqrt_psd(self.diffusion_sq[idx], self.tol_psd)
        self._interp = None

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @classmethod
    def tabulate(cls, axes, drift_fn, diffusion_sq_fn, **kw) -> "CoeffField":
        """Tabulate callables ``x -> (d,)`` and ``x -> (d, d)`` on the grid."""
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        shape = tuple(len(a) for a in axes)
        d = len(axes)
        drift = np.empty(shape + (d,))
        dsq = np.empty(shape + (d, d))
        for idx in np.ndindex(*shape):
            x = np.array([a[i] for a, i in zip(axes, idx)])
            drift[idx] = drift_fn(x)
            dsq[idx] = diffusion_sq_fn(x)
        return cls(axes, drift, dsq, **kw)

    def _interpolators(self):
        if self._interp is None:
            method = "linear" if self.interpolation == "multilinear" else "nearest"
            axes, drift, dsq, dif = [], self.drift, self.diffusion_sq, self.diffusion
            for k, a in enumerate(self.axes):
                if len(a) == 1:
                    # constant along a singleton axis
                    a = np.array([a[0] - 1.0, a[0] + 1.0])
                    drift = np.concatenate([drift, drift], axis=k)
                    dsq = np.concatenate([dsq, dsq], axis=k)
                    dif = np.concatenate([dif, dif], axis=k)
                axes.append(a)
            self._interp = tuple(
                RegularGridInterpolator(tuple(axes), arr, method=method, bounds_error=False, fill_value=None)
                for arr in (drift, dif)
            )
        return self._interp

    def _prepare(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        if self.outside == "error":
            if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
                raise ValueError("point outside the coefficient grid")
            return x
        return np.clip(x, lo, hi)

    def drift_at(self, x) -> np.ndarray:
        return self._interpolators()[0](self._prepare(x))

    def diffusion_at(self, x) -> np.ndarray:
        return self._interpolators()[1](self._prepare(x))

    def check(self, tol_sym: float = 1e-12, tol_rec: float = 1e-8) -> dict:
        """Symmetry, PSD and reconstruction checks at every grid point."""
        dsq = self.diffusion_sq.reshape(-1, self.d, self.d)
        dif = self.diffusion.reshape(-1, self.d, self.d)
        sym = float(np.max(np.abs(dsq - np.swapaxes(dsq, 1, 2)))) if len(dsq) else 0.0
        lam = np.linalg.eigvalsh(0.5 * (dsq + np.swapaxes(dsq, 1, 2)))
        tol = self.tol_psd if self.tol_psd is not None else np.maximum(1e-6 * np.max(np.abs(lam), axis=1), PSD_ABS_FLOOR)
        min_eig = lam.min(axis=1)
        psd_ok = bool(np.all(min_eig >= -np.broadcast_to(tol, min_eig.shape)))
        clipped = []
        for S in dsq:
            w, Q = np.linalg.eigh(0.5 * (S + S.T))
            clipped.append((Q * np.clip(w, 0, None)) @ Q.T)
        rec = float(np.max(np.abs(dif @ np.swapaxes(dif, 1, 2) - np.array(clipped))))
        return {
            "symmetry": sym,
            "symmetric": sym <= tol_sym,
            "min_eigenvalue": float(min_eig.min()),
            "psd": psd_ok,
            "reconstruction": rec,
            "reconstructs": rec <= tol_rec,
            "pass": sym <= tol_sym and psd_ok and rec <= tol_rec,
        }

    def to_json(self, path) -> None:
        doc = {
            "format": "coeff-field",
            "version": COEFF_FORMAT_VERSION,
            "axes": [a.tolist() for a in self.axes],
            "drift": self.drift.tolist(),
            "diffusion_sq": self.diffusion_sq.tolist(),
            "diffusion": self.diffusion.tolist(),
            "interpolation": self.interpolation,
            "outside": self.outside,
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, default=float)

    @classmethod
    def from_json(cls, path) -> "CoeffField":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "coeff-field" or doc.get("version") != COEFF_FORMAT_VERSION:
            raise ValueError("not a supported coefficient-field document")
        return cls(
            tuple(np.array(a) for a in doc["axes"]),
            np.array(doc["drift"]),
            np.array(doc["diffusion_sq"]),
            np.array(doc["diffusion"]),
            doc["interpolation"],
            doc["outside"],
            meta=doc.get("meta", {}),
        )


class _AtX:
    """y -> fn(x, y) flattened, as an observable callable."""

    def __init__(self, fn, x, size):
        self.fn, self.x, self.size = fn, x, size

    def __call__(self, y):
        out = np.asarray(self.fn(self.x, y), dtype=float)
        return out.reshape(out.shape[: y.ndim - 1] + (self.size,))


def _estimate(spec, u, estimator, params, plan) -> BMatrix:
    params = dict(params or {})
    if estimator == "window":
        return estimate_B_matrix_window(spec, u, params.pop("n", 200.0), plan, **params)
    if estimator == "correlation":
        return estimate_B_matrix_correlation(spec, u, params.pop("t_max", 50.0), plan, **params)
    if estimator == "suspension":
        section = params.pop("section", None) or SectionSpec.lorenz_standard(spec)
        return estimate_B_matrix_suspension(spec, section, u, params.pop("n_max", 20), plan, **params)
    raise ConfigurationError(f"unknown estimator {estimator!r}")


def _grid_points(axes):
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    shape = mesh[0].shape
    return np.stack([m.ravel() for m in mesh], axis=-1), shape


def _mean_drift(spec, system, points, plan, calibration):
    if calibration is None:
        calibration = sample_members(spec, plan.seed + 7919, np.arange(plan.members), plan.burn_in, plan.dt)
    return np.stack([np.asarray(system.a(x, calibration)).mean(axis=0) for x in points])


def drift_field(
    spec: FlowSpec,
    system,
    axes,
    estimator: str = "window",
    params: dict | None = None,
    plan: SamplingPlan = SamplingPlan(),
    reduce_product: bool = True,
    calibration: np.ndarray | None = None,
    product_estimate: BMatrix | None = None,
):
    """Tabulate a~^i(x) = E_mu a^i(x,.) + sum_k B(b^k(x,.), d_k b^i(x,.)).

    ``system`` supplies ``d``, ``a(x, y)``, ``b(x, y)`` and the analytic
    ``db(x, y)[..., i, k]`` = d b^i / d x_k.  Product systems
    (``b = h(x) v(y)``) reuse one estimate of B(v^a, v^c) for every grid
    point unless ``reduce_product`` is off; ``product_estimate`` supplies
    that matrix precomputed.  Returns ``(drift, B-matrices)``
    with drift shaped ``grid_shape + (d,)``.
    """
    if getattr(system, "db", None) is None:
        raise ConfigurationError("drift_field needs the analytic x-derivative of b")
    points, shape = _grid_points(axes)
    d = system.d
    mean_a = _mean_drift(spec, system, points, plan, calibration)
    corr = np.zeros((len(points), d))
    corr_se = np.zeros((len(points), d))
    estimates = []
    if reduce_product and getattr(system, "form", "general") == "product":
        Bv = product_estimate or _estimate(spec, system.v, estimator, params, plan)
        estimates.append(Bv)
        for p, x in enumerate(points):
            h = system.h(x)  # (d, e)
            dh = system.dh(x)  # (d, e, d): dh[i, c, k] = d h^i_c / d x_k
            corr[p] = np.einsum("ka,ick,ac->i", h, dh, Bv.value)
            corr_se[p] = np.sqrt(np.einsum("ka,ick,ac->i", h**2, dh**2, Bv.std_error**2))
    else:
        for p, x in enumerate(points):
            u = Observable(_AtX(system.b, x, d), d, centered=True, name=f"b(x={x.tolist()})")
            du = Observable(_AtX(system.db, x, d * d), d * d, centered=True, name="db")
            B = _estimate(spec, stack(u, du), estimator, params, plan)
            estimates.append(B)
            for i in range(d):
                cols = [d + i * d + k for k in range(d)]
                corr[p, i] = sum(B.value[k, c] for k, c in enumerate(cols))
                corr_se[p, i] = math.sqrt(sum(B.std_error[k, c] ** 2 for k, c in enumerate(cols)))
    drift = (mean_a + corr).reshape(shape + (d,))
    return drift, corr_se.reshape(shape + (d,)), estimates


def diffusion_field(
    spec: FlowSpec,
    system,
    axes,
    estimator: str = "window",
    params: dict | None = None,
    plan: SamplingPlan = SamplingPlan(),
    reduce_product: bool = True,
    product_estimate: BMatrix | None = None,
):
    """Tabulate (sigma sigma^T)^{ij}(x) = B(b^i, b^j) + B(b^j, b^i).

    Symmetry is exact by construction.  Returns ``(diffusion_sq, se, estimates)``.
    """
    points, shape = _grid_points(axes)
    d = system.d
    out = np.zeros((len(points), d, d))
    se = np.zeros((len(points), d, d))
    estimates = []
    if reduce_product and getattr(system, "form", "general") == "product":
        Bv = product_estimate or _estimate(spec, system.v, estimator, params, plan)
        estimates.append(Bv)
        sym = Bv.value + Bv.value.T
        sym_se = np.sqrt(Bv.std_error**2 + Bv.std_error.T**2)
        for p, x in enumerate(points):
            h = system.h(x)
            out[p] = h @ sym @ h.T
            se[p] = np.sqrt((h**2) @ sym_se**2 @ (h**2).T)
    else:
        for p, x in enumerate(points):
            u = Observable(_AtX(system.b, x, d), d, centered=True, name=f"b(x={x.tolist()})")
            B = _estimate(spec, u, estimator, params, plan)
            estimates.append(B)
            out[p] = B.value + B.value.T
            se[p] = np.sqrt(B.std_error**2 + B.std_error.T**2)
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out.reshape(shape + (d, d)), se.reshape(shape + (d, d)), estimates


def estimate_coefficients(
    spec: FlowSpec,
    system,
    axes,
    estimator: str = "window",
    params: dict | None = None,
    plan: SamplingPlan = SamplingPlan(),
    tol_psd: float | None = None,
    interpolation: str = "multilinear",
    outside: str = "clamp",
) -> CoeffField:
    """Drift, diffusion and its PSD square root on a tensor grid."""
    shared = None
    if getattr(system, "form", "general") == "product":
        shared = _estimate(spec, system.v, estimator, params, plan)
    drift, _, _ = drift_field(spec, system, axes, estimator, params, plan, product_estimate=shared)
    dsq, _, _ = diffusion_field(spec, system, axes, estimator, params, plan, product_estimate=shared)
    meta = {"estimator": estimator, "params": {k: v for k, v in (params or {}).items() if k != "section"},
            "plan": plan.meta()}
    return CoeffField(tuple(axes), drift, dsq, None, interpolation, outside, tol_psd, meta)
