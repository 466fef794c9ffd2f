"""Statistical checks: two-sample distances, covariance identity, moment
scaling and Hölder-functional stability of rough drivers."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .fastflow import FlowSpec, sample_members
from .homog import BMatrix, SamplingPlan, run_members
from .observables import Observable, _march, integration_grid, stack
from .roughpath import RoughDriver, _pairwise_sup


@dataclass(frozen=True)
class TwoSampleReport:
    statistic: str
    value: float
    threshold: float
    passed: bool
    sizes: tuple
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


@dataclass(frozen=True)
class ScalingReport:
    exponent_fit: float
    stderr: float
    target: float
    band: float
    passed: bool
    meta: dict = field(default_factory=dict)


def _samples(s) -> np.ndarray:
    s = np.asarray(s, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empty sample")
    return s


def ks_distance(s1, s2, threshold: float = 0.05) -> TwoSampleReport:
    """Two-sample Kolmogorov-Smirnov statistic sup |F1 - F2|."""
    a, b = np.sort(_samples(s1)), np.sort(_samples(s2))
    pts = np.concatenate([a, b])
    gap = np.abs(np.searchsorted(a, pts, side="right") / a.size - np.searchsorted(b, pts, side="right") / b.size)
    value = float(gap.max())
    return TwoSampleReport("ks", value, threshold, value <= threshold, (a.size, b.size))


def energy_distance(s1, s2, threshold: float) -> TwoSampleReport:
    value = float(sps.energy_distance(_samples(s1), _samples(s2)))
    return TwoSampleReport("energy", value, threshold, value <= threshold, (np.size(s1), np.size(s2)))


def moment_distance(s1, s2, k: int, threshold: float) -> TwoSampleReport:
    """|E s1^k - E s2^k|."""
    a, b = _samples(s1), _samples(s2)
    value = float(abs(np.mean(a**k) - np.mean(b**k)))
    return TwoSampleReport(f"moment_{k}", value, threshold, value <= threshold, (a.size, b.size))


def path_functionals(paths: np.ndarray) -> dict:
    """Running maximum and time average of scalar paths ``(N, K)``."""
    paths = np.asarray(paths, dtype=float)
    return {"running_max": paths.max(axis=1), "time_average": paths.mean(axis=1)}


def trend_verdict(values: Sequence[float], slack: float = 0.01, final_threshold: float | None = None) -> dict:
    """Non-increasing up to ``slack`` along the sequence, and final below threshold."""
    values = [float(v) for v in values]
    steps = [values[i + 1] - values[i] for i in range(len(values) - 1)]
    monotone = all(s <= slack for s in steps)
    final_ok = final_threshold is None or values[-1] <= final_threshold
    return {"values": values, "monotone": monotone, "final_ok": final_ok,
            "pass": monotone and final_ok, "slack": slack, "final_threshold": final_threshold}


@dataclass(frozen=True)
class CovarianceReport:
    empirical: np.ndarray
    target: np.ndarray
    z: np.ndarray
    passed: bool
    meta: dict = field(default_factory=dict)


def covariance_check(W1: np.ndarray, B: BMatrix, z_max: float = 3.0) -> CovarianceReport:
    """Compare Cov W(1) with B + B^T entrywise.

    ``W1`` is ``(N, m)``; the sample covariance uses the known zero mean, and
    its standard error comes from the spread of the products W^i W^j.
    """
    W1 = np.asarray(W1, dtype=float)
    if W1.ndim == 1:
        W1 = W1[:, None]
    N, m = W1.shape
    if B.value.shape != (m, m):
        raise ValueError("dimension mismatch between samples and B")
    prods = W1[:, :, None] * W1[:, None, :]
    emp = prods.mean(axis=0)
    emp_se = prods.std(axis=0, ddof=1) / math.sqrt(N)
    target = B.value + B.value.T
    target_se = np.sqrt(B.std_error**2 + B.std_error.T**2)
    scale = np.sqrt(emp_se**2 + target_se**2)
    diff = emp - target
    z = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), np.where(diff == 0, 0.0, np.inf))
    return CovarianceReport(emp, target, z, bool(np.all(np.abs(z) <= z_max)), {"members": N, "z_max": z_max})


def fit_scaling(t, norms, target: float, band: float) -> ScalingReport:
    """Least-squares slope of log norms against log t."""
    t = np.asarray(t, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if len(t) < 3 or np.any(t <= 0) or np.any(norms <= 0):
        raise ValueError("need at least three positive points")
    if np.log10(t.max() / t.min()) < 1.5:
        raise ValueError("t grid must span at least 1.5 decades")
    fit = sps.linregress(np.log(t), np.log(norms))
    return ScalingReport(float(fit.slope), float(fit.stderr), target, band,
                         abs(fit.slope - target) <= band, {"t": t.tolist(), "norms": norms.tolist()})


def moment_scaling(
    spec: FlowSpec,
    v: Observable,
    w: Observable,
    t_grid,
    plan: SamplingPlan,
    moments: tuple[int, int] = (4, 2),
    bands: tuple[float, float] = (0.1, 0.15),
) -> tuple[ScalingReport, ScalingReport]:
    """Slopes of log ||v_t||_{2p} and log ||S_t(v, w)||_p against log t.

    The ensemble is ``plan.members`` chains started from the invariant
    sample; each chain is integrated once and recorded at every ``t``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    u = stack(v, w)
    grid = integration_grid(0.0, float(t_grid[-1]), plan.dt, t_grid)
    idx = np.searchsorted(grid, t_grid - 1e-12)

    def work(ids):
        y = sample_members(spec, plan.seed, ids, plan.burn_in, plan.dt)
        _, _, snaps = _march(spec, u, y, grid, 0, record_at=idx)
        vt = np.stack([f[..., 0] for f, _ in snaps], axis=1)
        St = np.stack([s[..., 0, 1] for _, s in snaps], axis=1)
        return vt, St

    parts = run_members(plan, work)
    vt = np.concatenate([p[0] for p in parts])
    St = np.concatenate([p[1] for p in parts])
    q, p = moments
    nv = np.mean(np.abs(vt) ** q, axis=0) ** (1.0 / q)
    ns = np.mean(np.abs(St) ** p, axis=0) ** (1.0 / p)
    return fit_scaling(t_grid, nv, 0.5, bands[0]), fit_scaling(t_grid, ns, 1.0, bands[1])


def holder_functional(driver: RoughDriver, gamma: float) -> float:
    """||W||_gamma + ||WW||_{2 gamma}^{1/2}, homogeneous of degree one."""
    w, P = driver.W.values, driver.WW
    grid = driver.grid

    def first(i, js):
        return np.linalg.norm(w[js] - w[i], axis=-1)

    def second(i, js):
        inc = P[js] - P[i] - w[i][None, :, None] * (w[js] - w[i])[:, None, :]
        return np.linalg.norm(inc.reshape(len(js), -1), axis=-1)

    return _pairwise_sup(grid, first, gamma) + math.sqrt(_pairwise_sup(grid, second, 2.0 * gamma))


@dataclass(frozen=True)
class HolderTailReport:
    quantiles: dict
    spread: float
    growth: float
    passed: bool
    meta: dict = field(default_factory=dict)


def holder_tail_check(
    drivers: Mapping[float, Sequence[RoughDriver]],
    gamma: float,
    quantile: float = 0.95,
    max_spread: float = 0.5,
    slack: float = 0.25,
) -> HolderTailReport:
    """Upper quantiles of the Hölder functional must not grow as eps shrinks.

    ``spread`` is max/min - 1 over the eps values; ``growth`` the largest
    relative increase from one eps to the next smaller one.
    """
    if not (0 < gamma < 0.5):
        raise ValueError("gamma must lie in (0, 1/2)")
    keys = sorted(drivers, reverse=True)
    q = {float(e): float(np.quantile([holder_functional(d, gamma) for d in drivers[e]], quantile)) for e in keys}
    vals = [q[float(e)] for e in keys]
    spread = max(vals) / min(vals) - 1.0 if min(vals) > 0 else math.inf
    growth = max([vals[i + 1] / vals[i] - 1.0 for i in range(len(vals) - 1)] or [0.0])
    return HolderTailReport(q, spread, growth, spread < max_spread and growth <= slack,
                            {"gamma": gamma, "quantile": quantile, "max_spread": max_spread})
