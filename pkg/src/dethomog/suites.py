"""Invariant suites shared by the self-test command and the acceptance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fastflow import FlowSpec, rk4_step, sample_members
from .homog import CoeffField, SamplingPlan, estimate_B_matrix_window, loop_area, matrix_sqrt_psd
from .observables import combine, coordinate, iterated_integral, birkhoff_integral, stack
from .roughpath import HolderPath, VectorFieldPair, chen_defect, lift_smooth, rough_integral, solve_rde


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e})"


@dataclass(frozen=True)
class SmoothDriver:
    """Sum of three sinusoids per component, shifted to start at 0."""

    amp: np.ndarray
    omega: np.ndarray
    phase: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, e: int = 2) -> "SmoothDriver":
        return cls(rng.normal(size=(e, 3)), rng.uniform(1.0, 6.0, size=(e, 3)), rng.uniform(0.0, 2 * np.pi, size=(e, 3)))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None, None]
        return (self.amp * np.sin(self.omega * t + self.phase)).sum(-1) - (self.amp * np.sin(self.phase)).sum(-1)

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None, None]
        return (self.amp * self.omega * np.cos(self.omega * t + self.phase)).sum(-1)


def random_product_fields(rng: np.random.Generator, d: int = 2, e: int = 2) -> VectorFieldPair:
    """F(x) = sin(C x) (one V-direction), H(x) = B + A x."""
    A = 0.3 * rng.normal(size=(d, e, d))
    B = 0.5 * rng.normal(size=(d, e))
    C = rng.normal(size=(d, d))

    def F(x):
        return np.sin(x @ C.T)[..., None]

    def dF(x):
        return (np.cos(x @ C.T)[..., :, None] * C)[..., :, None, :]

    def H(x):
        return B + np.einsum("iak,...k->...ia", A, x)

    def dH(x):
        return np.broadcast_to(A, np.shape(x)[:-1] + A.shape)

    return VectorFieldPair(F, H, dH, dF)


def rk4_reference(fields: VectorFieldPair, driver: SmoothDriver, xi, T: float, h: float, stride: int) -> np.ndarray:
    """Classical RK4 for x' = F(x) + H(x) W'(t), sampled every ``stride`` steps."""
    def rhs(t, x):
        return fields.F(x)[..., 0] + fields.H(x) @ driver.derivative(t)

    x = np.array(xi, dtype=float)
    out = [x.copy()]
    n = int(round(T / h))
    for k in range(n):
        t = k * h
        k1 = rhs(t, x)
        k2 = rhs(t + h / 2, x + h / 2 * k1)
        k3 = rhs(t + h / 2, x + h / 2 * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if (k + 1) % stride == 0:
            out.append(x.copy())
    return np.array(out)


def rde_vs_ode(seed: int = 0, trials: int = 10, dt: float = 1e-4, tol: float = 1e-5, T: float = 1.0) -> Check:
    rng = np.random.default_rng(seed)
    grid = dt * np.arange(int(round(T / dt)) + 1)
    errs = []
    for _ in range(trials):
        drv = SmoothDriver.random(rng)
        fields = random_product_fields(rng)
        xi = rng.normal(size=2)
        lifted = lift_smooth(HolderPath(grid, drv(grid)))
        X = solve_rde(fields, HolderPath(grid, grid[:, None]), lifted, xi).values
        ref = rk4_reference(fields, drv, xi, T, dt / 4, 4)
        errs.append(float(np.max(np.abs(X - ref))))
    worst = max(errs)
    return Check("rde_vs_ode", worst <= tol, worst, tol, {"errors": errs, "dt": dt})


def chen(seed: int = 0, inject: bool = False, tol: float = 1e-10) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        grid = np.linspace(0.0, 1.0, 2001)
        drv = lift_smooth(HolderPath(grid, SmoothDriver.random(rng, 3)(grid)))
        if inject:
            WW = drv.WW.copy()
            WW[len(WW) // 2] += 1e-3
            drv = type(drv)(drv.W, WW, drv.steps, drv.gamma)
        worst = max(worst, chen_defect(drv))
    return Check("chen", worst <= tol, worst, tol, {"injected": inject})


def product_rule(tol: float = 1e-8) -> Check:
    """S(v,w) + S(w,v) = v~ w~ on Lorenz orbit segments."""
    spec = FlowSpec.lorenz()
    y0 = sample_members(spec, 0, np.arange(4), 20.0, 1e-2)
    v, w = coordinate(0, 0.0), coordinate(2, 23.5)
    u = stack(v, w)
    S = iterated_integral(spec, u, u, y0, 0.0, 5.0, 1e-2)
    vt = birkhoff_integral(spec, u, y0, 0.0, 5.0, 1e-2)
    lhs = S[:, 0, 1] + S[:, 1, 0]
    rhs = vt[:, 0] * vt[:, 1]
    err = float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))))
    return Check("product_rule", err <= tol, err, tol)


def circle_area(points: int = 100001, tol: float = 1e-6) -> Check:
    t = np.linspace(0.0, 2 * np.pi, points)
    area = loop_area(np.stack([np.cos(t), np.sin(t)], axis=-1))
    err = abs(area - np.pi)
    return Check("signed_area_circle", err <= tol, err, tol, {"area": area})


def chain_rule(seed: int = 0, tol: float = 1e-6) -> Check:
    """f(W(T)) - f(W(0)) as a compensated rough integral of Df(W)."""
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, 20001)
    W = HolderPath(grid, SmoothDriver.random(rng)(grid))
    drv = lift_smooth(W)

    def f(w):
        return np.sin(w[..., 0]) * np.cos(w[..., 1]) + 0.5 * w[..., 0] ** 2

    def grad(w):
        return np.array([[np.cos(w[0]) * np.cos(w[1]) + w[0], -np.sin(w[0]) * np.sin(w[1])]])

    def hess(w):
        s0, c0, s1, c1 = np.sin(w[0]), np.cos(w[0]), np.sin(w[1]), np.cos(w[1])
        return np.array([[[-s0 * c1 + 1.0, -c0 * s1], [-c0 * s1, -s0 * c1]]])

    Xp = np.broadcast_to(np.eye(2), (len(grid), 2, 2))
    I = rough_integral(grad, hess, drv.W, Xp, drv).values[-1, 0]
    err = abs(I - (f(drv.W.values[-1]) - f(drv.W.values[0])))
    return Check("chain_rule", err <= tol, float(err), tol)


def integrator_order(lo: float = 12.0, hi: float = 20.0) -> Check:
    """RK4 on the rotation: error ratio under dt halving is about 16."""
    spec = FlowSpec.rotation()
    errs = []
    for dt in (0.2, 0.1):
        y = np.array([1.0, 0.0])
        n = int(round(2 * np.pi / dt))
        h = 2 * np.pi / n
        for _ in range(n):
            y = rk4_step(spec, y, h)
        errs.append(float(np.max(np.abs(y - [1.0, 0.0]))))
    ratio = errs[0] / errs[1]
    return Check("integrator_order", lo <= ratio <= hi, ratio, 16.0, {"errors": errs})


def bilinearity(tol: float = 1e-10) -> Check:
    """Window estimates are exactly linear in the second slot on shared orbits."""
    spec = FlowSpec.lorenz()
    v, w1, w2 = coordinate(0, 0.0), coordinate(1, 0.0), coordinate(2, 23.5)
    plan = SamplingPlan(members=8, seed=3, burn_in=10.0, dt=1e-2, chunk=8)
    B = estimate_B_matrix_window(spec, stack(v, w1, w2, combine([2.0, -0.5], [w1, w2])), 20.0, plan, min_n=0.0)
    lhs = B.value[0, 3]
    rhs = 2.0 * B.value[0, 1] - 0.5 * B.value[0, 2]
    err = abs(lhs - rhs) / max(1.0, abs(rhs))
    return Check("bilinearity", err <= tol, float(err), tol)


def psd(seed: int = 0, inject: bool = False) -> Check:
    """Square roots of random PSD matrices rebuild their input; the fixture
    with a clearly negative eigenvalue must be rejected."""
    rng = np.random.default_rng(seed)
    mats = []
    for d in (1, 2, 3, 4):
        A = rng.normal(size=(d, d))
        mats.append(A @ A.T)
    if inject:
        mats.append(np.diag([1.0, -0.5]))
    worst, failures = 0.0, []
    for S in mats:
        try:
            R = matrix_sqrt_psd(S)
        except ValueError as exc:
            failures.append(str(exc))
            continue
        worst = max(worst, float(np.max(np.abs(R @ R - S))))
    field_ok = CoeffField.tabulate([np.linspace(-1, 1, 3)], lambda x: -x, lambda x: np.array([[1.0 + x[0] ** 2]])).check()["pass"]
    ok = not failures and worst <= 1e-8 and field_ok
    return Check("psd", ok, worst, 1e-8, {"failures": failures})


def run_all(inject: str | None = None) -> list[Check]:
    return [
        chen(inject=inject == "chen"),
        psd(inject=inject == "psd"),
        product_rule(),
        circle_area(),
        chain_rule(),
        integrator_order(),
        bilinearity(),
    ]
