import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dethomog.roughpath import (
    ExponentConditionError,
    GridMismatch,
    HolderPath,
    RDEBlowUp,
    RoughDriver,
    VectorFieldPair,
    chen_defect,
    holder_seminorm,
    lift_smooth,
    rough_integral,
    rough_metric,
    solve_rde,
    young_integral,
)

GRID = np.linspace(0.0, 1.0, 201)


def linear_fields(a: float, c: float):
    """dX = a X dV + c X dW in one dimension."""
    return VectorFieldPair(
        F=lambda x: a * np.asarray(x)[..., None],
        H=lambda x: c * np.asarray(x)[..., None],
        dH=lambda x: np.full(np.shape(x) + (1, 1), c),
        dF=lambda x: np.full(np.shape(x) + (1, 1), a),
    )


def test_holder_path_validation():
    p = HolderPath(GRID, np.sin(GRID))
    assert p.values.shape == (201, 1) and p.dim == 1 and p.anchored
    with pytest.raises(ValueError):
        HolderPath(GRID[::-1], GRID)
    with pytest.raises(GridMismatch):
        HolderPath(GRID, GRID[:-1])
    with pytest.raises(ValueError):
        HolderPath(GRID, np.full(201, np.nan))


def test_path_algebra():
    p = HolderPath(GRID, 1.0 + GRID)
    assert not p.anchored
    assert p.rebased().anchored
    np.testing.assert_allclose((p + p).values, 2 * p.values)
    np.testing.assert_allclose(p.scaled(3.0).values, 3 * p.values)


@pytest.mark.parametrize("gamma", [0.5, 0.4, 1.0])
def test_holder_seminorm_of_linear_path(gamma):
    p = HolderPath(GRID, -2.5 * GRID)
    assert holder_seminorm(p, gamma) == pytest.approx(2.5)


def test_holder_seminorm_of_sqrt_path():
    # sqrt(t) is exactly 1/2-Holder with constant 1 (attained at s = 0)
    p = HolderPath(GRID, np.sqrt(GRID))
    assert holder_seminorm(p, 0.5) == pytest.approx(1.0)


def test_lift_of_linear_path_is_exact():
    a = np.array([1.0, -2.0])
    d = lift_smooth(HolderPath(GRID, GRID[:, None] * a))
    expected = 0.5 * (GRID**2)[:, None, None] * np.outer(a, a)
    np.testing.assert_allclose(d.WW, expected, rtol=0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (50, 3), elements=st.floats(-10, 10)))
def test_lift_is_geometric_and_chen_consistent(values):
    grid = np.linspace(0.0, 2.0, 50)
    d = lift_smooth(HolderPath(grid, values))
    w = d.W.values
    sym = d.WW + np.swapaxes(d.WW, 1, 2)
    np.testing.assert_allclose(sym, w[:, :, None] * w[:, None, :], rtol=1e-12, atol=1e-9)
    assert chen_defect(d) <= 1e-10 * max(1.0, float(np.max(np.abs(d.WW))))


def test_chen_defect_detects_corruption():
    d = lift_smooth(HolderPath(GRID, np.stack([np.sin(5 * GRID), GRID**2], -1)))
    WW = d.WW.copy()
    WW[100, 0, 1] += 1e-6
    bad = RoughDriver(d.W, WW, d.steps)
    assert chen_defect(bad) == pytest.approx(1e-6, rel=1e-6)


def test_levy_area_of_circle():
    t = np.linspace(0.0, 2 * np.pi, 20001)
    d = lift_smooth(HolderPath(t, np.stack([np.cos(t), np.sin(t)], -1)))
    area = 0.5 * (d.WW[-1, 0, 1] - d.WW[-1, 1, 0])
    assert area == pytest.approx(np.pi, abs=1e-6)


def test_driver_validation():
    W = HolderPath(GRID, GRID)
    good = lift_smooth(W)
    with pytest.raises(GridMismatch):
        RoughDriver(W, good.WW[:-1], good.steps)
    with pytest.raises(ValueError):
        RoughDriver(W, good.WW, good.steps, gamma=0.3)
    with pytest.raises(ValueError):
        RoughDriver(HolderPath(GRID, GRID + 1.0), good.WW, good.steps)


def test_from_levels_recovers_steps():
    d = lift_smooth(HolderPath(GRID, np.stack([np.cos(3 * GRID) - 1, GRID], -1)))
    again = RoughDriver.from_levels(d.W, d.WW)
    np.testing.assert_allclose(again.steps, d.steps, rtol=0, atol=1e-14)
    dW, dWW = d.increment(20, 150)
    np.testing.assert_allclose(dW, d.W.values[150] - d.W.values[20])
    assert dWW.shape == (2, 2)


def test_rough_metric_properties():
    d1 = lift_smooth(HolderPath(GRID, np.sin(4 * GRID)))
    d2 = lift_smooth(HolderPath(GRID, np.sin(4 * GRID) + 0.1 * GRID))
    assert rough_metric(d1, d1) == 0.0
    assert rough_metric(d1, d2) == pytest.approx(rough_metric(d2, d1))
    assert rough_metric(d1, d2) > 0
    other = lift_smooth(HolderPath(np.linspace(0, 1, 11), np.zeros(11)))
    with pytest.raises(GridMismatch):
        rough_metric(d1, other)


def test_young_integral_left_point():
    V = HolderPath(GRID, GRID)
    I = young_integral(GRID[:, None], V, 1.0, 1.0)
    h = GRID[1]
    # left-point sum of t dt is t^2/2 - t h/2 on a uniform grid
    np.testing.assert_allclose(I.values[:, 0], GRID**2 / 2 - GRID * h / 2, atol=1e-12)
    with pytest.raises(ExponentConditionError):
        young_integral(GRID[:, None], V, 0.5, 0.5)


def test_rough_integral_of_constant_integrand_is_increment():
    W = HolderPath(GRID, np.stack([np.sin(GRID), GRID**2], -1))
    d = lift_smooth(W)
    H = np.array([[1.0, 2.0]])
    Xp = np.zeros((len(GRID), 2, 2))
    out = rough_integral(lambda x: H, lambda x: np.zeros((1, 2, 2)), W, Xp, d)
    np.testing.assert_allclose(out.values[:, 0], W.values @ H[0], atol=1e-14)


@pytest.mark.parametrize("scheme", ["first_order", "joint"])
def test_linear_rde_against_exponential(scheme):
    grid = np.linspace(0.0, 1.0, 2001)
    W = HolderPath(grid, np.sin(3 * grid))
    V = HolderPath(grid, grid)
    a, c = -0.5, 0.8
    X = solve_rde(linear_fields(a, c), V, lift_smooth(W), [1.0], scheme=scheme)
    exact = np.exp(a * grid + c * np.sin(3 * grid))
    tol = 1e-3 if scheme == "first_order" else 1e-6
    assert np.max(np.abs(X.values[:, 0] - exact)) < tol


def test_rde_batched_start():
    grid = np.linspace(0.0, 1.0, 501)
    W = HolderPath(grid, np.sin(3 * grid))
    V = HolderPath(grid, grid)
    out = solve_rde(linear_fields(0.0, 1.0), V, lift_smooth(W), np.array([[1.0], [2.0]]))
    assert out.shape == (501, 2, 1)
    np.testing.assert_allclose(out[:, 1], 2 * out[:, 0], rtol=1e-12)


def test_rde_blow_up_is_reported():
    grid = np.linspace(0.0, 1.0, 101)
    V = HolderPath(grid, grid)
    W = HolderPath(grid, np.zeros(101))
    with pytest.raises(RDEBlowUp):
        solve_rde(linear_fields(50.0, 0.0), V, lift_smooth(W), [1.0], bound=10.0)


def test_rde_grid_mismatch():
    V = HolderPath(np.linspace(0, 1, 11), np.linspace(0, 1, 11))
    d = lift_smooth(HolderPath(GRID, GRID))
    with pytest.raises(GridMismatch):
        solve_rde(linear_fields(1.0, 1.0), V, d, [1.0])


def test_vector_field_validation_catches_wrong_derivative():
    good = linear_fields(1.0, 2.0)
    good.validate(np.array([[0.3], [-1.2]]))
    bad = VectorFieldPair(good.F, good.H, lambda x: np.full(np.shape(x) + (1, 1), 5.0))
    with pytest.raises(ValueError):
        bad.validate(np.array([[0.3]]))


def test_driver_csv_roundtrip(tmp_path):
    d = lift_smooth(HolderPath(np.linspace(0, 1, 5), np.stack([np.linspace(0, 1, 5)] * 2, -1)))
    d.to_csv(tmp_path / "drv.csv", tmp_path / "drv.json", {"seed": 3})
    rows = (tmp_path / "drv.csv").read_text().splitlines()
    assert rows[0].split(",") == ["t", "W1", "W2", "WW11", "WW12", "WW21", "WW22"]
    assert len(rows) == 6
