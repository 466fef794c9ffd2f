import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dethomog.fastflow import (
    FlowSpec,
    FlowState,
    IntegrationDiverged,
    NoCrossingFound,
    SectionSpec,
    advance,
    evolve,
    integrate_grid,
    poincare_returns,
    rk4_step,
    sample_invariant,
    sample_members,
    step_flow,
    time_grid,
)

coords = st.floats(-30, 30, allow_nan=False)


def test_lorenz_vector_field_formula(lorenz):
    y = np.array([1.0, 2.0, 3.0])
    expected = [10.0 * (2.0 - 1.0), 1.0 * (28.0 - 3.0) - 2.0, 1.0 * 2.0 - 8.0 / 3.0 * 3.0]
    np.testing.assert_allclose(lorenz(y), expected, rtol=0, atol=1e-14)


def test_unknown_flow_rejected():
    with pytest.raises(ValueError):
        FlowSpec("duffing", 2)
    with pytest.raises(ValueError):
        FlowSpec("custom", 2)


@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_rotation_matches_exact_solution(rotation, dt):
    n = int(round(2 * math.pi / dt))
    grid = np.linspace(0.0, 2 * math.pi, n + 1)
    pts = integrate_grid(rotation, np.array([1.0, 0.0]), grid)
    exact = np.stack([np.cos(grid), np.sin(grid)], axis=-1)
    assert np.max(np.abs(pts - exact)) < 10 * (grid[1] ** 4)


def test_rk4_is_fourth_order(rotation):
    errs = []
    for dt in (0.2, 0.1, 0.05):
        y = advance(rotation, np.array([1.0, 0.0]), 1.0, dt)
        errs.append(np.max(np.abs(y - [math.cos(1.0), math.sin(1.0)])))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(3.7 < r < 4.3 for r in rates)


@settings(max_examples=40, deadline=None)
@given(coords, coords, st.floats(0, 50, allow_nan=False), st.floats(1e-4, 1e-2))
def test_scalar_and_batched_lorenz_steps_agree_bitwise(lorenz, a, b, c, dt):
    y = np.array([a, b, c])
    batch = np.stack([y, y + 1.0])
    assert np.array_equal(rk4_step(lorenz, y, dt), rk4_step(lorenz, batch, dt)[0])


def test_time_grid_includes_partial_last_step():
    g = time_grid(0.0, 1.05, 0.1)
    assert g[0] == 0.0 and g[-1] == pytest.approx(1.05)
    assert np.all(np.diff(g) > 0)
    np.testing.assert_allclose(np.diff(g)[:-1], 0.1)


def test_step_flow_and_evolve_are_consistent(lorenz):
    s = FlowState(np.array([1.0, 1.0, 20.0]), 0.0)
    orbit = evolve(lorenz, s, 0.5, 0.01)
    t = s
    for _ in range(50):
        t = step_flow(lorenz, t, 0.01)
    np.testing.assert_allclose(orbit.final.point, t.point, rtol=0, atol=1e-12)
    assert orbit.final.time == pytest.approx(0.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    blow = FlowSpec("custom", 1, vector_field=lambda y: y**2)
    with pytest.raises(IntegrationDiverged) as info:
        advance(blow, np.array([1.0]), 2.0, 1e-2)
    assert info.value.time <= 2.0


def test_sample_members_rows_depend_only_on_member(lorenz):
    full = sample_members(lorenz, 4, np.arange(6), burn_in=5.0, dt=1e-2)
    part = sample_members(lorenz, 4, [2, 5], burn_in=5.0, dt=1e-2)
    assert np.array_equal(full[[2, 5]], part)
    other = sample_members(lorenz, 5, [2], burn_in=5.0, dt=1e-2)
    assert not np.array_equal(other[0], full[2])


def test_sample_invariant_is_on_the_attractor(lorenz):
    states = sample_invariant(lorenz, seed=1, burn_in=20.0, count=5, gap=1.0, dt=1e-2)
    assert len(states) == 5
    assert [s.time for s in states] == pytest.approx([20.0, 21.0, 22.0, 23.0, 24.0])
    for s in states:
        assert abs(s.point[0]) < 25 and 0 < s.point[2] < 55


def test_rotation_return_time_is_two_pi(rotation):
    section = SectionSpec(np.array([0.0, 1.0]), 0.0, "upward")
    returns = poincare_returns(rotation, section, FlowState(np.array([0.0, -1.0])), 3, dt=1e-2, tol=1e-13)
    for r in returns:
        assert r.return_time == pytest.approx(2 * math.pi, abs=1e-9)
        np.testing.assert_allclose(r.base_point, [1.0, 0.0], atol=1e-9)


def test_lorenz_returns_lie_on_section(lorenz):
    section = SectionSpec.lorenz_standard(lorenz)
    start = FlowState(sample_members(lorenz, 0, [0], 20.0, 1e-2)[0])
    returns = poincare_returns(lorenz, section, start, 10, dt=1e-2)
    for r in returns:
        assert abs(section.height(r.base_point)) < 1e-6
        assert r.return_time > section.min_return_time
        grid = r.intra_orbit.grid
        assert grid[-1] - grid[0] == pytest.approx(r.return_time)
    # consecutive returns chain end to start
    for a, b in zip(returns, returns[1:]):
        np.testing.assert_array_equal(a.intra_orbit.points[-1], b.base_point)


def test_no_crossing_raises(rotation):
    section = SectionSpec(np.array([1.0, 0.0]), 5.0, "upward")
    with pytest.raises(NoCrossingFound):
        poincare_returns(rotation, section, FlowState(np.array([1.0, 0.0])), 1, dt=0.1, max_search=20.0)


def test_section_validation():
    with pytest.raises(ValueError):
        SectionSpec(np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        SectionSpec(np.ones(3), 0.0, direction="sideways")
