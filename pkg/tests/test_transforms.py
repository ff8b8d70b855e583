import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_hermitian, random_psd
from nccz.cubes import CubeSystem, build_cube_system
from nccz.opfun import OpField, lp_norm, rademacher_average
from nccz.space import build_torus_space
from nccz.transforms import (
    annulus_kernel_sum,
    ball_average,
    boundary_average,
    boundary_halo,
    boundary_sets,
    conditional_expectation,
    halo_ratio_mean,
    linearized_square_function,
    make_context,
    slope_fit,
    square_difference,
    square_differences,
)


def test_ball_average_of_constant_and_indicator(ctx16):
    c = np.array([[2.0, 1j], [-1j, 3.0]])
    f = OpField(ctx16.space, np.broadcast_to(c, (16, 2, 2)).copy())
    assert np.allclose(ball_average(ctx16, f, 1).values, c)
    z8 = build_torus_space(1, 8)
    ctx8 = make_context(build_cube_system(z8))
    ind = np.zeros(8)
    ind[0] = 1
    out = ball_average(ctx8, ind, 0)
    assert np.allclose(out, [1 / 3, 1 / 3, 0, 0, 0, 0, 0, 1 / 3])


def test_ball_average_is_positive_and_mass_preserving(ctx16):
    f = random_psd(ctx16.space, 2, 4)
    for k in ctx16.square_levels:
        af = ball_average(ctx16, f, k)
        assert af.min_eigenvalue() >= -1e-12
        assert np.trace(af.values.sum(0)) == pytest.approx(np.trace(f.values.sum(0)), rel=1e-10)


def test_conditional_expectation_two_halves():
    z4 = build_torus_space(1, 4)
    system = CubeSystem(
        space=z4, delta=2.0, c0=1.0, C0=1.5, seed=0, k_min=0, k_max=1,
        centers=[np.array([0, 2]), np.array([0])],
        labels=[np.array([0, 0, 1, 1]), np.zeros(4, dtype=np.int64)],
        parents=[np.array([0, 0])],
    )
    ctx = make_context(system, square_levels=[0])
    assert np.allclose(conditional_expectation(ctx, np.array([1.0, 2, 3, 4]), 0), [1.5, 1.5, 3.5, 3.5])


def test_martingale_identity(ctx32):
    f = random_hermitian(ctx32.space, 2, 0)
    for j in ctx32.levels:
        ej = conditional_expectation(ctx32, f, j)
        for k in ctx32.levels:
            lhs = conditional_expectation(ctx32, ej, k).values
            rhs = conditional_expectation(ctx32, f, max(j, k)).values
            assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_square_difference_identities(ctx32):
    c = np.broadcast_to(np.eye(2) + 0j, (32, 2, 2)).copy()
    for k in ctx32.square_levels:
        assert np.allclose(square_difference(ctx32, OpField(ctx32.space, c), k).values, 0)
    f = random_hermitian(ctx32.space, 2, 1)
    for k in ctx32.square_levels:
        tk = square_difference(ctx32, f, k)
        assert abs(np.trace(tk.values.sum(0))) <= 1e-10
        ek = conditional_expectation(ctx32, f, k)
        assert np.allclose(square_difference(ctx32, ek, k).values, ball_average(ctx32, ek, k).values - ek.values)


def test_linearized_square_function(ctx32):
    f = random_hermitian(ctx32.space, 2, 2)
    k = ctx32.square_levels[0]
    one = linearized_square_function(ctx32, f, [1.0], [k])
    assert np.allclose(one.values, square_difference(ctx32, f, k).values)
    K = len(ctx32.square_levels)
    signs = np.random.default_rng(0).choice([-1.0, 1.0], K)
    pos = linearized_square_function(ctx32, f, signs)
    neg = linearized_square_function(ctx32, f, -signs)
    assert np.allclose(pos.values, -neg.values)
    assert lp_norm(pos, 3) == pytest.approx(lp_norm(neg, 3))
    with pytest.raises(ValueError):
        linearized_square_function(ctx32, f, [1.0])
    seq = square_differences(ctx32, f)
    lhs = rademacher_average(seq, 2, power=2, exhaustive=True).value
    assert lhs == pytest.approx(sum(lp_norm(t, 2) ** 2 for t in seq), rel=1e-10)


@pytest.mark.parametrize("fixture", ["ctx32", "ctx16_2d"])
def test_boundary_sets_inclusion_and_definitions(fixture, request):
    ctx = request.getfixturevalue(fixture)
    space = ctx.space
    for k in ctx.square_levels:
        for n in range(ctx.system.k_min, k):
            for s in range(0, space.n_points, max(1, space.n_points // 12)):
                sets = boundary_sets(ctx, s, k, n)
                assert sets.inclusion_holds
                in_ball = space.dists_from(s) <= ctx.radius(k)
                assert set(sets.inner) == set(sets.outer[in_ball[sets.outer]])
                lo = ctx.radius(k) - ctx.system.C1 * ctx.radius(n)
                lab = ctx.system.label(n)
                for a in np.unique(lab[sets.outer]):
                    # cubes inside the smaller ball never meet the collar
                    members = lab == a
                    assert not np.all(space.dists_from(s)[members] <= lo)


def test_boundary_average_examples(ctx32):
    k, n = ctx32.square_levels[-1], 1
    c = np.array([[1.0, 0.5], [0.5, 2.0]]) + 0j
    h = OpField(ctx32.space, np.broadcast_to(c, (32, 2, 2)).copy())
    s = 5
    sets = boundary_sets(ctx32, s, k, n)
    expect = c * len(sets.inner) / ctx32.space.ball_measure(ctx32.radius(k))[s]
    assert np.allclose(boundary_average(ctx32, h, s, k, n), expect)
    assert np.allclose(boundary_average(ctx32, h.like(0 * h.values), s, k, n), 0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_boundary_reduction_for_mean_zero_fields(seed):
    space = build_torus_space(1, 32)
    ctx = make_context(build_cube_system(space))
    v = random_hermitian(space, 2, seed).values
    for n in range(ctx.system.k_min, ctx.system.k_max):
        h = v - ctx.system.average(n, v)
        for k in ctx.square_levels:
            if k > n:
                lhs = ball_average(ctx, h, k)
                rhs = boundary_average(ctx, h, None, k, n)
                assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_halo_examples(ctx32):
    system = ctx32.system
    for n in system.levels:
        for a in range(system.n_cubes(n)):
            halo, ratio = boundary_halo(ctx32, n, n, a)
            assert 0 <= ratio <= 1
    # radius one reaches outside exactly from points with an outside neighbour
    n = system.k_max - 1
    lab = system.label(n)
    for a in range(system.n_cubes(n)):
        halo, _ = boundary_halo(ctx32, 0, n, a)
        members = np.flatnonzero(lab == a)
        collar = [x for x in members if np.any(lab[ctx32.space.ball_members(x, 1)] != a)]
        assert sorted(halo.tolist()) == sorted(collar)
    assert np.isnan(halo_ratio_mean(ctx32, 0, system.k_max))
    with pytest.raises(ValueError):
        boundary_halo(ctx32, 2, 1, 0)


def test_annulus_kernel_constant_weight(ctx32):
    k, n = ctx32.square_levels[-1], 0
    val = annulus_kernel_sum(ctx32, np.ones(32), 0, k, n)
    lo = ctx32.radius(k) - ctx32.system.C1
    hi = ctx32.radius(k) + ctx32.system.C1
    d = ctx32.space.dists_from(0)
    count = np.sum((d <= hi) & (d > lo))
    assert val == pytest.approx(count / ctx32.space.ball_measure(ctx32.radius(k))[0])


def test_slope_fit():
    fit = slope_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert fit.slope == pytest.approx(2) and fit.r2 == pytest.approx(1)
    assert np.isnan(slope_fit([1], [2]).slope)


def test_context_rejects_bad_window(ctx32):
    with pytest.raises(ValueError):
        make_context(ctx32.system, square_levels=[99])
    with pytest.raises(ValueError):
        make_context(ctx32.system, square_levels=[])
