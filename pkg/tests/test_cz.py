import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_psd
from nccz.cubes import build_cube_system, enlarged_cube
from nccz.cz import (
    WindowTooNarrow,
    cancellation_suite,
    cuculescu,
    cz_decompose,
    weighted_trace_check,
    p_level_bound_check,
    p_level_geometric_bound,
    zeta_projection,
)
from nccz.opfun import OpField, lp_norm
from nccz.space import build_torus_space, measure_annular_decay
from nccz.transforms import make_context
from nccz.weights import make_weight


def classical_cz(system, f, lam, tie=1e-10):
    """Scalar stopping time: x is stopped once some cube containing it averages above lam.

    Averages within ``tie`` of lam count as equal to it, as in the projection step.

    Returns (good indicator, level of the maximal stopped cube or None per point).
    """
    n = system.space.n_points
    stop_level = [None] * n
    for k in range(system.k_max, system.k_min - 1, -1):
        avg = system.average(k, f)
        for x in range(n):
            if stop_level[x] is None and avg[x] > lam + tie:
                stop_level[x] = k
    good = np.array([s is None for s in stop_level], dtype=float)
    return good, stop_level


def scalar_field(space, vals):
    return OpField(space, np.asarray(vals, dtype=float).reshape(-1, 1, 1) + 0j)


def spiky(space, seed):
    rng = np.random.default_rng(seed)
    vals = rng.exponential(1.0, space.n_points)
    vals[rng.choice(space.n_points, 3, replace=False)] += rng.uniform(20, 60, 3)
    return vals


def test_small_field_is_all_good(ctx32):
    f = random_psd(ctx32.space, 2, 0, heavy=False)
    lam = lp_norm(f, np.inf) * 1.01
    parts = cz_decompose(ctx32, f, lam)
    assert np.allclose(parts.q.values, np.eye(2))
    assert all(np.allclose(p.values, 0) for p in parts.p_fields.values())
    assert np.allclose(parts.g.values, f.values)
    assert np.allclose(parts.b_d.values, 0) and np.allclose(parts.b_off.values, 0)
    zeta_projection(ctx32, parts, f=f)
    assert np.allclose(parts.zeta.values, np.eye(2))
    assert parts.diagnostics["zeta"]["phi_w_zeta_perp"] == 0
    assert p_level_bound_check(parts, ctx32)["c"] == 0
    gal = weighted_trace_check(parts, ctx32, f)
    assert gal["lhs"] == 0 and gal["pass"]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1.0, 6.0))
def test_scalar_case_matches_classical_oracle(seed, scale):
    space = build_torus_space(1, 32)
    ctx = make_context(build_cube_system(space))
    vals = spiky(space, seed)
    lam = scale * vals.mean()
    f = scalar_field(space, vals)
    parts = cz_decompose(ctx, f, lam)
    good, stop_level = classical_cz(ctx.system, vals, lam)
    assert np.allclose(parts.q.values[:, 0, 0].real, good)
    for k in parts.levels:
        expect = np.array([s == k for s in stop_level], dtype=float)
        assert np.allclose(parts.p_fields[k].values[:, 0, 0].real, expect)
    # classical good part: f on the good set, the stopped-cube average elsewhere
    g = vals * good
    for x, k in enumerate(stop_level):
        if k is not None:
            g[x] = ctx.system.average(k, vals)[x]
    assert np.allclose(parts.g.values[:, 0, 0].real, g)
    assert np.allclose(parts.b_off.values, 0)
    # p-level constant equals the largest stopped average over lambda
    stopped = [ctx.system.average(k, vals)[x] for x, k in enumerate(stop_level) if k is not None]
    c = p_level_bound_check(parts, ctx)["c"]
    assert c == pytest.approx(max(stopped) / lam if stopped else 0.0)


def test_diagonal_field_decouples(ctx32):
    space = ctx32.space
    cols = [spiky(space, 1), spiky(space, 2)]
    v = np.zeros((32, 2, 2), dtype=complex)
    v[:, 0, 0], v[:, 1, 1] = cols
    lam = 3 * np.mean(cols)
    parts = cuculescu(ctx32, OpField(space, v), lam)
    for i, col in enumerate(cols):
        good, _ = classical_cz(ctx32.system, col, lam)
        assert np.allclose(parts.q.values[:, i, i].real, good)
    assert np.allclose(parts.q.values[:, 0, 1], 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), factor=st.floats(1.0, 8.0), d=st.integers(1, 3))
def test_random_instance_identities(seed, factor, d):
    space = build_torus_space(1, 32)
    ctx = make_context(build_cube_system(space))
    f = random_psd(space, d, seed)
    w = make_weight(space, "power_like", {"a": 0.5})
    decay = measure_annular_decay(space)
    top = np.linalg.eigvalsh(ctx.system.average(ctx.system.k_max, f.values)[0]).max()
    lam = top * factor
    parts = cz_decompose(ctx, f, lam, w, decay.K, decay.eps)
    cuc = parts.diagnostics["cuculescu"]
    assert cuc["max_commutator"] <= 1e-9 and cuc["max_order_excess"] <= 1e-9
    assert cuc["max_monotonicity_defect"] <= 1e-9
    assert cuc["partition_of_unity_error"] <= 1e-9 and cuc["max_p_overlap"] <= 1e-9
    dec = parts.diagnostics["decomposition"]
    assert dec["reconstruction_error"] <= 1e-10
    assert dec["mean_zero_b_d"] <= 1e-10 and dec["mean_zero_b_off"] <= 1e-10
    assert dec["g_l1_within"] and dec["g_inf_within_geometric"]
    assert dec["p_level"]["within_measure_bound"]
    assert dec["p_level"]["c"] <= p_level_geometric_bound(ctx.system, decay.K, decay.eps)
    assert parts.diagnostics["weighted_trace"]["pass"]
    unweighted = cz_decompose(ctx, f, lam)
    assert unweighted.stopped_trace() <= lp_norm(f, 1) / lam * (1 + 1e-12)
    zeta_projection(ctx, parts, w, decay.K, decay.eps, f)
    z = parts.diagnostics["zeta"]
    assert z["cancellation_defect"] <= 1e-10 and z["within_join_bound"]
    rep = cancellation_suite(ctx, parts, f)
    assert rep.exact_pass() and rep.inclusion_failures == 0


def test_lambda_below_top_average_is_rejected(ctx32):
    f = random_psd(ctx32.space, 2, 3)
    top = np.linalg.eigvalsh(ctx32.system.average(ctx32.system.k_max, f.values)[0]).max()
    with pytest.raises(WindowTooNarrow):
        cuculescu(ctx32, f, 0.5 * top)
    with pytest.raises(ValueError):
        cuculescu(ctx32, f, -1.0)


def test_single_stopped_cube_zeta_support():
    space = build_torus_space(1, 64)
    ctx = make_context(build_cube_system(space))
    P = np.array([[1.0, 1.0], [1.0, 1.0]]) / 2 + 0j
    v = np.zeros((64, 2, 2), dtype=complex)
    x0 = 17
    v[x0] = 10 * P
    f = OpField(space, v)
    lam = 4.0  # only the singleton cube {x0} averages above lambda
    parts = cz_decompose(ctx, f, lam)
    stopped = [(k, a) for k in parts.levels for a in np.flatnonzero(
        np.linalg.norm(parts.p_cubes[k], axis=(1, 2)) > 1e-12)]
    assert stopped == [(0, ctx.system.label(0)[x0])]
    zeta_projection(ctx, parts)
    perp = np.eye(2) - parts.zeta.values
    region = set(enlarged_cube(ctx.system, 0, stopped[0][1]).tolist())
    for x in range(64):
        if x in region:
            assert np.allclose(perp[x], P)
        else:
            assert np.allclose(perp[x], 0)
    # every bad part vanishes under zeta in the small-scale window
    rep = cancellation_suite(ctx, parts, f)
    assert rep.small_scale_defect_d <= 1e-12 and rep.small_scale_defect_off <= 1e-12


def test_zero_bad_part_gives_zero_report(ctx16):
    f = random_psd(ctx16.space, 2, 0, heavy=False)
    parts = cz_decompose(ctx16, f, 10 * lp_norm(f, np.inf))
    rep = cancellation_suite(ctx16, parts, f)
    assert rep.small_scale_defect_d == rep.reduction_defect_d == 0
    assert rep.off_diagonal_constant == 0


def test_two_dimensional_instance(ctx16_2d):
    f = random_psd(ctx16_2d.space, 2, 8)
    top = np.linalg.eigvalsh(ctx16_2d.system.average(ctx16_2d.system.k_max, f.values)[0]).max()
    parts = cz_decompose(ctx16_2d, f, 2 * top)
    assert parts.diagnostics["decomposition"]["reconstruction_error"] <= 1e-10
    assert cancellation_suite(ctx16_2d, parts, f).exact_pass()
