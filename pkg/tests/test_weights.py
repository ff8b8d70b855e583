import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nccz.cubes import CubeSystem, build_cube_system
from nccz.space import build_torus_space
from nccz.weights import (
    Weight,
    WeightRangeError,
    WeightRejectionTimeout,
    a1_characteristic,
    ap_characteristic,
    check_weight_inequalities,
    make_weight,
    martingale_a1_characteristic,
    weight_to_csv,
)


def brute_ap(space, w, p, radii):
    best = 1.0
    for x, r in itertools.product(range(space.n_points), radii):
        members = [y for y in range(space.n_points) if space.dist(x, y) <= r]
        a = np.mean(w[members])
        b = np.mean(w[members] ** (1 / (1 - p)))
        best = max(best, a * b ** (p - 1))
    return best


def test_constant_weight_is_one(z16):
    w = make_weight(z16, "constant", {"c": 3})
    for p in (1, 1.5, 2, 4):
        assert ap_characteristic(z16, w, p) == pytest.approx(1.0)


def test_z8_step_ap_matches_brute_force(z8):
    w = np.array([2, 2, 2, 2, 1, 1, 1, 1], dtype=float)
    got = ap_characteristic(z8, w, 2, [1, 2])
    assert got == pytest.approx(brute_ap(z8, w, 2, [1, 2]))
    assert got == pytest.approx(1.12)


def test_a1_single_bump(z8):
    w = np.array([4, 1, 1, 1, 1, 1, 1, 1], dtype=float)
    assert a1_characteristic(z8, w, [1]) == pytest.approx(2.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(0.1, 10), p=st.sampled_from([1.5, 2.0, 3.0]))
def test_scale_invariance_and_a1_dominates_ap(seed, c, p):
    space = build_torus_space(1, 16)
    w = np.exp(np.random.default_rng(seed).standard_normal(16))
    ap = ap_characteristic(space, w, p)
    assert ap_characteristic(space, c * w, p) == pytest.approx(ap, rel=1e-9)
    assert a1_characteristic(space, w) >= ap * (1 - 1e-12)


def test_martingale_a1_examples(z8):
    system = build_cube_system(z8)
    assert martingale_a1_characteristic(system, np.ones(8)) == pytest.approx(1.0)
    w = np.array([4, 1, 1, 1, 1, 1, 1, 1], dtype=float)
    ratio = 0.0
    for k in system.levels:
        lab = system.label(k)
        for a in range(system.n_cubes(k)):
            m = lab == a
            ratio = max(ratio, np.max(w[m].mean() / w[m]))
    assert martingale_a1_characteristic(system, w) == pytest.approx(ratio)
    # hand-made two-level system with cubes {0..3} and {4..7}
    halves = CubeSystem(
        space=z8, delta=2.0, c0=1.0, C0=1.5, seed=0, k_min=0, k_max=1,
        centers=[np.array([1, 5]), np.array([1])],
        labels=[np.array([0, 0, 0, 0, 1, 1, 1, 1]), np.zeros(8, dtype=np.int64)],
        parents=[np.array([0, 0])],
    )
    assert halves.average(0, w)[1] == pytest.approx(7 / 4)
    assert martingale_a1_characteristic(halves, w) == pytest.approx(7 / 4)


def test_martingale_a1_below_ball_a1_times_comparison(z32):
    system = build_cube_system(z32)
    w = make_weight(z32, "power_like", {"a": 0.5})
    # a cube sits inside B(z, C1 delta^k) and contains B(z, a0 delta^k)
    factor = max(
        z32.ball_measure(system.C1 * system.delta**k)[0] / z32.ball_measure(system.a0 * system.delta**k)[0]
        for k in system.levels
    )
    ball_a1 = a1_characteristic(z32, w, [float(r) for r in range(0, 17)])
    assert martingale_a1_characteristic(system, w) <= ball_a1 * factor


def test_weight_inequalities_constant_and_step(z16):
    rep = check_weight_inequalities(z16, np.ones(16), 2.0)
    assert rep.fit_C == pytest.approx(1.0) and rep.fit_upsilon == 1.0
    step = make_weight(z16, "step")
    rep = check_weight_inequalities(z16, step, 2.0, n_pairs=100, seed=1)
    assert rep.containment_violations == 0


def test_make_weight_kinds(z32):
    assert np.allclose(make_weight(z32, "power_like", {"a": 0}).values, 1.0)
    w = make_weight(z32, "power_like", {"a": 0.5})
    assert "a1:" in "".join(w.cache)
    w = make_weight(z32, "random_a1", {"sigma": 0.3, "cap": 4}, seed=2)
    assert a1_characteristic(z32, w) <= 4
    with pytest.raises(WeightRejectionTimeout):
        make_weight(z32, "random_a1", {"sigma": 5, "cap": 1.01, "max_tries": 3})
    with pytest.raises(ValueError):
        make_weight(z32, "nope")
    with pytest.raises(ValueError):
        make_weight(z32, "power_like", {"a": 1.5})


def test_range_guard(z8):
    with pytest.raises(WeightRangeError):
        a1_characteristic(z8, Weight(np.full(8, 1e-20)))
    with pytest.raises(ValueError):
        Weight(np.zeros(8))


def test_csv_roundtrip(tmp_path, z8):
    w = make_weight(z8, "step")
    path = tmp_path / "w.csv"
    weight_to_csv(w, path)
    rows = path.read_text().splitlines()
    assert rows[0] == "point,value" and len(rows) == 9
    assert [float(r.split(",")[1]) for r in rows[1:]] == w.values.tolist()
