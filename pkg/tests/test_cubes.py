import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nccz.cubes import (
    CubeAxiomViolation,
    build_cube_system,
    build_net,
    certify_axioms,
    enlarged_cube,
    enlarged_radius,
    parent_chain,
)
from nccz.space import build_torus_space


def test_net_examples(z8):
    assert len(build_net(z8, 2, 1, 1.5, 0)) == 8
    assert len(build_net(z8, 2, 1, 1.5, 2)) == 2


def test_net_covers_z16_squared_at_level_one():
    space = build_torus_space(2, 16)
    centers = build_net(space, 2, 1, 1.5, 1)
    near = np.min([space.dists_from(int(c)) for c in centers], axis=0)
    assert np.all(near < 2)


def test_z8_partition_at_every_level(z8):
    system = build_cube_system(z8)
    assert (system.k_min, system.k_max) == (0, 3)
    for k in system.levels:
        lab = system.label(k)
        assert np.bincount(lab).sum() == 8
        assert np.all(np.bincount(lab, minlength=system.n_cubes(k)) > 0)


def test_top_cube_is_everything(z32):
    system = build_cube_system(z32)
    assert system.n_cubes(system.k_max) == 1
    assert system.C1 * system.delta**system.k_max >= z32.diameter


def test_level_one_cubes_within_outer_radius(z16):
    system = build_cube_system(z16, seed=7)
    for a in range(system.n_cubes(1)):
        z = int(system.level_centers(1)[a])
        assert np.all(z16.dists_from(z)[system.members(1, a)] <= system.C1 * system.delta)


def test_level_zero_cubes_are_singletons(z16):
    system = build_cube_system(z16)
    assert system.n_cubes(0) == z16.n_points


@settings(max_examples=12, deadline=None)
@given(dim=st.integers(1, 2), side=st.sampled_from([8, 12, 16]), seed=st.integers(0, 1000),
       metric=st.sampled_from(["linf_word", "l1_word"]))
def test_axioms_hold_for_random_seeds(dim, side, seed, metric):
    space = build_torus_space(dim, side, metric)
    system = build_cube_system(space, seed=seed, check=False)
    assert system.certification["passed"], system.certification["failures"][:3]
    # nesting: a level-k cube lies inside its parent
    for k in system.levels:
        if k < system.k_max:
            par = system.parent(k)
            assert np.array_equal(par[system.label(k)], system.label(k + 1))


def test_corrupted_system_is_detected(z16):
    system = build_cube_system(z16)
    lab = system.labels[1].copy()
    lab[0] = (lab[0] + 1) % system.n_cubes(1)
    system.labels[1] = lab
    system.__dict__.pop("_averagers", None)
    with pytest.raises(CubeAxiomViolation):
        certify_axioms(system)
    assert not certify_axioms(system, raise_on_failure=False)["passed"]


def test_parent_chain_examples(z8):
    system = build_cube_system(z8)
    assert parent_chain(system, system.k_max, 0) == []
    assert len(parent_chain(system, 0, 5)) == 3
    system32 = build_cube_system(build_torus_space(1, 32), seed=3)
    chain = [0] + parent_chain(system32, 0, 11)
    sizes = []
    for level, alpha in zip(range(0, system32.k_max + 1), [11] + chain[1:]):
        sizes.append(system32.members(level, alpha))
    for small, big in zip(sizes, sizes[1:]):
        assert set(small) <= set(big) and len(big) >= len(small)
    assert len(sizes[-1]) == 32


def test_enlarged_cube_contains_cube_and_covers_small_torus(z16):
    system = build_cube_system(z16)
    assert enlarged_radius(system, 0) == 20
    for k in system.levels:
        for a in range(system.n_cubes(k)):
            assert set(system.members(k, a)) <= set(enlarged_cube(system, k, a))
    assert len(enlarged_cube(system, 0, 0)) == 16


def test_enlarged_to_inner_ball_ratio_bounded(z32):
    system = build_cube_system(z32)
    ratios = []
    for k in system.levels:
        for a in range(system.n_cubes(k)):
            z = int(system.level_centers(k)[a])
            inner = z32.ball_measure(system.a0 * system.delta**k)[z]
            ratios.append(len(enlarged_cube(system, k, a)) / inner)
    assert max(ratios) <= 32


def test_average_is_cube_mean(z16):
    system = build_cube_system(z16)
    v = np.arange(16.0)
    for k in system.levels:
        avg = system.average(k, v)
        for a in range(system.n_cubes(k)):
            m = system.members(k, a)
            assert np.allclose(avg[m], v[m].mean())


def test_bad_parameters():
    space = build_torus_space(1, 8)
    with pytest.raises(ValueError):
        build_net(space, 2, 2, 1.5, 0)
    with pytest.raises(ValueError):
        build_net(space, 1, 1, 1.5, 0)
