import numpy as np
import pytest

from nccz.cubes import build_cube_system
from nccz.opfun import OpField
from nccz.space import build_torus_space
from nccz.transforms import make_context


@pytest.fixture(scope="session")
def z8():
    return build_torus_space(1, 8)


@pytest.fixture(scope="session")
def z16():
    return build_torus_space(1, 16)


@pytest.fixture(scope="session")
def z32():
    return build_torus_space(1, 32)


@pytest.fixture(scope="session")
def ctx16(z16):
    return make_context(build_cube_system(z16, seed=0))


@pytest.fixture(scope="session")
def ctx32(z32):
    return make_context(build_cube_system(z32, seed=0))


@pytest.fixture(scope="session")
def ctx16_2d():
    space = build_torus_space(2, 16)
    return make_context(build_cube_system(space, seed=0))


def random_psd(space, d, seed, heavy=True):
    rng = np.random.default_rng(seed)
    n = space.n_points
    a = rng.standard_normal((n, d, d)) + 1j * rng.standard_normal((n, d, d))
    v = a @ a.conj().transpose(0, 2, 1) / d
    if heavy:
        v = v * (rng.pareto(1.5, size=n) + 0.05)[:, None, None]
    return OpField(space, v)


def random_hermitian(space, d, seed):
    rng = np.random.default_rng(seed)
    n = space.n_points
    a = rng.standard_normal((n, d, d)) + 1j * rng.standard_normal((n, d, d))
    return OpField(space, a + a.conj().transpose(0, 2, 1))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
