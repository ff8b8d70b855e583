"""Averaging operators on a cube system: ball averages, conditional expectations,
square-function differences, boundary averages and boundary halos.

Radii are always delta^k.  A ball of negative radius is empty, which is what
the inner balls of the boundary annuli reduce to when k is close to n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse, stats

from .cubes import CubeSystem, level_below_scale
from .opfun import OpField
from .space import Space, quarter_scale

__all__ = [
    "OperatorContext",
    "make_context",
    "ball_average",
    "conditional_expectation",
    "square_difference",
    "square_differences",
    "linearized_square_function",
    "BoundarySets",
    "boundary_sets",
    "boundary_average",
    "boundary_operator",
    "boundary_halo",
    "halo_ratio_mean",
    "annulus_kernel_sum",
    "SlopeFit",
    "slope_fit",
]


@dataclass(frozen=True)
class OperatorContext:
    space: Space
    system: CubeSystem
    n_r0: int
    square_levels: Tuple[int, ...]

    @property
    def delta(self) -> float:
        return self.system.delta

    @property
    def levels(self) -> range:
        return self.system.levels

    def radius(self, k: int) -> float:
        return self.delta**k


def make_context(
    system: CubeSystem, r0: float = 1.0, square_levels: Optional[Sequence[int]] = None
) -> OperatorContext:
    """Bundle a cube system with its square-function window.

    By default the window runs from n_r0 + 1 up to the last level whose radius
    delta^k stays within a quarter of the side length.
    """
    n_r0 = level_below_scale(system.delta, r0)
    if square_levels is None:
        cap = quarter_scale(system.space)
        square_levels = [k for k in system.levels if k > n_r0 and system.delta**k <= cap]
    square_levels = tuple(int(k) for k in square_levels)
    if not square_levels:
        raise ValueError("empty square-function window")
    for k in square_levels:
        if k not in system.levels:
            raise ValueError(f"level {k} outside the cube system")
    return OperatorContext(system.space, system, n_r0, square_levels)


def _arr(f) -> np.ndarray:
    return f.values if isinstance(f, OpField) else np.asarray(f)


def _wrap(f, values):
    return f.like(values) if isinstance(f, OpField) else values


def _shaped(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def ball_average(ctx: OperatorContext, f, k: int):
    """A_{delta^k} f(x): the mu-average of f over the closed ball B(x, delta^k)."""
    v = _arr(f)
    r = ctx.radius(k)
    out = ctx.space.ball_sum(v, r) / _shaped(ctx.space.ball_measure(r), v)
    return _wrap(f, out)


def conditional_expectation(ctx: OperatorContext, f, k: int):
    """E_k f: on each level-k cube, the cube average."""
    return _wrap(f, ctx.system.average(k, _arr(f)))


def square_difference(ctx: OperatorContext, f, k: int):
    """T_k f = A_{delta^k} f - E_k f."""
    v = _arr(f)
    return _wrap(f, _arr(ball_average(ctx, v, k)) - _arr(conditional_expectation(ctx, v, k)))


def square_differences(ctx: OperatorContext, f, levels: Optional[Sequence[int]] = None) -> list:
    levels = ctx.square_levels if levels is None else levels
    return [square_difference(ctx, f, k) for k in levels]


def linearized_square_function(ctx: OperatorContext, f, signs, levels=None):
    """sum_k eps_k T_k f over the square-function window."""
    levels = ctx.square_levels if levels is None else tuple(levels)
    signs = np.asarray(signs, dtype=float)
    if signs.shape != (len(levels),):
        raise ValueError(f"need {len(levels)} signs, got {signs.shape}")
    v = _arr(f)
    out = np.zeros_like(v, dtype=np.result_type(v, float))
    for eps, k in zip(signs, levels):
        out += eps * _arr(square_difference(ctx, v, k))
    return _wrap(f, out)


@dataclass(frozen=True)
class BoundarySets:
    collar: np.ndarray
    inner: np.ndarray  # cubes meeting the collar, intersected with the ball
    outer: np.ndarray  # cubes meeting the collar
    inclusion_holds: bool
    annulus: Tuple[float, float]


def _collar(space: Space, in_ball: np.ndarray) -> np.ndarray:
    """Points of the ball with a unit neighbour outside, and outside points with one inside."""
    nbr_in = space.ball_sum(in_ball.astype(float), 1.0)
    nbr_all = space.ball_measure(1.0)
    return np.flatnonzero(
        (in_ball & (nbr_in < nbr_all - 1e-9)) | (~in_ball & (nbr_in > 1e-9))
    )


def boundary_sets(ctx: OperatorContext, s: int, k: int, n: int) -> BoundarySets:
    """Level-n cubes meeting the discrete boundary of B(s, delta^k).

    Also checks that they sit in the annulus
    B(s, delta^k + C1 delta^n) minus B(s, delta^k - C1 delta^n).
    """
    if not k > n:
        raise ValueError("boundary sets need k > n")
    d = ctx.space.dists_from(s)
    in_ball = d <= ctx.radius(k)
    collar = _collar(ctx.space, in_ball)
    lab = ctx.system.label(n)
    hit = np.zeros(ctx.system.n_cubes(n), dtype=bool)
    hit[lab[collar]] = True
    outer_mask = hit[lab]
    outer = np.flatnonzero(outer_mask)
    inner = np.flatnonzero(outer_mask & in_ball)
    lo = ctx.radius(k) - ctx.system.C1 * ctx.radius(n)
    hi = ctx.radius(k) + ctx.system.C1 * ctx.radius(n)
    inclusion = bool(np.all((d[outer] <= hi) & (d[outer] > lo)))
    return BoundarySets(collar, inner, outer, inclusion, (lo, hi))


def boundary_operator(ctx: OperatorContext, k: int, n: int) -> sparse.csr_matrix:
    """Sparse matrix of h -> M_{k,n} h, rows indexed by s."""
    cache = ctx.system.__dict__.setdefault("_boundary_ops", {})
    if (k, n) in cache:
        return cache[(k, n)]
    mu = ctx.space.measure
    ball_mu = ctx.space.ball_measure(ctx.radius(k))
    rows, cols, vals = [], [], []
    for s in range(ctx.space.n_points):
        inner = boundary_sets(ctx, s, k, n).inner
        rows.append(np.full(inner.size, s))
        cols.append(inner)
        vals.append(mu[inner] / ball_mu[s])
    n_pts = ctx.space.n_points
    op = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_pts, n_pts),
    )
    cache[(k, n)] = op
    return op


def boundary_average(ctx: OperatorContext, h, s: Optional[int], k: int, n: int):
    """M_{k,n} h(s) = mu(B(s, delta^k))^-1 times the integral of h over the inner boundary set.

    With ``s=None`` the whole field s -> M_{k,n} h(s) is returned.
    """
    v = _arr(h)
    if s is None:
        flat = v.reshape(v.shape[0], -1)
        return _wrap(h, (boundary_operator(ctx, k, n) @ flat).reshape(v.shape))
    inner = boundary_sets(ctx, s, k, n).inner
    mu = ctx.space.measure
    total = np.tensordot(mu[inner], v[inner], axes=1)
    return total / ctx.space.ball_measure(ctx.radius(k))[s]


def boundary_halo(ctx: OperatorContext, k: int, n: int, alpha: int) -> Tuple[np.ndarray, float]:
    """Points x of cube (n, alpha) with B(x, delta^k) leaving the cube, and their measure share."""
    if n < k:
        raise ValueError("boundary halo needs n >= k")
    lab = ctx.system.label(n)
    outside = (lab != alpha).astype(float)
    reach = ctx.space.ball_sum(outside, ctx.radius(k))
    members = np.flatnonzero(lab == alpha)
    halo = members[reach[members] > 0]
    mu = ctx.space.measure
    return halo, float(mu[halo].sum() / mu[members].sum())


def halo_ratio_mean(ctx: OperatorContext, k: int, n: int) -> float:
    """Mean over level-n cubes (the whole-space cube excluded) of the halo share."""
    count = ctx.system.n_cubes(n)
    if count == 1:
        return float("nan")
    return float(np.mean([boundary_halo(ctx, k, n, a)[1] for a in range(count)]))


def annulus_kernel_sum(ctx: OperatorContext, w, y: int, k: int, n: int) -> float:
    """sum over x in A(y) of w(x) mu(x) / mu(B(x, delta^k)).

    A(y) = B(y, delta^k + C1 delta^n) minus B(y, delta^k - C1 delta^n).
    """
    wv = np.asarray(getattr(w, "values", w), dtype=float)
    d = ctx.space.dists_from(y)
    lo = ctx.radius(k) - ctx.system.C1 * ctx.radius(n)
    hi = ctx.radius(k) + ctx.system.C1 * ctx.radius(n)
    ann = (d <= hi) & ~(d <= lo)
    mu = ctx.space.measure
    ball_mu = ctx.space.ball_measure(ctx.radius(k))
    return math.fsum(wv[ann] * mu[ann] / ball_mu[ann])


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    n: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def slope_fit(x, y) -> SlopeFit:
    """Least-squares line through (x, y) with its coefficient of determination."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        return SlopeFit(float("nan"), float("nan"), float("nan"), int(x.size))
    res = stats.linregress(x, y)
    return SlopeFit(float(res.slope), float(res.intercept), float(res.rvalue**2), int(x.size))
