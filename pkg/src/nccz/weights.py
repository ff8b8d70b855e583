"""Muckenhoupt weights on a discrete torus.

Ball characteristics are exact maxima over every center and every radius of
a window; the martingale A_1 characteristic uses cube averages instead of
ball averages.  The two are reported separately because they differ by
geometry-dependent factors on discrete spaces.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .cubes import CubeSystem
from .space import Space, quarter_scale

__all__ = [
    "Weight",
    "WeightRangeError",
    "WeightRejectionTimeout",
    "default_window",
    "ap_characteristic",
    "a1_characteristic",
    "martingale_a1_characteristic",
    "check_weight_inequalities",
    "make_weight",
    "weight_to_csv",
    "WEIGHT_KINDS",
]

WEIGHT_KINDS = ("constant", "step", "power_like", "random_a1")
VALUE_RANGE = (1e-12, 1e12)


class WeightRangeError(ValueError):
    """A weight value lies outside the range where characteristics are reliable."""


class WeightRejectionTimeout(RuntimeError):
    """Rejection sampling did not find a weight under the A_1 cap in time."""


@dataclass(eq=False)
class Weight:
    values: np.ndarray
    tag: str = "custom"
    cache: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(self.values > 0):
            raise ValueError("weight values must be strictly positive")

    def scaled(self, c: float) -> "Weight":
        return Weight(self.values * c, tag=f"{self.tag}*{c:g}")

    def mass(self, space: Space, members: Optional[np.ndarray] = None) -> float:
        """w(E) = sum of w dmu over ``members`` (everything by default)."""
        if members is None:
            return float(np.dot(self.values, space.measure))
        return float(np.dot(self.values[members], space.measure[members]))


def _as_weight(w) -> Weight:
    return w if isinstance(w, Weight) else Weight(np.asarray(w, dtype=float))


def _guard(w: Weight) -> None:
    lo, hi = VALUE_RANGE
    if w.values.min() < lo or w.values.max() > hi:
        raise WeightRangeError(
            f"weight values span [{w.values.min():.3g}, {w.values.max():.3g}], "
            f"outside [{lo:g}, {hi:g}]"
        )


def default_window(space: Space) -> tuple:
    """Integer radii 1 .. N/4, the scales where the torus is genuinely doubling."""
    top = int(math.floor(quarter_scale(space)))
    return tuple(float(r) for r in range(1, max(top, 1) + 1))


def _window(space: Space, radius_window) -> tuple:
    if radius_window is None:
        return default_window(space)
    window = tuple(float(r) for r in radius_window)
    if not window or min(window) < 0:
        raise ValueError("radius window must be a nonempty list of radii >= 0")
    return window


def ap_characteristic(
    space: Space, w, p: float, radius_window: Optional[Sequence[float]] = None
) -> float:
    """Max over balls of (avg w) (avg w^(1/(1-p)))^(p-1); p = 1 gives the A_1 value."""
    w = _as_weight(w)
    if p == 1:
        return a1_characteristic(space, w, radius_window)
    if p < 1:
        raise ValueError("p must be >= 1")
    _guard(w)
    window = _window(space, radius_window)
    key = f"ap:{p!r}:{window!r}"
    if key in w.cache:
        return w.cache[key]
    dual = w.values ** (1.0 / (1.0 - p))
    best = 1.0
    for r in window:
        mu = space.ball_measure(r)
        avg_w = space.ball_sum(w.values, r) / mu
        avg_dual = space.ball_sum(dual, r) / mu
        best = max(best, float(np.max(avg_w * avg_dual ** (p - 1))))
    w.cache[key] = best
    return best


def a1_characteristic(
    space: Space, w, radius_window: Optional[Sequence[float]] = None
) -> float:
    """Max over balls of (avg_B w) / (min_B w)."""
    w = _as_weight(w)
    _guard(w)
    window = _window(space, radius_window)
    key = f"a1:{window!r}"
    if key in w.cache:
        return w.cache[key]
    best = 1.0
    for r in window:
        avg_w = space.ball_sum(w.values, r) / space.ball_measure(r)
        best = max(best, float(np.max(avg_w / space.ball_min(w.values, r))))
    w.cache[key] = best
    return best


def martingale_a1_characteristic(system: CubeSystem, w) -> float:
    """Max over levels k and points s of E_k(w)(s) / w(s)."""
    w = _as_weight(w)
    if w.values.shape[0] != system.space.n_points:
        raise ValueError("weight and cube system live on different spaces")
    return max(
        float(np.max(system.average(k, w.values) / w.values)) for k in system.levels
    )


@dataclass
class WeightInequalityReport:
    p: float
    ap: float
    pairs: int
    containment_violations: int
    containment_worst_margin: float
    fit_C: float
    fit_upsilon: float
    reverse_holder_delta: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _sample_pairs(space, window, n_pairs, rng):
    for _ in range(n_pairs):
        x = int(rng.integers(space.n_points))
        r = float(window[rng.integers(len(window))])
        B = space.ball_members(x, r)
        size = int(rng.integers(1, B.size + 1))
        E = rng.choice(B, size=size, replace=False)
        yield B, E


def check_weight_inequalities(
    space: Space,
    w,
    p: float,
    radius_window: Optional[Sequence[float]] = None,
    n_pairs: int = 100,
    C_cap: float = 10.0,
    seed: int = 0,
) -> WeightInequalityReport:
    """Check the A_p containment bound exactly and fit the A_infinity-type constants.

    Containment: w(B) <= [w]_Ap (mu(B)/mu(E))^p w(E) for sampled E inside B.
    Fit: the largest upsilon on a grid for which the smallest C with
    w(E)/w(B) <= C (mu(E)/mu(B))^upsilon stays below ``C_cap``.
    Reverse Hoelder: the largest exponent gain d for which
    (avg_B w^(1+d))^(1/(1+d)) <= C avg_B w holds with the fitted C.
    """
    w = _as_weight(w)
    window = _window(space, radius_window)
    ap = ap_characteristic(space, w, p, window)
    rng = np.random.default_rng(seed)
    mu = space.measure
    violations = 0
    worst = math.inf
    ratios = []
    for B, E in _sample_pairs(space, window, n_pairs, rng):
        wB = math.fsum(w.values[B] * mu[B])
        wE = math.fsum(w.values[E] * mu[E])
        mB = math.fsum(mu[B])
        mE = math.fsum(mu[E])
        rhs = ap * (mB / mE) ** p * wE
        # tiny relative slack for the floating point power
        if wB > rhs * (1 + 1e-12):
            violations += 1
        worst = min(worst, rhs - wB)
        ratios.append((wE / wB, mE / mB))
    wr, mr = np.array(ratios).T
    grid = [round(0.05 * i, 2) for i in range(1, 21)]
    fits = {u: float(np.max(wr / mr**u)) for u in grid}
    ok = [u for u, C in fits.items() if C <= C_cap]
    upsilon = max(ok) if ok else grid[0]
    C = fits[upsilon]

    rh = 0.0
    for d in [round(0.05 * i, 2) for i in range(1, 41)]:
        holds = True
        for r in window:
            m = space.ball_measure(r)
            avg = space.ball_sum(w.values, r) / m
            avg_pow = (space.ball_sum(w.values ** (1 + d), r) / m) ** (1 / (1 + d))
            if np.any(avg_pow > C * avg * (1 + 1e-12)):
                holds = False
                break
        if not holds:
            break
        rh = d
    return WeightInequalityReport(
        p=float(p), ap=ap, pairs=int(n_pairs), containment_violations=violations,
        containment_worst_margin=float(worst), fit_C=C, fit_upsilon=upsilon,
        reverse_holder_delta=rh,
    )


def _smooth_noise(space: Space, rng, radius: float) -> np.ndarray:
    z = rng.standard_normal(space.n_points)
    z = space.ball_sum(z, radius) / space.ball_measure(radius)
    return z / max(float(np.std(z)), 1e-12)


def make_weight(
    space: Space,
    kind: str = "constant",
    params: Optional[dict] = None,
    seed: int = 0,
    radius_window: Optional[Sequence[float]] = None,
) -> Weight:
    """Generate a strictly positive weight and cache its ball A_1 characteristic.

    kinds and params:
      constant   c (default 1)
      step       high, low: ``high`` on the half with first coordinate < N/2
      power_like a in [0, 1): (1 + dist(x, e))^(-a)
      random_a1  sigma, smooth, cap, max_tries: exp(sigma * smoothed noise),
                 resampled until [w]_A1 <= cap
    """
    params = dict(params or {})
    if kind == "constant":
        c = float(params.get("c", 1.0))
        if c <= 0:
            raise ValueError("constant weight needs c > 0")
        w = Weight(np.full(space.n_points, c), tag=f"constant(c={c:g})")
    elif kind == "step":
        high = float(params.get("high", 2.0))
        low = float(params.get("low", 1.0))
        if min(high, low) <= 0:
            raise ValueError("step weight needs positive levels")
        first = space.coords[:, 0]
        w = Weight(np.where(first < space.side / 2, high, low),
                   tag=f"step(high={high:g},low={low:g})")
    elif kind == "power_like":
        a = float(params.get("a", 0.5))
        if not 0 <= a < 1:
            raise ValueError("power_like needs a in [0, 1)")
        d0 = space.dists_from(space.identity)
        w = Weight((1.0 + d0) ** (-a), tag=f"power_like(a={a:g})")
    elif kind == "random_a1":
        sigma = float(params.get("sigma", 0.5))
        smooth = float(params.get("smooth", 1.0))
        cap = float(params.get("cap", 4.0))
        max_tries = int(params.get("max_tries", 200))
        rng = np.random.default_rng(seed)
        for attempt in range(max_tries):
            cand = Weight(np.exp(sigma * _smooth_noise(space, rng, smooth)),
                          tag=f"random_a1(sigma={sigma:g},cap={cap:g},seed={seed},try={attempt})")
            if a1_characteristic(space, cand, radius_window) <= cap:
                w = cand
                break
        else:
            raise WeightRejectionTimeout(
                f"no weight with [w]_A1 <= {cap} after {max_tries} draws (sigma={sigma})"
            )
    else:
        raise ValueError(f"unknown weight kind {kind!r}; expected one of {WEIGHT_KINDS}")
    a1_characteristic(space, w, radius_window)
    return w


def weight_to_csv(w: Weight, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["point", "value"])
        for i, v in enumerate(w.values):
            out.writerow([i, repr(float(v))])
