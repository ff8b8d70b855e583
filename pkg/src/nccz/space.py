"""Finite group metric measure spaces (discrete tori) and their geometric constants."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

__all__ = [
    "Space",
    "GeometryReport",
    "AnnularDecay",
    "GeometryError",
    "build_torus_space",
    "ball",
    "measure_annular_decay",
    "measure_doubling_and_geo",
    "quarter_scale",
]

METRIC_KINDS = ("linf_word", "l1_word")
DEFAULT_POINT_CAP = 10**6
TABLE_CAP = 4096
OPERATOR_NNZ_CAP = 2 * 10**7


class GeometryError(ValueError):
    """Raised when no geometric constant can be certified on the requested window."""


@dataclass(frozen=True, eq=False)
class Space:
    """The torus Z_N^d with a wraparound word metric and counting measure.

    Points are indexed 0..N^d-1 in C order of their coordinates.  The group
    operation is coordinatewise addition mod N and the identity is point 0.
    """

    dim: int
    side: int
    metric_kind: str
    coords: np.ndarray
    measure: np.ndarray

    def __post_init__(self):
        self.coords.setflags(write=False)
        self.measure.setflags(write=False)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.side,) * self.dim

    @property
    def diameter(self) -> float:
        half = self.side // 2
        return float(half if self.metric_kind == "linf_word" else half * self.dim)

    @property
    def identity(self) -> int:
        return 0

    def index(self, coord) -> int:
        return int(np.ravel_multi_index(tuple(np.mod(coord, self.side)), self.shape))

    def _circular(self, diff: np.ndarray) -> np.ndarray:
        diff = np.abs(diff) % self.side
        return np.minimum(diff, self.side - diff)

    def _combine(self, circ: np.ndarray) -> np.ndarray:
        if self.metric_kind == "linf_word":
            return circ.max(axis=-1)
        return circ.sum(axis=-1)

    def dist(self, x: int, y: int) -> float:
        circ = self._circular(self.coords[x] - self.coords[y])
        return float(self._combine(circ))

    def dists_from(self, x: int) -> np.ndarray:
        """Distances from point ``x`` to every point, as a float array."""
        if self._table is not None:
            return self._table[x]
        circ = self._circular(self.coords - self.coords[x])
        return self._combine(circ).astype(float)

    @cached_property
    def _table(self) -> Optional[np.ndarray]:
        if self.n_points > TABLE_CAP:
            return None
        circ = self._circular(self.coords[:, None, :] - self.coords[None, :, :])
        table = self._combine(circ).astype(float)
        table.setflags(write=False)
        return table

    def distance_table(self) -> np.ndarray:
        if self._table is None:
            raise MemoryError(
                f"metric table not materialized for {self.n_points} points "
                f"(cap {TABLE_CAP})"
            )
        return self._table

    def translate(self, g: int, x) -> np.ndarray:
        """Left translation x -> g + x (vectorized over ``x``)."""
        coords = (self.coords[g] + self.coords[np.asarray(x)]) % self.side
        return np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), self.shape)

    def shift_permutation(self, g: int) -> np.ndarray:
        """Array ``perm`` with ``perm[x] = g + x`` for every point x."""
        return self.translate(g, np.arange(self.n_points))

    def ball_offsets(self, r: float) -> np.ndarray:
        """Points of the closed ball B(e, r); B(x, r) = x + B(e, r) by invariance."""
        return np.flatnonzero(self.dists_from(self.identity) <= r)

    def ball_members(self, x: int, r: float) -> np.ndarray:
        return np.flatnonzero(self.dists_from(x) <= r)

    def ball_sum(self, values: np.ndarray, r: float) -> np.ndarray:
        """For each x, the measure-weighted sum of ``values`` over B(x, r).

        ``values`` has the points on its first axis.
        """
        op = self.ball_operator(r)
        if op is not None:
            flat = values.reshape(values.shape[0], -1)
            return (op @ flat).reshape(values.shape)
        mu = self.measure.reshape((-1,) + (1,) * (values.ndim - 1))
        weighted = values * mu
        out = np.zeros_like(weighted)
        for g in self.ball_offsets(r):
            out += weighted[self.shift_permutation(g)]
        return out

    def ball_operator(self, r: float) -> Optional[sparse.csr_matrix]:
        """Sparse matrix of h -> sum over B(x, r) of h dmu, or None if too large."""
        offsets = self.ball_offsets(r)
        if offsets.size * self.n_points > OPERATOR_NNZ_CAP:
            return None
        cache = self.__dict__.setdefault("_ball_ops", {})
        key = float(r)
        if key not in cache:
            cols = np.stack([self.shift_permutation(int(g)) for g in offsets], axis=1)
            rows = np.repeat(np.arange(self.n_points), offsets.size)
            cols = cols.ravel()
            cache[key] = sparse.csr_matrix(
                (self.measure[cols], (rows, cols)), shape=(self.n_points, self.n_points)
            )
        return cache[key]

    def ball_measure(self, r: float) -> np.ndarray:
        """mu(B(x, r)) for every x."""
        return self.ball_sum(np.ones(self.n_points), r)

    def ball_min(self, values: np.ndarray, r: float) -> np.ndarray:
        out = np.full(self.n_points, np.inf)
        for g in self.ball_offsets(r):
            out = np.minimum(out, values[self.shift_permutation(g)])
        return out


def build_torus_space(
    d: int, N: int, metric_kind: str = "linf_word", point_cap: int = DEFAULT_POINT_CAP
) -> Space:
    """Build Z_N^d with the wraparound linf or l1 word metric and counting measure."""
    if d not in (1, 2, 3):
        raise ValueError(f"torus dimension must be 1, 2 or 3, got {d}")
    if N < 4:
        raise ValueError(f"torus side must be at least 4, got {N}")
    if metric_kind not in METRIC_KINDS:
        raise ValueError(f"unknown metric kind {metric_kind!r}")
    if N**d > point_cap:
        raise ValueError(f"Z_{N}^{d} has {N**d} points, above the cap of {point_cap}")
    grids = np.indices((N,) * d).reshape(d, -1).T.astype(np.int64)
    return Space(
        dim=d,
        side=N,
        metric_kind=metric_kind,
        coords=np.ascontiguousarray(grids),
        measure=np.ones(N**d),
    )


def ball(space: Space, x: int, r: float) -> Tuple[np.ndarray, float]:
    """Closed ball B(x, r): member indices and measure."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    members = space.ball_members(x, r)
    return members, float(space.measure[members].sum())


def quarter_scale(space: Space) -> float:
    """Largest radius for which radius-dependent claims are certified."""
    return space.side / 4.0


def _radial_profile(space: Space, centers: Sequence[int]) -> List[np.ndarray]:
    # sorted distances plus cumulative measure give mu(B(x, r)) by bisection
    profiles = []
    for x in centers:
        d = space.dists_from(x)
        order = np.argsort(d, kind="stable")
        profiles.append((d[order], np.cumsum(space.measure[order])))
    return profiles


def _ball_mass(profile, r: float) -> float:
    dists, cum = profile
    k = np.searchsorted(dists, r, side="right")
    return float(cum[k - 1]) if k > 0 else 0.0


def _sample_centers(space: Space, max_centers: int, seed: int) -> np.ndarray:
    if space.n_points <= max_centers:
        return np.arange(space.n_points)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(space.n_points, size=max_centers, replace=False))


@dataclass(frozen=True)
class AnnularDecay:
    K: float
    eps: float
    K_eps: float
    r0: float
    radii: Tuple[float, ...]
    shrink_fractions: Tuple[float, ...]
    K_by_eps: Dict[float, float] = field(default_factory=dict)


def measure_annular_decay(
    space: Space,
    r0: float = 1.0,
    radii: Optional[Sequence[float]] = None,
    shrink_fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
    eps_grid: Optional[Sequence[float]] = None,
    K_cap: float = 100.0,
    max_centers: int = 256,
    seed: int = 0,
) -> AnnularDecay:
    """Certify mu(B(x,r+s)) - mu(B(x,r)) <= K (s/r)^eps mu(B(x,r)) on a sampled window.

    The largest eps on the grid whose smallest certifying K stays below
    ``K_cap`` is chosen.  The two-sided form
    mu(B(x,r+s)) - mu(B(x,r-s)) <= K_eps (s/r)^eps mu(B(x,r)), restricted to
    r >= 2 r0, is certified at the same eps and reported as ``K_eps``.
    """
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    if radii is None:
        top = space.diameter / 2
        radii = [float(r) for r in range(1, int(top) + 1) if r0 < r <= top]
    radii = tuple(float(r) for r in radii)
    if not radii:
        raise GeometryError("empty radius window")
    if any(r <= r0 or r > space.diameter / 2 for r in radii):
        raise ValueError(f"radii must lie in ({r0}, {space.diameter / 2}]")
    fractions = tuple(float(t) for t in shrink_fractions)
    if any(not 0 < t <= 1 for t in fractions):
        raise ValueError("shrink fractions must lie in (0, 1]")
    if eps_grid is None:
        eps_grid = [round(0.05 * i, 2) for i in range(1, 21)]

    profiles = _radial_profile(space, _sample_centers(space, max_centers, seed))
    one_sided = []  # (increment / base, s / r)
    two_sided = []
    for prof in profiles:
        for r in radii:
            base = _ball_mass(prof, r)
            for t in fractions:
                s = t * r
                inc = _ball_mass(prof, r + s) - base
                one_sided.append((inc / base, t))
                if r >= 2 * r0:
                    inc2 = _ball_mass(prof, r + s) - _ball_mass(prof, r - s)
                    two_sided.append((inc2 / base, t))
    rel, ts = np.array(one_sided).T

    K_by_eps = {}
    for eps in eps_grid:
        K_by_eps[float(eps)] = float(np.max(rel / ts**eps))
    feasible = [e for e, K in K_by_eps.items() if K <= K_cap]
    if not feasible:
        raise GeometryError(
            f"no (K, eps) with K <= {K_cap} on radii {radii}; "
            f"best K = {min(K_by_eps.values()):.3g}"
        )
    eps = max(feasible)
    K = K_by_eps[eps]
    if two_sided:
        rel2, ts2 = np.array(two_sided).T
        K_eps = float(np.max(rel2 / ts2**eps))
    else:
        K_eps = float("nan")
    return AnnularDecay(
        K=K, eps=eps, K_eps=K_eps, r0=r0, radii=radii,
        shrink_fractions=fractions, K_by_eps=K_by_eps,
    )


@dataclass(frozen=True)
class GeometryReport:
    doubling_constant: float
    annular_K: float
    annular_eps: float
    annular_K_eps: float
    geo_doubling_D0: int
    r0: float
    r1: float
    scales_checked: Tuple[float, ...]
    annular_radii: Tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "doubling_constant": self.doubling_constant,
            "annular_K": self.annular_K,
            "annular_eps": self.annular_eps,
            "annular_K_eps": self.annular_K_eps,
            "geo_doubling_D0": self.geo_doubling_D0,
            "r0": self.r0,
            "r1": self.r1,
            "scales_checked": list(self.scales_checked),
            "annular_radii": list(self.annular_radii),
        }


def greedy_half_cover(space: Space, x: int, r: float) -> int:
    """Number of balls B(h_i, r/2) a greedy net uses to cover B(x, r)."""
    members = space.ball_members(x, r)
    uncovered = np.ones(members.size, dtype=bool)
    count = 0
    while uncovered.any():
        h = members[np.argmax(uncovered)]
        uncovered &= space.dists_from(h)[members] > r / 2
        count += 1
    return count


def measure_doubling_and_geo(
    space: Space,
    r_range: Sequence[float],
    r1: Optional[float] = None,
    r0: float = 1.0,
    annular_radii: Optional[Sequence[float]] = None,
    max_centers: int = 256,
    seed: int = 0,
) -> GeometryReport:
    """Measure C_d, the greedy geometric-doubling count D0 and the annular constants."""
    r_range = tuple(float(r) for r in r_range)
    if not r_range or any(r <= 0 or r > space.diameter for r in r_range):
        raise ValueError(f"r_range must be nonempty within (0, {space.diameter}]")
    if r1 is None:
        r1 = max(r_range)
    centers = _sample_centers(space, max_centers, seed)
    profiles = _radial_profile(space, centers)
    C_d = 0.0
    for prof in profiles:
        for r in r_range:
            C_d = max(C_d, _ball_mass(prof, 2 * r) / _ball_mass(prof, r))
    D0 = 0
    # the greedy cover is translation invariant on a torus, a few centers suffice
    for x in centers[: min(len(centers), 8)]:
        for r in r_range:
            if r <= r1:
                D0 = max(D0, greedy_half_cover(space, int(x), r))
    decay = measure_annular_decay(space, r0=r0, radii=annular_radii, seed=seed)
    return GeometryReport(
        doubling_constant=C_d,
        annular_K=decay.K,
        annular_eps=decay.eps,
        annular_K_eps=decay.K_eps,
        geo_doubling_D0=D0,
        r0=r0,
        r1=float(r1),
        scales_checked=r_range,
        annular_radii=decay.radii,
    )
