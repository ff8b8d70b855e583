"""Dyadic cube systems on a finite group metric measure space.

The system is built top-down.  The top cube is the whole space; each cube is
split among the centers of the next finer net that lie inside it, so
partition, nesting and the parent map hold by construction.  Finer centers are
preferred deep inside their parent, which keeps the ball sandwich
B(z, a0 delta^k) <= Q <= B(z, C1 delta^k); that and the net conditions are
certified afterwards.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse

from .space import Space, ball

__all__ = [
    "CubeSystem",
    "CubeAxiomViolation",
    "build_net",
    "build_cube_system",
    "certify_axioms",
    "parent_chain",
    "enlarged_cube",
    "level_below_scale",
]


class CubeAxiomViolation(AssertionError):
    """A cube system failed one of the four cube axioms or the net conditions."""

    def __init__(self, axiom: str, level: int, witness: int, detail: str = ""):
        self.axiom = axiom
        self.level = level
        self.witness = witness
        msg = f"axiom {axiom} fails at level {level}, witness point {witness}"
        super().__init__(msg + (f": {detail}" if detail else ""))


def level_below_scale(delta: float, r0: float) -> int:
    """The integer n with delta^n < r0 <= delta^(n+1)."""
    n = math.ceil(math.log(r0) / math.log(delta)) - 1
    # guard against rounding in the logarithm
    while delta ** (n + 1) < r0:
        n += 1
    while delta**n >= r0:
        n -= 1
    return n


def _level_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, k + 2**31])


def build_net(
    space: Space,
    delta: float,
    c0: float,
    C0: float,
    k: int,
    seed: int = 0,
    initial: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Greedy maximal c0*delta^k-separated set, visited in seeded random order.

    Points of ``initial`` are taken first (they must already be separated).
    """
    if not c0 < C0:
        raise ValueError("need c0 < C0")
    if delta <= 1:
        raise ValueError("need delta > 1")
    sep = c0 * delta**k
    centers: List[int] = []
    mind = np.full(space.n_points, np.inf)
    order = list(initial if initial is not None else []) + list(_level_rng(seed, k).permutation(space.n_points))
    for p in order:
        if mind[p] >= sep:
            centers.append(int(p))
            mind = np.minimum(mind, space.dists_from(p))
    return np.array(centers, dtype=np.int64)


@dataclass(eq=False)
class CubeSystem:
    space: Space
    delta: float
    c0: float
    C0: float
    seed: int
    k_min: int
    k_max: int
    centers: List[np.ndarray]
    labels: List[np.ndarray]
    parents: List[np.ndarray]
    certification: Dict[str, object] = field(default_factory=dict)

    @property
    def a0(self) -> float:
        return self.c0 / 3

    @property
    def C1(self) -> float:
        return 2 * self.C0

    @property
    def strict_regime(self) -> bool:
        return 18 * self.C0 / self.delta <= self.c0

    @property
    def levels(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def _i(self, k: int) -> int:
        if not self.k_min <= k <= self.k_max:
            raise IndexError(f"level {k} outside [{self.k_min}, {self.k_max}]")
        return k - self.k_min

    def label(self, k: int) -> np.ndarray:
        """Cube index of every point at level k."""
        return self.labels[self._i(k)]

    def level_centers(self, k: int) -> np.ndarray:
        return self.centers[self._i(k)]

    def parent(self, k: int) -> np.ndarray:
        """Parent index (at level k+1) of every level-k cube."""
        if k == self.k_max:
            raise IndexError("the top cube has no parent")
        return self.parents[self._i(k)]

    def n_cubes(self, k: int) -> int:
        return len(self.level_centers(k))

    def members(self, k: int, alpha: int) -> np.ndarray:
        if not 0 <= alpha < self.n_cubes(k):
            raise IndexError(f"cube {alpha} out of range at level {k}")
        return np.flatnonzero(self.label(k) == alpha)

    def cube_measures(self, k: int) -> np.ndarray:
        return np.bincount(
            self.label(k), weights=self.space.measure, minlength=self.n_cubes(k)
        )

    def average(self, k: int, values: np.ndarray) -> np.ndarray:
        """Replace ``values`` (points on axis 0) by their level-k cube averages."""
        flat = values.reshape(values.shape[0], -1)
        means = self._averager(k) @ flat
        return means[self.label(k)].reshape(values.shape)

    def _averager(self, k: int) -> sparse.csr_matrix:
        # rows are cubes, entries mu(x)/mu(Q); cached per level
        cache = self.__dict__.setdefault("_averagers", {})
        if k not in cache:
            lab = self.label(k)
            mu = self.space.measure
            vals = mu / self.cube_measures(k)[lab]
            cache[k] = sparse.csr_matrix(
                (vals, (lab, np.arange(lab.size))), shape=(self.n_cubes(k), lab.size)
            )
        return cache[k]

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "c0": self.c0,
            "C0": self.C0,
            "a0": self.a0,
            "C1": self.C1,
            "seed": self.seed,
            "strict_regime": self.strict_regime,
            "levels": [self.k_min, self.k_max],
            "centers": {str(k): self.level_centers(k).tolist() for k in self.levels},
            "membership": {str(k): self.label(k).tolist() for k in self.levels},
            "parents": {
                str(k): self.parent(k).tolist() for k in self.levels if k < self.k_max
            },
            "certification": self.certification,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _refine_level(space, parent_label, parent_centers, delta, c0, C0, k, seed):
    """Split every level-(k+1) cube into level-k cubes.

    Centers are chosen greedily in seeded order: first the parent centers
    (nesting), then points whose a0*delta^k ball stays inside their parent
    cube, then any point still farther than C0*delta^k from every center.
    Each point joins the nearest center lying in its own parent cube, ties
    going to the smallest center index.
    """
    sep = c0 * delta**k
    inner = (c0 / 3) * delta**k
    n = space.n_points
    deep = np.array(
        [np.all(parent_label[space.dists_from(x) <= inner] == parent_label[x]) for x in range(n)]
    )
    order = _level_rng(seed, k).permutation(n)
    centers: List[int] = []
    mind = np.full(n, np.inf)

    def add(p):
        nonlocal mind
        centers.append(int(p))
        mind = np.minimum(mind, space.dists_from(int(p)))

    for z in parent_centers:
        add(z)
    for p in order:
        if deep[p] and mind[p] >= sep:
            add(p)
    for p in order:
        if mind[p] >= C0 * delta**k:
            add(p)
    centers_arr = np.array(centers, dtype=np.int64)
    center_parent = parent_label[centers_arr]
    dist = np.stack([space.dists_from(int(z)) for z in centers_arr])
    # only centers inside the point's own parent cube compete for it
    dist = np.where(center_parent[:, None] == parent_label[None, :], dist, np.inf)
    label = np.argmin(dist, axis=0)
    return centers_arr, center_parent, label


def build_cube_system(
    space: Space,
    delta: float = 2.0,
    c0: float = 1.0,
    C0: float = 1.5,
    seed: int = 0,
    r0: float = 1.0,
    k_max: Optional[int] = None,
    check: bool = True,
) -> CubeSystem:
    """Construct a nested dyadic cube system and certify its axioms.

    Levels run from n_{r0}+1 up to the first level whose separation
    c0*delta^k exceeds the diameter, where the net is a single point and the
    top cube is the whole space.
    """
    k_min = level_below_scale(delta, r0) + 1
    if k_max is None:
        k_max = k_min
        while c0 * delta**k_max <= space.diameter:
            k_max += 1
    if k_max < k_min:
        raise ValueError("empty level window")

    nets: Dict[int, np.ndarray] = {
        k_max: build_net(space, delta, c0, C0, k_max, seed)[:1]
    }
    labels_by_k: Dict[int, np.ndarray] = {k_max: np.zeros(space.n_points, dtype=np.int64)}
    parents_by_k: Dict[int, np.ndarray] = {}
    for k in range(k_max - 1, k_min - 1, -1):
        centers, parent, label = _refine_level(
            space, labels_by_k[k + 1], nets[k + 1], delta, c0, C0, k, seed
        )
        nets[k], parents_by_k[k], labels_by_k[k] = centers, parent, label

    system = CubeSystem(
        space=space,
        delta=float(delta),
        c0=float(c0),
        C0=float(C0),
        seed=int(seed),
        k_min=k_min,
        k_max=k_max,
        centers=[nets[k] for k in range(k_min, k_max + 1)],
        labels=[labels_by_k[k] for k in range(k_min, k_max + 1)],
        parents=[parents_by_k[k] for k in range(k_min, k_max)],
    )
    system.certification = certify_axioms(system, raise_on_failure=check)
    return system


def certify_axioms(system: CubeSystem, raise_on_failure: bool = True) -> Dict[str, object]:
    """Exhaustively check the cube axioms and the net conditions.

    Returns a report with per-axiom pass flags, the realized inner and outer
    radius ratios, and the first witness of any failure.
    """
    space = system.space
    report: Dict[str, object] = {}
    failures = []

    def fail(axiom, level, witness, detail=""):
        failures.append(
            {"axiom": axiom, "level": level, "witness": int(witness), "detail": detail}
        )

    for k in system.levels:
        lab = system.label(k)
        n = system.n_cubes(k)
        # (1) partition: every point has a valid cube and no cube is empty
        if lab.min() < 0 or lab.max() >= n:
            fail("1", k, int(np.flatnonzero((lab < 0) | (lab >= n))[0]))
        counts = np.bincount(lab, minlength=n)
        if (counts == 0).any():
            fail("1", k, int(system.level_centers(k)[np.flatnonzero(counts == 0)[0]]),
                 "empty cube")
        # (3) parent map agrees with membership one level up
        if k < system.k_max:
            up = system.label(k + 1)
            bad = np.flatnonzero(system.parent(k)[lab] != up)
            if bad.size:
                fail("3", k, int(bad[0]))
    # (2) nesting across every pair of levels k <= l
    for k in system.levels:
        lab = system.label(k)
        for l in range(k + 1, system.k_max + 1):
            up = system.label(l)
            first = np.zeros(system.n_cubes(k), dtype=np.int64)
            first[lab[::-1]] = up[::-1]
            bad = np.flatnonzero(first[lab] != up)
            if bad.size:
                fail("2", k, int(bad[0]), f"against level {l}")

    inner_ratio = np.inf
    outer_ratio = 0.0
    sep_ratio = np.inf
    cover_ratio = 0.0
    for k in system.levels:
        scale = system.delta**k
        lab = system.label(k)
        cent = system.level_centers(k)
        for alpha, z in enumerate(cent):
            d = space.dists_from(int(z))
            inside = lab == alpha
            out_d = d[~inside]
            min_out = out_d.min() if out_d.size else np.inf
            max_in = d[inside].max()
            inner_ratio = min(inner_ratio, min_out / scale)
            outer_ratio = max(outer_ratio, max_in / scale)
            if min_out <= system.a0 * scale:
                fail("4-inner", k, int(np.flatnonzero(~inside & (d <= system.a0 * scale))[0]))
            if max_in > system.C1 * scale:
                fail("4-outer", k, int(np.flatnonzero(inside & (d > system.C1 * scale))[0]))
        # net conditions: separation and covering
        dist = np.stack([space.dists_from(int(z)) for z in cent])
        if len(cent) > 1:
            dz = dist[:, cent]
            np.fill_diagonal(dz, np.inf)
            sep_ratio = min(sep_ratio, dz.min() / scale)
            if dz.min() < system.c0 * scale:
                fail("net-separation", k, int(cent[np.unravel_index(dz.argmin(), dz.shape)[0]]))
        cover = dist.min(axis=0)
        cover_ratio = max(cover_ratio, cover.max() / scale)
        if cover.max() >= system.C0 * scale:
            fail("net-covering", k, int(cover.argmax()))

    report["passed"] = not failures
    report["failures"] = failures[:20]
    report["inner_radius_ratio"] = float(inner_ratio)
    report["outer_radius_ratio"] = float(outer_ratio)
    report["separation_ratio"] = float(sep_ratio)
    report["covering_ratio"] = float(cover_ratio)
    report["strict_regime"] = system.strict_regime
    if failures and raise_on_failure:
        f = failures[0]
        raise CubeAxiomViolation(f["axiom"], f["level"], f["witness"], f["detail"])
    return report


def parent_chain(system: CubeSystem, k: int, alpha: int) -> List[int]:
    """Indices of the ancestors of cube (k, alpha) at levels k+1..k_max."""
    if not 0 <= alpha < system.n_cubes(k):
        raise IndexError(f"cube {alpha} out of range at level {k}")
    chain = []
    for level in range(k, system.k_max):
        alpha = int(system.parent(level)[alpha])
        chain.append(alpha)
    return chain


def enlarged_radius(system: CubeSystem, k: int) -> float:
    return (3 * system.C1 + 1) * system.delta ** (k + 1)


def enlarged_cube(system: CubeSystem, k: int, alpha: int) -> np.ndarray:
    """The ball of radius (3 C1 + 1) delta^(k+1) about the center of cube (k, alpha)."""
    z = int(system.level_centers(k)[alpha])
    members, _ = ball(system.space, z, enlarged_radius(system, k))
    return members
