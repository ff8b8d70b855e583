"""Cuculescu projections and the noncommutative Calderon-Zygmund decomposition.

Levels run from coarse (k_max, a single cube) to fine (k_min).  At each
level the projection on a cube Q with parent P is the spectral projection of
q_P f_Q q_P onto [0, lambda], taken inside the range of q_P.  Everything
else (p_k, g, b_d, b_off, zeta) is derived from these per-cube projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .opfun import (
    EigensolverFailure,
    OpField,
    ProjectionField,
    _eigh,
    _eigvalsh,
    _hermitize,
    lp_norm,
    spectral_projection,
    trace_phi,
)
from .transforms import (
    OperatorContext,
    ball_average,
    boundary_average,
    boundary_sets,
    conditional_expectation,
)
from .weights import martingale_a1_characteristic

__all__ = [
    "WindowTooNarrow",
    "EigensolverFailure",
    "CZParts",
    "cuculescu",
    "cz_decompose",
    "p_level_bound_check",
    "weighted_trace_check",
    "zeta_projection",
    "cancellation_suite",
    "p_level_geometric_bound",
    "zeta_geometric_bound",
]

COMMUTATOR_TOL = 1e-9
ORDER_TOL = 1e-9
JOIN_CUT = 1e-9


class WindowTooNarrow(ValueError):
    """The coarsest cube average already exceeds lambda, so no projection starts at the identity."""


def _adj(v):
    return v.conj().swapaxes(-1, -2)


def _max_eig(v: np.ndarray) -> float:
    if v.size == 0:
        return 0.0
    return float(np.max(_eigvalsh(_hermitize(v))))


def _opnorm(v: np.ndarray) -> np.ndarray:
    """Spectral norm of every matrix in a stack."""
    return np.linalg.norm(v, ord=2, axis=(-2, -1)) if v.size else np.zeros(v.shape[:-2])


@dataclass(eq=False)
class CZParts:
    lam: float
    levels: List[int]  # coarse to fine
    f_levels: Dict[int, np.ndarray]  # E_k f
    q_cubes: Dict[int, np.ndarray]  # per-cube projection, shape (n_cubes, d, d)
    p_cubes: Dict[int, np.ndarray]
    q_fields: Dict[int, ProjectionField]
    p_fields: Dict[int, ProjectionField]
    q: ProjectionField
    g: Optional[OpField] = None
    b_d: Optional[OpField] = None
    b_off: Optional[OpField] = None
    zeta: Optional[ProjectionField] = None
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def b_d_level(self, f: OpField, n: int) -> np.ndarray:
        """b_{d,n} = p_n (f - f_n) p_n."""
        p = self.p_fields[n].values
        return p @ (f.values - self.f_levels[n]) @ p

    def b_off_level(self, f: OpField, n: int) -> np.ndarray:
        """b_n^off = p_n (f - f_n) q_n + q_n (f - f_n) p_n."""
        p = self.p_fields[n].values
        q = self.q_fields[n].values
        diff = f.values - self.f_levels[n]
        return p @ diff @ q + q @ diff @ p

    def stopped_trace(self, w=None) -> float:
        """phi_w(1 - q)."""
        d = self.q.dim
        return trace_phi(OpField.identity(self.q.space, d) - self.q, w)


def cuculescu(
    ctx: OperatorContext, f: OpField, lam: float, tol: float = 1e-10, check: bool = True
) -> CZParts:
    """Top-down Cuculescu recursion over every level of the cube system."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    system = ctx.system
    d = f.dim
    n_pts = ctx.space.n_points
    eye = np.eye(d, dtype=complex)
    levels = list(range(system.k_max, system.k_min - 1, -1))
    f_levels = {k: system.average(k, f.values) for k in levels}

    top = f_levels[system.k_max][:1]
    top_eig = _max_eig(top)
    if top_eig > lam + tol * max(1.0, lam):
        raise WindowTooNarrow(
            f"coarsest average has eigenvalue {top_eig:.6g} > lambda = {lam:.6g}"
        )

    q_cubes, p_cubes, q_fields, p_fields = {}, {}, {}, {}
    parent_q_field = np.broadcast_to(eye, (n_pts, d, d))
    for k in levels:
        centers = system.level_centers(k)
        f_cube = f_levels[k][centers]
        qp = parent_q_field[centers]
        scale = float(np.max(np.abs(f_cube), initial=0.0))
        big = 2.0 * (lam + scale) + 1.0
        # directions outside range(q_P) get eigenvalue `big` > lambda and drop out
        compressed = qp @ f_cube @ qp + big * (eye - qp)
        qc = spectral_projection(compressed, -np.inf, lam, closed_hi=True, tol=tol)
        # nothing stopped in this cube: inherit the parent projection exactly
        same = np.rint(np.einsum("aii->a", qc).real) == np.rint(np.einsum("aii->a", qp).real)
        qc[same] = qp[same]
        lab = system.label(k)
        q_cubes[k] = qc
        p_cubes[k] = qp - qc
        q_fields[k] = ProjectionField(ctx.space, qc[lab])
        p_fields[k] = ProjectionField(ctx.space, (qp - qc)[lab])
        parent_q_field = q_fields[k].values

    parts = CZParts(
        lam=float(lam), levels=levels, f_levels=f_levels, q_cubes=q_cubes,
        p_cubes=p_cubes, q_fields=q_fields, p_fields=p_fields,
        q=q_fields[system.k_min],
    )
    parts.diagnostics["cuculescu"] = _cuculescu_diagnostics(ctx, parts)
    if check:
        diag = parts.diagnostics["cuculescu"]
        if diag["max_commutator"] > COMMUTATOR_TOL or diag["max_order_excess"] > ORDER_TOL:
            raise AssertionError(f"Cuculescu invariants violated: {diag}")
    return parts


def _cuculescu_diagnostics(ctx: OperatorContext, parts: CZParts) -> dict:
    system = ctx.system
    lam = parts.lam
    d = parts.q.dim
    eye = np.eye(d)
    comm = order = mono = proj = 0.0
    for k in parts.levels:
        centers = system.level_centers(k)
        qc = parts.q_cubes[k]
        parent = eye if k == system.k_max else parts.q_fields[k + 1].values[centers]
        fk = parts.f_levels[k][centers]
        comp = parent @ fk @ parent
        comm = max(comm, float(np.max(_opnorm(qc @ comp - comp @ qc), initial=0.0)))
        order = max(order, _max_eig(qc @ fk @ qc - lam * qc))
        # q_k <= q_{k+1}: the difference must be positive semidefinite
        mono = max(mono, -float(np.min(_eigvalsh(_hermitize(parent - qc)))))
        proj = max(proj, float(np.max(_opnorm(qc @ qc - qc), initial=0.0)))
    ps = [parts.p_fields[k].values for k in parts.levels]
    total = sum(ps) + parts.q.values
    sum_err = float(np.max(_opnorm(total - np.eye(d)), initial=0.0))
    disjoint = 0.0
    for i in range(len(ps)):
        for j in range(i + 1, len(ps)):
            disjoint = max(disjoint, float(np.max(_opnorm(ps[i] @ ps[j]), initial=0.0)))
    return {
        "max_commutator": comm,
        "max_order_excess": order,
        "max_monotonicity_defect": mono,
        "max_projection_defect": proj,
        "partition_of_unity_error": sum_err,
        "max_p_overlap": disjoint,
        "stopped_trace": parts.stopped_trace(),
    }


def p_level_geometric_bound(system, K: float, eps: float) -> float:
    """(K + 1)(2 C1 delta / a0)^eps."""
    return (K + 1) * (2 * system.C1 * system.delta / system.a0) ** eps


def zeta_geometric_bound(system, K: float, eps: float) -> float:
    """(K + 1)((3 C1 + 1) delta / a0)^eps."""
    return (K + 1) * ((3 * system.C1 + 1) * system.delta / system.a0) ** eps


def p_level_bound_check(
    parts: CZParts, ctx: OperatorContext, K: Optional[float] = None, eps: Optional[float] = None
) -> dict:
    """Smallest c with p_k f_k p_k <= c lambda p_k, against two bounds.

    The measure bound max mu(parent)/mu(child) is exact for this construction;
    the geometric bound needs annular-decay constants (K, eps).
    """
    system = ctx.system
    c = 0.0
    for k in parts.levels:
        pc = parts.p_cubes[k]
        active = _opnorm(pc) > 1e-12
        if not active.any():
            continue
        fk = parts.f_levels[k][system.level_centers(k)][active]
        comp = pc[active] @ fk @ pc[active]
        c = max(c, _max_eig(comp) / parts.lam)
    ratio = 1.0
    for k in system.levels:
        if k < system.k_max:
            parent_mu = system.cube_measures(k + 1)[system.parent(k)]
            ratio = max(ratio, float(np.max(parent_mu / system.cube_measures(k))))
    out = {"c": c, "measure_bound": ratio, "within_measure_bound": c <= ratio * (1 + 1e-9)}
    if K is not None and eps is not None:
        geo = p_level_geometric_bound(system, K, eps)
        out.update(geometric_bound=geo, within_geometric_bound=c <= geo)
    return out


def weighted_trace_check(parts: CZParts, ctx: OperatorContext, f: OpField, w=None) -> dict:
    """q f_k q <= lambda q for every k, and lambda phi_w(1 - q) <= m_A1 ||f||_{1,w}."""
    q = parts.q.values
    excess = 0.0
    for k in parts.levels:
        excess = max(excess, _max_eig(q @ parts.f_levels[k] @ q - parts.lam * q))
    if w is None:
        m_a1 = 1.0
    else:
        m_a1 = martingale_a1_characteristic(ctx.system, w)
    lhs = parts.lam * parts.stopped_trace(w)
    rhs = m_a1 * lp_norm(f, 1, w)
    ok = excess <= ORDER_TOL * max(1.0, parts.lam) and lhs <= rhs * (1 + 1e-12) + 1e-12
    return {"lhs": lhs, "rhs": rhs, "m_A1": m_a1, "order_excess": excess, "pass": bool(ok)}


def cz_decompose(
    ctx: OperatorContext,
    f: OpField,
    lam: float,
    w=None,
    K: Optional[float] = None,
    eps: Optional[float] = None,
    check: bool = True,
) -> CZParts:
    """f = g + b_d + b_off, with every exact identity and trace bound evaluated."""
    parts = cuculescu(ctx, f, lam, check=check)
    fv = f.values
    q = parts.q.values
    g = q @ fv @ q
    b_d = np.zeros_like(fv)
    b_off = np.zeros_like(fv)
    mean_zero_d = mean_zero_off = 0.0
    for k in parts.levels:
        p = parts.p_fields[k].values
        g = g + p @ parts.f_levels[k] @ p
        bd = parts.b_d_level(f, k)
        bo = parts.b_off_level(f, k)
        b_d = b_d + bd
        b_off = b_off + bo
        mean_zero_d = max(mean_zero_d, float(np.max(np.abs(ctx.system.average(k, bd)))))
        mean_zero_off = max(mean_zero_off, float(np.max(np.abs(ctx.system.average(k, bo)))))
    parts.g = OpField(ctx.space, g)
    parts.b_d = OpField(ctx.space, b_d)
    parts.b_off = OpField(ctx.space, b_off)

    scale = max(float(np.linalg.norm(fv)), 1e-300)
    recon = float(np.linalg.norm(g + b_d + b_off - fv)) / scale
    m_a1 = 1.0 if w is None else martingale_a1_characteristic(ctx.system, w)
    g1 = lp_norm(parts.g, 1, w)
    f1 = lp_norm(f, 1, w)
    c_g = lp_norm(parts.g, np.inf) / lam
    pbound = p_level_bound_check(parts, ctx, K, eps)
    report = {
        "reconstruction_error": recon,
        "mean_zero_b_d": mean_zero_d / max(1.0, float(np.max(np.abs(fv)))),
        "mean_zero_b_off": mean_zero_off / max(1.0, float(np.max(np.abs(fv)))),
        "g_l1": g1,
        "g_l1_bound": max(1.0, m_a1) * f1,
        "g_l1_within": g1 <= max(1.0, m_a1) * f1 * (1 + 1e-9),
        "g_inf_over_lambda": c_g,
        "g_inf_bound": max(1.0, pbound["measure_bound"]),
        "m_A1": m_a1,
        "p_level": pbound,
    }
    if "geometric_bound" in pbound:
        report["g_inf_within_geometric"] = c_g <= max(1.0, pbound["geometric_bound"])
    parts.diagnostics["decomposition"] = report
    parts.diagnostics["weighted_trace"] = weighted_trace_check(parts, ctx, f, w)
    return parts


def zeta_projection(
    ctx: OperatorContext, parts: CZParts, w=None, K: Optional[float] = None,
    eps: Optional[float] = None, f: Optional[OpField] = None,
) -> ProjectionField:
    """zeta(s) = complement of the join of p_Q over cubes Q whose enlarged cube holds s.

    The join is the range projection of the sum, cut at eigenvalue 1e-9.
    Also records the cancellation defect and the trace bounds.
    """
    system = ctx.system
    space = ctx.space
    d = parts.q.dim
    n_pts = space.n_points
    total = np.zeros((n_pts, d, d), dtype=complex)
    covered_trace = 0.0
    wv = space.measure if w is None else space.measure * np.asarray(getattr(w, "values", w))
    active_cubes = []
    for k in parts.levels:
        pc = parts.p_cubes[k]
        active = np.flatnonzero(_opnorm(pc) > 1e-12)
        if active.size == 0:
            continue
        radius = (3 * system.C1 + 1) * system.delta ** (k + 1)
        centers = system.level_centers(k)[active]
        inside = np.stack([space.dists_from(int(z)) <= radius for z in centers], axis=1)
        total += np.einsum("sa,aij->sij", inside.astype(float), pc[active])
        ranks = np.rint(np.einsum("aii->a", pc[active]).real)
        covered_trace += float(np.dot(wv, inside.astype(float) @ ranks))
        active_cubes.append((k, active, inside))
    ev, vec = _eigh(_hermitize(total))
    keep = (ev > JOIN_CUT).astype(float)
    join = (vec * keep[..., None, :]) @ _adj(vec)
    zeta = ProjectionField(space, np.eye(d) - join)

    cancel = 0.0
    for k, active, inside in active_cubes:
        pc = parts.p_cubes[k][active]
        for a in range(active.size):
            pts = np.flatnonzero(inside[:, a])
            prod = zeta.values[pts] @ pc[a]
            cancel = max(cancel, float(np.max(_opnorm(prod), initial=0.0)))
    perp_trace = trace_phi(OpField(space, join), w)
    report = {
        "cancellation_defect": cancel,
        "phi_w_zeta_perp": perp_trace,
        "join_trace_bound": covered_trace,
        "within_join_bound": perp_trace <= covered_trace * (1 + 1e-9) + 1e-12,
    }
    if f is not None:
        m_a1 = 1.0 if w is None else martingale_a1_characteristic(system, w)
        f1 = lp_norm(f, 1, w)
        fitted = perp_trace * parts.lam / (m_a1**2 * f1) if f1 > 0 else 0.0
        report.update(m_A1=m_a1, fitted_constant=fitted)
        if K is not None and eps is not None:
            geo = zeta_geometric_bound(system, K, eps)
            report.update(geometric_bound=geo, within_geometric_bound=fitted <= geo)
    parts.zeta = zeta
    parts.diagnostics["zeta"] = report
    return zeta


@dataclass
class CancellationReport:
    small_scale_defect_d: float = 0.0
    small_scale_defect_off: float = 0.0
    reduction_defect_d: float = 0.0
    reduction_defect_off: float = 0.0
    off_diagonal_constant: float = 0.0
    off_diagonal_zero_violations: int = 0
    inclusion_failures: int = 0
    pairs_small: int = 0
    pairs_large: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def exact_pass(self, tol_small: float = 1e-9, tol_reduction: float = 1e-10) -> bool:
        return (
            self.small_scale_defect_d <= tol_small
            and self.small_scale_defect_off <= tol_small
            and self.reduction_defect_d <= tol_reduction
            and self.reduction_defect_off <= tol_reduction
            and self.off_diagonal_zero_violations == 0
        )


def cancellation_suite(
    ctx: OperatorContext,
    parts: CZParts,
    f: OpField,
    k_levels: Optional[Sequence[int]] = None,
    n_levels: Optional[Sequence[int]] = None,
    points: Optional[Sequence[int]] = None,
) -> CancellationReport:
    """Exact small-scale cancellation under zeta, the boundary reduction, and the off-diagonal ratio.

    For k <= n: zeta(s) (A_{delta^k} - E_k) b_n(s) zeta(s) = 0.
    For k > n: A_{delta^k} b_n = M_{k,n} b_n, because b_n integrates to zero
    over every level-n cube.  The off-diagonal ratio is
    ||integral of b_n^off over the inner boundary set||_1 divided by
    lambda times the integral of tr p_n over the outer boundary set.
    """
    if parts.zeta is None:
        zeta_projection(ctx, parts)
    z = parts.zeta.values
    k_levels = ctx.square_levels if k_levels is None else k_levels
    n_levels = [k for k in parts.levels if k < ctx.system.k_max] if n_levels is None else n_levels
    pts = np.arange(ctx.space.n_points) if points is None else np.asarray(points)
    mu = ctx.space.measure
    rep = CancellationReport()
    scale = max(1.0, float(np.max(np.abs(f.values))))
    for n in n_levels:
        bd = parts.b_d_level(f, n)
        bo = parts.b_off_level(f, n)
        tr_p = np.einsum("xii->x", parts.p_fields[n].values).real
        for k in k_levels:
            if k <= n:
                for b, attr in ((bd, "small_scale_defect_d"), (bo, "small_scale_defect_off")):
                    diff = ball_average(ctx, b, k) - conditional_expectation(ctx, b, k)
                    val = z[pts] @ diff[pts] @ z[pts]
                    setattr(rep, attr, max(getattr(rep, attr),
                                           float(np.max(_opnorm(val))) / scale))
                rep.pairs_small += 1
            else:
                for b, attr in ((bd, "reduction_defect_d"), (bo, "reduction_defect_off")):
                    diff = ball_average(ctx, b, k) - boundary_average(ctx, b, None, k, n)
                    setattr(rep, attr, max(getattr(rep, attr),
                                           float(np.max(np.abs(diff[pts]))) / scale))
                rep.pairs_large += 1
                for s in pts:
                    sets = boundary_sets(ctx, int(s), k, n)
                    rep.inclusion_failures += not sets.inclusion_holds
                    integral = np.tensordot(mu[sets.inner], bo[sets.inner], axes=1)
                    num = float(np.abs(_eigvalsh(_hermitize(integral))).sum())
                    den = parts.lam * float(np.dot(mu[sets.outer], tr_p[sets.outer]))
                    if den > 0:
                        rep.off_diagonal_constant = max(rep.off_diagonal_constant, num / den)
                    elif num > 1e-10 * scale:
                        rep.off_diagonal_zero_violations += 1
    return rep
