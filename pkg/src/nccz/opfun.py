"""Matrix-valued fields on a finite space: traces, weighted norms, spectral projections.

A field is an array of shape (n_points, d, d).  Norms are computed through
singular values (eigenvalues for Hermitian fields), so |f|^p never has to be
formed explicitly.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .space import Space

__all__ = [
    "OpField",
    "ProjectionField",
    "EigensolverFailure",
    "FieldFormatError",
    "RCNorm",
    "trace_phi",
    "lp_norm",
    "singular_values",
    "distribution",
    "weak_l1_quasinorm",
    "spectral_projection",
    "sequence_norm_rc",
    "rademacher_average",
    "holder_pairing",
    "field_to_bytes",
    "field_from_bytes",
    "field_to_json",
    "field_from_json",
]

HERMITIAN_TOL = 1e-12
PSD_TOL = 1e-10
MAGIC = b"NCOF"
HEADER = struct.Struct("<4sIII")  # magic, n points, d, support size


class EigensolverFailure(RuntimeError):
    """LAPACK failed to diagonalize a matrix."""


class FieldFormatError(ValueError):
    """A serialized field is malformed."""


def _weights(space: Space, w) -> np.ndarray:
    """mu(x) w(x) per point, accepting a Weight, a raw array or None."""
    if w is None:
        return space.measure
    values = getattr(w, "values", w)
    return space.measure * np.asarray(values, dtype=float)


@dataclass(eq=False)
class OpField:
    space: Space
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None, None]
        if v.ndim != 3 or v.shape[1] != v.shape[2] or v.shape[0] != self.space.n_points:
            raise ValueError(
                f"field values must have shape ({self.space.n_points}, d, d), got {v.shape}"
            )
        self.values = v.astype(complex, copy=False)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.values).reshape(len(self.values), -1).max(axis=1) > 0)

    def hermitian_defect(self) -> float:
        """max_x ||A - A*|| / max(1, ||A||) in Frobenius norm."""
        v = self.values
        diff = np.linalg.norm(v - v.conj().transpose(0, 2, 1), axis=(1, 2))
        scale = np.maximum(np.linalg.norm(v, axis=(1, 2)), 1.0)
        return float(np.max(diff / scale))

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        return self.hermitian_defect() <= tol

    def min_eigenvalue(self) -> float:
        return float(np.min(_eigvalsh(_hermitize(self.values))))

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return self.is_hermitian(1e-10) and self.min_eigenvalue() >= -tol

    def like(self, values: np.ndarray) -> "OpField":
        return OpField(self.space, values)

    def __add__(self, other):
        return self.like(self.values + _vals(other))

    def __sub__(self, other):
        return self.like(self.values - _vals(other))

    def __neg__(self):
        return self.like(-self.values)

    def __mul__(self, c):
        return self.like(self.values * c)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.like(self.values @ _vals(other))

    def adjoint(self) -> "OpField":
        return self.like(self.values.conj().transpose(0, 2, 1))

    @classmethod
    def zeros(cls, space: Space, d: int) -> "OpField":
        return cls(space, np.zeros((space.n_points, d, d), dtype=complex))

    @classmethod
    def identity(cls, space: Space, d: int) -> "OpField":
        return cls(space, np.broadcast_to(np.eye(d, dtype=complex), (space.n_points, d, d)).copy())


class ProjectionField(OpField):
    def projection_defect(self) -> float:
        """max_x ||P^2 - P|| in Frobenius norm."""
        v = self.values
        return float(np.max(np.linalg.norm(v @ v - v, axis=(1, 2))))

    def check(self, tol: float = 1e-10) -> None:
        if self.projection_defect() > tol or self.hermitian_defect() > HERMITIAN_TOL * 10:
            raise ValueError("field is not a projection field")

    def rank(self) -> np.ndarray:
        return np.rint(np.einsum("xii->x", self.values).real).astype(int)


def _vals(x):
    return x.values if isinstance(x, OpField) else x


def _hermitize(v: np.ndarray) -> np.ndarray:
    return 0.5 * (v + v.conj().swapaxes(-1, -2))


def _eigvalsh(v: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.eigvalsh(v)
    except np.linalg.LinAlgError as exc:
        raise EigensolverFailure(str(exc)) from exc


def _eigh(v: np.ndarray):
    try:
        return np.linalg.eigh(v)
    except np.linalg.LinAlgError as exc:
        raise EigensolverFailure(str(exc)) from exc


def singular_values(values: np.ndarray, hermitian: Optional[bool] = None) -> np.ndarray:
    """Singular values of every matrix in a stack (eigenvalue magnitudes if Hermitian)."""
    if hermitian is None:
        defect = np.abs(values - values.conj().swapaxes(-1, -2)).max(initial=0.0)
        hermitian = defect <= 1e-12 * max(1.0, float(np.abs(values).max(initial=0.0)))
    if hermitian:
        return np.abs(_eigvalsh(_hermitize(values)))
    try:
        return np.linalg.svd(values, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise EigensolverFailure(str(exc)) from exc


def trace_phi(f, w=None) -> float:
    """sum_x mu(x) w(x) tr f(x), unnormalized matrix trace."""
    tr = np.einsum("xii->x", f.values)
    return float(np.real(np.dot(_weights(f.space, w), tr)))


def _lp_from_sv(sv: np.ndarray, mw: np.ndarray, p: float) -> np.ndarray:
    # sv has points on axis -2 and singular values on axis -1
    if np.isinf(p):
        return sv.max(axis=(-1, -2), initial=0.0)
    total = np.sum((sv**p).sum(axis=-1) * mw, axis=-1)
    return total ** (1.0 / p)


def lp_norm(f, p: float, w=None) -> float:
    """(sum_x mu(x) w(x) tr |f(x)|^p)^(1/p); p = inf gives max_x ||f(x)||."""
    if not (p >= 1 or np.isinf(p)):
        raise ValueError("p must be >= 1")
    sv = singular_values(f.values)
    return float(_lp_from_sv(sv, _weights(f.space, w), p))


def distribution(f, lam: float, w=None) -> float:
    """phi_w(chi_(lam, inf)(|f|)): weighted count of singular values above lam."""
    sv = singular_values(f.values)
    return float(np.dot((sv > lam).sum(axis=1), _weights(f.space, w)))


def weak_l1_quasinorm(f, w=None, lambda_grid: Optional[Sequence[float]] = None) -> float:
    """sup over lam of lam * phi_w(chi_(lam, inf)(|f|)).

    Without a grid the supremum is exact: it is attained as lam increases to
    one of the singular values s_j, where it equals s_j * W(sv >= s_j).
    """
    sv = singular_values(f.values)
    mw = np.broadcast_to(_weights(f.space, w)[:, None], sv.shape)
    return _weak_from_sv(sv.ravel(), mw.ravel(), lambda_grid)


def _weak_from_sv(sv, mw, lambda_grid=None) -> float:
    if lambda_grid is not None:
        return max((lam * float(mw[sv > lam].sum()) for lam in lambda_grid), default=0.0)
    keep = sv > 0
    sv, mw = sv[keep], mw[keep]
    if sv.size == 0:
        return 0.0
    order = np.argsort(-sv, kind="stable")
    sv, mw = sv[order], mw[order]
    tail = np.cumsum(mw)
    # among equal singular values take the full tied mass
    last = np.r_[sv[1:] != sv[:-1], True]
    return float(np.max(sv[last] * tail[last]))


def spectral_projection(
    A: np.ndarray,
    lo: float,
    hi: float,
    closed_lo: bool = False,
    closed_hi: bool = True,
    tol: float = 1e-10,
) -> np.ndarray:
    """Spectral projection of Hermitian A (or a stack) onto an interval, default (lo, hi].

    Eigenvalues within ``tol`` of an endpoint count as equal to it and belong
    to the interval exactly when that side is closed.
    """
    A = np.asarray(A)
    ev, vec = _eigh(_hermitize(A))
    if closed_lo:
        above = ev >= lo - tol
    else:
        above = ev > lo + tol
    if np.isinf(hi):
        below = np.ones_like(above)
    elif closed_hi:
        below = ev <= hi + tol
    else:
        below = ev < hi - tol
    keep = above & below
    out = (vec * keep[..., None, :].astype(float)) @ vec.conj().swapaxes(-1, -2)
    # keep the trivial cases exact rather than eigenvector round-off
    out[keep.all(axis=-1)] = np.eye(A.shape[-1])
    out[~keep.any(axis=-1)] = 0.0
    return out


@dataclass(frozen=True)
class RCNorm:
    value: float
    stderr: float
    n_samples: int
    exhaustive: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _stack(seq) -> np.ndarray:
    return np.stack([_vals(f) for f in seq])


def _sign_patterns(K: int, n_signs: int, seed: int, exhaustive: bool):
    if exhaustive:
        for bits in itertools.product((1.0, -1.0), repeat=K):
            yield np.array(bits)
    else:
        for i in range(n_signs):
            rng = np.random.default_rng([seed, i])
            yield rng.choice((-1.0, 1.0), size=K)


def rademacher_average(
    seq,
    p: float,
    w=None,
    power: float = 1.0,
    n_signs: int = 64,
    seed: int = 0,
    exhaustive: bool = False,
    chunk: int = 64,
) -> RCNorm:
    """Mean over sign vectors of ||sum_k eps_k f_k||_{p,w}^power.

    Sample i uses the generator seeded by (seed, i).  ``exhaustive``
    enumerates all 2^K sign patterns instead (K <= 16).
    """
    seq = list(seq)
    if not seq:
        return RCNorm(0.0, 0.0, 0, exhaustive)
    K = len(seq)
    if exhaustive and K > 16:
        raise ValueError("exhaustive sign enumeration limited to 16 terms")
    space = seq[0].space
    mw = _weights(space, w)
    stack = _stack(seq)
    hermitian = all(f.is_hermitian(1e-10) for f in seq)
    samples: List[float] = []
    patterns = list(_sign_patterns(K, n_signs, seed, exhaustive))
    for start in range(0, len(patterns), chunk):
        signs = np.array(patterns[start:start + chunk])
        sums = np.einsum("sk,kxij->sxij", signs, stack)
        sv = singular_values(sums, hermitian=hermitian)
        samples.extend((_lp_from_sv(sv, mw, p) ** power).tolist())
    arr = np.array(samples)
    stderr = 0.0 if exhaustive or arr.size < 2 else float(arr.std(ddof=1) / np.sqrt(arr.size))
    return RCNorm(float(arr.mean()), stderr, int(arr.size), exhaustive)


def _square_root_psd(v: np.ndarray) -> np.ndarray:
    ev, vec = _eigh(_hermitize(v))
    return (vec * np.sqrt(np.clip(ev, 0, None))[..., None, :]) @ vec.conj().swapaxes(-1, -2)


def sequence_norm_rc(
    seq,
    p: float,
    w=None,
    mode: str = "column",
    n_signs: int = 64,
    seed: int = 0,
    exhaustive: bool = False,
) -> RCNorm:
    """Column, row or Rademacher (Khintchine) norm of a finite sequence of fields.

    column: ||(sum f_k* f_k)^(1/2)||_{p,w}; row: the same with f_k f_k*;
    rc_via_khintchine: E ||sum eps_k f_k||_{p,w} over sign vectors.
    """
    seq = list(seq)
    if not seq:
        return RCNorm(0.0, 0.0, 0, True)
    if mode in ("column", "row"):
        stack = _stack(seq)
        adj = stack.conj().swapaxes(-1, -2)
        gram = (adj @ stack if mode == "column" else stack @ adj).sum(axis=0)
        root = OpField(seq[0].space, _square_root_psd(gram))
        return RCNorm(lp_norm(root, p, w), 0.0, 1, True)
    if mode == "rc_via_khintchine":
        if not exhaustive and n_signs < 64:
            raise ValueError("Khintchine mode needs at least 64 sign vectors")
        return rademacher_average(seq, p, w, 1.0, n_signs, seed, exhaustive)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class HolderCheck:
    value: float
    bound: float
    holds: bool

    @property
    def margin(self) -> float:
        return self.bound - self.value


def holder_pairing(f_seq, g_seq, p: float, q: float, w=None) -> HolderCheck:
    """||sum f_k* g_k||_{r,w} against column_p(f) column_q(g), with 1/r = 1/p + 1/q."""
    f_seq, g_seq = list(f_seq), list(g_seq)
    if len(f_seq) != len(g_seq):
        raise ValueError("sequences must have equal length")
    r = 1.0 / (1.0 / p + 1.0 / q)
    if r < 1:
        raise ValueError("need 1/p + 1/q <= 1")
    if not f_seq:
        return HolderCheck(0.0, 0.0, True)
    pair = sum((f.adjoint() @ g).values for f, g in zip(f_seq, g_seq))
    value = lp_norm(OpField(f_seq[0].space, pair), r, w)
    bound = (sequence_norm_rc(f_seq, p, w, "column").value
             * sequence_norm_rc(g_seq, q, w, "column").value)
    return HolderCheck(value, bound, value <= bound * (1 + 1e-10) + 1e-14)


def field_to_bytes(f: OpField) -> bytes:
    """Header (magic, |G|, d, support size), support indices, then matrices row-major."""
    supp = f.support.astype("<u4")
    body = np.ascontiguousarray(f.values[supp], dtype="<c16")
    return HEADER.pack(MAGIC, f.space.n_points, f.dim, supp.size) + supp.tobytes() + body.tobytes()


def field_from_bytes(space: Space, blob: bytes) -> OpField:
    if len(blob) < HEADER.size:
        raise FieldFormatError("truncated header")
    magic, n, d, m = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if n != space.n_points:
        raise FieldFormatError(f"field has {n} points, space has {space.n_points}")
    off = HEADER.size
    need = off + 4 * m + 16 * m * d * d
    if len(blob) != need:
        raise FieldFormatError(f"expected {need} bytes, got {len(blob)}")
    supp = np.frombuffer(blob, dtype="<u4", count=m, offset=off).astype(np.int64)
    mats = np.frombuffer(blob, dtype="<c16", count=m * d * d, offset=off + 4 * m)
    values = np.zeros((n, d, d), dtype=complex)
    values[supp] = mats.reshape(m, d, d)
    return OpField(space, values)


def field_to_json(f: OpField) -> str:
    supp = f.support
    return json.dumps({
        "n_points": f.space.n_points,
        "dim": f.dim,
        "support": supp.tolist(),
        "real": f.values[supp].real.tolist(),
        "imag": f.values[supp].imag.tolist(),
    }, sort_keys=True)


def field_from_json(space: Space, text: str) -> OpField:
    doc = json.loads(text)
    if doc["n_points"] != space.n_points:
        raise FieldFormatError("point count mismatch")
    d = int(doc["dim"])
    values = np.zeros((space.n_points, d, d), dtype=complex)
    if doc["support"]:
        values[doc["support"]] = np.array(doc["real"]) + 1j * np.array(doc["imag"])
    return OpField(space, values)
