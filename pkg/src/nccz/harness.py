"""Randomized experiment driver.

Builds (space, cube system, weight, field, lambda) instances from a config,
runs every verification suite and emits deterministic JSON reports.  Exact
identities decide pass/fail; fitted constants are only reported.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .cubes import build_cube_system
from .cz import (
    cancellation_suite,
    cz_decompose,
    zeta_projection,
)
from .opfun import (
    OpField,
    _weak_from_sv,
    _weights,
    lp_norm,
    rademacher_average,
    singular_values,
    trace_phi,
)
from .space import build_torus_space, measure_annular_decay
from .transforms import (
    annulus_kernel_sum,
    boundary_average,
    halo_ratio_mean,
    make_context,
    slope_fit,
    square_differences,
)
from .weights import (
    a1_characteristic,
    check_weight_inequalities,
    make_weight,
    martingale_a1_characteristic,
)

__all__ = [
    "SCHEMA_VERSION",
    "SUITES",
    "ConfigError",
    "HypothesisFailed",
    "ExperimentConfig",
    "Instance",
    "load_config",
    "derive_seed",
    "build_instance",
    "gen_positive_field",
    "lambda_grid",
    "run_identities",
    "run_weak11",
    "run_strongpp",
    "run_fits",
    "run_all",
    "almost_orthogonality_check",
    "new_report",
    "merge_reports",
    "report_json",
    "exact_suites_pass",
    "missing_suites",
    "parse_config",
]

SCHEMA_VERSION = "1.0"
FIELD_KINDS = ("smooth_bump", "sparse_spikes", "random_psd", "adversarial_tower")
THREADS_ENV = "NCCZ_THREADS"

# name -> (kind, what it checks); every bound of the decomposition argument appears once
SUITES: Dict[str, tuple] = {
    "cuculescu_trace": ("exact", "phi(1 - q) <= ||f||_1 / lambda with unit weight"),
    "p_level_bound": ("exact", "p_k f_k p_k <= c lambda p_k, c against measure and geometric bounds"),
    "weighted_trace": ("exact", "q f_k q <= lambda and lambda phi_w(1 - q) <= m_A1 ||f||_{1,w}"),
    "cz_decomposition": ("exact", "reconstruction, mean-zero bad parts, ||g||_{1,w} and ||g||_inf bounds"),
    "zeta_estimate": ("exact", "zeta cancellation and phi_w(zeta-perp) bounds"),
    "small_scale_cancellation": ("exact", "zeta (A_k - E_k) b_n zeta = 0 for k <= n"),
    "bad_diagonal": ("exact", "A_k b_{d,n} = M_{k,n} b_{d,n} for k > n; weak ratio of zeta T b_d zeta"),
    "bad_off_diagonal": ("exact", "boundary integral of b_n^off against lambda tr p_n; weak ratio of zeta T b_off zeta"),
    "boundary_average_decay": ("fitted", "||M_{k,n} h||_{p,w} / ||h||_{p,w} decays like delta^((n-k) eps / p)"),
    "annulus_kernel": ("fitted", "weighted annulus kernel sum <= C w(y) delta^((n-k) eps)"),
    "halo_decay": ("fitted", "mu(halo) / mu(Q) <= C delta^((k-n) eta)"),
    "strong_estimate": ("exact", "L2 square function bound and almost orthogonality on martingale differences"),
    "weak_good_part": ("fitted", "lambda phi_w(|T g| > lambda) / ||f||_{1,w}"),
    "strong_pp": ("exact", "Rademacher L^p ratio; exact p = 2 sign identity"),
    "weak_main": ("exact", "lambda phi_w(|T f| > lambda) / ||f||_{1,w}; three-part quasi-triangle inequality"),
}


class ConfigError(ValueError):
    """Malformed experiment configuration; the message carries the line number."""


class HypothesisFailed(AssertionError):
    def __init__(self, n: int, k: int, lhs: float, rhs: float):
        self.n, self.k = n, k
        super().__init__(f"||S_{k} u_{n}|| = {lhs:.6g} exceeds sigma(n - k) ||v_n|| = {rhs:.6g}")


@dataclass
class ExperimentConfig:
    space_kind: str = "torus"
    space_dim: int = 1
    space_side: int = 16
    space_metric: str = "linf_word"
    delta: float = 2.0
    c0: float = 1.0
    C0: float = 1.5
    cube_seed: int = 0
    weight_kind: str = "power_like"
    weight_params: Dict[str, float] = field(default_factory=lambda: {"a": 0.5})
    weight_seed: int = 0
    matrix_dim: int = 2
    field_kind: str = "mixed"
    p_list: List[float] = field(default_factory=lambda: [1.5, 2.0, 3.0, 4.0])
    lambda_lo: float = 0.1
    lambda_hi: float = 10.0
    n_lambda: int = 7
    trials: int = 3
    n_signs: int = 64
    seed: int = 0
    sides: List[int] = field(default_factory=lambda: [16, 32, 64])
    tolerances: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.space_kind != "torus":
            raise ConfigError(f"unsupported space kind {self.space_kind!r}")
        if self.field_kind != "mixed" and self.field_kind not in FIELD_KINDS:
            raise ConfigError(f"unknown field kind {self.field_kind!r}")

    def tol(self, name: str) -> float:
        return float(self.tolerances.get(name, DEFAULT_TOLERANCES[name]))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_side(self, side: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["space_side"] = int(side)
        return ExperimentConfig(**data)


DEFAULT_TOLERANCES = {
    "reconstruction": 1e-10,
    "mean_zero": 1e-10,
    "commutator": 1e-9,
    "order": 1e-9,
    "cancellation": 1e-10,
    "small_scale": 1e-9,
    "reduction": 1e-10,
    "martingale": 1e-12,
    "khintchine": 1e-8,
}

# config key -> (ExperimentConfig field, parser)
_KEYS: Dict[str, tuple] = {
    "space.kind": ("space_kind", str),
    "space.dim": ("space_dim", int),
    "space.side": ("space_side", int),
    "space.metric": ("space_metric", str),
    "cubes.delta": ("delta", float),
    "cubes.c0": ("c0", float),
    "cubes.C0": ("C0", float),
    "cubes.seed": ("cube_seed", int),
    "weight.kind": ("weight_kind", str),
    "weight.seed": ("weight_seed", int),
    "field.kind": ("field_kind", str),
    "field.dim": ("matrix_dim", int),
    "experiment.trials": ("trials", int),
    "experiment.seed": ("seed", int),
    "experiment.p_list": ("p_list", lambda v: [float(x) for x in v]),
    "experiment.lambda_lo": ("lambda_lo", float),
    "experiment.lambda_hi": ("lambda_hi", float),
    "experiment.n_lambda": ("n_lambda", int),
    "experiment.n_signs": ("n_signs", int),
    "experiment.sides": ("sides", lambda v: [int(x) for x in v]),
}
_WEIGHT_PARAMS = ("c", "high", "low", "a", "sigma", "smooth", "cap", "max_tries")


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def _key_lines(text: str) -> Dict[str, int]:
    """Line number of every section.key in a config text."""
    lines, section = {}, ""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif "=" in line and not line.startswith(("#", ";")):
            lines[f"{section}.{line.split('=', 1)[0].strip()}"] = i
    return lines


def load_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    """Read an INI-style config: [section] headers, key = value lines.

    Values are Python literals (numbers, quoted strings, lists); bare words
    are read as strings.  ``seed`` overrides experiment.seed.
    """
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, seed=seed, source=path)


def parse_config(text: str, seed: Optional[int] = None, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _key_lines(text)
    kwargs: Dict[str, object] = {}
    weight_params: Dict[str, float] = {}
    tolerances: Dict[str, float] = {}
    for section in parser.sections():
        for key, raw in parser.items(section, raw=True):
            name = f"{section}.{key}"
            where = f"{source}:{lines.get(name, '?')}"
            value = _literal(raw)
            try:
                if name in _KEYS:
                    attr, conv = _KEYS[name]
                    kwargs[attr] = conv(value)
                elif section == "weight" and key in _WEIGHT_PARAMS:
                    weight_params[key] = float(value)
                elif section == "tolerances" and key in DEFAULT_TOLERANCES:
                    tolerances[key] = float(value)
                else:
                    raise ConfigError(f"{where}: unknown key {name!r}")
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{where}: bad value {raw!r} for {name}: {exc}") from exc
    if weight_params:
        kwargs["weight_params"] = weight_params
    if tolerances:
        kwargs["tolerances"] = tolerances
    if seed is not None:
        kwargs["seed"] = int(seed)
    return ExperimentConfig(**kwargs)


def derive_seed(master: int, trial: int, tag: str) -> int:
    """A 63-bit seed from (master seed, trial index, purpose tag)."""
    h = hashlib.blake2b(f"{master}:{trial}:{tag}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(eq=False)
class Instance:
    config: ExperimentConfig
    space: object
    system: object
    ctx: object
    decay: object
    weight: object
    m_a1: float
    a1: float

    @property
    def K(self) -> float:
        return self.decay.K

    @property
    def eps(self) -> float:
        return self.decay.eps


def build_instance(config: ExperimentConfig, side: Optional[int] = None) -> Instance:
    side = config.space_side if side is None else side
    space = build_torus_space(config.space_dim, side, config.space_metric)
    system = build_cube_system(space, config.delta, config.c0, config.C0, seed=config.cube_seed)
    ctx = make_context(system)
    decay = measure_annular_decay(space, seed=config.cube_seed)
    weight = make_weight(space, config.weight_kind, config.weight_params, seed=config.weight_seed)
    return Instance(
        config, space, system, ctx, decay, weight,
        m_a1=martingale_a1_characteristic(system, weight),
        a1=a1_characteristic(space, weight),
    )


def _random_projection(rng, d: int, rank: int) -> np.ndarray:
    z = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    qmat, _ = np.linalg.qr(z)
    return qmat @ qmat.conj().T


def gen_positive_field(
    space, d: int, kind: str, seed: int, system=None, params: Optional[Mapping] = None
) -> OpField:
    """A PSD matrix field of one of four shapes.

    smooth_bump        amplitude * exp(-dist^2 / 2 width^2) * (a fixed PSD matrix)
    sparse_spikes      ``spikes`` list of (point, c, projection) or ``count`` random
                       spikes c * (random rank-one projection)
    random_psd         A A* times a Pareto(``tail``) pointwise scale; tail=None keeps A A*
    adversarial_tower  mass c_k / mu(Q_k) on a chain of nested cubes around one point
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    n = space.n_points
    out = np.zeros((n, d, d), dtype=complex)
    if kind == "smooth_bump":
        amp = float(params.get("amplitude", 1.0))
        width = float(params.get("width", max(1.0, space.side / 8)))
        x0 = int(params.get("center", rng.integers(n)))
        base = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        mat = base @ base.conj().T / d + 0.1 * np.eye(d)
        profile = amp * np.exp(-space.dists_from(x0) ** 2 / (2 * width**2))
        out = profile[:, None, None] * mat
    elif kind == "sparse_spikes":
        spikes = params.get("spikes")
        if spikes is None:
            count = int(params.get("count", max(1, n // 16)))
            pts = rng.choice(n, size=min(count, n), replace=False)
            spikes = [(int(x), float(rng.pareto(1.5) + 1.0), _random_projection(rng, d, 1))
                      for x in pts]
        for x, c, proj in spikes:
            out[int(x)] += c * np.asarray(proj)
    elif kind == "random_psd":
        a = rng.standard_normal((n, d, d)) + 1j * rng.standard_normal((n, d, d))
        tail = params.get("tail", 2.0)
        scale = rng.pareto(float(tail), size=n) + 0.05 if tail else np.ones(n)
        out = scale[:, None, None] * (a @ a.conj().transpose(0, 2, 1)) / d
    elif kind == "adversarial_tower":
        if system is None:
            raise ValueError("adversarial_tower needs a cube system")
        x0 = int(params.get("center", rng.integers(n)))
        mu = space.measure
        for k in system.levels:
            lab = system.label(k)
            members = lab == lab[x0]
            c = float(rng.uniform(1.0, 4.0)) * mu[members].sum() ** 0.5
            proj = _random_projection(rng, d, int(rng.integers(1, d + 1)))
            out[members] += c / mu[members].sum() * proj
        out += 1e-3 * np.eye(d)
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    return OpField(space, 0.5 * (out + out.conj().transpose(0, 2, 1)))


def _trial_field(inst: Instance, trial: int) -> OpField:
    cfg = inst.config
    kind = FIELD_KINDS[trial % len(FIELD_KINDS)] if cfg.field_kind == "mixed" else cfg.field_kind
    seed = derive_seed(cfg.seed, trial, f"field:{kind}")
    return gen_positive_field(inst.space, cfg.matrix_dim, kind, seed, inst.system)


def lambda_grid(inst: Instance, f: OpField):
    """Geometric lambda grid over [lo, hi] * phi_w(f) / w(G), minus values below the top average.

    Returns (kept values, number dropped because the coarsest average exceeds them).
    """
    cfg = inst.config
    base = trace_phi(f, inst.weight) / inst.weight.mass(inst.space)
    grid = base * np.geomspace(cfg.lambda_lo, cfg.lambda_hi, cfg.n_lambda)
    top = float(np.max(np.linalg.eigvalsh(inst.system.average(inst.system.k_max, f.values)[0])))
    kept = [float(x) for x in grid if x >= top * (1 + 1e-12)]
    return kept, len(grid) - len(kept)


class _Suite:
    """Accumulator for one suite: running maxima, counters and exact pass flag."""

    def __init__(self, name: str):
        self.name = name
        self.kind = SUITES[name][0]
        self.passed = True
        self.instances = 0
        self.maxima: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}
        self.witness: Optional[dict] = None
        self.notes: Dict[str, object] = {}

    def record(self, key: str, value: float) -> None:
        value = float(value)
        self.maxima[key] = max(self.maxima.get(key, -np.inf), value)

    def count(self, key: str, n: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def require(self, ok: bool, witness: dict) -> None:
        if not ok:
            self.passed = False
            if self.witness is None:
                self.witness = witness

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "checks": SUITES[self.name][1],
            "pass": bool(self.passed),
            "instances": self.instances,
            "max": {k: _num(v) for k, v in sorted(self.maxima.items())},
            "counts": dict(sorted(self.counts.items())),
            "witness": self.witness,
            "notes": self.notes,
        }


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, int, np.floating, np.integer, np.bool_, bool)):
        return _num(obj)
    return obj


def _map_trials(fn: Callable[[int], dict], trials: int) -> List[dict]:
    threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if threads <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(trials)))


def _signs(K: int, n_signs: int, seed: int) -> np.ndarray:
    return np.array([np.random.default_rng([seed, i]).choice((-1.0, 1.0), size=K)
                     for i in range(n_signs)])


def _signed_singular_values(stack: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Singular values of sum_k eps_k stack_k for every sign row, shape (S, n, d)."""
    sums = np.einsum("sk,kxij->sxij", signs, stack)
    return singular_values(sums, hermitian=True)


def _weak_ratio(sv: np.ndarray, mw: np.ndarray, lam: float, f1: float) -> float:
    """lam * E_eps phi_w(chi_(lam, inf)(|.|)) / ||f||_{1,w} from per-sample singular values."""
    counts = (sv > lam).sum(axis=-1)  # (S, n)
    return float(lam * np.mean(counts @ mw) / f1) if f1 > 0 else 0.0


def _identity_trial(inst: Instance, trial: int) -> dict:
    """Every exact identity and fitted ratio for one field over its lambda grid."""
    cfg = inst.config
    ctx, space, w = inst.ctx, inst.space, inst.weight
    f = _trial_field(inst, trial)
    lams, dropped = lambda_grid(inst, f)
    f1w = lp_norm(f, 1, w)
    f1 = lp_norm(f, 1)
    mw = _weights(space, w)
    levels = list(ctx.square_levels)
    Tf = np.stack([t.values for t in square_differences(ctx, f)])
    signs = _signs(len(levels), cfg.n_signs, derive_seed(cfg.seed, trial, "signs"))
    sv_f = _signed_singular_values(Tf, signs)
    out: Dict[str, list] = {"dropped": dropped, "rows": []}
    for lam in lams:
        parts = cz_decompose(ctx, f, lam, w, inst.K, inst.eps, check=False)
        zeta_projection(ctx, parts, w, inst.K, inst.eps, f)
        canc = cancellation_suite(ctx, parts, f)
        diag = parts.diagnostics
        row = {"lam": lam, "cuc": diag["cuculescu"], "dec": diag["decomposition"],
               "gal": diag["weighted_trace"], "zeta": diag["zeta"], "canc": canc.to_dict(),
               "trace_unit": (parts.stopped_trace(), f1 / lam)}
        z = parts.zeta.values
        part_sv = {}
        for name, h in (("g", parts.g), ("b_d", parts.b_d), ("b_off", parts.b_off)):
            Th = np.stack([t.values for t in square_differences(ctx, h)])
            part_sv[name] = _signed_singular_values(Th, signs)
            if name != "g":
                part_sv["zeta_" + name] = _signed_singular_values(z @ Th @ z, signs)
        row["weak_f"] = _weak_ratio(sv_f, mw, lam, f1w)
        row["weak_g"] = _weak_ratio(part_sv["g"], mw, lam, f1w)
        row["weak_zeta_b_d"] = _weak_ratio(part_sv["zeta_b_d"], mw, lam / 9, f1w)
        row["weak_zeta_b_off"] = _weak_ratio(part_sv["zeta_b_off"], mw, lam / 9, f1w)
        # quasi-triangle: count(|Tf| > lam) <= sum over parts of count(|T h| > lam/3), per sign
        lhs = (sv_f > lam).sum(axis=-1) @ mw
        rhs = sum((part_sv[h] > lam / 3).sum(axis=-1) @ mw for h in ("g", "b_d", "b_off"))
        row["triangle_violations"] = int(np.sum(lhs > rhs + 1e-9))
        out["rows"].append(row)
    out["weak_sup"] = _weak_from_sv(
        sv_f.ravel(), np.broadcast_to(mw[None, :, None] / len(signs), sv_f.shape).ravel()
    ) / f1w if f1w > 0 else 0.0
    return out


def _martingale_check(inst: Instance, n_fields: int, seed: int) -> float:
    system = inst.system
    worst = 0.0
    for i in range(n_fields):
        rng = np.random.default_rng([seed, i])
        d = inst.config.matrix_dim
        v = rng.standard_normal((inst.space.n_points, d, d)) + 1j * rng.standard_normal(
            (inst.space.n_points, d, d))
        v = v + v.conj().transpose(0, 2, 1)
        for j in system.levels:
            ej = system.average(j, v)
            for k in system.levels:
                lhs = system.average(k, ej)
                rhs = system.average(max(j, k), v)
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def run_identities(config: ExperimentConfig, inst: Optional[Instance] = None) -> dict:
    """Exact-identity suites (and the fitted ratios that come for free) on one space."""
    inst = inst or build_instance(config)
    cfg = config
    suites = {name: _Suite(name) for name in (
        "cuculescu_trace", "p_level_bound", "weighted_trace", "cz_decomposition",
        "zeta_estimate", "small_scale_cancellation", "bad_diagonal", "bad_off_diagonal",
        "weak_good_part", "weak_main")}
    trials = _map_trials(lambda t: _identity_trial(inst, t), cfg.trials)
    dropped = 0
    nontrivial_zeta = 0
    for t, res in enumerate(trials):
        dropped += res["dropped"]
        suites["weak_main"].record("weak_sup_exact", res["weak_sup"])
        for row in res["rows"]:
            wit = {"trial": t, "lambda": row["lam"]}
            cuc, dec, gal, zeta, canc = row["cuc"], row["dec"], row["gal"], row["zeta"], row["canc"]
            s = suites["cuculescu_trace"]
            s.instances += 1
            for key in ("max_commutator", "max_order_excess", "max_monotonicity_defect",
                        "partition_of_unity_error", "max_p_overlap"):
                s.record(key, cuc[key])
            lhs, rhs = row["trace_unit"]
            s.record("trace_ratio", lhs / rhs if rhs > 0 else 0.0)
            s.require(cuc["max_commutator"] <= cfg.tol("commutator")
                      and cuc["max_order_excess"] <= cfg.tol("order")
                      and lhs <= rhs * (1 + 1e-12), wit)
            s = suites["p_level_bound"]
            s.instances += 1
            pl = dec["p_level"]
            s.record("c", pl["c"])
            s.record("c_over_geometric", pl["c"] / pl["geometric_bound"])
            s.notes["geometric_bound"] = pl["geometric_bound"]
            s.require(pl["within_measure_bound"] and pl["within_geometric_bound"], wit)
            s = suites["weighted_trace"]
            s.instances += 1
            s.record("lhs_over_rhs", gal["lhs"] / gal["rhs"] if gal["rhs"] > 0 else 0.0)
            s.record("order_excess", gal["order_excess"])
            s.require(gal["pass"], wit)
            s = suites["cz_decomposition"]
            s.instances += 1
            s.record("reconstruction_error", dec["reconstruction_error"])
            s.record("mean_zero_b_d", dec["mean_zero_b_d"])
            s.record("mean_zero_b_off", dec["mean_zero_b_off"])
            s.record("g_l1_over_bound", dec["g_l1"] / dec["g_l1_bound"] if dec["g_l1_bound"] > 0 else 0)
            s.record("g_inf_over_lambda", dec["g_inf_over_lambda"])
            s.require(dec["reconstruction_error"] <= cfg.tol("reconstruction")
                      and dec["mean_zero_b_d"] <= cfg.tol("mean_zero")
                      and dec["mean_zero_b_off"] <= cfg.tol("mean_zero")
                      and dec["g_l1_within"] and dec["g_inf_within_geometric"], wit)
            s = suites["zeta_estimate"]
            s.instances += 1
            s.record("cancellation_defect", zeta["cancellation_defect"])
            s.record("fitted_constant", zeta.get("fitted_constant", 0.0))
            s.record("fitted_over_geometric", zeta.get("fitted_constant", 0.0) / zeta["geometric_bound"])
            total = inst.config.matrix_dim * inst.weight.mass(inst.space)
            if zeta["phi_w_zeta_perp"] < total * (1 - 1e-9):
                nontrivial_zeta += 1
            s.require(zeta["cancellation_defect"] <= cfg.tol("cancellation")
                      and zeta["within_join_bound"] and zeta["within_geometric_bound"], wit)
            s = suites["small_scale_cancellation"]
            s.instances += 1
            s.record("defect_b_d", canc["small_scale_defect_d"])
            s.record("defect_b_off", canc["small_scale_defect_off"])
            s.require(max(canc["small_scale_defect_d"], canc["small_scale_defect_off"])
                      <= cfg.tol("small_scale"), wit)
            s = suites["bad_diagonal"]
            s.instances += 1
            s.record("reduction_defect", canc["reduction_defect_d"])
            s.record("weak_ratio", row["weak_zeta_b_d"])
            s.count("inclusion_failures", canc["inclusion_failures"])
            s.require(canc["reduction_defect_d"] <= cfg.tol("reduction")
                      and canc["inclusion_failures"] == 0, wit)
            s = suites["bad_off_diagonal"]
            s.instances += 1
            s.record("reduction_defect", canc["reduction_defect_off"])
            s.record("boundary_constant", canc["off_diagonal_constant"])
            s.record("weak_ratio", row["weak_zeta_b_off"])
            s.require(canc["reduction_defect_off"] <= cfg.tol("reduction")
                      and canc["off_diagonal_zero_violations"] == 0, wit)
            s = suites["weak_good_part"]
            s.instances += 1
            s.record("ratio", row["weak_g"])
            s = suites["weak_main"]
            s.instances += 1
            s.record("ratio", row["weak_f"])
            s.count("triangle_violations", row["triangle_violations"])
            s.require(row["triangle_violations"] == 0, wit)
    suites["zeta_estimate"].notes["instances_with_nontrivial_zeta"] = nontrivial_zeta
    checks = _support_checks(inst, cfg)
    return {
        "space": {"dim": inst.space.dim, "side": inst.space.side, "metric": inst.space.metric_kind},
        "constants": _constants(inst),
        "lambda_dropped": dropped,
        "suites": {k: v.to_dict() for k, v in suites.items()},
        "checks": checks,
    }


def _constants(inst: Instance) -> dict:
    return {
        "K": inst.K, "eps": inst.eps, "K_eps": inst.decay.K_eps,
        "a0": inst.system.a0, "C1": inst.system.C1, "delta": inst.system.delta,
        "strict_regime": inst.system.strict_regime,
        "levels": [inst.system.k_min, inst.system.k_max],
        "square_levels": list(inst.ctx.square_levels),
        "ball_A1": inst.a1, "martingale_A1": inst.m_a1,
        "weight": inst.weight.tag,
        "inner_radius_ratio": inst.system.certification["inner_radius_ratio"],
        "outer_radius_ratio": inst.system.certification["outer_radius_ratio"],
    }


def _support_checks(inst: Instance, cfg: ExperimentConfig) -> dict:
    cert = inst.system.certification
    mart = _martingale_check(inst, 3, derive_seed(cfg.seed, 0, "martingale"))
    ineq = check_weight_inequalities(inst.space, inst.weight, 2.0, seed=derive_seed(cfg.seed, 0, "weight"))
    return {
        "cube_axioms": {"pass": bool(cert["passed"]), "failures": cert["failures"]},
        "martingale_identity": {"pass": mart <= cfg.tol("martingale"), "max_error": mart},
        "weight_containment": {"pass": ineq.containment_violations == 0, **ineq.to_dict()},
    }


def almost_orthogonality_check(
    S: Sequence[Callable[[np.ndarray], np.ndarray]],
    u: Mapping[int, np.ndarray],
    v_norms: Mapping[int, float],
    sigma: Callable[[int], float],
    norm: Callable[[np.ndarray], float],
    k_index: Optional[Sequence[int]] = None,
) -> dict:
    """Check ||S_k u_n|| <= sigma(n - k) ||v_n|| for all pairs, then the summed conclusion.

    Conclusion: sum_k ||S_k h||^2 <= (sum_j sigma(j))^2 sum_n ||v_n||^2 with h = sum_n u_n.
    """
    k_index = list(range(len(S))) if k_index is None else list(k_index)
    js = set()
    for n, un in u.items():
        for k, Sk in zip(k_index, S):
            lhs = norm(Sk(un))
            rhs = sigma(n - k) * v_norms[n]
            js.add(n - k)
            if lhs > rhs * (1 + 1e-12) + 1e-14:
                raise HypothesisFailed(n, k, lhs, rhs)
    h = sum(u.values())
    total = sum(norm(Sk(h)) ** 2 for Sk in S)
    wsum = sum(sigma(j) for j in js)
    bound = wsum**2 * sum(v**2 for v in v_norms.values())
    return {"lhs": total, "bound": bound, "holds": total <= bound * (1 + 1e-12) + 1e-14,
            "sigma_sum": wsum}


def _martingale_differences(inst: Instance, h: np.ndarray) -> Dict[int, np.ndarray]:
    """dh_n = E_n h - E_{n+1} h, with the finest remainder and the top average included."""
    system = inst.system
    avgs = {k: system.average(k, h) for k in system.levels}
    diffs = {system.k_min - 1: h - avgs[system.k_min]}
    for n in system.levels:
        nxt = avgs[n + 1] if n < system.k_max else 0.0
        diffs[n] = avgs[n] - nxt
    return diffs


def _strong_trial(inst: Instance, trial: int) -> dict:
    cfg = inst.config
    ctx, w = inst.ctx, inst.weight
    f = _trial_field(inst, trial)
    levels = list(ctx.square_levels)
    Tf = square_differences(ctx, f)
    out = {}
    for p in cfg.p_list:
        rc = rademacher_average(Tf, p, w, n_signs=cfg.n_signs,
                                seed=derive_seed(cfg.seed, trial, f"strong:{p}"))
        out[f"S({p:g})"] = rc.value / lp_norm(f, p, w)
    exact = None
    if len(levels) <= 10:
        lhs = rademacher_average(Tf, 2, w, power=2, exhaustive=True).value
        rhs = sum(lp_norm(t, 2, w) ** 2 for t in Tf)
        exact = abs(lhs - rhs) / max(rhs, 1e-300)
    out["khintchine_error"] = exact
    out["l2_ratio"] = np.sqrt(sum(lp_norm(t, 2, w) ** 2 for t in Tf)) / lp_norm(f, 2, w)

    def wnorm(v):
        return lp_norm(OpField(inst.space, v), 2, w)

    diffs = _martingale_differences(inst, f.values)
    S = [lambda v, k=k: square_differences(ctx, v, [k])[0] for k in levels]
    ratios: Dict[int, float] = {}
    vn = {n: wnorm(dn) for n, dn in diffs.items()}
    for n, dn in diffs.items():
        for k, Sk in zip(levels, S):
            r = wnorm(Sk(dn)) / vn[n] if vn[n] > 0 else 0.0
            ratios[n - k] = max(ratios.get(n - k, 0.0), r)
    check = almost_orthogonality_check(S, diffs, vn, lambda j: ratios.get(j, 0.0), wnorm, levels)
    out["almost_orthogonality"] = check
    return out


def run_strongpp(config: ExperimentConfig, sides: Optional[Sequence[int]] = None) -> dict:
    """Rademacher L^p ratios S(p) per side, the exact p = 2 identity, and the cross-size drift."""
    sides = list(config.sides if sides is None else sides)
    cells = {}
    suite = _Suite("strong_pp")
    est = _Suite("strong_estimate")
    for side in sides:
        inst = build_instance(config, side)
        rows = _map_trials(lambda t: _strong_trial(inst, t), config.trials)
        cell = {}
        for p in config.p_list:
            key = f"S({p:g})"
            cell[key] = max(r[key] for r in rows)
            suite.record(f"{key}@N={side}", cell[key])
        errs = [r["khintchine_error"] for r in rows if r["khintchine_error"] is not None]
        cell["khintchine_max_error"] = max(errs) if errs else None
        cell["l2_ratio"] = max(r["l2_ratio"] for r in rows)
        suite.instances += len(rows)
        est.instances += len(rows)
        if errs:
            suite.record("khintchine_error", max(errs))
            suite.require(max(errs) <= config.tol("khintchine"), {"side": side})
        est.record(f"l2_ratio@N={side}", cell["l2_ratio"])
        for t, r in enumerate(rows):
            est.require(r["almost_orthogonality"]["holds"], {"side": side, "trial": t})
        cell["almost_orthogonality_all_hold"] = all(r["almost_orthogonality"]["holds"] for r in rows)
        cells[str(side)] = cell
    drift = {}
    for p in config.p_list:
        key = f"S({p:g})"
        vals = [cells[str(s)][key] for s in sides]
        drift[key] = max(vals) / min(vals) if min(vals) > 0 else float("inf")
    suite.notes["drift"] = drift
    suite.notes["cells"] = cells
    return {"strong_pp": suite.to_dict(), "strong_estimate": est.to_dict(), "cells": cells,
            "drift": drift}


def run_weak11(config: ExperimentConfig, sides: Optional[Sequence[int]] = None) -> dict:
    """Weak-type ratio max R per side and the growth factor between consecutive sides."""
    sides = list(config.sides if sides is None else sides)
    cells = {}
    merged_suites: Dict[str, dict] = {}
    for side in sides:
        inst = build_instance(config, side)
        res = run_identities(config, inst)
        weak = res["suites"]["weak_main"]
        cells[str(side)] = {
            "max_R": weak["max"].get("ratio", 0.0),
            "max_R_exact_sup": weak["max"].get("weak_sup_exact", 0.0),
            "good_part": res["suites"]["weak_good_part"]["max"].get("ratio", 0.0),
            "bad_diagonal": res["suites"]["bad_diagonal"]["max"].get("weak_ratio", 0.0),
            "bad_off_diagonal": res["suites"]["bad_off_diagonal"]["max"].get("weak_ratio", 0.0),
            "triangle_violations": weak["counts"].get("triangle_violations", 0),
            "martingale_A1": res["constants"]["martingale_A1"],
            "lambda_dropped": res["lambda_dropped"],
            "instances": weak["instances"],
        }
        merged_suites[str(side)] = res
    growth = []
    for a, b in zip(sides, sides[1:]):
        ra, rb = cells[str(a)]["max_R"], cells[str(b)]["max_R"]
        growth.append(rb / ra if ra > 0 else float("inf"))
    return {"cells": cells, "growth": growth, "per_side": merged_suites}


def run_fits(config: ExperimentConfig, inst: Optional[Instance] = None) -> dict:
    """Decay fits for the boundary averages, the annulus kernel sums and the halos."""
    inst = inst or build_instance(config)
    ctx, system, w, space = inst.ctx, inst.system, inst.weight, inst.space
    log_d = np.log(system.delta)
    # boundary averages: the target applies to a light-tailed positive field,
    # the heavy-tailed fit is kept as a diagnostic
    bsuite = _Suite("boundary_average_decay")
    fits = {}
    for tag, tail in (("", None), ("heavy_tail:", 2.0)):
        h = gen_positive_field(space, config.matrix_dim, "random_psd",
                               derive_seed(config.seed, 0, "fit:boundary"), params={"tail": tail})
        for p in (1.0, 2.0):
            xs, ys = [], []
            for k in ctx.square_levels:
                for n in range(system.k_min, k):
                    r = lp_norm(boundary_average(ctx, h, None, k, n), p, w) / lp_norm(h, p, w)
                    if r > 0:
                        xs.append(k - n)
                        ys.append(np.log(r) / log_d)
            fit = slope_fit(xs, ys)
            entry = fit.to_dict()
            if not tag:
                target = -0.8 * inst.eps / p
                entry.update(target_slope=target,
                             meets_target=bool(fit.slope <= target and fit.r2 >= 0.8))
                bsuite.record(f"slope@p={p:g}", fit.slope)
                bsuite.record(f"r2@p={p:g}", fit.r2)
            fits[f"{tag}p={p:g}"] = entry
    bsuite.instances = 2
    bsuite.notes["fits"] = fits

    asuite = _Suite("annulus_kernel")
    rng = np.random.default_rng(derive_seed(config.seed, 0, "fit:annulus"))
    ys_pts = rng.choice(space.n_points, size=min(16, space.n_points), replace=False)
    consts = []
    for k in ctx.square_levels:
        for n in range(system.k_min, k):
            for y in ys_pts:
                val = annulus_kernel_sum(ctx, w, int(y), k, n)
                consts.append(val / (w.values[y] * system.delta ** ((n - k) * inst.eps)))
                asuite.instances += 1
    if consts:
        asuite.record("C", max(consts))
        asuite.notes["C_min"] = float(min(consts))
        asuite.notes["C_spread"] = float(max(consts) / min(consts))

    hsuite = _Suite("halo_decay")
    xs, ys = [], []
    for n in system.levels:
        for k in range(system.k_min, n + 1):
            r = halo_ratio_mean(ctx, k, n)
            if np.isfinite(r) and r > 0:
                xs.append(k - n)
                ys.append(np.log(r) / log_d)
                hsuite.instances += 1
    hfit = slope_fit(xs, ys)
    hsuite.record("eta", hfit.slope)
    hsuite.record("r2", hfit.r2)
    hsuite.notes["fit"] = {**hfit.to_dict(),
                           "meets_target": bool(hfit.slope > 0 and hfit.r2 >= 0.8)}
    return {s.name: s.to_dict() for s in (bsuite, asuite, hsuite)}


def environment() -> dict:
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "nccz": __version__}


def new_report(command: str, config: ExperimentConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command,
            "config": _clean(config.to_dict()), "environment": environment(),
            "suites": {}, "sections": {}, "timing": {}}


def run_all(config: ExperimentConfig) -> dict:
    """Every suite on the configured space plus the cross-size sweeps."""
    report = new_report("cz run", config)
    t0 = time.perf_counter()
    inst = build_instance(config)
    ident = run_identities(config, inst)
    report["timing"]["identities"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fits = run_fits(config, inst)
    report["timing"]["fits"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    strong = run_strongpp(config, [config.space_side])
    report["timing"]["strongpp"] = time.perf_counter() - t0
    report["suites"].update(ident["suites"])
    report["suites"].update(fits)
    report["suites"]["strong_pp"] = strong["strong_pp"]
    report["suites"]["strong_estimate"] = strong["strong_estimate"]
    report["sections"]["constants"] = ident["constants"]
    report["sections"]["checks"] = ident["checks"]
    report["sections"]["lambda_dropped"] = ident["lambda_dropped"]
    return _clean(report)


def exact_suites_pass(report: dict) -> bool:
    ok = all(s.get("pass", True) for s in report.get("suites", {}).values()
             if s.get("kind") == "exact")
    checks = report.get("sections", {}).get("checks", {})
    return ok and all(c.get("pass", True) for c in checks.values())


def missing_suites(report: dict) -> List[str]:
    return [name for name in SUITES if name not in report.get("suites", {})]


def merge_reports(reports: Mapping[str, dict]) -> dict:
    """Union of several reports; every suite entry is keyed by its source."""
    merged = {"schema_version": SCHEMA_VERSION, "command": "report merge",
              "sources": sorted(reports), "suites": {}, "sections": {}, "timing": {}}
    for src in sorted(reports):
        rep = reports[src]
        for name, suite in rep.get("suites", {}).items():
            merged["suites"].setdefault(name, {})[src] = suite
        for name, sec in rep.get("sections", {}).items():
            merged["sections"].setdefault(name, {})[src] = sec
        merged["timing"][src] = rep.get("timing", {})
    return merged


def report_json(report: dict, with_timing: bool = True) -> str:
    import json

    body = dict(report)
    if not with_timing:
        body.pop("timing", None)
    return json.dumps(_clean(body), sort_keys=True, indent=1)
