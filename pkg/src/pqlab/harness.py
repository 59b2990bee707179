"""Experiment configs, the audit/approximate/solve pipeline and CSV reports.

Config files are flat ``key = value`` text.  ``#`` starts a comment, keys
may carry dotted section prefixes (``solver.grad_tol``), and lists are
comma separated.  Model parameters live under ``model.``; everything there
except ``model.kind`` is handed to ``density.instantiate``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import approx as ax
from . import coefficients as coef
from . import density as dn
from . import solve as sv
from . import verify as vf
from .fields import DiscreteField, Grid

log = logging.getLogger(__name__)

STAGES = ("audit", "approx", "solve", "regularity", "diagonal", "infinity")
HEADER = ("experiment", "stage", "key", "value", "notes")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class ExperimentConfig:
    model_kind: str
    model_params: dict
    experiment: str = "experiment"
    extent: float = 1.0
    R: float = 0.5
    rho: float = 0.25
    grid_sizes: tuple = (17, 33)
    h_list: tuple = ()
    eps_list: tuple = (0.2, 0.1, 0.05, 0.025)
    diag_eps: tuple = ()  # empty: four halvings from the largest 2^-j fitting the margin
    xi_cap: float = 20.0
    sup_M: float = 2.0
    boundary: str = "sin"
    k_list: tuple = (1, 2, 5, 10)
    stages: tuple = STAGES
    solver: sv.SolveConfig = field(default_factory=sv.SolveConfig)
    output: str = ""
    seed: int = 0
    parallel: bool = False

    def build_model(self) -> dn.DensityModel:
        params = dict(self.model_params)
        if self.model_kind == "example-iv":
            params.setdefault("radius", self.extent)
        else:
            params.setdefault("extent", self.extent)
        return dn.instantiate(self.model_kind, params)


_SIMPLE = {
    "experiment": ("experiment", str),
    "domain.extent": ("extent", float),
    "domain.R": ("R", float),
    "domain.rho": ("rho", float),
    "grid.sizes": ("grid_sizes", "ints"),
    "approx.h": ("h_list", "ints"),
    "approx.sup_M": ("sup_M", float),
    "approx.diag_eps": ("diag_eps", "floats"),
    "audit.eps": ("eps_list", "floats"),
    "audit.xi_cap": ("xi_cap", float),
    "boundary": ("boundary", str),
    "regularize.k": ("k_list", "ints"),
    "stages": ("stages", "words"),
    "output": ("output", str),
    "seed": ("seed", int),
    "parallel": ("parallel", bool),
}
_SOLVER = {
    "solver.grad_tol": ("grad_tol", float),
    "solver.max_iters": ("max_iters", int),
    "solver.c1": ("c1", float),
    "solver.backtrack": ("backtrack", float),
    "solver.restart_every": ("restart_every", int),
}


def _parse_bool(key, text):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _convert(key, text, kind):
    try:
        if kind is str:
            return text
        if kind is bool:
            return _parse_bool(key, text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        items = [t.strip() for t in text.split(",") if t.strip()]
        if kind == "ints":
            return tuple(int(t) for t in items)
        if kind == "floats":
            return tuple(float(t) for t in items)
        if kind == "words":
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: malformed number {text!r}") from None
    raise AssertionError(kind)


_NUM = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _model_value(key, text):
    """Model parameters: numbers, booleans, lists, sum-structure terms or coefficient specs."""
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    if _NUM.match(t):
        return float(t)
    if key == "model.terms":
        terms = []
        for part in t.split(";"):
            c, _, s = part.strip().rpartition("@")
            if not c:
                raise ConfigError(f"{key}: term {part.strip()!r} must look like coefficient@exponent")
            try:
                terms.append((c.strip(), float(s)))
            except ValueError:
                raise ConfigError(f"{key}: malformed exponent in {part.strip()!r}") from None
        return terms
    if "," in t:
        try:
            return [float(v) for v in t.split(",")]
        except ValueError:
            raise ConfigError(f"{key}: malformed number list {t!r}") from None
    return t


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"{key}: duplicate key at {source}:{lineno}")
        raw[key] = value
    return config_from_mapping(raw)


def config_from_mapping(raw: dict) -> ExperimentConfig:
    if "model.kind" not in raw:
        raise ConfigError("model.kind: missing key")
    kind = raw["model.kind"]
    if kind not in dn.KINDS or kind == "custom":
        raise ConfigError(f"model.kind: unknown or unsupported kind {kind!r}")
    kwargs, solver, params = {}, {}, {}
    for key, text in raw.items():
        if key == "model.kind":
            continue
        if key.startswith("model."):
            params[key[len("model."):]] = _model_value(key, text)
        elif key in _SIMPLE:
            name, conv = _SIMPLE[key]
            kwargs[name] = _convert(key, text, conv)
        elif key in _SOLVER:
            name, conv = _SOLVER[key]
            solver[name] = _convert(key, text, conv)
        else:
            raise ConfigError(f"{key}: unknown key")
    try:
        kwargs["solver"] = sv.SolveConfig(**solver)
    except ValueError as exc:
        raise ConfigError(f"solver.*: {exc}") from None
    cfg = ExperimentConfig(model_kind=kind, model_params=params, **kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> dn.DensityModel:
    """Check the config invariants and return the model it describes."""
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        raise ConfigError(f"stages: unknown stage(s) {', '.join(bad)}; choose from {', '.join(STAGES)}")
    if not cfg.extent > 0:
        raise ConfigError("domain.extent: must be positive")
    if not cfg.rho > 0 or not cfg.R > 0:
        raise ConfigError("domain.rho, domain.R: must be positive")
    if not cfg.rho < cfg.R:
        raise ConfigError(f"domain.rho ({cfg.rho}) must be smaller than domain.R ({cfg.R})")
    if not cfg.R < cfg.extent:
        raise ConfigError(f"domain.R ({cfg.R}) must be smaller than domain.extent ({cfg.extent})")
    sizes = cfg.grid_sizes
    if not sizes:
        raise ConfigError("grid.sizes: at least one grid size is required")
    if any(N < 3 or N % 2 == 0 for N in sizes):
        raise ConfigError(f"grid.sizes: sizes must be odd and >= 3, got {list(sizes)}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"grid.sizes: sizes must increase, got {list(sizes)}")
    for name, seq in (("audit.eps", cfg.eps_list), ("approx.diag_eps", cfg.diag_eps)):
        if any(e <= 0 for e in seq) or any(b >= a for a, b in zip(seq, seq[1:])):
            raise ConfigError(f"{name}: values must be positive and strictly decreasing")
    if any(k < 1 for k in cfg.k_list):
        raise ConfigError("regularize.k: values must be >= 1")
    if not cfg.xi_cap > 0 or not cfg.sup_M > 0:
        raise ConfigError("audit.xi_cap, approx.sup_M: must be positive")
    if cfg.boundary != "sin":
        try:
            coef.parse(cfg.boundary)
        except ValueError as exc:
            raise ConfigError(f"boundary: {exc}") from None
    try:
        model = cfg.build_model()
    except ValueError as exc:
        raise ConfigError(f"model.*: {exc}") from None
    dom = model.domain
    center = dom.center
    if dom.cube_dist(center, cfg.R) <= 0:
        raise ConfigError(f"domain.R ({cfg.R}): the cube B_R is not inside the model domain")
    n = model.n
    for h in cfg.h_list:
        if h < 1:
            raise ConfigError(f"approx.h: scale {h} must be a positive integer")
        if not ax.is_admissible(h, cfg.R, center, dom):
            dist = dom.cube_dist(center, cfg.R)
            raise ConfigError(
                f"approx.h: h={h} violates the admissibility rule 12*sqrt(n)/h < dist(B_R, boundary): "
                f"{12 * math.sqrt(n) / h:.6g} >= {dist:.6g}"
            )
    if n > 2 and any(s in cfg.stages for s in ("solve", "regularity", "infinity")):
        raise ConfigError("stages: solve stages support n <= 2 only")
    return model


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config_text(text, str(p))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [f"experiment = {cfg.experiment}", f"model.kind = {cfg.model_kind}"]
    for k, v in cfg.model_params.items():
        if k == "terms":
            v = "; ".join(f"{c}@{_fmt(float(s))}" for c, s in v)
        lines.append(f"model.{k} = {_fmt(v)}")
    for key, (name, _) in _SIMPLE.items():
        if key == "experiment":
            continue
        lines.append(f"{key} = {_fmt(getattr(cfg, name))}")
    for key, (name, _) in _SOLVER.items():
        lines.append(f"{key} = {_fmt(getattr(cfg.solver, name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    stage: str
    key: str
    value: object
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "value", _canonical(self.value))


def _canonical(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    return str(v)


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_INT = re.compile(r"^[+-]?\d+$")


def _parse_value(text: str):
    if text in ("true", "false"):
        return text == "true"
    if _INT.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def emit_csv(rows, path=None) -> str:
    """Write rows as CSV (LF line endings); returns the text.  ``path=None`` skips the write."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow([r.experiment, r.stage, r.key, _emit_value(r.value), r.notes])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def parse_csv(source) -> list:
    """Inverse of ``emit_csv``: accepts CSV text or a path."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(source))
    header = next(reader, None)
    if tuple(header or ()) != HEADER:
        raise ValueError(f"unexpected CSV header {header!r}")
    return [ReportRow(e, s, k, _parse_value(v), n) for e, s, k, v, n in reader]


# ---------------------------------------------------------------------------
# pipeline


def _boundary_fn(spec: str):
    if spec == "sin":
        return lambda x: np.sin(np.pi * x[..., 0])
    c = coef.parse(spec)
    return lambda x: c(x)


def _solvable(model: dn.DensityModel, cfg: ExperimentConfig):
    """Degenerate raw models are solved through f_k with the largest configured k."""
    if model.raw and model.envelope.p < 2:
        k = max(cfg.k_list)
        return sv.regularize_infinity(model, k), f"solved with f_k, k={k}"
    return model, ""


class _Rows:
    def __init__(self, experiment):
        self.experiment = experiment
        self.items: list[ReportRow] = []

    def add(self, stage, key, value, notes=""):
        self.items.append(ReportRow(self.experiment, stage, key, value, notes))


def _stage_audit(cfg, model, out: _Rows):
    grid = vf.SampleGrid.build(model.domain, xi_cap=cfg.xi_cap, seed=cfg.seed, star=model.envelope.star)
    rep = vf.audit(model, grid, cfg.eps_list)
    for key, value, notes in rep.rows():
        out.add("audit", key, value, notes)


def _stage_approx(cfg, model, out: _Rows, pool):
    g = dn.normalize_at_zero(model)

    def one(h):
        ap = ax.build_approximant(g, h, cfg.R)
        rng = np.random.default_rng(cfg.seed + h)
        x = ap.cover.center + rng.uniform(-cfg.R, cfg.R, size=(2000, model.n))
        _, w, sigma = ap.partition_weights(x)
        return [
            (f"h={h}:pou_max_dev", float(np.abs(w.sum(axis=0) - 1).max()), "sum of weights minus one"),
            (f"h={h}:sigma_min", float(sigma.min()), "must be >= 1"),
            (f"h={h}:dphi_quotient", ax.dphi_bound_check(ap, rng=rng), f"bound {3 ** model.n + 1}"),
            (f"h={h}:sup_error", ax.sup_error(ap, cfg.sup_M, rng=rng), f"M={cfg.sup_M!r}"),
            (f"h={h}:sup_error_bound", ax.sup_error_bound(ap, cfg.sup_M), "3 sqrt(n) H / h (1+M^2)^(q/2)"),
        ]

    for rows in pool(one, cfg.h_list):
        for key, value, notes in rows:
            out.add("approx", key, value, notes)


def _ladder(cfg, model):
    base, note = _solvable(model, cfg)
    levels = [("f", None)] + [(f"h={h}", h) for h in cfg.h_list]
    center = model.domain.center
    fn = _boundary_fn(cfg.boundary)

    def one(item):
        (label, h), N = item
        dens = base if h is None else ax.build_approximant(base, h, cfg.R)
        grid = Grid(center, cfg.R, N)
        b = DiscreteField.from_function(grid, fn)
        res = sv.minimize(dens, b, cfg.solver)
        start = sv.discrete_energy(dens, sv.harmonic_extension(b))
        return label, N, res, start

    return [(lvl, N) for lvl in levels for N in cfg.grid_sizes], one, note


def _stage_solve(cfg, model, out: _Rows, pool, want_solve, want_reg):
    items, one, note = _ladder(cfg, model)
    results = pool(one, items)
    gap = vf.check_gap(model.envelope.p, model.envelope.q, model.n)
    by_level: dict[str, list] = {}
    for label, N, res, start in results:
        tag = f"{label}:N={N}"
        if want_solve:
            slack = 1e-6 * (1 + abs(start))
            out.add("solve", f"{tag}:energy", res.energy, note)
            out.add("solve", f"{tag}:initial_energy", start, "harmonic extension")
            out.add("solve", f"{tag}:minimality", res.energy <= start + slack, "")
            out.add("solve", f"{tag}:converged", res.converged, res.message)
            out.add("solve", f"{tag}:iters", res.iters, "")
            out.add("solve", f"{tag}:grad_norm", res.grad_norm, "")
        if want_reg:
            s = sv.interior_sup_gradient(res.field, cfg.rho)
            out.add("regularity", f"{tag}:sup_grad", s, f"rho={cfg.rho!r}")
            by_level.setdefault(label, []).append(s)
    if want_reg:
        for label, vals in by_level.items():
            if len(vals) >= 2:
                change = abs(vals[-1] - vals[-2]) / max(abs(vals[-2]), 1e-300)
                note = "" if gap else "gap condition fails; stabilization not expected"
                out.add("regularity", f"{label}:stabilization", change, note)
                out.add("regularity", f"{label}:stable", change < 0.2, note)


def auto_diag_eps(model, R: float, levels: int = 4) -> tuple:
    room = model.domain.cube_dist(model.domain.center, R)
    if room <= 0:
        raise ValueError("B_R leaves no room for a mollification margin")
    j = math.floor(-math.log2(room)) + 1
    return tuple(2.0 ** -(j + i) for i in range(levels))


def _stage_diagonal(cfg, model, out: _Rows):
    g = dn.normalize_at_zero(model)
    fam = ax.ApproximantFamily(g, cfg.R)
    eps_seq = cfg.diag_eps or auto_diag_eps(g, cfg.R)
    margin = cfg.R + eps_seq[0]
    if g.domain.cube_dist(g.domain.center, margin) <= 0:
        raise ValueError(f"no room for a mollification margin of {eps_seq[0]} around B_R")
    # enough nodes to resolve the smallest radius with two spacings
    spacing = eps_seq[-1] / 2.0
    N = 2 * math.ceil(margin / spacing) + 1
    grid = Grid(g.domain.center, margin, N)
    u = DiscreteField.from_function(grid, _boundary_fn(cfg.boundary))
    sel = ax.diagonal_select(g, fam, u, eps_seq)
    for s in sel:
        out.add("approx", f"diag[{s.k}]:h", s.h, "")
        out.add("approx", f"diag[{s.k}]:gap", s.gap, f"tolerance {2.0 ** -s.k!r}")
        out.add("approx", f"diag[{s.k}]:residual", s.residual, "against the energy of u")


def _stage_infinity(cfg, model, out: _Rows, pool):
    center = model.domain.center
    fn = _boundary_fn(cfg.boundary)
    N = cfg.grid_sizes[-1]
    grid = Grid(center, cfg.R, N)
    b = DiscreteField.from_function(grid, fn)

    def one(k):
        res = sv.minimize(sv.regularize_infinity(model, k), b, cfg.solver)
        return k, res

    res = pool(one, sorted(cfg.k_list))
    prev = None
    for k, r in res:
        out.add("solve", f"fk[{k}]:energy", r.energy, f"N={N}")
        out.add("solve", f"fk[{k}]:converged", r.converged, r.message)
        out.add("regularity", f"fk[{k}]:sup_grad", sv.interior_sup_gradient(r.field, cfg.rho), f"rho={cfg.rho!r}")
        if prev is not None:
            out.add("solve", f"fk[{k}]:monotone", r.energy <= prev + 1e-10, "energy nonincreasing in k")
        prev = r.energy


def run_experiment(cfg: ExperimentConfig, stages=None) -> list:
    """Run the enabled stages; failures become rows with stage 'error'."""
    model = validate(cfg)
    stages = tuple(cfg.stages if stages is None else stages)
    out = _Rows(cfg.experiment)
    if cfg.parallel:
        executor = ThreadPoolExecutor()

        def pool(fn, items):
            return list(executor.map(fn, items))
    else:
        executor = None

        def pool(fn, items):
            return [fn(i) for i in items]

    def guarded(name, fn, *args):
        try:
            fn(*args)
        except Exception as exc:  # noqa: BLE001  (recorded, pipeline continues)
            log.warning("stage %s failed: %s", name, exc)
            out.add("error", name, type(exc).__name__, str(exc).replace("\n", " "))

    try:
        if "audit" in stages:
            guarded("audit", _stage_audit, cfg, model, out)
        if "approx" in stages:
            guarded("approx", _stage_approx, cfg, model, out, pool)
        want_solve, want_reg = "solve" in stages, "regularity" in stages
        if want_solve or want_reg:
            guarded("solve", _stage_solve, cfg, model, out, pool, want_solve, want_reg)
        if "diagonal" in stages:
            guarded("diagonal", _stage_diagonal, cfg, model, out)
        if "infinity" in stages and (model.raw or model.envelope.star):
            guarded("infinity", _stage_infinity, cfg, model, out, pool)
    finally:
        if executor is not None:
            executor.shutdown()
    return sorted(out.items, key=lambda r: (r.stage, r.key))


def with_overrides(cfg: ExperimentConfig, seed=None, parallel=None, output=None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if parallel:
        changes["parallel"] = True
    if output is not None:
        changes["output"] = str(output)
    return replace(cfg, **changes) if changes else cfg
