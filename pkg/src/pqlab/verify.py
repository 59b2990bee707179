"""Measured assumption constants for densities and approximants.

Every estimator takes the extreme of a ratio over a finite sample of points
x and gradients xi.  The results certify the assumptions on the sample
only; drift of the ratios with the sampling cap is what exposes a wrong
growth exponent.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Integral, Rational

import numpy as np

from . import _kernels

ABS_TOL = 1e-6
REL_SLACK = 0.05


class ConvexityError(ValueError):
    """The sampled xi-Hessian has a negative eigenvalue."""


class H5Unreliable(ValueError):
    """Too many vanishing denominators in the (H5) ratio test."""


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Points x in a closed sub-box of the domain and gradients xi with |xi| <= xi_cap.

    ``ladder`` holds radii beyond the cap (log-spaced up to 1e3) used only
    for growth-drift detection.  With ``star`` every xi-sample has |xi| >= 1.
    """

    x_samples: np.ndarray
    xi_samples: np.ndarray
    xi_cap: float
    seed: int
    star: bool = False
    ladder: np.ndarray = field(default=None, repr=False)
    directions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.x_samples) == 0 or len(self.xi_samples) == 0:
            raise ValueError("sample grid must be nonempty")
        if np.any(np.linalg.norm(self.xi_samples, axis=-1) > self.xi_cap * (1 + 1e-12)):
            raise ValueError("xi sample exceeds xi_cap")

    @classmethod
    def build(cls, domain, n_x: int = 48, n_xi: int = 256, xi_cap: float = 20.0, seed: int = 0,
              star: bool = False, shrink: float = 0.9, ladder_max: float = 1e3) -> "SampleGrid":
        rng = np.random.default_rng(seed)
        n = domain.n
        x = domain.sample(n_x, rng, shrink)
        # extremes of the sub-box pin down sup/inf of monotone coefficients
        x = np.concatenate([domain.center[None], domain.extremes(shrink), x])
        d = rng.standard_normal((n_xi, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r_min = 1.0 if star else 0.0
        # half the radii spread uniformly, half log-spaced to resolve small and large scales
        half = n_xi // 2
        r_uni = rng.uniform(r_min, xi_cap, half)
        lo = math.log10(max(r_min, 1e-3))
        r_log = 10 ** rng.uniform(lo, math.log10(xi_cap), n_xi - half)
        r = np.concatenate([r_uni, r_log])
        xi = d * r[:, None]
        extra = [np.zeros(n)] if not star else []
        axes = np.eye(n)
        extra += [xi_cap * axes[0], (1.0 if star else 0.5) * axes[0]]
        xi = np.concatenate([xi, np.array(extra)])
        ladder = np.logspace(math.log10(xi_cap), math.log10(ladder_max), 9) if ladder_max > xi_cap else np.array([xi_cap])
        dirs = d[: min(16, n_xi)]
        return cls(x, xi, float(xi_cap), int(seed), star, ladder, dirs)

    def describe(self) -> dict:
        return {
            "x_count": len(self.x_samples),
            "xi_count": len(self.xi_samples),
            "xi_cap": self.xi_cap,
            "seed": self.seed,
            "star": self.star,
        }


def _weight(xi, s, star):
    r2 = np.sum(xi * xi, axis=-1)
    if star:
        return r2 ** (s / 2.0)
    return (1.0 + r2) ** (s / 2.0)


def _pairs(grid: SampleGrid, xi=None):
    xi = grid.xi_samples if xi is None else xi
    X = np.repeat(grid.x_samples[:, None, :], len(xi), axis=1)
    Z = np.broadcast_to(xi[None], X.shape)
    return X, Z


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {what} encountered in sampling")
    return arr


def _hess_extremes(model, X, Z):
    Hs = _finite(model.hess_xi(X, Z), "Hessian entries")
    return _kernels.sym_eig_extremes(np.asarray(Hs, dtype=float))


# ---------------------------------------------------------------------------
# (H2), (H3)


def estimate_m(model, grid: SampleGrid) -> float:
    """Largest m with m w_{p-2}(xi) <= lambda_min(Hess) on the samples."""
    X, Z = _pairs(grid)
    lo, _ = _hess_extremes(model, X, Z)
    ratio = lo / _weight(Z, model.envelope.p - 2.0, grid.star)
    m = float(np.min(ratio))
    if m < -1e-10:
        raise ConvexityError(f"xi-Hessian has a negative eigenvalue (min ratio {m:.6g})")
    return max(m, 0.0)


def estimate_M(model, grid: SampleGrid) -> float:
    """Smallest M with |Hess| <= M w_{q-2}(xi) on the samples (spectral norm)."""
    X, Z = _pairs(grid)
    lo, hi = _hess_extremes(model, X, Z)
    norm = np.maximum(np.abs(lo), np.abs(hi))
    return float(np.max(norm / _weight(Z, model.envelope.q - 2.0, grid.star)))


def estimate_M_drift(model, grid: SampleGrid):
    """Slope of log M(cap) against log cap along the radial ladder.

    Returns ``(slope, values)`` where values[i] is the running sup of the
    (H3) ratio up to ``grid.ladder[i]``.  A slope above 0.5 signals that the
    declared q is below the true growth.
    """
    q = model.envelope.q
    caps = np.asarray(grid.ladder, dtype=float)
    if caps.size < 2:
        return 0.0, np.array([estimate_M(model, grid)])
    base = estimate_M(model, grid)
    dirs = grid.directions
    t = np.concatenate([np.linspace(0.5, 1.0, 6)])
    vals = []
    running = base
    for cap in caps:
        xi = (dirs[:, None, :] * (cap * t)[None, :, None]).reshape(-1, dirs.shape[1])
        X, Z = _pairs(grid, xi)
        lo, hi = _hess_extremes(model, X, Z)
        norm = np.maximum(np.abs(lo), np.abs(hi))
        running = max(running, float(np.max(norm / _weight(Z, q - 2.0, grid.star))))
        vals.append(running)
    vals = np.array(vals)
    slope = float(np.polyfit(np.log(caps), np.log(np.maximum(vals, 1e-300)), 1)[0])
    return slope, vals


# ---------------------------------------------------------------------------
# (H4), (H6)


def estimate_K(model, grid: SampleGrid, dx: float = 1e-5) -> float:
    """sup |D_x grad_xi f|_F / w_{q-1}(xi) with central differences in x."""
    x = grid.x_samples
    room = model.domain.dist_to_boundary(x)
    if np.any(room <= dx):
        raise ValueError("sample point too close to the domain boundary for the x-stencil")
    n = model.n
    X, Z = _pairs(grid)
    total = np.zeros(X.shape[:-1])
    for j in range(n):
        e = np.zeros(n)
        e[j] = dx
        d = (model.grad_xi(X + e, Z) - model.grad_xi(X - e, Z)) / (2 * dx)
        total += np.sum(_finite(d, "mixed derivative") ** 2, axis=-1)
    ratio = np.sqrt(total) / _weight(Z, model.envelope.q - 1.0, grid.star)
    return float(np.max(ratio))


def estimate_H(model, grid: SampleGrid, pair_count: int = 256, dx: float = 1e-4) -> float:
    """sup |g(x,xi) - g(y,xi)| / (|x - y| w_q(xi)) with g = f - f(., 0).

    Random far pairs are complemented by a close pair along the local
    x-gradient at every sample, which is where the sup is attained for
    smooth coefficients.
    """
    rng = np.random.default_rng(grid.seed + 1)
    x = grid.x_samples
    xi = grid.xi_samples

    def g(P, Z):
        if getattr(model, "normalized", False):
            return model.eval(P, Z)
        return model.eval(P, Z) - model.eval(P, np.zeros_like(Z))

    i = rng.integers(0, len(x), pair_count)
    j = rng.integers(0, len(x), pair_count)
    keep = np.linalg.norm(x[i] - x[j], axis=-1) >= 1e-8
    i, j = i[keep], j[keep]
    best = 0.0
    if i.size:
        A = np.repeat(x[i][:, None], len(xi), axis=1)
        B = np.repeat(x[j][:, None], len(xi), axis=1)
        Z = np.broadcast_to(xi[None], A.shape)
        dist = np.linalg.norm(A - B, axis=-1)
        ratio = np.abs(g(A, Z) - g(B, Z)) / (dist * _weight(Z, model.envelope.q, grid.star))
        best = float(np.max(_finite(ratio, "Lipschitz ratio")))
    inner = model.domain.dist_to_boundary(x) > dx
    if np.any(inner):
        X, Z = _pairs(grid)
        X = X[inner]
        Z = Z[inner]
        n = x.shape[1]
        grad = np.zeros(X.shape[:-1] + (n,))
        for k in range(n):
            e = np.zeros(n)
            e[k] = dx
            grad[..., k] = (g(X + e, Z) - g(X - e, Z)) / (2 * dx)
        local = np.linalg.norm(grad, axis=-1) / _weight(Z, model.envelope.q, grid.star)
        best = max(best, float(np.max(_finite(local, "Lipschitz ratio"))))
    return best


# ---------------------------------------------------------------------------
# (H5)


@dataclass
class H5Result:
    y_tilde: np.ndarray
    c_eps: float
    skipped: int
    total: int
    heuristic: bool = False


def ball_offsets(n: int, eps: float, per_axis: int | None = None) -> np.ndarray:
    """Lattice offsets inside the closed ball of radius eps (centre included)."""
    per_axis = per_axis or {1: 41, 2: 21, 3: 11}.get(n, 7)
    t = np.linspace(-eps, eps, per_axis)
    pts = np.array(list(itertools.product(t, repeat=n)))
    pts = pts[np.linalg.norm(pts, axis=1) <= eps * (1 + 1e-12)]
    # make sure the sphere itself is represented along the axes
    axes = np.concatenate([np.eye(n), -np.eye(n)]) * eps
    return np.unique(np.concatenate([np.zeros((1, n)), pts, axes]), axis=0)


def check_h5(model, x, eps: float, xi=None, xi_cap: float = 20.0, offsets=None, probes=None) -> H5Result:
    """Candidate y~ minimising the model's selector on the closed eps-ball and the ratio c(eps).

    ``offsets`` overrides the ball sample (points with |offset| > eps are
    dropped, so nested sets give comparable curves).  For densities without
    a selector and a non-trivial x-dependence, y~ minimises the summed
    log-density over a probe set of gradients; the result is then marked
    heuristic.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if not model.domain.dist_to_boundary(x) > eps:
        raise ValueError(f"ball of radius {eps} around {x.tolist()} is not compactly contained in the domain")
    off = ball_offsets(n, eps) if offsets is None else np.asarray(offsets, dtype=float)
    off = off[np.linalg.norm(off, axis=1) <= eps * (1 + 1e-12)]
    ys = x + off
    if xi is None:
        rng = np.random.default_rng(7)
        d = rng.standard_normal((200, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = np.concatenate([np.linspace(0, 1, 100), np.linspace(1, xi_cap, 100)])
        xi = np.concatenate([d * r[:, None], np.zeros((1, n))])
    xi = np.asarray(xi, dtype=float)
    heuristic = False
    if model.selector is not None:
        keys = np.asarray(model.selector(ys), dtype=float)
        order = np.lexsort(keys.T[::-1])
        y_tilde = ys[order[0]]
    elif model.kind in ("custom", "approximant"):
        heuristic = True
        pr = np.asarray(probes if probes is not None else xi[:: max(1, len(xi) // 16)], dtype=float)
        Y = np.repeat(ys[:, None], len(pr), axis=1)
        vals = model.eval(Y, np.broadcast_to(pr[None], Y.shape))
        score = np.sum(np.log(np.maximum(vals, 1e-300)), axis=1)
        y_tilde = ys[int(np.argmin(score))]
    else:
        y_tilde = x.copy()
    Y = np.repeat(ys[:, None], len(xi), axis=1)
    Z = np.broadcast_to(xi[None], Y.shape)
    num = model.eval(np.broadcast_to(y_tilde, Y.shape), Z)
    den = model.eval(Y, Z)
    ok = den >= 1e-12
    skipped = int(np.count_nonzero(~ok))
    total = den.size
    if skipped > 0.01 * total:
        raise H5Unreliable(f"{skipped}/{total} ratios skipped for vanishing denominators; ratio test unreliable")
    c = float(np.max(num[ok] / den[ok]))
    return H5Result(y_tilde, c, skipped, total, heuristic or model.kind == "custom")


# ---------------------------------------------------------------------------
# gap condition and coercivity


def check_gap(p, q, n: int) -> bool:
    """q <= p (n + 1) / n, exactly for rational inputs."""
    if int(n) != n or n < 1:
        raise ValueError(f"dimension must be a positive integer, got {n}")
    if not p > 1 or q < p:
        raise ValueError(f"invalid exponents p={p}, q={q}")
    exact = all(isinstance(v, (Integral, Rational)) and not isinstance(v, bool) for v in (p, q))
    if exact:
        return Fraction(q) <= Fraction(p) * Fraction(int(n) + 1, int(n))
    return float(q) <= float(p) * (n + 1) / n + 1e-12


@dataclass
class Coercivity:
    c: float
    c_omega: float
    holds: bool


def check_coercivity(model, grid: SampleGrid) -> Coercivity:
    """Fit f(x,xi) >= c |xi|^p - c_Omega with c_Omega = max f(x,0) + H diam."""
    X, Z = _pairs(grid)
    f = model.eval(X, Z)
    f0 = model.eval(grid.x_samples, np.zeros_like(grid.x_samples))
    c_omega = float(np.max(f0)) + model.envelope.H * model.domain.diam
    r = np.linalg.norm(Z, axis=-1)
    mask = r > 0
    ratios = (f[mask] + c_omega) / r[mask] ** model.envelope.p
    c = float(np.min(ratios)) if ratios.size else math.inf
    holds = c > 0 and coercivity_holds(model, grid, c, c_omega)
    return Coercivity(c, c_omega, holds)


def coercivity_holds(model, grid: SampleGrid, c: float, c_omega: float, tol: float = 1e-12) -> bool:
    X, Z = _pairs(grid)
    f = model.eval(X, Z)
    lower = c * np.linalg.norm(Z, axis=-1) ** model.envelope.p - c_omega
    return bool(np.all(f >= lower - tol * (1 + np.abs(lower))))


# ---------------------------------------------------------------------------
# audit


@dataclass
class AssumptionReport:
    m_measured: float
    M_measured: float
    K_measured: float
    H_measured: float
    gap_ok: bool
    coercivity: tuple
    h5_curve: list
    sample_meta: dict
    M_drift: float = 0.0
    h5_status: str = "ok"
    passes: dict = field(default_factory=dict)
    declared: dict = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return all(self.passes.values())

    def rows(self) -> list:
        """(key, value, notes) triples for reporting."""
        out = [
            ("m", self.m_measured, f"declared {self.declared.get('m')!r}"),
            ("M", self.M_measured, f"declared {self.declared.get('M')!r}"),
            ("K", self.K_measured, f"declared {self.declared.get('K')!r}"),
            ("H", self.H_measured, f"declared {self.declared.get('H')!r}"),
            ("M_drift_slope", self.M_drift, "flag above 0.5"),
            ("gap_ok", self.gap_ok, ""),
            ("coercivity_c", self.coercivity[0], ""),
            ("coercivity_c_omega", self.coercivity[1], ""),
            ("h5_status", self.h5_status, ""),
        ]
        for eps, c in self.h5_curve:
            out.append((f"h5_c[{eps!r}]", c, ""))
        for name, ok in sorted(self.passes.items()):
            out.append((f"pass_{name}", ok, ""))
        return out


def _upper_ok(measured, declared):
    return measured <= declared * (1 + REL_SLACK) + ABS_TOL


def audit(model, grid: SampleGrid, eps_list=(0.2, 0.1, 0.05, 0.025), h5_point=None, dx: float = 1e-5) -> AssumptionReport:
    env = model.envelope
    m = estimate_m(model, grid)
    M = estimate_M(model, grid)
    drift, _ = estimate_M_drift(model, grid)
    K = estimate_K(model, grid, dx)
    H = estimate_H(model, grid)
    gap = check_gap(env.p, env.q, env.n)
    coer = check_coercivity(model, grid)
    x0 = model.domain.center if h5_point is None else np.asarray(h5_point, dtype=float)
    curve, status = [], "ok"
    for eps in sorted(eps_list, reverse=True):
        try:
            r = check_h5(model, x0, eps, xi_cap=grid.xi_cap)
        except H5Unreliable:
            status = "unreliable"
            continue
        except ValueError:
            status = "partial"
            continue
        curve.append((float(eps), r.c_eps))
        if r.heuristic:
            status = "heuristic"
    h5_ok = all(c >= 1 - 1e-12 for _, c in curve) and all(
        b - 1e-9 <= a for (_, a), (_, b) in zip(curve, curve[1:])
    )
    passes = {
        "H2": m >= env.m * (1 - REL_SLACK) - ABS_TOL,
        "H3": _upper_ok(M, env.M) and drift <= 0.5,
        "H4": _upper_ok(K, env.K),
        "H5": h5_ok and status != "unreliable",
        "H6": _upper_ok(H, env.H),
        "gap": gap,
        "coercivity": coer.holds,
    }
    declared = {k: float(getattr(env, k)) for k in ("m", "M", "K", "H", "p", "q")}
    return AssumptionReport(m, M, K, H, gap, (coer.c, coer.c_omega), curve, grid.describe(),
                            drift, status, passes, declared)
