"""Energy densities f(x, xi) with (p,q)-growth and their catalog.

Every density evaluates on broadcastable arrays: ``x`` of shape (..., n) and
``xi`` of shape (..., n) give values (...), gradients (..., n) and Hessians
(..., n, n) with respect to xi.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np

from . import coefficients as coef

log = logging.getLogger(__name__)

KINDS = ("double-phase", "variable-exponent", "log-power", "sum-structure", "example-iv", "anisotropic", "custom")


@dataclass(frozen=True)
class GrowthEnvelope:
    """Assumption constants (n, p, q, m, M, K, H).

    With ``star=True`` the constants refer to the large-|xi| variants of the
    assumptions: weights |xi|^s instead of (1+|xi|^2)^(s/2), only |xi| >= 1.
    """

    n: int
    p: float
    q: float
    m: float
    M: float
    K: float = 0.0
    H: float = 0.0
    star: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"dimension n must be >= 1, got {self.n}")
        if not self.p > 1:
            raise ValueError(f"exponent p must be > 1, got {self.p}")
        if self.q < self.p:
            raise ValueError(f"exponent q must be >= p, got q={self.q} < p={self.p}")
        if not (self.m > 0 and self.M > 0):
            raise ValueError(f"m and M must be positive, got m={self.m}, M={self.M}")
        if self.K < 0 or self.H < 0:
            raise ValueError("K and H must be nonnegative")


@dataclass(frozen=True, eq=False)
class Domain:
    """Axis-aligned box (``extent`` = half-width) or ball (``extent`` = radius)."""

    center: np.ndarray
    shape: str = "box"
    extent: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if self.shape not in ("box", "ball"):
            raise ValueError(f"domain shape must be 'box' or 'ball', got {self.shape!r}")
        if not self.extent > 0:
            raise ValueError("domain extent must be positive")

    @classmethod
    def box(cls, n: int, half_width: float = 1.0, center=None) -> "Domain":
        return cls(np.zeros(n) if center is None else center, "box", half_width)

    @classmethod
    def ball(cls, n: int, radius: float = 1.0, center=None) -> "Domain":
        return cls(np.zeros(n) if center is None else center, "ball", radius)

    @property
    def n(self) -> int:
        return self.center.size

    @property
    def diam(self) -> float:
        return 2.0 * self.extent * (math.sqrt(self.n) if self.shape == "box" else 1.0)

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center
        if self.shape == "box":
            return np.max(np.abs(d), axis=-1) <= self.extent * (1 + tol) + tol
        return np.linalg.norm(d, axis=-1) <= self.extent * (1 + tol) + tol

    def dist_to_boundary(self, x) -> np.ndarray:
        """Distance from interior points to the boundary (negative outside)."""
        d = np.asarray(x, dtype=float) - self.center
        if self.shape == "box":
            return self.extent - np.max(np.abs(d), axis=-1)
        return self.extent - np.linalg.norm(d, axis=-1)

    def cube_dist(self, center, half_width: float) -> float:
        """dist(Q, boundary) for the closed cube Q of given centre and half-width."""
        c = np.asarray(center, dtype=float) - self.center
        if self.shape == "box":
            return float(self.extent - np.max(np.abs(c)) - half_width)
        corner = np.abs(c) + half_width
        return float(self.extent - np.linalg.norm(corner))

    def sample(self, count: int, rng: np.random.Generator, shrink: float = 1.0) -> np.ndarray:
        r = self.extent * shrink
        if self.shape == "box":
            return self.center + rng.uniform(-r, r, size=(count, self.n))
        return self.center + r * _uniform_ball(count, self.n, rng)

    def extremes(self, shrink: float = 1.0) -> np.ndarray:
        """Deterministic extreme points: box corners, or the ball's axis poles."""
        r = self.extent * shrink
        if self.shape == "box":
            signs = np.array(list(itertools.product((-1.0, 1.0), repeat=self.n)))
        else:
            signs = np.concatenate([np.eye(self.n), -np.eye(self.n)])
        return self.center + r * signs


def _uniform_ball(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(0, 1, size=(count, 1)) ** (1.0 / n)


# ---------------------------------------------------------------------------
# closed-form building blocks


def _bcast(x, xi):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(x.shape, xi.shape)
    return np.broadcast_to(x, shape), np.broadcast_to(xi, shape)


def _outer(xi):
    return xi[..., :, None] * xi[..., None, :]


def _eye_like(xi):
    n = xi.shape[-1]
    return np.broadcast_to(np.eye(n), xi.shape[:-1] + (n, n))


def reg_power(xi, s, order: int = 2):
    """(1+|xi|^2)^(s/2) and its xi-derivatives up to ``order``.

    ``s`` broadcasts over the batch.  Returns (value, grad, hess)[: order + 1].
    """
    s = np.asarray(s, dtype=float)
    w = 1.0 + np.sum(xi * xi, axis=-1)
    out = [w ** (0.5 * s)]
    if order >= 1:
        c1 = s * w ** (0.5 * s - 1.0)
        out.append(c1[..., None] * xi)
    if order >= 2:
        c2 = s * (s - 2.0) * w ** (0.5 * s - 2.0)
        out.append(c1[..., None, None] * _eye_like(xi) + c2[..., None, None] * _outer(xi))
    return tuple(out)


def raw_power(xi, s, order: int = 2):
    """|xi|^s and derivatives, using the C^2 limits at xi = 0.

    The Hessian at the origin is +inf when s < 2.
    """
    s = np.asarray(s, dtype=float)
    r2 = np.sum(xi * xi, axis=-1)
    zero = r2 == 0.0
    safe = np.where(zero, 1.0, r2)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = [np.where(zero, 0.0, safe ** (0.5 * s))]
        if order >= 1:
            c1 = np.where(zero, 0.0, s * safe ** (0.5 * s - 1.0))
            out.append(c1[..., None] * xi)
        if order >= 2:
            c2 = np.where(zero, 0.0, s * (s - 2.0) * safe ** (0.5 * s - 2.0))
            at0 = np.where(s == 2.0, 2.0, np.where(s > 2.0, 0.0, np.inf))
            diag = np.where(zero, at0 * np.ones_like(r2), c1)
            out.append(diag[..., None, None] * _eye_like(xi) + c2[..., None, None] * _outer(xi))
    return tuple(out)


def _radial(xi, phi, dphi, d2phi, regularized: bool):
    """Value/grad/Hessian of phi(t) with t = (1+|xi|^2)^(1/2) or t = |xi|."""
    r2 = np.sum(xi * xi, axis=-1)
    t = np.sqrt(1.0 + r2) if regularized else np.sqrt(r2)
    ts = np.maximum(t, 1e-150)
    val = phi(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d1 = dphi(ts) / ts
        d2 = d2phi(ts)
    grad = d1[..., None] * xi
    if regularized:
        proj = _outer(xi) / (ts * ts)[..., None, None]
    else:
        u = np.where((t > 0)[..., None], xi / ts[..., None], 0.0)
        proj = _outer(u)
        # at the origin the Hessian of phi(|xi|) is phi''(0) I
        d1 = np.where(t > 0, d1, d2)
    hess = d1[..., None, None] * (_eye_like(xi) - proj) + d2[..., None, None] * proj
    return val, grad, hess


def _log_power_profile(p: float, alpha: float):
    def phi(t):
        return t**p * np.log1p(t) ** alpha

    def dphi(t):
        L = np.log1p(t)
        return p * t ** (p - 1) * L**alpha + alpha * t**p * L ** (alpha - 1) / (1 + t)

    def d2phi(t):
        L = np.log1p(t)
        a = p * (p - 1) * t ** (p - 2) * L**alpha
        b = 2 * p * alpha * t ** (p - 1) * L ** (alpha - 1) / (1 + t)
        c = alpha * t**p * ((alpha - 1) * L ** (alpha - 2) - L ** (alpha - 1)) / (1 + t) ** 2
        return a + b + c

    return phi, dphi, d2phi


# ---------------------------------------------------------------------------
# the density type


@dataclass(frozen=True, eq=False)
class DensityModel:
    """An energy density f(x, xi) with closed-form derivatives in xi.

    Instances are immutable and safe to share between threads.
    """

    kind: str
    params: Mapping[str, Any]
    envelope: GrowthEnvelope
    domain: Domain
    value_fn: Callable = field(repr=False)
    grad_fn: Callable = field(repr=False)
    hess_fn: Callable = field(repr=False)
    selector: Callable | None = field(default=None, repr=False)
    raw: bool = False
    normalized: bool = False
    infinity_k: int | None = None

    @property
    def n(self) -> int:
        return self.envelope.n

    @property
    def autonomous(self) -> bool:
        return self.envelope.K == 0.0 and self.envelope.H == 0.0 and self.selector is None

    def _check(self, x, xi):
        x, xi = _bcast(x, xi)
        if x.shape[-1] != self.n:
            raise ValueError(f"expected points of dimension {self.n}, got {x.shape[-1]}")
        if not np.all(self.domain.contains(x)):
            raise ValueError("evaluation point outside the model domain")
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite gradient argument")
        return x, xi

    def eval(self, x, xi):
        x, xi = self._check(x, xi)
        return self.value_fn(x, xi)

    def grad_xi(self, x, xi):
        x, xi = self._check(x, xi)
        return self.grad_fn(x, xi)

    def hess_xi(self, x, xi):
        x, xi = self._check(x, xi)
        return self.hess_fn(x, xi)

    def pinned(self, x) -> "Pinned":
        """Freeze the spatial argument (checked once) for repeated evaluation."""
        x = np.asarray(x, dtype=float)
        if not np.all(self.domain.contains(x)):
            raise ValueError("evaluation point outside the model domain")
        return Pinned(
            lambda xi: self.value_fn(*_bcast(x, xi)),
            lambda xi: self.grad_fn(*_bcast(x, xi)),
            lambda xi: self.hess_fn(*_bcast(x, xi)),
        )


@dataclass(frozen=True)
class Pinned:
    value: Callable
    grad: Callable
    hess: Callable


def _coef(v) -> coef.Coefficient:
    return v if isinstance(v, coef.Coefficient) else coef.parse(v)


def _require(params: Mapping, *keys):
    missing = [k for k in keys if k not in params]
    if missing:
        raise ValueError(f"missing parameter(s) {', '.join(missing)}")


def _check_exponents(p, q):
    if not p > 1:
        raise ValueError(f"exponent p must be > 1, got {p}")
    if q < p:
        raise ValueError(f"exponent q must be >= p, got q={q} < p={p}")


def _lo(s):
    return s * min(1.0, s - 1.0)


def _hi(s):
    return s * max(1.0, s - 1.0)


def instantiate(kind: str, params: Mapping[str, Any] | None = None) -> DensityModel:
    """Build a catalog density with closed-form derivatives and declared envelope."""
    params = dict(params or {})
    builders = {
        "double-phase": _double_phase,
        "variable-exponent": _variable_exponent,
        "log-power": _log_power,
        "sum-structure": _sum_structure,
        "example-iv": _example_iv,
        "anisotropic": _anisotropic,
        "custom": _custom,
    }
    if kind not in builders:
        raise ValueError(f"unknown density kind {kind!r}; expected one of {', '.join(KINDS)}")
    return builders[kind](params)


def _domain_from(params, n_default=2) -> Domain:
    dom = params.get("domain")
    if isinstance(dom, Domain):
        return dom
    n = int(params.get("n", n_default))
    return Domain.box(n, float(params.get("extent", 1.0)))


def _double_phase(params):
    _require(params, "p", "q")
    p, q = float(params["p"]), float(params["q"])
    _check_exponents(p, q)
    a = _coef(params.get("a", 1.0))
    raw = bool(params.get("raw", False))
    dom = _domain_from(params)
    a_lo, a_hi = a.bounds(dom)
    if a_lo < 0:
        raise ValueError("double-phase coefficient a(x) must be nonnegative on the domain")
    env = GrowthEnvelope(
        n=dom.n, p=p, q=q,
        m=_lo(p) + a_lo * _lo(q),
        M=_hi(p) + a_hi * _hi(q),
        K=q * a.lip, H=a.lip, star=raw,
    )
    power = raw_power if raw else reg_power

    def value(x, xi):
        return power(xi, p, 0)[0] + a(x) * power(xi, q, 0)[0]

    def grad(x, xi):
        return power(xi, p, 1)[1] + a(x)[..., None] * power(xi, q, 1)[1]

    def hess(x, xi):
        return power(xi, p)[2] + a(x)[..., None, None] * power(xi, q)[2]

    return DensityModel(
        "double-phase", params, env, dom, value, grad, hess,
        selector=None if a.is_constant else (lambda y: a(y)[..., None]),
        raw=raw,
    )


def _variable_exponent(params):
    _require(params, "exponent")
    a = _coef(params.get("a", 1.0))
    s = _coef(params["exponent"])
    dom = _domain_from(params)
    a_lo, a_hi = a.bounds(dom)
    s_lo, s_hi = s.bounds(dom)
    if a_lo <= 0:
        raise ValueError("variable-exponent coefficient a(x) must be bounded below by a positive constant")
    if not s_lo > 1:
        raise ValueError(f"exponent p(x) must exceed 1 on the domain, inf is {s_lo}")
    slack = float(params.get("q_slack", 0.25)) if s.lip > 0 else 0.0
    if s.lip > 0 and slack <= 0:
        raise ValueError("q_slack must be positive for a non-constant exponent")
    q = s_hi + slack
    log_term = 0.0 if s.lip == 0 else 1.0 / (math.e * slack)
    env = GrowthEnvelope(
        n=dom.n, p=s_lo, q=q,
        m=a_lo * _lo(s_lo),
        M=a_hi * _hi(s_hi),
        K=a.lip * s_hi + a_hi * s.lip * (1.0 + s_hi * log_term),
        H=a.lip + a_hi * s.lip * log_term,
    )

    def value(x, xi):
        return a(x) * reg_power(xi, s(x), 0)[0]

    def grad(x, xi):
        return a(x)[..., None] * reg_power(xi, s(x), 1)[1]

    def hess(x, xi):
        return a(x)[..., None, None] * reg_power(xi, s(x))[2]

    selector = None
    if not (a.is_constant and s.is_constant):
        selector = lambda y: np.stack([s(y), a(y)], axis=-1)
    return DensityModel("variable-exponent", params, env, dom, value, grad, hess, selector=selector)


def _log_power(params):
    _require(params, "p")
    p = float(params["p"])
    alpha = float(params.get("alpha", 1.0))
    if not p > 1:
        raise ValueError(f"exponent p must be > 1, got {p}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    regularized = bool(params.get("regularized", True))
    slack = float(params.get("q_slack", 0.5))
    if not slack > 0:
        raise ValueError("q_slack must be positive")
    q = p + slack
    dom = _domain_from(params)
    phi, dphi, d2phi = _log_power_profile(p, alpha)

    # constants from a dense radial scan of the two Hessian eigenvalues
    r = np.concatenate([[0.0], np.logspace(-4, 6, 4001)])
    if not regularized:
        r = r[r >= 1.0]
    t = np.sqrt(1 + r * r) if regularized else r
    tang = dphi(t) / t
    rad = d2phi(t) * (r * r) / (t * t) + tang * (1 - (r * r) / (t * t))
    if regularized:
        wp, wq = (1 + r * r) ** ((p - 2) / 2), (1 + r * r) ** ((q - 2) / 2)
    else:
        wp, wq = r ** (p - 2), r ** (q - 2)
    lo = np.minimum(tang, rad)
    if np.any(lo < -1e-12 * np.maximum(1.0, np.abs(tang))):
        raise ValueError("log-power density is not convex for these parameters")
    m = float(np.min(lo / wp))
    M = float(np.max(np.maximum(tang, np.abs(rad)) / wq))
    if not m > 0:
        raise ValueError("log-power density is not p-uniformly convex for these parameters")
    env = GrowthEnvelope(n=dom.n, p=p, q=q, m=m, M=M, star=not regularized)

    def value(x, xi):
        return _radial(xi, phi, dphi, d2phi, regularized)[0]

    def grad(x, xi):
        return _radial(xi, phi, dphi, d2phi, regularized)[1]

    def hess(x, xi):
        return _radial(xi, phi, dphi, d2phi, regularized)[2]

    return DensityModel("log-power", params, env, dom, value, grad, hess, raw=not regularized)


def _sum_structure(params):
    _require(params, "terms")
    terms = [(_coef(c), float(s)) for c, s in params["terms"]]
    if not terms:
        raise ValueError("sum-structure needs at least one term")
    dom = _domain_from(params)
    exps = [s for _, s in terms]
    p, q = min(exps), max(exps)
    _check_exponents(p, q)
    bounds = [c.bounds(dom) for c, _ in terms]
    if any(lo < 0 for lo, _ in bounds):
        raise ValueError("sum-structure coefficients must be nonnegative")
    m = sum(lo * _lo(s) for (lo, _), (_, s) in zip(bounds, terms))
    if not m > 0:
        raise ValueError("sum-structure needs a coefficient bounded below by a positive constant")
    env = GrowthEnvelope(
        n=dom.n, p=p, q=q, m=m,
        M=sum(hi * _hi(s) for (_, hi), (_, s) in zip(bounds, terms)),
        K=sum(c.lip * s for c, s in terms),
        H=sum(c.lip for c, _ in terms),
    )

    def value(x, xi):
        return sum(c(x) * reg_power(xi, s, 0)[0] for c, s in terms)

    def grad(x, xi):
        return sum(c(x)[..., None] * reg_power(xi, s, 1)[1] for c, s in terms)

    def hess(x, xi):
        return sum(c(x)[..., None, None] * reg_power(xi, s)[2] for c, s in terms)

    # the phase coefficients are minimised first: highest exponent leads
    order = sorted(range(len(terms)), key=lambda i: -terms[i][1])
    varying = [i for i in order if not terms[i][0].is_constant]
    selector = None
    if varying:
        selector = lambda y: np.stack([terms[i][0](y) for i in varying], axis=-1)
    return DensityModel("sum-structure", params, env, dom, value, grad, hess, selector=selector)


def example_iv_coefficient() -> coef.Coefficient:
    """a(x1, x2) = x2/2 for x2 > 0 and 0 otherwise (Lipschitz constant 1/2)."""
    return coef.halfplane(1, 0.5)


def _example_iv(params):
    p = float(params.get("p", 2.0))
    q = float(params.get("q", 4.0))
    _check_exponents(p, q)
    if p < 2:
        raise ValueError("example-iv uses raw powers and needs p >= 2 for C^2 smoothness")
    radius = float(params.get("radius", 1.0))
    dom = Domain.ball(2, radius)
    a = example_iv_coefficient()
    a_lo, a_hi = a.bounds(dom)
    if a_hi >= 1.0:
        log.warning("example-iv on radius %g: f(x,0) = 1 - a(x) is negative where x2 > 2; "
                    "use normalize_at_zero before evaluating there", radius)
    env = GrowthEnvelope(
        n=2, p=p, q=q,
        m=2.0 if p == 2.0 else _lo(p),
        M=_hi(p) + a_hi * _hi(q),
        K=q * a.lip, H=a.lip, star=p != 2.0,
    )

    def value(x, xi):
        av = a(x)
        return raw_power(xi, p, 0)[0] + av * (raw_power(xi, q, 0)[0] - 1.0) + 1.0

    def grad(x, xi):
        return raw_power(xi, p, 1)[1] + a(x)[..., None] * raw_power(xi, q, 1)[1]

    def hess(x, xi):
        return raw_power(xi, p)[2] + a(x)[..., None, None] * raw_power(xi, q)[2]

    return DensityModel("example-iv", params, env, dom, value, grad, hess,
                        selector=lambda y: a(y)[..., None], raw=True)


def _anisotropic(params):
    _require(params, "exponents")
    ps = [float(v) for v in params["exponents"]]
    n = len(ps)
    p, q = min(ps), max(ps)
    _check_exponents(p, q)
    if not p <= 2.0 <= q:
        raise ValueError("anisotropic kind needs min p_i <= 2 <= max p_i for the isotropic weights")
    dom = _domain_from({**params, "n": n})
    if dom.n != n:
        raise ValueError("anisotropic exponents must match the domain dimension")
    s = np.asarray(ps)
    env = GrowthEnvelope(n=n, p=p, q=q, m=min(_lo(v) for v in ps), M=max(_hi(v) for v in ps))

    def comps(xi):
        w = 1.0 + xi * xi
        val = w ** (0.5 * s)
        d1 = s * w ** (0.5 * s - 1.0) * xi
        d2 = s * w ** (0.5 * s - 2.0) * (1.0 + (s - 1.0) * xi * xi)
        return val, d1, d2

    def value(x, xi):
        return comps(xi)[0].sum(axis=-1)

    def grad(x, xi):
        return comps(xi)[1]

    def hess(x, xi):
        d2 = comps(xi)[2]
        return d2[..., :, None] * np.eye(n)

    return DensityModel("anisotropic", params, env, dom, value, grad, hess)


def _custom(params):
    _require(params, "value", "grad", "hess", "envelope")
    env = params["envelope"]
    dom = params.get("domain") or Domain.box(env.n, 1.0)
    sel = params.get("selector")
    return DensityModel("custom", params, env, dom, params["value"], params["grad"], params["hess"],
                        selector=sel, raw=bool(params.get("raw", False)))


# ---------------------------------------------------------------------------
# transformations


def normalize_at_zero(model: DensityModel) -> DensityModel:
    """Return g(x, xi) = f(x, xi) - f(x, 0); derivatives in xi are unchanged."""
    if model.normalized:
        return model
    base = model.value_fn

    def value(x, xi):
        return base(x, xi) - base(x, np.zeros_like(xi))

    return replace(model, value_fn=value, normalized=True)


def regularize_infinity(model: DensityModel, k: float) -> DensityModel:
    """f_k = f + (1/k)(1+|xi|^2)^(q/2): strictly convex with q-growth."""
    if not k >= 1:
        raise ValueError(f"regularization index k must be >= 1, got {k}")
    q = model.envelope.q
    eps = 1.0 / k
    bv, bg, bh = model.value_fn, model.grad_fn, model.hess_fn

    def value(x, xi):
        return bv(x, xi) + eps * reg_power(xi, q, 0)[0]

    def grad(x, xi):
        return bg(x, xi) + eps * reg_power(xi, q, 1)[1]

    def hess(x, xi):
        return bh(x, xi) + eps * reg_power(xi, q)[2]

    env = replace(model.envelope, m=model.envelope.m + eps * _lo(q), M=model.envelope.M + eps * _hi(q))
    return replace(model, value_fn=value, grad_fn=grad, hess_fn=hess, envelope=env,
                   infinity_k=k, normalized=False)
