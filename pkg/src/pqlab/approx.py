"""Frozen-coefficient approximation of a density and mollification of fields.

A cube cover of side 2/h (centres on the lattice (2/h)Z^n) carries the
translated cutoffs psi_i(x) = psi(h(x - x_i)).  Normalising by their sum
gives a partition of unity phi_i, and

    f_h(x, xi) = sum_i phi_i(x) f(x_i, xi)

is a finite convex combination of autonomous densities.  Because psi is a
tensor product and the lattice is a product lattice, sigma = sum_i psi_i is
a product of one-dimensional sums, so phi_i factorises axis by axis.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .density import DensityModel, Domain, Pinned, _bcast
from .fields import DiscreteField, Grid
from .solve import discrete_energy
from .verify import check_gap


# ---------------------------------------------------------------------------
# cutoff


def smooth_step(t):
    """s(t) = e(t) / (e(t) + e(1 - t)) with e(t) = exp(-1/t) for t > 0, else 0."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def smooth_step_deriv(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    tt = np.where(inside, t, 0.5)
    a = np.exp(-1.0 / tt)
    b = np.exp(-1.0 / (1.0 - tt))
    da = a / tt**2
    db = -b / (1.0 - tt) ** 2
    d = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return np.where(inside, d, 0.0)


def chi(t):
    """One-dimensional cutoff: 1 on [-1, 1], 0 outside (-3, 3)."""
    return smooth_step((3.0 - np.abs(np.asarray(t, dtype=float))) / 2.0)


def chi_deriv(t):
    t = np.asarray(t, dtype=float)
    return -0.5 * np.sign(t) * smooth_step_deriv((3.0 - np.abs(t)) / 2.0)


@dataclass(frozen=True)
class CutoffPsi:
    """psi(x) = prod_j chi(x_j)."""

    n: int
    dchi_max: float = field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("cutoff dimension must be >= 1")
        object.__setattr__(self, "dchi_max", _max_abs_chi_deriv())

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.prod(chi(x), axis=-1)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        c = chi(x)
        out = np.empty_like(x)
        for j in range(x.shape[-1]):
            others = np.prod(np.delete(c, j, axis=-1), axis=-1)
            out[..., j] = chi_deriv(x[..., j]) * others
        return out

    @property
    def grad_sup(self) -> float:
        """||D psi||_inf; attained where the other factors sit on their plateau."""
        return self.dchi_max


def _max_abs_chi_deriv() -> float:
    t = np.linspace(1.0, 3.0, 20001)
    vals = np.abs(chi_deriv(t))
    i = int(np.argmax(vals))
    lo, hi = t[max(i - 1, 0)], t[min(i + 1, t.size - 1)]
    fine = np.linspace(lo, hi, 2001)
    return float(max(vals[i], np.abs(chi_deriv(fine)).max()))


def build_cutoff(n: int) -> CutoffPsi:
    return CutoffPsi(n)


# ---------------------------------------------------------------------------
# cube cover


class InadmissibleScale(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CubeCover:
    """Lattice cubes of side 2/h around the cube B_R (centre ``center``, half-width R)."""

    h: int
    R: float
    center: np.ndarray
    n: int

    @classmethod
    def build(cls, h: int, R: float, center, domain: Domain | None = None) -> "CubeCover":
        if int(h) != h or h < 1:
            raise ValueError(f"scale h must be a positive integer, got {h}")
        center = np.asarray(center, dtype=float).reshape(-1)
        n = center.size
        if domain is not None:
            dist = domain.cube_dist(center, R)
            need = 12.0 * math.sqrt(n) / h
            if not need < dist:
                raise InadmissibleScale(
                    f"h={h} inadmissible: 12*sqrt(n)/h = {need:.6g} is not < dist(B_R, boundary) = {dist:.6g}"
                )
        return cls(int(h), float(R), center, n)

    @property
    def side(self) -> float:
        return 2.0 / self.h

    def covers(self, x, tol: float = 1e-12) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center
        return np.max(np.abs(d), axis=-1) <= self.R * (1 + tol) + tol

    def centers(self) -> np.ndarray:
        """All lattice centres whose cutoff support meets B_R."""
        axes = []
        for j in range(self.n):
            lo = math.floor((self.center[j] - self.R - 3.0 / self.h) * self.h / 2.0)
            hi = math.ceil((self.center[j] + self.R + 3.0 / self.h) * self.h / 2.0)
            k = np.arange(lo, hi + 1)
            x = 2.0 * k / self.h
            keep = np.abs(x - self.center[j]) < self.R + 3.0 / self.h
            axes.append(x[keep])
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.n)


def is_admissible(h: int, R: float, center, domain: Domain) -> bool:
    n = np.asarray(center).size
    return 12.0 * math.sqrt(n) / h < domain.cube_dist(center, R)


def min_admissible_h(R: float, center, domain: Domain) -> int:
    n = np.asarray(center).size
    dist = domain.cube_dist(center, R)
    if dist <= 0:
        raise InadmissibleScale("B_R is not compactly contained in the domain")
    h = max(1, math.floor(12.0 * math.sqrt(n) / dist))
    while not is_admissible(h, R, center, domain):
        h += 1
    return h


# ---------------------------------------------------------------------------
# approximant


_OFFSETS = (-1, 0, 1)


class Approximant:
    """f_h for a base density on the cover of B_R.

    Exposes the same evaluation surface as ``DensityModel`` (eval, grad_xi,
    hess_xi, pinned, domain, envelope) so the verifier and the solver accept
    it unchanged.
    """

    kind = "approximant"
    raw = False
    infinity_k = None
    selector = None

    def __init__(self, model: DensityModel, cover: CubeCover, psi: CutoffPsi | None = None):
        if cover.n != model.n:
            raise ValueError("cover and model dimensions differ")
        self.model = model
        self.cover = cover
        self.psi = psi or build_cutoff(model.n)
        self.h = cover.h
        self.domain = Domain(cover.center, "box", cover.R)
        self.envelope = model.envelope
        self.normalized = model.normalized
        self.params = {"h": cover.h, "base": model.kind}
        self.raw = model.raw
        self.infinity_k = model.infinity_k

    @property
    def n(self) -> int:
        return self.model.n

    # -- weights ----------------------------------------------------------
    def _axis_terms(self, x):
        """Per axis: lattice indices (3, ...), cutoff values and sums."""
        h = self.h
        k0 = np.rint(x * h / 2.0)
        ks = k0[None] + np.array(_OFFSETS, dtype=float).reshape((3,) + (1,) * x.ndim)
        t = h * x[None] - 2.0 * ks
        c = chi(t)
        return ks, t, c, c.sum(axis=0)

    def partition_weights(self, x):
        """Active centres (3**n, ..., n), weights (3**n, ...) and sigma (...)."""
        x = np.asarray(x, dtype=float)
        if not np.all(self.cover.covers(x)):
            raise ValueError("point outside the covered region")
        ks, _, c, s = self._axis_terms(x)
        n = self.n
        sigma = np.prod(s, axis=-1)
        centres, weights = [], []
        for combo in itertools.product(range(3), repeat=n):
            idx = np.array(combo)
            centre = np.stack([ks[combo[j], ..., j] for j in range(n)], axis=-1) * (2.0 / self.h)
            w = np.ones(x.shape[:-1])
            for j in range(n):
                w = w * c[combo[j], ..., j] / s[..., j]
            centres.append(centre)
            weights.append(w)
            del idx
        return np.stack(centres), np.stack(weights), sigma

    def weights_at(self, x) -> list:
        """List of (centre, weight) with positive weight at a single point."""
        centres, weights, _ = self.partition_weights(np.asarray(x, dtype=float)[None])
        return [(centres[i, 0], float(weights[i, 0])) for i in range(len(weights)) if weights[i, 0] > 0]

    def weight_gradients(self, x):
        """Analytic D_x phi_i for every active term: shape (3**n, ..., n)."""
        x = np.asarray(x, dtype=float)
        ks, t, c, s = self._axis_terms(x)
        dc = chi_deriv(t) * self.h
        ds = dc.sum(axis=0)
        # per axis normalised factors and their derivatives
        r = c / s[None]
        dr = (dc * s[None] - c * ds[None]) / s[None] ** 2
        out = []
        n = self.n
        for combo in itertools.product(range(3), repeat=n):
            g = np.empty(x.shape)
            for j in range(n):
                part = dr[combo[j], ..., j]
                for k in range(n):
                    if k != j:
                        part = part * r[combo[k], ..., k]
                g[..., j] = part
            out.append(g)
        return np.stack(out)

    # -- evaluation ----------------------------------------------------------
    def _frozen(self, x, xi, fn):
        x, xi = _bcast(x, xi)
        centres, weights, _ = self.partition_weights(x)
        acc = None
        for c, w in zip(centres, weights):
            if not np.any(w > 0):
                continue
            val = fn(c, xi)
            ww = w.reshape(w.shape + (1,) * (val.ndim - w.ndim))
            acc = ww * val if acc is None else acc + ww * val
        return acc

    def value_fn(self, x, xi):
        return self._frozen(x, xi, self.model.eval)

    def grad_fn(self, x, xi):
        return self._frozen(x, xi, self.model.grad_xi)

    def hess_fn(self, x, xi):
        return self._frozen(x, xi, self.model.hess_xi)

    def _check(self, x, xi):
        x, xi = _bcast(x, xi)
        if x.shape[-1] != self.n:
            raise ValueError(f"expected points of dimension {self.n}")
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite gradient argument")
        return x, xi

    def eval(self, x, xi):
        return self.value_fn(*self._check(x, xi))

    def grad_xi(self, x, xi):
        return self.grad_fn(*self._check(x, xi))

    def hess_xi(self, x, xi):
        return self.hess_fn(*self._check(x, xi))

    def pinned(self, x) -> Pinned:
        """Precompute weights and frozen centres at fixed points."""
        x = np.asarray(x, dtype=float)
        centres, weights, _ = self.partition_weights(x)
        live = [i for i in range(len(weights)) if np.any(weights[i] > 0)]
        pins = [(weights[i], self.model.pinned(centres[i])) for i in live]

        def combine(attr):
            def fn(xi):
                acc = None
                for w, p in pins:
                    val = getattr(p, attr)(xi)
                    ww = w.reshape(w.shape + (1,) * (val.ndim - w.ndim))
                    acc = ww * val if acc is None else acc + ww * val
                return acc

            return fn

        return Pinned(combine("value"), combine("grad"), combine("hess"))


def build_approximant(model: DensityModel, h: int, R: float, center=None, check_admissible: bool = True) -> Approximant:
    center = model.domain.center if center is None else center
    cover = CubeCover.build(h, R, center, model.domain if check_admissible else None)
    return Approximant(model, cover)


# ---------------------------------------------------------------------------
# diagnostics


def dphi_bound_check(approx: Approximant, samples: int = 1000, rng=None, step: float | None = None) -> float:
    """max |D_x phi_j| / (h ||D psi||_inf) over sampled points by central differences.

    Raises AssertionError when the quotient exceeds 3**n + 1.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n, h = approx.n, approx.h
    step = 1e-4 / h if step is None else step
    cov = approx.cover
    if cov.R <= step:
        raise ValueError("finite-difference stencil does not fit in the covered region")
    x = cov.center + rng.uniform(-(cov.R - step), cov.R - step, size=(samples, n))
    # one evaluation of the active set; the stencil keeps the same lattice indices
    ks, _, _, _ = approx._axis_terms(x)
    grads = np.zeros((3**n, samples, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        wp = _weights_fixed(approx, x + e, ks)
        wm = _weights_fixed(approx, x - e, ks)
        grads[..., j] = (wp - wm) / (2 * step)
    quotient = np.linalg.norm(grads, axis=-1).max() / (h * approx.psi.grad_sup)
    bound = 3**n + 1
    if quotient > bound:
        raise AssertionError(f"|D phi| bound violated: {quotient:.6g} > {bound}")
    return float(quotient)


def _weights_fixed(approx: Approximant, x, ks):
    """phi for the centres indexed by ``ks`` (computed at another point), evaluated at x."""
    h, n = approx.h, approx.n
    t = h * x[None] - 2.0 * ks
    c = chi(t)
    # sigma needs every centre with nonzero cutoff at x, which may differ from ks
    _, _, _, s = approx._axis_terms(x)
    out = []
    for combo in itertools.product(range(3), repeat=n):
        w = np.ones(x.shape[:-1])
        for j in range(n):
            w = w * c[combo[j], ..., j] / s[..., j]
        out.append(w)
    return np.stack(out)


def sup_error_bound(approx: Approximant, M: float, H: float | None = None) -> float:
    H = approx.model.envelope.H if H is None else H
    q = approx.model.envelope.q
    return 3.0 * math.sqrt(approx.n) * H / approx.h * (1.0 + M * M) ** (q / 2.0)


def sup_error(approx: Approximant, M: float, samples: int = 10000, rng=None) -> float:
    """sup of |f_h - f| over sampled B_R x {|xi| <= M}; half the xi-samples lie on |xi| = M."""
    if not approx.model.normalized:
        raise ValueError("sup_error expects a density normalised at zero")
    rng = np.random.default_rng(0) if rng is None else rng
    n = approx.n
    cov = approx.cover
    x = cov.center + rng.uniform(-cov.R, cov.R, size=(samples, n))
    d = rng.standard_normal((samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = np.where(np.arange(samples) % 2 == 0, M, M * rng.uniform(0, 1, samples) ** (1.0 / n))
    xi = d * r[:, None]
    err = np.abs(approx.eval(x, xi) - approx.model.eval(x, xi))
    return float(err.max())


# ---------------------------------------------------------------------------
# mollification


def _bump(r2):
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(r2 < 1.0, np.exp(-1.0 / np.where(r2 < 1.0, 1.0 - r2, 1.0)), 0.0)


@dataclass(frozen=True)
class Mollifier:
    """Radial bump exp(-1/(1-|z|^2)) on the unit ball, scaled to radius eps."""

    n: int
    eps: float
    nodes: int = 64
    constant: float = field(init=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("mollifier radius must be positive")
        # tensor midpoint rule on [-1, 1]^n
        t = -1.0 + (np.arange(self.nodes) + 0.5) * (2.0 / self.nodes)
        mesh = np.meshgrid(*([t] * self.n), indexing="ij")
        r2 = sum(m * m for m in mesh)
        mass = float(_bump(r2).sum()) * (2.0 / self.nodes) ** self.n
        object.__setattr__(self, "constant", 1.0 / mass)

    def __call__(self, z):
        z = np.asarray(z, dtype=float) / self.eps
        return self.constant * _bump(np.sum(z * z, axis=-1)) / self.eps**self.n

    def kernel(self, spacing: float) -> np.ndarray:
        """Discrete kernel on a grid of the given spacing, scaled so its weights sum to 1."""
        r = int(math.floor(self.eps / spacing))
        k = np.arange(-r, r + 1) * spacing
        mesh = np.stack(np.meshgrid(*([k] * self.n), indexing="ij"), axis=-1)
        w = self(mesh) * spacing**self.n
        total = float(w.sum())
        if not abs(total - 1.0) < 0.5:
            raise ValueError("mollifier kernel is badly resolved on this grid")
        return w / total


def mollify(u: DiscreteField, eps: float, target: float | None = None) -> DiscreteField:
    """u * Phi_eps on the nodes whose eps-neighbourhood lies inside the grid.

    With ``target`` (a half-width) the result is restricted to the box of that
    half-width about the grid centre, which must leave a margin of eps.
    """
    g = u.grid
    if eps < 2 * g.spacing - 1e-12:
        raise ValueError(f"eps={eps} is below two grid spacings ({2 * g.spacing:.6g})")
    kern = Mollifier(g.n, eps).kernel(g.spacing)
    r = (kern.shape[0] - 1) // 2
    if g.N - 2 * r < 3:
        raise ValueError("margin too small: grid has no nodes at distance eps from its boundary")
    if target is not None and target + eps > g.half_width + 1e-12:
        raise ValueError(f"margin too small: target half-width {target} plus eps {eps} exceeds {g.half_width}")
    vals = _kernels.convolve_valid(u.values, kern)
    sub = Grid(g.center, g.half_width - r * g.spacing, g.N - 2 * r)
    out = DiscreteField(sub, vals)
    return out if target is None else out.restrict(target)


# ---------------------------------------------------------------------------
# diagonal selection


class NoAdmissibleScale(RuntimeError):
    def __init__(self, msg, k, achieved):
        super().__init__(msg)
        self.k = k
        self.achieved = achieved


class ApproximantFamily:
    """f_h for all admissible h on a fixed B_R, built lazily and cached."""

    def __init__(self, model: DensityModel, R: float, center=None):
        self.model = model
        self.R = float(R)
        self.center = model.domain.center if center is None else np.asarray(center, dtype=float)
        self.h_min = min_admissible_h(self.R, self.center, model.domain)
        self._cache: dict[int, Approximant] = {}

    def __getitem__(self, h: int) -> Approximant:
        if h not in self._cache:
            self._cache[h] = build_approximant(self.model, h, self.R, self.center)
        return self._cache[h]


@dataclass
class Selection:
    k: int
    h: int
    gap: float
    residual: float


def diagonal_select(model, family: ApproximantFamily, u: DiscreteField, eps_seq, h_max: int = 512) -> list:
    """Pick h_k > h_{k-1} with |E_{f_hk}(u_eps_k) - E_f(u_eps_k)| < 2^-k on B_R.

    ``u`` must be given on a box around B_R with a margin of at least
    eps_seq[0].  Residuals compare the selected energies against the
    energy of u itself on B_R.
    """
    eps_seq = [float(e) for e in eps_seq]
    if any(b >= a for a, b in zip(eps_seq, eps_seq[1:])) or eps_seq[-1] <= 0:
        raise ValueError("eps_seq must be strictly decreasing and positive")
    env = model.envelope
    if not check_gap(env.p, env.q, env.n):
        raise ValueError(f"gap condition fails for p={env.p}, q={env.q}, n={env.n}")
    target = u.restrict(family.R, family.center) if u.grid.half_width > family.R else u
    E_u = discrete_energy(model, target)
    if not math.isfinite(E_u):
        raise ValueError("energy of u is not finite")
    out = []
    h_prev = family.h_min - 1
    for k, eps in enumerate(eps_seq, start=1):
        u_eps = mollify(u, eps, target=family.R)
        E_f = discrete_energy(model, u_eps)
        tol = 2.0 ** (-k)
        h = h_prev + 1
        best = math.inf
        while True:
            if h > h_max:
                raise NoAdmissibleScale(f"no h <= {h_max} meets the 2^-{k} tolerance (best gap {best:.3g})", k, best)
            gap = abs(discrete_energy(family[h], u_eps) - E_f)
            best = min(best, gap)
            if gap < tol:
                break
            h += 1
        resid = abs(discrete_energy(family[h], u_eps) - E_u)
        out.append(Selection(k, h, gap, resid))
        h_prev = h
    return out
