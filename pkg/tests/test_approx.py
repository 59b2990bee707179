import math

import numpy as np
import pytest

from pqlab import approx as A
from pqlab import density as dn
from pqlab.fields import DiscreteField, Grid
from pqlab.solve import cell_gradient_norms, discrete_energy


def dp(n=2, extent=3.0, **kw):
    params = {"p": 2, "q": 2.5, "a": "halfplane:%d:0.5" % (n - 1), "n": n, "extent": extent}
    params.update(kw)
    return dn.instantiate("double-phase", params)


# --- cutoff ------------------------------------------------------------------

def test_cutoff_examples():
    psi = A.build_cutoff(3)
    assert psi([0.0, 0.0, 0.0]) == 1.0
    assert psi([3.0, 0.0, 0.0]) == 0.0
    assert A.chi(2.0) == pytest.approx(0.5, abs=1e-15)


def test_smooth_step_symmetric():
    t = np.linspace(0, 1, 101)
    np.testing.assert_allclose(A.smooth_step(t) + A.smooth_step(1 - t), 1.0, atol=1e-15)
    assert A.smooth_step(-0.5) == 0.0 and A.smooth_step(1.5) == 1.0


def test_cutoff_invariants():
    psi = A.build_cutoff(2)
    rng = np.random.default_rng(0)
    x = rng.uniform(-4, 4, (20000, 2))
    v = psi(x)
    assert v.min() >= 0 and v.max() <= 1
    inner = np.max(np.abs(x), axis=1) <= 1
    outer = np.max(np.abs(x), axis=1) >= 3
    assert np.all(v[inner] == 1.0) and np.all(v[outer] == 0.0)


def test_cutoff_smooth_across_transition():
    t = np.linspace(0.5, 3.5, 30001)
    dt = t[1] - t[0]
    second = (A.chi(t[2:]) - 2 * A.chi(t[1:-1]) + A.chi(t[:-2])) / dt**2
    assert np.abs(second).max() < 10.0
    d = A.chi_deriv(t)
    fd = np.gradient(A.chi(t), dt)
    assert np.abs(d - fd).max() < 1e-5


def test_cutoff_grad_sup():
    psi = A.build_cutoff(2)
    t = np.linspace(1, 3, 200001)
    assert psi.grad_sup == pytest.approx(np.abs(A.chi_deriv(t)).max(), rel=1e-6)


# --- cover --------------------------------------------------------------------

def test_cover_lattice_and_covering():
    cov = A.CubeCover.build(8, 0.5, [0.0, 0.0])
    c = cov.centers()
    assert cov.side == 0.25
    np.testing.assert_allclose(np.round(c * 4) / 4, c)
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, (5000, 2))
    d = np.abs(x[:, None, :] - c[None]).max(axis=-1)
    # every point lies in some closed cube of half-side 1/h
    assert np.all(d.min(axis=1) <= 1 / 8 + 1e-12)
    # interiors are disjoint: at most one open cube contains a point
    assert np.all((d < 1 / 8 - 1e-12).sum(axis=1) <= 1)


def test_admissibility_rule():
    dom = dn.Domain.box(2, 1.0)
    dist = dom.cube_dist([0, 0], 0.5)
    h_min = A.min_admissible_h(0.5, [0, 0], dom)
    assert 12 * math.sqrt(2) / h_min < dist <= 12 * math.sqrt(2) / (h_min - 1)
    with pytest.raises(A.InadmissibleScale, match=r"12\*sqrt\(n\)/h"):
        A.CubeCover.build(h_min - 1, 0.5, [0, 0], dom)
    A.CubeCover.build(h_min, 0.5, [0, 0], dom)


# --- partition of unity ---------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("h", [4, 8, 16])
def test_partition_of_unity(n, h):
    ap = A.build_approximant(dp(n), h, 0.5, check_admissible=False)
    x = np.random.default_rng(n * h).uniform(-0.5, 0.5, (10_000, n))
    _, w, sigma = ap.partition_weights(x)
    assert np.abs(w.sum(axis=0) - 1).max() <= 1e-12
    assert (w > 0).sum(axis=0).max() <= 3**n
    assert sigma.min() >= 1.0
    assert w.min() >= 0


def test_weight_at_cube_center():
    ap = A.build_approximant(dp(2), 8, 0.5)
    home = np.array([0.25, -0.25])
    pairs = ap.weights_at(home)
    assert sum(w for _, w in pairs) == pytest.approx(1.0, abs=1e-15)
    best = max(pairs, key=lambda cw: cw[1])
    np.testing.assert_allclose(best[0], home)
    _, _, sigma = ap.partition_weights(home[None])
    assert best[1] == pytest.approx(1.0 / sigma[0])


def test_midpoint_pair_is_symmetric():
    ap = A.build_approximant(dp(1), 10, 0.5)
    pairs = ap.weights_at([0.1])
    assert len(pairs) == 2
    assert [w for _, w in pairs] == pytest.approx([0.5, 0.5], abs=1e-15)


def test_outside_cover_rejected():
    ap = A.build_approximant(dp(2), 8, 0.5)
    with pytest.raises(ValueError):
        ap.partition_weights([[0.6, 0.0]])


def test_weight_gradients_match_fd():
    ap = A.build_approximant(dp(2), 8, 0.5)
    x = np.random.default_rng(2).uniform(-0.45, 0.45, (50, 2))
    g = ap.weight_gradients(x)
    step = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        _, wp, _ = ap.partition_weights(x + e)
        _, wm, _ = ap.partition_weights(x - e)
        # same lattice indices unless the rounding flips; skip those points
        keep = np.all(np.rint((x + e) * 4) == np.rint((x - e) * 4), axis=1)
        np.testing.assert_allclose(g[:, keep, j], ((wp - wm) / (2 * step))[:, keep], atol=1e-6)


# --- D_x phi bound -------------------------------------------------------------------

@pytest.mark.parametrize("n, bound", [(1, 4), (2, 10)])
def test_dphi_bound(n, bound):
    ap = A.build_approximant(dp(n), 8, 0.5, check_admissible=False)
    q = A.dphi_bound_check(ap)
    assert 0 < q <= bound


def test_dphi_self_zero_at_centres():
    ap = A.build_approximant(dp(2), 8, 0.5)
    g = ap.weight_gradients(np.array([[0.25, 0.25]]))
    assert np.abs(g[4]).max() <= 1e-12  # home term is the middle of the 3x3 block


# --- f_h ---------------------------------------------------------------------------------

def test_autonomous_fh_equals_f():
    f = dn.instantiate("double-phase", {"p": 2, "q": 3, "a": 1.0, "extent": 3})
    ap = A.build_approximant(f, 8, 0.5)
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.5, 0.5, (500, 2))
    xi = rng.normal(size=(500, 2)) * 3
    np.testing.assert_allclose(ap.eval(x, xi), f.eval(x, xi), rtol=1e-14)
    np.testing.assert_allclose(ap.hess_xi(x, xi), f.hess_xi(x, xi), rtol=1e-13)


def test_normalized_fh_vanishes_at_zero():
    g = dn.normalize_at_zero(dp(2))
    ap = A.build_approximant(g, 16, 0.5)
    x = np.random.default_rng(4).uniform(-0.5, 0.5, (200, 2))
    np.testing.assert_array_equal(ap.eval(x, np.zeros_like(x)), 0.0)


def test_fh_pointwise_bound_at_centres():
    g = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 3, "radius": 3}))
    # (0.25, 0) is a centre for every h below and sits on the kink of a
    xi = np.random.default_rng(5).normal(size=(100, 2))
    x = np.broadcast_to([0.25, 0.0], xi.shape)
    errs = []
    for h in (8, 16, 32):
        ap = A.build_approximant(g, h, 0.5)
        err = np.abs(ap.eval(x, xi) - g.eval(x, xi))
        bound = 3 * math.sqrt(2) * 0.5 / h * (1 + np.sum(xi * xi, 1)) ** 1.5
        assert np.all(err <= bound)
        _, w, _ = ap.partition_weights(x[:1])
        assert w[4, 0] == w[:, 0].max()
        errs.append(err.max())
    assert errs[-1] < errs[0]


def test_order_preservation():
    lo = dn.instantiate("double-phase", {"p": 2, "q": 3, "a": "radial:0:0.5", "extent": 3})
    hi = dn.instantiate("double-phase", {"p": 2, "q": 3, "a": "radial:0.5:0.5", "extent": 3})
    a, b = A.build_approximant(lo, 8, 0.5), A.build_approximant(hi, 8, 0.5)
    rng = np.random.default_rng(6)
    x = rng.uniform(-0.5, 0.5, (1000, 2))
    xi = rng.normal(size=(1000, 2)) * 4
    assert np.all(a.eval(x, xi) <= b.eval(x, xi))


def test_convexity_preservation():
    f = dp(2)
    ap = A.build_approximant(f, 8, 0.5)
    rng = np.random.default_rng(7)
    x = rng.uniform(-0.5, 0.5, (300, 2))
    xi = rng.normal(size=(300, 2)) * 4
    lam_h = np.linalg.eigvalsh(ap.hess_xi(x, xi))[:, 0]
    centres, w, _ = ap.partition_weights(x)
    base = []
    for i in range(len(centres)):
        Hc = f.hess_fn(centres[i], xi)
        lam = np.linalg.eigvalsh(Hc)[:, 0]
        base.append(np.where(w[i] > 0, lam, np.inf))
    assert np.all(lam_h >= np.min(base, axis=0) - 1e-10)


def test_sup_error_autonomous_zero():
    f = dn.normalize_at_zero(dn.instantiate("double-phase", {"p": 2, "q": 3, "a": 1.0, "extent": 3}))
    assert A.sup_error(A.build_approximant(f, 8, 0.5), 2.0, samples=2000) <= 1e-12


def test_sup_error_under_bound_and_decreasing():
    g = dn.normalize_at_zero(dp(2))
    errs = []
    for h in (8, 16, 32):
        ap = A.build_approximant(g, h, 0.5)
        e = A.sup_error(ap, 2.0, samples=4000)
        assert e <= A.sup_error_bound(ap, 2.0)
        errs.append(e)
    assert errs[0] > errs[1] > errs[2]


def test_sup_error_requires_normalized():
    with pytest.raises(ValueError, match="normalised"):
        A.sup_error(A.build_approximant(dp(2), 8, 0.5), 2.0)


# --- mollifier ------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2])
def test_mollifier_mass_and_support(n):
    m = A.Mollifier(n, 0.3)
    if n == 1:
        # the 64-point tensor rule fixes the constant to about 1e-7
        t = np.linspace(-0.3, 0.3, 2001)
        assert np.trapezoid(m(t[:, None]), t) == pytest.approx(1.0, abs=1e-6)
    z = np.random.default_rng(8).uniform(-0.6, 0.6, (5000, n))
    v = m(z)
    assert v.min() >= 0
    assert np.all(v[np.linalg.norm(z, axis=1) >= 0.3] == 0)
    assert m.kernel(0.01).sum() == pytest.approx(1.0, abs=1e-12)


def test_mollify_constant_and_affine():
    g = Grid.cube(2, 1.0, 129)
    c = A.mollify(DiscreteField.from_function(g, lambda x: 3.0 + 0 * x[..., 0]), 0.1)
    np.testing.assert_allclose(c.values, 3.0, rtol=1e-14)
    u = DiscreteField.from_function(g, lambda x: x[..., 0])
    m = A.mollify(u, 0.1)
    np.testing.assert_allclose(m.values, m.grid.nodes()[..., 0], atol=1e-6)


def test_mollify_rough_field_slope():
    g = Grid.cube(2, 1.0, 257)
    u = DiscreteField.from_function(g, lambda x: np.abs(x[..., 0]) ** 0.5)
    eps = np.array([0.2, 0.1, 0.05])
    sups = [cell_gradient_norms(A.mollify(u, e, target=0.5)).max() for e in eps]
    slope = np.polyfit(np.log(eps), np.log(sups), 1)[0]
    assert slope >= -1.2


def test_mollify_errors():
    g = Grid.cube(2, 1.0, 33)
    u = DiscreteField.from_function(g, lambda x: x[..., 0])
    with pytest.raises(ValueError, match="two grid spacings"):
        A.mollify(u, 0.05)
    with pytest.raises(ValueError, match="margin"):
        A.mollify(u, 0.2, target=0.9)


# --- diagonal selection -----------------------------------------------------------------------

def _affine(R=1.0, N=129):
    g = Grid.cube(2, R, N)
    return DiscreteField.from_function(g, lambda x: 0.7 * x[..., 0] + 1.1 * x[..., 1] + 0.2)


def test_diagonal_autonomous():
    f = dn.instantiate("double-phase", {"p": 2, "q": 2.5, "a": 1.0, "extent": 3})
    fam = A.ApproximantFamily(f, 0.5)
    sel = A.diagonal_select(f, fam, _affine(), [0.25, 0.125, 0.0625])
    assert [s.h for s in sel] == [fam.h_min, fam.h_min + 1, fam.h_min + 2]
    assert all(s.gap <= 1e-12 for s in sel)


def test_diagonal_contract_example_iv():
    g = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 3, "radius": 3}))
    fam = A.ApproximantFamily(g, 0.5)
    sel = A.diagonal_select(g, fam, _affine(), [2.0**-k for k in range(1, 5)])
    assert all(b.h > a.h for a, b in zip(sel, sel[1:]))
    assert all(s.gap < 2.0**-s.k for s in sel)
    assert all(s.residual >= 0 for s in sel)


def test_diagonal_errors():
    g = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 3, "radius": 3}))
    fam = A.ApproximantFamily(g, 0.5)
    u = _affine()
    with pytest.raises(ValueError, match="decreasing"):
        A.diagonal_select(g, fam, u, [0.25, 0.25])
    with pytest.raises(A.NoAdmissibleScale):
        A.diagonal_select(g, fam, u, [0.25, 0.125], h_max=fam.h_min)
    bad = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 4, "radius": 3}))
    with pytest.raises(ValueError, match="gap"):
        A.diagonal_select(bad, A.ApproximantFamily(bad, 0.5), u, [0.25])


def test_discrete_energy_of_approximant_close_to_base():
    g = dn.normalize_at_zero(dp(2))
    u = _affine(0.5, 33)
    E = discrete_energy(g, u)
    gaps = [abs(discrete_energy(A.build_approximant(g, h, 0.5), u) - E) for h in (16, 64)]
    assert gaps[1] < gaps[0]
