from fractions import Fraction

import numpy as np
import pytest

from pqlab import density as dn
from pqlab import verify as V
from pqlab.solve import compute_example_iv_K
from conftest import CATALOG, catalog_model


def power(p, q=None, a=0.0, **kw):
    return dn.instantiate("double-phase", {"p": p, "q": q if q is not None else p, "a": a, **kw})


def grid_for(model, **kw):
    return V.SampleGrid.build(model.domain, star=model.envelope.star, **kw)


def quartic(declared_q=2.0):
    env = dn.GrowthEnvelope(n=2, p=2, q=declared_q, m=1, M=1)
    return dn.instantiate("custom", {
        "value": lambda x, xi: np.sum(xi * xi, -1) ** 2,
        "grad": lambda x, xi: 4 * np.sum(xi * xi, -1)[..., None] * xi,
        "hess": lambda x, xi: 4 * np.sum(xi * xi, -1)[..., None, None] * np.eye(2)
        + 8 * xi[..., :, None] * xi[..., None, :],
        "envelope": env,
    })


# --- SampleGrid ----------------------------------------------------------

def test_sample_grid_invariants():
    g = V.SampleGrid.build(dn.Domain.box(2, 1.0), xi_cap=5.0, seed=11)
    assert np.all(np.linalg.norm(g.xi_samples, axis=1) <= 5.0 + 1e-12)
    assert np.all(dn.Domain.box(2, 1.0).contains(g.x_samples))
    assert g.describe()["seed"] == 11
    star = V.SampleGrid.build(dn.Domain.box(2, 1.0), star=True)
    assert np.linalg.norm(star.xi_samples, axis=1).min() >= 1.0 - 1e-12


def test_sample_grid_reproducible():
    a = V.SampleGrid.build(dn.Domain.box(2, 1.0), seed=3)
    b = V.SampleGrid.build(dn.Domain.box(2, 1.0), seed=3)
    np.testing.assert_array_equal(a.xi_samples, b.xi_samples)
    np.testing.assert_array_equal(a.x_samples, b.x_samples)


def test_sample_grid_rejects_empty_and_over_cap():
    with pytest.raises(ValueError):
        V.SampleGrid(np.zeros((0, 2)), np.zeros((1, 2)), 1.0, 0)
    with pytest.raises(ValueError):
        V.SampleGrid(np.zeros((1, 2)), np.array([[2.0, 0.0]]), 1.0, 0)


# --- estimate_m / estimate_M -----------------------------------------------

def test_m_quadratic():
    f = power(2)
    assert V.estimate_m(f, grid_for(f)) == pytest.approx(2.0, rel=1e-12)


def test_m_cubic_power():
    f = power(3)
    assert V.estimate_m(f, grid_for(f, xi_cap=10.0)) == pytest.approx(3.0, rel=0.05)


def test_m_flags_nonconvex():
    env = dn.GrowthEnvelope(n=2, p=2, q=2, m=1, M=1)
    f = dn.instantiate("custom", {
        "value": lambda x, xi: -np.sum(xi * xi, -1),
        "grad": lambda x, xi: -2 * xi,
        "hess": lambda x, xi: np.broadcast_to(-2 * np.eye(2), xi.shape + (2,)),
        "envelope": env,
    })
    with pytest.raises(V.ConvexityError):
        V.estimate_m(f, grid_for(f))


def test_M_quadratic():
    f = power(2)
    assert V.estimate_M(f, grid_for(f)) == pytest.approx(2.0, rel=1e-12)


def test_M_stable_in_cap():
    f = power(2, 3, a="affine:0.5:0.5:0")
    m10 = V.estimate_M(f, grid_for(f, xi_cap=10.0))
    m20 = V.estimate_M(f, grid_for(f, xi_cap=20.0))
    assert np.isfinite(m10) and abs(m20 / m10 - 1) < 0.05


def test_M_drift_flags_wrong_growth():
    f = quartic(declared_q=2.0)
    slope, vals = V.estimate_M_drift(f, grid_for(f))
    assert slope > 0.5
    assert np.all(np.diff(vals) >= 0)
    assert not V.audit(f, grid_for(f)).passes["H3"]


def test_M_drift_quiet_for_correct_growth():
    f = quartic(declared_q=4.0)
    slope, _ = V.estimate_M_drift(f, grid_for(f))
    assert slope < 0.5


# --- estimate_K -------------------------------------------------------------

def test_K_autonomous_is_zero():
    f = power(2, 3, a=1.0)
    assert V.estimate_K(f, grid_for(f)) <= 1e-8


def test_K_sum_structure_oracle():
    # a1(x) = 2 + x1 has Lipschitz constant 1; second term autonomous
    f = dn.instantiate("sum-structure", {"terms": [("affine:2:1:0", 2), (1, 3)]})
    g = grid_for(f)
    xi = g.xi_samples
    grad_f1 = 2 * xi  # gradient of (1+|xi|^2)
    oracle = np.max(np.linalg.norm(grad_f1, axis=1) / (1 + np.sum(xi * xi, 1)) ** ((3 - 1) / 2))
    assert V.estimate_K(f, g) <= 1.0 * oracle + 1e-6


def test_K_example_iv_upper_half():
    f = dn.instantiate("example-iv", {"p": 2, "q": 4})
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(-0.5, 0.5, 24), rng.uniform(0.05, 0.6, 24)])
    base = V.SampleGrid.build(f.domain, xi_cap=20.0)
    g = V.SampleGrid(x, base.xi_samples, 20.0, 0)
    t = 20.0
    oracle = 0.5 * 4 * t ** 3 / (1 + t * t) ** 1.5
    assert V.estimate_K(f, g) == pytest.approx(oracle, rel=0.10)
    assert oracle == pytest.approx(2.0, rel=0.01)


def test_K_rejects_boundary_samples():
    f = power(2)
    g = V.SampleGrid(np.array([[1.0, 0.0]]), np.array([[0.5, 0.0]]), 1.0, 0)
    with pytest.raises(ValueError, match="boundary"):
        V.estimate_K(f, g)


# --- estimate_H ---------------------------------------------------------------

def test_H_autonomous():
    f = power(2, 3, a=1.0)
    assert V.estimate_H(f, grid_for(f)) <= 1e-12


def test_H_example_iv_normalized():
    g = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 4}))
    assert V.estimate_H(g, grid_for(g)) <= 0.5 + 1e-12


def test_H_variable_exponent_constant():
    f = dn.instantiate("variable-exponent", {"a": 2.0, "exponent": 2.5})
    assert V.estimate_H(f, grid_for(f)) <= 1e-12


# --- check_h5 -----------------------------------------------------------------

@pytest.mark.parametrize("eps", [0.2, 0.1, 0.05, 0.025])
def test_h5_sum_structure_bound(eps):
    # a1 = 2 + x1 >= C1 = 1 on the unit box, Lip(a1) = L1 = 1
    f = dn.instantiate("sum-structure", {"terms": [("affine:2:1:0", 2), ("radial:0:0.5", 3)]})
    r = V.check_h5(f, [0.0, 0.0], eps)
    assert 1.0 - 1e-12 <= r.c_eps <= 1 + eps + 1e-6
    assert not r.heuristic


def test_h5_autonomous_is_one():
    f = power(2, 3, a=1.0)
    r = V.check_h5(f, [0.1, 0.2], 0.1)
    assert r.c_eps == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("eps", [0.1, 0.05, 0.025])
def test_h5_example_iv(eps):
    f = dn.instantiate("example-iv", {"p": 2, "q": 4})
    K = compute_example_iv_K(2, 4, 0.5)
    r = V.check_h5(f, [0.0, 0.0], eps)
    assert r.c_eps <= 1 + 0.5 * eps * K + 1e-6
    assert r.y_tilde[1] <= 0.0  # selector puts y~ where a vanishes


def test_h5_example_iv_needs_ball_diameter():
    # y and y~ may sit on opposite sides of the ball, so |a(y~) - a(y)| reaches 2 L eps
    f = dn.instantiate("example-iv", {"p": 2, "q": 4})
    K = compute_example_iv_K(2, 4, 0.5)
    c = V.check_h5(f, [0.0, 0.5], 0.1).c_eps
    assert 1 + 0.5 * 0.1 * K < c <= 1 + 2 * 0.5 * 0.1 * K + 1e-6


def test_h5_ball_must_fit():
    f = power(2)
    with pytest.raises(ValueError, match="not compactly contained"):
        V.check_h5(f, [0.95, 0.0], 0.1)


def test_h5_unreliable_when_denominators_vanish():
    g = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 4}))
    xi = np.concatenate([np.zeros((5, 2)), np.ones((5, 2))])
    with pytest.raises(V.H5Unreliable):
        V.check_h5(g, [0.0, 0.0], 0.1, xi=xi)


def test_h5_custom_marked_heuristic():
    env = dn.GrowthEnvelope(n=2, p=2, q=2, m=2, M=4, K=1, H=1)
    f = dn.instantiate("custom", {
        "value": lambda x, xi: (1.5 + 0.5 * x[..., 0]) * (1 + np.sum(xi * xi, -1)),
        "grad": lambda x, xi: 2 * (1.5 + 0.5 * x[..., 0])[..., None] * xi,
        "hess": lambda x, xi: 2 * (1.5 + 0.5 * x[..., 0])[..., None, None] * np.eye(2),
        "envelope": env,
    })
    r = V.check_h5(f, [0.0, 0.0], 0.1)
    assert r.heuristic
    assert r.y_tilde[0] == pytest.approx(-0.1)
    assert r.c_eps == pytest.approx(1.0, abs=1e-12)


def test_h5_monotone_on_nested_samples():
    f = dn.instantiate("sum-structure", {"terms": [("affine:2:1:0", 2), ("radial:0:0.5", 3)]})
    offsets = V.ball_offsets(2, 0.2, per_axis=41)
    curve = [V.check_h5(f, [0.0, 0.0], e, offsets=offsets).c_eps for e in (0.025, 0.05, 0.1, 0.2)]
    assert all(a <= b + 1e-9 for a, b in zip(curve, curve[1:]))


def test_h5_linear_rate():
    f = dn.instantiate("sum-structure", {"terms": [("affine:2:1:0", 2), ("radial:0:0.5", 3)]})
    for eps in (0.2, 0.1, 0.05, 0.025):
        assert V.check_h5(f, [0.0, 0.0], eps).c_eps - 1 <= 1.0 * eps


# --- check_gap ----------------------------------------------------------------

@pytest.mark.parametrize("p, q, n, expected", [
    (2, 3, 2, True),
    (2, 3.1, 2, False),
    (2, 2.2, 3, True),
    (Fraction(3, 2), Fraction(9, 4), 2, True),
    (Fraction(3, 2), Fraction(9, 4) + Fraction(1, 10**12), 2, False),
    (2, 4, 1, True),
])
def test_gap(p, q, n, expected):
    assert V.check_gap(p, q, n) is expected


def test_gap_float_slack():
    assert V.check_gap(1.5, 1.5 * 3 / 2, 2)


@pytest.mark.parametrize("args", [(1, 2, 2), (2, 1.5, 2), (2, 3, 0), (2, 3, 1.5)])
def test_gap_invalid(args):
    with pytest.raises(ValueError):
        V.check_gap(*args)


# --- coercivity -----------------------------------------------------------------

def test_coercivity_regularized_power():
    f = power(2.5)
    assert V.coercivity_holds(f, grid_for(f), 1.0, 0.0)


def test_coercivity_example_iv_normalized():
    g = dn.normalize_at_zero(dn.instantiate("example-iv", {"p": 2, "q": 4}))
    assert V.coercivity_holds(g, grid_for(g), 1.0, 0.0)


def test_coercivity_double_phase():
    f = power(2, 3, a="affine:0.5:0.5:0")
    grid = grid_for(f)
    assert V.coercivity_holds(f, grid, 1.0, 0.0)
    fit = V.check_coercivity(f, grid)
    assert fit.holds and fit.c > 0


def test_coercivity_violation_detected():
    f = power(2)
    assert not V.coercivity_holds(f, grid_for(f), 2.0, 0.0)


# --- audit --------------------------------------------------------------------------

def test_audit_autonomous_quadratic():
    f = power(2)
    rep = V.audit(f, grid_for(f))
    assert rep.all_pass
    assert rep.K_measured <= 1e-8 and rep.H_measured <= 1e-12
    assert all(c == pytest.approx(1.0, abs=1e-12) for _, c in rep.h5_curve)


def test_audit_double_phase_gap_boundary():
    f = power(2, 3, a="affine:1:1:0")
    rep = V.audit(f, grid_for(f))
    assert rep.gap_ok and rep.all_pass, rep.passes


def test_audit_gap_failure_marked():
    f = power(2, 3.5, a="affine:1:1:0")
    rep = V.audit(f, grid_for(f))
    assert not rep.gap_ok and not rep.passes["gap"]
    assert ("pass_gap", False, "") in rep.rows()


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_audit_passes_declared_envelope(name):
    f = catalog_model(name)
    rep = V.audit(f, grid_for(f))
    # the gap condition is a property of (p, q, n), not a declared constant
    claims = {k: v for k, v in rep.passes.items() if k != "gap"}
    assert all(claims.values()), claims
    assert rep.gap_ok == V.check_gap(f.envelope.p, f.envelope.q, f.n)
    assert rep.m_measured <= rep.M_measured
    assert all(c >= 1 - 1e-12 for _, c in rep.h5_curve)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_constants_stable_under_refinement(name):
    f = catalog_model(name)
    coarse = grid_for(f, n_x=24, n_xi=128)
    fine = grid_for(f, n_x=48, n_xi=256)
    for est in (V.estimate_m, V.estimate_M, V.estimate_K, V.estimate_H):
        a, b = est(f, coarse), est(f, fine)
        assert abs(a - b) <= 0.10 * max(abs(a), abs(b)) + 1e-8, est.__name__
