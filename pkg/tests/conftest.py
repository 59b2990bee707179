import logging

import numpy as np
import pytest

from pqlab import density as dn

# Catalog instances used across the suite (n = 2 unless stated).
CATALOG = {
    "double-phase": ("double-phase", {"p": 2, "q": 3, "a": "affine:0.5:0.5:0"}),
    "double-phase-sub2": ("double-phase", {"p": 1.5, "q": 2.5, "a": "halfplane:1:0.5"}),
    "variable-exponent": ("variable-exponent", {"a": 1, "exponent": "affine:2:0:0.3"}),
    "log-power": ("log-power", {"p": 2}),
    "log-power-a2": ("log-power", {"p": 1.5, "alpha": 2}),
    "sum-structure": ("sum-structure", {"terms": [("affine:2:1:0", 2), ("radial:0:0.5", 3)]}),
    "example-iv": ("example-iv", {"p": 2, "q": 4}),
    "anisotropic": ("anisotropic", {"exponents": [1.5, 3]}),
}


def catalog_model(name):
    kind, params = CATALOG[name]
    return dn.instantiate(kind, params)


@pytest.fixture(params=sorted(CATALOG))
def any_model(request):
    return catalog_model(request.param)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("pqlab").setLevel(logging.ERROR)
    yield


def sample_pairs(model, count, xi_cap, rng, shrink=0.95):
    x = model.domain.sample(count, rng, shrink=shrink)
    d = rng.standard_normal((count, model.n))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    xi = d * xi_cap * rng.random((count, 1))
    return x, xi


def fd_grad(fn, x, xi, step=1e-5):
    """Central differences in xi with a magnitude-aware step."""
    scale = step * (1.0 + np.linalg.norm(xi, axis=-1, keepdims=True))
    out = []
    for j in range(xi.shape[-1]):
        e = np.zeros_like(xi)
        e[..., j] = 1.0
        diff = fn(x, xi + scale * e) - fn(x, xi - scale * e)
        s = scale[..., 0].reshape(scale.shape[:-1] + (1,) * (diff.ndim - scale.ndim + 1))
        out.append(diff / (2 * s))
    return np.stack(out, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    num = np.linalg.norm((a - b).reshape(len(a), -1), axis=-1)
    den = np.maximum(np.linalg.norm(b.reshape(len(b), -1), axis=-1), 1.0)
    return num / den


# (tag, status, seconds, detail) lines collected by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for tag, status, secs, detail in sorted(ACCEPTANCE, key=lambda r: (int(r[0][1:].rstrip("ab")), r[0])):
        terminalreporter.write_line(f"{tag:<5} {status}  {secs:7.2f}s  {detail}")
