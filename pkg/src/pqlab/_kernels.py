"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PQLAB_DISABLE_NUMBA`` is unset or ``0``.  Both implementations
are importable as ``numpy_impl`` and ``numba_impl`` so they can be tested
against each other.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _flag_disabled() -> bool:
    return os.environ.get("PQLAB_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = numba is not None and not _flag_disabled()


# ---------------------------------------------------------------------------
# numpy reference implementations (any dimension)


def _np_cell_gradients(u, spacing):
    """Cell-centred gradient: per axis, the mean of the 2**(n-1) edge differences.

    ``u`` has shape (N1, ..., Nn); the result has shape (N1-1, ..., Nn-1, n).
    """
    n = u.ndim
    out = np.empty(tuple(s - 1 for s in u.shape) + (n,))
    for axis in range(n):
        d = np.diff(u, axis=axis) / spacing
        for other in range(n):
            if other != axis:
                d = 0.5 * (d[(slice(None),) * other + (slice(0, -1),)] + d[(slice(None),) * other + (slice(1, None),)])
        out[..., axis] = d
    return out


def _np_scatter_cell_flux(flux, spacing):
    """Adjoint of ``_np_cell_gradients``: maps per-cell vectors back to nodes."""
    n = flux.shape[-1]
    cell_shape = flux.shape[:-1]
    out = np.zeros(tuple(s + 1 for s in cell_shape))
    for axis in range(n):
        d = flux[..., axis] / spacing
        # undo the averaging over the other axes
        for other in reversed(range(n)):
            if other == axis:
                continue
            pad = np.zeros(d.shape[:other] + (d.shape[other] + 1,) + d.shape[other + 1:])
            lo = (slice(None),) * other + (slice(0, -1),)
            hi = (slice(None),) * other + (slice(1, None),)
            pad[lo] += 0.5 * d
            pad[hi] += 0.5 * d
            d = pad
        lo = (slice(None),) * axis + (slice(0, -1),)
        hi = (slice(None),) * axis + (slice(1, None),)
        out[lo] -= d
        out[hi] += d
    return out


def _np_convolve_valid(u, kernel):
    """Correlation of ``u`` with a (symmetric) kernel, 'valid' region only."""
    windows = np.lib.stride_tricks.sliding_window_view(u, kernel.shape)
    axes = tuple(range(u.ndim, 2 * u.ndim))
    return np.tensordot(windows, kernel, axes=(axes, tuple(range(kernel.ndim))))


def _np_sym_eig_extremes(H):
    """Smallest and largest eigenvalue of a batch of symmetric matrices (..., n, n)."""
    S = 0.5 * (H + np.swapaxes(H, -1, -2))
    w = np.linalg.eigvalsh(S)
    return w[..., 0], w[..., -1]


numpy_impl = SimpleNamespace(
    cell_gradients=_np_cell_gradients,
    scatter_cell_flux=_np_scatter_cell_flux,
    convolve_valid=_np_convolve_valid,
    sym_eig_extremes=_np_sym_eig_extremes,
)


# ---------------------------------------------------------------------------
# numba kernels (n = 1, 2; other shapes fall through to numpy)

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _nb_cell_gradients_2d(u, spacing):
        nx, ny = u.shape
        out = np.empty((nx - 1, ny - 1, 2))
        s = 0.5 / spacing
        for i in range(nx - 1):
            for j in range(ny - 1):
                a = u[i, j]
                b = u[i + 1, j]
                c = u[i, j + 1]
                d = u[i + 1, j + 1]
                out[i, j, 0] = ((b - a) + (d - c)) * s
                out[i, j, 1] = ((c - a) + (d - b)) * s
        return out

    @njit
    def _nb_cell_gradients_1d(u, spacing):
        nx = u.shape[0]
        out = np.empty((nx - 1, 1))
        for i in range(nx - 1):
            out[i, 0] = (u[i + 1] - u[i]) / spacing
        return out

    @njit
    def _nb_scatter_2d(flux, spacing):
        cx, cy = flux.shape[0], flux.shape[1]
        out = np.zeros((cx + 1, cy + 1))
        s = 0.5 / spacing
        for i in range(cx):
            for j in range(cy):
                gx = flux[i, j, 0] * s
                gy = flux[i, j, 1] * s
                out[i, j] += -gx - gy
                out[i + 1, j] += gx - gy
                out[i, j + 1] += -gx + gy
                out[i + 1, j + 1] += gx + gy
        return out

    @njit
    def _nb_scatter_1d(flux, spacing):
        cx = flux.shape[0]
        out = np.zeros(cx + 1)
        for i in range(cx):
            g = flux[i, 0] / spacing
            out[i] -= g
            out[i + 1] += g
        return out

    @njit
    def _nb_convolve_valid_2d(u, k):
        kx, ky = k.shape
        ox = u.shape[0] - kx + 1
        oy = u.shape[1] - ky + 1
        out = np.zeros((ox, oy))
        for i in range(ox):
            for j in range(oy):
                acc = 0.0
                for a in range(kx):
                    for b in range(ky):
                        w = k[a, b]
                        if w != 0.0:
                            acc += w * u[i + a, j + b]
                out[i, j] = acc
        return out

    @njit
    def _nb_convolve_valid_1d(u, k):
        kx = k.shape[0]
        ox = u.shape[0] - kx + 1
        out = np.zeros(ox)
        for i in range(ox):
            acc = 0.0
            for a in range(kx):
                acc += k[a] * u[i + a]
            out[i] = acc
        return out

    @njit
    def _nb_jacobi_extremes(H, sweeps):
        # cyclic Jacobi on each symmetrised matrix of the batch (m, n, n)
        m, n = H.shape[0], H.shape[1]
        lo = np.empty(m)
        hi = np.empty(m)
        A = np.empty((n, n))
        for t in range(m):
            for i in range(n):
                for j in range(n):
                    A[i, j] = 0.5 * (H[t, i, j] + H[t, j, i])
            for _ in range(sweeps):
                off = 0.0
                for i in range(n):
                    for j in range(i + 1, n):
                        off += A[i, j] * A[i, j]
                scale = 0.0
                for i in range(n):
                    scale += A[i, i] * A[i, i]
                if off <= 1e-30 * (scale + 1e-300):
                    break
                for pp in range(n - 1):
                    for qq in range(pp + 1, n):
                        apq = A[pp, qq]
                        if apq == 0.0:
                            continue
                        theta = (A[qq, qq] - A[pp, pp]) / (2.0 * apq)
                        sgn = 1.0 if theta >= 0.0 else -1.0
                        tt = sgn / (abs(theta) + np.sqrt(theta * theta + 1.0))
                        c = 1.0 / np.sqrt(tt * tt + 1.0)
                        s = tt * c
                        for k in range(n):
                            akp = A[k, pp]
                            akq = A[k, qq]
                            A[k, pp] = c * akp - s * akq
                            A[k, qq] = s * akp + c * akq
                        for k in range(n):
                            apk = A[pp, k]
                            aqk = A[qq, k]
                            A[pp, k] = c * apk - s * aqk
                            A[qq, k] = s * apk + c * aqk
            mn = A[0, 0]
            mx = A[0, 0]
            for i in range(1, n):
                if A[i, i] < mn:
                    mn = A[i, i]
                if A[i, i] > mx:
                    mx = A[i, i]
            lo[t] = mn
            hi[t] = mx
        return lo, hi

    def _nb_cell_gradients(u, spacing):
        u = np.ascontiguousarray(u, dtype=np.float64)
        if u.ndim == 2:
            return _nb_cell_gradients_2d(u, float(spacing))
        if u.ndim == 1:
            return _nb_cell_gradients_1d(u, float(spacing))
        return _np_cell_gradients(u, spacing)

    def _nb_scatter_cell_flux(flux, spacing):
        flux = np.ascontiguousarray(flux, dtype=np.float64)
        if flux.ndim == 3 and flux.shape[-1] == 2:
            return _nb_scatter_2d(flux, float(spacing))
        if flux.ndim == 2 and flux.shape[-1] == 1:
            return _nb_scatter_1d(flux, float(spacing))
        return _np_scatter_cell_flux(flux, spacing)

    def _nb_convolve_valid(u, kernel):
        u = np.ascontiguousarray(u, dtype=np.float64)
        kernel = np.ascontiguousarray(kernel, dtype=np.float64)
        if u.ndim == 2:
            return _nb_convolve_valid_2d(u, kernel)
        if u.ndim == 1:
            return _nb_convolve_valid_1d(u, kernel)
        return _np_convolve_valid(u, kernel)

    def _nb_sym_eig_extremes(H):
        H = np.asarray(H, dtype=np.float64)
        batch = H.shape[:-2]
        n = H.shape[-1]
        flat = np.ascontiguousarray(H.reshape((-1, n, n)))
        lo, hi = _nb_jacobi_extremes(flat, 50)
        return lo.reshape(batch), hi.reshape(batch)

    numba_impl = SimpleNamespace(
        cell_gradients=_nb_cell_gradients,
        scatter_cell_flux=_nb_scatter_cell_flux,
        convolve_valid=_nb_convolve_valid,
        sym_eig_extremes=_nb_sym_eig_extremes,
    )
else:  # pragma: no cover
    numba_impl = None


_active = numba_impl if USE_NUMBA else numpy_impl

cell_gradients = _active.cell_gradients
scatter_cell_flux = _active.scatter_cell_flux
convolve_valid = _active.convolve_valid
sym_eig_extremes = _active.sym_eig_extremes


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
