"""Closed-form spatial coefficients a(x) with declared Lipschitz constants.

Coefficients are plain callbacks.  The named families below exist so that
config files can refer to them as ``name:arg:arg...``; there is no
expression language.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class Coefficient:
    """A scalar field x -> a(x) evaluated on arrays of shape (..., n).

    ``lip`` is the declared Lipschitz constant.  ``bounds`` maps a domain to
    (inf, sup) of the field over it; when absent, bounds are estimated by
    sampling.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    lip: float
    label: str = "custom"
    bounds_fn: Callable | None = field(default=None, repr=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.fn(x), dtype=float), x.shape[:-1])

    def bounds(self, domain) -> tuple[float, float]:
        if self.bounds_fn is not None:
            return self.bounds_fn(domain)
        pts = domain.sample(4096, np.random.default_rng(12345))
        vals = self(pts)
        return float(vals.min()), float(vals.max())

    @property
    def is_constant(self) -> bool:
        return self.lip == 0.0


def const(c: float) -> Coefficient:
    c = float(c)
    return Coefficient(
        fn=lambda x: np.full(x.shape[:-1], c),
        lip=0.0,
        label=f"const:{c!r}",
        bounds_fn=lambda domain: (c, c),
    )


def affine(c0: float, slope: Sequence[float]) -> Coefficient:
    """a(x) = c0 + <slope, x>."""
    c0 = float(c0)
    g = np.asarray(slope, dtype=float)

    def bounds(domain):
        mid = c0 + float(g @ domain.center[: g.size])
        if domain.shape == "box":
            span = float(np.abs(g).sum()) * domain.extent
        else:
            span = float(np.linalg.norm(g)) * domain.extent
        return mid - span, mid + span

    return Coefficient(
        fn=lambda x: c0 + x[..., : g.size] @ g,
        lip=float(np.linalg.norm(g)),
        label="affine:" + ":".join(repr(v) for v in (c0, *g.tolist())),
        bounds_fn=bounds,
    )


def halfplane(axis: int, slope: float, offset: float = 0.0) -> Coefficient:
    """a(x) = offset + slope * max(x_axis, 0); slope >= 0."""
    axis = int(axis)
    slope = float(slope)
    offset = float(offset)
    if slope < 0:
        raise ValueError("halfplane slope must be nonnegative")

    def bounds(domain):
        lo_coord = domain.center[axis] - domain.extent
        hi_coord = domain.center[axis] + domain.extent
        return offset + slope * max(lo_coord, 0.0), offset + slope * max(hi_coord, 0.0)

    return Coefficient(
        fn=lambda x: offset + slope * np.maximum(x[..., axis], 0.0),
        lip=slope,
        label=f"halfplane:{axis}:{slope!r}:{offset!r}",
        bounds_fn=bounds,
    )


def radial(c0: float, slope: float, center: Sequence[float] | None = None) -> Coefficient:
    """a(x) = c0 + slope * |x - center|; slope >= 0."""
    c0 = float(c0)
    slope = float(slope)
    if slope < 0:
        raise ValueError("radial slope must be nonnegative")
    ctr = None if center is None else np.asarray(center, dtype=float)

    def fn(x):
        d = x if ctr is None else x - ctr
        return c0 + slope * np.linalg.norm(d, axis=-1)

    def bounds(domain):
        c = np.zeros_like(domain.center) if ctr is None else ctr
        off = float(np.linalg.norm(domain.center - c))
        reach = domain.extent * (np.sqrt(domain.n) if domain.shape == "box" else 1.0)
        return c0 + slope * max(off - reach, 0.0), c0 + slope * (off + reach)

    return Coefficient(fn=fn, lip=slope, label=f"radial:{c0!r}:{slope!r}", bounds_fn=bounds)


FAMILIES = {"const": const, "affine": affine, "halfplane": halfplane, "radial": radial}


def parse(spec: str | float | int) -> Coefficient:
    """Build a coefficient from ``family:arg:...`` (a bare number means const)."""
    if isinstance(spec, (int, float)):
        return const(spec)
    text = str(spec).strip()
    parts = [p.strip() for p in text.split(":")]
    name, args = parts[0], parts[1:]
    try:
        if name not in FAMILIES:
            return const(float(text))
        nums = [float(a) for a in args]
        if name == "const":
            (c,) = nums
            return const(c)
        if name == "affine":
            return affine(nums[0], nums[1:])
        if name == "halfplane":
            return halfplane(int(nums[0]), *nums[1:])
        return radial(*nums)
    except (TypeError, ValueError, IndexError) as exc:
        raise ValueError(f"malformed coefficient spec {text!r}: {exc}") from None
