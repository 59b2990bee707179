"""Tensor grids on boxes and nodal fields with a Dirichlet boundary ring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import Domain


@dataclass(frozen=True, eq=False)
class Grid:
    """N nodes per axis on the closed box ``center +- half_width``."""

    center: np.ndarray
    half_width: float
    N: int

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if self.N < 3:
            raise ValueError(f"grid needs N >= 3 nodes per axis, got {self.N}")
        if not self.half_width > 0:
            raise ValueError("grid half-width must be positive")

    @classmethod
    def cube(cls, n: int, half_width: float, N: int, center=None) -> "Grid":
        return cls(np.zeros(n) if center is None else center, half_width, N)

    @property
    def n(self) -> int:
        return self.center.size

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.N - 1)

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def domain(self) -> Domain:
        return Domain(self.center, "box", self.half_width)

    def axis(self, j: int) -> np.ndarray:
        return self.center[j] + np.linspace(-self.half_width, self.half_width, self.N)

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*[self.axis(j) for j in range(self.n)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def cell_centers(self) -> np.ndarray:
        h = self.spacing
        mids = [self.axis(j)[:-1] + 0.5 * h for j in range(self.n)]
        return np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for j in range(self.n):
            idx = [slice(None)] * self.n
            idx[j] = 0
            mask[tuple(idx)] = True
            idx[j] = -1
            mask[tuple(idx)] = True
        return mask


@dataclass(eq=False)
class DiscreteField:
    """Nodal values on a grid; nodes flagged in ``boundary_mask`` are held fixed."""

    grid: Grid
    values: np.ndarray
    boundary_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if self.boundary_mask is None:
            self.boundary_mask = self.grid.boundary_mask()

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "DiscreteField":
        return cls(grid, fn(grid.nodes()))

    def with_values(self, values) -> "DiscreteField":
        return DiscreteField(self.grid, values, self.boundary_mask)

    def restrict(self, half_width: float, center=None) -> "DiscreteField":
        """Sub-field on the nodes of the box ``center +- half_width`` (must align with nodes)."""
        g = self.grid
        c = g.center if center is None else np.asarray(center, dtype=float)
        h = g.spacing
        sl = []
        for j in range(g.n):
            lo = (c[j] - half_width - (g.center[j] - g.half_width)) / h
            hi = (c[j] + half_width - (g.center[j] - g.half_width)) / h
            ilo, ihi = int(round(lo)), int(round(hi))
            if abs(lo - ilo) > 1e-6 or abs(hi - ihi) > 1e-6:
                raise ValueError("restriction box does not align with grid nodes")
            if ilo < 0 or ihi > g.N - 1:
                raise ValueError("restriction box leaves the grid")
            sl.append(slice(ilo, ihi + 1))
        sub = Grid(c, half_width, sl[0].stop - sl[0].start)
        return DiscreteField(sub, self.values[tuple(sl)])
