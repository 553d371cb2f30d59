"""Nested fine/coarse grids on the unit square.

Fine nodes are numbered row-major, ``node = j * (fine_n + 1) + i`` where ``i``
is the x index. Fine cells follow the same rule with ``fine_n`` columns. Coarse
nodes and cells use the identical convention on the coarse lattice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class CoarseNeighborhood:
    """Union of the coarse cells sharing one coarse node.

    ``fine_nodes`` lists the global fine nodes of the patch in local row-major
    order, so ``fine_nodes.reshape(ny, nx)`` recovers the patch layout.
    """

    node_id: int
    cells: tuple[int, ...]
    fine_nodes: np.ndarray
    interior_nodes: np.ndarray
    boundary_nodes: np.ndarray
    fine_cells: np.ndarray
    shape: tuple[int, int]  # (nx, ny) nodes
    # local node indices of each fine cell, (n_cells, 4) counter-clockwise
    local_conn: np.ndarray = field(repr=False)
    # positions of interior/boundary nodes inside ``fine_nodes``
    interior_local: np.ndarray = field(repr=False)
    boundary_local: np.ndarray = field(repr=False)


class GridHierarchy:
    """Fine grid, coarse grid and the coarse neighborhoods linking them."""

    def __init__(self, fine_n: int, coarse_n: int):
        if coarse_n < 2:
            raise ConfigurationError(f"coarse_n must be >= 2, got {coarse_n}")
        if fine_n <= 0 or fine_n % coarse_n != 0:
            raise ConfigurationError(
                f"fine_n={fine_n} is not an integer multiple of coarse_n={coarse_n}"
            )
        self.fine_n = int(fine_n)
        self.coarse_n = int(coarse_n)
        self.ratio = self.fine_n // self.coarse_n
        self.h = 1.0 / self.fine_n
        self.H = 1.0 / self.coarse_n

        n = self.fine_n
        ii, jj = np.meshgrid(np.arange(n), np.arange(n))
        base = (jj * (n + 1) + ii).ravel()
        self.cell_nodes = np.stack([base, base + 1, base + n + 2, base + n + 1], axis=1)
        # coarse cell owning each fine cell
        self.cell_to_coarse = ((jj // self.ratio) * self.coarse_n + ii // self.ratio).ravel()

        nc = self.coarse_n + 1
        self.neighborhoods = [self._neighborhood(I, J) for J in range(nc) for I in range(nc)]

    @property
    def n_fine_nodes(self) -> int:
        return (self.fine_n + 1) ** 2

    @property
    def n_fine_cells(self) -> int:
        return self.fine_n**2

    @property
    def n_coarse_nodes(self) -> int:
        return (self.coarse_n + 1) ** 2

    def node_coords(self) -> np.ndarray:
        """(n_fine_nodes, 2) physical coordinates."""
        t = np.linspace(0.0, 1.0, self.fine_n + 1)
        X, Y = np.meshgrid(t, t)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def cell_centers(self) -> np.ndarray:
        t = (np.arange(self.fine_n) + 0.5) * self.h
        X, Y = np.meshgrid(t, t)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def coarse_node_coords(self, node_id: int) -> tuple[float, float]:
        I, J = node_id % (self.coarse_n + 1), node_id // (self.coarse_n + 1)
        return I * self.H, J * self.H

    def nearest_node(self, x: float, y: float) -> int:
        i = int(round(x * self.fine_n))
        j = int(round(y * self.fine_n))
        return j * (self.fine_n + 1) + i

    def _neighborhood(self, I: int, J: int) -> CoarseNeighborhood:
        r, n, cn = self.ratio, self.fine_n, self.coarse_n
        ci = [c for c in (I - 1, I) if 0 <= c < cn]
        cj = [c for c in (J - 1, J) if 0 <= c < cn]
        cells = tuple(b * cn + a for b in cj for a in ci)

        i0, i1 = ci[0] * r, (ci[-1] + 1) * r
        j0, j1 = cj[0] * r, (cj[-1] + 1) * r
        nx, ny = i1 - i0 + 1, j1 - j0 + 1
        li, lj = np.meshgrid(np.arange(nx), np.arange(ny))
        fine_nodes = ((lj + j0) * (n + 1) + (li + i0)).ravel()
        on_edge = ((li == 0) | (li == nx - 1) | (lj == 0) | (lj == ny - 1)).ravel()
        boundary_local = np.flatnonzero(on_edge)
        interior_local = np.flatnonzero(~on_edge)

        ci_f, cj_f = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
        fine_cells = ((cj_f + j0) * n + (ci_f + i0)).ravel()
        lb = (cj_f * nx + ci_f).ravel()
        local_conn = np.stack([lb, lb + 1, lb + nx + 1, lb + nx], axis=1)

        return CoarseNeighborhood(
            node_id=J * (cn + 1) + I,
            cells=cells,
            fine_nodes=fine_nodes,
            interior_nodes=fine_nodes[interior_local],
            boundary_nodes=fine_nodes[boundary_local],
            fine_cells=fine_cells,
            shape=(nx, ny),
            local_conn=local_conn,
            interior_local=interior_local,
            boundary_local=boundary_local,
        )

    def interior_coarse_nodes(self) -> list[int]:
        nc = self.coarse_n + 1
        return [J * nc + I for J in range(1, nc - 1) for I in range(1, nc - 1)]

    @cached_property
    def pou(self) -> "PartitionOfUnity":
        return partition_of_unity(self)


def build_hierarchy(fine_n: int, coarse_n: int) -> GridHierarchy:
    return GridHierarchy(fine_n, coarse_n)


@dataclass(frozen=True)
class PartitionOfUnity:
    """Bilinear coarse hat functions sampled on the fine grid.

    values:    (n_coarse_nodes, n_fine_nodes) nodal values of each chi_i
    gradients: (n_coarse_nodes, n_fine_cells, 2) gradient at each fine-cell midpoint
    """

    values: np.ndarray
    gradients: np.ndarray

    def grad_sq_sum(self) -> np.ndarray:
        """Per fine cell, sum over i of |grad chi_i|^2 at the midpoint."""
        return np.einsum("icd,icd->c", self.gradients, self.gradients)


def _hat(t: np.ndarray, center: float) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t - center))


def _dhat(t: np.ndarray, center: float) -> np.ndarray:
    d = t - center
    return np.where(np.abs(d) < 1.0, -np.sign(d), 0.0)


def partition_of_unity(g: GridHierarchy) -> PartitionOfUnity:
    r, n, nc = g.ratio, g.fine_n, g.coarse_n + 1
    # positions measured in coarse-cell units
    tn = np.arange(n + 1) / r
    tm = (np.arange(n) + 0.5) / r

    values = np.empty((nc * nc, (n + 1) ** 2))
    gradients = np.empty((nc * nc, n * n, 2))
    for J in range(nc):
        hy, hym, dym = _hat(tn, J), _hat(tm, J), _dhat(tm, J)
        for I in range(nc):
            k = J * nc + I
            hx, hxm, dxm = _hat(tn, I), _hat(tm, I), _dhat(tm, I)
            values[k] = np.outer(hy, hx).ravel()
            gradients[k, :, 0] = np.outer(hym, dxm).ravel() / g.H
            gradients[k, :, 1] = np.outer(dym, hxm).ravel() / g.H
    return PartitionOfUnity(values=values, gradients=gradients)
