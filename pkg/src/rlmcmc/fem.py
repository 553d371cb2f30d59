"""Q1 finite elements and backward-Euler time stepping for

    u_t - div(kappa grad u) = f   in the unit square,
    du/dn = h                     on the boundary,

with well observations taken as box averages of the pressure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, ContractError, NumericalError
from .field import PermeabilityField
from .mesh import GridHierarchy

# Reference element matrices on a square cell, local nodes counter-clockwise
# from the lower-left corner. Stiffness is scale-free in 2D.
Q1_STIFFNESS = np.array(
    [
        [4.0, -1.0, -2.0, -1.0],
        [-1.0, 4.0, -1.0, -2.0],
        [-2.0, -1.0, 4.0, -1.0],
        [-1.0, -2.0, -1.0, 4.0],
    ]
) / 6.0
Q1_MASS_UNIT = np.array(
    [
        [4.0, 2.0, 1.0, 2.0],
        [2.0, 4.0, 2.0, 1.0],
        [1.0, 2.0, 4.0, 2.0],
        [2.0, 1.0, 2.0, 4.0],
    ]
) / 36.0


class Box(NamedTuple):
    """Axis-aligned rectangle [x0, x1] x [y0, y1] in physical coordinates."""

    x0: float
    x1: float
    y0: float
    y1: float

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def inside_unit_square(self) -> bool:
        return 0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0


@dataclass(frozen=True)
class SourceSpec:
    boxes: tuple[tuple[Box, float], ...] = ()

    def __post_init__(self):
        boxes = tuple((Box(*b), float(a)) for b, a in self.boxes)
        for b, _ in boxes:
            if not b.inside_unit_square():
                raise ContractError(f"source box {tuple(b)} is not inside the unit square")
        object.__setattr__(self, "boxes", boxes)

    def total(self) -> float:
        """Integral of f over the domain."""
        return sum(b.area * a for b, a in self.boxes)

    @property
    def regions(self) -> tuple[Box, ...]:
        return tuple(b for b, _ in self.boxes)


@dataclass(frozen=True)
class ProblemSpec:
    T_final: float = 1.0
    nt: int = 20
    g: float | np.ndarray = 0.0
    neumann_h: float = 0.0
    source: SourceSpec = field(default_factory=SourceSpec)
    # observation boxes; defaults to the source boxes
    wells: tuple[Box, ...] | None = None
    # optional time-dependent source f(x, y, t), sampled at nodes and L2-lumped via M
    source_fn: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | None = None

    def __post_init__(self):
        if self.nt < 1:
            raise ContractError(f"nt must be >= 1, got {self.nt}")
        if not self.T_final > 0:
            raise ContractError(f"T_final must be positive, got {self.T_final}")

    @property
    def dt(self) -> float:
        return self.T_final / self.nt

    @property
    def well_boxes(self) -> tuple[Box, ...]:
        return self.wells if self.wells is not None else self.source.regions


@dataclass(frozen=True)
class WellObservation:
    values: np.ndarray  # (n_wells, nt)
    well_defs: tuple[Box, ...] = ()

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("non-finite well observation")


def _kappa_array(kappa: PermeabilityField | np.ndarray) -> np.ndarray:
    return np.asarray(kappa.kappa if isinstance(kappa, PermeabilityField) else kappa, dtype=float)


@lru_cache(maxsize=16)
def _pattern(g: GridHierarchy):
    rows = np.repeat(g.cell_nodes, 4, axis=1).ravel()
    cols = np.tile(g.cell_nodes, (1, 4)).ravel()
    return rows, cols


def assemble_stiffness(kappa: PermeabilityField | np.ndarray, g: GridHierarchy) -> sp.csr_matrix:
    k = _kappa_array(kappa)
    if k.shape != (g.n_fine_cells,):
        raise AssemblyError(f"kappa has shape {k.shape}, expected ({g.n_fine_cells},)")
    if not np.all(k > 0):
        bad = int(np.flatnonzero(~(k > 0))[0])
        raise AssemblyError(f"non-positive permeability {k[bad]} in fine cell {bad}")
    rows, cols = _pattern(g)
    data = (k[:, None] * Q1_STIFFNESS.ravel()[None, :]).ravel()
    n = g.n_fine_nodes
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=16)
def assemble_mass(g: GridHierarchy) -> sp.csr_matrix:
    rows, cols = _pattern(g)
    data = np.tile(Q1_MASS_UNIT.ravel() * g.h**2, g.n_fine_cells)
    n = g.n_fine_nodes
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def assemble_forms(kappa: PermeabilityField | np.ndarray, g: GridHierarchy):
    """Return (stiffness, mass) as CSR matrices."""
    return assemble_stiffness(kappa, g), assemble_mass(g)


def box_cell_fractions(box: Box, g: GridHierarchy) -> np.ndarray:
    """Fraction of each fine cell's area covered by ``box``."""
    edges = np.linspace(0.0, 1.0, g.fine_n + 1)
    ox = np.clip(np.minimum(edges[1:], box.x1) - np.maximum(edges[:-1], box.x0), 0.0, None)
    oy = np.clip(np.minimum(edges[1:], box.y1) - np.maximum(edges[:-1], box.y0), 0.0, None)
    return (np.outer(oy, ox) / g.h**2).ravel()


def cell_source(source: SourceSpec, g: GridHierarchy) -> np.ndarray:
    f = np.zeros(g.n_fine_cells)
    for box, amp in source.boxes:
        f += amp * box_cell_fractions(box, g)
    return f


def cells_to_nodes(cell_values: np.ndarray, g: GridHierarchy) -> np.ndarray:
    """Integral of a piecewise-constant cell function against each hat function."""
    out = np.zeros(g.n_fine_nodes)
    np.add.at(out, g.cell_nodes.ravel(), np.repeat(cell_values * g.h**2 / 4.0, 4))
    return out


def load_vector(source: SourceSpec, g: GridHierarchy) -> np.ndarray:
    return cells_to_nodes(cell_source(source, g), g)


def neumann_vector(h_flux: float, g: GridHierarchy) -> np.ndarray:
    b = np.zeros(g.n_fine_nodes)
    if h_flux == 0.0:
        return b
    n = g.fine_n
    w = np.full(n + 1, g.h)
    w[[0, -1]] = g.h / 2.0
    nodes = np.arange(n + 1)
    for ids in (nodes, n * (n + 1) + nodes, nodes * (n + 1), nodes * (n + 1) + n):
        b[ids] += h_flux * w
    return b


def well_matrix(boxes: Sequence[Box], g: GridHierarchy) -> sp.csr_matrix:
    """Rows average the bilinear interpolant over each box."""
    W = np.zeros((len(boxes), g.n_fine_nodes))
    for k, box in enumerate(boxes):
        frac = box_cell_fractions(Box(*box), g)
        weights = frac * g.h**2 / 4.0 / Box(*box).area
        np.add.at(W[k], g.cell_nodes.ravel(), np.repeat(weights, 4))
    return sp.csr_matrix(W)


def initial_vector(spec: ProblemSpec, g: GridHierarchy) -> np.ndarray:
    g0 = np.asarray(spec.g, dtype=float)
    if g0.ndim == 0:
        return np.full(g.n_fine_nodes, float(g0))
    if g0.shape != (g.n_fine_nodes,):
        raise ContractError(f"initial condition has shape {g0.shape}, expected ({g.n_fine_nodes},)")
    return g0.copy()


def rhs_sequence(spec: ProblemSpec, g: GridHierarchy):
    """Yield the load vector at t_1, ..., t_nt."""
    static = load_vector(spec.source, g) + neumann_vector(spec.neumann_h, g)
    if spec.source_fn is None:
        for _ in range(spec.nt):
            yield static
        return
    M = assemble_mass(g)
    xy = g.node_coords()
    for n in range(1, spec.nt + 1):
        t = n * spec.dt
        yield static + M @ spec.source_fn(xy[:, 0], xy[:, 1], t)


def solve_parabolic(kappa: PermeabilityField | np.ndarray, spec: ProblemSpec, g: GridHierarchy):
    """Backward Euler on the fine grid.

    Returns ``(history, observation)`` where ``history`` has shape
    ``(nt + 1, n_fine_nodes)`` and includes the initial state.
    """
    A, M = assemble_forms(kappa, g)
    dt = spec.dt
    K = (M + dt * A).tocsc()
    lu = spla.splu(K)
    u = initial_vector(spec, g)
    history = np.empty((spec.nt + 1, g.n_fine_nodes))
    history[0] = u
    for n, b in enumerate(rhs_sequence(spec, g), start=1):
        rhs = M @ u + dt * b
        u = lu.solve(rhs)
        norm = np.linalg.norm(rhs)
        if norm > 0 and np.linalg.norm(K @ u - rhs) > 1e-10 * norm:
            raise NumericalError(f"linear solve did not converge at time step {n}")
        history[n] = u
    W = well_matrix(spec.well_boxes, g)
    obs = WellObservation(values=np.asarray(W @ history[1:].T), well_defs=tuple(spec.well_boxes))
    return history, obs


class FineSolver:
    """Fine-grid forward map kappa -> WellObservation with cached structure."""

    def __init__(self, g: GridHierarchy, spec: ProblemSpec):
        self.g = g
        self.spec = spec

    def __call__(self, kappa: PermeabilityField | np.ndarray) -> WellObservation:
        return solve_parabolic(kappa, self.spec, self.g)[1]


def misfit(F: WellObservation | np.ndarray, G: WellObservation | np.ndarray) -> float:
    a = F.values if isinstance(F, WellObservation) else np.asarray(F)
    b = G.values if isinstance(G, WellObservation) else np.asarray(G)
    if a.shape != b.shape:
        raise ContractError(f"observation shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
