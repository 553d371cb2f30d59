"""Generalized multiscale coarse solvers.

For every coarse neighborhood the snapshot space is spanned by the discrete
kappa-harmonic extensions of boundary deltas. A local spectral problem
``a(v, w) = lambda s(v, w)`` over that space selects the dominant modes, which
are multiplied by the partition of unity to make them conforming. A coarse
solver is the Galerkin projection of the fine backward-Euler scheme onto the
span of the first ``L_i`` modes of every neighborhood.

Bases depend on kappa only through its restriction to the neighborhood, so they
are cached under that restriction and reused when a move leaves it unchanged.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ContractError, NumericalError
from .fem import (
    Q1_MASS_UNIT,
    Q1_STIFFNESS,
    ProblemSpec,
    WellObservation,
    _kappa_array,
    assemble_forms,
    initial_vector,
    rhs_sequence,
    well_matrix,
)
from .field import PermeabilityField
from .mesh import CoarseNeighborhood, GridHierarchy, PartitionOfUnity

MapFn = Callable[[Callable, Iterable], Iterable]


@dataclass(frozen=True)
class SnapshotSpace:
    """Harmonic extensions for one neighborhood.

    ``psi`` has one column per boundary node, rows follow
    ``neighborhood.fine_nodes``.
    """

    neighborhood: CoarseNeighborhood
    psi: np.ndarray


@dataclass(frozen=True)
class OfflineBasis:
    """Spectral modes of one neighborhood.

    ``eigenvalues`` and ``eigenvectors`` cover the full snapshot space; only the
    first ``n_selected`` enter ``basis`` (columns, rows on the local nodes).
    """

    neighborhood: CoarseNeighborhood
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n_selected: int
    basis: np.ndarray


@dataclass(frozen=True)
class _LocalOps:
    stiff_scatter: sp.csr_matrix  # (nn*nn, n_cells) maps kappa -> local stiffness
    mass_scatter: sp.csr_matrix  # maps per-cell weight -> local weighted mass
    chi: np.ndarray  # partition of unity of the owning node on local nodes
    grad_sq: np.ndarray  # sum_j |grad chi_j|^2 on local cells


@lru_cache(maxsize=16)
def _grad_sq(g: GridHierarchy) -> np.ndarray:
    return g.pou.grad_sq_sum()


@lru_cache(maxsize=4096)
def _local_ops(g: GridHierarchy, i: int) -> _LocalOps:
    nb = g.neighborhoods[i]
    nn = nb.fine_nodes.size
    nc = nb.fine_cells.size
    conn = nb.local_conn
    flat = (conn[:, :, None] * nn + conn[:, None, :]).reshape(nc, 16)
    rows = flat.ravel()
    cols = np.repeat(np.arange(nc), 16)
    stiff = sp.csr_matrix((np.tile(Q1_STIFFNESS.ravel(), nc), (rows, cols)), shape=(nn * nn, nc))
    mass = sp.csr_matrix(
        (np.tile(Q1_MASS_UNIT.ravel() * g.h**2, nc), (rows, cols)), shape=(nn * nn, nc)
    )
    return _LocalOps(
        stiff_scatter=stiff,
        mass_scatter=mass,
        chi=g.pou.values[i, nb.fine_nodes],
        grad_sq=_grad_sq(g)[nb.fine_cells],
    )


def kappa_tilde(kappa: PermeabilityField | np.ndarray, pou: PartitionOfUnity) -> np.ndarray:
    """kappa * sum_j |grad chi_j|^2, per fine cell."""
    return _kappa_array(kappa) * pou.grad_sq_sum()


def _local_matrices(g: GridHierarchy, i: int, k_local: np.ndarray):
    ops = _local_ops(g, i)
    nn = g.neighborhoods[i].fine_nodes.size
    A = (ops.stiff_scatter @ k_local).reshape(nn, nn)
    S = (ops.mass_scatter @ (k_local * ops.grad_sq)).reshape(nn, nn)
    return A, S


def _snapshots_from_local(g: GridHierarchy, i: int, A: np.ndarray) -> np.ndarray:
    nb = g.neighborhoods[i]
    I, B = nb.interior_local, nb.boundary_local
    psi = np.zeros((nb.fine_nodes.size, B.size))
    psi[B, np.arange(B.size)] = 1.0
    if I.size:
        try:
            factor = sla.cho_factor(A[np.ix_(I, I)])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular local system in neighborhood {i}") from exc
        psi[I] = -sla.cho_solve(factor, A[np.ix_(I, B)])
    return psi


def build_snapshots(kappa: PermeabilityField | np.ndarray, g: GridHierarchy, i: int) -> SnapshotSpace:
    k_local = _kappa_array(kappa)[g.neighborhoods[i].fine_cells]
    A, _ = _local_matrices(g, i, k_local)
    return SnapshotSpace(neighborhood=g.neighborhoods[i], psi=_snapshots_from_local(g, i, A))


def _canonical_eigvecs(vals: np.ndarray, vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # sign: largest-magnitude component positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    vecs = vecs * signs
    # within numerically degenerate clusters, order by the first component
    scale = max(float(np.max(np.abs(vals))), 1.0)
    order = np.arange(vals.size)
    start = 0
    while start < vals.size:
        stop = start + 1
        while stop < vals.size and vals[stop] - vals[start] <= 1e-10 * scale:
            stop += 1
        if stop - start > 1:
            block = order[start:stop]
            order[start:stop] = block[np.argsort(vecs[0, block], kind="stable")]
        start = stop
    return vals[order], vecs[:, order]


def _spectral(A: np.ndarray, S: np.ndarray, psi: np.ndarray, i: int):
    a_snap = psi.T @ A @ psi
    s_snap = psi.T @ S @ psi
    a_snap = 0.5 * (a_snap + a_snap.T)
    s_snap = 0.5 * (s_snap + s_snap.T)
    try:
        vals, vecs = sla.eigh(a_snap, s_snap)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"snapshot mass matrix of neighborhood {i} is not positive definite"
        ) from exc
    return _canonical_eigvecs(vals, vecs)


def build_offline(
    snap: SnapshotSpace,
    pou: PartitionOfUnity,
    kappa: PermeabilityField | np.ndarray,
    Li: int,
    g: GridHierarchy,
) -> OfflineBasis:
    nb = snap.neighborhood
    if not 1 <= Li <= snap.psi.shape[1]:
        raise ContractError(f"Li={Li} outside [1, {snap.psi.shape[1]}] for neighborhood {nb.node_id}")
    k_local = _kappa_array(kappa)[nb.fine_cells]
    A, S = _local_matrices(g, nb.node_id, k_local)
    vals, vecs = _spectral(A, S, snap.psi, nb.node_id)
    chi = pou.values[nb.node_id, nb.fine_nodes]
    basis = chi[:, None] * (snap.psi @ vecs[:, :Li])
    return OfflineBasis(nb, vals, vecs, Li, basis)


@dataclass
class _CacheEntry:
    eigenvalues: np.ndarray
    modes: np.ndarray  # conforming modes, all of them (local nodes x n_snap)
    reduced: dict = field(default_factory=dict)  # Li -> orthonormal span of first Li modes


class OfflineCache:
    """Thread-safe LRU cache of per-neighborhood spectral data keyed by local kappa."""

    def __init__(self, g: GridHierarchy, max_entries: int = 50_000):
        self.g = g
        self.max_entries = max_entries
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _compute(self, i: int, k_local: np.ndarray) -> _CacheEntry:
        g = self.g
        A, S = _local_matrices(g, i, k_local)
        psi = _snapshots_from_local(g, i, A)
        vals, vecs = _spectral(A, S, psi, i)
        modes = _local_ops(g, i).chi[:, None] * (psi @ vecs)
        return _CacheEntry(vals, modes)

    def entry(self, i: int, k_local: np.ndarray) -> _CacheEntry:
        key = (i, k_local.tobytes())
        with self._lock:
            hit = self._data.get(key)
            if hit is not None:
                self._data.move_to_end(key)
                self.hits += 1
                return hit
        value = self._compute(i, k_local)
        with self._lock:
            self.misses += 1
            self._data[key] = value
            while len(self._data) > self.max_entries:
                self._data.popitem(last=False)
        return value

    def reduced_basis(self, i: int, k_local: np.ndarray, Li: int) -> np.ndarray:
        """Orthonormal columns spanning the first ``Li`` conforming modes."""
        e = self.entry(i, k_local)
        red = e.reduced.get(Li)
        if red is None:
            B = e.modes[:, :Li]
            U, s, _ = np.linalg.svd(B, full_matrices=False)
            keep = s > 1e-10 * s[0] if s.size and s[0] > 0 else np.zeros(0, dtype=bool)
            red = U[:, keep]
            # deterministic sign
            idx = np.argmax(np.abs(red), axis=0)
            red = red * np.sign(red[idx, np.arange(red.shape[1])])
            e.reduced[Li] = red
        return red

    def __len__(self) -> int:
        return len(self._data)


@dataclass
class CoarseSolverLevel:
    """Coarse forward solver using ``basis_per_neighborhood`` modes everywhere.

    ``basis_per_neighborhood`` may be an int, a per-neighborhood sequence, or
    ``"all"`` for the full snapshot space of every neighborhood.
    """

    level: int
    basis_per_neighborhood: int | tuple[int, ...] | str
    g: GridHierarchy
    spec: ProblemSpec
    cache: OfflineCache
    map_fn: MapFn = map

    def __post_init__(self):
        self._W = well_matrix(self.spec.well_boxes, self.g)
        self._rhs = [b.copy() for b in rhs_sequence(self.spec, self.g)]
        self._g0 = initial_vector(self.spec, self.g)

    def counts(self) -> list[int]:
        L = self.basis_per_neighborhood
        n = len(self.g.neighborhoods)
        if isinstance(L, str):
            if L != "all":
                raise ContractError(f"unknown basis count {L!r}")
            return [nb.boundary_nodes.size for nb in self.g.neighborhoods]
        if isinstance(L, (int, np.integer)):
            out = [int(L)] * n
        else:
            out = [int(v) for v in L]
            if len(out) != n:
                raise ContractError(f"need {n} basis counts, got {len(out)}")
        for nb, v in zip(self.g.neighborhoods, out):
            if not 1 <= v <= nb.boundary_nodes.size:
                raise ContractError(f"basis count {v} invalid for neighborhood {nb.node_id}")
        return out

    def projection(self, kappa: PermeabilityField | np.ndarray) -> sp.csr_matrix:
        """Sparse (n_dof, n_fine_nodes) restriction whose rows are the basis functions."""
        k = _kappa_array(kappa)
        g = self.g

        def one(args):
            i, Li = args
            nb = g.neighborhoods[i]
            return self.cache.reduced_basis(i, k[nb.fine_cells], Li)

        blocks = list(self.map_fn(one, list(enumerate(self.counts()))))
        rows, cols, data = [], [], []
        offset = 0
        for nb, B in zip(g.neighborhoods, blocks):
            r, c = np.nonzero(B)
            rows.append(offset + c)
            cols.append(nb.fine_nodes[r])
            data.append(B[r, c])
            offset += B.shape[1]
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, g.n_fine_nodes),
        )

    def solve(self, kappa: PermeabilityField | np.ndarray, return_history: bool = False):
        R = self.projection(kappa)
        A, M = assemble_forms(kappa, self.g)
        Ac = (R @ A @ R.T).toarray()
        Mc = (R @ M @ R.T).toarray()
        dt = self.spec.dt
        K = Mc + dt * Ac
        K = 0.5 * (K + K.T)
        try:
            factor = sla.cho_factor(K)
            Mfac = sla.cho_factor(0.5 * (Mc + Mc.T))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("coarse Galerkin system is not positive definite") from exc
        c = sla.cho_solve(Mfac, R @ (M @ self._g0)) if np.any(self._g0) else np.zeros(R.shape[0])
        coeffs = np.empty((self.spec.nt, R.shape[0]))
        for n, b in enumerate(self._rhs):
            c = sla.cho_solve(factor, Mc @ c + dt * (R @ b))
            coeffs[n] = c
        WR = np.asarray((self._W @ R.T).todense())
        obs = WellObservation(values=WR @ coeffs.T, well_defs=tuple(self.spec.well_boxes))
        if return_history:
            return (R.T @ coeffs.T).T, obs
        return obs

    def __call__(self, kappa: PermeabilityField | np.ndarray) -> WellObservation:
        return self.solve(kappa)


def coarse_solve(level: CoarseSolverLevel, kappa: PermeabilityField | np.ndarray, spec: ProblemSpec | None = None) -> WellObservation:
    if spec is not None and spec is not level.spec:
        level = CoarseSolverLevel(level.level, level.basis_per_neighborhood, level.g, spec, level.cache, level.map_fn)
    return level.solve(kappa)


def build_levels(
    g: GridHierarchy, spec: ProblemSpec, basis_counts=(2, 4), cache: OfflineCache | None = None
) -> list[CoarseSolverLevel]:
    """Coarse solvers ordered cheapest first; counts must be non-decreasing."""
    counts = list(basis_counts)
    if any(b < a for a, b in zip(counts, counts[1:])):
        raise ContractError(f"basis counts must be non-decreasing, got {counts}")
    cache = cache or OfflineCache(g)
    return [CoarseSolverLevel(l + 1, Li, g, spec, cache) for l, Li in enumerate(counts)]
