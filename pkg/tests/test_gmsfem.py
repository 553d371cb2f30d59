from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.sparse as sp

from rlmcmc.errors import ContractError
from rlmcmc.fem import Q1_MASS_UNIT, Q1_STIFFNESS, FineSolver, ProblemSpec, assemble_stiffness, misfit
from rlmcmc.field import ChannelRect, rasterize
from rlmcmc.gmsfem import (
    CoarseSolverLevel,
    OfflineCache,
    build_levels,
    build_offline,
    build_snapshots,
    coarse_solve,
    kappa_tilde,
)
from rlmcmc.mesh import build_hierarchy

TWO_CHANNELS = (ChannelRect(6, 12, 20, 2), ChannelRect(24, 16, 2, 18))
SMALL_CHANNEL = (ChannelRect(3, 6, 10, 1),)


def random_high_contrast(g, rng):
    return np.where(rng.random(g.n_fine_cells) < 0.3, 1000.0, 1.0)


def test_snapshot_boundary_values_are_deltas(g20, rng):
    kappa = random_high_contrast(g20, rng)
    for i in (0, 6, 12):
        snap = build_snapshots(kappa, g20, i)
        B = snap.neighborhood.boundary_local
        np.testing.assert_array_equal(snap.psi[B], np.eye(B.size))


def test_snapshots_sum_to_one(g40, rng):
    for kappa in (np.ones(g40.n_fine_cells), random_high_contrast(g40, rng)):
        for i in range(len(g40.neighborhoods)):
            psi = build_snapshots(kappa, g40, i).psi
            assert np.max(np.abs(psi.sum(axis=1) - 1.0)) < 1e-10


def test_snapshots_are_discretely_harmonic(g20, rng):
    kappa = random_high_contrast(g20, rng)
    A = assemble_stiffness(kappa, g20).toarray()
    for i in g20.interior_coarse_nodes():
        snap = build_snapshots(kappa, g20, i)
        nb = snap.neighborhood
        full = np.zeros((g20.n_fine_nodes, snap.psi.shape[1]))
        full[nb.fine_nodes] = snap.psi
        residual = (A @ full)[nb.interior_nodes]
        assert np.max(np.abs(residual)) < 1e-10 * np.abs(A).max()


def test_snapshot_maximum_principle(g40, rng):
    kappa = random_high_contrast(g40, rng)
    for i in range(len(g40.neighborhoods)):
        psi = build_snapshots(kappa, g40, i).psi
        assert psi.min() >= -1e-12 and psi.max() <= 1.0 + 1e-12


def _offline(kappa, g, i, Li=None):
    snap = build_snapshots(kappa, g, i)
    return snap, build_offline(snap, g.pou, kappa, Li or snap.psi.shape[1], g)


def test_full_selection_spans_weighted_snapshots(g20, rng):
    kappa = random_high_contrast(g20, rng)
    for i in (0, 7, 12):
        snap, off = _offline(kappa, g20, i)
        chi = g20.pou.values[i, snap.neighborhood.fine_nodes]
        target = chi[:, None] * snap.psi
        Q, _ = np.linalg.qr(off.basis)
        residual = target - Q @ (Q.T @ target)
        assert np.max(np.abs(residual)) < 1e-10


def test_constant_mode_for_unit_kappa(g40):
    kappa = np.ones(g40.n_fine_cells)
    for i in g40.interior_coarse_nodes()[:5]:
        _, off = _offline(kappa, g40, i)
        lam = off.eigenvalues
        assert abs(lam[0]) < 1e-8 * lam[1]


def _local_form(g, cells, weight, element):
    """Global-size matrix of one Q1 element form restricted to ``cells``."""
    rows = np.repeat(g.cell_nodes[cells], 4, axis=1).ravel()
    cols = np.tile(g.cell_nodes[cells], (1, 4)).ravel()
    data = (weight[cells][:, None] * element.ravel()[None, :]).ravel()
    return sp.csr_matrix((data, (rows, cols)), shape=(g.n_fine_nodes, g.n_fine_nodes))


def test_eigenvalues_ascending_and_rayleigh_consistent(g40):
    kappa = rasterize(TWO_CHANNELS, g40).kappa
    kt = kappa_tilde(kappa, g40.pou)
    for i in (0, 10, 40, 80):
        snap, off = _offline(kappa, g40, i)
        lam = off.eigenvalues
        scale = max(1.0, lam.max())
        assert np.all(np.diff(lam) >= -1e-10 * scale)
        assert lam.min() >= -1e-10 * scale
        nb = snap.neighborhood
        A_loc = _local_form(g40, nb.fine_cells, kappa, Q1_STIFFNESS)
        S_loc = _local_form(g40, nb.fine_cells, kt, Q1_MASS_UNIT * g40.h**2)
        for k in range(lam.size):
            v = np.zeros(g40.n_fine_nodes)
            v[nb.fine_nodes] = snap.psi @ off.eigenvectors[:, k]
            rq = (v @ (A_loc @ v)) / (v @ (S_loc @ v))
            assert abs(rq - lam[k]) <= 1e-8 * max(1.0, abs(lam[k]))


def test_basis_vanishes_on_inner_rim(g40):
    kappa = rasterize(TWO_CHANNELS, g40).kappa
    xy = g40.node_coords()
    on_domain_edge = np.any((xy == 0.0) | (xy == 1.0), axis=1)
    for i in (0, 4, 40):
        snap, off = _offline(kappa, g40, i, Li=3)
        nb = snap.neighborhood
        rim = nb.boundary_local[~on_domain_edge[nb.boundary_nodes]]
        assert np.all(off.basis[rim] == 0.0)
        assert off.basis.shape == (nb.fine_nodes.size, 3)


def test_offline_is_bit_deterministic(g40):
    kappa = rasterize(TWO_CHANNELS, g40).kappa
    a = _offline(kappa, g40, 40, Li=4)[1]
    b = _offline(kappa.copy(), g40, 40, Li=4)[1]
    np.testing.assert_array_equal(a.basis, b.basis)
    np.testing.assert_array_equal(a.eigenvalues, b.eigenvalues)


def test_too_many_modes_rejected(g20):
    snap = build_snapshots(np.ones(g20.n_fine_cells), g20, 0)
    with pytest.raises(ContractError):
        build_offline(snap, g20.pou, np.ones(g20.n_fine_cells), snap.psi.shape[1] + 1, g20)


def test_kappa_tilde_nonnegative(g40, rng):
    kt = kappa_tilde(random_high_contrast(g40, rng), g40.pou)
    assert kt.min() >= 0.0


def test_full_space_reproduces_fine_solution(exp1_spec):
    g = build_hierarchy(20, 20)
    kappa = rasterize((ChannelRect(3, 6, 10, 1), ChannelRect(12, 8, 1, 9)), g).kappa
    fine = FineSolver(g, exp1_spec)(kappa)
    coarse = CoarseSolverLevel(1, "all", g, exp1_spec, OfflineCache(g))(kappa)
    assert np.max(np.abs(fine.values - coarse.values)) < 1e-6


def test_zero_data_gives_zero_observation(g20, exp1_spec):
    spec = ProblemSpec(wells=exp1_spec.well_boxes)
    level = CoarseSolverLevel(1, 2, g20, spec, OfflineCache(g20))
    obs = coarse_solve(level, rasterize(SMALL_CHANNEL, g20).kappa)
    assert np.all(obs.values == 0.0)
    assert obs.values.shape == (4, spec.nt)


def richness_misfits(g, spec, counts=(1, 2, 3, 4)):
    kappa = rasterize(TWO_CHANNELS, g).kappa
    fine = FineSolver(g, spec)(kappa)
    cache = OfflineCache(g)
    return [misfit(fine, CoarseSolverLevel(1, L, g, spec, cache)(kappa)) for L in counts]


def test_richer_space_lowers_misfit(g40, exp1_spec):
    ms = richness_misfits(g40, exp1_spec)
    assert ms[-1] < ms[0]
    for a, b in zip(ms, ms[1:]):
        assert b <= 1.05 * a


def test_history_prolongs_to_fine_nodes(g20, exp1_spec):
    level = CoarseSolverLevel(1, 3, g20, exp1_spec, OfflineCache(g20))
    hist, obs = level.solve(rasterize(SMALL_CHANNEL, g20).kappa, return_history=True)
    assert hist.shape == (exp1_spec.nt, g20.n_fine_nodes)
    np.testing.assert_allclose(level._W @ hist.T, obs.values, atol=1e-12)


def test_cache_reuses_untouched_neighborhoods(g40, exp1_spec):
    cache = OfflineCache(g40)
    level = CoarseSolverLevel(1, 2, g40, exp1_spec, cache)
    s = (ChannelRect(6, 12, 4, 2),)
    level(rasterize(s, g40))
    misses = cache.misses
    moved = (ChannelRect(7, 12, 4, 2),)
    level(rasterize(moved, g40))
    before, after = rasterize(s, g40).kappa, rasterize(moved, g40).kappa
    touched = sum(
        1 for nb in g40.neighborhoods if not np.array_equal(before[nb.fine_cells], after[nb.fine_cells])
    )
    assert cache.misses - misses == touched
    assert 0 < touched < len(g40.neighborhoods)


def test_parallel_map_matches_serial(g40, exp1_spec):
    kappa = rasterize(TWO_CHANNELS, g40).kappa
    serial = CoarseSolverLevel(1, 2, g40, exp1_spec, OfflineCache(g40))(kappa)
    with ThreadPoolExecutor(4) as pool:
        par = CoarseSolverLevel(1, 2, g40, exp1_spec, OfflineCache(g40), map_fn=pool.map)(kappa)
    np.testing.assert_array_equal(serial.values, par.values)


def test_level_counts_validation(g20, exp1_spec):
    cache = OfflineCache(g20)
    with pytest.raises(ContractError):
        build_levels(g20, exp1_spec, (4, 2), cache)
    with pytest.raises(ContractError):
        CoarseSolverLevel(1, 0, g20, exp1_spec, cache).counts()
    with pytest.raises(ContractError):
        CoarseSolverLevel(1, "most", g20, exp1_spec, cache).counts()
    levels = build_levels(g20, exp1_spec, (2, 4), cache)
    assert [l.basis_per_neighborhood for l in levels] == [2, 4]
    assert levels[0].cache is levels[1].cache
