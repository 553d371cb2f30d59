import numpy as np
import pytest
import scipy.sparse.linalg as spla

from rlmcmc import fem
from rlmcmc.errors import AssemblyError, ContractError, NumericalError
from rlmcmc.fem import (
    Box,
    ProblemSpec,
    SourceSpec,
    WellObservation,
    assemble_forms,
    misfit,
    solve_parabolic,
)
from rlmcmc.field import ChannelRect, rasterize
from rlmcmc.harness.experiments import EXP1_SOURCES
from rlmcmc.mesh import build_hierarchy


def _exp1_source():
    return SourceSpec(tuple((Box(*b[:4]), b[4]) for b in EXP1_SOURCES))


def manufactured_l2_error(n: int, T: float = 0.1) -> float:
    """u = cos(pi x) cos(pi y) exp(-t) with f = (2 pi^2 - 1) u, dt = h^2."""
    g = build_hierarchy(n, 2)
    xy = g.node_coords()
    shape = np.cos(np.pi * xy[:, 0]) * np.cos(np.pi * xy[:, 1])
    nt = int(round(T * n * n))
    spec = ProblemSpec(
        T_final=T,
        nt=nt,
        g=shape.copy(),
        source_fn=lambda x, y, t: (2 * np.pi**2 - 1) * np.cos(np.pi * x) * np.cos(np.pi * y) * np.exp(-t),
    )
    hist, _ = solve_parabolic(np.ones(g.n_fine_cells), spec, g)
    e = hist[-1] - shape * np.exp(-T)
    M = fem.assemble_mass(g)
    return float(np.sqrt(e @ (M @ e)))


def convergence_orders():
    errs = [manufactured_l2_error(n) for n in (10, 20, 40)]
    return errs, [np.log2(errs[k] / errs[k + 1]) for k in range(2)]


def test_manufactured_solution_converges_at_second_order():
    errs, orders = convergence_orders()
    assert errs[0] > errs[1] > errs[2]
    for p in orders:
        assert abs(p - 2.0) <= 0.3, (errs, orders)


def test_stiffness_kernel_and_mass_total(g20):
    A, M = assemble_forms(np.ones(g20.n_fine_cells), g20)
    assert np.max(np.abs(A @ np.ones(g20.n_fine_nodes))) < 1e-12
    assert M.sum() == pytest.approx(1.0, abs=1e-12)
    assert max(np.diff(A.indptr)) <= 9


def test_two_by_two_stiffness_by_hand():
    g = build_hierarchy(2, 2)
    A, _ = assemble_forms(np.ones(4), g)
    expected = np.array(
        [
            [4, -1, 0, -1, -2, 0, 0, 0, 0],
            [-1, 8, -1, -2, -2, -2, 0, 0, 0],
            [0, -1, 4, 0, -2, -1, 0, 0, 0],
            [-1, -2, 0, 8, -2, 0, -1, -2, 0],
            [-2, -2, -2, -2, 16, -2, -2, -2, -2],
            [0, -2, -1, 0, -2, 8, 0, -2, -1],
            [0, 0, 0, -1, -2, 0, 4, -1, 0],
            [0, 0, 0, -2, -2, -2, -1, 8, -1],
            [0, 0, 0, 0, -2, -1, 0, -1, 4],
        ]
    ) / 6.0
    np.testing.assert_allclose(A.toarray(), expected, atol=1e-15)


def test_forms_symmetric_and_mass_positive_definite(g20, rng):
    kappa = rasterize((ChannelRect(3, 4, 10, 2), ChannelRect(12, 2, 2, 15)), g20).kappa
    A, M = assemble_forms(kappa, g20)
    assert abs(A - A.T).max() < 1e-12
    assert abs(M - M.T).max() < 1e-12
    assert np.linalg.eigvalsh(M.toarray()).min() > 0
    v = rng.normal(size=g20.n_fine_nodes)
    assert v @ (A @ v) >= -1e-10


def test_nonpositive_kappa_rejected(g20):
    k = np.ones(g20.n_fine_cells)
    k[17] = 0.0
    with pytest.raises(AssemblyError, match="17"):
        assemble_forms(k, g20)


def test_constant_state_does_not_drift(g20):
    spec = ProblemSpec(g=3.5)
    hist, obs = solve_parabolic(np.ones(g20.n_fine_cells), spec, g20)
    assert np.max(np.abs(hist - 3.5)) < 1e-10
    assert obs.values.shape == (0, spec.nt)


def test_mean_changes_by_source_integral(g40):
    src = _exp1_source()
    spec = ProblemSpec(source=src)
    kappa = rasterize((ChannelRect(6, 12, 20, 2),), g40).kappa
    hist, obs = solve_parabolic(kappa, spec, g40)
    M = fem.assemble_mass(g40)
    means = hist @ (M @ np.ones(g40.n_fine_nodes))
    np.testing.assert_allclose(np.diff(means), spec.dt * src.total(), atol=1e-10)
    assert src.total() == pytest.approx(0.01 * (20 - 5 + 20 - 5))
    assert obs.values.shape == (4, 20)


def test_neumann_flux_enters_mean(g20):
    spec = ProblemSpec(neumann_h=0.25, nt=5)
    hist, _ = solve_parabolic(np.ones(g20.n_fine_cells), spec, g20)
    M = fem.assemble_mass(g20)
    means = hist @ (M @ np.ones(g20.n_fine_nodes))
    # flux integrates over a perimeter of length 4
    np.testing.assert_allclose(np.diff(means), spec.dt * 0.25 * 4.0, atol=1e-12)


def test_energy_non_increasing_without_forcing(g20, rng):
    kappa = rasterize((ChannelRect(2, 2, 12, 3),), g20).kappa
    spec = ProblemSpec(g=rng.normal(size=g20.n_fine_nodes), nt=30)
    hist, _ = solve_parabolic(kappa, spec, g20)
    M = fem.assemble_mass(g20)
    energy = np.einsum("ti,ti->t", hist, (M @ hist.T).T)
    assert np.all(np.diff(energy) <= 1e-12)


def test_superposition_of_sources(g20):
    kappa = rasterize((ChannelRect(4, 4, 8, 2),), g20).kappa
    wells = (Box(0.1, 0.2, 0.1, 0.2), Box(0.7, 0.8, 0.6, 0.7))
    s1 = SourceSpec(((Box(0.1, 0.2, 0.1, 0.2), 20.0),))
    s2 = SourceSpec(((Box(0.75, 0.85, 0.55, 0.65), -5.0),))
    both = SourceSpec(s1.boxes + s2.boxes)
    obs = [solve_parabolic(kappa, ProblemSpec(source=s, wells=wells), g20)[1].values for s in (s1, s2, both)]
    np.testing.assert_allclose(obs[0] + obs[1], obs[2], atol=1e-10)


def test_well_value_is_box_average_of_linear_field(g20):
    # averaging a linear function over a box returns its value at the center
    xy = g20.node_coords()
    u = 2.0 * xy[:, 0] - 0.5 * xy[:, 1]
    W = fem.well_matrix((Box(0.1, 0.3, 0.2, 0.45),), g20)
    assert (W @ u)[0] == pytest.approx(2.0 * 0.2 - 0.5 * 0.325, abs=1e-12)


def test_failed_linear_solve_is_reported(g20, monkeypatch):
    class Broken:
        def __init__(self, K):
            pass

        def solve(self, rhs):
            return np.zeros_like(rhs)

    monkeypatch.setattr(spla, "splu", Broken)
    spec = ProblemSpec(source=_exp1_source(), nt=3)
    with pytest.raises(NumericalError, match="step 1"):
        solve_parabolic(np.ones(g20.n_fine_cells), spec, g20)


def test_misfit_examples():
    rng = np.random.default_rng(0)
    F = WellObservation(rng.normal(size=(4, 50)))
    G = WellObservation(F.values + 1.0)
    assert misfit(F, F) == 0.0
    assert misfit(F, G) == pytest.approx(np.sqrt(200.0))
    assert misfit(F, G) == misfit(G, F)
    with pytest.raises(ContractError):
        misfit(F, WellObservation(np.zeros((4, 49))))


def test_observation_rejects_non_finite():
    with pytest.raises(NumericalError):
        WellObservation(np.array([[np.nan]]))


def test_spec_validation():
    with pytest.raises(ContractError):
        ProblemSpec(nt=0)
    with pytest.raises(ContractError):
        ProblemSpec(T_final=0.0)
    with pytest.raises(ContractError):
        SourceSpec(((Box(0.9, 1.1, 0.0, 0.1), 1.0),))
