"""Self-checks with exactly known answers, runnable from the command line."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..field import ActionId, ChannelRect, rasterize
from ..fem import FineSolver
from ..gmsfem import CoarseSolverLevel, OfflineCache
from ..mcmc import PosteriorLevel, StateForward, UniformProposal, enumerate_chain_posterior, mlmcmc_step, one_channel_line
from ..mesh import build_hierarchy
from ..nn import Mlp, finite_difference_grad, flatten, grad, max_relative_error, mse_loss, policy_nll_loss
from .experiments import EXP2_SOURCES, build_experiment, problem_spec


@dataclass
class MhOracleResult:
    states: list
    exact: np.ndarray
    empirical: np.ndarray
    counts: np.ndarray
    # transitions[a, b]: observed moves a -> b (self-loops included)
    transitions: np.ndarray
    tv: float


def mh_oracle_chain(fine_n: int = 20, coarse_n: int = 4):
    """A single channel that may only slide horizontally across ten positions.

    Returns the lattice states, a single coarse posterior level and the proposal.
    """
    g = build_hierarchy(fine_n, coarse_n)
    cfg = build_experiment("exp2_onechannel").replace(
        grid={"fine_n": fine_n, "coarse_n": coarse_n}, sources=[list(b) for b in EXP2_SOURCES]
    )
    spec = problem_spec(cfg)
    width = fine_n - 9
    depth = fine_n // 5
    y = (fine_n - depth) // 2
    states = one_channel_line(fine_n, y, width, depth)
    target = (ChannelRect(4, y, width, depth),)
    F_obs = FineSolver(g, spec)(rasterize(target, g))
    solver = CoarseSolverLevel(0, 2, g, spec, OfflineCache(g))
    level = PosteriorLevel(StateForward(solver, g), 1.0, F_obs, name="oracle")
    # a noise scale near the typical misfit keeps every state visited
    ms = np.array([level.misfit(s) for s in states])
    level = level.with_sigma(float(np.median(ms)))
    proposal = UniformProposal(fine_n, (ActionId.SHIFT_LEFT, ActionId.SHIFT_RIGHT), agent=0)
    return states, level, proposal


def mh_oracle(n_steps: int = 20_000, seed: int = 0) -> MhOracleResult:
    """Run the ten-state chain and measure total variation to the enumerated posterior."""
    states, level, proposal = mh_oracle_chain()
    exact = enumerate_chain_posterior(level, states)
    index = {s: i for i, s in enumerate(states)}
    rng = np.random.default_rng(seed)
    s = states[0]
    counts = np.zeros(len(states))
    trans = np.zeros((len(states), len(states)))
    for _ in range(n_steps):
        out = mlmcmc_step(s, proposal, [level], rng)
        trans[index[s], index[out.next]] += 1
        s = out.next
        counts[index[s]] += 1
    empirical = counts / counts.sum()
    tv = 0.5 * float(np.abs(empirical - exact).sum())
    return MhOracleResult(states, exact, empirical, counts, trans, tv)


def gradcheck(n_nets: int = 10, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error of analytic against central-difference gradients.

    Actor: 4-16-8 policy under -log pi(a|s). Critic: 8-16-1 value net under
    the mean squared error on batches of 8.
    """
    rng = np.random.default_rng(seed)
    worst = {"actor": 0.0, "critic": 0.0}
    for _ in range(n_nets):
        policy = Mlp.init((4, 16, 8), rng, zero_last=False)
        x = rng.uniform(0.0, 1.0, size=(1, 4))
        mask = np.ones((1, 8), dtype=bool)
        mask[0, rng.choice(8, size=2, replace=False)] = False
        a = np.array([int(rng.choice(np.flatnonzero(mask[0])))])
        loss = policy_nll_loss(a, mask, np.ones(1))
        _, g = grad(policy, x, loss)
        fd = finite_difference_grad(policy, x, loss, step)
        worst["actor"] = max(worst["actor"], max_relative_error(flatten(g), fd))

        critic = Mlp.init((8, 16, 1), rng, zero_last=False)
        X = rng.uniform(0.0, 1.0, size=(8, 8))
        loss = mse_loss(rng.normal(size=8))
        _, g = grad(critic, X, loss)
        fd = finite_difference_grad(critic, X, loss, step)
        worst["critic"] = max(worst["critic"], max_relative_error(flatten(g), fd))
    return worst
