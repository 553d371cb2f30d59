"""Level posteriors and the multilevel Metropolis-Hastings cascade."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ContractError
from .fem import WellObservation, misfit as obs_misfit
from .field import (
    ALL_ACTIONS,
    ActionId,
    ChannelRect,
    GlobalState,
    apply_action,
    feasible_mask,
    inverse_action,
    rasterize,
    replace_channel,
)
from .mesh import GridHierarchy


class StateForward:
    """Maps a channel state to a well observation through a kappa-level solver.

    Results are memoized under the rasterized field, so states producing the same
    permeability share one solve.
    """

    def __init__(self, solver: Callable, g: GridHierarchy, contrast: float = 1000.0, max_cache: int = 20_000):
        self.solver = solver
        self.g = g
        self.contrast = contrast
        self.max_cache = max_cache
        self._cache: OrderedDict = OrderedDict()
        self.n_solves = 0

    def __call__(self, state: GlobalState) -> WellObservation:
        kappa = rasterize(state, self.g, self.contrast)
        key = kappa.digest()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        obs = self.solver(kappa)
        self.n_solves += 1
        self._cache[key] = obs
        if len(self._cache) > self.max_cache:
            self._cache.popitem(last=False)
        return obs


@dataclass
class PosteriorLevel:
    """Unnormalized log density ``-misfit^2 / sigma_f^2`` with a flat prior."""

    forward: Callable[[GlobalState], WellObservation | np.ndarray]
    sigma_f: float
    F_obs: WellObservation | np.ndarray
    name: str = ""
    _misfits: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.sigma_f > 0:
            raise ContractError(f"sigma_f must be positive, got {self.sigma_f}")

    def misfit(self, s: GlobalState) -> float:
        key = tuple(s)
        m = self._misfits.get(key)
        if m is None:
            m = obs_misfit(self.F_obs, self.forward(key))
            if len(self._misfits) > 50_000:
                self._misfits.clear()
            self._misfits[key] = m
        return m

    def log_density(self, s: GlobalState) -> float:
        m = self.misfit(s)
        return -(m * m) / (self.sigma_f * self.sigma_f)

    def with_sigma(self, sigma_f: float) -> "PosteriorLevel":
        return PosteriorLevel(self.forward, sigma_f, self.F_obs, self.name, self._misfits)


def log_posterior(level: PosteriorLevel, s: GlobalState) -> float:
    return level.log_density(s)


@dataclass(frozen=True)
class Proposal:
    """A candidate state with log q(state | current) and log q(current | state)."""

    state: GlobalState
    log_fwd: float
    log_rev: float
    agent: int | None = None
    action: ActionId | None = None


class ProposalGenerator(Protocol):
    def propose(self, s: GlobalState, rng: np.random.Generator) -> Proposal | None: ...


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw using exactly one uniform from ``rng``."""
    u = rng.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # rounding can push the draw past the last non-zero entry
    return min(idx, int(np.flatnonzero(probs > 0)[-1]))


def _exp_clamped(log_ratio: float) -> float:
    if math.isnan(log_ratio):
        return 0.0
    return 1.0 if log_ratio >= 0.0 else math.exp(log_ratio)


def rho0_from_logs(log_pi_c: float, log_pi_s: float, log_fwd: float, log_rev: float) -> float:
    if log_rev == -math.inf:
        return 0.0
    # pairwise differences first so equal terms cancel exactly
    return _exp_clamped((log_pi_c - log_pi_s) + (log_rev - log_fwd))


def rho0(c: GlobalState, s: GlobalState, q: Proposal, level0: PosteriorLevel) -> float:
    """Level-0 acceptance probability for a proposal ``q`` taking ``s`` to ``c``."""
    return rho0_from_logs(level0.log_density(c), level0.log_density(s), q.log_fwd, q.log_rev)


def rho_level_from_logs(lo_s: float, hi_c: float, lo_c: float, hi_s: float) -> float:
    return _exp_clamped((hi_c - hi_s) - (lo_c - lo_s))


def rho_level(c_prev: GlobalState, s: GlobalState, level_lo: PosteriorLevel, level_hi: PosteriorLevel) -> float:
    return rho_level_from_logs(
        level_lo.log_density(s), level_hi.log_density(c_prev), level_lo.log_density(c_prev), level_hi.log_density(s)
    )


@dataclass
class StepOutcome:
    accepted: bool
    next: GlobalState
    proposal: Proposal | None
    level_reached: int
    rhos: list[float]
    evaluations: list[int]


def _accept(rho: float, rng) -> bool:
    u = rng.random()
    return rho >= 1.0 or u < rho


def mlmcmc_step(s: GlobalState, q: ProposalGenerator, levels: Sequence[PosteriorLevel], rng) -> StepOutcome:
    """One pass of the multilevel cascade.

    Level 0 applies the Hastings-corrected test; each later level corrects the
    previous one with the ratio of the two level posteriors. The first rejection
    ends the step, so finer levels are never evaluated for rejected proposals.
    """
    if not levels:
        raise ContractError("need at least one posterior level")
    n_levels = len(levels)
    evaluations = [0] * n_levels
    prop = q.propose(s, rng)
    if prop is None:
        return StepOutcome(False, s, None, 0, [], evaluations)
    c = prop.state

    evaluations[0] = 1
    log_c = levels[0].log_density(c)
    log_s = levels[0].log_density(s)
    rho = rho0_from_logs(log_c, log_s, prop.log_fwd, prop.log_rev)
    rhos = [rho]
    if not _accept(rho, rng):
        return StepOutcome(False, s, prop, 0, rhos, evaluations)

    for l in range(1, n_levels):
        evaluations[l] = 1
        hi_c = levels[l].log_density(c)
        hi_s = levels[l].log_density(s)
        rho = rho_level_from_logs(log_s, hi_c, log_c, hi_s)
        rhos.append(rho)
        if not _accept(rho, rng):
            return StepOutcome(False, s, prop, l, rhos, evaluations)
        log_c, log_s = hi_c, hi_s
    return StepOutcome(True, c, prop, n_levels, rhos, evaluations)


def uniform_log_density(n_feasible: int) -> float:
    # same operation sequence as a log-softmax over zero logits
    return float(0.0 - np.log(np.full((1, 1), float(n_feasible)))[0, 0])


def uniform_proposal(
    s: GlobalState,
    rng: np.random.Generator,
    fine_n: int,
    agent: int | None = None,
    actions: Sequence[ActionId] = ALL_ACTIONS,
) -> Proposal:
    """Uniform random walk over the feasible lattice moves.

    With ``agent=None`` the mover is drawn uniformly and both densities carry
    the ``1/N`` factor; otherwise they are conditional on ``agent``.
    """
    n = len(s)
    if agent is None:
        agent = int(rng.integers(n))
        log_pick = -math.log(n)
    else:
        log_pick = 0.0
    c = s[agent]
    mask = feasible_mask(c, fine_n, actions)
    k = int(mask.sum())
    if k == 0:
        raise ContractError(f"agent {agent} has no feasible action at {tuple(c)}")
    idx = sample_categorical(mask / k, rng)
    a = actions[idx]
    c_new = apply_action(c, a, fine_n)
    back = feasible_mask(c_new, fine_n, actions)
    if inverse_action(a) in actions:
        log_rev = log_pick + uniform_log_density(int(back.sum()))
    else:
        log_rev = -math.inf
    return Proposal(
        state=replace_channel(s, agent, c_new),
        log_fwd=log_pick + uniform_log_density(k),
        log_rev=log_rev,
        agent=agent,
        action=a,
    )


@dataclass
class UniformProposal:
    """Proposal generator wrapper around :func:`uniform_proposal`."""

    fine_n: int
    actions: tuple[ActionId, ...] = ALL_ACTIONS
    agent: int | None = None

    def propose(self, s: GlobalState, rng) -> Proposal:
        return uniform_proposal(s, rng, self.fine_n, self.agent, self.actions)

    def log_density(self, s: GlobalState, agent: int, action: ActionId) -> float:
        mask = feasible_mask(s[agent], self.fine_n, self.actions)
        if not mask[list(self.actions).index(action)]:
            return -math.inf
        log_pick = -math.log(len(s)) if self.agent is None else 0.0
        return log_pick + uniform_log_density(int(mask.sum()))


def enumerate_chain_posterior(level: PosteriorLevel, states: Sequence[GlobalState]) -> np.ndarray:
    """Normalized posterior over an explicit finite state list."""
    logs = np.array([level.log_density(s) for s in states])
    w = np.exp(logs - logs.max())
    return w / w.sum()


def one_channel_line(fine_n: int, y: int, w: int, d: int) -> list[GlobalState]:
    """Every horizontal position of a single channel: the 1D oracle lattice."""
    return [(ChannelRect(x, y, w, d),) for x in range(fine_n - w + 1)]
