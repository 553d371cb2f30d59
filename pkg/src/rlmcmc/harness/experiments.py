"""The three experiment definitions and their materialization into solvers.

Channel coordinates of the targets are reconstructions: only pictures of the
original fields exist, so the defaults below are plausible placements of the
same kind of channels, not measured values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..fem import Box, FineSolver, ProblemSpec, SourceSpec, WellObservation, misfit
from ..field import ChannelRect, GlobalState, PermeabilityField, Segment, rasterize, rasterize_diagonal_target
from ..gmsfem import OfflineCache, build_levels
from ..mcmc import PosteriorLevel, StateForward
from ..mesh import GridHierarchy, build_hierarchy
from .config import (
    ExperimentConfig,
    GridConfig,
    InitConfig,
    PosteriorConfig,
    RlConfig,
    TargetConfig,
)

# two injectors (+20) and two producers (-5)
EXP1_SOURCES = [
    [0.1, 0.2, 0.1, 0.2, 20.0],
    [0.8, 0.9, 0.1, 0.2, -5.0],
    [0.2, 0.3, 0.8, 0.9, 20.0],
    [0.75, 0.85, 0.55, 0.65, -5.0],
]
# one injector and three producers
EXP2_SOURCES = [
    [0.45, 0.55, 0.2, 0.3, -5.0],
    [0.45, 0.55, 0.7, 0.8, -5.0],
    [0.1, 0.2, 0.45, 0.55, 20.0],
    [0.8, 0.9, 0.45, 0.55, -5.0],
]

EXPERIMENTS = ("exp1", "exp2_onechannel", "exp3_diagonal")

# Rewards are raw misfit differences, typically 1e-3 on the coarse level, so the
# actor rate is scaled up until one update moves the logits by a few percent.
CHAIN_RL = dict(lr_actor=20.0, lr_critic=0.5, batch_size=16, n_random=200)
CHAIN_INIT = dict(max_size_frac=0.3)


def build_experiment(name: str) -> ExperimentConfig:
    if name == "exp1":
        return ExperimentConfig(
            name=name,
            target=TargetConfig(rects=[[0.15, 0.3, 0.5, 0.05], [0.6, 0.4, 0.05, 0.45]]),
            sources=[list(b) for b in EXP1_SOURCES],
            init=InitConfig(**CHAIN_INIT),
            rl=RlConfig(**CHAIN_RL),
        )
    if name == "exp2_onechannel":
        return ExperimentConfig(
            name=name,
            mode="pure_rl",
            method="rlmcmc",
            target=TargetConfig(rects=[[0.35, 0.3, 0.1, 0.4]]),
            sources=[list(b) for b in EXP2_SOURCES],
            # start inside the stretch where the misfit rises monotonically away from the target;
            # episodes about as long as the distance to it, so few trajectories overshoot
            init=InitConfig(kind="explicit", channels=[[0.6, 0.3, 0.1, 0.4]]),
            actions=["shift-left", "shift-right"],
            rl=RlConfig(gamma=0.9, lr_actor=5.0, lr_critic=0.1, batch_size=16, n_random=0, max_trajectory=10),
            max_steps=500,
        )
    if name == "exp3_diagonal":
        return ExperimentConfig(
            name=name,
            target=TargetConfig(
                segments=[[0.15, 0.25, 0.55, 0.65, 0.03], [0.55, 0.15, 0.85, 0.45, 0.03]]
            ),
            sources=[list(b) for b in EXP1_SOURCES],
            init=InitConfig(**CHAIN_INIT),
            rl=RlConfig(**CHAIN_RL),
        )
    raise ConfigurationError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")


def snap_channel(rect, fine_n: int) -> ChannelRect:
    x, y, w, d = (int(round(v * fine_n)) for v in rect)
    return ChannelRect(x, y, max(w, 1), max(d, 1))


@dataclass
class Problem:
    """Everything a run needs, built once from a config."""

    config: ExperimentConfig
    g: GridHierarchy
    spec: ProblemSpec
    target_field: PermeabilityField
    target_state: GlobalState | None
    F_obs: WellObservation
    sigma_f: float
    levels: list[PosteriorLevel]
    threshold: float
    cache: OfflineCache = field(repr=False)

    @property
    def trace_level(self) -> PosteriorLevel:
        return self.levels[-1]

    @property
    def reward_level(self) -> PosteriorLevel:
        return self.levels[0]


def problem_spec(cfg: ExperimentConfig) -> ProblemSpec:
    src = SourceSpec(tuple((Box(*b[:4]), b[4]) for b in cfg.sources))
    wells = None if cfg.wells is None else tuple(Box(*w) for w in cfg.wells)
    return ProblemSpec(T_final=cfg.time.T_final, nt=cfg.time.nt, source=src, wells=wells)


def target_field(cfg: ExperimentConfig, g: GridHierarchy):
    if cfg.target.rects:
        state = tuple(snap_channel(r, g.fine_n) for r in cfg.target.rects)
        return rasterize(state, g, cfg.target.contrast), state
    segs = [Segment(*s) for s in cfg.target.segments]
    return rasterize_diagonal_target(segs, g, cfg.target.contrast), None


def build_problem(cfg: ExperimentConfig) -> Problem:
    g = build_hierarchy(cfg.grid.fine_n, cfg.grid.coarse_n)
    spec = problem_spec(cfg)
    kappa, state = target_field(cfg, g)
    F_obs = FineSolver(g, spec)(kappa)
    sigma = cfg.posterior.sigma_f
    if sigma is None:
        sigma = cfg.posterior.sigma_f_rel * float(np.linalg.norm(F_obs.values))
    cache = OfflineCache(g)
    solvers = build_levels(g, spec, cfg.posterior.basis_counts, cache)
    levels = [
        PosteriorLevel(StateForward(s, g, cfg.target.contrast), sigma, F_obs, name=f"coarse-L{s.basis_per_neighborhood}")
        for s in solvers
    ]
    threshold = cfg.threshold
    if threshold is None:
        # the target's own misfit on the trace level; diagonal targets are not states
        own = misfit(F_obs, solvers[-1](kappa))
        threshold = cfg.threshold_factor * own
    return Problem(cfg, g, spec, kappa, state, F_obs, sigma, levels, threshold, cache)


def initial_state(cfg: ExperimentConfig, g: GridHierarchy, rng: np.random.Generator) -> GlobalState:
    n = g.fine_n
    if cfg.init.kind == "explicit":
        return tuple(snap_channel(c, n) for c in cfg.init.channels)
    top = max(1, int(cfg.init.max_size_frac * n))
    out = []
    for _ in range(cfg.n_agents):
        w = int(rng.integers(1, top + 1))
        d = int(rng.integers(1, top + 1))
        x = int(rng.integers(0, n - w + 1))
        y = int(rng.integers(0, n - d + 1))
        out.append(ChannelRect(x, y, w, d))
    return tuple(out)
