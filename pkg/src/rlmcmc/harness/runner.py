"""Method loops: plain multilevel MCMC, RL-proposed MCMC and its epsilon-greedy mix."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..errors import RlmcmcError
from ..field import apply_action, inverse_action, replace_channel
from ..mcmc import UniformProposal, mlmcmc_step, sample_categorical
from ..rl import (
    AgentBundle,
    AgentProposal,
    ChannelEnv,
    RlHyper,
    Transition,
    init_buffer,
    mixture_density,
    train_agent,
)
from .config import ExperimentConfig
from .experiments import Problem, build_problem, initial_state
from .trace import RunTrace, TraceRow, format_state

log = logging.getLogger(__name__)


class ProposalAuditError(AssertionError):
    pass


def _streams(seed: int):
    init_ss, chain_ss, train_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(chain_ss), np.random.default_rng(train_ss))


def _make_agents(cfg: ExperimentConfig, problem: Problem, template, rng):
    hyper = RlHyper(**vars(cfg.rl))
    agents = AgentBundle.create(problem.g.fine_n, cfg.n_agents, hyper, rng, cfg.action_ids)
    env = ChannelEnv(
        fine_n=problem.g.fine_n,
        template=template,
        reward_level=problem.reward_level,
        c1=hyper.c1,
        c2=hyper.c2,
        actions=cfg.action_ids,
        max_size=max(1, int(cfg.init.max_size_frac * problem.g.fine_n)),
    )
    init_buffer(agents, env, hyper.n_random, rng)
    return agents, env


def audit_proposal(agents: AgentBundle, s, prop, p_rl: float, tol: float = 1e-9) -> None:
    """Normalization of q_mix at both ends and agreement of the reported reverse density."""
    l = prop.agent
    for state in (s, prop.state):
        total = float(mixture_density(agents, state, l, p_rl).sum())
        if abs(total - 1.0) > tol:
            raise ProposalAuditError(f"proposal density sums to {total} at {format_state(state)}")
    fwd = mixture_density(agents, s, l, p_rl)[agents.action_index(prop.action)]
    if not math.isclose(math.log(fwd), prop.log_fwd, rel_tol=0.0, abs_tol=tol):
        raise ProposalAuditError(f"forward density {prop.log_fwd} != log {fwd}")
    j = agents.action_index(inverse_action(prop.action))
    rev = mixture_density(agents, prop.state, l, p_rl)[j]
    if not math.isclose(math.log(rev), prop.log_rev, rel_tol=0.0, abs_tol=tol):
        raise ProposalAuditError(f"reverse density {prop.log_rev} != log {rev}")


def run(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    problem: Problem | None = None,
    audit: bool = False,
) -> RunTrace:
    """Execute one configured run; deterministic given ``cfg.seed``."""
    problem = problem or build_problem(cfg)
    if cfg.mode == "pure_rl":
        trace = _run_pure_rl(cfg, problem)
    else:
        trace = _run_chain(cfg, problem, audit)
    if out_dir is not None:
        write_outputs(cfg, trace, out_dir)
    return trace


def _clock(cfg: ExperimentConfig, t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0 if cfg.timing == "wall" else 0.0


def _meta(cfg: ExperimentConfig, problem: Problem) -> dict:
    return {
        "experiment": cfg.name,
        "method": cfg.method,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "threshold": problem.threshold,
        "sigma_f": problem.sigma_f,
        "fine_n": problem.g.fine_n,
        "coarse_n": problem.g.coarse_n,
        "basis_counts": list(cfg.posterior.basis_counts),
    }


def _run_chain(cfg: ExperimentConfig, problem: Problem, audit: bool) -> RunTrace:
    rng_init, rng_chain, rng_train = _streams(cfg.seed)
    g = problem.g
    levels = problem.levels
    n_levels = len(levels)
    state = initial_state(cfg, g, rng_init)

    agents = env = None
    p_rl = 0.0
    if cfg.method != "mcmc":
        agents, env = _make_agents(cfg, problem, state, rng_train)
        p_rl = 1.0 if cfg.method == "rlmcmc" else cfg.rl.p_rl
    uniform = [UniformProposal(g.fine_n, cfg.action_ids, agent=l) for l in range(cfg.n_agents)]

    trace = RunTrace(meta=_meta(cfg, problem))
    t0 = time.perf_counter()
    trace.rows.append(TraceRow(0, 0, problem.trace_level.misfit(state), -1, _clock(cfg, t0), state))
    trace.rejections.append([0] * n_levels)

    accepted = proposals = stalls = audited = 0
    rejected = [0] * n_levels
    evaluations = [0] * n_levels
    retry_cap = cfg.rl.retry_cap
    done = accepted >= cfg.max_steps or cfg.max_proposals == 0
    try:
        while not done:
            for l in range(cfg.n_agents):
                q = uniform[l] if agents is None else AgentProposal(agents, l, p_rl)
                out = None
                for _ in range(retry_cap):
                    out = mlmcmc_step(state, q, levels, rng_chain)
                    proposals += 1
                    evaluations = [a + b for a, b in zip(evaluations, out.evaluations)]
                    if audit and agents is not None and out.proposal is not None:
                        audit_proposal(agents, state, out.proposal, p_rl)
                        audited += 1
                    if out.accepted:
                        break
                    rejected[out.level_reached] += 1
                    if proposals >= cfg.max_proposals:
                        break
                if out is not None and out.accepted:
                    prev, state = state, out.next
                    accepted += 1
                    if agents is not None:
                        r = env.reward(prev, state)
                        agents.buffer.append(Transition(prev, r, state, l))
                        info = train_agent(agents, l, rng_train)
                        probs = agents.action_probs(l, state[l])
                        trace.rl_updates.append(
                            {
                                "accepted_total": accepted,
                                "agent": l,
                                "reward": r,
                                "critic_loss": None if info is None else info["critic_loss"],
                                "actor_loss": None if info is None else info["actor_loss"],
                                "probs": " ".join(f"{p:.6f}" for p in probs),
                            }
                        )
                    m = problem.trace_level.misfit(state)
                    trace.rows.append(TraceRow(proposals, accepted, m, out.level_reached, _clock(cfg, t0), state))
                    trace.rejections.append(rejected)
                    rejected = [0] * n_levels
                    if (cfg.stop_at_threshold and m < problem.threshold) or accepted >= cfg.max_steps:
                        done = True
                else:
                    stalls += 1
                    log.debug("agent %d stalled after %d retries", l, retry_cap)
                if proposals >= cfg.max_proposals:
                    done = True
                if done:
                    break
    except RlmcmcError as exc:
        trace.meta["error"] = f"{type(exc).__name__}: {exc}"
        log.error("run aborted: %s", exc)
    trace.meta.update(
        {
            "accepted": accepted,
            "proposals": proposals,
            "stalls": stalls,
            "audited": audited,
            "level_evaluations": evaluations,
            "pending_rejections": rejected,
            "wall_s": (time.perf_counter() - t0),
        }
    )
    trace.agents = agents
    return trace


def _run_pure_rl(cfg: ExperimentConfig, problem: Problem) -> RunTrace:
    """Act from the policy and train, with no accept/reject at all."""
    rng_init, rng_chain, rng_train = _streams(cfg.seed)
    g = problem.g
    start = initial_state(cfg, g, rng_init)
    agents, env = _make_agents(cfg, problem, start, rng_train)
    left, right = (agents.action_index(a) for a in cfg.action_ids[:2])

    trace = RunTrace(meta=_meta(cfg, problem))
    t0 = time.perf_counter()
    trace.rows.append(TraceRow(0, 0, problem.trace_level.misfit(start), -1, _clock(cfg, t0), start))
    trace.rejections.append([])
    state, t_ep, n_updates = start, 0, 0
    for step in range(1, cfg.max_steps + 1):
        l = (step - 1) % cfg.n_agents
        idx = sample_categorical(agents.action_probs(l, state[l]), rng_chain)
        s_next = replace_channel(state, l, apply_action(state[l], agents.actions[idx], g.fine_n))
        r = env.reward(state, s_next)
        agents.buffer.append(Transition(state, r, s_next, l))
        info = train_agent(agents, l, rng_train)
        n_updates += info is not None
        p_start = agents.action_probs(l, start[l])
        p_now = agents.action_probs(l, s_next[l])
        trace.rl_updates.append(
            {
                "step": step,
                "updates": n_updates,
                "x": s_next[l].x,
                "reward": r,
                "p_left_start": float(p_start[left]),
                "p_right_start": float(p_start[right]),
                "p_left_current": float(p_now[left]),
                "p_right_current": float(p_now[right]),
                "critic_loss": None if info is None else info["critic_loss"],
                "actor_loss": None if info is None else info["actor_loss"],
            }
        )
        trace.rows.append(TraceRow(step, step, problem.trace_level.misfit(s_next), -1, _clock(cfg, t0), s_next))
        trace.rejections.append([])
        state, t_ep = s_next, t_ep + 1
        if t_ep >= cfg.rl.max_trajectory:
            state, t_ep = start, 0
    trace.meta.update({"updates": n_updates, "wall_s": time.perf_counter() - t0})
    trace.agents = agents
    return trace


def write_outputs(cfg: ExperimentConfig, trace: RunTrace, out_dir: str | Path) -> None:
    out = Path(out_dir)
    trace.write(out)
    cfg.save(out / "config.json")
    (out / "final_state.json").write_text(json.dumps([list(c) for c in trace.final.state]) + "\n")
    agents = getattr(trace, "agents", None)
    if agents is not None:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        for l in range(agents.n_agents):
            agents.policies[l].save(ck / f"policy_{l}.npz")
            agents.critics[l].save(ck / f"critic_{l}.npz")
            agents.targets[l].save(ck / f"target_{l}.npz")
        buf = [
            {"s": [list(c) for c in t.s], "r": t.r, "s_next": [list(c) for c in t.s_next], "agent": t.agent}
            for t in agents.buffer
        ]
        (ck / "buffer.json").write_text(json.dumps(buf) + "\n")


def _matrix_job(args) -> RunTrace:
    cfg, out = args
    trace = run(cfg, out_dir=out)
    trace.agents = None
    return trace


def run_matrix(
    base: ExperimentConfig,
    methods: Sequence[str],
    seeds: Sequence[int],
    out_root: str | Path | None = None,
    workers: int = 1,
) -> list[RunTrace]:
    """Every (method, seed) pair of one experiment, as independent single-threaded chains.

    With ``workers == 1`` the runs share one problem instance, whose solver
    caches only memoize pure functions of the state.
    """
    jobs = []
    for method in methods:
        for seed in seeds:
            cfg = base.replace(method=method, seed=int(seed))
            out = None if out_root is None else Path(out_root) / f"{method}_seed{seed}"
            jobs.append((cfg, out))
    if workers <= 1:
        problem = build_problem(base)
        traces = []
        for cfg, out in jobs:
            t = run(cfg, out_dir=out, problem=problem)
            t.agents = None
            traces.append(t)
        return traces
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_matrix_job, jobs))
