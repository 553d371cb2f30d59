"""Multi-agent actor-critic whose policies serve as Metropolis-Hastings proposals.

Each agent owns one channel. Its policy sees only that channel; its critic sees
the whole state with the agent's own channel first. Training is off-policy from
a FIFO replay buffer, with a slowly tracking target critic for the bootstrap.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError
from .field import (
    ALL_ACTIONS,
    ActionId,
    ChannelRect,
    GlobalState,
    apply_action,
    feasible_mask,
    find_action,
    inverse_action,
    replace_channel,
)
from .mcmc import PosteriorLevel, Proposal, sample_categorical, uniform_log_density, uniform_proposal
from .nn import Mlp, masked_log_softmax, mse_loss, policy_nll_loss, sgd_step


@dataclass(frozen=True)
class RlHyper:
    gamma: float = 0.9
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    batch_size: int = 32
    tau_target: float = 0.99
    c1: float = 1.0
    c2: float = 0.0
    p_rl: float = 0.7
    buffer_capacity: int = 10_000
    max_trajectory: int = 1_000
    hidden: int = 32
    n_random: int = 32
    retry_cap: int = 50
    critic_local: bool = False

    def __post_init__(self):
        checks = {
            "gamma": 0.0 <= self.gamma < 1.0,
            "lr_actor": self.lr_actor >= 0.0,
            "lr_critic": self.lr_critic >= 0.0,
            "batch_size": self.batch_size >= 1,
            "tau_target": 0.0 <= self.tau_target <= 1.0,
            "p_rl": 0.0 <= self.p_rl <= 1.0,
            "buffer_capacity": self.buffer_capacity >= 1,
            "max_trajectory": self.max_trajectory >= 1,
            "hidden": self.hidden >= 1,
            "n_random": self.n_random >= 0,
            "retry_cap": self.retry_cap >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ContractError(f"invalid RL hyperparameters: {', '.join(bad)}")


@dataclass(frozen=True)
class Transition:
    s: GlobalState
    r: float
    s_next: GlobalState
    agent: int

    def __post_init__(self):
        changed = [i for i, (a, b) in enumerate(zip(self.s, self.s_next)) if a != b]
        if len(self.s) != len(self.s_next) or len(changed) > 1:
            raise DataError(f"transition changes channels {changed}; at most one may move")


class ReplayBuffer:
    """FIFO store; the oldest transition is evicted at capacity."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def append(self, t: Transition) -> None:
        self._items.append(t)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def for_agent(self, agent: int) -> list[Transition]:
        return [t for t in self._items if t.agent == agent]

    def sample(self, agent: int, size: int, rng: np.random.Generator) -> list[Transition] | None:
        pool = self.for_agent(agent)
        if len(pool) < size:
            return None
        idx = rng.choice(len(pool), size=size, replace=False)
        return [pool[i] for i in idx]


def policy_input(c: ChannelRect, fine_n: int) -> np.ndarray:
    return np.asarray(c, dtype=float) / fine_n


def critic_input(s: GlobalState, l: int, fine_n: int, local: bool = False) -> np.ndarray:
    """Agent ``l``'s channel first, then the others in index order."""
    if local:
        return policy_input(s[l], fine_n)
    order = [l] + [i for i in range(len(s)) if i != l]
    return np.concatenate([policy_input(s[i], fine_n) for i in order])


@dataclass
class AgentBundle:
    fine_n: int
    n_agents: int
    hyper: RlHyper
    policies: list[Mlp]
    critics: list[Mlp]
    targets: list[Mlp]
    buffer: ReplayBuffer
    actions: tuple[ActionId, ...] = ALL_ACTIONS
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        fine_n: int,
        n_agents: int,
        hyper: RlHyper,
        rng: np.random.Generator,
        actions: Sequence[ActionId] = ALL_ACTIONS,
    ) -> "AgentBundle":
        actions = tuple(ActionId(a) for a in actions)
        critic_in = 4 if hyper.critic_local else 4 * n_agents
        policies = [Mlp.init((4, hyper.hidden, len(actions)), rng) for _ in range(n_agents)]
        critics = [Mlp.init((critic_in, hyper.hidden, 1), rng) for _ in range(n_agents)]
        targets = [c.copy() for c in critics]
        return cls(fine_n, n_agents, hyper, policies, critics, targets, ReplayBuffer(hyper.buffer_capacity), actions)

    def mask(self, c: ChannelRect) -> np.ndarray:
        return feasible_mask(c, self.fine_n, self.actions)

    def policy_logits(self, l: int, c: ChannelRect) -> np.ndarray:
        return self.policies[l].forward(policy_input(c, self.fine_n))[0][0]

    def action_probs(self, l: int, c: ChannelRect) -> np.ndarray:
        """Masked softmax, computed directly so a zero head gives exactly 1/k."""
        z = np.where(self.mask(c), self.policy_logits(l, c), -np.inf)
        e = np.exp(z - z.max())
        return e / e.sum()

    def action_log_probs(self, l: int, c: ChannelRect) -> np.ndarray:
        return masked_log_softmax(self.policy_logits(l, c), self.mask(c))[0]

    def action_index(self, a: ActionId) -> int | None:
        try:
            return self.actions.index(ActionId(a))
        except ValueError:
            return None

    def value(self, l: int, s: GlobalState, target: bool = False) -> float:
        net = self.targets[l] if target else self.critics[l]
        return float(net.forward(critic_input(s, l, self.fine_n, self.hyper.critic_local))[0][0, 0])


def reward(level: PosteriorLevel, s: GlobalState, s_next: GlobalState, c1: float, c2: float) -> float:
    """misfit(s) - c1 * misfit(s') + c2, both on the coarsest solver (memoized)."""
    return level.misfit(s) - c1 * level.misfit(s_next) + c2


def _policy_move(s: GlobalState, l: int, agents: AgentBundle, idx: int):
    a = agents.actions[idx]
    c_new = apply_action(s[l], a, agents.fine_n)
    return a, c_new


def _rev_index(agents: AgentBundle, a: ActionId) -> int | None:
    return agents.action_index(inverse_action(a))


def rl_proposal(s: GlobalState, l: int, agents: AgentBundle, rng: np.random.Generator) -> Proposal:
    """Sample a feasible action from agent ``l``'s masked policy.

    The reverse density is the policy's probability of the inverse action at
    the proposed channel, normalized over that channel's feasible set.
    """
    probs = agents.action_probs(l, s[l])
    idx = sample_categorical(probs, rng)
    a, c_new = _policy_move(s, l, agents, idx)
    log_fwd = float(agents.action_log_probs(l, s[l])[idx])
    j = _rev_index(agents, a)
    log_rev = -math.inf if j is None else float(agents.action_log_probs(l, c_new)[j])
    return Proposal(replace_channel(s, l, c_new), log_fwd, log_rev, agent=l, action=a)


def _mixture(p_rl: float, lp_policy: float, lp_uniform: float) -> float:
    q = p_rl * math.exp(lp_policy) + (1.0 - p_rl) * math.exp(lp_uniform)
    return math.log(q) if q > 0 else -math.inf


def mixed_proposal(s: GlobalState, l: int, agents: AgentBundle, p_rl: float, rng: np.random.Generator) -> Proposal:
    """Policy with probability ``p_rl``, uniform walk otherwise.

    Both reported densities are those of the mixture, whichever branch fired.
    The degenerate mixtures draw no branch variate and return the pure densities.
    """
    if not 0.0 <= p_rl <= 1.0:
        raise ContractError(f"p_rl must lie in [0, 1], got {p_rl}")
    if p_rl == 1.0:
        return rl_proposal(s, l, agents, rng)
    if p_rl == 0.0:
        return uniform_proposal(s, rng, agents.fine_n, agent=l, actions=agents.actions)
    use_rl = rng.random() < p_rl
    prop = rl_proposal(s, l, agents, rng) if use_rl else uniform_proposal(s, rng, agents.fine_n, agent=l, actions=agents.actions)
    a = prop.action
    c, c_new = s[l], prop.state[l]
    i = agents.action_index(a)
    mask_fwd = agents.mask(c)
    lp_pol_fwd = float(agents.action_log_probs(l, c)[i])
    lp_uni_fwd = uniform_log_density(int(mask_fwd.sum()))
    log_fwd = _mixture(p_rl, lp_pol_fwd, lp_uni_fwd)
    j = _rev_index(agents, a)
    if j is None:
        log_rev = -math.inf
    else:
        mask_rev = agents.mask(c_new)
        lp_pol_rev = float(agents.action_log_probs(l, c_new)[j])
        lp_uni_rev = uniform_log_density(int(mask_rev.sum()))
        log_rev = _mixture(p_rl, lp_pol_rev, lp_uni_rev)
    return Proposal(prop.state, log_fwd, log_rev, agent=l, action=a)


@dataclass
class AgentProposal:
    """Proposal generator bound to one agent; plugs into ``mlmcmc_step``."""

    agents: AgentBundle
    agent: int
    p_rl: float = 1.0

    def propose(self, s: GlobalState, rng) -> Proposal:
        return mixed_proposal(s, self.agent, self.agents, self.p_rl, rng)


def mixture_density(agents: AgentBundle, s: GlobalState, l: int, p_rl: float) -> np.ndarray:
    """q_mix over ``agents.actions`` at ``s`` for mover ``l`` (zeros where masked)."""
    mask = agents.mask(s[l])
    pol = np.exp(agents.action_log_probs(l, s[l]))
    uni = mask / mask.sum()
    return p_rl * pol + (1.0 - p_rl) * uni


def _batch_arrays(agents: AgentBundle, l: int, batch: Sequence[Transition]):
    local = agents.hyper.critic_local
    X = np.stack([critic_input(t.s, l, agents.fine_n, local) for t in batch])
    Xn = np.stack([critic_input(t.s_next, l, agents.fine_n, local) for t in batch])
    r = np.array([t.r for t in batch], dtype=float)
    return X, Xn, r


def critic_update(agents: AgentBundle, l: int, batch: Sequence[Transition]) -> float:
    """One SGD step on the squared TD error against the target critic."""
    S = agents.hyper.batch_size
    if len(batch) < S:
        raise ContractError(f"batch of {len(batch)} transitions, need {S}")
    X, Xn, r = _batch_arrays(agents, l, batch)
    targets = r + agents.hyper.gamma * agents.targets[l].forward(Xn)[0][:, 0]
    net = agents.critics[l]
    out, tape = net.forward(X)
    loss, dout = mse_loss(targets)(out)
    sgd_step(net, net.backward(tape, dout), agents.hyper.lr_critic)
    return loss


def _transition_action(agents: AgentBundle, l: int, t: Transition) -> int:
    a = find_action(t.s[l], t.s_next[l])
    idx = None if a is None else agents.action_index(a)
    if idx is None:
        raise DataError(f"cannot recover agent {l}'s action from {tuple(t.s[l])} -> {tuple(t.s_next[l])}")
    return idx


def advantages(agents: AgentBundle, l: int, batch: Sequence[Transition]) -> np.ndarray:
    X, Xn, r = _batch_arrays(agents, l, batch)
    critic = agents.critics[l]
    return r + agents.hyper.gamma * critic.forward(Xn)[0][:, 0] - critic.forward(X)[0][:, 0]


def actor_update(agents: AgentBundle, l: int, batch: Sequence[Transition]) -> float:
    """One SGD step on mean(-A * log pi(a | s_l)), advantage held constant."""
    S = agents.hyper.batch_size
    if len(batch) < S:
        raise ContractError(f"batch of {len(batch)} transitions, need {S}")
    acts = np.array([_transition_action(agents, l, t) for t in batch])
    A = advantages(agents, l, batch)
    X = np.stack([policy_input(t.s[l], agents.fine_n) for t in batch])
    masks = np.stack([agents.mask(t.s[l]) for t in batch])
    net = agents.policies[l]
    out, tape = net.forward(X)
    loss, dout = policy_nll_loss(acts, masks, A)(out)
    sgd_step(net, net.backward(tape, dout), agents.hyper.lr_actor)
    return loss


def soft_update(agents: AgentBundle, l: int, tau_target: float) -> None:
    """target <- tau * target + (1 - tau) * critic, elementwise."""
    if not 0.0 <= tau_target <= 1.0:
        raise ContractError(f"tau_target must lie in [0, 1], got {tau_target}")
    for pt, pc in zip(agents.targets[l].params(), agents.critics[l].params()):
        pt *= tau_target
        pt += (1.0 - tau_target) * pc


def train_agent(agents: AgentBundle, l: int, rng: np.random.Generator) -> dict | None:
    """Critic, actor and target updates for agent ``l`` from one sampled batch."""
    batch = agents.buffer.sample(l, agents.hyper.batch_size, rng)
    if batch is None:
        return None
    closs = critic_update(agents, l, batch)
    aloss = actor_update(agents, l, batch)
    soft_update(agents, l, agents.hyper.tau_target)
    return {"agent": l, "critic_loss": closs, "actor_loss": aloss}


@dataclass
class ChannelEnv:
    """What buffer initialization needs: the lattice, a state template and the reward.

    Random states randomize only the channel parameters that the action set
    can change; the rest come from ``template``.
    """

    fine_n: int
    template: GlobalState
    reward_level: PosteriorLevel
    c1: float = 1.0
    c2: float = 0.0
    actions: tuple[ActionId, ...] = ALL_ACTIONS
    max_size: int | None = None

    def random_channel(self, base: ChannelRect, rng: np.random.Generator) -> ChannelRect:
        n = self.fine_n
        top = self.max_size or max(1, n // 2)
        acts = set(self.actions)
        w = int(rng.integers(1, top + 1)) if acts & {ActionId.SQUEEZE_H, ActionId.STRETCH_H} else base.w
        d = int(rng.integers(1, top + 1)) if acts & {ActionId.SQUEEZE_V, ActionId.STRETCH_V} else base.d
        x = int(rng.integers(0, n - w + 1)) if acts & {ActionId.SHIFT_LEFT, ActionId.SHIFT_RIGHT} else base.x
        y = int(rng.integers(0, n - d + 1)) if acts & {ActionId.SHIFT_DOWN, ActionId.SHIFT_UP} else base.y
        return ChannelRect(x, y, w, d)

    def random_state(self, rng: np.random.Generator) -> GlobalState:
        return tuple(self.random_channel(c, rng) for c in self.template)

    def reward(self, s: GlobalState, s_next: GlobalState) -> float:
        return reward(self.reward_level, s, s_next, self.c1, self.c2)


def init_buffer(agents: AgentBundle, env: ChannelEnv, n_random: int, rng: np.random.Generator) -> None:
    """Seed the buffer with random one-move transitions rewarded by the coarsest solver."""
    for _ in range(n_random):
        s = env.random_state(rng)
        l = int(rng.integers(agents.n_agents))
        mask = agents.mask(s[l])
        if not mask.any():
            continue
        idx = int(rng.choice(np.flatnonzero(mask)))
        c_new = apply_action(s[l], agents.actions[idx], agents.fine_n)
        s_next = replace_channel(s, l, c_new)
        agents.buffer.append(Transition(s, env.reward(s, s_next), s_next, l))
