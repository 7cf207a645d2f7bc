"""Deterministic policy gradient machinery: replay buffer, target networks,
exploration noise, and the two network updates.

The actor maps the 10-dim observation to one bounded voltage through a tanh
output; the critic scores (observation, action) pairs with a linear head.
Updates follow the standard recipe: the critic regresses one-step bootstrapped
targets from the target networks, the actor ascends the critic's action-value
through the chain rule, and both targets trail their online networks through
geometric blending."""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import neural_net as nn

OBS_DIM = 10

AGENT_META_HEADER = "ddpg v1"
WEIGHT_FILES = ("actor.mlp", "critic.mlp", "target_actor.mlp", "target_critic.mlp")


class EmptyBatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Ring buffer over preallocated arrays; oldest entries evicted first."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.s = np.empty((capacity, obs_dim))
        self.a = np.empty(capacity)
        self.r = np.empty(capacity)
        self.s_next = np.empty((capacity, obs_dim))
        self.done = np.empty(capacity, dtype=bool)
        self.count = 0  # total insertions, monotone

    def __len__(self):
        return min(self.count, self.capacity)

    def push(self, s, a, r, s_next, done):
        i = self.count % self.capacity
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.done[i] = done
        self.count += 1

    def push_transition(self, t: Transition):
        self.push(t.s, t.a, t.r, t.s_next, t.done)


def sample_batch(buffer: ReplayBuffer, M: int, rng: np.random.Generator):
    """Uniform sample with replacement; deterministic given the generator state."""
    n = len(buffer)
    if M < 1:
        raise EmptyBatch(f"batch size must be >= 1, got {M}")
    if n < M:
        raise InsufficientData(f"buffer holds {n} transitions, need {M}")
    idx = rng.integers(0, n, size=M)
    return (buffer.s[idx], buffer.a[idx], buffer.r[idx],
            buffer.s_next[idx], buffer.done[idx])


@dataclass
class NoiseProcess:
    """Gaussian exploration noise with per-episode geometric decay."""

    sigma0: float
    decay: float = 0.995
    sigma_min: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma0 >= self.sigma_min >= 0.0):
            raise ValueError(f"need sigma0 >= sigma_min >= 0, got {self.sigma0}, {self.sigma_min}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        self.sigma = self.sigma0
        self.rng = np.random.default_rng(self.seed)

    def sample(self) -> float:
        return float(self.rng.normal(0.0, self.sigma)) if self.sigma > 0 else 0.0

    def decay_episode(self):
        self.sigma = max(self.sigma * self.decay, self.sigma_min)


class DdpgAgent:
    """Actor/critic pair with target copies and per-network Adam state."""

    def __init__(self, actor: nn.Mlp, critic: nn.Mlp, gamma: float, tau: float,
                 noise: NoiseProcess, action_bound: float,
                 actor_lr: float = 1e-4, critic_lr: float = 1e-3):
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {gamma}")
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {tau}")
        if critic.n_inputs != actor.n_inputs + actor.n_outputs:
            raise nn.DimensionMismatch("critic must take observation plus action")
        self.actor = actor
        self.critic = critic
        self.target_actor = actor.copy()
        self.target_critic = critic.copy()
        self.gamma = gamma
        self.tau = tau
        self.noise = noise
        self.action_bound = action_bound
        self.actor_opt = nn.AdamState.for_net(actor, actor_lr)
        self.critic_opt = nn.AdamState.for_net(critic, critic_lr)
        self.episode = 0

    @property
    def obs_dim(self):
        return self.actor.n_inputs


def make_agent(action_bound: float, obs_dim: int = OBS_DIM, hidden: int = 128,
               gamma: float = 0.99, tau: float = 0.005, actor_lr: float = 1e-4,
               critic_lr: float = 1e-3, noise: NoiseProcess | None = None,
               seed: int = 0, actor: nn.Mlp | None = None) -> DdpgAgent:
    """Fresh agent; pass ``actor`` to start from transplanted surrogate weights."""
    if actor is None:
        actor = nn.init_mlp((obs_dim, hidden, 1), ("relu", "tanh"),
                            output_scale=action_bound, seed=seed)
    critic = nn.init_mlp((obs_dim + 1, hidden, 1), ("relu", "linear"),
                         output_scale=1.0, seed=seed + 1)
    if noise is None:
        noise = NoiseProcess(sigma0=1.0, seed=seed + 2)
    return DdpgAgent(actor=actor, critic=critic, gamma=gamma, tau=tau,
                     noise=noise, action_bound=action_bound,
                     actor_lr=actor_lr, critic_lr=critic_lr)


def act(agent: DdpgAgent, s) -> float:
    """Deterministic policy output; bounded by the actor's output scale."""
    return float(nn.predict(agent.actor, np.asarray(s, dtype=float))[0])


def act_with_noise(agent: DdpgAgent, s) -> float:
    a = act(agent, s) + agent.noise.sample()
    return float(np.clip(a, -agent.action_bound, agent.action_bound))


def critic_update(agent: DdpgAgent, batch) -> float:
    """One Adam step on the bootstrapped value regression; returns the
    pre-step mean squared error."""
    s, a, r, s_next, done = batch
    M = len(s)
    if M < 1:
        raise EmptyBatch("empty batch")
    a_next = nn.predict(agent.target_actor, s_next)
    q_next = nn.predict(agent.target_critic, np.column_stack([s_next, a_next]))
    y = r + agent.gamma * (1.0 - done.astype(float)) * q_next.ravel()
    q, cache = nn.forward(agent.critic, np.column_stack([s, a]))
    err = q.ravel() - y
    loss = float(np.mean(err**2))
    upstream = (2.0 * err / M)[:, None]
    nn.adam_step(agent.critic, nn.backward(agent.critic, cache, upstream),
                 agent.critic_opt)
    return loss


def actor_update(agent: DdpgAgent, batch) -> float:
    """Ascend mean Q(s, actor(s)) with the critic frozen; returns that mean."""
    s = batch[0]
    M = len(s)
    if M < 1:
        raise EmptyBatch("empty batch")
    a, cache_a = nn.forward(agent.actor, s)
    q, cache_c = nn.forward(agent.critic, np.column_stack([s, a]))
    mean_q = float(np.mean(q))
    dq = nn.backward(agent.critic, cache_c, np.full((M, 1), 1.0 / M))
    dq_da = dq.input_gradient[:, agent.obs_dim:]
    grads = nn.backward(agent.actor, cache_a, -dq_da)  # minus: Adam minimizes
    nn.adam_step(agent.actor, grads, agent.actor_opt)
    return mean_q


def soft_update(agent: DdpgAgent, tau: float | None = None):
    """theta' <- tau theta + (1 - tau) theta' for both target networks."""
    t = agent.tau if tau is None else tau
    if not 0.0 < t <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {t}")
    for online, target in ((agent.actor, agent.target_actor),
                           (agent.critic, agent.target_critic)):
        for lo, lt in zip(online.layers, target.layers):
            lt.W *= 1.0 - t
            lt.W += t * lo.W
            lt.b *= 1.0 - t
            lt.b += t * lo.b


def save_agent(agent: DdpgAgent, directory):
    """Four weight files plus a metadata file carrying the scalar state."""
    os.makedirs(directory, exist_ok=True)
    for name, net in zip(WEIGHT_FILES, (agent.actor, agent.critic,
                                        agent.target_actor, agent.target_critic)):
        nn.save_mlp(net, os.path.join(directory, name))
    meta = {
        "gamma": agent.gamma,
        "tau": agent.tau,
        "action_bound": agent.action_bound,
        "actor_lr": agent.actor_opt.lr,
        "critic_lr": agent.critic_opt.lr,
        "episode": agent.episode,
        "noise_sigma": agent.noise.sigma,
        "noise_sigma0": agent.noise.sigma0,
        "noise_decay": agent.noise.decay,
        "noise_sigma_min": agent.noise.sigma_min,
        "noise_seed": agent.noise.seed,
        "noise_rng_state": json.dumps(agent.noise.rng.bit_generator.state),
    }
    with open(os.path.join(directory, "agent.meta"), "w") as fh:
        fh.write(AGENT_META_HEADER + "\n")
        for key, value in meta.items():
            fh.write(f"{key} = {value}\n")


def load_agent(directory) -> DdpgAgent:
    meta_path = os.path.join(directory, "agent.meta")
    with open(meta_path) as fh:
        if fh.readline().strip() != AGENT_META_HEADER:
            raise ValueError(f"{meta_path}: not a {AGENT_META_HEADER} checkpoint")
        meta = {}
        for line in fh:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    nets = [nn.load_mlp(os.path.join(directory, name)) for name in WEIGHT_FILES]
    noise = NoiseProcess(sigma0=float(meta["noise_sigma0"]),
                         decay=float(meta["noise_decay"]),
                         sigma_min=float(meta["noise_sigma_min"]),
                         seed=int(meta["noise_seed"]))
    noise.sigma = float(meta["noise_sigma"])
    noise.rng.bit_generator.state = json.loads(meta["noise_rng_state"])
    agent = DdpgAgent(actor=nets[0], critic=nets[1], gamma=float(meta["gamma"]),
                      tau=float(meta["tau"]), noise=noise,
                      action_bound=float(meta["action_bound"]),
                      actor_lr=float(meta["actor_lr"]),
                      critic_lr=float(meta["critic_lr"]))
    agent.target_actor = nets[2]
    agent.target_critic = nets[3]
    agent.episode = int(meta["episode"])
    return agent
