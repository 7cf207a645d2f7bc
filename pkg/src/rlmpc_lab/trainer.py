"""Episode loop for the two residual-control training modes.

``warm_start_rl`` transplants the trained surrogate into the actor and lets
the policy own the full input; ``rl_plus_mpc`` keeps the surrogate as a base
controller and trains a small bounded correction on top. Episodes run on the
(possibly perturbed) nonlinear plant against randomized sine references.
Nested angular zones guard training: leaving the soft zone ends the episode
with a large penalty, the hard zone marks states that would endanger
hardware, and new episodes only start after the surrogate has parked the
plant back inside the reset range with a zero reference."""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import ddpg
from .ddpg import DdpgAgent, NoiseProcess, ReplayBuffer, sample_batch
from .nnmpc import NnmpcController, nnmpc_act, observation
from .plant import PendulumParams, plant_step, validate_state
from .reference import RefTrajectory, downsample, random_reference

logger = logging.getLogger(__name__)

TOTAL_VOLTAGE_LIMIT = 15.0

HORIZON = "horizon"
SOFT_VIOLATION = "soft_violation"
HARD_VIOLATION = "hard_violation"

IN_RESET_RANGE = "in_reset_range"
NOMINAL = "nominal"
SOFT_VIOLATED = "soft_violated"
HARD_VIOLATED = "hard_violated"


class ResetTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class RlmpcMode:
    variant: str                  # warm_start_rl | rl_plus_mpc
    actor_bound: float            # V
    base_controller_bound: float  # V

    def __post_init__(self):
        if self.variant not in ("warm_start_rl", "rl_plus_mpc"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.actor_bound + self.base_controller_bound > TOTAL_VOLTAGE_LIMIT:
            raise ValueError("combined bounds exceed the 15 V physical limit")


def warm_start_mode() -> RlmpcMode:
    """Actor carries the whole input. The transplanted surrogate saturates at
    12 V, so the effective actor bound is 12 V rather than the 15 V the
    physical limit would allow; rescaling a tanh output is not a linear
    weight operation."""
    return RlmpcMode(variant="warm_start_rl", actor_bound=12.0,
                     base_controller_bound=0.0)


def rl_plus_mpc_mode() -> RlmpcMode:
    """Surrogate base (12 V) plus a small trained correction (3 V)."""
    return RlmpcMode(variant="rl_plus_mpc", actor_bound=3.0,
                     base_controller_bound=12.0)


@dataclass(frozen=True)
class ConstraintZones:
    alpha1: float   # pendulum reset bound (rad)
    alpha2: float   # pendulum soft bound
    alpha3: float   # pendulum hard bound
    beta1: float    # arm reset bound
    beta2: float    # arm soft bound
    beta3: float    # arm hard bound
    penalty: float  # magnitude of the terminal negative reward

    def __post_init__(self):
        if not (0 < self.alpha1 < self.alpha2 < self.alpha3):
            raise ValueError("need 0 < alpha1 < alpha2 < alpha3")
        if not (0 < self.beta1 < self.beta2 < self.beta3):
            raise ValueError("need 0 < beta1 < beta2 < beta3")
        if not self.penalty > 0:
            raise ValueError("penalty must be positive")

    def check_penalty_dominance(self, c1_max: float):
        """The penalty must dwarf any per-step reward magnitude at the soft
        boundary over the admissible reference range."""
        worst = abs(-5.0 * (self.alpha2 + abs(c1_max)) ** 2 - 5.0 * self.beta2**2)
        if not self.penalty > worst:
            raise ValueError(
                f"penalty {self.penalty} does not dominate the soft-boundary "
                f"reward magnitude {worst:.2f} for |c1| <= {c1_max}")


def default_zones() -> ConstraintZones:
    return ConstraintZones(alpha1=0.1, alpha2=0.4, alpha3=0.5,
                           beta1=0.2, beta2=1.5, beta3=2.0, penalty=1000.0)


def reward(x, c1: float, u: float) -> float:
    """Tracking-plus-effort reward; zero at perfect tracking, negative otherwise."""
    return -5.0 * (x[0] - c1) ** 2 - 5.0 * x[1] ** 2 - 0.5 * u * u


def classify_state(zones: ConstraintZones, x) -> str:
    ax1, ax2 = abs(x[0]), abs(x[1])
    if ax2 >= zones.alpha3 or ax1 >= zones.beta3:
        return HARD_VIOLATED
    if ax2 >= zones.alpha2 or ax1 >= zones.beta2:
        return SOFT_VIOLATED
    if ax2 < zones.alpha1 and ax1 < zones.beta1:
        return IN_RESET_RANGE
    return NOMINAL


def compose_action(mode: RlmpcMode, nnmpc_ctrl: NnmpcController | None,
                   agent: DdpgAgent, x, cp, exploring: bool):
    """Total plant voltage and the policy's own contribution.

    The stored transition action is the policy contribution only; in the
    residual mode the surrogate base is part of the environment as far as the
    learner is concerned."""
    s = observation(x, cp)
    if mode.variant == "warm_start_rl":
        a_rl = ddpg.act_with_noise(agent, s) if exploring else ddpg.act(agent, s)
        a_rl = float(np.clip(a_rl, -mode.actor_bound, mode.actor_bound))
        return a_rl, a_rl
    base = nnmpc_act(nnmpc_ctrl, x, cp)
    base = float(np.clip(base, -mode.base_controller_bound, mode.base_controller_bound))
    a_rl = ddpg.act_with_noise(agent, s) if exploring else ddpg.act(agent, s)
    a_rl = float(np.clip(a_rl, -mode.actor_bound, mode.actor_bound))
    return base + a_rl, a_rl


def warm_start_agent(nnmpc_ctrl: NnmpcController, gamma: float = 0.99,
                     tau: float = 0.005, actor_lr: float = 1e-4,
                     critic_lr: float = 1e-3, noise: NoiseProcess | None = None,
                     seed: int = 0) -> DdpgAgent:
    """Agent whose actor starts as an exact copy of the trained surrogate."""
    return ddpg.make_agent(action_bound=nnmpc_ctrl.net.output_scale,
                           actor=nnmpc_ctrl.net.copy(), gamma=gamma, tau=tau,
                           actor_lr=actor_lr, critic_lr=critic_lr,
                           noise=noise, seed=seed)


@dataclass
class EpisodeResult:
    cumulative_reward: float
    steps: int
    terminated_by: str
    final_state: np.ndarray
    max_abs_u: float
    log: list | None = None


@dataclass
class TrainerConfig:
    episodes: int = 300
    steps_per_episode: int = 700          # 7 s at the 0.01 s control period
    Ts: float = 0.01
    CTs: float = 0.1
    N: int = 50
    zones: ConstraintZones = field(default_factory=default_zones)
    warmup: int = 1000                    # stored transitions before updates start
    batch_size: int = 64
    buffer_capacity: int = 1_000_000
    amplitude_range: tuple = (0.5, 1.2)
    frequency_range: tuple = (0.5, 2.0)
    reset_timeout: float = 10.0           # s
    reset_dwell: float = 0.5              # s inside the reset range before release
    checkpoint_every: int = 25
    pretrain_episodes: int = 30

    def __post_init__(self):
        self.zones.check_penalty_dominance(max(abs(a) for a in self.amplitude_range))


def run_episode(params: PendulumParams, mode: RlmpcMode,
                nnmpc_ctrl: NnmpcController | None, agent: DdpgAgent,
                buffer: ReplayBuffer | None, zones: ConstraintZones,
                traj: RefTrajectory, T: int, Ts: float, x0,
                cfg: TrainerConfig | None = None, update: bool = True,
                update_actor: bool = True, exploring: bool = True,
                batch_rng: np.random.Generator | None = None,
                keep_log: bool = False) -> EpisodeResult:
    """One training episode on the given plant.

    Per step: build the crucial points, compose the action, advance the plant
    one control period, reward the new state against the reference at its
    time, and classify it. Soft violations replace the reward with the
    penalty and terminate; hard violations do the same but are flagged
    separately. Updates run once per step after the warm-up."""
    cfg = cfg or TrainerConfig()
    x = validate_state(x0)
    total = 0.0
    log = [] if keep_log else None
    max_abs_u = 0.0
    terminated_by = HORIZON
    steps = 0
    cp = downsample(traj, 0, Ts, cfg.CTs, cfg.N)
    for k in range(T):
        s = observation(x, cp)
        u_total, a_rl = compose_action(mode, nnmpc_ctrl, agent, x, cp, exploring)
        assert abs(u_total) <= TOTAL_VOLTAGE_LIMIT + 1e-9, \
            f"voltage safety violated: {u_total}"
        max_abs_u = max(max_abs_u, abs(u_total))
        x_next = plant_step(params, x, u_total, Ts)
        cp_next = downsample(traj, k + 1, Ts, cfg.CTs, cfg.N)
        s_next = observation(x_next, cp_next)
        state_class = classify_state(zones, x_next)
        if state_class in (SOFT_VIOLATED, HARD_VIOLATED):
            r = -zones.penalty
            done = True
            terminated_by = (SOFT_VIOLATION if state_class == SOFT_VIOLATED
                             else HARD_VIOLATION)
        else:
            r = reward(x_next, cp_next.c[0], u_total)
            done = k == T - 1
        if buffer is not None:
            buffer.push(s, a_rl, r, s_next, done)
        total += r
        steps = k + 1
        if keep_log:
            log.append((k * Ts, x.copy(), u_total, cp.c[0]))
        x = x_next
        cp = cp_next
        if update and buffer is not None and buffer.count >= cfg.warmup:
            batch = sample_batch(buffer, cfg.batch_size, batch_rng)
            ddpg.critic_update(agent, batch)
            if update_actor:
                ddpg.actor_update(agent, batch)
            ddpg.soft_update(agent)
        if done and terminated_by != HORIZON:
            break
    return EpisodeResult(cumulative_reward=total, steps=steps,
                         terminated_by=terminated_by, final_state=x,
                         max_abs_u=max_abs_u, log=log)


def reset_to_range(params: PendulumParams, nnmpc_ctrl: NnmpcController,
                   zones: ConstraintZones, x, timeout: float, Ts: float = 0.01,
                   CTs: float = 0.1, N: int = 50, dwell: float = 0.5) -> np.ndarray:
    """Drive the plant into the reset range with the surrogate and a zero
    reference, requiring it to stay there for the dwell time."""
    x = validate_state(x)
    if classify_state(zones, x) == HARD_VIOLATED:
        raise ValueError("cannot reset from a hard-violated state")
    zero = RefTrajectory("sine", 0.0, 1.0)
    cp = downsample(zero, 0, Ts, CTs, N)
    need = max(1, int(round(dwell / Ts)))
    inside = 0
    for _ in range(int(round(timeout / Ts))):
        u = nnmpc_act(nnmpc_ctrl, x, cp)
        x = plant_step(params, x, u, Ts)
        if classify_state(zones, x) == IN_RESET_RANGE:
            inside += 1
            if inside >= need:
                return x
        else:
            inside = 0
    raise ResetTimeout(f"state {x} not settled within {timeout} s")


def pretrain_critic(mode: RlmpcMode, nnmpc_ctrl: NnmpcController | None,
                    agent: DdpgAgent, nominal_params: PendulumParams,
                    episodes: int, cfg: TrainerConfig | None = None,
                    seed: int = 0) -> DdpgAgent:
    """Warm the critic on the nominal plant with the actor frozen at its
    initialization; exploration still runs so the value function sees varied
    actions."""
    cfg = cfg or TrainerConfig()
    buffer = ReplayBuffer(cfg.buffer_capacity)
    seq = np.random.SeedSequence(seed)
    ref_rng, batch_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    for _ in range(episodes):
        traj = random_reference(ref_rng, cfg.amplitude_range, cfg.frequency_range)
        run_episode(nominal_params, mode, nnmpc_ctrl, agent, buffer, cfg.zones,
                    traj, cfg.steps_per_episode, cfg.Ts, np.zeros(4), cfg=cfg,
                    update=True, update_actor=False, batch_rng=batch_rng)
        agent.noise.decay_episode()
    return agent


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    cumulative_reward: float
    terminated_by: str
    sigma: float
    reset_used: bool = False


@dataclass
class TrainingRun:
    agent: DdpgAgent
    records: list
    max_abs_u: float
    soft_violations: int
    hard_violations: int
    resets: int
    resets_timed_out: int = 0


def train(mode: RlmpcMode, nnmpc_ctrl: NnmpcController | None, agent: DdpgAgent,
          plant_params: PendulumParams, cfg: TrainerConfig | None = None,
          seed: int = 0, out_dir=None, start_episode: int = 0,
          buffer: ReplayBuffer | None = None,
          ref_rng: np.random.Generator | None = None,
          batch_rng: np.random.Generator | None = None) -> TrainingRun:
    """Full training loop on the (typically perturbed) plant.

    Every episode tracks a freshly randomized sine reference and starts from
    inside the reset range, which the surrogate restores between episodes.
    Hard violations cannot be recovered by the surrogate, so simulation
    teleports back to the upright origin; these events are counted separately.
    Deterministic given the seed and an identical starting agent."""
    cfg = cfg or TrainerConfig()
    buffer = buffer or ReplayBuffer(cfg.buffer_capacity)
    if ref_rng is None or batch_rng is None:
        seq = np.random.SeedSequence(seed)
        ref_rng, batch_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    records = []
    max_abs_u = 0.0
    soft = hard = resets = timed_out = 0
    x = np.zeros(4)
    for episode in range(start_episode, cfg.episodes):
        traj = random_reference(ref_rng, cfg.amplitude_range, cfg.frequency_range)
        reset_used = False
        if classify_state(cfg.zones, x) == HARD_VIOLATED:
            x = np.zeros(4)  # simulation stand-in for a manual recovery
        elif classify_state(cfg.zones, x) != IN_RESET_RANGE:
            reset_used = True
            resets += 1
            try:
                x = reset_to_range(plant_params, nnmpc_ctrl, cfg.zones, x,
                                   cfg.reset_timeout, cfg.Ts, cfg.CTs, cfg.N,
                                   cfg.reset_dwell)
            except ResetTimeout:
                # the surrogate cannot settle this plant; in simulation fall
                # back to re-initialization (hardware would stop the run)
                timed_out += 1
                logger.warning("reset timed out before episode %d; reinitializing",
                               episode + 1)
                x = np.zeros(4)
        result = run_episode(plant_params, mode, nnmpc_ctrl, agent, buffer,
                             cfg.zones, traj, cfg.steps_per_episode, cfg.Ts, x,
                             cfg=cfg, update=True, batch_rng=batch_rng)
        x = result.final_state
        max_abs_u = max(max_abs_u, result.max_abs_u)
        soft += result.terminated_by == SOFT_VIOLATION
        hard += result.terminated_by == HARD_VIOLATION
        agent.noise.decay_episode()
        agent.episode = episode + 1
        records.append(EpisodeRecord(episode=episode + 1, steps=result.steps,
                                     cumulative_reward=result.cumulative_reward,
                                     terminated_by=result.terminated_by,
                                     sigma=agent.noise.sigma,
                                     reset_used=reset_used))
        if out_dir and (episode + 1) % cfg.checkpoint_every == 0:
            _checkpoint(out_dir, agent, buffer, records, batch_rng, ref_rng)
    if out_dir:
        _checkpoint(out_dir, agent, buffer, records, batch_rng, ref_rng)
        write_reward_log(os.path.join(out_dir, "reward_log.csv"), records)
    logger.info("training done: %d episodes, %d soft, %d hard, max|u| %.2f V",
                len(records), soft, hard, max_abs_u)
    return TrainingRun(agent=agent, records=records, max_abs_u=max_abs_u,
                       soft_violations=soft, hard_violations=hard, resets=resets,
                       resets_timed_out=timed_out)


def write_reward_log(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "steps", "cumulative_reward", "terminated_by",
                         "sigma"])
        for rec in records:
            writer.writerow([rec.episode, rec.steps,
                             f"{rec.cumulative_reward:.10g}", rec.terminated_by,
                             f"{rec.sigma:.10g}"])


def _checkpoint(out_dir, agent, buffer, records, batch_rng, ref_rng):
    ckpt = os.path.join(out_dir, "checkpoints", f"ep{agent.episode:04d}")
    ddpg.save_agent(agent, ckpt)
    n = len(buffer)
    state = {
        "episode": agent.episode,
        "batch_rng": json.dumps(batch_rng.bit_generator.state),
        "ref_rng": json.dumps(ref_rng.bit_generator.state),
    }
    np.savez_compressed(
        os.path.join(out_dir, "checkpoints", "resume_state.npz"),
        s=buffer.s[:n], a=buffer.a[:n], r=buffer.r[:n],
        s_next=buffer.s_next[:n], done=buffer.done[:n],
        count=buffer.count, meta=json.dumps(state),
        actor_m=_pack_opt(agent.actor_opt), critic_m=_pack_opt(agent.critic_opt))
    write_reward_log(os.path.join(out_dir, "reward_log.csv"), records)


def _pack_opt(opt):
    flat = [np.array([opt.step], dtype=float)]
    for m, v in zip(opt.m, opt.v):
        flat += [m[0].ravel(), m[1], v[0].ravel(), v[1]]
    return np.concatenate(flat)


def _unpack_opt(opt, packed):
    opt.step = int(packed[0])
    i = 1
    for m, v in zip(opt.m, opt.v):
        for arr in (m[0], m[1], v[0], v[1]):
            arr[:] = packed[i:i + arr.size].reshape(arr.shape)
            i += arr.size
