"""Supervised surrogate of the downsampled-reference MPC.

A 10-input network (4 states plus 6 reference crucial points) imitates the
receding-horizon input map. Training data comes from closed-loop rollouts of
the MPC itself on the nominal plant: on-policy states cover the reachable
manifold, randomized start states cover the recovery envelope used for
resets, and occasional input noise exposes off-nominal neighborhoods. The
recorded target is always the MPC's own input at the visited state, not the
noisy applied one."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import neural_net as nn
from .mpc_core import MpcConfig, _Workspace, _solve_with_chol
from .plant import DiscreteModel, PendulumParams, plant_step
from .reference import CrucialPoints, downsample, random_reference, regenerate_window

logger = logging.getLogger(__name__)

OBSERVATION_DIM = 10
DATASET_HEADER = "theta,alpha,theta_dot,alpha_dot,c1,c2,c3,c4,c5,c6,u"

ACTION_BOUND = 12.0       # V, saturation of the surrogate's tanh output
HIDDEN = 128
EXPLORE_FRACTION = 0.2    # rollout steps that apply noisy inputs
EXPLORE_SIGMA = 0.3       # V


class EmptyDataset(ValueError):
    pass


@dataclass
class NnmpcController:
    net: nn.Mlp
    meta: dict

    def __post_init__(self):
        if self.net.n_inputs != OBSERVATION_DIM or self.net.n_outputs != 1:
            raise ValueError("surrogate must map 10 observations to 1 input")


def observation(x, cp: CrucialPoints) -> np.ndarray:
    """Controller observation [x, crucial points], length 10."""
    obs = np.empty(OBSERVATION_DIM)
    obs[:4] = x
    obs[4:] = cp.c
    return obs


def nnmpc_act(ctrl: NnmpcController, x, cp: CrucialPoints) -> float:
    """Single forward pass; bounded by the tanh output scale."""
    return float(nn.predict(ctrl.net, observation(x, cp))[0])


def _episode_samples(params, model, cfg, episode_len, seed, start_spread, zero_ref):
    """One closed-loop rollout; returns (observations, targets) arrays."""
    rng = np.random.default_rng(seed)
    traj = random_reference(rng)
    if zero_ref:
        traj = random_reference(rng, amplitude_range=(0.0, 0.0))
    x = np.array([rng.uniform(-start_spread[0], start_spread[0]),
                  rng.uniform(-start_spread[1], start_spread[1]),
                  rng.uniform(-start_spread[2], start_spread[2]),
                  rng.uniform(-start_spread[3], start_spread[3])])
    ws = _Workspace(model, cfg)
    obs = np.empty((episode_len, OBSERVATION_DIM))
    targets = np.empty(episode_len)
    kept = 0
    for k in range(episode_len):
        cp = downsample(traj, k, cfg.Ts, cfg.CTs, cfg.N)
        f, h = ws.rhs(x, regenerate_window(cp))
        sol = _solve_with_chol(ws.H, ws.chol, f, ws.G, h, 1e-8, 500)
        if sol.max_iter_reached:
            logger.warning("dropping episode tail at step %d: QP did not converge", k)
            break
        u_mpc = float(np.clip(sol.U[0], -cfg.u_bound, cfg.u_bound))
        obs[kept, :4] = x
        obs[kept, 4:] = cp.c
        targets[kept] = u_mpc
        kept += 1
        u_applied = u_mpc
        if rng.uniform() < EXPLORE_FRACTION:
            u_applied = float(np.clip(u_mpc + rng.normal(0.0, EXPLORE_SIGMA),
                                      -cfg.u_bound, cfg.u_bound))
        x = plant_step(params, x, u_applied, cfg.Ts)
        if abs(x[1]) > 0.6:  # fell over under exploration noise; stop the episode
            break
    return obs[:kept], targets[:kept]


def generate_dataset(params: PendulumParams, model: DiscreteModel, cfg: MpcConfig,
                     n_episodes: int, episode_len: int, seed: int = 0,
                     start_spread=(1.0, 0.3, 0.3, 0.3), zero_ref_fraction=0.2,
                     workers: int = 1):
    """Closed-loop MPC rollouts over randomized references and start states.

    Deterministic given the seed: episodes draw independent child seeds, so
    the result is identical whether episodes run sequentially or on a pool."""
    seeds = [s.generate_state(1)[0] for s in np.random.SeedSequence(seed).spawn(max(n_episodes, 1))]
    zero_flags = [i < round(zero_ref_fraction * n_episodes) for i in range(n_episodes)]
    jobs = [(params, model, cfg, episode_len, seeds[i], start_spread, zero_flags[i])
            for i in range(n_episodes)]
    if workers > 1 and n_episodes > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_episode_worker, jobs))
    else:
        parts = [_episode_worker(job) for job in jobs]
    if not parts:
        return np.empty((0, OBSERVATION_DIM)), np.empty(0)
    X = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    return X, Y


def _episode_worker(job):
    return _episode_samples(*job)


def train_nnmpc(dataset, epochs: int = 200, seed: int = 0, batch_size: int = 64,
                lr: float = 1e-3, val_fraction: float = 0.1) -> NnmpcController:
    """Fit the surrogate on a 90/10 split and report both MSEs in the metadata."""
    X, Y = dataset
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    n_val = int(round(val_fraction * len(X)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    net = nn.init_mlp((OBSERVATION_DIM, HIDDEN, 1), ("relu", "tanh"),
                      output_scale=ACTION_BOUND, seed=seed)
    net, history = nn.train_supervised(net, (X[train_idx], Y[train_idx]),
                                       epochs=epochs, batch_size=batch_size,
                                       lr=lr, seed=seed + 1)
    meta = {
        "n_samples": len(X),
        "n_train": len(train_idx),
        "n_val": len(val_idx),
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": lr,
        "seed": seed,
        "train_mse": nn.mse(net, X[train_idx], Y[train_idx]),
        "val_mse": nn.mse(net, X[val_idx], Y[val_idx]) if n_val else float("nan"),
        "final_epoch_loss": history[-1],
    }
    logger.info("surrogate trained: train mse %.4g, val mse %.4g",
                meta["train_mse"], meta["val_mse"])
    return NnmpcController(net=net, meta=meta)


def save_dataset(path, dataset):
    X, Y = dataset
    data = np.column_stack([X, Y])
    np.savetxt(path, data, delimiter=",", header=DATASET_HEADER, comments="", fmt="%.17g")


def load_dataset(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.empty((0, OBSERVATION_DIM)), np.empty(0)
    return data[:, :OBSERVATION_DIM], data[:, OBSERVATION_DIM]


def save_controller(ctrl: NnmpcController, weights_path, meta_path=None):
    nn.save_mlp(ctrl.net, weights_path)
    if meta_path is None:
        meta_path = str(weights_path) + ".meta"
    with open(meta_path, "w") as fh:
        fh.write("nnmpc v1\n")
        for key, value in sorted(ctrl.meta.items()):
            fh.write(f"{key} = {value}\n")


def load_controller(weights_path, meta_path=None) -> NnmpcController:
    net = nn.load_mlp(weights_path)
    if meta_path is None:
        meta_path = str(weights_path) + ".meta"
    meta = {}
    try:
        with open(meta_path) as fh:
            if fh.readline().strip() != "nnmpc v1":
                raise ValueError(f"{meta_path}: not an nnmpc v1 metadata file")
            for line in fh:
                if "=" in line:
                    key, _, value = line.partition("=")
                    meta[key.strip()] = value.strip()
    except FileNotFoundError:
        logger.warning("no metadata sidecar at %s", meta_path)
    return NnmpcController(net=net, meta=meta)
