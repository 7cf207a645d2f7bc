"""Session fixtures: the trained surrogate is expensive, so it is built once
and shared by the trainer, evaluation, and acceptance suites."""

import numpy as np
import pytest

from rlmpc_lab import mpc_core, nnmpc, plant

NNMPC_DATASET_SEED = 12345
NNMPC_TRAIN_SEED = 7


@pytest.fixture(scope="session")
def qube_params():
    return plant.qube_servo2_params()


@pytest.fixture(scope="session")
def perturbed_params(qube_params):
    return plant.perturb(qube_params, plant.default_perturbation())


@pytest.fixture(scope="session")
def mpc_cfg():
    return mpc_core.default_mpc_config()


@pytest.fixture(scope="session")
def nominal_model(qube_params, mpc_cfg):
    return plant.nominal_model(qube_params, mpc_cfg.Ts)


@pytest.fixture(scope="session")
def nnmpc_dataset(qube_params, nominal_model, mpc_cfg):
    return nnmpc.generate_dataset(qube_params, nominal_model, mpc_cfg,
                                  n_episodes=50, episode_len=700,
                                  seed=NNMPC_DATASET_SEED)


@pytest.fixture(scope="session")
def surrogate(nnmpc_dataset):
    return nnmpc.train_nnmpc(nnmpc_dataset, epochs=200, seed=NNMPC_TRAIN_SEED)
