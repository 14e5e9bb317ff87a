"""
Shared fixtures for the igct-lab test suite.

Author: igct-lab Team
"""
import copy
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import default_schedule, parse_run_config, two_mode_world
from net import NetArch, init_params
from oracle import MixtureWorld
from precondition import Denoiser, Noiser


# =============================================================================
# WORLD / SCHEDULE
# =============================================================================

@pytest.fixture
def world_cfg():
    """The two-mode toy: class 0 at -2, class 1 at +2, std 0.2."""
    return two_mode_world()


@pytest.fixture
def world(world_cfg):
    return MixtureWorld.from_config(world_cfg)


@pytest.fixture
def schedule(world):
    return default_schedule(sigma_data=world.sigma_data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# =============================================================================
# NETWORKS
# =============================================================================

def small_arch(dims: int = 1, n_classes: int = 2, with_guidance: bool = True, width: int = 8) -> NetArch:
    return NetArch(dims=dims, n_classes=n_classes, with_guidance=with_guidance, hidden_width=width,
                   hidden_layers=2, time_features=4, class_features=2, guidance_features=4)


@pytest.fixture
def make_denoiser(schedule):
    """Factory: Denoiser over a small random MLP."""
    def _make(seed: int = 0, zero_init_output: bool = False, with_guidance: bool = True, dims: int = 1):
        params = init_params(np.random.default_rng(seed), small_arch(dims=dims, with_guidance=with_guidance),
                             zero_init_output)
        return Denoiser(params, schedule)
    return _make


@pytest.fixture
def make_noiser(schedule):
    """Factory: Noiser over a small random MLP (no guidance input)."""
    def _make(seed: int = 1, zero_init_output: bool = False, dims: int = 1):
        params = init_params(np.random.default_rng(seed), small_arch(dims=dims, with_guidance=False),
                             zero_init_output)
        return Noiser(params, schedule)
    return _make


# =============================================================================
# RUN CONFIGS
# =============================================================================

SMALL_RUN = {
    "schedule": {
        "p_mean": -1.1, "p_std": 2.0, "t_min": 0.002, "t_max": 80.0, "d": 50,
        "t_low": 11.0, "t_high": 14.3, "w_min": 1.0, "w_max": 15.0,
    },
    "world": {
        "dims": 1,
        "components": [
            {"class_id": 0, "mean": [-2.0], "std": 0.2, "weight": 0.5},
            {"class_id": 1, "mean": [2.0], "std": 0.2, "weight": 0.5},
        ],
    },
    "train": {
        "batch_size": 16,
        "total_iterations": 60,
        "i_skip": 3,
        "lambda_recon_schedule": [[None, 0.001]],
        "lr": 0.001,
        "distill_n": 6,
        "max_halvings": 9,
        "checkpoint_every": 30,
        "log_every": 20,
        "eval_samples": 40,
    },
    "net": {
        "hidden_width": 8, "hidden_layers": 2, "time_features": 4,
        "class_features": 2, "guidance_features": 4,
    },
    "eval": {
        "n_samples": 200, "w_values": [1.0, 7.0, 13.0], "heun_steps": 6, "ddim_steps": 6,
        "sliced_projections": 8,
    },
    "seed": 7,
    "output_dir": "runs/test",
    "run_id": "small",
}


@pytest.fixture
def small_run_dict():
    """Factory: a deep copy of the small run config, with top-level sections updated."""
    def _make(**sections):
        data = copy.deepcopy(SMALL_RUN)
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
        return data
    return _make


@pytest.fixture
def small_run(small_run_dict, tmp_path):
    """Parsed small run config writing under tmp_path."""
    return parse_run_config(small_run_dict(output_dir=str(tmp_path / "run")))
