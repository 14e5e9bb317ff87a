"""
igct-lab - Noise / Guidance Schedule
====================================
Time, step-size and guidance scheduling shared by training and sampling.

- Noise levels t ~ LogNormal(p_mean, p_std), clamped to [t_min, t_max]
- Step size Δt(t) = t / 2^⌊k/d⌋ · n(t), with n(t) = 1 + 8·sigmoid(-t)
- Guidance mask q(t): zero below t_low, ramps quadratically to q_cap at t_high
- Guidance strength w ~ U(w_min, w_max)
- Karras ρ-spaced grids for the Heun sampler and the distillation baseline

Everything here is pure except the samplers, which consume the rng handed in.

Usage:
    from schedule import sample_noise_level, step_pair, guidance_mask_prob

    t = sample_noise_level(rng, cfg)
    pair = step_pair(t, k, cfg)

Author: igct-lab Team
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from config import ScheduleConfig

logger = logging.getLogger("SCHEDULE")


@dataclass(frozen=True)
class StepPair:
    """Adjacent noise levels for one consistency target (r < t)."""
    t: float
    r: float
    delta_t: float      # t - r after the t_min clamp
    raw_delta_t: float  # t / 2^stage * n(t), before clamping
    lambda_gct: float   # 1 / (t - r)
    lambda_ict: float   # delta_t / t_max
    stage: int

    @property
    def degenerate(self) -> bool:
        """True when t sits on t_min and there is no cleaner level to step to."""
        return self.delta_t == 0.0


# ==================== NOISE LEVELS ====================

def noise_level_from_normal(g, cfg: ScheduleConfig):
    """exp(p_mean + p_std·g) clamped to [t_min, t_max]. Works on scalars and arrays."""
    return np.clip(np.exp(cfg.p_mean + cfg.p_std * np.asarray(g, dtype=np.float64)), cfg.t_min, cfg.t_max)


def sample_noise_level(rng: np.random.Generator, cfg: ScheduleConfig, size: Optional[int] = None):
    """
    Draw t from the clamped lognormal.

    Args:
        rng: numpy Generator
        cfg: Schedule config
        size: None for a scalar draw, otherwise a batch size

    Returns:
        float (size=None) or float64 array of shape (size,)
    """
    t = noise_level_from_normal(rng.standard_normal(size), cfg)
    return float(t) if size is None else t


def sigmoid_adjust(t):
    """n(t) = 1 + 8·sigmoid(-t); 5 at t = 0, tends to 1 as t grows."""
    return 1.0 + 8.0 * expit(-np.asarray(t, dtype=np.float64))


# ==================== STEP SIZES ====================

def halving_stage(k: int, cfg: ScheduleConfig) -> int:
    """⌊k/d⌋, the number of Δt halvings applied at iteration k."""
    if k < 0:
        raise ValueError(f"iteration k must be >= 0, got {k}")
    return int(k) // cfg.d


def raw_step_size(t, k: int, cfg: ScheduleConfig):
    """t·n(t) / 2^⌊k/d⌋ with the power of two applied exactly via ldexp."""
    t = np.asarray(t, dtype=np.float64)
    return np.ldexp(t * sigmoid_adjust(t), -halving_stage(k, cfg))


def step_pair(t: float, k: int, cfg: ScheduleConfig) -> StepPair:
    """
    Pair the noise level t with its cleaner partner r for iteration k.

    r = max(t - Δt, t_min). Early in training Δt ≥ t and the pair becomes a
    denoising target at t_min. When t == t_min itself the pair is degenerate
    (delta_t = 0) and both loss weights are 0.

    Raises:
        ValueError: t outside [t_min, t_max]
    """
    t = float(t)
    if not (cfg.t_min <= t <= cfg.t_max):
        raise ValueError(f"t={t} outside [{cfg.t_min}, {cfg.t_max}]")
    stage = halving_stage(k, cfg)
    raw = float(raw_step_size(t, k, cfg))
    r = max(t - raw, cfg.t_min)
    delta_t = t - r
    if delta_t > 0:
        lambda_gct = 1.0 / delta_t
    else:
        lambda_gct = 0.0
    return StepPair(
        t=t,
        r=r,
        delta_t=delta_t,
        raw_delta_t=raw,
        lambda_gct=lambda_gct,
        lambda_ict=delta_t / cfg.t_max,
        stage=stage,
    )


def step_pairs(t: np.ndarray, k: int, cfg: ScheduleConfig):
    """
    Vectorized step_pair for a batch of noise levels.

    Returns:
        (r, delta_t, lambda_gct, lambda_ict) arrays; degenerate rows get zero weights
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < cfg.t_min) or np.any(t > cfg.t_max):
        raise ValueError("noise levels outside [t_min, t_max]")
    r = np.maximum(t - raw_step_size(t, k, cfg), cfg.t_min)
    delta_t = t - r
    safe = np.where(delta_t > 0, delta_t, 1.0)
    lambda_gct = np.where(delta_t > 0, 1.0 / safe, 0.0)
    return r, delta_t, lambda_gct, delta_t / cfg.t_max


def final_stage_reached(k: int, cfg: ScheduleConfig, max_halvings: Optional[int]) -> bool:
    """True once k has gone past the last halving stage (the curriculum's end)."""
    if max_halvings is None:
        return False
    return halving_stage(k, cfg) > max_halvings


# ==================== GUIDANCE ====================

def guidance_mask_prob(t, cfg: ScheduleConfig):
    """
    q(t) = q_cap · clamp((t - t_low)/(t_high - t_low), 0, 1)²

    Probability that a training draw at level t uses the guided target.
    """
    ramp = np.clip((np.asarray(t, dtype=np.float64) - cfg.t_low) / (cfg.t_high - cfg.t_low), 0.0, 1.0)
    q = cfg.q_cap * ramp * ramp
    return float(q) if np.ndim(q) == 0 else q


def sample_guidance_w(rng: np.random.Generator, cfg: ScheduleConfig, size: Optional[int] = None):
    """w ~ U[w_min, w_max]; a degenerate interval always returns w_min."""
    if cfg.w_max == cfg.w_min:
        return cfg.w_min if size is None else np.full(size, cfg.w_min, dtype=np.float64)
    w = rng.uniform(cfg.w_min, cfg.w_max, size)
    return float(w) if size is None else w


# ==================== DISCRETIZATION ====================

def karras_grid(n: int, t_min: float, t_max: float, rho: float = 7.0) -> np.ndarray:
    """
    Descending ρ-spaced grid of n+1 levels from t_max to t_min.

    Endpoints are set exactly so callers can rely on grid[0] == t_max and
    grid[-1] == t_min.
    """
    if n < 1:
        raise ValueError(f"grid needs at least one step, got n={n}")
    i = np.arange(n + 1, dtype=np.float64)
    inv_rho = 1.0 / rho
    grid = (t_max ** inv_rho + i / n * (t_min ** inv_rho - t_max ** inv_rho)) ** rho
    grid[0] = t_max
    grid[-1] = t_min
    return grid
