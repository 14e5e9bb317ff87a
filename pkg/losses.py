"""
igct-lab - Training Losses
==========================
Every objective the training loops optimize:

- loss_gct:          guided consistency training (denoiser θ)
- loss_ict:          inverse consistency training (noiser φ)
- loss_recon:        noiser → denoiser round trip (θ and φ)
- loss_edm_denoise:  CFG diffusion baseline (L2, label dropout)
- loss_gcd:          guided consistency distillation baseline (analytic teacher)

Each loss draws its minibatch from the rng it is given (draw_*), then hands
the batch to a pure *_on_batch function. Tests drive the pure functions
directly to force branches and share randomness.

Frozen targets always go through the stop-gradient call of the wrapper
(no tape), with the current weights.

Author: igct-lab Team
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from config import NULL_CLASS, ScheduleConfig, TrainConfig
from oracle import MixtureWorld, heun_step, oracle_denoise_fn, sample_batch
from precondition import Denoiser, Noiser
from schedule import (
    guidance_mask_prob,
    karras_grid,
    sample_guidance_w,
    sample_noise_level,
    step_pairs,
)

logger = logging.getLogger("LOSSES")


@dataclass
class LossResult:
    """Batch-mean loss and its gradients (None for a network the loss does not touch)."""
    value: float
    grads_theta: Optional[Dict[str, np.ndarray]] = None
    grads_phi: Optional[Dict[str, np.ndarray]] = None
    info: Dict[str, float] = field(default_factory=dict)


# ==================== DISTANCE ====================

def pseudo_huber(a, b, c: float):
    """
    √(‖a − b‖² + c²) − c over the last axis.

    Written as ‖a−b‖² / (√(‖a−b‖² + c²) + c), which is the same value
    without cancellation when ‖a−b‖ ≪ c.
    """
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    sq = np.sum(diff * diff, axis=-1)
    out = sq / (np.sqrt(sq + c * c) + c)
    return float(out) if np.ndim(out) == 0 else out


def _weighted_huber(online: np.ndarray, target: np.ndarray, weights: np.ndarray, c: float):
    """mean_i weights_i·d(online_i, target_i) and its gradient w.r.t. online."""
    batch = online.shape[0]
    diff = online - target
    root = np.sqrt(np.sum(diff * diff, axis=1) + c * c)
    value = float(np.mean(weights * pseudo_huber(online, target, c)))
    upstream = (weights / root / batch)[:, None] * diff
    return value, upstream


# ==================== GUIDED CT ====================

@dataclass
class GCTBatch:
    x_src: np.ndarray
    c_src: np.ndarray
    x_tar: np.ndarray
    c_tar: np.ndarray
    z: np.ndarray
    t: np.ndarray
    w: np.ndarray
    u: np.ndarray  # uniform draw deciding the branch


def draw_gct_batch(rng: np.random.Generator, world: MixtureWorld, schedule: ScheduleConfig, size: int) -> GCTBatch:
    x_src, c_src = sample_batch(rng, world, size)
    x_tar, c_tar = sample_batch(rng, world, size)
    z = rng.standard_normal((size, world.dims))
    t = sample_noise_level(rng, schedule, size)
    w = sample_guidance_w(rng, schedule, size)
    u = rng.uniform(size=size)
    return GCTBatch(x_src=x_src, c_src=c_src, x_tar=x_tar, c_tar=c_tar, z=z, t=t, w=w, u=u)


def guided_branch_mask(batch: GCTBatch, schedule: ScheduleConfig) -> np.ndarray:
    """Rows taking the guided target: u < q(t), so q(t) = 0 never selects it."""
    return batch.u < guidance_mask_prob(batch.t, schedule)


def gct_cleaner_point(batch: GCTBatch, k: int, schedule: ScheduleConfig, guided: np.ndarray):
    """
    The frozen-branch input of guided CT.

    Returns:
        (x_t, x_r, r, lambda_gct, classes)
    """
    r, delta_t, lam, _ = step_pairs(batch.t, k, schedule)
    x_t = batch.x_src + batch.t[:, None] * batch.z
    z_star = (x_t - batch.x_tar) / batch.t[:, None]
    w = batch.w[:, None]
    direction = np.where(guided[:, None], w * z_star + (1.0 - w) * batch.z, batch.z)
    x_r = x_t - delta_t[:, None] * direction
    classes = np.where(guided, batch.c_tar, batch.c_src)
    return x_t, x_r, r, lam, classes


def gct_loss_on_batch(denoiser: Denoiser, batch: GCTBatch, k: int, schedule: ScheduleConfig,
                      huber_c: float, guided: Optional[np.ndarray] = None) -> LossResult:
    """λ(t)·d(D(x_t, t, c, w), sg D(x_r, r, c, w)), batch mean."""
    if guided is None:
        guided = guided_branch_mask(batch, schedule)
    x_t, x_r, r, lam, classes = gct_cleaner_point(batch, k, schedule, guided)
    online, tape = denoiser.forward(x_t, batch.t, classes, batch.w)
    target = denoiser(x_r, r, classes, batch.w)
    value, upstream = _weighted_huber(online, target, lam, huber_c)
    grads, _ = denoiser.backward(tape, upstream)
    return LossResult(value=value, grads_theta=grads, info={'guided_fraction': float(np.mean(guided))})


def loss_gct(state, cfg: TrainConfig, schedule_cfg: ScheduleConfig, world: MixtureWorld,
             rng: np.random.Generator) -> LossResult:
    batch = draw_gct_batch(rng, world, schedule_cfg, cfg.batch_size)
    return gct_loss_on_batch(state.denoiser, batch, state.k, schedule_cfg, cfg.huber_c)


# ==================== INVERSE CT ====================

@dataclass
class ICTBatch:
    x0: np.ndarray
    c: np.ndarray
    z: np.ndarray
    t: np.ndarray


def draw_ict_batch(rng: np.random.Generator, world: MixtureWorld, schedule: ScheduleConfig, size: int) -> ICTBatch:
    x0, c = sample_batch(rng, world, size)
    z = rng.standard_normal((size, world.dims))
    t = sample_noise_level(rng, schedule, size)
    return ICTBatch(x0=x0, c=c, z=z, t=t)


def ict_loss_on_batch(noiser: Noiser, batch: ICTBatch, k: int, schedule: ScheduleConfig,
                      huber_c: float) -> LossResult:
    """λ'(t)·d(N(x_r, r, c), sg N(x_t, t, c)); the noisier point is the target."""
    r, delta_t, _, lam_ict = step_pairs(batch.t, k, schedule)
    x_t = batch.x0 + batch.t[:, None] * batch.z
    x_r = x_t - delta_t[:, None] * batch.z
    online, tape = noiser.forward(x_r, r, batch.c)
    target = noiser(x_t, batch.t, batch.c)
    value, upstream = _weighted_huber(online, target, lam_ict, huber_c)
    grads, _ = noiser.backward(tape, upstream)
    return LossResult(value=value, grads_phi=grads)


def loss_ict(state, cfg: TrainConfig, schedule_cfg: ScheduleConfig, world: MixtureWorld,
             rng: np.random.Generator) -> LossResult:
    batch = draw_ict_batch(rng, world, schedule_cfg, cfg.batch_size)
    return ict_loss_on_batch(state.noiser, batch, state.k, schedule_cfg, cfg.huber_c)


# ==================== RECONSTRUCTION ====================

def recon_loss_on_batch(denoiser: Denoiser, noiser: Noiser, x0: np.ndarray, c: np.ndarray,
                        schedule: ScheduleConfig, huber_c: float) -> LossResult:
    """d(D(N(x_0, t_min, c), t_max, c, w_min), x_0); gradients reach both networks."""
    latent, noiser_tape = noiser.forward(x0, schedule.t_min, c)
    recon, denoiser_tape = denoiser.forward(latent, schedule.t_max, c, schedule.w_min)
    value, upstream = _weighted_huber(recon, x0, np.ones(x0.shape[0]), huber_c)
    grads_theta, d_latent = denoiser.backward(denoiser_tape, upstream)
    grads_phi, _ = noiser.backward(noiser_tape, d_latent)
    return LossResult(value=value, grads_theta=grads_theta, grads_phi=grads_phi)


def recon_due(k: int, i_skip: int) -> bool:
    return k % i_skip == 0


def loss_recon(state, cfg: TrainConfig, schedule_cfg: ScheduleConfig, world: MixtureWorld,
               rng: np.random.Generator) -> LossResult:
    """Unweighted reconstruction loss; zero with no gradients off the i_skip cadence."""
    if not recon_due(state.k, cfg.i_skip):
        return LossResult(value=0.0, info={'skipped': 1.0})
    x0, c = sample_batch(rng, world, cfg.batch_size)
    return recon_loss_on_batch(state.denoiser, state.noiser, x0, c, schedule_cfg, cfg.huber_c)


# ==================== CFG-EDM BASELINE ====================

def edm_weight(t: np.ndarray, sigma_data: float) -> np.ndarray:
    """(t² + σd²) / (t·σd)²"""
    return (t * t + sigma_data ** 2) / (t * sigma_data) ** 2


def edm_loss_on_batch(denoiser: Denoiser, x0: np.ndarray, classes: np.ndarray, z: np.ndarray,
                      t: np.ndarray, schedule: ScheduleConfig) -> LossResult:
    """λ(t)·‖D(x_0 + t z, t, c) − x_0‖², batch mean."""
    x_t = x0 + t[:, None] * z
    out, tape = denoiser.forward(x_t, t, classes)
    diff = out - x0
    weights = edm_weight(t, schedule.sigma)
    value = float(np.mean(weights * np.sum(diff * diff, axis=1)))
    upstream = (2.0 * weights / x0.shape[0])[:, None] * diff
    grads, _ = denoiser.backward(tape, upstream)
    return LossResult(value=value, grads_theta=grads,
                      info={'null_fraction': float(np.mean(classes == NULL_CLASS))})


def loss_edm_denoise(state, cfg: TrainConfig, schedule_cfg: ScheduleConfig, world: MixtureWorld,
                     rng: np.random.Generator) -> LossResult:
    x0, c = sample_batch(rng, world, cfg.batch_size)
    z = rng.standard_normal(x0.shape)
    t = sample_noise_level(rng, schedule_cfg, cfg.batch_size)
    dropped = rng.uniform(size=cfg.batch_size) < cfg.label_dropout
    classes = np.where(dropped, NULL_CLASS, c)
    return edm_loss_on_batch(state.denoiser, x0, classes, z, t, schedule_cfg)


# ==================== GUIDED CD BASELINE ====================

def distillation_grid(cfg: TrainConfig, schedule: ScheduleConfig) -> np.ndarray:
    """Ascending levels t_0 = t_min < ... < t_N = t_max."""
    return karras_grid(cfg.distill_n, schedule.t_min, schedule.t_max, cfg.rho)[::-1].copy()


def teacher_step(world: MixtureWorld, x_next: np.ndarray, t_next, t_cur, classes, w) -> np.ndarray:
    """One Heun step of the guided PF-ODE with the analytic teacher, from t_{n+1} down to t_n."""
    return heun_step(oracle_denoise_fn(world, classes, w), x_next, t_next, t_cur)


def gcd_loss_on_batch(denoiser: Denoiser, world: MixtureWorld, x0: np.ndarray, c: np.ndarray,
                      z: np.ndarray, n: np.ndarray, w: np.ndarray, grid: np.ndarray,
                      huber_c: float) -> LossResult:
    """λ(t_{n+1})·d(D(x_{t_{n+1}}, t_{n+1}, c, w), sg D(x_{t_n}, t_n, c, w)) with λ = 1/(t_{n+1} − t_n)."""
    t_next = grid[n + 1]
    t_cur = grid[n]
    x_next = x0 + t_next[:, None] * z
    x_cur = teacher_step(world, x_next, t_next, t_cur, c, w)
    online, tape = denoiser.forward(x_next, t_next, c, w)
    target = denoiser(x_cur, t_cur, c, w)
    value, upstream = _weighted_huber(online, target, 1.0 / (t_next - t_cur), huber_c)
    grads, _ = denoiser.backward(tape, upstream)
    return LossResult(value=value, grads_theta=grads)


def loss_gcd(state, cfg: TrainConfig, schedule_cfg: ScheduleConfig, world: MixtureWorld,
             rng: np.random.Generator) -> LossResult:
    grid = distillation_grid(cfg, schedule_cfg)
    x0, c = sample_batch(rng, world, cfg.batch_size)
    z = rng.standard_normal(x0.shape)
    n = rng.integers(0, cfg.distill_n, size=cfg.batch_size)
    w = sample_guidance_w(rng, schedule_cfg, cfg.batch_size)
    return gcd_loss_on_batch(state.denoiser, world, x0, c, z, n, w, grid, cfg.huber_c)
