"""
igct-lab - Analytic Gaussian-Mixture Oracle
===========================================
Exact ground truth for labeled mixtures of isotropic Gaussians:

- sampling (optionally restricted to one class)
- posterior-mean denoiser E[x_0 | x_t] and score at any noise level t
- classifier-free-guided denoiser w·D(c) + (1-w)·D(∅)
- Heun integration of the probability-flow ODE dx/dt = (x - D(x, t))/t,
  forward (generation) and reversed (inversion)

The same heun_step drives the distillation teacher, the Heun sampler and
DDIM inversion, so all three agree bit for bit on a shared step.

Usage:
    world = MixtureWorld.from_config(cfg.world)
    x, c = sample_batch(rng, world, 1024)
    x0_hat = exact_denoiser(x_t, t, world, classes)
    traj = solve_pf_ode(x_start, 80.0, 0.002, world, classes, w=13.0, n_steps=512)

Author: igct-lab Team
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from config import NULL_CLASS, WorldConfig
from schedule import karras_grid

logger = logging.getLogger("ORACLE")

DenoiseFn = Callable[[np.ndarray, float], np.ndarray]


# ==================== WORLD ====================

@dataclass(frozen=True)
class MixtureWorld:
    """Labeled isotropic Gaussian mixture. Weights are global; classes renormalize."""
    dims: int
    class_ids: np.ndarray  # (K,)
    means: np.ndarray      # (K, dims)
    stds: np.ndarray       # (K,)
    weights: np.ndarray    # (K,)

    def __post_init__(self):
        if np.any(self.stds <= 0):
            raise ValueError("component std must be > 0")
        if np.any(self.weights <= 0) or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("component weights must be positive and sum to 1")
        if self.means.shape != (len(self.class_ids), self.dims):
            raise ValueError("means must have shape (components, dims)")
        present = set(int(c) for c in self.class_ids)
        if present != set(range(len(present))):
            raise ValueError(f"class ids must be contiguous from 0, got {sorted(present)}")

    @classmethod
    def from_config(cls, cfg: WorldConfig) -> "MixtureWorld":
        return cls(
            dims=cfg.dims,
            class_ids=np.array([c.class_id for c in cfg.components], dtype=np.int64),
            means=np.array([c.mean for c in cfg.components], dtype=np.float64),
            stds=np.array([c.std for c in cfg.components], dtype=np.float64),
            weights=np.array([c.weight for c in cfg.components], dtype=np.float64),
        )

    @property
    def n_classes(self) -> int:
        return int(self.class_ids.max()) + 1

    @property
    def sigma_data(self) -> float:
        """√(mean over dims of the mixture's per-dimension variance)."""
        mean = self.weights @ self.means
        second = self.weights @ (self.means ** 2 + (self.stds ** 2)[:, None])
        return float(np.sqrt(np.mean(second - mean ** 2)))

    def class_weights(self, c: int) -> np.ndarray:
        """Component probabilities given class c (0 outside the class)."""
        self.check_class(c)
        w = np.where(self.class_ids == c, self.weights, 0.0)
        return w / w.sum()

    def class_prior(self) -> np.ndarray:
        return np.array([self.weights[self.class_ids == c].sum() for c in range(self.n_classes)])

    def check_class(self, c: int):
        if c != NULL_CLASS and not (0 <= c < self.n_classes):
            raise ValueError(f"unknown class id {c}; world has {self.n_classes} classes")


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    c: int


# ==================== SAMPLING ====================

def sample_batch(rng: np.random.Generator, world: MixtureWorld, size: int,
                 classes=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw `size` labeled points.

    Args:
        classes: None (draw from the full mixture), one class id, or a (size,) array of ids

    Returns:
        (x of shape (size, dims), class ids of shape (size,))
    """
    if classes is None:
        comps = rng.choice(len(world.weights), size=size, p=world.weights)
    else:
        wanted = np.broadcast_to(np.asarray(classes, dtype=np.int64), (size,))
        comps = np.empty(size, dtype=np.int64)
        for c in np.unique(wanted):
            if c == NULL_CLASS:
                raise ValueError("cannot sample data for the null class")
            world.check_class(int(c))
            rows = np.flatnonzero(wanted == c)
            comps[rows] = rng.choice(len(world.weights), size=len(rows), p=world.class_weights(int(c)))
    noise = rng.standard_normal((size, world.dims))
    x = world.means[comps] + world.stds[comps][:, None] * noise
    return x, world.class_ids[comps].copy()


def sample_data(rng: np.random.Generator, world: MixtureWorld, c: Optional[int] = None) -> LabeledSample:
    """One labeled draw, optionally restricted to class c."""
    x, labels = sample_batch(rng, world, 1, classes=c)
    return LabeledSample(x=x[0], c=int(labels[0]))


# ==================== POSTERIOR ====================

def _prepare(x_t, t, world: MixtureWorld, classes):
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    batch = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    if np.any(t < 0):
        raise ValueError("noise level must be >= 0")
    if classes is None:
        classes = NULL_CLASS
    ids = np.broadcast_to(np.asarray(classes, dtype=np.int64), (batch,))
    for c in np.unique(ids):
        world.check_class(int(c))
    allowed = (ids[:, None] == NULL_CLASS) | (ids[:, None] == world.class_ids[None, :])
    return x, t, allowed


def _component_logits(x, t, world: MixtureWorld, allowed) -> Tuple[np.ndarray, np.ndarray]:
    """log w_k + log N(x; μ_k, (σ_k² + t²) I), masked to the allowed components."""
    var = world.stds[None, :] ** 2 + t[:, None] ** 2                       # (B, K)
    sq = ((x[:, None, :] - world.means[None, :, :]) ** 2).sum(axis=2)      # (B, K)
    log_norm = -0.5 * world.dims * np.log(2.0 * np.pi * var) - 0.5 * sq / var
    logits = np.where(allowed, np.log(world.weights)[None, :] + log_norm, -np.inf)
    return logits, var


def exact_denoiser(x_t, t, world: MixtureWorld, classes=None) -> np.ndarray:
    """
    E[x_0 | x_t] under x_t = x_0 + t·z.

    Responsibilities are a softmax over log-weights (log-sum-exp stable down
    to t_min); each component contributes μ_k + σ_k²/(σ_k² + t²)·(x_t - μ_k).
    classes None or NULL_CLASS rows marginalize over all classes.
    """
    x, t, allowed = _prepare(x_t, t, world, classes)
    logits, var = _component_logits(x, t, world, allowed)
    resp = softmax(logits, axis=1)                                         # (B, K)
    shrink = (world.stds[None, :] ** 2 / var)[:, :, None]                  # (B, K, 1)
    comp_means = world.means[None, :, :] + shrink * (x[:, None, :] - world.means[None, :, :])
    out = np.einsum('bk,bkd->bd', resp, comp_means)
    return out.reshape(np.shape(x_t)) if np.ndim(x_t) == 1 else out


def class_posterior(x_t, t, world: MixtureWorld) -> np.ndarray:
    """p(c | x_t) for every class, shape (B, n_classes)."""
    x, t, allowed = _prepare(x_t, t, world, None)
    logits, _ = _component_logits(x, t, world, allowed)
    resp = softmax(logits, axis=1)
    return np.stack([resp[:, world.class_ids == c].sum(axis=1) for c in range(world.n_classes)], axis=1)


def log_density(x_t, t, world: MixtureWorld, classes=None) -> np.ndarray:
    """log p_t(x_t | c) of the mixture convolved with N(0, t² I)."""
    x, t, allowed = _prepare(x_t, t, world, classes)
    logits, _ = _component_logits(x, t, world, allowed)
    # renormalize the class-restricted weights
    log_mass = logsumexp(np.where(allowed, np.log(world.weights)[None, :], -np.inf), axis=1)
    return logsumexp(logits, axis=1) - log_mass


def exact_score(x_t, t, world: MixtureWorld, classes=None) -> np.ndarray:
    """∇ log p_t(x_t | c) = (E[x_0 | x_t] - x_t) / t²."""
    if np.any(np.asarray(t) <= 0):
        raise ValueError("score is undefined at t = 0")
    t_col = np.asarray(t, dtype=np.float64)
    if t_col.ndim == 1:
        t_col = t_col[:, None]
    return (exact_denoiser(x_t, t, world, classes) - np.asarray(x_t, dtype=np.float64)) / t_col ** 2


def cfg_denoiser(x_t, t, world: MixtureWorld, classes, w: float) -> np.ndarray:
    """w·D(x|c) + (1 - w)·D(x|∅)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    cond = exact_denoiser(x_t, t, world, classes)
    uncond = exact_denoiser(x_t, t, world, None)
    return w * cond + (1.0 - w) * uncond


def oracle_denoise_fn(world: MixtureWorld, classes, w: float = 1.0) -> DenoiseFn:
    """Bind (world, classes, w) into a (x, t) -> x0_hat callable."""
    def denoise(x: np.ndarray, t: float) -> np.ndarray:
        return cfg_denoiser(x, t, world, classes, w)
    return denoise


# ==================== PF-ODE ====================

def heun_step(denoise_fn: DenoiseFn, x: np.ndarray, t_cur, t_next) -> np.ndarray:
    """
    One second-order step of dx/dt = (x - D(x, t))/t from t_cur to t_next.

    Levels are scalars or per-row (B,) arrays. The trapezoidal correction is
    always applied; every level must be > 0.
    """
    if np.any(np.asarray(t_cur) <= 0) or np.any(np.asarray(t_next) <= 0):
        raise ValueError("Heun step needs strictly positive levels")
    tc = np.asarray(t_cur, dtype=np.float64)
    tn = np.asarray(t_next, dtype=np.float64)
    tc_col = tc[:, None] if tc.ndim == 1 else tc
    tn_col = tn[:, None] if tn.ndim == 1 else tn
    h = tn_col - tc_col
    d_cur = (x - denoise_fn(x, t_cur)) / tc_col
    x_euler = x + h * d_cur
    d_next = (x_euler - denoise_fn(x_euler, t_next)) / tn_col
    return x + h * 0.5 * (d_cur + d_next)


def check_grid(grid: np.ndarray):
    diffs = np.diff(grid)
    if len(grid) < 2 or not (np.all(diffs < 0) or np.all(diffs > 0)):
        raise ValueError("time grid must be strictly monotone with at least two levels")


def integrate_ode(denoise_fn: DenoiseFn, x: np.ndarray, grid: np.ndarray,
                  record: bool = False) -> Tuple[np.ndarray, List[Tuple[float, np.ndarray]]]:
    """
    Heun integration along `grid` (descending: generation; ascending: inversion).

    Returns:
        (final x, trajectory as [(t, x), ...] when record else [])
    """
    grid = np.asarray(grid, dtype=np.float64)
    check_grid(grid)
    x = np.asarray(x, dtype=np.float64)
    trajectory = [(float(grid[0]), x.copy())] if record else []
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        x = heun_step(denoise_fn, x, float(t_cur), float(t_next))
        if record:
            trajectory.append((float(t_next), x.copy()))
    return x, trajectory


def ode_grid(t_start: float, t_end: float, n_steps: int, rho: float = 7.0) -> np.ndarray:
    """Karras ρ-grid between two levels, oriented from t_start to t_end."""
    if t_start == t_end:
        raise ValueError("t_start and t_end must differ")
    lo, hi = min(t_start, t_end), max(t_start, t_end)
    grid = karras_grid(n_steps, lo, hi, rho)
    return grid if t_start > t_end else grid[::-1].copy()


def solve_pf_ode(x_start, t_start: float, t_end: float, world: MixtureWorld, classes, w: float,
                 n_steps: int, rho: float = 7.0) -> List[Tuple[float, np.ndarray]]:
    """
    Integrate the guided PF-ODE from t_start to t_end with Heun steps.

    t_start > t_end generates; t_start < t_end inverts.

    Returns:
        trajectory [(t, x), ...] with n_steps + 1 entries
    """
    grid = ode_grid(t_start, t_end, n_steps, rho)
    _, trajectory = integrate_ode(oracle_denoise_fn(world, classes, w), np.atleast_2d(x_start), grid, record=True)
    return trajectory
