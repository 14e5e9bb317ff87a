"""
igct-lab - Sampling, Inversion & Editing
========================================
Generation, inversion and class editing for trained networks and the oracle.

Model kinds:
- igct-denoiser / guided-cd: w-conditioned consistency denoiser, 1 or 2 NFE
- cfg-edm: diffusion denoiser combined as w·D(c) + (1-w)·D(∅), Heun sampler
- oracle:  the analytic cfg_denoiser, Heun sampler

Latent noise is drawn per sample from SeedSequence((seed, stream, index)),
so sample i is the same whatever the count.

Usage:
    request = SampleRequest(model_kind="igct-denoiser", class_id=1, w=7.0, nfe=1, count=1000, seed=0)
    x = cm_sample(denoiser, request, schedule)

    x_edit = edit("igct", x_src, c_src, c_tar, w, schedule, denoiser=d, noiser=n)

Author: igct-lab Team
"""
import logging
import threading
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import NULL_CLASS, ScheduleConfig
from oracle import MixtureWorld, cfg_denoiser, integrate_ode
from precondition import Denoiser, Noiser
from schedule import karras_grid

logger = logging.getLogger("SAMPLER")

ModelKind = Literal["igct-denoiser", "cfg-edm", "guided-cd", "oracle"]

# stream ids for per-sample latent noise
LATENT_STREAM = 0
RENOISE_STREAM = 1


class SampleRequest(BaseModel):
    """What to generate."""
    model_config = ConfigDict(extra='forbid')

    model_kind: ModelKind
    class_id: int = Field(ge=0)
    w: float = 1.0
    nfe: int = Field(default=1, ge=1)
    count: int = Field(default=1000, ge=1)
    seed: int = 0

    @model_validator(mode='after')
    def _check_nfe(self):
        if self.model_kind in ("igct-denoiser", "guided-cd") and self.nfe not in (1, 2):
            raise ValueError(f"{self.model_kind} samples with nfe 1 or 2, got {self.nfe}")
        return self


def latent_noise(seed: int, stream: int, count: int, dims: int) -> np.ndarray:
    """(count, dims) standard normals; row i depends only on (seed, stream, i)."""
    rows = [np.random.default_rng(np.random.SeedSequence((seed, stream, i))).standard_normal(dims)
            for i in range(count)]
    return np.array(rows, dtype=np.float64).reshape(count, dims)


def check_classes(classes, n_classes: int):
    ids = np.atleast_1d(np.asarray(classes))
    bad = ids[(ids != NULL_CLASS) & ((ids < 0) | (ids >= n_classes))]
    if len(bad):
        raise ValueError(f"unknown class id {int(bad[0])}; model knows {n_classes} classes")


# ==================== MODEL ADAPTERS ====================

class CFGModel:
    """Classifier-free guidance over an unguided denoiser: w·D(x|c) + (1-w)·D(x|∅)."""

    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser

    @property
    def calls(self) -> int:
        return self.denoiser.calls

    def __call__(self, x: np.ndarray, t, classes, w: float = 1.0) -> np.ndarray:
        cond = self.denoiser(x, t, classes)
        if np.all(np.asarray(w) == 1.0):
            return cond
        w = np.asarray(w, dtype=np.float64)
        if w.ndim == 1:
            w = w[:, None]
        uncond = self.denoiser(x, t, NULL_CLASS)
        return w * cond + (1.0 - w) * uncond


class OracleModel:
    """The analytic mixture denoiser behind the same call signature."""

    def __init__(self, world: MixtureWorld):
        self.world = world
        self.calls = 0
        self._calls_lock = threading.Lock()

    def __call__(self, x: np.ndarray, t, classes, w: float = 1.0) -> np.ndarray:
        with self._calls_lock:
            self.calls += 1
        return cfg_denoiser(x, t, self.world, classes, w)


# ==================== GENERATION ====================

def cm_sample(denoiser: Denoiser, request: SampleRequest, schedule: ScheduleConfig,
              t_mid: float = 0.8) -> np.ndarray:
    """
    One- or two-step consistency sampling.

    1 step: x = D(t_max·z, t_max, c, w)
    2 steps: re-noise x to t_mid with fresh noise (variance t_mid² − t_min²), denoise again
    """
    if request.nfe not in (1, 2):
        raise ValueError(f"consistency sampling supports nfe 1 or 2, got {request.nfe}")
    dims = denoiser.params.arch.dims
    check_classes(request.class_id, denoiser.params.arch.n_classes)
    z = latent_noise(request.seed, LATENT_STREAM, request.count, dims)
    x = denoiser(schedule.t_max * z, schedule.t_max, request.class_id, request.w)
    if request.nfe == 2:
        if not (schedule.t_min <= t_mid <= schedule.t_max):
            raise ValueError(f"t_mid={t_mid} outside [t_min, t_max]")
        fresh = latent_noise(request.seed, RENOISE_STREAM, request.count, dims)
        x_mid = x + np.sqrt(t_mid ** 2 - schedule.t_min ** 2) * fresh
        x = denoiser(x_mid, t_mid, request.class_id, request.w)
    return x


def heun_sample(model, request: SampleRequest, schedule: ScheduleConfig, dims: int, rho: float = 7.0,
                record: bool = False) -> Tuple[np.ndarray, List[Tuple[float, np.ndarray]]]:
    """
    Deterministic Heun integration of the guided PF-ODE on the ρ-grid from t_max to t_min.

    `request.nfe` is the number of grid steps.

    Returns:
        (samples, trajectory if record else [])
    """
    grid = karras_grid(request.nfe, schedule.t_min, schedule.t_max, rho)
    x = schedule.t_max * latent_noise(request.seed, LATENT_STREAM, request.count, dims)
    return integrate_ode(lambda xs, t: model(xs, t, request.class_id, request.w), x, grid, record=record)


# ==================== INVERSION ====================

def noiser_invert(noiser: Noiser, x: np.ndarray, classes, schedule: ScheduleConfig) -> np.ndarray:
    """One-step latent: N(x, t_min, c), a point at level t_max."""
    return noiser(np.asarray(x, dtype=np.float64), schedule.t_min, classes)


def ddim_invert(model, x: np.ndarray, classes, schedule: ScheduleConfig, n_steps: int,
                rho: float = 7.0) -> np.ndarray:
    """Unguided (w = 1) Heun integration of the PF-ODE upward from t_min to t_max."""
    grid = karras_grid(n_steps, schedule.t_min, schedule.t_max, rho)[::-1].copy()
    latent, _ = integrate_ode(lambda xs, t: model(xs, t, classes, 1.0), np.asarray(x, dtype=np.float64), grid)
    return latent


def ddim_generate(model, latent: np.ndarray, classes, w: float, schedule: ScheduleConfig, n_steps: int,
                  rho: float = 7.0) -> np.ndarray:
    """Heun integration downward from a given t_max latent."""
    grid = karras_grid(n_steps, schedule.t_min, schedule.t_max, rho)
    x, _ = integrate_ode(lambda xs, t: model(xs, t, classes, w), np.asarray(latent, dtype=np.float64), grid)
    return x


def round_trip(method: str, x: np.ndarray, classes, schedule: ScheduleConfig, denoiser: Optional[Denoiser] = None,
               noiser: Optional[Noiser] = None, model=None, n_steps: int = 18) -> Tuple[np.ndarray, np.ndarray]:
    """
    Invert then regenerate with the same class and no guidance.

    Returns:
        (latents, reconstructions)
    """
    if method == "igct":
        latent = noiser_invert(noiser, x, classes, schedule)
        return latent, denoiser(latent, schedule.t_max, classes, schedule.w_min)
    if method == "ddim":
        latent = ddim_invert(model, x, classes, schedule, n_steps)
        return latent, ddim_generate(model, latent, classes, 1.0, schedule, n_steps)
    raise ValueError(f"unknown inversion method: {method}")


# ==================== EDITING ====================

def edit(method: str, x_src: np.ndarray, c_src, c_tar, w: float, schedule: ScheduleConfig,
         n_classes: int, denoiser: Optional[Denoiser] = None, noiser: Optional[Noiser] = None,
         model=None, n_steps: int = 18) -> np.ndarray:
    """
    Class edit: invert under the source class, regenerate under the target class at guidance w.

    igct: D(N(x_src, t_min, c_src), t_max, c_tar, w), two network evaluations
    ddim: Heun generation from the DDIM latent of x_src
    """
    check_classes(c_src, n_classes)
    check_classes(c_tar, n_classes)
    if method == "igct":
        if denoiser is None or noiser is None:
            raise ValueError("igct editing needs a denoiser and a noiser")
        latent = noiser_invert(noiser, x_src, c_src, schedule)
        return denoiser(latent, schedule.t_max, c_tar, w)
    if method == "ddim":
        if model is None:
            raise ValueError("ddim editing needs a diffusion model")
        latent = ddim_invert(model, x_src, c_src, schedule, n_steps)
        return ddim_generate(model, latent, c_tar, w, schedule, n_steps)
    raise ValueError(f"unknown edit method: {method}")
