"""
igct-lab - Preconditioning
==========================
Skip/output/input scalings that turn a raw network core F into the
denoiser D_θ or the noiser N_φ:

    D(x, t) = c_skip(t)·x + c_out(t)·F(c_in(t)·x, c_noise(t))

Denoiser: EDM scalings shifted so that c_skip(t_min) = 1 and c_out(t_min) = 0,
so D(x, t_min) = x exactly.
Noiser:   c_skip = 1, c_out = t_max - t, so N(x, t_max) = x exactly, while
the effective regression target keeps unit variance.

Usage:
    denoiser = Denoiser(params, schedule_cfg)
    x0_hat = denoiser(x_t, t, classes, w)             # stop-gradient
    out, tape = denoiser.forward(x_t, t, classes, w)  # with tape
    grads, dx = denoiser.backward(tape, upstream)

Author: igct-lab Team
"""
import logging
import threading
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

import net
from config import ScheduleConfig
from net import ForwardTape, NetParams

logger = logging.getLogger("PRECONDITION")

Scalar = Union[float, np.ndarray]


@dataclass(frozen=True)
class PrecondCoeffs:
    c_skip: Scalar
    c_out: Scalar
    c_in: Scalar
    c_noise: Scalar


def _as_levels(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)


def _maybe_scalar(a: np.ndarray) -> Scalar:
    return float(a) if a.ndim == 0 else a


def denoiser_coeffs(t, sigma_data: float, t_min: float) -> PrecondCoeffs:
    """
    Consistency-model scalings for the denoiser.

    c_skip = σd² / ((t - t_min)² + σd²)
    c_out  = σd·(t - t_min) / √(σd² + t²)
    c_in   = 1 / √(t² + σd²)
    c_noise = ¼·ln t

    Raises:
        ValueError: any t < t_min
    """
    t = _as_levels(t)
    if np.any(t < t_min):
        raise ValueError(f"denoiser evaluated below t_min={t_min}")
    s2 = sigma_data * sigma_data
    shifted = t - t_min
    return PrecondCoeffs(
        c_skip=_maybe_scalar(s2 / (shifted * shifted + s2)),
        c_out=_maybe_scalar(sigma_data * shifted / np.sqrt(s2 + t * t)),
        c_in=_maybe_scalar(1.0 / np.sqrt(t * t + s2)),
        c_noise=_maybe_scalar(0.25 * np.log(t)),
    )


def noiser_coeffs(t, sigma_data: float, t_max: float) -> PrecondCoeffs:
    """
    Noiser scalings: c_skip = 1, c_out = t_max - t, c_in and c_noise as the denoiser.

    t = 0 is accepted (c_noise is then -inf); it is only meaningful for
    coefficient inspection, never for a network call.

    Raises:
        ValueError: any t > t_max or t < 0
    """
    t = _as_levels(t)
    if np.any(t > t_max):
        raise ValueError(f"noiser evaluated above t_max={t_max}")
    if np.any(t < 0):
        raise ValueError("noise level must be >= 0")
    with np.errstate(divide='ignore'):
        c_noise = 0.25 * np.log(t)
    return PrecondCoeffs(
        c_skip=_maybe_scalar(np.ones_like(t)),
        c_out=_maybe_scalar(t_max - t),
        c_in=_maybe_scalar(1.0 / np.sqrt(t * t + sigma_data * sigma_data)),
        c_noise=_maybe_scalar(c_noise),
    )


# ==================== ASSEMBLED NETWORKS ====================

@dataclass
class PrecondTape:
    net_tape: ForwardTape
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray


class PreconditionedNet:
    """
    A raw MLP core wrapped in its preconditioning.

    `calls` counts network evaluations (one per batched call), which is the
    NFE figure reported by the samplers. The count is kept under a lock since
    sweeps evaluate the same network from worker threads.
    """

    def __init__(self, params: NetParams, schedule: ScheduleConfig):
        self.params = params
        self.schedule = schedule
        self.calls = 0
        self._calls_lock = threading.Lock()

    def _count_call(self):
        with self._calls_lock:
            self.calls += 1

    def coeffs(self, t) -> PrecondCoeffs:
        raise NotImplementedError

    def _scalings(self, x: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[0]
        t = np.broadcast_to(_as_levels(t), (batch,))
        c = self.coeffs(t)
        col = lambda v: np.asarray(v, dtype=np.float64).reshape(batch, 1)
        return x, col(c.c_skip), col(c.c_out), col(c.c_in), np.asarray(c.c_noise).reshape(batch)

    def _guidance(self, w):
        return w if self.params.arch.with_guidance else None

    def __call__(self, x: np.ndarray, t, classes, w=None) -> np.ndarray:
        """Stop-gradient evaluation (frozen-target branch)."""
        x, c_skip, c_out, c_in, c_noise = self._scalings(x, t)
        self._count_call()
        core = net.eval_target(self.params, c_in * x, c_noise, classes, self._guidance(w))
        return c_skip * x + c_out * core

    def forward(self, x: np.ndarray, t, classes, w=None) -> Tuple[np.ndarray, PrecondTape]:
        x, c_skip, c_out, c_in, c_noise = self._scalings(x, t)
        self._count_call()
        core, net_tape = net.forward(self.params, c_in * x, c_noise, classes, self._guidance(w))
        return c_skip * x + c_out * core, PrecondTape(net_tape=net_tape, c_skip=c_skip, c_out=c_out, c_in=c_in)

    def backward(self, tape: PrecondTape, upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Returns:
            (parameter gradients, gradient w.r.t. the input x)
        """
        grads, d_core_in = net.backward(self.params, tape.net_tape, tape.c_out * upstream)
        return grads, tape.c_skip * upstream + tape.c_in * d_core_in


class Denoiser(PreconditionedNet):
    """D(x, t, c, w): maps a level-t point to its clean endpoint."""

    def coeffs(self, t) -> PrecondCoeffs:
        return denoiser_coeffs(t, self.schedule.sigma, self.schedule.t_min)


class Noiser(PreconditionedNet):
    """N(x, t, c): maps a level-t point to its t_max latent. Takes no guidance."""

    def coeffs(self, t) -> PrecondCoeffs:
        return noiser_coeffs(t, self.schedule.sigma, self.schedule.t_max)

    def __call__(self, x: np.ndarray, t, classes, w: Optional[float] = None) -> np.ndarray:
        return super().__call__(x, t, classes, None)

    def forward(self, x: np.ndarray, t, classes, w: Optional[float] = None):
        return super().forward(x, t, classes, None)
