"""
igct-lab - Evaluation Metrics
=============================
Low-dimensional stand-ins for the image metrics:

- wasserstein1:          exact 1D W1, sliced W1 in higher dimensions
- knn_precision_recall:  k-NN manifold precision / recall
- overshoot_fraction:    mass outside every mode's band (guidance overshoot)
- reconstruction_mae:    noiser → denoiser round-trip error
- latent_statistics:     how Gaussian the noiser's latents look
- edit_preservation:     rank correlation of within-mode offsets across an edit

All metrics are permutation-invariant in their sample arguments.

Author: igct-lab Team
"""
import asyncio
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr, wasserstein_distance
from sklearn.metrics import pairwise_distances_chunked
from sklearn.neighbors import NearestNeighbors

from oracle import MixtureWorld

logger = logging.getLogger("METRICS")

EVAL_COLUMNS = [
    'run_id', 'method', 'w', 'nfe', 'w1', 'precision', 'recall', 'overshoot_fraction',
    'recon_mae', 'latent_mean_norm', 'latent_std_ratio', 'n_samples',
]


@dataclass
class EvalReport:
    """One evaluated condition (method, w, nfe)."""
    method: str
    w: float
    nfe: int
    w1: float
    precision: float
    recall: float
    overshoot_fraction: float
    n_samples: int
    run_id: str = "run"
    recon_mae: Optional[float] = None
    latent_mean_norm: Optional[float] = None
    latent_std_ratio: Optional[float] = None

    def __post_init__(self):
        for name in ('precision', 'recall', 'overshoot_fraction'):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be > 0")

    @property
    def key(self) -> Tuple[str, str, float, int]:
        return (self.run_id, self.method, float(self.w), int(self.nfe))

    def to_dict(self) -> Dict:
        return asdict(self)


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise ValueError("empty sample set")
    return a


def _canonical_order(points: np.ndarray, *extra_keys) -> np.ndarray:
    """Row order sorting by the first coordinate, then the next, then extra_keys."""
    return np.lexsort(tuple(extra_keys[::-1]) + tuple(points.T[::-1]))


def _canonical(points: np.ndarray) -> np.ndarray:
    # reductions and BLAS products then see the same bits whatever the input order
    return points[_canonical_order(points)]


# ==================== DISTANCES ====================

def projection_directions(dims: int, n_projections: int, seed: int = 0) -> np.ndarray:
    """Fixed unit directions for sliced W1 (same seed → same slices)."""
    dirs = np.random.default_rng(seed).standard_normal((n_projections, dims))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def wasserstein1(samples, reference, n_projections: int = 128, seed: int = 0) -> float:
    """
    1-Wasserstein distance between two empirical sets.

    Args:
        samples, reference: (N, d) or (N,) arrays, sizes may differ
        n_projections: slice count when d > 1

    Raises:
        ValueError: empty input or dimension mismatch
    """
    a = _canonical(_as_points(samples))
    b = _canonical(_as_points(reference))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample and reference dimensions differ")
    if a.shape[1] == 1:
        return float(wasserstein_distance(a[:, 0], b[:, 0]))
    dirs = projection_directions(a.shape[1], n_projections, seed)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_distance(pa[:, j], pb[:, j]) for j in range(len(dirs))]))


def knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point, floored at machine epsilon."""
    nn = NearestNeighbors(n_neighbors=k + 1).fit(points)
    distances, _ = nn.kneighbors(points)
    radii = distances[:, k]
    eps = np.finfo(np.float64).eps
    degenerate = int(np.sum(radii < eps))
    if degenerate:
        logger.warning(f"⚠️ {degenerate} zero k-NN radii (duplicated points); floored at {eps:.3g}")
        radii = np.maximum(radii, eps)
    return radii


def _coverage(queries: np.ndarray, support: np.ndarray, radii: np.ndarray) -> float:
    """Fraction of queries within radii[j] of some support point j."""
    hits = []
    for chunk in pairwise_distances_chunked(queries, support,
                                            reduce_func=lambda d, start: (d <= radii[None, :]).any(axis=1)):
        hits.append(chunk)
    return float(np.mean(np.concatenate(hits)))


def knn_precision_recall(gen, real, k: int = 5) -> Tuple[float, float]:
    """
    Manifold precision and recall.

    precision: share of generated points inside some real point's k-NN ball
    recall:    share of real points inside some generated point's k-NN ball

    Raises:
        ValueError: empty sets or k not smaller than both set sizes
    """
    gen = _canonical(_as_points(gen))
    real = _canonical(_as_points(real))
    if k < 1 or k >= len(gen) or k >= len(real):
        raise ValueError(f"k={k} must satisfy 1 <= k < min({len(gen)}, {len(real)})")
    precision = _coverage(gen, real, knn_radii(real, k))
    recall = _coverage(real, gen, knn_radii(gen, k))
    return precision, recall


# ==================== MODE STATISTICS ====================

def overshoot_fraction(samples, world: MixtureWorld, band_sigmas: float = 3.0) -> float:
    """Fraction of samples farther than band_sigmas·σ_k from every component mean μ_k."""
    x = _as_points(samples)
    dist = np.linalg.norm(x[:, None, :] - world.means[None, :, :], axis=2)   # (N, K)
    outside = dist > band_sigmas * world.stds[None, :]
    return float(np.mean(outside.all(axis=1)))


def class_means(samples, classes, world: MixtureWorld) -> Dict[int, np.ndarray]:
    """Per-class sample means for the classes present."""
    x = _as_points(samples)
    classes = np.asarray(classes)
    return {int(c): _canonical(x[classes == c]).mean(axis=0) for c in np.unique(classes)}


def within_mode_offsets(x, classes, world: MixtureWorld) -> np.ndarray:
    """x minus the nearest component mean of its class."""
    x = _as_points(x)
    classes = np.asarray(classes)
    offsets = np.empty_like(x)
    for c in np.unique(classes):
        rows = classes == c
        means = world.means[world.class_ids == c]
        dist = np.linalg.norm(x[rows][:, None, :] - means[None, :, :], axis=2)
        offsets[rows] = x[rows] - means[np.argmin(dist, axis=1)]
    return offsets


def edit_preservation(x_src, c_src, x_edit, c_tar, world: MixtureWorld) -> float:
    """Spearman correlation of within-mode offsets before and after an edit, averaged over dims."""
    src = within_mode_offsets(x_src, c_src, world)
    dst = within_mode_offsets(x_edit, c_tar, world)
    order = _canonical_order(np.concatenate([src, dst], axis=1))
    src, dst = src[order], dst[order]
    rhos = []
    for j in range(src.shape[1]):
        rho, _ = spearmanr(src[:, j], dst[:, j])
        rhos.append(rho)
    return float(np.mean(rhos))


# ==================== INVERSION ====================

def reconstruction_mae(denoiser, noiser, x, classes, schedule) -> float:
    """mean ‖D(N(x, t_min, c), t_max, c, w_min) − x‖."""
    x = _as_points(x)
    classes = np.broadcast_to(np.asarray(classes), (x.shape[0],))
    order = _canonical_order(x, classes)
    x, classes = x[order], classes[order]
    latent = noiser(x, schedule.t_min, classes)
    recon = denoiser(latent, schedule.t_max, classes, schedule.w_min)
    return float(np.mean(np.linalg.norm(recon - x, axis=1)))


def latent_statistics(latents, t_max: float) -> Dict[str, float]:
    """‖mean‖ of the latents and their pooled std relative to t_max."""
    z = _canonical(_as_points(latents))
    return {
        'latent_mean_norm': float(np.linalg.norm(z.mean(axis=0))),
        'latent_std_ratio': float(z.std() / t_max),
    }


# ==================== REPORTS ====================

def evaluate_samples(samples, reference, world: MixtureWorld, eval_cfg, method: str, w: float, nfe: int,
                     run_id: str = "run", **extra) -> EvalReport:
    """Score one sample set against a reference draw from the world."""
    precision, recall = knn_precision_recall(samples, reference, eval_cfg.knn_k)
    return EvalReport(
        run_id=run_id,
        method=method,
        w=float(w),
        nfe=int(nfe),
        w1=wasserstein1(samples, reference, eval_cfg.sliced_projections),
        precision=precision,
        recall=recall,
        overshoot_fraction=overshoot_fraction(samples, world, eval_cfg.band_sigmas),
        n_samples=len(samples),
        **extra,
    )


async def sweep_reports(w_values: Sequence[float], evaluate_one: Callable[[float], EvalReport]) -> List[EvalReport]:
    """
    Evaluate every w on a worker thread and gather.

    Results come back ordered by w regardless of completion order.
    """
    ordered = sorted(float(w) for w in w_values)
    tasks = [asyncio.to_thread(evaluate_one, w) for w in ordered]
    reports = await asyncio.gather(*tasks)
    for report in reports:
        logger.info(f"📊 {report.method} w={report.w:g} nfe={report.nfe}: W1={report.w1:.4f} "
                    f"P={report.precision:.3f} R={report.recall:.3f} overshoot={report.overshoot_fraction:.4f}")
    return list(reports)
