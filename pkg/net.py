"""
igct-lab - Conditioned MLP
==========================
Small multilayer perceptrons used as the raw cores F_θ (denoiser) and F_φ
(noiser), with a hand-written forward/backward pass and an Adam optimizer.

Layout of one network:

    x_in ─────────────────────────────┐
    c_noise → sinusoid → time_proj ───┤
    class   → class_table[row] ───────┼─ concat → [Linear → SiLU] x L → out
    w       → sinusoid → guid_proj ───┘   (guidance branch: denoiser only)

The class table has n_classes + 1 rows; the last row is the null class ∅.
All arrays are float64.

Usage:
    params = init_params(rng, arch)
    out, tape = forward(params, x_in, c_noise, classes, w)
    grads, dx_in = backward(params, tape, upstream)
    params = optimizer_step(params, grads, opt)
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from config import NULL_CLASS, NetConfig, TrainConfig
from errors import DivergenceError

logger = logging.getLogger("NET")


# ==================== ARCHITECTURE ====================

@dataclass(frozen=True)
class NetArch:
    """Shape-defining settings of one network."""
    dims: int
    n_classes: int
    with_guidance: bool
    hidden_width: int = 128
    hidden_layers: int = 2
    time_features: int = 32
    class_features: int = 16
    guidance_features: int = 16
    time_scale: float = 10.0
    guidance_scale: float = 1.0
    max_period: float = 1000.0

    @classmethod
    def from_config(cls, dims: int, n_classes: int, with_guidance: bool, net_cfg: NetConfig) -> "NetArch":
        return cls(
            dims=dims,
            n_classes=n_classes,
            with_guidance=with_guidance,
            hidden_width=net_cfg.hidden_width,
            hidden_layers=net_cfg.hidden_layers,
            time_features=net_cfg.time_features,
            class_features=net_cfg.class_features,
            guidance_features=net_cfg.guidance_features,
            time_scale=net_cfg.time_scale,
            guidance_scale=net_cfg.guidance_scale,
            max_period=net_cfg.max_period,
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @property
    def input_width(self) -> int:
        width = self.dims + self.time_features + self.class_features
        if self.with_guidance:
            width += self.guidance_features
        return width

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter name -> shape, in canonical order."""
        shapes = {
            'time_proj.W': (self.time_features, self.time_features),
            'time_proj.b': (self.time_features,),
            'class_table': (self.n_classes + 1, self.class_features),
        }
        if self.with_guidance:
            shapes['guid_proj.W'] = (self.guidance_features, self.guidance_features)
            shapes['guid_proj.b'] = (self.guidance_features,)
        fan_in = self.input_width
        for i in range(self.hidden_layers):
            shapes[f'hidden_{i}.W'] = (fan_in, self.hidden_width)
            shapes[f'hidden_{i}.b'] = (self.hidden_width,)
            fan_in = self.hidden_width
        shapes['out.W'] = (fan_in, self.dims)
        shapes['out.b'] = (self.dims,)
        return shapes


@dataclass
class NetParams:
    """Named parameter arrays plus the architecture they realize."""
    arch: NetArch
    arrays: Dict[str, np.ndarray]

    def copy(self) -> "NetParams":
        return NetParams(arch=self.arch, arrays={k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> List[str]:
        return list(self.arch.shapes().keys())

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


@dataclass
class ForwardTape:
    """Activations recorded by forward(), enough for an exact backward()."""
    x_in: np.ndarray
    rows: np.ndarray
    time_feats: np.ndarray
    guid_feats: Optional[np.ndarray]
    layer_inputs: List[np.ndarray]
    pre_acts: List[np.ndarray]
    last_hidden: np.ndarray


def init_params(rng: np.random.Generator, arch: NetArch, zero_init_output: bool = True) -> NetParams:
    """
    Draw initial parameters.

    Weight matrices ~ N(0, 1/fan_in), biases 0, class table ~ N(0, 1).
    With zero_init_output the final layer starts at exactly zero so every
    preconditioned network begins as its skip path.
    """
    arrays = {}
    for name, shape in arch.shapes().items():
        if name == 'class_table':
            arrays[name] = rng.standard_normal(shape)
        elif name.endswith('.b'):
            arrays[name] = np.zeros(shape)
        elif name == 'out.W' and zero_init_output:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return NetParams(arch=arch, arrays=arrays)


# ==================== FEATURES ====================

def sinusoidal_features(values: np.ndarray, n_features: int, scale: float, max_period: float) -> np.ndarray:
    """[cos(scale·v·f_i), sin(scale·v·f_i)] with geometrically spaced f_i in (1/max_period, 1]."""
    half = n_features // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = scale * np.asarray(values, dtype=np.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def class_rows(classes, n_classes: int, batch: int) -> np.ndarray:
    """
    Map class ids (NULL_CLASS for ∅) to class-table rows.

    Raises:
        ValueError: id outside [0, n_classes) and not NULL_CLASS
    """
    ids = np.broadcast_to(np.asarray(classes, dtype=np.int64), (batch,))
    bad = (ids != NULL_CLASS) & ((ids < 0) | (ids >= n_classes))
    if np.any(bad):
        raise ValueError(f"class id {int(ids[bad][0])} out of range for {n_classes} classes")
    return np.where(ids == NULL_CLASS, n_classes, ids)


def _silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s + z * s * (1.0 - s)


# ==================== FORWARD / BACKWARD ====================

def forward(params: NetParams, x_in: np.ndarray, c_noise, classes, w=None,
            record: bool = True) -> Tuple[np.ndarray, Optional[ForwardTape]]:
    """
    Evaluate the raw network core.

    Args:
        params: Network parameters
        x_in: (B, dims) input, already scaled by c_in
        c_noise: scalar or (B,) time conditioning
        classes: scalar or (B,) class ids, NULL_CLASS for ∅
        w: scalar or (B,) guidance strength (required iff arch.with_guidance)
        record: keep the activation tape

    Returns:
        (out of shape (B, dims), tape or None)
    """
    arch = params.arch
    p = params.arrays
    x_in = np.asarray(x_in, dtype=np.float64)
    if x_in.ndim != 2 or x_in.shape[1] != arch.dims:
        raise ValueError(f"x_in must have shape (B, {arch.dims}), got {x_in.shape}")
    batch = x_in.shape[0]

    c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (batch,))
    rows = class_rows(classes, arch.n_classes, batch)

    time_feats = sinusoidal_features(c_noise, arch.time_features, arch.time_scale, arch.max_period)
    parts = [x_in, time_feats @ p['time_proj.W'] + p['time_proj.b'], p['class_table'][rows]]

    guid_feats = None
    if arch.with_guidance:
        if w is None:
            raise ValueError("guidance-conditioned network needs w")
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), (batch,))
        guid_feats = sinusoidal_features(w, arch.guidance_features, arch.guidance_scale, arch.max_period)
        parts.append(guid_feats @ p['guid_proj.W'] + p['guid_proj.b'])

    h = np.concatenate(parts, axis=1)
    layer_inputs, pre_acts = [], []
    for i in range(arch.hidden_layers):
        z = h @ p[f'hidden_{i}.W'] + p[f'hidden_{i}.b']
        layer_inputs.append(h)
        pre_acts.append(z)
        h = _silu(z)
    out = h @ p['out.W'] + p['out.b']

    if not record:
        return out, None
    tape = ForwardTape(
        x_in=x_in,
        rows=rows,
        time_feats=time_feats,
        guid_feats=guid_feats,
        layer_inputs=layer_inputs,
        pre_acts=pre_acts,
        last_hidden=h,
    )
    return out, tape


def backward(params: NetParams, tape: ForwardTape, upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Reverse-mode pass for a scalar loss whose gradient w.r.t. out is `upstream`.

    Returns:
        (parameter gradients keyed like params.arrays, gradient w.r.t. x_in)
    """
    arch = params.arch
    p = params.arrays
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (tape.x_in.shape[0], arch.dims):
        raise ValueError(f"upstream shape {upstream.shape} does not match output {(tape.x_in.shape[0], arch.dims)}")

    grads: Dict[str, np.ndarray] = {}
    grads['out.W'] = tape.last_hidden.T @ upstream
    grads['out.b'] = upstream.sum(axis=0)
    dh = upstream @ p['out.W'].T

    for i in reversed(range(arch.hidden_layers)):
        dz = dh * _silu_grad(tape.pre_acts[i])
        grads[f'hidden_{i}.W'] = tape.layer_inputs[i].T @ dz
        grads[f'hidden_{i}.b'] = dz.sum(axis=0)
        dh = dz @ p[f'hidden_{i}.W'].T

    # split the concatenated input gradient back into its parts
    d = arch.dims
    dx_in = dh[:, :d]
    d_time = dh[:, d:d + arch.time_features]
    offset = d + arch.time_features
    d_class = dh[:, offset:offset + arch.class_features]
    offset += arch.class_features

    grads['time_proj.W'] = tape.time_feats.T @ d_time
    grads['time_proj.b'] = d_time.sum(axis=0)

    table_grad = np.zeros_like(p['class_table'])
    np.add.at(table_grad, tape.rows, d_class)
    grads['class_table'] = table_grad

    if arch.with_guidance:
        d_guid = dh[:, offset:offset + arch.guidance_features]
        grads['guid_proj.W'] = tape.guid_feats.T @ d_guid
        grads['guid_proj.b'] = d_guid.sum(axis=0)

    return {name: grads[name] for name in p}, dx_in


def eval_target(params: NetParams, x_in: np.ndarray, c_noise, classes, w=None) -> np.ndarray:
    """Stop-gradient evaluation with the current weights: same output as forward(), no tape."""
    out, _ = forward(params, x_in, c_noise, classes, w, record=False)
    return out


# ==================== GRADIENT HELPERS ====================

def zero_grads(params: NetParams) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in params.arrays.items()}


def add_grads(total: Dict[str, np.ndarray], extra: Dict[str, np.ndarray], scale: float = 1.0) -> Dict[str, np.ndarray]:
    """total + scale·extra, key by key (new dict)."""
    return {name: total[name] + scale * extra[name] for name in total}


def grads_finite(grads: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


# ==================== OPTIMIZER ====================

@dataclass
class OptState:
    """Adam moments mirroring NetParams."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def clone(self) -> "OptState":
        return OptState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )


def init_opt_state(params: NetParams, train_cfg: Optional[TrainConfig] = None, **overrides) -> OptState:
    settings = {}
    if train_cfg is not None:
        settings = dict(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    settings.update(overrides)
    return OptState(m=zero_grads(params), v=zero_grads(params), **settings)


def optimizer_step(params: NetParams, grads: Dict[str, np.ndarray], opt: OptState) -> NetParams:
    """
    One Adam update. Mutates `opt` (moments and step) and returns new params.

    Raises:
        DivergenceError: any gradient entry is non-finite (opt left untouched)
    """
    if set(grads) != set(params.arrays):
        raise ValueError("gradient keys do not match parameters")
    if not grads_finite(grads):
        bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
        raise DivergenceError(f"non-finite gradient in {bad[0]}", details={"parameters": bad, "step": opt.step})

    opt.step += 1
    bias1 = 1.0 - opt.beta1 ** opt.step
    bias2 = 1.0 - opt.beta2 ** opt.step
    new_arrays = {}
    for name, value in params.arrays.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {value.shape}")
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / bias1
        v_hat = opt.v[name] / bias2
        new_arrays[name] = value - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return NetParams(arch=params.arch, arrays=new_arrays)
