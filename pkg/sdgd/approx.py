"""
Fully connected networks with exact reverse-mode gradients and Adam.

Parameter layout (flat float64 vector, stable across versions): for each
layer in order, the weight matrix W of shape (fan_in, fan_out) in row-major
order followed by its bias of length fan_out. Hidden layers use SiLU, the
output layer is linear.
"""
import json
import logging
from pathlib import Path
from typing import Callable, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.special import expit

from .exceptions import DatasetFormatError, ShapeError
from .fileformat import encode_header, read_header

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b'SDGDNN01'


class NetSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: int
    output_dim: int
    hidden: Tuple[int, ...] = (256, 256, 256)
    activation: Literal['silu'] = 'silu'

    @field_validator('input_dim', 'output_dim')
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError('must be a positive integer')
        return value

    @field_validator('hidden')
    @classmethod
    def _widths(cls, value):
        if len(value) < 1 or any(w < 1 for w in value):
            raise ValueError('needs at least one hidden layer with positive width')
        return tuple(value)

    @property
    def layer_sizes(self) -> List[Tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_sizes)


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    sig = expit(z)
    return sig * (1.0 + z * (1.0 - sig))


def unpack(spec: NetSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into the flat parameter vector."""
    if params.shape != (spec.n_params,):
        raise ShapeError(f"Expected {spec.n_params} parameters, got shape {params.shape}")
    layers, offset = [], 0
    for fan_in, fan_out in spec.layer_sizes:
        W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def init(spec: NetSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for W, _ in unpack(spec, params):
        fan_in, fan_out = W.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


def _as_batch(spec: NetSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"Network expects input dim {spec.input_dim}, got {x.shape[1]}")
    return x, single


def _forward_cache(spec: NetSpec, params: np.ndarray, x: np.ndarray):
    layers = unpack(spec, params)
    activations, pre = [x], []
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            pre.append(z)
            h = _silu(z)
            activations.append(h)
        else:
            h = z
    return h, activations, pre, layers


def forward(spec: NetSpec, params: np.ndarray, x) -> np.ndarray:
    x, single = _as_batch(spec, x)
    out = _forward_cache(spec, params, x)[0]
    return out[0] if single else out


def grad(spec: NetSpec, params: np.ndarray, x, upstream) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of sum_b <upstream_b, forward(x_b)> with respect to the
    parameters (summed over the batch) and to each input row.
    """
    x, single = _as_batch(spec, x)
    upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
    if upstream.shape != (x.shape[0], spec.output_dim):
        raise ShapeError(f"Upstream shape {upstream.shape} does not match ({x.shape[0]}, {spec.output_dim})")
    _, activations, pre, layers = _forward_cache(spec, params, x)

    param_grads = np.zeros_like(params)
    grad_layers = unpack(spec, param_grads)
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = grad_layers[i]
        gW[...] = activations[i].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ W.T
        if i > 0:
            delta = delta * _silu_grad(pre[i - 1])
    return param_grads, (delta[0] if single else delta)


class AdamState:
    """Adam moments and step counter; `step` mutates this state."""

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params: np.ndarray, param_grads: np.ndarray) -> np.ndarray:
        if param_grads.shape != self.m.shape or params.shape != self.m.shape:
            raise ShapeError(f"Adam state holds {len(self.m)} moments, got params {params.shape} "
                             f"and grads {param_grads.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * param_grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * param_grads ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: np.ndarray, state: AdamState, param_grads: np.ndarray) -> np.ndarray:
    return state.step(params, param_grads)


class Network:
    """A NetSpec together with its parameter vector."""

    def __init__(self, spec: NetSpec, params: Optional[np.ndarray] = None, seed: int = 0):
        self.spec = spec
        self.params = init(spec, seed) if params is None else np.asarray(params, dtype=float)
        if self.params.shape != (spec.n_params,):
            raise ShapeError(f"Expected {spec.n_params} parameters, got shape {self.params.shape}")

    def forward(self, x):
        return forward(self.spec, self.params, x)

    def grad(self, x, upstream):
        return grad(self.spec, self.params, x, upstream)

    def save(self, path, sidecar: Optional[dict] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {'input_dim': self.spec.input_dim, 'output_dim': self.spec.output_dim,
                  'hidden': list(self.spec.hidden), 'activation': self.spec.activation}
        with open(path, 'wb') as fh:
            fh.write(encode_header(PARAMS_MAGIC, header))
            fh.write(self.params.astype('<f4').tobytes())
        if sidecar is not None:
            sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        logger.info(f"✓ Saved network ({self.spec.n_params} params) to {path}")
        return path

    @classmethod
    def load(cls, path) -> 'Network':
        raw = Path(path).read_bytes()
        header, offset = read_header(raw, PARAMS_MAGIC)
        try:
            spec = NetSpec(**header)
        except ValueError as e:
            raise DatasetFormatError(f"Invalid network header in {path}: {e}")
        payload = raw[offset:]
        if len(payload) != 4 * spec.n_params:
            raise DatasetFormatError(f"Network payload has {len(payload)} bytes, expected {4 * spec.n_params}")
        return cls(spec, np.frombuffer(payload, dtype='<f4').astype(np.float64))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.json')


def read_sidecar(path) -> dict:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise DatasetFormatError(f"Missing sidecar {sidecar}")
    return json.loads(sidecar.read_text(encoding='utf-8'))


def finite_difference(func: Callable[[np.ndarray], float], x0, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    gradient = np.zeros_like(x0)
    for j in np.ndindex(x0.shape):
        x = x0.copy()
        x[j] = x0[j] + eps
        f_plus = func(x)
        x[j] = x0[j] - eps
        f_minus = func(x)
        gradient[j] = (f_plus - f_minus) / (2 * eps)
    return gradient


def relative_error(analytic, numeric) -> float:
    """Max elementwise |a - n| / max(1, |a|)."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))
