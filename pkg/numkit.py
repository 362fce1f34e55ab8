"""Dense-numerics substrate.

Everything here is float64 numpy: a small ReLU multi-layer perceptron with
explicit forward/backward passes, SGD with momentum, a counter-based seeded
random stream, and a central finite-difference gradient checker used as the
oracle for every hand-written gradient in the repository.

Batched inputs are supported throughout: ``x`` may be a single vector of
width ``d_in`` or a matrix with one sample per row.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import expit
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from logger import log_path, setup_logger

numkit_logger = setup_logger('numkit', log_path('numkit'))

ACTIVATION = 'relu'
DEFAULT_HIDDEN = (64,)


class NumericError(ValueError):
    """A non-finite value reached an operation that requires finite input."""


class ShapeError(ValueError):
    """Array widths do not chain."""


def _require_finite(values, what):
    if not np.all(np.isfinite(values)):
        numkit_logger.error(f'Non-finite values in {what}')
        raise NumericError(f'non-finite values in {what}')


def softmax(logits):
    """Softmax over the last axis, max-shifted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    _require_finite(logits, 'softmax logits')
    return _softmax(logits, axis=-1)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    _require_finite(logits, 'log_softmax logits')
    return _log_softmax(logits, axis=-1)


def sigmoid(logit):
    return expit(np.float64(logit)) if np.ndim(logit) == 0 else expit(np.asarray(logit, dtype=np.float64))


def relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray  # [out x in]
    bias: np.ndarray     # [out]

    @property
    def in_width(self):
        return self.weights.shape[1]

    @property
    def out_width(self):
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class MlpParams:
    layers: tuple
    activation: str = ACTIVATION

    def __post_init__(self):
        if not self.layers:
            raise ShapeError('an MLP needs at least one layer')
        if self.activation != ACTIVATION:
            raise ValueError(f'unsupported hidden activation {self.activation!r}')
        for k, layer in enumerate(self.layers):
            if layer.weights.ndim != 2 or layer.bias.shape != (layer.out_width,):
                raise ShapeError(f'layer {k}: weights {layer.weights.shape} and bias {layer.bias.shape} disagree')
            if k and self.layers[k - 1].out_width != layer.in_width:
                raise ShapeError(
                    f'layer {k - 1} emits {self.layers[k - 1].out_width} values but layer {k} expects {layer.in_width}'
                )

    @property
    def d_in(self):
        return self.layers[0].in_width

    @property
    def d_out(self):
        return self.layers[-1].out_width

    @property
    def hidden_widths(self):
        return tuple(layer.out_width for layer in self.layers[:-1])

    @property
    def size(self):
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)


def init_mlp(d_in, d_out, rng, hidden=DEFAULT_HIDDEN):
    """He-normal weights (std sqrt(2/in)), zero biases."""
    widths = [d_in, *hidden, d_out]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(Layer(weights, np.zeros(fan_out)))
    return MlpParams(tuple(layers))


def linear_params(weights, bias):
    """Single-layer (no hidden) network computing W x + b."""
    return MlpParams((Layer(np.asarray(weights, dtype=np.float64), np.asarray(bias, dtype=np.float64)),))


def _as_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.d_in,):
        raise ShapeError(f'expected input width {params.d_in}, got shape {x.shape}')
    return x


def _trace(params, x):
    """Forward pass keeping each layer's input and pre-activation."""
    inputs, pre = [], []
    h = x
    for k, layer in enumerate(params.layers):
        inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        h = relu(z) if k < len(params.layers) - 1 else z
    return inputs, pre, h


def mlp_forward(params, x):
    """Logits of the network at ``x`` (vector or row-batch)."""
    x = _as_input(params, x)
    return _trace(params, x)[2]


def backprop(params, x, upstream_grad):
    """Reverse-mode gradients of ``sum(logits * upstream_grad)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is an
    ``MlpParams`` laid out like ``params``. For a row-batch the parameter
    gradient is summed over rows.
    """
    x = _as_input(params, x)
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != x.shape[:-1] + (params.d_out,):
        raise ShapeError(f'upstream gradient shape {upstream.shape} does not match logits')
    inputs, pre, _ = _trace(params, x)
    batched = x.ndim == 2
    grads = [None] * len(params.layers)
    delta = upstream
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        h_in = inputs[k]
        if batched:
            grads[k] = Layer(delta.T @ h_in, delta.sum(axis=0))
        else:
            grads[k] = Layer(np.outer(delta, h_in), delta.copy())
        delta = delta @ layer.weights
        if k > 0:
            delta = delta * (pre[k - 1] > 0.0)
    return MlpParams(tuple(grads), params.activation), delta


ParamLike = Union[MlpParams, float, np.ndarray]


def params_to_vector(params):
    if isinstance(params, MlpParams):
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in params.layers])
    return np.array(params, dtype=np.float64).reshape(-1)


def vector_to_params(vector, like):
    vector = np.asarray(vector, dtype=np.float64)
    if isinstance(like, MlpParams):
        if vector.size != like.size:
            raise ShapeError(f'vector of {vector.size} entries cannot fill {like.size} parameters')
        layers, pos = [], 0
        for layer in like.layers:
            w = vector[pos:pos + layer.weights.size].reshape(layer.weights.shape)
            pos += layer.weights.size
            b = vector[pos:pos + layer.bias.size].copy()
            pos += layer.bias.size
            layers.append(Layer(w.copy(), b))
        return MlpParams(tuple(layers), like.activation)
    if np.ndim(like) == 0:
        return float(vector.reshape(-1)[0])
    return vector.reshape(np.shape(like)).copy()


def zeros_like(params):
    return vector_to_params(np.zeros_like(params_to_vector(params)), params)


def scale(params, alpha):
    return vector_to_params(alpha * params_to_vector(params), params)


def add_scaled(x, y, alpha=1.0):
    """``x + alpha * y`` for two parameters of the same layout."""
    return vector_to_params(params_to_vector(x) + alpha * params_to_vector(y), x)


@dataclass(frozen=True, eq=False)
class OptState:
    velocity: ParamLike
    lr: float
    momentum: float = 0.9

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f'learning rate must be non-negative, got {self.lr}')
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f'momentum must lie in [0, 1), got {self.momentum}')

    @classmethod
    def for_params(cls, params, lr, momentum=0.9):
        return cls(zeros_like(params), lr, momentum)


def sgd_momentum_step(params, grads, state):
    """One descent step: v <- m*v + g ; p <- p - lr*v.

    Ascent objectives pass their negated gradient.
    """
    g = params_to_vector(grads)
    _require_finite(g, 'optimizer gradient')
    p = params_to_vector(params)
    if g.shape != p.shape:
        raise ShapeError(f'gradient of {g.size} entries for {p.size} parameters')
    v = state.momentum * params_to_vector(state.velocity) + g
    new_params = vector_to_params(p - state.lr * v, params)
    return new_params, replace(state, velocity=vector_to_params(v, params))


def finite_diff_grad(objective: Callable[[ParamLike], float], params, h=1e-5):
    """Central differences (f(p+h e_j) - f(p-h e_j)) / 2h per coordinate."""
    if not h > 0:
        raise ValueError(f'step h must be positive, got {h}')
    p0 = params_to_vector(params)
    grad = np.empty_like(p0)
    for j in range(p0.size):
        p = p0.copy()
        p[j] = p0[j] + h
        f_plus = objective(vector_to_params(p, params))
        p[j] = p0[j] - h
        f_minus = objective(vector_to_params(p, params))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f'objective is not finite around coordinate {j}')
        grad[j] = (f_plus - f_minus) / (2.0 * h)
    return vector_to_params(grad, params)


def relative_error(analytic, numeric, floor=1e-8):
    """||a - n|| / max(||a||, ||n||, floor) over the flattened parameters."""
    a = params_to_vector(analytic)
    n = params_to_vector(numeric)
    scale_ = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale_)


_MASK64 = (1 << 64) - 1


def _label_key(label):
    return zlib.crc32(str(label).encode('utf-8'))


class Rng:
    """Counter-based (Philox) random stream.

    ``Rng(seed).child('shuffle')`` derives an independent stream whose
    identity depends only on the seed and the label path, so purposes never
    interfere with each other's draws.
    """

    def __init__(self, seed, path: Sequence[str] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, label):
        return Rng(self.seed, self.path + (label,))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def categorical(self, probs):
        """One draw per row of ``probs`` by inverse CDF."""
        probs = np.atleast_2d(probs)
        u = self.generator.random(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        draws = (cdf < u[:, None]).sum(axis=1)
        return np.minimum(draws, probs.shape[1] - 1)

    def __repr__(self):
        return f'Rng(seed={self.seed}, path={self.path})'
