"""Probabilistic graphical model of noisy-label generation.

A clean label is drawn from the clean classifier, ``y ~ Cat(f_y(x))``, and
the observed label from ``Cat(eps * f_yhat(x, y) + (1 - eps) * y)``. The
noisy head sees the concatenation of ``x`` and the one-hot clean label. An
amortized posterior ``q(y | x, yhat; rho)`` approximates ``p(y | x, yhat)``.

Inside the model the noisy head's softmax runs over the classes other than
``y``, so ``P(yhat != y | x, y) = eps`` and the head cannot soak up noise
that belongs to ``eps``. ``noisy_head_prob`` and ``noisy_mixture`` also
evaluate the unmasked head (``mask_clean=False``, their default).

Expectations over the latent clean label are exact C-term sums. Functions
taking ``yhat`` as integer labels accept a single sample (vector ``x``,
scalar label) or a row-batch; batch inputs return one value per row.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import entr, log_expit, logsumexp
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from logger import log_path, setup_logger
from numkit import (DEFAULT_HIDDEN, Layer, MlpParams, NumericError, backprop, init_mlp, log_softmax, mlp_forward,
                    sigmoid, softmax)

model_logger = setup_logger('model', log_path('model'))

CHECKPOINT_MAGIC = b'NLGM'
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f'{message} (byte offset {offset})')
        self.offset = offset


@dataclass(frozen=True, eq=False)
class GraphicalModel:
    theta_y: MlpParams      # x -> clean-label logits
    theta_yhat: MlpParams   # (x, one-hot y) -> noisy-label logits
    eps_logit: float
    rho: MlpParams          # (x, one-hot yhat) -> posterior logits

    def __post_init__(self):
        d, c = self.theta_y.d_in, self.theta_y.d_out
        for name in ('theta_yhat', 'rho'):
            net = getattr(self, name)
            if net.d_in != d + c or net.d_out != c:
                raise ValueError(f'{name} maps {net.d_in} -> {net.d_out}, expected {d + c} -> {c}')
        object.__setattr__(self, 'eps_logit', float(self.eps_logit))

    @property
    def d(self):
        return self.theta_y.d_in

    @property
    def num_classes(self):
        return self.theta_y.d_out

    @property
    def eps(self):
        return float(sigmoid(self.eps_logit))


def init_model(d, num_classes, rng, hidden=DEFAULT_HIDDEN):
    theta_y = init_mlp(d, num_classes, rng, hidden)
    theta_yhat = init_mlp(d + num_classes, num_classes, rng, hidden)
    eps_logit = float(rng.uniform(-1.0, 1.0))
    rho = init_mlp(d + num_classes, num_classes, rng, hidden)
    model_logger.info(f'Initialised model d={d}, C={num_classes}, hidden={hidden}, eps={sigmoid(eps_logit):.4f}')
    return GraphicalModel(theta_y, theta_yhat, eps_logit, rho)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(num_classes)[labels]


def _check_one_hot(y, what):
    y = np.asarray(y, dtype=np.float64)
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)):
        raise ValueError(f'{what} must be one-hot')
    return y


def clean_prob(theta_y, x):
    return softmax(mlp_forward(theta_y, x))


def _head_log_softmax(logits, clean):
    """Log-softmax of noisy-head logits with the ``clean`` entries excluded (ln 0 there)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        model_logger.error('Non-finite noisy-head logits')
        raise NumericError('non-finite noisy-head logits')
    return _log_softmax(np.where(clean, -np.inf, logits), axis=-1)


def noisy_head_prob(theta_yhat, x, y, mask_clean=False):
    y = _check_one_hot(y, 'clean label y')
    logits = mlp_forward(theta_yhat, np.concatenate([np.asarray(x, dtype=np.float64), y], axis=-1))
    if not mask_clean:
        return softmax(logits)
    return np.exp(_head_log_softmax(logits, y == 1.0))


def noisy_mixture(theta_yhat, eps, x, y, mask_clean=False):
    """eps * softmax(f_yhat(x, y)) + (1 - eps) * y."""
    y = _check_one_hot(y, 'clean label y')
    return eps * noisy_head_prob(theta_yhat, x, y, mask_clean) + (1.0 - eps) * y


def posterior_q(rho, x, yhat):
    yhat = _check_one_hot(yhat, 'noisy label yhat')
    return softmax(mlp_forward(rho, np.concatenate([np.asarray(x, dtype=np.float64), yhat], axis=-1)))


def _batch(x, yhat):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    yhat = np.atleast_1d(np.asarray(yhat, dtype=np.int64))
    if yhat.shape != (x.shape[0],):
        raise ValueError(f'{yhat.shape[0]} labels for {x.shape[0]} samples')
    return x, yhat, single


def _candidate_inputs(x, num_classes):
    """Rows (x_b, e_c) for every sample b and candidate clean label c, b-major."""
    b = x.shape[0]
    return np.concatenate([np.repeat(x, num_classes, axis=0), np.tile(np.eye(num_classes), (b, 1))], axis=1)


def _log_head(model, x):
    c = model.num_classes
    head_logits = mlp_forward(model.theta_yhat, _candidate_inputs(x, c)).reshape(x.shape[0], c, c)
    return _head_log_softmax(head_logits, np.eye(c, dtype=bool))


def head_probs(model, x):
    """h[b, c, :] = noisy-head distribution at (x_b, e_c); h[b, c, c] = 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.exp(_log_head(model, x))


def _joint(model, x, yhat):
    """Log-space pieces of ln p(y=c | x) + ln p(yhat | x, y=c) for every candidate c."""
    c = model.num_classes
    b = x.shape[0]
    log_h = _log_head(model, x)
    log_h_obs = log_h[np.arange(b), :, yhat]                    # [B x C]: ln h_c[yhat]
    log_eps, log_1m_eps = log_expit(model.eps_logit), log_expit(-model.eps_logit)
    is_obs = np.arange(c)[None, :] == yhat[:, None]
    log_a = np.where(is_obs, log_1m_eps, log_eps + log_h_obs)
    log_p = log_softmax(mlp_forward(model.theta_y, x))
    return {'log_p': log_p, 'log_h': log_h, 'log_h_obs': log_h_obs, 'log_a': log_a, 'is_obs': is_obs}


def log_mixture_at(model, x, yhat):
    """ln p(yhat | x, y=c; theta_yhat, eps) for every candidate c."""
    x, yhat, single = _batch(x, yhat)
    log_a = _joint(model, x, yhat)['log_a']
    return log_a[0] if single else log_a


def exact_posterior(model, x, yhat):
    """p(y=c | x, yhat) by enumeration over c."""
    x, yhat, single = _batch(x, yhat)
    parts = _joint(model, x, yhat)
    log_joint = parts['log_p'] + parts['log_a']
    if not np.all(np.isfinite(logsumexp(log_joint, axis=1))):
        raise NumericError('posterior normaliser is zero or non-finite')
    post = _softmax(log_joint, axis=1)
    return post[0] if single else post


def marginal_loglik(model, x, yhat):
    """ln sum_c p(y=c | x) p(yhat | x, y=c)."""
    x, yhat, single = _batch(x, yhat)
    parts = _joint(model, x, yhat)
    ll = logsumexp(parts['log_p'] + parts['log_a'], axis=1)
    return float(ll[0]) if single else ll


def elbo(model, x, yhat, q=None):
    """sum_c q(c) [ln p(y=c|x) + ln p(yhat|x, y=c)] + H(q).

    ``q`` defaults to the amortized posterior; pass an explicit [B x C]
    (or [C]) distribution to evaluate the bound at another q.
    """
    x, yhat, single = _batch(x, yhat)
    parts = _joint(model, x, yhat)
    if q is None:
        q = posterior_q(model.rho, x, one_hot(yhat, model.num_classes))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    r = parts['log_p'] + parts['log_a']
    # q(c) = 0 contributes nothing even where r is very negative
    values = np.where(q > 0.0, q * r, 0.0).sum(axis=1) + entr(q).sum(axis=1)
    return float(values[0]) if single else values


@dataclass(frozen=True, eq=False)
class ElboGrads:
    """Gradients of the batch-mean ELBO (ascent direction). Unrequested blocks are None."""
    theta_y: MlpParams = None
    theta_yhat: MlpParams = None
    eps_logit: float = None
    rho: MlpParams = None


ALL_BLOCKS = ('theta_y', 'theta_yhat', 'eps_logit', 'rho')


def _finite(values, term):
    if not np.all(np.isfinite(values)):
        model_logger.error(f'Non-finite intermediate in ELBO term {term!r}')
        raise NumericError(f'non-finite intermediate in ELBO term {term!r}')
    return values


def elbo_grads(model, x, yhat, wrt=ALL_BLOCKS):
    """Mean ELBO over the batch and its exact gradients.

    Returns ``(mean_elbo, ElboGrads)``.
    """
    x, yhat, _ = _batch(x, yhat)
    b, c = x.shape[0], model.num_classes
    if b == 0:
        raise ValueError('elbo_grads needs a non-empty batch')
    parts = _joint(model, x, yhat)
    log_p = _finite(parts['log_p'], 'clean log-probability')
    log_a = _finite(parts['log_a'], 'noisy mixture')
    post_inputs = np.concatenate([x, one_hot(yhat, c)], axis=1)
    log_q = _finite(log_softmax(mlp_forward(model.rho, post_inputs)), 'posterior')
    q = np.exp(log_q)
    r = log_p + log_a
    per_sample = (q * (r - log_q)).sum(axis=1)
    mean_elbo = float(per_sample.mean())

    grads = {}
    if 'theta_y' in wrt:
        upstream = (q - np.exp(log_p)) / b
        grads['theta_y'] = backprop(model.theta_y, x, upstream)[0]
    if 'theta_yhat' in wrt or 'eps_logit' in wrt:
        eps = model.eps
        off_obs = ~parts['is_obs']
        if 'theta_yhat' in wrt:
            # d ln a_c / d logits = onehot(yhat) - h_c off the observed label; a_yhat does not see the head
            h = np.exp(parts['log_h'])                               # [B x C x C]
            weight = np.where(off_obs, q, 0.0)
            upstream = -h * weight[:, :, None]
            upstream[np.arange(b), :, yhat] += weight
            upstream = _finite(upstream / b, 'noisy head').reshape(b * c, c)
            grads['theta_yhat'] = backprop(model.theta_yhat, _candidate_inputs(x, c), upstream)[0]
        if 'eps_logit' in wrt:
            d_log_a = np.where(off_obs, 1.0 - eps, -eps)
            grads['eps_logit'] = float(_finite((q * d_log_a).sum() / b, 'noise rate'))
    if 'rho' in wrt:
        upstream = q * (r - log_q - per_sample[:, None]) / b
        grads['rho'] = backprop(model.rho, post_inputs, _finite(upstream, 'entropy'))[0]
    return mean_elbo, ElboGrads(**grads)


def sample_generative(model, x, rng):
    """Draw (y, yhat) following the generative process, one pair per row of ``x``."""
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    x_arr = np.atleast_2d(x_arr)
    c = model.num_classes
    y = rng.categorical(clean_prob(model.theta_y, x_arr))
    mixture = noisy_mixture(model.theta_yhat, model.eps, x_arr, one_hot(y, c), mask_clean=True)
    yhat = rng.categorical(mixture)
    if single:
        return int(y[0]), int(yhat[0])
    return y, yhat


def mislabel_probability(model, x):
    """P(yhat != y | x) = eps * sum_c p(c|x) (1 - h(x, e_c)[c]), which is eps for the masked head."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = clean_prob(model.theta_y, x)
    h = head_probs(model, x)
    stay = np.einsum('bcc->bc', h)
    return model.eps * (p * (1.0 - stay)).sum(axis=1)


_U16 = struct.Struct('<H')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')


def _pack_block(values):
    values = np.asarray(values, dtype='<f8').ravel()
    return _U64.pack(values.size) + values.tobytes()


def _pack_net(net):
    parts = [_U32.pack(len(net.layers))]
    parts += [_U32.pack(layer.out_width) + _U32.pack(layer.in_width) for layer in net.layers]
    for layer in net.layers:
        parts += [_pack_block(layer.weights), _pack_block(layer.bias)]
    return b''.join(parts)


def checkpoint_to_bytes(model):
    parts = [CHECKPOINT_MAGIC, _U16.pack(CHECKPOINT_VERSION), _U32.pack(model.d), _U32.pack(model.num_classes)]
    parts += [_pack_net(model.theta_y), _pack_net(model.theta_yhat), _pack_net(model.rho)]
    parts.append(_pack_block([model.eps_logit]))
    return b''.join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf, self.offset = buf, 0

    def take(self, size, what):
        if self.offset + size > len(self.buf):
            raise CheckpointFormatError(f'truncated checkpoint while reading {what}', self.offset)
        chunk = self.buf[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return fmt.unpack(self.take(fmt.size, what))[0]

    def block(self, expected, what):
        start = self.offset
        n = self.unpack(_U64, f'{what} length')
        if n != expected:
            raise CheckpointFormatError(f'{what} holds {n} values, expected {expected}', start)
        return np.frombuffer(self.take(8 * n, what), dtype='<f8').astype(np.float64)

    def net(self, name):
        n_layers = self.unpack(_U32, f'{name} layer count')
        shapes = [(self.unpack(_U32, f'{name} width'), self.unpack(_U32, f'{name} width')) for _ in range(n_layers)]
        layers = []
        for k, (out_w, in_w) in enumerate(shapes):
            w = self.block(out_w * in_w, f'{name} layer {k} weights').reshape(out_w, in_w)
            b = self.block(out_w, f'{name} layer {k} bias')
            layers.append(Layer(w, b))
        start = self.offset
        try:
            return MlpParams(tuple(layers))
        except ValueError as e:
            raise CheckpointFormatError(f'{name}: {e}', start) from e


def checkpoint_from_bytes(buf):
    reader = _Reader(buf)
    if reader.take(4, 'magic') != CHECKPOINT_MAGIC:
        raise CheckpointFormatError('bad checkpoint magic', 0)
    version = reader.unpack(_U16, 'version')
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f'unsupported checkpoint version {version}', 4)
    d = reader.unpack(_U32, 'd')
    c = reader.unpack(_U32, 'C')
    theta_y, theta_yhat, rho = reader.net('theta_y'), reader.net('theta_yhat'), reader.net('rho')
    eps_logit = float(reader.block(1, 'eps logit')[0])
    if reader.offset != len(buf):
        raise CheckpointFormatError('unexpected trailing bytes', reader.offset)
    if theta_y.d_in != d or theta_y.d_out != c:
        raise CheckpointFormatError(
            f'clean classifier maps {theta_y.d_in} -> {theta_y.d_out}, header says {d} -> {c}', 6)
    try:
        return GraphicalModel(theta_y, theta_yhat, eps_logit, rho)
    except ValueError as e:
        raise CheckpointFormatError(str(e), 6) from e


def save_checkpoint(model, path):
    model_logger.info(f'Saving checkpoint to {path} (eps={model.eps:.4f})')
    with open(path, 'wb') as fh:
        fh.write(checkpoint_to_bytes(model))
    return path


def load_checkpoint(path):
    model_logger.info(f'Loading checkpoint from {path}')
    try:
        with open(path, 'rb') as fh:
            return checkpoint_from_bytes(fh.read())
    except CheckpointFormatError as e:
        model_logger.error(f'Error loading checkpoint {path}: {e}')
        raise


