"""Sample selection: criterion scores, curricula, the sorted clean/noisy split
and the cross-entropy constraint over the selected clean samples.

Scores follow the "lower is cleaner" convention. Functions that take
``samples`` only read ``samples.features`` and ``samples.noisy_labels``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from sklearn.neighbors import NearestNeighbors

from logger import log_path, setup_logger
from numkit import NumericError, backprop, log_softmax, mlp_forward, softmax, zeros_like

selection_logger = setup_logger('selection', log_path('selection'))

LOG_FLOOR = 1e-300
_MAX_LOSS = -math.log(LOG_FLOOR)


class CriterionKind(str, Enum):
    SMALL_LOSS = 'small-loss'
    KNN = 'knn'


@dataclass(frozen=True, eq=False)
class CriterionScores:
    scores: np.ndarray
    kind: CriterionKind

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or not np.all(np.isfinite(scores)):
            raise NumericError('criterion scores must be a finite vector')
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'kind', CriterionKind(self.kind))

    def __len__(self):
        return self.scores.size


@dataclass(frozen=True, eq=False)
class SelectionSplit:
    clean: np.ndarray   # sorted indices
    noisy: np.ndarray   # sorted complement
    rate: float
    tag: object = None

    def __len__(self):
        return self.clean.size + self.noisy.size

    @property
    def clean_mask(self):
        mask = np.zeros(len(self), dtype=bool)
        mask[self.clean] = True
        return mask

    @property
    def clean_ratio(self):
        return self.clean.size / len(self) if len(self) else 0.0


def small_loss_criterion(theta_y, samples):
    """z_i = -ln f_y(x_i)[yhat_i], floored at LOG_FLOOR."""
    features = np.asarray(samples.features)
    labels = np.asarray(samples.noisy_labels)
    if labels.size == 0:
        raise ValueError('small-loss criterion needs a non-empty dataset')
    log_p = log_softmax(mlp_forward(theta_y, features))
    losses = -log_p[np.arange(labels.size), labels]
    if np.any(losses > _MAX_LOSS):
        raise NumericError(f'clean-label probability fell below the {LOG_FLOOR:g} floor')
    return CriterionScores(losses, CriterionKind.SMALL_LOSS)


def knn_criterion(features, noisy_labels, k):
    """Fraction of the k nearest neighbours (self excluded) whose noisy label disagrees."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(noisy_labels)
    n = labels.size
    if k <= 0:
        raise ValueError(f'k must be positive, got {k}')
    if k >= n:
        raise ValueError(f'k={k} needs more than {k} samples, got {n}')
    index = NearestNeighbors(n_neighbors=k + 1).fit(features).kneighbors(features, return_distance=False)
    keep = index != np.arange(n)[:, None]
    # self missing from its own list (duplicate points): drop the farthest instead
    keep[keep.all(axis=1), -1] = False
    neighbours = index[keep].reshape(n, k)
    scores = (labels[neighbours] != labels[:, None]).mean(axis=1)
    return CriterionScores(scores, CriterionKind.KNN)


def score_samples(kind, theta_y, samples, k=10):
    kind = CriterionKind(kind)
    if kind is CriterionKind.SMALL_LOSS:
        return small_loss_criterion(theta_y, samples)
    return knn_criterion(samples.features, samples.noisy_labels, k)


def curriculum_rate(eps):
    """R = 1 - eps."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f'noise rate must lie in [0, 1], got {eps}')
    return 1.0 - eps


def coteaching_rate(t, tau, t_k):
    """Pre-defined schedule R(t) = 1 - tau * min(t / t_k, 1)."""
    if not 0.0 <= tau <= 1.0 or t < 0 or t_k <= 0:
        raise ValueError(f'invalid co-teaching schedule t={t}, tau={tau}, t_k={t_k}')
    return 1.0 - tau * min(t / t_k, 1.0)


def clean_count(rate, n):
    """floor(R*N), with R*N rounded to 9 decimals first so 1 - 0.9 of 10 samples keeps 1."""
    return math.floor(round(rate * n, 9))


def select_split(scores, rate, tag=None):
    """Clean = the floor(R*N) lowest scores; ties go to the lower index."""
    values = scores.scores if isinstance(scores, CriterionScores) else np.asarray(scores, dtype=np.float64)
    rate = float(np.clip(rate, 0.0, 1.0))
    n_clean = clean_count(rate, values.size)
    order = np.argsort(values, kind='stable')
    return SelectionSplit(np.sort(order[:n_clean]), np.sort(order[n_clean:]), rate, tag)


def constraint_loss(theta_y, samples, split):
    """Mean cross-entropy of the clean classifier over the selected clean samples.

    Returns ``(loss, grads)`` with ``grads`` the gradient of the loss.
    """
    if split.clean.size == 0:
        return 0.0, zeros_like(theta_y)
    x = np.asarray(samples.features)[split.clean]
    y = np.asarray(samples.noisy_labels)[split.clean]
    n = y.size
    logits = mlp_forward(theta_y, x)
    loss = float(-log_softmax(logits)[np.arange(n), y].mean())
    upstream = softmax(logits)
    upstream[np.arange(n), y] -= 1.0
    grads = backprop(theta_y, x, upstream / n)[0]
    return loss, grads


def write_split(path, scores, split, flip_mask=None):
    """Debug dump: index,score,is_clean[,true_flip]."""
    values = scores.scores if isinstance(scores, CriterionScores) else np.asarray(scores)
    frame = pd.DataFrame({
        'index': np.arange(values.size),
        'score': values,
        'is_clean': split.clean_mask.astype(int),
    })
    if flip_mask is not None:
        frame['true_flip'] = np.asarray(flip_mask).astype(int)
    frame.to_csv(path, index=False, float_format='%.17g')
    selection_logger.info(f'Wrote split dump ({split.clean.size}/{len(split)} clean) to {path}')
    return path
