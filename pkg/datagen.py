"""Synthetic datasets with known clean labels and controlled label noise."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.special import softmax as _softmax
from scipy.stats import truncnorm

from logger import log_path, setup_logger

data_logger = setup_logger('datagen', log_path('datagen'))

MAGIC = b'NLDS'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sHIII')
_TRAILER = struct.Struct('<Bd')


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f'{message} (byte offset {offset})')
        self.offset = offset


class UnsupportedVersionError(DatasetFormatError):
    pass


class NoiseKind(str, Enum):
    SYMMETRIC = 'symmetric'
    PAIRFLIP = 'pairflip'
    IDN = 'idn'


_KIND_CODES = {NoiseKind.SYMMETRIC: 0, NoiseKind.PAIRFLIP: 1, NoiseKind.IDN: 2}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    rate: float
    std: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, 'kind', NoiseKind(self.kind))
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f'noise rate must lie in [0, 1), got {self.rate}')
        if self.std < 0.0:
            raise ValueError(f'per-sample rate std must be non-negative, got {self.std}')


@dataclass(frozen=True, eq=False)
class CleanDataset:
    features: np.ndarray      # [N x d] float64
    clean_labels: np.ndarray  # [N] int64 in 0..C-1
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.clean_labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ValueError(f'features {features.shape} and labels {labels.shape} disagree')
        if self.num_classes < 2:
            raise ValueError(f'need at least 2 classes, got {self.num_classes}')
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f'labels outside 0..{self.num_classes - 1}')
        if not np.all(np.isfinite(features)):
            raise ValueError('features contain non-finite values')
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'clean_labels', labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def missing_classes(self):
        return sorted(set(range(self.num_classes)) - set(np.unique(self.clean_labels).tolist()))


@dataclass(frozen=True, eq=False)
class NoisyDataset(CleanDataset):
    noisy_labels: np.ndarray = None
    noise_kind: NoiseKind = NoiseKind.SYMMETRIC
    nominal_rate: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        noisy = np.asarray(self.noisy_labels, dtype=np.int64)
        if noisy.shape != self.clean_labels.shape:
            raise ValueError(f'noisy labels {noisy.shape} do not match clean labels {self.clean_labels.shape}')
        if noisy.size and (noisy.min() < 0 or noisy.max() >= self.num_classes):
            raise ValueError(f'noisy labels outside 0..{self.num_classes - 1}')
        object.__setattr__(self, 'noisy_labels', noisy)
        object.__setattr__(self, 'noise_kind', NoiseKind(self.noise_kind))

    @property
    def flip_mask(self):
        return self.noisy_labels != self.clean_labels

    @property
    def true_rate(self):
        """Fraction of samples actually flipped."""
        return float(self.flip_mask.mean()) if len(self) else 0.0

    def subset(self, index):
        index = np.asarray(index)
        return replace(self, features=self.features[index], clean_labels=self.clean_labels[index],
                       noisy_labels=self.noisy_labels[index])

    def clean_view(self):
        return CleanDataset(self.features, self.clean_labels, self.num_classes)


def gen_gaussian_blobs(n, num_classes, d, class_separation, rng):
    """Balanced isotropic unit-variance clusters with means on a circle of radius ``class_separation``."""
    if num_classes < 2 or d < 2 or n < num_classes:
        raise ValueError(f'invalid blob dimensions N={n}, C={num_classes}, d={d} (need C>=2, d>=2, N>=C)')
    data_logger.info(f'Generating {n} blobs: C={num_classes}, d={d}, separation={class_separation}')
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, d))
    means[:, 0] = class_separation * np.cos(angles)
    means[:, 1] = class_separation * np.sin(angles)
    labels = rng.permutation(np.arange(n) % num_classes)
    features = means[labels] + rng.normal(0.0, 1.0, size=(n, d))
    return CleanDataset(features, labels, num_classes)


def _relabelled(ds, noisy, kind, rate):
    noisy_ds = NoisyDataset(ds.features, ds.clean_labels, ds.num_classes,
                            noisy_labels=noisy, noise_kind=kind, nominal_rate=float(rate))
    data_logger.info(f'Injected {kind.value} noise: nominal={rate}, realized={noisy_ds.true_rate:.4f}')
    return noisy_ds


def inject_symmetric_noise(ds, rate, rng):
    """Relabel exactly floor(rate*N) uniformly chosen samples to a uniformly random other class."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f'symmetric noise rate must lie in [0, 1), got {rate}')
    n = len(ds)
    chosen = rng.choice(n, size=math.floor(rate * n), replace=False)
    noisy = ds.clean_labels.copy()
    shift = rng.integers(1, ds.num_classes, size=chosen.size)
    noisy[chosen] = (noisy[chosen] + shift) % ds.num_classes
    return _relabelled(ds, noisy, NoiseKind.SYMMETRIC, rate)


def inject_pairflip_noise(ds, rate, rng):
    """Relabel floor(rate*N) uniformly chosen samples c -> (c+1) mod C."""
    if not 0.0 <= rate < 0.5:
        raise ValueError(f'pairflip noise rate must lie in [0, 0.5), got {rate}')
    n = len(ds)
    chosen = rng.choice(n, size=math.floor(rate * n), replace=False)
    noisy = ds.clean_labels.copy()
    noisy[chosen] = (noisy[chosen] + 1) % ds.num_classes
    return _relabelled(ds, noisy, NoiseKind.PAIRFLIP, rate)


def distance_ratio(features, labels, num_classes):
    """Distance to own class centroid over distance to the nearest other centroid."""
    centroids = np.stack([features[labels == c].mean(axis=0) for c in range(num_classes)])
    dist = np.linalg.norm(features[:, None, :] - centroids[None, :, :], axis=2)
    own = dist[np.arange(len(labels)), labels]
    dist[np.arange(len(labels)), labels] = np.inf
    return own / np.maximum(dist.min(axis=1), 1e-12)


def _per_sample_rates(rate, std, n, rng):
    if std == 0.0:
        return np.full(n, rate)
    a, b = (0.0 - rate) / std, (1.0 - rate) / std
    return truncnorm.rvs(a, b, loc=rate, scale=std, size=n, random_state=rng.generator)


def inject_idn_noise(ds, spec, rng):
    """Instance-dependent noise.

    Per-sample flip rates are drawn from Normal(rate, std^2) truncated to
    [0, 1] and handed out by rank of the distance-ratio statistic, so samples
    lying nearer other clusters receive the larger rates. The flip target is
    drawn from softmax(x^T W) over the other classes with one standard-normal
    projection W per dataset.
    """
    spec = spec if isinstance(spec, NoiseSpec) else NoiseSpec(**spec)
    if spec.kind is not NoiseKind.IDN:
        raise ValueError(f'inject_idn_noise needs an idn spec, got {spec.kind.value}')
    n, num_classes = len(ds), ds.num_classes
    rates = np.sort(_per_sample_rates(spec.rate, spec.std, n, rng))
    order = np.argsort(distance_ratio(ds.features, ds.clean_labels, num_classes), kind='stable')
    q = np.empty(n)
    q[order] = rates
    projection = rng.normal(0.0, 1.0, size=(ds.d, num_classes))
    scores = ds.features @ projection
    scores[np.arange(n), ds.clean_labels] = -np.inf
    targets = rng.categorical(_softmax(scores, axis=1))
    flip = rng.random(n) < q
    noisy = np.where(flip, targets, ds.clean_labels)
    return _relabelled(ds, noisy, NoiseKind.IDN, spec.rate)


def inject_noise(ds, spec, rng):
    if spec.kind is NoiseKind.SYMMETRIC:
        return inject_symmetric_noise(ds, spec.rate, rng)
    if spec.kind is NoiseKind.PAIRFLIP:
        return inject_pairflip_noise(ds, spec.rate, rng)
    return inject_idn_noise(ds, spec, rng)


def split_indices(n, test_fraction, rng):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f'test fraction must lie in (0, 1), got {test_fraction}')
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ValueError(f'test fraction {test_fraction} leaves an empty side for N={n}')
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split_train_test(ds, test_fraction, rng):
    """Disjoint split; the test side keeps clean labels only."""
    train_idx, test_idx = split_indices(len(ds), test_fraction, rng)
    train = ds.subset(train_idx)
    test = ds.subset(test_idx).clean_view()
    data_logger.info(f'Split {len(ds)} samples into {len(train)} train / {len(test)} test')
    return train, test


def dataset_to_bytes(ds):
    n, d = ds.features.shape
    if ds.num_classes > 0xFFFF:
        raise ValueError(f'{ds.num_classes} classes do not fit the u16 label encoding')
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, n, d, ds.num_classes),
        ds.features.astype('<f8').tobytes(),
        ds.clean_labels.astype('<u2').tobytes(),
        ds.noisy_labels.astype('<u2').tobytes(),
        np.packbits(ds.flip_mask, bitorder='little').tobytes(),
        _TRAILER.pack(_KIND_CODES[ds.noise_kind], ds.nominal_rate),
    ]
    return b''.join(parts)


def _take(buf, offset, size, what):
    if offset + size > len(buf):
        left = len(buf) - offset
        raise DatasetFormatError(f'truncated file while reading {what}: need {size} bytes, {left} left', offset)
    return buf[offset:offset + size], offset + size


def dataset_from_bytes(buf):
    raw, off = _take(buf, 0, _HEADER.size, 'header')
    magic, version, n, d, num_classes = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f'bad magic {magic!r}, expected {MAGIC!r}', 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f'unsupported dataset format version {version} (supported: {FORMAT_VERSION})', 4)
    raw, off = _take(buf, off, 8 * n * d, 'features')
    features = np.frombuffer(raw, dtype='<f8').reshape(n, d).astype(np.float64)
    raw, off = _take(buf, off, 2 * n, 'clean labels')
    clean = np.frombuffer(raw, dtype='<u2').astype(np.int64)
    raw, off = _take(buf, off, 2 * n, 'noisy labels')
    noisy = np.frombuffer(raw, dtype='<u2').astype(np.int64)
    mask_offset = off
    raw, off = _take(buf, off, (n + 7) // 8, 'flip mask')
    mask = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder='little').astype(bool)
    trailer_offset = off
    raw, off = _take(buf, off, _TRAILER.size, 'noise kind and rate')
    code, nominal = _TRAILER.unpack(raw)
    if off != len(buf):
        raise DatasetFormatError(f'{len(buf) - off} unexpected trailing bytes', off)
    if code not in _CODE_KINDS:
        raise DatasetFormatError(f'unknown noise kind code {code}', trailer_offset)
    if not np.array_equal(mask, noisy != clean):
        raise DatasetFormatError('flip mask disagrees with the stored labels', mask_offset)
    try:
        return NoisyDataset(features, clean, num_classes, noisy_labels=noisy,
                            noise_kind=_CODE_KINDS[code], nominal_rate=nominal)
    except ValueError as e:
        raise DatasetFormatError(f'invalid dataset contents: {e}', _HEADER.size) from e


def save_dataset(ds, path):
    data_logger.info(f'Saving dataset ({len(ds)} samples) to {path}')
    payload = dataset_to_bytes(ds)
    with open(path, 'wb') as fh:
        fh.write(payload)
    return path


def load_dataset(path):
    data_logger.info(f'Loading dataset from {path}')
    try:
        with open(path, 'rb') as fh:
            buf = fh.read()
        ds = dataset_from_bytes(buf)
    except DatasetFormatError as e:
        data_logger.error(f'Error loading dataset {path}: {e}')
        raise
    data_logger.info(f'Dataset loaded: N={len(ds)}, d={ds.d}, C={ds.num_classes}, realized rate={ds.true_rate:.4f}')
    return ds
