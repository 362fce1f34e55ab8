"""Variational-EM training with a noise-rate sample-selection curriculum.

Per mini-batch: select clean samples with R = 1 - eps (frozen at epoch or
batch start), run the variational E step on the posterior network, then the
constrained M step on (ELBO - lam * constraint) over the classifiers and the
noise-rate logit. Training only ever reads ``features`` and
``noisy_labels`` of the training set; ground truth stays with the evaluator.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from evalkit import EpochEvaluator
from logger import log_path, setup_logger
from model import elbo_grads, init_model, save_checkpoint
from numkit import NumericError, OptState, Rng, add_scaled, scale, sgd_momentum_step, zeros_like
from selection import (CriterionKind, SelectionSplit, constraint_loss, coteaching_rate, curriculum_rate,
                       score_samples, select_split, write_split)

train_logger = setup_logger('emtrain', log_path('emtrain'))

ASCENT_TOLERANCE = 1e-8
MAX_HALVINGS = 30
EPS_BOUNDARY = 1e-3


class TrainingError(RuntimeError):
    def __init__(self, epoch, batch, cause):
        super().__init__(f'training failed at epoch {epoch}, batch {batch}: {cause}')
        self.epoch = epoch
        self.batch = batch


class AscentViolation(RuntimeError):
    """Objective decreased inside an E or M block in full-batch mode."""


class SelectionScope(str, Enum):
    PER_EPOCH = 'per-epoch'
    PER_BATCH = 'per-batch'


class Curriculum(str, Enum):
    EPSILON = 'epsilon'
    FIXED = 'fixed'
    COTEACHING = 'coteaching'
    NONE = 'none'


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', use_enum_values=False)

    epochs: int = Field(100, ge=1, description='Number of EM epochs T')
    warmup_epochs: int = Field(10, ge=0, description='Cross-entropy epochs on all noisy labels')
    batch_size: int = Field(64, ge=1, description='Mini-batch size')
    lr_theta: float = Field(0.01, gt=0, description='Learning rate of the three networks')
    lr_eps: float = Field(0.001, gt=0, description='Learning rate of the noise-rate logit')
    momentum: float = Field(0.9, ge=0, lt=1, description='SGD momentum')
    lam: float = Field(1.0, ge=0, description='Weight of the selection constraint in the M step')
    e_steps_per_batch: int = Field(1, ge=1)
    m_steps_per_batch: int = Field(1, ge=1)
    criterion: CriterionKind = Field(CriterionKind.SMALL_LOSS, description='Selection criterion')
    knn_k: int = Field(10, ge=1, description='Neighbours for the knn criterion')
    selection_scope: SelectionScope = SelectionScope.PER_EPOCH
    curriculum: Curriculum = Field(Curriculum.EPSILON, description='Where the selection rate R comes from')
    fixed_eps: Optional[float] = Field(None, ge=0, lt=1, description='Noise rate used by the fixed curriculum')
    coteaching_tau: Optional[float] = Field(None, ge=0, le=1)
    coteaching_tk: int = Field(10, ge=1)
    freeze_classifier: bool = Field(False, description='Keep the clean classifier fixed after warm-up')
    full_batch: bool = Field(False, description='One unshuffled batch per epoch and in-block ascent checks')
    hidden_width: int = Field(64, ge=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    checkpoint_every: int = Field(0, ge=0, description='Write a checkpoint every K epochs (0 = off)')
    checkpoint_dir: Optional[str] = None
    dump_splits_dir: Optional[str] = None
    progress: bool = False

    @model_validator(mode='after')
    def _curriculum_needs_rate(self):
        if self.curriculum is Curriculum.FIXED and self.fixed_eps is None:
            raise ValueError('fixed_eps is required when curriculum is "fixed"')
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ValueError('checkpoint_dir is required when checkpoint_every > 0')
        return self


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    noisy_labels: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.noisy_labels.size


@dataclass(frozen=True, eq=False)
class Optimizers:
    theta_y: OptState
    theta_yhat: OptState
    eps_logit: OptState
    rho: OptState


@dataclass(frozen=True, eq=False)
class TrainResult:
    model: object
    eps_trajectory: tuple
    records: list
    wall_time_s: float
    config: TrainConfig = None


@dataclass(frozen=True)
class BlockTrace:
    """Objective value before each step of a block, then after the last one."""
    values: tuple = field(default_factory=tuple)
    mean_constraint: float = 0.0

    @property
    def before(self):
        return self.values[0]

    @property
    def after(self):
        return self.values[-1]


def make_optimizers(model, config):
    return Optimizers(
        theta_y=OptState.for_params(model.theta_y, config.lr_theta, config.momentum),
        theta_yhat=OptState.for_params(model.theta_yhat, config.lr_theta, config.momentum),
        eps_logit=OptState.for_params(model.eps_logit, config.lr_eps, config.momentum),
        rho=OptState.for_params(model.rho, config.lr_theta, config.momentum),
    )


def _ascend(params, grads, state):
    return sgd_momentum_step(params, scale(grads, -1.0), state)


def _check_ascent(values, block):
    for k in range(1, len(values)):
        if values[k] < values[k - 1] - ASCENT_TOLERANCE:
            raise AscentViolation(f'{block} objective fell from {values[k - 1]!r} to {values[k]!r} at step {k}')


def warm_up(theta_y, samples, warmup_epochs, optimizer, batch_size=None, rng=None):
    """Cross-entropy training of the clean classifier on every noisy label.

    Full-batch and in index order unless ``batch_size`` and ``rng`` are given.
    Returns ``(theta_y, optimizer)``.
    """
    n = len(samples.noisy_labels)
    for epoch in range(warmup_epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        step = batch_size or n
        losses = []
        for start in range(0, n, step):
            idx = order[start:start + step]
            batch = Batch(samples.features[idx], samples.noisy_labels[idx], idx)
            everything = SelectionSplit(np.arange(len(idx)), np.arange(0), 1.0)
            loss, grads = constraint_loss(theta_y, batch, everything)
            theta_y, optimizer = sgd_momentum_step(theta_y, grads, optimizer)
            losses.append(loss)
        train_logger.info(f'Warm-up epoch {epoch + 1}/{warmup_epochs}: mean loss {np.mean(losses):.4f}')
    return theta_y, optimizer


def _plain_step(params, grads, states):
    stepped = {name: _ascend(params[name], grads[name], states[name]) for name in params}
    return {name: p for name, (p, _) in stepped.items()}, {name: s for name, (_, s) in stepped.items()}


def _guarded_step(objective, current, params, grads, states):
    """One ascent step that never lowers ``objective``.

    ``params``, ``grads`` and ``states`` are dicts keyed by block name. The
    momentum step is tried first, then the plain gradient step, each halved
    up to MAX_HALVINGS times until the objective is at least ``current``.
    If neither gets there the parameters stay and the velocity is cleared.
    """
    cleared = {name: replace(state, velocity=zeros_like(params[name])) for name, state in states.items()}
    for start in (states, cleared):
        proposal = {name: _ascend(params[name], grads[name], start[name]) for name in params}
        deltas = {name: add_scaled(p, params[name], -1.0) for name, (p, _) in proposal.items()}
        factor = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = {name: add_scaled(params[name], deltas[name], factor) for name in params}
            if objective(trial) >= current:
                velocities = {name: replace(s, velocity=scale(s.velocity, factor)) for name, (_, s) in proposal.items()}
                return trial, velocities
            factor *= 0.5
    return params, cleared


def _clear_velocity(optimizers, model, names):
    return replace(optimizers, **{name: replace(getattr(optimizers, name), velocity=zeros_like(getattr(model, name)))
                                  for name in names})


def e_step(model, batch, steps, optimizer, check_ascent=False):
    """Gradient ascent on the batch ELBO w.r.t. the posterior network only.

    With ``check_ascent`` (full-batch mode) the block starts from zero
    velocity and every step is guarded so the ELBO cannot fall.
    Returns ``(model, optimizer, BlockTrace)``.
    """
    if check_ascent:
        optimizer = replace(optimizer, velocity=zeros_like(model.rho))
    values = []
    for _ in range(steps):
        value, grads = elbo_grads(model, batch.features, batch.noisy_labels, wrt=('rho',))
        values.append(value)
        params, states = {'rho': model.rho}, {'rho': optimizer}
        if check_ascent:
            def objective(blocks):
                return elbo_grads(replace(model, **blocks), batch.features, batch.noisy_labels, wrt=())[0]
            params, states = _guarded_step(objective, value, params, {'rho': grads.rho}, states)
        else:
            params, states = _plain_step(params, {'rho': grads.rho}, states)
        model, optimizer = replace(model, rho=params['rho']), states['rho']
    final, _ = elbo_grads(model, batch.features, batch.noisy_labels, wrt=())
    if not np.isfinite(final):
        raise NumericError('ELBO became non-finite in the E step')
    values.append(final)
    if check_ascent:
        _check_ascent(values, 'E-step')
    return model, optimizer, BlockTrace(tuple(values))


def _m_objective(model, batch, split, lam, wrt):
    value, grads = elbo_grads(model, batch.features, batch.noisy_labels, wrt=wrt)
    closs, cgrads = constraint_loss(model.theta_y, batch, split)
    return value - lam * closs, closs, grads, cgrads


def m_step(model, batch, split, lam, steps, optimizers, freeze_classifier=False, check_ascent=False):
    """Gradient ascent on batch-mean ELBO - lam * constraint_loss.

    ``split`` indexes into ``batch`` and was computed with the noise rate
    frozen at block entry; the posterior network is untouched and the noise
    rate moves through the ELBO only. ``check_ascent`` guards the steps as
    in ``e_step``. Returns ``(model, optimizers, BlockTrace)``.
    """
    names = ('theta_yhat', 'eps_logit') if freeze_classifier else ('theta_y', 'theta_yhat', 'eps_logit')
    if check_ascent:
        optimizers = _clear_velocity(optimizers, model, names)
    values, constraints = [], []
    for _ in range(steps):
        objective, closs, grads, cgrads = _m_objective(model, batch, split, lam, names)
        values.append(objective)
        constraints.append(closs)
        ascent = {name: getattr(grads, name) for name in names}
        if 'theta_y' in ascent:
            ascent['theta_y'] = add_scaled(grads.theta_y, cgrads, -lam)
        params = {name: getattr(model, name) for name in names}
        states = {name: getattr(optimizers, name) for name in names}
        if check_ascent:
            def value_at(blocks):
                return _m_objective(replace(model, **blocks), batch, split, lam, ())[0]
            params, states = _guarded_step(value_at, objective, params, ascent, states)
        else:
            params, states = _plain_step(params, ascent, states)
        model, optimizers = replace(model, **params), replace(optimizers, **states)
    final, _, _, _ = _m_objective(model, batch, split, lam, wrt=())
    if not np.isfinite(final):
        raise NumericError('M-step objective became non-finite')
    values.append(final)
    if check_ascent:
        _check_ascent(values, 'M-step')
    return model, optimizers, BlockTrace(tuple(values), float(np.mean(constraints)))


def _warn_if_grazing(epoch, eps):
    if eps < EPS_BOUNDARY or eps > 1.0 - EPS_BOUNDARY:
        train_logger.warning(f'Epoch {epoch}: noise rate {eps:.6f} is within {EPS_BOUNDARY} of the boundary')


def selection_rate(config, eps, epoch_index):
    """R for the configured curriculum; ``epoch_index`` counts EM epochs from 0."""
    if config.curriculum is Curriculum.EPSILON:
        return curriculum_rate(eps)
    if config.curriculum is Curriculum.FIXED:
        return curriculum_rate(config.fixed_eps)
    if config.curriculum is Curriculum.COTEACHING:
        tau = next(v for v in (config.coteaching_tau, config.fixed_eps, 0.5) if v is not None)
        return coteaching_rate(epoch_index, tau, config.coteaching_tk)
    return 1.0


def _batch_scores(config, theta_y, batch):
    if config.criterion is CriterionKind.KNN:
        k = min(config.knn_k, len(batch) - 1)
        if k < 1:
            return np.zeros(len(batch))
        return score_samples(config.criterion, theta_y, batch, k).scores
    return score_samples(config.criterion, theta_y, batch).scores


def _split_from_mask(mask, rate, tag):
    return SelectionSplit(np.flatnonzero(mask), np.flatnonzero(~mask), rate, tag)


def train(config, train_ds, test_ds, evaluator=None):
    """Warm-up then T epochs of selection, E step and constrained M step."""
    started = time.perf_counter()
    root = Rng(config.seed)
    init_rng, shuffle_rng = root.child('init'), root.child('shuffle')
    features = np.asarray(train_ds.features, dtype=np.float64)
    noisy = np.asarray(train_ds.noisy_labels)
    samples = Batch(features, noisy, np.arange(noisy.size))
    n, num_classes = noisy.size, train_ds.num_classes
    evaluator = evaluator if evaluator is not None else EpochEvaluator(test_ds)
    train_logger.info(f'Training on N={n}, C={num_classes}: {config.model_dump_json()}')

    model = init_model(features.shape[1], num_classes, init_rng, hidden=(config.hidden_width,))
    optimizers = make_optimizers(model, config)
    warm_batch = None if config.full_batch else config.batch_size
    warm_rng = None if config.full_batch else shuffle_rng.child('warmup')
    theta_y, warm_opt = warm_up(model.theta_y, samples, config.warmup_epochs, optimizers.theta_y,
                                batch_size=warm_batch, rng=warm_rng)
    model = replace(model, theta_y=theta_y)
    optimizers = replace(optimizers, theta_y=warm_opt)

    for directory in (config.checkpoint_dir if config.checkpoint_every else None, config.dump_splits_dir):
        if directory:
            os.makedirs(directory, exist_ok=True)
    knn_cache = None
    eps_trajectory = []
    step = 0
    for epoch in tqdm(range(1, config.epochs + 1), disable=not config.progress, desc='epochs'):
        eps_frozen = model.eps
        rate = selection_rate(config, eps_frozen, epoch - 1)
        order = np.arange(n) if config.full_batch else shuffle_rng.permutation(n)
        size = n if config.full_batch else config.batch_size
        epoch_scores = None
        if config.selection_scope is SelectionScope.PER_EPOCH or config.dump_splits_dir:
            if config.criterion is CriterionKind.KNN:
                if knn_cache is None:
                    knn_cache = score_samples(config.criterion, model.theta_y, samples, config.knn_k).scores
                epoch_scores = knn_cache
            else:
                epoch_scores = score_samples(config.criterion, model.theta_y, samples).scores
        clean_mask = select_split(epoch_scores, rate, tag=epoch).clean_mask if epoch_scores is not None else None
        selected = np.zeros(n, dtype=bool)
        elbo_total = constraint_total = 0.0
        for batch_index, start in enumerate(range(0, n, size)):
            step += 1
            idx = order[start:start + size]
            batch = Batch(features[idx], noisy[idx], idx)
            try:
                if config.selection_scope is SelectionScope.PER_BATCH:
                    batch_rate = selection_rate(config, model.eps, epoch - 1)
                    split = select_split(_batch_scores(config, model.theta_y, batch), batch_rate, tag=(epoch, step))
                else:
                    split = _split_from_mask(clean_mask[idx], rate, (epoch, step))
                selected[idx[split.clean]] = True
                model, rho_opt, e_trace = e_step(model, batch, config.e_steps_per_batch, optimizers.rho,
                                           check_ascent=config.full_batch)
                optimizers = replace(optimizers, rho=rho_opt)
                model, optimizers, trace = m_step(model, batch, split, config.lam, config.m_steps_per_batch,
                                                  optimizers, freeze_classifier=config.freeze_classifier,
                                                  check_ascent=config.full_batch)
            except (NumericError, AscentViolation, ValueError) as e:
                train_logger.error(f'Training failed at epoch {epoch}, batch {batch_index}: {e}')
                raise TrainingError(epoch, batch_index, e) from e
            elbo_total += e_trace.after * len(batch)
            constraint_total += trace.mean_constraint * len(batch)

        epoch_split = _split_from_mask(selected, float(selected.mean()), epoch)
        record = evaluator(epoch, model, epoch_split, samples, elbo_total / n, constraint_total / n)
        eps_trajectory.append(model.eps)
        _warn_if_grazing(epoch, model.eps)
        train_logger.info(f'Epoch {epoch}/{config.epochs}: eps={model.eps:.4f} R={rate:.4f} '
                          f'clean={int(selected.sum())}/{n} test_acc={record.test_acc:.4f}')
        if config.dump_splits_dir:
            write_split(os.path.join(config.dump_splits_dir, f'split_{epoch}.csv'), epoch_scores, epoch_split,
                        getattr(evaluator, 'flip_mask', None))
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(config.checkpoint_dir, f'model_epoch_{epoch}.nlgm'))

    wall = time.perf_counter() - started
    train_logger.info(f'Training finished in {wall:.2f}s after {step} iterations: final eps={model.eps:.4f}')
    return TrainResult(model, tuple(eps_trajectory), list(evaluator.records), wall, config)
