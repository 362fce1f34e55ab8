from dataclasses import replace

import numpy as np
import pytest

import emtrain
import model as gm
from datagen import NoiseSpec, gen_gaussian_blobs, inject_noise, split_train_test
from emtrain import (AscentViolation, Batch, Curriculum, TrainConfig, TrainingError, e_step, m_step, make_optimizers,
                     selection_rate, train, warm_up)
from evalkit import EpochEvaluator
from model import exact_posterior, init_model, one_hot, posterior_q
from numkit import NumericError, OptState, Rng, mlp_forward, params_to_vector
from selection import SelectionSplit, clean_count, constraint_loss, select_split


def noisy_blobs(n=240, rate=0.3, seed=0, separation=4.0, num_classes=3):
    rng = Rng(seed).child('data')
    clean = gen_gaussian_blobs(n, num_classes, 2, separation, rng.child('blobs'))
    full = inject_noise(clean, NoiseSpec('idn', rate, std=0.1 if rate else 0.0), rng.child('noise'))
    return split_train_test(full, 0.25, rng.child('split'))


class Tripwire:
    """Exposes only what training may read."""

    def __init__(self, ds):
        self._ds = ds

    @property
    def features(self):
        return self._ds.features

    @property
    def noisy_labels(self):
        return self._ds.noisy_labels

    @property
    def num_classes(self):
        return self._ds.num_classes

    def __len__(self):
        return len(self._ds)

    @property
    def clean_labels(self):
        raise AssertionError('training read the hidden clean labels')

    @property
    def flip_mask(self):
        raise AssertionError('training read the flip mask')

    @property
    def true_rate(self):
        raise AssertionError('training read the realized noise rate')


def small_config(**changes):
    values = dict(epochs=3, warmup_epochs=2, batch_size=32, hidden_width=8, seed=1)
    values.update(changes)
    return TrainConfig(**values)


def batch_of(ds):
    return Batch(ds.features, ds.noisy_labels, np.arange(len(ds)))


def vec(params):
    return params_to_vector(params)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(curriculum='fixed')
    with pytest.raises(ValueError):
        TrainConfig(lr_theta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(checkpoint_every=5)
    assert TrainConfig(curriculum='fixed', fixed_eps=0.5).curriculum is Curriculum.FIXED


def test_selection_rate_per_curriculum():
    assert selection_rate(small_config(), 0.3, 0) == pytest.approx(0.7)
    assert selection_rate(small_config(curriculum='fixed', fixed_eps=0.5), 0.3, 0) == 0.5
    assert selection_rate(small_config(curriculum='none'), 0.3, 0) == 1.0
    coteaching = small_config(curriculum='coteaching', coteaching_tau=0.4, coteaching_tk=10)
    assert selection_rate(coteaching, 0.3, 5) == pytest.approx(0.8)
    assert selection_rate(small_config(curriculum='coteaching'), 0.3, 20) == pytest.approx(0.5)


def test_warm_up_without_epochs_keeps_classifier():
    train_ds, _ = noisy_blobs()
    theta = init_model(2, 3, Rng(0), hidden=(8,)).theta_y
    after, _ = warm_up(theta, train_ds, 0, OptState.for_params(theta, 0.1))
    np.testing.assert_array_equal(vec(after), vec(theta))


def test_warm_up_lowers_full_batch_loss():
    train_ds, _ = noisy_blobs()
    theta = init_model(2, 3, Rng(0), hidden=(8,)).theta_y
    everything = SelectionSplit(np.arange(len(train_ds)), np.arange(0), 1.0)
    before, _ = constraint_loss(theta, train_ds, everything)
    after_theta, _ = warm_up(theta, train_ds, 5, OptState.for_params(theta, 0.05, momentum=0.0))
    after, _ = constraint_loss(after_theta, train_ds, everything)
    assert after < before


def test_warm_up_fits_clean_separated_blobs():
    train_ds, _ = noisy_blobs(n=400, rate=0.0, separation=8.0)
    theta = init_model(2, 3, Rng(0), hidden=(16,)).theta_y
    theta, _ = warm_up(theta, train_ds, 10, OptState.for_params(theta, 0.05), batch_size=32, rng=Rng(1))
    accuracy = np.mean(mlp_forward(theta, train_ds.features).argmax(axis=1) == train_ds.noisy_labels)
    assert accuracy >= 0.99


def test_e_step_only_moves_posterior():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(2), hidden=(8,))
    batch = batch_of(train_ds)
    updated, _, trace = e_step(model, batch, 3, OptState.for_params(model.rho, 0.01))
    assert updated.theta_y is model.theta_y and updated.theta_yhat is model.theta_yhat
    assert updated.eps_logit == model.eps_logit
    assert not np.array_equal(vec(updated.rho), vec(model.rho))
    assert len(trace.values) == 4


def test_e_step_with_zero_learning_rate_is_a_no_op():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(2), hidden=(8,))
    updated, _, _ = e_step(model, batch_of(train_ds), 2, OptState.for_params(model.rho, 0.0))
    np.testing.assert_array_equal(vec(updated.rho), vec(model.rho))


def test_e_step_ascends_on_full_batch():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(3), hidden=(8,))
    _, _, trace = e_step(model, batch_of(train_ds), 20, OptState.for_params(model.rho, 0.01, momentum=0.0),
                         check_ascent=True)
    assert trace.after >= trace.before - 1e-8


def test_e_step_converges_to_exact_posterior():
    rng = Rng(4)
    model = replace(init_model(2, 3, rng, hidden=(16,)), eps_logit=0.0)
    x = rng.normal(size=(4, 2))
    yhat = np.array([0, 1, 2, 1])
    batch = Batch(x, yhat, np.arange(4))
    model, _, _ = e_step(model, batch, 4000, OptState.for_params(model.rho, 0.05, momentum=0.9))
    q = posterior_q(model.rho, x, one_hot(yhat, 3))
    tv = 0.5 * np.abs(q - exact_posterior(model, x, yhat)).sum(axis=1)
    assert tv.mean() <= 0.05


def test_guarded_e_step_never_descends_on_a_wrong_sign_gradient(monkeypatch):
    def wrong_sign(model, x, yhat, wrt=gm.ALL_BLOCKS):
        value, grads = gm.elbo_grads(model, x, yhat, wrt)
        if grads.rho is None:
            return value, grads
        return value, replace(grads, rho=emtrain.scale(grads.rho, -1.0))

    monkeypatch.setattr(emtrain, 'elbo_grads', wrong_sign)
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(3), hidden=(8,))
    _, _, trace = e_step(model, batch_of(train_ds), 5, OptState.for_params(model.rho, 0.05, momentum=0.0),
                         check_ascent=True)
    assert all(b >= a for a, b in zip(trace.values, trace.values[1:]))


def test_ascent_check_flags_a_falling_trace():
    emtrain._check_ascent([-1.0, -1.0, -0.5], 'E-step')
    with pytest.raises(AscentViolation):
        emtrain._check_ascent([-1.0, -1.1], 'M-step')


def test_guarded_blocks_ascend_with_large_steps_and_momentum():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(6), hidden=(8,))
    batch = batch_of(train_ds)
    _, _, e_trace = e_step(model, batch, 10, OptState.for_params(model.rho, 5.0, momentum=0.9), check_ascent=True)
    split = select_split(np.arange(len(train_ds), dtype=float), 0.6)
    config = small_config(lr_theta=5.0, lr_eps=5.0, momentum=0.9)
    _, _, m_trace = m_step(model, batch, split, 1.0, 10, make_optimizers(model, config), check_ascent=True)
    for trace in (e_trace, m_trace):
        assert all(b >= a for a, b in zip(trace.values, trace.values[1:]))


def test_guarded_block_starts_from_zero_velocity():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(6), hidden=(8,))
    stale = OptState(emtrain.scale(model.rho, 100.0), 0.01, 0.9)
    fresh = OptState.for_params(model.rho, 0.01, momentum=0.9)
    batch = batch_of(train_ds)
    from_stale, _, _ = e_step(model, batch, 1, stale, check_ascent=True)
    from_fresh, _, _ = e_step(model, batch, 1, fresh, check_ascent=True)
    np.testing.assert_array_equal(vec(from_stale.rho), vec(from_fresh.rho))


def test_m_step_leaves_posterior_alone():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(5), hidden=(8,))
    split = select_split(np.arange(len(train_ds), dtype=float), 0.7)
    updated, _, _ = m_step(model, batch_of(train_ds), split, 1.0, 2, make_optimizers(model, small_config()))
    assert updated.rho is model.rho
    assert updated.eps_logit != model.eps_logit
    assert not np.array_equal(vec(updated.theta_y), vec(model.theta_y))


def test_m_step_with_empty_clean_set_ignores_lambda():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(5), hidden=(8,))
    batch = batch_of(train_ds)
    empty = SelectionSplit(np.arange(0), np.arange(len(train_ds)), 0.0)
    with_lam, _, _ = m_step(model, batch, empty, 1.0, 2, make_optimizers(model, small_config()))
    without, _, _ = m_step(model, batch, empty, 0.0, 2, make_optimizers(model, small_config()))
    np.testing.assert_array_equal(vec(with_lam.theta_y), vec(without.theta_y))
    np.testing.assert_array_equal(vec(with_lam.theta_yhat), vec(without.theta_yhat))
    assert with_lam.eps_logit == without.eps_logit


def test_m_step_can_freeze_classifier():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(5), hidden=(8,))
    split = select_split(np.arange(len(train_ds), dtype=float), 0.5)
    updated, _, _ = m_step(model, batch_of(train_ds), split, 1.0, 1, make_optimizers(model, small_config()),
                           freeze_classifier=True)
    assert updated.theta_y is model.theta_y


def test_m_step_ascends_on_full_batch():
    train_ds, _ = noisy_blobs()
    model = init_model(2, 3, Rng(6), hidden=(8,))
    split = select_split(np.arange(len(train_ds), dtype=float), 0.6)
    config = small_config(lr_theta=0.005, lr_eps=0.005, momentum=0.0)
    _, _, trace = m_step(model, batch_of(train_ds), split, 1.0, 20, make_optimizers(model, config), check_ascent=True)
    assert trace.after >= trace.before - 1e-8


def test_single_batch_epoch_runs_each_block_once(monkeypatch):
    train_ds, test_ds = noisy_blobs(n=64)
    calls = {'select': 0, 'e': 0, 'm': 0}

    def counting(name, fn):
        def wrapper(*args, **kwargs):
            calls[name] += 1
            return fn(*args, **kwargs)
        return wrapper

    monkeypatch.setattr(emtrain, 'select_split', counting('select', emtrain.select_split))
    monkeypatch.setattr(emtrain, 'e_step', counting('e', emtrain.e_step))
    monkeypatch.setattr(emtrain, 'm_step', counting('m', emtrain.m_step))
    result = train(small_config(epochs=1, batch_size=len(train_ds)), train_ds, test_ds)
    assert calls == {'select': 1, 'e': 1, 'm': 1}
    assert len(result.records) == 1 and len(result.eps_trajectory) == 1


def test_training_never_reads_ground_truth():
    train_ds, test_ds = noisy_blobs()
    evaluator = EpochEvaluator(test_ds, flip_mask=train_ds.flip_mask)
    result = train(small_config(), Tripwire(train_ds), test_ds, evaluator)
    assert [r.epoch for r in result.records] == [1, 2, 3]
    assert all(0.0 < eps < 1.0 for eps in result.eps_trajectory)


def test_training_is_deterministic():
    train_ds, test_ds = noisy_blobs()
    first = train(small_config(), train_ds, test_ds)
    second = train(small_config(), train_ds, test_ds)
    assert first.eps_trajectory == second.eps_trajectory
    assert first.records == second.records
    np.testing.assert_array_equal(vec(first.model.theta_y), vec(second.model.theta_y))
    third = train(small_config(seed=2), train_ds, test_ds)
    assert third.eps_trajectory != first.eps_trajectory


def test_clean_ratio_follows_curriculum():
    train_ds, test_ds = noisy_blobs()
    n = len(train_ds)
    none = train(small_config(curriculum='none', lam=0.0), train_ds, test_ds)
    assert all(r.clean_ratio == 1.0 for r in none.records)
    fixed = train(small_config(curriculum='fixed', fixed_eps=0.5), train_ds, test_ds)
    assert all(r.clean_ratio == (n // 2) / n for r in fixed.records)
    estimated = train(small_config(), train_ds, test_ds)
    for eps_start, record in zip((None,) + estimated.eps_trajectory[:-1], estimated.records):
        if eps_start is not None:
            assert record.clean_ratio == clean_count(1.0 - eps_start, n) / n


def test_full_batch_run_is_monotone_within_blocks():
    train_ds, test_ds = noisy_blobs(n=200)
    config = small_config(epochs=20, full_batch=True, lr_theta=0.005, lr_eps=0.005, momentum=0.0)
    result = train(config, train_ds, test_ds)
    assert len(result.records) == 20


def test_full_batch_run_with_default_hyperparameters():
    train_ds, test_ds = noisy_blobs(n=1000, rate=0.5, num_classes=4)
    result = train(TrainConfig(epochs=20, full_batch=True, seed=0), train_ds, test_ds)
    assert [r.epoch for r in result.records] == list(range(1, 21))
    assert all(0.0 < eps < 1.0 for eps in result.eps_trajectory)


def test_noise_rate_near_boundary_is_warned(monkeypatch):
    warnings = []
    monkeypatch.setattr(emtrain.train_logger, 'warning', warnings.append)
    emtrain._warn_if_grazing(3, 0.3)
    assert warnings == []
    emtrain._warn_if_grazing(4, 5e-4)
    emtrain._warn_if_grazing(5, 1.0 - 5e-4)
    assert len(warnings) == 2 and 'Epoch 4' in warnings[0] and 'Epoch 5' in warnings[1]


def test_every_epoch_checks_the_boundary(monkeypatch):
    seen = []
    monkeypatch.setattr(emtrain, '_warn_if_grazing', lambda epoch, eps: seen.append((epoch, eps)))
    train_ds, test_ds = noisy_blobs()
    result = train(small_config(), train_ds, test_ds)
    assert seen == list(zip((1, 2, 3), result.eps_trajectory))


def test_training_error_carries_coordinates(monkeypatch):
    def poisoned(model, x, yhat, wrt=gm.ALL_BLOCKS):
        value, grads = gm.elbo_grads(model, x, yhat, wrt)
        if grads.rho is None:
            return value, grads
        return value, replace(grads, rho=emtrain.scale(grads.rho, np.nan))

    monkeypatch.setattr(emtrain, 'elbo_grads', poisoned)
    train_ds, test_ds = noisy_blobs(n=120)
    config = small_config(full_batch=True, e_steps_per_batch=5)
    with pytest.raises(TrainingError) as err:
        train(config, train_ds, test_ds)
    assert (err.value.epoch, err.value.batch) == (1, 0)
    assert isinstance(err.value.__cause__, NumericError)


def test_per_batch_selection_and_knn_criterion():
    train_ds, test_ds = noisy_blobs()
    result = train(small_config(selection_scope='per-batch', criterion='knn', knn_k=5), train_ds, test_ds)
    assert len(result.records) == 3
    assert all(0.0 <= r.clean_ratio <= 1.0 for r in result.records)


def test_checkpoints_and_split_dumps(tmp_path):
    train_ds, test_ds = noisy_blobs()
    evaluator = EpochEvaluator(test_ds, flip_mask=train_ds.flip_mask)
    config = small_config(epochs=2, checkpoint_every=1, checkpoint_dir=str(tmp_path / 'ckpt'),
                          dump_splits_dir=str(tmp_path / 'splits'))
    result = train(config, train_ds, test_ds, evaluator)
    loaded = gm.load_checkpoint(tmp_path / 'ckpt' / 'model_epoch_2.nlgm')
    assert loaded.eps == result.model.eps
    assert (tmp_path / 'ckpt' / 'model_epoch_1.nlgm').exists()
    header = (tmp_path / 'splits' / 'split_1.csv').read_text().splitlines()[0]
    assert header == 'index,score,is_clean,true_flip'


# -- end-to-end acceptance runs (pytest -m slow) --------------------------------

def acceptance_data(rate, seed):
    rng = Rng(seed).child('data')
    clean = gen_gaussian_blobs(4000, 4, 2, 3.0, rng.child('blobs'))
    full = inject_noise(clean, NoiseSpec('idn', rate), rng.child('noise'))
    return split_train_test(full, 0.2, rng.child('split'))


def acceptance_run(rate, seed, **changes):
    train_ds, test_ds = acceptance_data(rate, seed)
    evaluator = EpochEvaluator(test_ds, flip_mask=train_ds.flip_mask)
    result = train(TrainConfig(epochs=100, seed=seed, **changes), train_ds, test_ds, evaluator)
    return train_ds, result


@pytest.mark.slow
def test_noise_rate_recovery_and_ordering():
    final = {}
    for rate in (0.2, 0.3, 0.4, 0.5):
        errors, estimates = [], []
        for seed in range(5):
            train_ds, result = acceptance_run(rate, seed)
            errors.append(abs(result.eps_trajectory[-1] - train_ds.true_rate))
            estimates.append(result.eps_trajectory[-1])
        assert np.mean(errors) <= 0.10
        final[rate] = np.mean(estimates)
    assert final[0.2] < final[0.3] < final[0.4] < final[0.5]


@pytest.mark.slow
def test_curriculum_beats_no_selection():
    arms = {'estimated': {}, 'none': {'curriculum': 'none', 'lam': 0.0}, 'ideal': {'curriculum': 'fixed'}}
    accuracy = {}
    for name, changes in arms.items():
        scores = []
        for seed in range(5):
            if name == 'ideal':
                train_ds, _ = acceptance_data(0.4, seed)
                changes = {'curriculum': 'fixed', 'fixed_eps': train_ds.true_rate}
            _, result = acceptance_run(0.4, seed, **changes)
            scores.append(result.records[-1].test_acc)
        accuracy[name] = np.mean(scores)
    assert accuracy['estimated'] >= accuracy['none'] + 0.02
    assert accuracy['ideal'] >= accuracy['estimated'] - 0.01


@pytest.mark.slow
def test_selection_quality_at_half_noise():
    _, result = acceptance_run(0.5, 0)
    last = result.records[-1]
    assert last.sel_f1 >= 0.85
    assert abs(last.clean_ratio - 0.5) <= 0.08
