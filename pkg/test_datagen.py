import math

import numpy as np
import pytest
from scipy.stats import chisquare
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from datagen import (CleanDataset, DatasetFormatError, NoiseKind, NoiseSpec, NoisyDataset, UnsupportedVersionError,
                     dataset_from_bytes, dataset_to_bytes, distance_ratio, gen_gaussian_blobs, inject_idn_noise,
                     inject_noise, inject_pairflip_noise, inject_symmetric_noise, load_dataset, save_dataset,
                     split_indices, split_train_test)
from numkit import Rng


@pytest.fixture
def blobs():
    return gen_gaussian_blobs(4000, 4, 2, 3.0, Rng(7).child('blobs'))


def test_blobs_are_balanced(blobs):
    assert len(blobs) == 4000 and blobs.d == 2
    np.testing.assert_array_equal(np.bincount(blobs.clean_labels), [1000] * 4)
    assert blobs.missing_classes() == []


def test_blobs_are_reproducible():
    a = gen_gaussian_blobs(100, 3, 2, 2.0, Rng(1))
    b = gen_gaussian_blobs(100, 3, 2, 2.0, Rng(1))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.clean_labels, b.clean_labels)


def test_blobs_reject_bad_dimensions():
    with pytest.raises(ValueError):
        gen_gaussian_blobs(10, 1, 2, 1.0, Rng(0))
    with pytest.raises(ValueError):
        gen_gaussian_blobs(3, 4, 2, 1.0, Rng(0))


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(NoiseKind.IDN, 1.0)
    with pytest.raises(ValueError):
        NoiseSpec('symmetric', 0.2, std=-0.1)
    assert NoiseSpec('idn', 0.3).kind is NoiseKind.IDN


@pytest.mark.parametrize('rate', [0.0, 0.2, 0.45])
def test_symmetric_noise_flips_exact_count(blobs, rate):
    noisy = inject_symmetric_noise(blobs, rate, Rng(3))
    assert noisy.flip_mask.sum() == math.floor(rate * len(blobs))
    np.testing.assert_array_equal(noisy.clean_labels, blobs.clean_labels)


def test_pairflip_moves_to_next_class(blobs):
    noisy = inject_pairflip_noise(blobs, 0.3, Rng(3))
    flipped = noisy.flip_mask
    assert flipped.sum() == 1200
    np.testing.assert_array_equal(noisy.noisy_labels[flipped], (noisy.clean_labels[flipped] + 1) % 4)
    with pytest.raises(ValueError):
        inject_pairflip_noise(blobs, 0.5, Rng(3))


def test_idn_realized_rate_concentrates(blobs):
    noisy = inject_noise(blobs, NoiseSpec(NoiseKind.IDN, 0.5), Rng(7).child('noise'))
    assert abs(noisy.true_rate - 0.5) <= 0.03
    assert noisy.noise_kind is NoiseKind.IDN and noisy.nominal_rate == 0.5


def test_idn_zero_rate_is_clean(blobs):
    noisy = inject_idn_noise(blobs, NoiseSpec(NoiseKind.IDN, 0.0, std=0.0), Rng(1))
    assert noisy.true_rate == 0.0


def test_idn_flips_depend_on_features(blobs):
    noisy = inject_idn_noise(blobs, NoiseSpec(NoiseKind.IDN, 0.4), Rng(11))
    ratio = distance_ratio(blobs.features, blobs.clean_labels, 4)
    # samples near other clusters are flipped more often
    assert roc_auc_score(noisy.flip_mask, ratio) > 0.55
    inputs = np.column_stack([blobs.features, np.eye(4)[blobs.clean_labels], ratio])
    fitted = LogisticRegression(max_iter=1000).fit(inputs, noisy.flip_mask)
    assert roc_auc_score(noisy.flip_mask, fitted.predict_proba(inputs)[:, 1]) > 0.55


def test_separated_blobs_are_linearly_separable():
    data = gen_gaussian_blobs(4000, 4, 2, 10.0, Rng(5).child('blobs'))
    train, test = split_indices(len(data), 0.25, Rng(5).child('split'))
    classifier = LogisticRegression(max_iter=1000).fit(data.features[train], data.clean_labels[train])
    assert classifier.score(data.features[test], data.clean_labels[test]) >= 0.99


def test_coincident_blobs_are_indistinguishable():
    data = gen_gaussian_blobs(4000, 4, 2, 0.0, Rng(5).child('blobs'))
    classifier = LogisticRegression(max_iter=1000).fit(data.features, data.clean_labels)
    assert classifier.score(data.features, data.clean_labels) == pytest.approx(0.25, abs=0.1)


def test_symmetric_flip_targets_are_uniform(blobs):
    noisy = inject_symmetric_noise(blobs, 0.45, Rng(9))
    flipped = noisy.flip_mask
    offsets = (noisy.noisy_labels[flipped] - noisy.clean_labels[flipped]) % 4
    counts = np.bincount(offsets, minlength=4)
    assert counts[0] == 0
    assert chisquare(counts[1:]).pvalue > 0.01


def test_split_is_disjoint_and_sized():
    train_idx, test_idx = split_indices(100, 0.25, Rng(2))
    assert len(test_idx) == 25 and len(train_idx) == 75
    assert np.intersect1d(train_idx, test_idx).size == 0
    with pytest.raises(ValueError):
        split_indices(3, 0.01, Rng(2))


def test_split_train_test_hides_nothing_but_the_test_noise(blobs):
    noisy = inject_symmetric_noise(blobs, 0.2, Rng(4))
    train, test = split_train_test(noisy, 0.2, Rng(5))
    assert isinstance(train, NoisyDataset) and type(test) is CleanDataset
    assert len(train) + len(test) == len(noisy)


def test_dataset_file_round_trip(tmp_path, blobs):
    noisy = inject_noise(blobs, NoiseSpec(NoiseKind.IDN, 0.3), Rng(9))
    path = save_dataset(noisy, tmp_path / 'blobs.nlds')
    loaded = load_dataset(path)
    np.testing.assert_array_equal(loaded.features, noisy.features)
    np.testing.assert_array_equal(loaded.noisy_labels, noisy.noisy_labels)
    np.testing.assert_array_equal(loaded.flip_mask, noisy.flip_mask)
    assert loaded.noise_kind is NoiseKind.IDN and loaded.nominal_rate == 0.3


def test_dataset_bytes_are_deterministic():
    ds = inject_symmetric_noise(gen_gaussian_blobs(50, 3, 2, 2.0, Rng(1)), 0.2, Rng(2))
    assert dataset_to_bytes(ds) == dataset_to_bytes(ds)


def test_corrupt_files_report_offsets():
    ds = inject_symmetric_noise(gen_gaussian_blobs(20, 2, 2, 2.0, Rng(1)), 0.2, Rng(2))
    buf = dataset_to_bytes(ds)
    with pytest.raises(DatasetFormatError) as err:
        dataset_from_bytes(buf[:-3])
    assert err.value.offset > 0
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(b'XXXX' + buf[4:])
    bumped = buf[:4] + (2).to_bytes(2, 'little') + buf[6:]
    with pytest.raises(UnsupportedVersionError):
        dataset_from_bytes(bumped)
    with pytest.raises(DatasetFormatError):
        dataset_from_bytes(buf + b'\x00')
