"""Evaluation: test accuracy, selection quality against ground-truth flip
masks, noise-rate error, per-epoch records and their CSV form."""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from logger import log_path, setup_logger
from model import one_hot, posterior_q
from numkit import mlp_forward

eval_logger = setup_logger('evalkit', log_path('evalkit'))

RECORD_COLUMNS = ('epoch', 'test_acc', 'eps_hat', 'implied_flip_rate', 'sel_precision', 'sel_recall', 'sel_f1',
                  'clean_ratio', 'mean_elbo', 'mean_constraint', 'degenerate_flags')
FLAG_SEPARATOR = ';'


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    test_acc: float
    eps_hat: float
    implied_flip_rate: float
    sel_precision: float
    sel_recall: float
    sel_f1: float
    clean_ratio: float
    mean_elbo: float
    mean_constraint: float
    degenerate_flags: tuple = ()


@dataclass(frozen=True)
class SelectionMetrics:
    precision: float
    recall: float
    f1: float
    clean_ratio: float
    degenerate_flags: tuple = ()


def test_accuracy(theta_y, test_ds):
    """Fraction of test samples whose arg-max clean prediction is the clean label."""
    if len(test_ds) == 0:
        raise ValueError('test accuracy needs a non-empty test set')
    predicted = mlp_forward(theta_y, test_ds.features).argmax(axis=1)
    return float((predicted == test_ds.clean_labels).mean())


# not a pytest test despite the name
test_accuracy.__test__ = False


def f1_score(precision, recall):
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def selection_metrics(split, flip_mask):
    """Precision/recall/F1 of the selection with "truly clean" as the positive class."""
    flip_mask = np.asarray(flip_mask, dtype=bool)
    if flip_mask.size != len(split):
        raise ValueError(f'flip mask has {flip_mask.size} entries for a split of {len(split)}')
    truth = ~flip_mask
    (tn, fp), (fn, tp) = confusion_matrix(truth, split.clean_mask, labels=[False, True])
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append('precision_undefined')
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append('recall_undefined')
    else:
        recall = tp / (tp + fn)
    return SelectionMetrics(float(precision), float(recall), f1_score(precision, recall), split.clean_ratio,
                            tuple(flags))


def noise_rate_error(eps_hat, realized_rate):
    """Signed error eps_hat - realized_rate."""
    for name, value in (('eps_hat', eps_hat), ('realized_rate', realized_rate)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f'{name} must lie in [0, 1], got {value}')
    return eps_hat - realized_rate


def implied_flip_rate(model, samples):
    """Posterior flip fraction mean_i (1 - q(yhat_i | x_i, yhat_i)); the eps update pulls towards it."""
    x = np.asarray(samples.features, dtype=np.float64)
    labels = np.asarray(samples.noisy_labels)
    q = posterior_q(model.rho, x, one_hot(labels, model.num_classes))
    return float(np.mean(1.0 - q[np.arange(labels.size), labels]))


class EpochEvaluator:
    """Assembles one EpochRecord per epoch.

    Owns the ground truth (test clean labels, training flip mask) so the
    training loop never has to read it. Without a flip mask the selection
    metrics are reported as 0 with the ``no_truth`` flag.
    """

    def __init__(self, test_ds, flip_mask=None):
        self.test_ds = test_ds
        self.flip_mask = None if flip_mask is None else np.asarray(flip_mask, dtype=bool)
        self.records = []

    def __call__(self, epoch, model, split, samples, mean_elbo, mean_constraint):
        if self.flip_mask is None:
            metrics = SelectionMetrics(0.0, 0.0, 0.0, split.clean_ratio, ('no_truth',))
        else:
            metrics = selection_metrics(split, self.flip_mask)
        record = EpochRecord(
            epoch=int(epoch),
            test_acc=test_accuracy(model.theta_y, self.test_ds),
            eps_hat=model.eps,
            implied_flip_rate=implied_flip_rate(model, samples),
            sel_precision=metrics.precision,
            sel_recall=metrics.recall,
            sel_f1=metrics.f1,
            clean_ratio=metrics.clean_ratio,
            mean_elbo=float(mean_elbo),
            mean_constraint=float(mean_constraint),
            degenerate_flags=metrics.degenerate_flags,
        )
        if record.degenerate_flags and 'no_truth' not in record.degenerate_flags:
            eval_logger.warning(f'Epoch {epoch}: degenerate selection metrics {record.degenerate_flags}')
        eval_logger.info(
            f'Epoch {epoch}: test_acc={record.test_acc:.4f} eps_hat={record.eps_hat:.4f} '
            f'f1={record.sel_f1:.4f} clean_ratio={record.clean_ratio:.4f} elbo={record.mean_elbo:.4f}'
        )
        self.records.append(record)
        return record


def records_frame(records):
    rows = [astuple(r)[:-1] + (FLAG_SEPARATOR.join(r.degenerate_flags),) for r in records]
    return pd.DataFrame(rows, columns=list(RECORD_COLUMNS))


def write_records(records, path):
    """CSV with the fixed header, one row per epoch, 17 significant digits."""
    try:
        records_frame(records).to_csv(path, index=False, float_format='%.17g')
    except OSError as e:
        eval_logger.error(f'Error writing records to {path}: {e}')
        raise OSError(f'cannot write records to {path}: {e}') from e
    eval_logger.info(f'Wrote {len(records)} epoch records to {path}')
    return path


def read_records(path):
    frame = pd.read_csv(path, float_precision='round_trip', keep_default_na=False,
                        dtype={'degenerate_flags': str})
    if tuple(frame.columns) != RECORD_COLUMNS:
        raise ValueError(f'{path}: unexpected header {list(frame.columns)}')
    names = [f.name for f in fields(EpochRecord)]
    records = []
    for row in frame.itertuples(index=False):
        values = dict(zip(names, row))
        flags = values.pop('degenerate_flags')
        values = {k: (int(v) if k == 'epoch' else float(v)) for k, v in values.items()}
        records.append(EpochRecord(**values, degenerate_flags=tuple(flags.split(FLAG_SEPARATOR)) if flags else ()))
    return records
