"""Oracle self-test suites run by ``nlre selftest``.

Each suite builds small random instances from its own seeded stream and
checks a hand-written quantity against an independent oracle: central
finite differences, the exact marginal likelihood, Monte-Carlo sampling, or
brute-force set arithmetic.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

import model as gm
from logger import log_path, setup_logger
from numkit import Rng, finite_diff_grad, relative_error
from selection import SelectionSplit, clean_count, constraint_loss, curriculum_rate, select_split

selftest_logger = setup_logger('selftest', log_path('selftest'))

SUITES = ('gradients', 'elbo', 'generative', 'selection')

GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-5
ELBO_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


class SuiteFailure(AssertionError):
    pass


def _tiny_model(rng, d=3, num_classes=3, hidden=(5,)):
    model = gm.init_model(d, num_classes, rng, hidden=hidden)
    return replace(model, eps_logit=float(rng.uniform(-2.0, 2.0)))


def _draw_batch(rng, model, size):
    x = rng.normal(0.0, 1.0, size=(size, model.d))
    yhat = rng.integers(0, model.num_classes, size=size)
    return x, yhat


def _block_objective(model, block, x, yhat):
    def objective(value):
        return float(np.mean(gm.elbo(replace(model, **{block: value}), x, yhat)))
    return objective


def check_gradients(seed=0, draws=10, grads_fn=None):
    """Every ELBO block gradient and the constraint gradient against central differences."""
    grads_fn = grads_fn or gm.elbo_grads
    rng = Rng(seed).child('selftest-gradients')
    worst = 0.0
    for draw in range(draws):
        model = _tiny_model(rng)
        x, yhat = _draw_batch(rng, model, 4)
        _, analytic = grads_fn(model, x, yhat)
        for block in gm.ALL_BLOCKS:
            numeric = finite_diff_grad(_block_objective(model, block, x, yhat), getattr(model, block), h=FD_STEP)
            err = relative_error(getattr(analytic, block), numeric)
            worst = max(worst, err)
            if err > GRAD_TOLERANCE:
                raise SuiteFailure(f'draw {draw}: d ELBO / d {block} relative error {err:.3g}')
        split = select_split(rng.random(len(yhat)), 0.5)
        _, analytic = constraint_loss(model.theta_y, _Samples(x, yhat), split)
        numeric = finite_diff_grad(lambda p: constraint_loss(p, _Samples(x, yhat), split)[0], model.theta_y, h=FD_STEP)
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > GRAD_TOLERANCE:
            raise SuiteFailure(f'draw {draw}: constraint gradient relative error {err:.3g}')
    return f'{draws} draws, worst relative error {worst:.2e}'


@dataclass(frozen=True)
class _Samples:
    features: np.ndarray
    noisy_labels: np.ndarray


def check_elbo(seed=0, samples=100, random_q=100):
    """ELBO at the exact posterior equals ln p(yhat|x); any other q stays below it."""
    rng = Rng(seed).child('selftest-elbo')
    model = _tiny_model(rng, num_classes=4)
    x, yhat = _draw_batch(rng, model, samples)
    loglik = gm.marginal_loglik(model, x, yhat)
    tight = gm.elbo(model, x, yhat, q=gm.exact_posterior(model, x, yhat))
    gap = float(np.max(np.abs(tight - loglik)))
    if gap > ELBO_TOLERANCE:
        raise SuiteFailure(f'ELBO at the exact posterior misses the log-likelihood by {gap:.3g}')
    excess = -math.inf
    for _ in range(random_q):
        q = rng.generator.dirichlet(np.ones(model.num_classes), size=samples)
        excess = max(excess, float(np.max(gm.elbo(model, x, yhat, q=q) - loglik)))
    if excess > ELBO_TOLERANCE:
        raise SuiteFailure(f'ELBO exceeds the log-likelihood by {excess:.3g}')
    return f'tightness gap {gap:.2e}, largest bound excess {excess:.2e}'


def check_generative(seed=0, points=1000, repeats=100):
    """Monte-Carlo mislabel frequency within 3 sigma of the analytic probability."""
    rng = Rng(seed).child('selftest-generative')
    model = _tiny_model(rng)
    x = np.repeat(rng.normal(0.0, 1.0, size=(points, model.d)), repeats, axis=0)
    y, yhat = gm.sample_generative(model, x, rng.child('sampling'))
    p = gm.mislabel_probability(model, x)
    analytic = float(p.mean())
    frequency = float(np.mean(y != yhat))
    sigma = math.sqrt(float(np.sum(p * (1.0 - p)))) / p.size
    if abs(frequency - analytic) > 3.0 * sigma:
        raise SuiteFailure(f'mislabel frequency {frequency:.5f} vs analytic {analytic:.5f} (sigma {sigma:.2e})')
    return f'{p.size} draws: frequency {frequency:.5f}, analytic {analytic:.5f}'


def check_selection(seed=0, instances=1000):
    """Split cardinality, nestedness in R and invariance under increasing score maps."""
    rng = Rng(seed).child('selftest-selection')
    for k in range(instances):
        n = int(rng.integers(1, 200))
        scores = rng.random(n)
        if k % 3 == 0:
            scores = np.round(scores, 1)
        eps_a, eps_b = np.sort(rng.random(2))
        rate_a, rate_b = curriculum_rate(eps_a), curriculum_rate(eps_b)
        wide, narrow = select_split(scores, rate_a), select_split(scores, rate_b)
        if wide.clean.size != clean_count(rate_a, n):
            raise SuiteFailure(f'instance {k}: {wide.clean.size} clean for R={rate_a}, N={n}')
        if not np.isin(narrow.clean, wide.clean).all():
            raise SuiteFailure(f'instance {k}: split is not nested in R')
        if not np.array_equal(select_split(np.exp(scores), rate_a).clean, wide.clean):
            raise SuiteFailure(f'instance {k}: split changed under an increasing score transform')
        if not np.array_equal(np.union1d(wide.clean, wide.noisy), np.arange(n)) or np.intersect1d(
                wide.clean, wide.noisy).size:
            raise SuiteFailure(f'instance {k}: clean and noisy sets do not partition the samples')
    return f'{instances} random instances'


_CHECKS = {
    'gradients': check_gradients,
    'elbo': check_elbo,
    'generative': check_generative,
    'selection': check_selection,
}


def run_suites(names=None, seed=0, grads_fn=None):
    """Run the named suites (all by default) and return one SuiteResult each."""
    results = []
    for name in names or SUITES:
        if name not in _CHECKS:
            raise ValueError(f'unknown self-test suite {name!r}; choose from {", ".join(SUITES)}')
        kwargs = {'grads_fn': grads_fn} if name == 'gradients' else {}
        started = time.perf_counter()
        try:
            detail = _CHECKS[name](seed=seed, **kwargs)
            passed = True
        except SuiteFailure as e:
            detail, passed = str(e), False
        seconds = time.perf_counter() - started
        log = selftest_logger.info if passed else selftest_logger.error
        log(f'Suite {name}: {"PASS" if passed else "FAIL"} in {seconds:.2f}s ({detail})')
        results.append(SuiteResult(name, passed, detail, seconds))
    return results
