"""Preliminary prediction of true labels and item difficulty levels.

True labels come from majority voting. Workers get an ability proportional
to their agreement rate with those labels, and each item gets an easiness
``eps`` fitted under a logistic link::

    p(correct) = 1 / (1 + (C - 1) * exp(-ability * eps))

Items are then grouped into ``H`` equal-frequency levels by difficulty
``1/eps``; level 0 is the easiest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .baselines import majority_vote
from .dataset import LabelSet

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 4.0
EPS_MAX = 1e3


@dataclass(frozen=True)
class InitResult:
    T0: np.ndarray          # per-item class
    R: np.ndarray           # per-worker correct rate
    ability: np.ndarray     # scale * R
    epsilon: np.ndarray     # per-item easiness, >= 0
    Q0: np.ndarray          # per-item level, 0 = easiest
    converged: bool = True


def worker_correct_rates(labels: LabelSet, T0: np.ndarray) -> np.ndarray:
    """Fraction of each worker's labels that agree with ``T0``.

    Workers with no labels get ``1/C``.
    """
    agree = (labels.labels == np.asarray(T0)[labels.items]).astype(float)
    hits = np.bincount(labels.workers, weights=agree, minlength=labels.num_workers)
    n = labels.labels_per_worker()
    return np.where(n > 0, hits / np.maximum(n, 1), 1.0 / labels.num_classes)


def label_correct_prob(ability, epsilon, num_classes: int):
    """Probability that a worker reproduces the true label."""
    z = np.asarray(ability) * np.asarray(epsilon) - np.log(num_classes - 1.0)
    return expit(z)


def _label_terms(labels: LabelSet, T0, ability):
    correct = labels.labels == np.asarray(T0)[labels.items]
    return correct, np.asarray(ability, dtype=float)[labels.workers]


def difficulty_log_likelihood(labels: LabelSet, T0, ability, epsilon) -> np.ndarray:
    """Per-item log likelihood of the observed labels given ``epsilon``.

    Wrong answers share ``1 - p(correct)`` uniformly over the other classes.
    """
    C = labels.num_classes
    correct, lam = _label_terms(labels, T0, ability)
    z = lam * np.asarray(epsilon, dtype=float)[labels.items] - np.log(C - 1.0)
    terms = np.where(correct, log_expit(z), log_expit(-z) - np.log(C - 1.0))
    return np.bincount(labels.items, weights=terms, minlength=labels.num_items)


def difficulty_gradient(labels: LabelSet, T0, ability, epsilon) -> np.ndarray:
    """d/d eps_i of :func:`difficulty_log_likelihood`: sum_k ability_k (correct - p)."""
    correct, lam = _label_terms(labels, T0, ability)
    p = label_correct_prob(lam, np.asarray(epsilon, dtype=float)[labels.items], labels.num_classes)
    return np.bincount(labels.items, weights=lam * (correct - p), minlength=labels.num_items)


@dataclass(frozen=True)
class DifficultyFit:
    epsilon: np.ndarray
    converged: bool
    trace: np.ndarray       # total objective after each iteration


def fit_difficulties(labels: LabelSet, T0, ability, lr: float = 0.1, iters: int = 100,
                     eps0: float = 1.0, eps_max: float = EPS_MAX,
                     tol: float = 1e-8) -> DifficultyFit:
    """Projected gradient ascent on each item's easiness.

    Every item is an independent 1-d concave problem. Steps start at ``lr``
    times the gradient and are halved until the item objective does not
    decrease. Items whose labels all agree with ``T0`` have a monotone
    objective and are placed at ``eps_max`` directly.
    """
    I = labels.num_items
    correct, lam = _label_terms(labels, T0, ability)
    n_wrong = np.bincount(labels.items, weights=~correct, minlength=I)
    pull = np.bincount(labels.items, weights=lam, minlength=I)
    saturated = (n_wrong == 0) & (pull > 0)

    eps = np.full(I, float(eps0))
    eps[saturated] = eps_max
    free = ~saturated
    obj = difficulty_log_likelihood(labels, T0, ability, eps)
    trace = [float(obj.sum())]
    converged = False
    for _ in range(iters):
        grad = np.where(free, difficulty_gradient(labels, T0, ability, eps), 0.0)
        step = np.full(I, lr)
        active = np.abs(step * grad) > tol
        new_eps = eps.copy()
        new_obj = obj.copy()
        for _ in range(60):
            cand = np.clip(eps + step * grad, 0.0, eps_max)
            cand_obj = difficulty_log_likelihood(labels, T0, ability, np.where(active, cand, eps))
            ok = active & (cand_obj >= obj)
            new_eps[ok] = cand[ok]
            new_obj[ok] = cand_obj[ok]
            active &= ~ok
            step[active] *= 0.5
            active &= np.abs(step * grad) > tol
            if not active.any():
                break
        change = np.abs(new_eps - eps).max(initial=0.0)
        eps, obj = new_eps, new_obj
        trace.append(float(obj.sum()))
        if change < tol:
            converged = True
            break
    if not converged:
        logger.info("difficulty fit did not converge in %d iterations", iters)
    return DifficultyFit(eps, converged, np.asarray(trace))


def assign_levels(epsilon, H: int) -> np.ndarray:
    """Equal-frequency split into ``H`` levels by difficulty ``1/eps``.

    Level 0 holds the easiest items (largest ``eps``); ties keep item order.
    """
    epsilon = np.asarray(epsilon, dtype=float)
    if H < 1:
        raise ValueError("H must be >= 1")
    if H > epsilon.size:
        raise ValueError(f"H={H} exceeds the number of items ({epsilon.size})")
    order = np.argsort(-epsilon, kind="stable")
    Q = np.empty(epsilon.size, dtype=np.int64)
    for h, group in enumerate(np.array_split(order, H)):
        Q[group] = h
    return Q


def initialize(labels: LabelSet, H: int, scale: float = DEFAULT_SCALE, seed: int = 0,
               lr: float = 0.1, iters: int = 100) -> InitResult:
    """Majority-vote labels plus difficulty levels from the logistic fit."""
    T0 = majority_vote(labels, seed)
    R = worker_correct_rates(labels, T0)
    ability = scale * R
    fit = fit_difficulties(labels, T0, ability, lr=lr, iters=iters)
    return InitResult(T0, R, ability, fit.epsilon, assign_levels(fit.epsilon, H), fit.converged)


def random_initialize(labels: LabelSet, H: int, seed: int = 0) -> InitResult:
    """Uniformly random labels and levels, for ablation runs."""
    rng = np.random.default_rng(seed)
    I, C = labels.num_items, labels.num_classes
    T0 = rng.integers(C, size=I)
    Q0 = rng.integers(H, size=I)
    R = worker_correct_rates(labels, T0)
    return InitResult(T0, R, DEFAULT_SCALE * R, np.ones(I), Q0)
