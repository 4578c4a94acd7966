"""Majority voting and Dawid-Skene EM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataset import DataError, LabelSet

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 0.01


def majority_vote(labels: LabelSet, seed: int = 0) -> np.ndarray:
    """Modal label per item; ties are broken uniformly at random."""
    counts = labels.vote_counts()
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    if empty.size:
        names = ", ".join(labels.item_ids[i] for i in empty[:10])
        raise DataError(f"{empty.size} item(s) have no labels: {names}")
    rng = np.random.default_rng(seed)
    keys = rng.random(counts.shape)
    keys[counts < counts.max(axis=1, keepdims=True)] = -1.0
    return keys.argmax(axis=1)


def _item_log_likelihoods(labels: LabelSet, phi: np.ndarray, p: np.ndarray) -> np.ndarray:
    """I x C matrix of log p_t + sum_k log phi[k, t, L_ik]."""
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi)
        out = np.tile(np.log(p), (labels.num_items, 1))
    contrib = log_phi[labels.workers, :, labels.labels]  # (n_labels, C)
    for t in range(labels.num_classes):
        out[:, t] += np.bincount(labels.items, weights=contrib[:, t], minlength=labels.num_items)
    return out


def ds_e_step(labels: LabelSet, phi: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Posterior over true classes for every item, computed in log space."""
    log_post = _item_log_likelihoods(labels, phi, p)
    return np.exp(log_post - logsumexp(log_post, axis=1, keepdims=True))


def ds_m_step(labels: LabelSet, posterior: np.ndarray,
              smoothing: float = DEFAULT_SMOOTHING) -> tuple[np.ndarray, np.ndarray]:
    """Soft-count confusion matrices ``phi[k, t, l]`` and class priors."""
    K, C = labels.num_workers, labels.num_classes
    counts = np.zeros((K, C, C))
    np.add.at(counts, (labels.workers, slice(None), labels.labels), posterior[labels.items])
    counts += smoothing
    totals = counts.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore"):
        phi = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / C)
    p = posterior.sum(axis=0) / labels.num_items
    return phi, p


def ds_log_likelihood(labels: LabelSet, phi: np.ndarray, p: np.ndarray,
                      smoothing: float = 0.0) -> float:
    """Observed-data log likelihood, plus ``smoothing * sum log phi``.

    With ``smoothing > 0`` this is the MAP objective that smoothed EM
    increases monotonically; at ``smoothing = 0`` it is the plain
    log likelihood.
    """
    ll = float(logsumexp(_item_log_likelihoods(labels, phi, p), axis=1).sum())
    if smoothing:
        ll += smoothing * float(np.log(phi).sum())
    return ll


@dataclass
class DsState:
    phi: np.ndarray             # K x C x C, rows over observed class
    class_priors: np.ndarray    # C
    posterior: np.ndarray       # I x C
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.trace)

    @property
    def predictions(self) -> np.ndarray:
        return self.posterior.argmax(axis=1)


def ds_em(labels: LabelSet, init_T: np.ndarray, max_iters: int = 200, tol: float = 1e-6,
          smoothing: float = DEFAULT_SMOOTHING) -> DsState:
    """Dawid-Skene EM started from a hard label assignment.

    Each iteration runs an M-step then an E-step and records the objective
    of :func:`ds_log_likelihood` at the new parameters. Stops when the
    relative change drops below ``tol``.
    """
    init_T = np.asarray(init_T)
    posterior = np.eye(labels.num_classes)[init_T]
    state = DsState(np.empty(0), np.empty(0), posterior)
    for it in range(max_iters):
        phi, p = ds_m_step(labels, posterior, smoothing)
        posterior = ds_e_step(labels, phi, p)
        ll = ds_log_likelihood(labels, phi, p, smoothing)
        state.phi, state.class_priors, state.posterior = phi, p, posterior
        state.trace.append(ll)
        logger.debug("ds-em iter %d objective %.6f", it + 1, ll)
        if it > 0:
            prev = state.trace[-2]
            if abs(ll - prev) <= tol * max(abs(prev), 1e-300):
                state.converged = True
                break
    return state
