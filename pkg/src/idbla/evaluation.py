"""Error rates, negative log likelihoods, difficulty diagnostics and H selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import LabelSet, TruthMap


def _truth_arrays(truth: TruthMap) -> tuple[np.ndarray, np.ndarray]:
    keys = np.array(sorted(truth), dtype=np.int64)
    return keys, np.array([truth[i] for i in keys.tolist()], dtype=np.int64)


def error_rate(predicted, truth: TruthMap) -> float:
    """Fraction of ground-truth items whose prediction is wrong."""
    if not truth:
        raise ValueError("empty ground truth")
    keys, values = _truth_arrays(truth)
    predicted = np.asarray(predicted)
    if keys.max() >= predicted.size:
        raise ValueError("predictions do not cover every ground-truth item")
    return float(np.mean(predicted[keys] != values))


def accuracy(predicted, truth: TruthMap) -> float:
    return 1.0 - error_rate(predicted, truth)


def _checked(cells: np.ndarray) -> np.ndarray:
    if np.any(cells <= 0):
        raise ValueError("observed label has zero probability under the model")
    return cells


def _nll(cells: np.ndarray) -> float:
    return float(-np.log(_checked(cells)).sum())


def nll_idbla(labels: LabelSet, pi: np.ndarray, T, Q) -> float:
    """-log p(L | pi, T, Q) aggregated through the N_l(k, h, t, c) counts."""
    K, H, C, _ = pi.shape
    T, Q = np.asarray(T), np.asarray(Q)
    flat = ((labels.workers * H + Q[labels.items]) * C + T[labels.items]) * C + labels.labels
    counts = np.bincount(flat, minlength=pi.size)
    observed = np.flatnonzero(counts)
    return float(-(counts[observed] * np.log(_checked(pi.ravel()[observed]))).sum())


def nll_confusion(labels: LabelSet, phi: np.ndarray, T) -> float:
    """-log p(L | phi, T) for one confusion matrix per worker."""
    T = np.asarray(T)
    return _nll(phi[labels.workers, T[labels.items], labels.labels])


def item_error_rates(labels: LabelSet, truth: TruthMap) -> dict:
    """E_i: share of item i's labels that disagree with its ground truth."""
    keys, values = _truth_arrays(truth)
    full = np.full(labels.num_items, -1)
    full[keys] = values
    known = full[labels.items] >= 0
    wrong = np.bincount(labels.items[known],
                        weights=labels.labels[known] != full[labels.items[known]],
                        minlength=labels.num_items)
    n = np.bincount(labels.items[known], minlength=labels.num_items)
    return {int(i): float(wrong[i] / n[i]) for i in keys.tolist() if n[i] > 0}


def difficulty_quality(labels: LabelSet, truth: TruthMap, Q_hat, H: int) -> np.ndarray:
    """Mean E_i per predicted level; ``nan`` where a level holds no evaluated item."""
    Q_hat = np.asarray(Q_hat)
    per_item = item_error_rates(labels, truth)
    out = np.full(H, np.nan)
    for h in range(H):
        vals = [e for i, e in per_item.items() if Q_hat[i] == h]
        if vals:
            out[h] = float(np.mean(vals))
    return out


def level_agreement(labels: LabelSet, T_hat, Q_hat, H: int) -> np.ndarray:
    """Per predicted level, share of labels agreeing with the predicted truth.

    Uses no ground truth, so it ranks levels from the model's own view:
    the level with the lowest agreement is the predicted hardest.
    """
    T_hat, Q_hat = np.asarray(T_hat), np.asarray(Q_hat)
    lvl = Q_hat[labels.items]
    agree = np.bincount(lvl, weights=labels.labels == T_hat[labels.items], minlength=H)
    n = np.bincount(lvl, minlength=H)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, agree / n, np.nan)


@dataclass
class EvalReport:
    error_rate: float
    nll: float
    level_errors: np.ndarray
    n_items: int


@dataclass
class SelectionRow:
    H: int
    nll_mean: float
    nll_std: float
    nlls: list


def select_h(labels: LabelSet, candidates, method: str = "idbla", seeds=(0,),
             hyper=None, **fit_kwargs) -> tuple[int, list]:
    """Pick the number of levels whose plug-in fit has the smallest NLL.

    Each candidate is fitted once per seed; the table keeps the per-seed
    NLLs and their mean. Ties go to the smaller H.
    """
    from dataclasses import replace

    from .gibbs import Hyperparams
    from .runner import LEVEL_METHODS, fit

    if method not in LEVEL_METHODS:
        raise ValueError(f"H selection needs a level model, not {method!r}")
    candidates = [int(h) for h in candidates]
    if not candidates:
        raise ValueError("no candidate H values")
    base = hyper or Hyperparams()
    table = []
    for H in candidates:
        hp = replace(base, H=H)
        nlls = [fit(method, labels, hyper=hp, seed=s, **fit_kwargs).nll for s in seeds]
        table.append(SelectionRow(H, float(np.mean(nlls)), float(np.std(nlls)), nlls))
    best = min(table, key=lambda row: (row.nll_mean, row.H))
    return best.H, table
