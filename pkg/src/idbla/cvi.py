"""Collapsed variational inference for IDBLA.

``pi``, ``alpha`` and ``beta`` are integrated out; ``q(T_i)`` (``lam``) and
``q(Q_i)`` (``rho``) are updated by coordinate ascent, with expected log
counts replaced by their second-order Taylor expansion around the mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from .dataset import LabelSet
from .gibbs import CountCache, Hyperparams
from .initpredict import InitResult

logger = logging.getLogger(__name__)

INIT_WEIGHT = 0.9


# ---------------------------------------------------------------------------
# Exact collapsed model
# ---------------------------------------------------------------------------

def collapsed_joint(labels: LabelSet, T, Q, hyper: Hyperparams) -> float:
    """log p(T, Q, L) up to a constant, with pi, alpha, beta integrated out."""
    H, C, I = hyper.H, labels.num_classes, labels.num_items
    cache = CountCache.from_assignments(labels, T, Q, H)
    w, ga, gb = hyper.omega, hyper.gamma_alpha, hyper.gamma_beta
    value = gammaln(cache.n_t + ga).sum() - gammaln(I + C * ga)
    value += gammaln(cache.n_q + gb).sum() - gammaln(I + H * gb)
    value += gammaln(cache.n_l + w).sum() - gammaln(cache.n_l.sum(axis=3) + C * w).sum()
    return float(value)


def _excluding(labels: LabelSet, T, Q, i: int, H: int) -> CountCache:
    cache = CountCache.from_assignments(labels, T, Q, H)
    cache.remove_item(labels, i, int(T[i]), int(Q[i]))
    return cache


def collapsed_conditional_T(i: int, t: int, labels: LabelSet, T, Q, hyper: Hyperparams) -> float:
    """Unnormalized p(T_i = t | T^-i, Q, L) from leave-one-out counts."""
    cache = _excluding(labels, T, Q, i, hyper.H)
    rec = labels.item_records(i)
    ks, cs, h = labels.workers[rec], labels.labels[rec], Q[i]
    num = cache.n_l[ks, h, t, cs] + hyper.omega
    den = cache.n_l[ks, h, t].sum(axis=-1) + labels.num_classes * hyper.omega
    return float((cache.n_t[t] + hyper.gamma_alpha) * np.prod(num / den))


def collapsed_conditional_Q(i: int, h: int, labels: LabelSet, T, Q, hyper: Hyperparams) -> float:
    """Unnormalized p(Q_i = h | T, Q^-i, L) from leave-one-out counts."""
    cache = _excluding(labels, T, Q, i, hyper.H)
    rec = labels.item_records(i)
    ks, cs, t = labels.workers[rec], labels.labels[rec], T[i]
    num = cache.n_l[ks, h, t, cs] + hyper.omega
    den = cache.n_l[ks, h, t].sum(axis=-1) + labels.num_classes * hyper.omega
    return float((cache.n_q[h] + hyper.gamma_beta) * np.prod(num / den))


# ---------------------------------------------------------------------------
# Moments of leave-one-out counts
# ---------------------------------------------------------------------------

@dataclass
class ExpectedCounts:
    """Mean/variance of the leave-one-out counts seen by one row update.

    Rows of the ``label_*``/``total_*`` arrays follow ``workers`` (S_i);
    columns run over levels for a rho update and over classes for a lam
    update.
    """

    workers: np.ndarray
    label_mean: np.ndarray      # N(k, ., ., L_ik)
    label_var: np.ndarray
    total_mean: np.ndarray      # N(k, ., ., .)
    total_var: np.ndarray
    prior_mean: np.ndarray      # N_q(h) or N_t(t)
    prior_var: np.ndarray


def count_moments(i: int, lam: np.ndarray, rho: np.ndarray, labels: LabelSet,
                  target: str = "rho") -> ExpectedCounts:
    """Direct sums of Bernoulli means/variances over the other items.

    For ``target="rho"`` each other item j labeled by worker k contributes a
    Bernoulli with mean ``(lam_j . lam_i) * rho_j``; for ``target="lam"`` the
    mean is ``(rho_j . rho_i) * lam_j``.
    """
    if target not in ("rho", "lam"):
        raise ValueError("target must be 'rho' or 'lam'")
    rec = labels.item_records(i)
    ks, cs = labels.workers[rec], labels.labels[rec]
    if target == "rho":
        weight = lam @ lam[i]
        dist = rho
    else:
        weight = rho @ rho[i]
        dist = lam
    others = np.ones(labels.num_items, dtype=bool)
    others[i] = False
    D = dist.shape[1]
    out = [np.zeros((ks.size, D)) for _ in range(4)]
    for n, (k, c) in enumerate(zip(ks, cs)):
        sel = (labels.workers == k) & others[labels.items]
        j = labels.items[sel]
        m = weight[j, None] * dist[j]
        same = labels.labels[sel] == c
        out[0][n] = m[same].sum(axis=0)
        out[1][n] = (m[same] * (1 - m[same])).sum(axis=0)
        out[2][n] = m.sum(axis=0)
        out[3][n] = (m * (1 - m)).sum(axis=0)
    p = dist[others]
    return ExpectedCounts(ks, *out, p.sum(axis=0), (p * (1 - p)).sum(axis=0))


def gaussian_log_expectation(mean, variance, offset):
    """Second-order approximation of E[log(N + offset)] from N's mean and variance."""
    shifted = np.asarray(mean, dtype=float) + offset
    if np.any(shifted <= 0):
        raise ValueError("mean + offset must be positive")
    return np.log(shifted) - np.asarray(variance, dtype=float) / (2.0 * shifted ** 2)


def _row_from_moments(m: ExpectedCounts, prior_offset: float, omega: float, C: int) -> np.ndarray:
    log_w = gaussian_log_expectation(m.prior_mean, m.prior_var, prior_offset)
    log_w = log_w + (gaussian_log_expectation(m.label_mean, m.label_var, omega)
                     - gaussian_log_expectation(m.total_mean, m.total_var, C * omega)).sum(axis=0)
    w = np.exp(log_w - log_w.max())
    return w / w.sum()


def update_rho_row(i: int, lam: np.ndarray, rho: np.ndarray, labels: LabelSet,
                   hyper: Hyperparams) -> np.ndarray:
    """New q(Q_i) given every other row, via the direct moments."""
    m = count_moments(i, lam, rho, labels, "rho")
    return _row_from_moments(m, hyper.gamma_beta, hyper.omega, labels.num_classes)


def update_lambda_row(i: int, lam: np.ndarray, rho: np.ndarray, labels: LabelSet,
                      hyper: Hyperparams) -> np.ndarray:
    """New q(T_i) given every other row, via the direct moments."""
    m = count_moments(i, lam, rho, labels, "lam")
    return _row_from_moments(m, hyper.gamma_alpha, hyper.omega, labels.num_classes)


# ---------------------------------------------------------------------------
# Incremental sufficient statistics
# ---------------------------------------------------------------------------

class _MomentTensors:
    """Per-(worker, observed class) sums of item-level moment products.

    ``first[k,c,t,h]   = sum_j lam_jt rho_jh``
    ``sq_lam[k,c,t,u,h] = sum_j lam_jt lam_ju rho_jh^2``  (rho-update variance)
    ``sq_rho[k,c,t,h,g] = sum_j lam_jt^2 rho_jh rho_jg``  (lam-update variance)
    plus the same summed over ``c``, and the column sums/square sums of
    ``lam`` and ``rho``. Item ``i``'s own term is subtracted on query.
    """

    def __init__(self, labels: LabelSet, lam: np.ndarray, rho: np.ndarray):
        self.labels = labels
        self.C, self.H = lam.shape[1], rho.shape[1]
        K, C, H = labels.num_workers, self.C, self.H
        l, r = lam[labels.items], rho[labels.items]
        n = labels.num_labels
        first = np.einsum("nt,nh->nth", l, r).reshape(n, C * H)
        sq_lam = np.einsum("nt,nu,nh->ntuh", l, l, r * r).reshape(n, C * C * H)
        sq_rho = np.einsum("nt,nh,ng->nthg", l * l, r, r).reshape(n, C * H * H)
        rows = labels.workers * C + labels.labels
        group = sparse.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(K * C, n))
        self.first = (group @ first).reshape(K, C, C, H)
        self.sq_lam = (group @ sq_lam).reshape(K, C, C, C, H)
        self.sq_rho = (group @ sq_rho).reshape(K, C, C, H, H)
        self.first_tot = self.first.sum(axis=1)
        self.sq_lam_tot = self.sq_lam.sum(axis=1)
        self.sq_rho_tot = self.sq_rho.sum(axis=1)
        self.lam_sum, self.lam_sq = lam.sum(axis=0), (lam * lam).sum(axis=0)
        self.rho_sum, self.rho_sq = rho.sum(axis=0), (rho * rho).sum(axis=0)

    @staticmethod
    def _own(li, ri):
        return (np.outer(li, ri), np.einsum("t,u,h->tuh", li, li, ri * ri),
                np.einsum("t,h,g->thg", li * li, ri, ri))

    def moments(self, i: int, li: np.ndarray, ri: np.ndarray, target: str) -> ExpectedCounts:
        rec = self.labels.item_records(i)
        ks, cs = self.labels.workers[rec], self.labels.labels[rec]
        own_first, own_sq_lam, own_sq_rho = self._own(li, ri)
        if target == "lam":
            def mom(first, sq):
                mean = np.einsum("nth,h->nt", first - own_first, ri)
                sq2 = np.einsum("nthg,h,g->nt", sq - own_sq_rho, ri, ri)
                return np.maximum(mean, 0.0), np.maximum(mean - sq2, 0.0)

            lm, lv = mom(self.first[ks, cs], self.sq_rho[ks, cs])
            tm, tv = mom(self.first_tot[ks], self.sq_rho_tot[ks])
            pm = np.maximum(self.lam_sum - li, 0.0)
            pv = np.maximum(pm - (self.lam_sq - li * li), 0.0)
        else:
            def mom(first, sq):
                mean = np.einsum("nth,t->nh", first - own_first, li)
                sq2 = np.einsum("ntuh,t,u->nh", sq - own_sq_lam, li, li)
                return np.maximum(mean, 0.0), np.maximum(mean - sq2, 0.0)

            lm, lv = mom(self.first[ks, cs], self.sq_lam[ks, cs])
            tm, tv = mom(self.first_tot[ks], self.sq_lam_tot[ks])
            pm = np.maximum(self.rho_sum - ri, 0.0)
            pv = np.maximum(pm - (self.rho_sq - ri * ri), 0.0)
        return ExpectedCounts(ks, lm, lv, tm, tv, pm, pv)

    def replace(self, i: int, old_l, old_r, new_l, new_r) -> None:
        rec = self.labels.item_records(i)
        ks, cs = self.labels.workers[rec], self.labels.labels[rec]
        old, new = self._own(old_l, old_r), self._own(new_l, new_r)
        d_first, d_sq_lam, d_sq_rho = (b - a for a, b in zip(old, new))
        self.first[ks, cs] += d_first
        self.sq_lam[ks, cs] += d_sq_lam
        self.sq_rho[ks, cs] += d_sq_rho
        self.first_tot[ks] += d_first
        self.sq_lam_tot[ks] += d_sq_lam
        self.sq_rho_tot[ks] += d_sq_rho
        self.lam_sum += new_l - old_l
        self.lam_sq += new_l * new_l - old_l * old_l
        self.rho_sum += new_r - old_r
        self.rho_sq += new_r * new_r - old_r * old_r


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass
class CviResult:
    lam: np.ndarray
    rho: np.ndarray
    trace: list = field(default_factory=list)   # max abs change per sweep
    converged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.trace)

    @property
    def T_hat(self) -> np.ndarray:
        return self.lam.argmax(axis=1)

    @property
    def Q_hat(self) -> np.ndarray:
        return self.rho.argmax(axis=1)

    def expected_counts(self, labels: LabelSet) -> np.ndarray:
        """E_q[N_l(k, h, t, c)] as a K x H x C x C array."""
        K, C, H = labels.num_workers, labels.num_classes, self.rho.shape[1]
        out = np.zeros((K, H, C, C))
        vals = np.einsum("nt,nh->nht", self.lam[labels.items], self.rho[labels.items])
        np.add.at(out, (labels.workers, slice(None), slice(None), labels.labels), vals)
        return out

    def pi_hat(self, labels: LabelSet, hyper: Hyperparams) -> np.ndarray:
        """Posterior-mean confusion matrices under the expected counts."""
        n = self.expected_counts(labels)
        return (n + hyper.omega) / (n.sum(axis=3, keepdims=True) + labels.num_classes * hyper.omega)


def soft_start(hard: np.ndarray, size: int, weight: float = INIT_WEIGHT) -> np.ndarray:
    """Mix a point mass with the uniform distribution."""
    return weight * np.eye(size)[np.asarray(hard)] + (1.0 - weight) / size


def cvi_sweep(labels: LabelSet, lam: np.ndarray, rho: np.ndarray, hyper: Hyperparams) -> float:
    """Update ``lam[i]`` then ``rho[i]`` for every item in place; return max change."""
    stats = _MomentTensors(labels, lam, rho)
    C = labels.num_classes
    change = 0.0
    for i in range(labels.num_items):
        old_l, old_r = lam[i].copy(), rho[i].copy()
        m = stats.moments(i, old_l, old_r, "lam")
        new_l = _row_from_moments(m, hyper.gamma_alpha, hyper.omega, C)
        stats.replace(i, old_l, old_r, new_l, old_r)
        m = stats.moments(i, new_l, old_r, "rho")
        new_r = _row_from_moments(m, hyper.gamma_beta, hyper.omega, C)
        stats.replace(i, new_l, old_r, new_l, new_r)
        lam[i], rho[i] = new_l, new_r
        change = max(change, np.abs(new_l - old_l).max(), np.abs(new_r - old_r).max())
    return float(change)


def run_cvi(labels: LabelSet, init: InitResult, hyper: Hyperparams, max_iters: int = 200,
            tol: float = 1e-4, lam0: np.ndarray = None, rho0: np.ndarray = None) -> CviResult:
    """Coordinate ascent until the largest parameter change falls below ``tol``.

    Starts from softened point masses on ``init.T0``/``init.Q0`` unless
    explicit ``lam0``/``rho0`` are given.
    """
    lam = soft_start(init.T0, labels.num_classes) if lam0 is None else np.array(lam0, dtype=float)
    rho = soft_start(init.Q0, hyper.H) if rho0 is None else np.array(rho0, dtype=float)
    result = CviResult(lam, rho)
    for it in range(max_iters):
        change = cvi_sweep(labels, lam, rho, hyper)
        result.trace.append(change)
        logger.debug("cvi sweep %d max change %.3g", it + 1, change)
        if change < tol:
            result.converged = True
            break
    return result
