"""Gibbs samplers for IDBLA and Fixed-IDBLA.

Levels are 0-based. In Fixed-IDBLA the last two levels (``H-2`` easy,
``H-1`` hard) use worker-independent fixed confusion matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import LabelSet
from .initpredict import InitResult

MODELS = ("idbla", "fidbla")


class FixedLevelError(ValueError):
    """Raised when asked to resample a fixed Fixed-IDBLA level."""


@dataclass(frozen=True)
class Hyperparams:
    omega: float = 1.0
    gamma_alpha: float = 1.0
    gamma_beta: float = 1.0
    psi: float = 1.0
    nu: float = 0.1
    delta: float = 0.8
    H: int = 2

    def __post_init__(self):
        for name in ("omega", "gamma_alpha", "gamma_beta", "psi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (0 < self.nu < 1 and 0 < self.delta < 1):
            raise ValueError("nu and delta must lie in (0, 1)")
        if self.H < 1:
            raise ValueError("H must be >= 1")

    def check_model(self, model: str) -> None:
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}")
        if model == "fidbla" and self.H < 3:
            raise ValueError("Fixed-IDBLA needs H >= 3")


def fixed_pi_matrices(nu: float, delta: float, C: int) -> tuple[np.ndarray, np.ndarray]:
    """Easy (diagonal ``1-nu``) and hard (diagonal ``1-delta``) confusion matrices."""
    if C < 2:
        raise ValueError("C must be >= 2")

    def build(err):
        m = np.full((C, C), err / (C - 1))
        np.fill_diagonal(m, 1.0 - err)
        return m

    return build(nu), build(delta)


def dirichlet(concentration, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draws along the last axis via normalized Gamma variates.

    Shapes below 1 use ``G(a) = G(a + 1) * U**(1/a)`` in log space, so rows
    stay strictly positive even for tiny concentrations.
    """
    a = np.asarray(concentration, dtype=float)
    small = a < 1.0
    if not small.any():
        g = rng.gamma(a)
        return g / g.sum(axis=-1, keepdims=True)
    log_g = np.log(rng.gamma(np.where(small, a + 1.0, a)))
    log_g = np.where(small, log_g + np.log(rng.random(a.shape)) / a, log_g)
    w = np.exp(log_g - log_g.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def _categorical(log_w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of unnormalized log weights."""
    log_w = np.atleast_2d(log_w)
    top = log_w.max(axis=1, keepdims=True)
    assert np.all(np.isfinite(top)), "all log-weights are -inf"
    p = np.exp(log_w - top)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(log_w.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), log_w.shape[1] - 1)


@dataclass
class LatentState:
    T: np.ndarray
    Q: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    pi: np.ndarray          # K x H x C x C


@dataclass
class CountCache:
    n_l: np.ndarray         # K x H x C x C
    n_t: np.ndarray         # C
    n_q: np.ndarray         # H

    @classmethod
    def from_assignments(cls, labels: LabelSet, T, Q, H: int) -> "CountCache":
        K, C = labels.num_workers, labels.num_classes
        T, Q = np.asarray(T), np.asarray(Q)
        flat = ((labels.workers * H + Q[labels.items]) * C + T[labels.items]) * C + labels.labels
        n_l = np.bincount(flat, minlength=K * H * C * C).reshape(K, H, C, C)
        return cls(n_l, np.bincount(T, minlength=C), np.bincount(Q, minlength=H))

    def _item(self, labels: LabelSet, i: int, t: int, h: int, sign: int) -> None:
        rec = labels.item_records(i)
        np.add.at(self.n_l, (labels.workers[rec], h, t, labels.labels[rec]), sign)
        self.n_t[t] += sign
        self.n_q[h] += sign

    def remove_item(self, labels: LabelSet, i: int, t: int, h: int) -> None:
        self._item(labels, i, t, h, -1)

    def add_item(self, labels: LabelSet, i: int, t: int, h: int) -> None:
        self._item(labels, i, t, h, +1)

    def equals(self, other: "CountCache") -> bool:
        return (np.array_equal(self.n_l, other.n_l) and np.array_equal(self.n_t, other.n_t)
                and np.array_equal(self.n_q, other.n_q))


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def t_log_weights(labels: LabelSet, state: LatentState, items=None) -> np.ndarray:
    """Unnormalized log p(T_i = t | rest) for the given items (all by default)."""
    log_pi = _log(state.pi)
    if items is None:
        out = np.tile(_log(state.alpha), (labels.num_items, 1))
        contrib = log_pi[labels.workers, state.Q[labels.items], :, labels.labels]
        for t in range(labels.num_classes):
            out[:, t] += np.bincount(labels.items, weights=contrib[:, t],
                                     minlength=labels.num_items)
        return out
    rec = labels.item_records(items)
    h = state.Q[items]
    return _log(state.alpha) + log_pi[labels.workers[rec], h, :, labels.labels[rec]].sum(axis=0)


def q_log_weights(labels: LabelSet, state: LatentState, items=None) -> np.ndarray:
    """Unnormalized log p(Q_i = h | rest) for the given items (all by default)."""
    log_pi = _log(state.pi)
    H = state.beta.size
    if items is None:
        out = np.tile(_log(state.beta), (labels.num_items, 1))
        contrib = log_pi[labels.workers, :, state.T[labels.items], labels.labels]
        for h in range(H):
            out[:, h] += np.bincount(labels.items, weights=contrib[:, h],
                                     minlength=labels.num_items)
        return out
    rec = labels.item_records(items)
    t = state.T[items]
    return _log(state.beta) + log_pi[labels.workers[rec], :, t, labels.labels[rec]].sum(axis=0)


def sample_T_i(i: int, labels: LabelSet, state: LatentState, cache: CountCache,
               rng: np.random.Generator) -> int:
    cache.remove_item(labels, i, state.T[i], state.Q[i])
    t = int(_categorical(t_log_weights(labels, state, i), rng)[0])
    state.T[i] = t
    cache.add_item(labels, i, t, state.Q[i])
    return t


def sample_Q_i(i: int, labels: LabelSet, state: LatentState, cache: CountCache,
               rng: np.random.Generator) -> int:
    cache.remove_item(labels, i, state.T[i], state.Q[i])
    h = int(_categorical(q_log_weights(labels, state, i), rng)[0])
    state.Q[i] = h
    cache.add_item(labels, i, state.T[i], h)
    return h


def free_levels(model: str, H: int) -> range:
    return range(H - 2) if model == "fidbla" else range(H)


def sample_pi_row(k: int, h: int, t: int, cache: CountCache, hyper: Hyperparams,
                  rng: np.random.Generator, model: str = "idbla") -> np.ndarray:
    if h not in free_levels(model, hyper.H):
        raise FixedLevelError(f"fixed level {h} cannot be resampled")
    conc = hyper.psi if model == "fidbla" else hyper.omega
    return dirichlet(cache.n_l[k, h, t] + conc, rng)


def sample_pi(cache: CountCache, hyper: Hyperparams, rng: np.random.Generator,
              model: str, out: np.ndarray) -> np.ndarray:
    """Resample every free confusion row in place."""
    free = free_levels(model, hyper.H).stop
    conc = hyper.psi if model == "fidbla" else hyper.omega
    out[:, :free] = dirichlet(cache.n_l[:, :free] + conc, rng)
    return out


def sample_alpha(cache: CountCache, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    return dirichlet(cache.n_t + hyper.gamma_alpha, rng)


def sample_beta(cache: CountCache, hyper: Hyperparams, rng: np.random.Generator) -> np.ndarray:
    return dirichlet(cache.n_q + hyper.gamma_beta, rng)


def fidbla_levels(Q0: np.ndarray, H: int) -> np.ndarray:
    """Map difficulty-ordered levels onto Fixed-IDBLA's layout.

    The easiest group goes to the fixed easy level ``H-2``, the hardest to
    the fixed hard level ``H-1``; middle groups fill the free levels.
    """
    Q0 = np.asarray(Q0)
    mapping = np.empty(H, dtype=np.int64)
    mapping[0] = H - 2
    mapping[H - 1] = H - 1
    mapping[1:H - 1] = np.arange(H - 2)
    return mapping[Q0]


def initial_state(model: str, labels: LabelSet, init: InitResult,
                  hyper: Hyperparams) -> LatentState:
    """Counting-based start: alpha, beta from T0/Q0, pi add-one smoothed."""
    H, C, I = hyper.H, labels.num_classes, labels.num_items
    T = np.array(init.T0, dtype=np.int64)
    Q = fidbla_levels(init.Q0, H) if model == "fidbla" else np.array(init.Q0, dtype=np.int64)
    cache = CountCache.from_assignments(labels, T, Q, H)
    alpha = cache.n_t / I
    beta = cache.n_q / I
    pi = (cache.n_l + 1.0) / (cache.n_l.sum(axis=3, keepdims=True) + C)
    if model == "fidbla":
        easy, hard = fixed_pi_matrices(hyper.nu, hyper.delta, C)
        pi[:, H - 2] = easy
        pi[:, H - 1] = hard
    return LatentState(T, Q, alpha, beta, pi)


@dataclass
class PosteriorSummary:
    t_marginal: np.ndarray      # I x C
    q_marginal: np.ndarray      # I x H
    pi_mean: np.ndarray
    alpha_mean: np.ndarray
    beta_mean: np.ndarray
    n_samples: int
    extra: dict = field(default_factory=dict)

    @property
    def T_hat(self) -> np.ndarray:
        return self.t_marginal.argmax(axis=1)

    @property
    def Q_hat(self) -> np.ndarray:
        return self.q_marginal.argmax(axis=1)

    @classmethod
    def merge(cls, summaries) -> "PosteriorSummary":
        """Pool chains, weighting each by its sample count."""
        summaries = list(summaries)
        w = np.array([s.n_samples for s in summaries], dtype=float)
        w /= w.sum()

        def avg(name):
            return sum(wi * getattr(s, name) for wi, s in zip(w, summaries))

        return cls(avg("t_marginal"), avg("q_marginal"), avg("pi_mean"), avg("alpha_mean"),
                   avg("beta_mean"), int(sum(s.n_samples for s in summaries)))


def gibbs_sweep(model: str, labels: LabelSet, state: LatentState, hyper: Hyperparams,
                rng: np.random.Generator) -> CountCache:
    """One systematic scan: all T, all Q, free pi rows, alpha, beta.

    Given pi, alpha and beta the items are conditionally independent, so
    each block is drawn in one vectorized pass.
    """
    state.T = _categorical(t_log_weights(labels, state), rng)
    state.Q = _categorical(q_log_weights(labels, state), rng)
    cache = CountCache.from_assignments(labels, state.T, state.Q, hyper.H)
    sample_pi(cache, hyper, rng, model, state.pi)
    state.alpha = sample_alpha(cache, hyper, rng)
    state.beta = sample_beta(cache, hyper, rng)
    return cache


def run_gibbs(model: str, labels: LabelSet, init: InitResult, hyper: Hyperparams,
              n_samples: int = 500, burn_in: int = 100, seed: int = 0) -> PosteriorSummary:
    """Run ``burn_in + n_samples`` sweeps and summarize the kept samples."""
    hyper.check_model(model)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    state = initial_state(model, labels, init, hyper)
    I, C, H = labels.num_items, labels.num_classes, hyper.H
    t_counts = np.zeros((I, C))
    q_counts = np.zeros((I, H))
    pi_sum = np.zeros_like(state.pi)
    alpha_sum = np.zeros(C)
    beta_sum = np.zeros(H)
    rows = np.arange(I)
    for sweep in range(burn_in + n_samples):
        gibbs_sweep(model, labels, state, hyper, rng)
        if sweep >= burn_in:
            t_counts[rows, state.T] += 1
            q_counts[rows, state.Q] += 1
            pi_sum += state.pi
            alpha_sum += state.alpha
            beta_sum += state.beta
    n = float(n_samples)
    pi_mean = pi_sum / n
    if model == "fidbla":
        # averaging identical slices can drift by an ulp; keep them exact
        pi_mean[:, H - 2:] = state.pi[:, H - 2:]
    return PosteriorSummary(t_counts / n, q_counts / n, pi_mean, alpha_sum / n,
                            beta_sum / n, n_samples)
