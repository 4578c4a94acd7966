"""One entry point for every aggregation method."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluation
from .baselines import DEFAULT_SMOOTHING, ds_em, majority_vote
from .cvi import run_cvi
from .dataset import LabelSet
from .gibbs import Hyperparams, run_gibbs
from .initpredict import DEFAULT_SCALE, initialize, random_initialize

METHODS = ("mv", "dsem", "idbla", "fidbla", "cvi")
LEVEL_METHODS = ("idbla", "fidbla", "cvi")
STOCHASTIC_METHODS = ("mv", "idbla", "fidbla", "cvi")
INITS = ("glad", "random")


@dataclass
class FitResult:
    method: str
    T_hat: np.ndarray
    t_marginal: np.ndarray
    Q_hat: Optional[np.ndarray] = None
    q_marginal: Optional[np.ndarray] = None
    confusion: Optional[np.ndarray] = None     # phi (K,C,C) or pi (K,H,C,C)
    nll: float = float("nan")
    trace: list = field(default_factory=list)
    converged: bool = True


def fit(method: str, labels: LabelSet, *, hyper: Optional[Hyperparams] = None, seed: int = 0,
        init: str = "glad", scale: float = DEFAULT_SCALE, samples: int = 500,
        burn_in: int = 100, tol: Optional[float] = None, max_iters: int = 200,
        smoothing: float = DEFAULT_SMOOTHING) -> FitResult:
    """Run ``method`` on ``labels``; ``seed`` drives every random choice.

    ``tol`` defaults to 1e-6 (relative log likelihood) for DS-EM and 1e-4
    (max parameter change) for CVI.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}; choose from {', '.join(INITS)}")
    hyper = hyper or Hyperparams()
    C = labels.num_classes

    if method == "mv":
        T = majority_vote(labels, seed)
        return FitResult(method, T, np.eye(C)[T])

    if method == "dsem":
        state = ds_em(labels, majority_vote(labels, seed), max_iters=max_iters,
                      tol=1e-6 if tol is None else tol, smoothing=smoothing)
        T = state.predictions
        return FitResult(method, T, state.posterior, confusion=state.phi,
                         nll=evaluation.nll_confusion(labels, state.phi, T),
                         trace=list(state.trace), converged=state.converged)

    if method == "fidbla":
        hyper.check_model("fidbla")
    if init == "glad":
        start = initialize(labels, hyper.H, scale=scale, seed=seed)
    else:
        start = random_initialize(labels, hyper.H, seed=seed)

    if method == "cvi":
        res = run_cvi(labels, start, hyper, max_iters=max_iters, tol=1e-4 if tol is None else tol)
        pi = res.pi_hat(labels, hyper)
        T, Q = res.T_hat, res.Q_hat
        return FitResult(method, T, res.lam, Q, res.rho, pi, evaluation.nll_idbla(labels, pi, T, Q),
                         list(res.trace), res.converged)

    summary = run_gibbs(method, labels, start, hyper, n_samples=samples, burn_in=burn_in, seed=seed)
    T, Q = summary.T_hat, summary.Q_hat
    return FitResult(method, T, summary.t_marginal, Q, summary.q_marginal, summary.pi_mean,
                     evaluation.nll_idbla(labels, summary.pi_mean, T, Q))
