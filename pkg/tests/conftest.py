import io
import itertools

import numpy as np
import pytest

from idbla.dataset import LabelSet, SynthConfig, generate_synthetic, parse_labels


def make_labels(records, num_classes=None):
    """LabelSet from ``(item, worker, label)`` tuples with 1-based labels."""
    text = "item,worker,label\n" + "".join(f"{i},{k},{c}\n" for i, k, c in records)
    return parse_labels(io.StringIO(text), num_classes=num_classes)


def random_labels(rng, I, K, C, density=0.7):
    """Small random LabelSet where every item has at least one label."""
    items, workers, obs = [], [], []
    for i in range(I):
        mask = rng.random(K) < density
        mask[rng.integers(K)] = True
        for k in np.flatnonzero(mask):
            items.append(i)
            workers.append(k)
            obs.append(rng.integers(C))
    return LabelSet(I, K, C, np.array(items), np.array(workers), np.array(obs),
                    tuple(f"i{i}" for i in range(I)), tuple(f"w{k}" for k in range(K)))


def assignments(n, size):
    """Every vector in ``range(size) ** n`` as an array of shape (size**n, n)."""
    return np.array(list(itertools.product(range(size), repeat=n)), dtype=np.int64).reshape(-1, n)


@pytest.fixture
def toy_records():
    return [("a", "w1", 1), ("a", "w2", 2), ("b", "w1", 1)]


@pytest.fixture(scope="session")
def default_synth():
    return generate_synthetic(SynthConfig())


def exact_marginals(labels, hyper):
    """T and Q marginals of the collapsed posterior by brute-force enumeration."""
    from scipy.special import logsumexp

    from idbla.cvi import collapsed_joint

    I, C, H = labels.num_items, labels.num_classes, hyper.H
    Ts, Qs = assignments(I, C), assignments(I, H)
    logp, t_idx, q_idx = [], [], []
    for a, T in enumerate(Ts):
        for b, Q in enumerate(Qs):
            logp.append(collapsed_joint(labels, T, Q, hyper))
            t_idx.append(a)
            q_idx.append(b)
    logp = np.array(logp)
    p = np.exp(logp - logsumexp(logp))
    t_marg = np.zeros((I, C))
    q_marg = np.zeros((I, H))
    for w, a, b in zip(p, t_idx, q_idx):
        t_marg[np.arange(I), Ts[a]] += w
        q_marg[np.arange(I), Qs[b]] += w
    return t_marg, q_marg


def max_tv(p, q):
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=1).max())


def enumerable_instance():
    """I=3, K=2, C=2 with an asymmetric label pattern."""
    return make_labels([("a", "u", 1), ("a", "v", 1), ("b", "u", 1), ("b", "v", 2),
                        ("c", "u", 2)], num_classes=2)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Log one acceptance line; shown again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
