"""Label and ground-truth ingestion, plus the synthetic crowd benchmark.

Classes are stored 0-based in memory (``0..C-1``) and 1-based in files.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional, TextIO

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class UnknownItemWarning(UserWarning):
    pass


TruthMap = dict  # item index -> 0-based class


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Sparse item x worker label matrix, stored as parallel arrays.

    ``items[n]``, ``workers[n]`` and ``labels[n]`` describe the n-th observed
    label. Records keep their input order.
    """

    num_items: int
    num_workers: int
    num_classes: int
    items: np.ndarray
    workers: np.ndarray
    labels: np.ndarray
    item_ids: tuple = ()
    worker_ids: tuple = ()
    _indptr: np.ndarray = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.int64)
        workers = np.asarray(self.workers, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not (items.shape == workers.shape == labels.shape) or items.ndim != 1:
            raise DataError("items, workers and labels must be 1-d arrays of equal length")
        if self.num_items < 0 or self.num_workers < 0 or self.num_classes < 1:
            raise DataError("dimensions must be non-negative and num_classes >= 1")
        if items.size:
            if items.min() < 0 or items.max() >= self.num_items:
                raise DataError("item index out of range")
            if workers.min() < 0 or workers.max() >= self.num_workers:
                raise DataError("worker index out of range")
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise DataError("label out of range")
            pair = items * max(self.num_workers, 1) + workers
            if np.unique(pair).size != pair.size:
                raise DataError("duplicate (item, worker) pair")
        item_ids = tuple(self.item_ids) or tuple(str(i) for i in range(self.num_items))
        worker_ids = tuple(self.worker_ids) or tuple(str(k) for k in range(self.num_workers))
        if len(item_ids) != self.num_items or len(worker_ids) != self.num_workers:
            raise DataError("id tuples must match dimensions")
        order = np.argsort(items, kind="stable")
        indptr = np.zeros(self.num_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(items, minlength=self.num_items), out=indptr[1:])
        for name, value in [("items", items), ("workers", workers), ("labels", labels),
                            ("item_ids", item_ids), ("worker_ids", worker_ids),
                            ("_order", order), ("_indptr", indptr)]:
            object.__setattr__(self, name, value)
        for arr in (items, workers, labels, order, indptr):
            arr.setflags(write=False)

    @property
    def num_labels(self) -> int:
        return int(self.items.size)

    def item_records(self, i: int) -> np.ndarray:
        """Record positions belonging to item ``i``."""
        return self._order[self._indptr[i]:self._indptr[i + 1]]

    def worker_set(self, i: int) -> np.ndarray:
        """S_i: workers that labeled item ``i``."""
        return self.workers[self.item_records(i)]

    def item_labels(self, i: int) -> np.ndarray:
        return self.labels[self.item_records(i)]

    def labels_per_item(self) -> np.ndarray:
        return np.diff(self._indptr)

    def labels_per_worker(self) -> np.ndarray:
        return np.bincount(self.workers, minlength=self.num_workers)

    def vote_counts(self) -> np.ndarray:
        """I x C matrix of label counts per item."""
        counts = np.zeros((self.num_items, self.num_classes), dtype=np.int64)
        np.add.at(counts, (self.items, self.labels), 1)
        return counts

    def same_content(self, other: "LabelSet") -> bool:
        return (
            self.num_items == other.num_items
            and self.num_workers == other.num_workers
            and self.num_classes == other.num_classes
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.workers, other.workers)
            and np.array_equal(self.labels, other.labels)
            and self.item_ids == other.item_ids
            and self.worker_ids == other.worker_ids
        )

    def subset_items(self, keep: np.ndarray) -> "LabelSet":
        """Items selected by boolean mask ``keep``, re-indexed densely."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        rec = keep[self.items]
        return LabelSet(
            int(keep.sum()), self.num_workers, self.num_classes,
            new_index[self.items[rec]], self.workers[rec], self.labels[rec],
            tuple(np.asarray(self.item_ids, dtype=object)[keep]), self.worker_ids,
        )


def _read_rows(stream: TextIO, expected: tuple) -> Iterable[tuple[int, list]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise DataError("empty stream")
    header = [h.strip() for h in header]
    if header != list(expected):
        raise DataError(f"line 1: expected header {','.join(expected)}, got {','.join(header)}")
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(expected):
            raise DataError(f"line {reader.line_num}: expected {len(expected)} fields, got {len(row)}")
        yield reader.line_num, [cell.strip() for cell in row]


def _parse_label_value(text: str, line: int, num_classes: Optional[int]) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"line {line}: label {text!r} is not an integer") from None
    if value < 1 or (num_classes is not None and value > num_classes):
        raise DataError(f"line {line}: label out of range: {value}")
    return value


def parse_labels(stream: TextIO, num_classes: Optional[int] = None,
                 index_map: Optional[dict] = None) -> LabelSet:
    """Read an ``item,worker,label`` file.

    Item and worker ids are re-indexed in first-appearance order, unless an
    ``index_map`` (as produced by :func:`read_index_map`) pins the order.
    ``num_classes`` defaults to the largest observed label.
    """
    item_index: dict[str, int] = dict(index_map["item"]) if index_map else {}
    worker_index: dict[str, int] = dict(index_map["worker"]) if index_map else {}
    seen: dict[tuple[int, int], int] = {}
    items, workers, labels = [], [], []
    for line, (item, worker, label) in _read_rows(stream, ("item", "worker", "label")):
        value = _parse_label_value(label, line, num_classes)
        i = item_index.setdefault(item, len(item_index))
        k = worker_index.setdefault(worker, len(worker_index))
        if (i, k) in seen:
            raise DataError(f"line {line}: duplicate label for item {item!r} by worker "
                            f"{worker!r} (first seen on line {seen[i, k]})")
        seen[i, k] = line
        items.append(i)
        workers.append(k)
        labels.append(value - 1)
    if not labels:
        raise DataError("empty stream: no label records")
    c = num_classes if num_classes is not None else max(labels) + 1
    return LabelSet(
        len(item_index), len(worker_index), c,
        np.array(items), np.array(workers), np.array(labels),
        tuple(sorted(item_index, key=item_index.get)),
        tuple(sorted(worker_index, key=worker_index.get)),
    )


def parse_ground_truth(stream: TextIO, labels: LabelSet) -> TruthMap:
    """Read an ``item,label`` file keyed by the ids used in ``labels``."""
    index = {name: i for i, name in enumerate(labels.item_ids)}
    truth: TruthMap = {}
    lines: dict[int, int] = {}
    for line, (item, label) in _read_rows(stream, ("item", "label")):
        value = _parse_label_value(label, line, labels.num_classes)
        if item not in index:
            warnings.warn(f"line {line}: unknown item {item!r} skipped", UnknownItemWarning,
                          stacklevel=2)
            continue
        i = index[item]
        if i in truth:
            raise DataError(f"line {line}: duplicate truth for item {item!r} "
                            f"(first seen on line {lines[i]})")
        truth[i] = value - 1
        lines[i] = line
    return truth


def write_labels(labels: LabelSet, stream: TextIO) -> None:
    stream.write("item,worker,label\n")
    for i, k, c in zip(labels.items.tolist(), labels.workers.tolist(), labels.labels.tolist()):
        stream.write(f"{labels.item_ids[i]},{labels.worker_ids[k]},{c + 1}\n")


def write_ground_truth(truth: TruthMap, labels: LabelSet, stream: TextIO) -> None:
    stream.write("item,label\n")
    for i in sorted(truth):
        stream.write(f"{labels.item_ids[i]},{truth[i] + 1}\n")


def write_index_map(labels: LabelSet, stream: TextIO) -> None:
    stream.write("kind,index,id\n")
    for i, name in enumerate(labels.item_ids):
        stream.write(f"item,{i},{name}\n")
    for k, name in enumerate(labels.worker_ids):
        stream.write(f"worker,{k},{name}\n")


def read_index_map(stream: TextIO) -> dict:
    out: dict[str, dict[str, int]] = {"item": {}, "worker": {}}
    for line, (kind, index, name) in _read_rows(stream, ("kind", "index", "id")):
        if kind not in out:
            raise DataError(f"line {line}: unknown kind {kind!r}")
        if int(index) != len(out[kind]):
            raise DataError(f"line {line}: indices must be dense and ordered")
        out[kind][name] = int(index)
    return out


def labels_to_text(labels: LabelSet) -> str:
    buf = io.StringIO()
    write_labels(labels, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic crowd generator.

    Workers draw a base correct-rate from ``Beta`` with mean ``skill_mean``;
    each item's latent difficulty level shifts that rate by
    ``difficulty_shifts[level]``, clamped to ``[1/C, max_correct_rate]``.
    Wrong labels are spread uniformly over the other classes.
    ``participation``/``skills`` override the random draws when given.
    With ``cover_items`` every item that drew no label gets one from a
    participation-weighted random worker.
    """

    num_items: int = 1000
    num_workers: int = 100
    num_classes: int = 5
    class_probs: tuple = (0.18, 0.27, 0.45, 0.05, 0.05)
    participation: Optional[tuple] = None
    participation_low: float = 0.03
    participation_high: float = 0.2
    participation_max: float = 0.74
    skills: Optional[tuple] = None
    skill_mean: float = 0.42
    skill_concentration: float = 1.5
    difficulty_probs: tuple = (0.5, 0.5)
    difficulty_shifts: tuple = (0.15, -0.15)
    max_correct_rate: float = 0.99
    cover_items: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("class_probs", "difficulty_probs", "difficulty_shifts"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        for name in ("participation", "skills"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(x) for x in value))
        self.validate()

    def validate(self) -> None:
        if self.num_items < 1 or self.num_workers < 1 or self.num_classes < 2:
            raise ValueError("need num_items >= 1, num_workers >= 1, num_classes >= 2")
        if len(self.class_probs) != self.num_classes:
            raise ValueError("class_probs must have num_classes entries")
        if min(self.class_probs) < 0 or abs(sum(self.class_probs) - 1.0) > 1e-12:
            raise ValueError("class_probs must be a probability vector")
        if len(self.difficulty_probs) != len(self.difficulty_shifts) or not self.difficulty_probs:
            raise ValueError("difficulty_probs and difficulty_shifts must have equal length")
        if min(self.difficulty_probs) < 0 or abs(sum(self.difficulty_probs) - 1.0) > 1e-12:
            raise ValueError("difficulty_probs must be a probability vector")
        if self.participation is not None:
            if len(self.participation) != self.num_workers:
                raise ValueError("participation must have num_workers entries")
            if min(self.participation) < 0 or max(self.participation) > 1:
                raise ValueError("participation probabilities must lie in [0, 1]")
        if not 0 <= self.participation_low <= self.participation_high <= 1:
            raise ValueError("need 0 <= participation_low <= participation_high <= 1")
        if not 0 <= self.participation_max <= 1:
            raise ValueError("participation_max must lie in [0, 1]")
        if self.skills is not None:
            if len(self.skills) != self.num_workers:
                raise ValueError("skills must have num_workers entries")
            if min(self.skills) < 0 or max(self.skills) > 1:
                raise ValueError("skills must lie in [0, 1]")
        if not 0 < self.skill_mean < 1 or self.skill_concentration <= 0:
            raise ValueError("need 0 < skill_mean < 1 and skill_concentration > 0")
        if not 1.0 / self.num_classes <= self.max_correct_rate <= 1.0:
            raise ValueError("max_correct_rate must lie in [1/C, 1]")

    @property
    def num_levels(self) -> int:
        return len(self.difficulty_probs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SynthConfig":
        """Parse ``key=value`` lines; blank lines and ``#`` comments ignored."""
        kinds = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in kinds:
                raise ValueError(f"line {lineno}: unknown setting {key!r}")
            values[key] = value
        base = cls()
        kwargs = {}
        for key, value in values.items():
            default = getattr(base, key)
            if key in ("participation", "skills") or isinstance(default, tuple):
                kwargs[key] = _floats(value)
            elif isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"{key}: expected true or false, got {value!r}")
                kwargs[key] = value.lower() in ("true", "1")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return replace(base, **kwargs)


@dataclass(frozen=True)
class SyntheticData:
    labels: LabelSet
    truth: TruthMap
    levels: np.ndarray          # latent difficulty level per item (0 = first)
    participation: np.ndarray
    correct_rates: np.ndarray   # K x H_true correct probability


def default_participation(num_workers: int, low: float, high: float, top: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Most workers in ``[low, high]``, one busy worker at ``top``."""
    rho = rng.uniform(low, high, size=num_workers)
    rho[rng.integers(num_workers)] = top
    return rho


def generate_synthetic_detailed(cfg: SynthConfig) -> SyntheticData:
    rng = np.random.default_rng(cfg.seed)
    I, K, C = cfg.num_items, cfg.num_workers, cfg.num_classes
    truth = rng.choice(C, size=I, p=np.asarray(cfg.class_probs))
    levels = rng.choice(cfg.num_levels, size=I, p=np.asarray(cfg.difficulty_probs))
    if cfg.participation is None:
        rho = default_participation(K, cfg.participation_low, cfg.participation_high,
                                    cfg.participation_max, rng)
    else:
        rho = np.asarray(cfg.participation)
    if cfg.skills is None:
        a = cfg.skill_mean * cfg.skill_concentration
        skill = rng.beta(a, cfg.skill_concentration - a, size=K)
    else:
        skill = np.asarray(cfg.skills)
    rates = np.clip(skill[:, None] + np.asarray(cfg.difficulty_shifts)[None, :],
                    1.0 / C, cfg.max_correct_rate)

    mask = rng.random((I, K)) < rho[None, :]
    if cfg.cover_items and K:
        bare = np.flatnonzero(~mask.any(axis=1))
        w = rho / rho.sum() if rho.sum() > 0 else np.full(K, 1.0 / K)
        mask[bare, rng.choice(K, size=bare.size, p=w)] = True
    items, workers = np.nonzero(mask)
    correct = rng.random(items.size) < rates[workers, levels[items]]
    wrong = (truth[items] + rng.integers(1, C, size=items.size)) % C
    obs = np.where(correct, truth[items], wrong)

    width = len(str(max(I, K) - 1))
    labels = LabelSet(
        I, K, C, items, workers, obs,
        tuple(f"item{i:0{width}d}" for i in range(I)),
        tuple(f"worker{k:0{width}d}" for k in range(K)),
    )
    return SyntheticData(labels, {i: int(t) for i, t in enumerate(truth)}, levels, rho, rates)


def generate_synthetic(cfg: SynthConfig) -> tuple[LabelSet, TruthMap]:
    """Draw a synthetic label set and its ground truth; deterministic in ``cfg.seed``."""
    data = generate_synthetic_detailed(cfg)
    return data.labels, data.truth
