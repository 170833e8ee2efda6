"""Task datasets, the synthetic multitask generator, ``.mtd`` I/O and the batch sampler."""
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import NamedTuple

import numpy as np

from mtdistill.losses import Batch
from mtdistill.model import AU_DIM, EXPR_DIM

TASKS = ("AU", "EXPR", "VA")
FORMAT_VERSION = 1
_HEADER_TAG = "#mtd"

# Positive rates of the 8 AUs at zero skew; the tail gives minority labels.
AU_BASE_RATES = (0.45, 0.38, 0.3, 0.22, 0.14, 0.09, 0.06, 0.04)


class DataFormatError(ValueError):
    def __init__(self, message, lineno=None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


class Instance(NamedTuple):
    id: int
    features: np.ndarray
    task: str
    label: object
    source: str


@dataclass
class Dataset:
    """Instances of one task stored column-wise.

    ``labels`` is (n, 8) uint8 for AU, (n,) int64 for EXPR and (n, 2) float64
    for VA.
    """

    task: str
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    sources: np.ndarray

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        dtype = {"AU": np.uint8, "EXPR": np.int64, "VA": np.float64}[self.task]
        self.labels = np.asarray(self.labels, dtype=dtype)
        self.sources = np.asarray(self.sources, dtype=object)
        n = len(self.ids)
        if self.features.ndim != 2 or len(self.features) != n or len(self.labels) != n or len(self.sources) != n:
            raise ValueError("dataset columns have inconsistent lengths")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        _check_labels(self.task, self.labels)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        label = self.labels[i]
        if self.task == "AU":
            label = tuple(int(b) for b in label)
        elif self.task == "EXPR":
            label = int(label)
        else:
            label = (float(label[0]), float(label[1]))
        return Instance(int(self.ids[i]), self.features[i], self.task, label, str(self.sources[i]))

    @property
    def input_dim(self):
        return self.features.shape[1]

    def take(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.task, self.ids[index], self.features[index], self.labels[index], self.sources[index])

    def equals(self, other):
        return (
            self.task == other.task
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and list(self.sources) == list(other.sources)
        )


def _check_labels(task, labels):
    if task == "AU":
        if labels.ndim != 2 or labels.shape[1] != AU_DIM or np.any(labels > 1):
            raise ValueError("AU labels must be (n, 8) bits")
    elif task == "EXPR":
        if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= EXPR_DIM):
            raise ValueError("expression labels must be class indices 0..6")
    elif labels.ndim != 2 or labels.shape[1] != 2 or np.any(np.abs(labels) > 1.0):
        raise ValueError("VA labels must be (n, 2) values in [-1, 1]")


def concat(datasets):
    first = datasets[0]
    if any(d.task != first.task or d.input_dim != first.input_dim for d in datasets):
        raise ValueError("cannot concatenate datasets with different task or input_dim")
    return Dataset(
        first.task,
        np.concatenate([d.ids for d in datasets]),
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.sources for d in datasets]),
    )


@dataclass(frozen=True)
class GenSpec:
    latent_dim: int = 4
    input_dim: int = 32
    counts: tuple = (2000, 2000, 2000)
    imbalance_skew: float = 0.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) != 3 or min(self.counts) < 4:
            raise ValueError("need at least 4 instances per task")
        if self.noise_sigma < 0 or self.imbalance_skew < 0:
            raise ValueError("noise_sigma and imbalance_skew must be >= 0")


class _World:
    """Fixed random maps shared by every split drawn from one GenSpec."""

    def __init__(self, spec):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        k = spec.latent_dim
        self.mixing = rng.normal(size=(k, spec.input_dim)) / np.sqrt(k)
        self.mode = rng.normal(size=k)
        self.mode /= np.linalg.norm(self.mode)
        au_w = rng.normal(size=(k, AU_DIM))
        self.au_w = au_w / np.linalg.norm(au_w, axis=0)
        # Projections onto unit vectors of a standard normal are N(0, 1).
        self.au_thresholds = np.array([NormalDist().inv_cdf(1.0 - r) for r in AU_BASE_RATES])
        expr_w = rng.normal(size=(k, EXPR_DIM))
        self.expr_w = expr_w / np.linalg.norm(expr_w, axis=0)
        va_w = rng.normal(size=(k, 2))
        self.va_w = va_w / np.linalg.norm(va_w, axis=0)
        self.va_b = rng.normal(scale=0.1, size=2)
        self.expr_b = self._balance_expression(rng.normal(size=(20000, k)))

    def _balance_expression(self, z):
        # Bias the class scores so unskewed latents give near-uniform classes.
        b = np.zeros(EXPR_DIM)
        scores = z @ self.expr_w
        for it in range(400):
            freq = np.bincount(np.argmax(scores + b, axis=1), minlength=EXPR_DIM) / len(z)
            b -= 0.3 / (1.0 + it / 20.0) * np.log(np.maximum(freq, 1e-4) * EXPR_DIM)
            b -= b.mean()
        return b

    def labels(self, task, z):
        if task == "AU":
            return (z @ self.au_w > self.au_thresholds).astype(np.uint8)
        if task == "EXPR":
            return np.argmax(z @ self.expr_w + self.expr_b, axis=1)
        return np.tanh(z @ self.va_w + self.va_b)


def _draw(spec, world, counts, stream, source):
    out = []
    for t, (task, n) in enumerate(zip(TASKS, counts)):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream, t]))
        z = rng.normal(size=(n, spec.latent_dim)) + spec.imbalance_skew * world.mode
        eps = rng.normal(size=(n, spec.input_dim))
        x = z @ world.mixing + spec.noise_sigma * eps
        out.append(Dataset(task, np.arange(n), x, world.labels(task, z), np.full(n, source, dtype=object)))
    return tuple(out)


def generate(spec):
    """Draw the (AU, EXPR, VA) training datasets described by ``spec``.

    Each instance keeps only its own task's label; the other two are
    discarded. ``imbalance_skew`` shifts every latent draw along one fixed
    direction, which skews all three label distributions together.
    """
    return _draw(spec, _World(spec), spec.counts, 1, "synth")


def generate_splits(spec, val_counts=(500, 500, 500)):
    """Training datasets plus a validation split drawn from the same maps."""
    world = _World(spec)
    return _draw(spec, world, spec.counts, 1, "synth"), _draw(spec, world, val_counts, 2, "synth")


def _format_label(task, label):
    if task == "AU":
        return "".join(str(int(b)) for b in label)
    if task == "EXPR":
        return str(int(label))
    return f"{label[0]:.6f},{label[1]:.6f}"


def _parse_label(task, text, lineno):
    if task == "AU":
        if len(text) != AU_DIM or set(text) - {"0", "1"}:
            raise DataFormatError(f"bad AU label {text!r}", lineno)
        return [int(c) for c in text]
    if task == "EXPR":
        if not text.isdigit() or int(text) >= EXPR_DIM:
            raise DataFormatError(f"bad expression label {text!r}", lineno)
        return int(text)
    try:
        v, a = (float(s) for s in text.split(","))
    except ValueError:
        raise DataFormatError(f"bad VA label {text!r}", lineno) from None
    if not (-1.0 <= v <= 1.0 and -1.0 <= a <= 1.0):
        raise DataFormatError(f"VA label {text!r} outside [-1, 1]", lineno)
    return [v, a]


def dumps(dataset):
    lines = [f"{_HEADER_TAG}\tversion={FORMAT_VERSION}\tinput_dim={dataset.input_dim}"]
    for i in range(len(dataset)):
        source = str(dataset.sources[i])
        if "\t" in source or "\n" in source:
            raise ValueError("source tags may not contain tabs or newlines")
        feats = ",".join(repr(float(v)) for v in dataset.features[i])
        label = _format_label(dataset.task, dataset.labels[i])
        lines.append(f"{dataset.ids[i]}\t{dataset.task}\t{source}\t{label}\t{feats}")
    return "\n".join(lines) + "\n"


def loads(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError("empty file", 1)
    head = lines[0].split("\t")
    if len(head) != 3 or head[0] != _HEADER_TAG or not head[1].startswith("version=") or not head[2].startswith("input_dim="):
        raise DataFormatError("missing or malformed header", 1)
    try:
        version = int(head[1].split("=", 1)[1])
        input_dim = int(head[2].split("=", 1)[1])
    except ValueError:
        raise DataFormatError("malformed header fields", 1) from None
    if version != FORMAT_VERSION:
        raise DataFormatError(f"dataset format version {version} is not supported (expected {FORMAT_VERSION})", 1)
    ids, feats, labels, sources = [], [], [], []
    task = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataFormatError(f"expected 5 tab-separated fields, got {len(parts)}", lineno)
        id_text, line_task, source, label_text, feat_text = parts
        if line_task not in TASKS:
            raise DataFormatError(f"unknown task {line_task!r}", lineno)
        if task is None:
            task = line_task
        elif line_task != task:
            raise DataFormatError(f"task {line_task} mixed with {task}", lineno)
        try:
            ids.append(int(id_text))
            row = [float(s) for s in feat_text.split(",")]
        except ValueError:
            raise DataFormatError("non-numeric id or feature", lineno) from None
        if len(row) != input_dim or not all(np.isfinite(row)):
            raise DataFormatError(f"expected {input_dim} finite features", lineno)
        feats.append(row)
        labels.append(_parse_label(line_task, label_text, lineno))
        sources.append(source)
    if task is None:
        raise DataFormatError("file holds no instances; task unknown", 1)
    return Dataset(task, ids, np.array(feats).reshape(len(ids), input_dim), labels, sources)


def save(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(dataset))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def make_batch(datasets, indices):
    au, expr, va = (d.take(i) for d, i in zip(datasets, indices))
    return Batch(
        au.features, au.labels.astype(np.float64), expr.features, expr.labels,
        va.features, va.labels, ids=(au.ids, expr.ids, va.ids),
    )


@dataclass
class EpochSampler:
    """Yields batches with exactly ``n`` instances per task.

    Each epoch draws a fresh seeded permutation of every pool (a pool is
    the index list of a dataset, optionally expanded by a sampling plan) and
    ends once the smallest pool has fewer than ``n`` unused entries. With
    ``cycle_smaller`` the epoch runs to the largest pool instead and smaller
    pools are re-permuted when they run out.
    """

    datasets: tuple
    n: int = 4
    seed: int = 0
    pools: tuple = None
    cycle_smaller: bool = False
    epoch: int = 0
    _orders: list = field(default=None, init=False, repr=False)
    _pos: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.pools is None:
            self.pools = tuple(np.arange(len(d)) for d in self.datasets)
        self.pools = tuple(np.asarray(p, dtype=np.int64) for p in self.pools)
        if min(len(p) for p in self.pools) < self.n:
            raise ValueError(f"every pool needs at least n={self.n} entries")

    @property
    def batches_per_epoch(self):
        sizes = [len(p) for p in self.pools]
        return (max(sizes) if self.cycle_smaller else min(sizes)) // self.n

    def _start_epoch(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.epoch]))
        need = self.batches_per_epoch * self.n
        orders = []
        for pool in self.pools:
            order = rng.permutation(pool)
            while len(order) < need:
                order = np.concatenate([order, rng.permutation(pool)])
            orders.append(order)
        self._orders = orders
        self._pos = 0

    def next_batch(self):
        """Next batch of the current epoch, or ``None`` at epoch end (the epoch counter then advances)."""
        if self._orders is None:
            self._start_epoch()
        if self._pos >= self.batches_per_epoch:
            self.epoch += 1
            self._orders = None
            return None
        lo, hi = self._pos * self.n, (self._pos + 1) * self.n
        self._pos += 1
        return make_batch(self.datasets, [order[lo:hi] for order in self._orders])

    def iter_epoch(self):
        while (batch := self.next_batch()) is not None:
            yield batch
