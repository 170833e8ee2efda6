"""Imbalance measures and resampling plans for the three task datasets."""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from mtdistill.data import Dataset, concat
from mtdistill.numerics import VA_GRID, to_bin


def irlbl(counts):
    """Per-label imbalance ratio ``max_count / count``.

    ``counts`` maps label to positive count. Labels with zero positives are
    left out of the result with a warning.
    """
    zero = [label for label, c in counts.items() if c <= 0]
    if zero:
        warnings.warn(f"labels with no positive instances excluded from imbalance ratios: {zero}", stacklevel=2)
    live = {label: c for label, c in counts.items() if c > 0}
    if not live:
        raise ValueError("no label has a positive count")
    top = max(live.values())
    return {label: top / c for label, c in live.items()}


def mean_ir(counts):
    ratios = irlbl(counts)
    return sum(ratios.values()) / len(ratios)


def _quiet_mean_ir(counts):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return mean_ir(counts)


@dataclass
class SamplingPlan:
    """Replication count per instance of the source dataset."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("replication counts must be >= 0")

    @property
    def epoch_size(self):
        return int(self.counts.sum())

    def expand(self):
        """Instance indices with each index repeated by its replication count."""
        return np.repeat(np.arange(len(self.counts)), self.counts)

    def pairs(self):
        return [(int(i), int(c)) for i, c in enumerate(self.counts)]

    def apply(self, dataset):
        return dataset.take(self.expand())


@dataclass
class BalanceReport:
    labels: list
    before: list
    after: list
    zero_labels: list = field(default_factory=list)

    @property
    def irlbl(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return irlbl(dict(zip(self.labels, self.after)))

    @property
    def mean_ir_before(self):
        return _quiet_mean_ir(dict(zip(self.labels, self.before)))

    @property
    def mean_ir_after(self):
        return _quiet_mean_ir(dict(zip(self.labels, self.after)))

    @property
    def mean_ir(self):
        return self.mean_ir_after

    def to_text(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ir_before = irlbl(dict(zip(self.labels, self.before)))
        ir_after = self.irlbl
        rows = [f"{'label':>8} {'before':>8} {'after':>8} {'IR before':>10} {'IR after':>10}"]
        for label, b, a in zip(self.labels, self.before, self.after):
            rb = f"{ir_before[label]:.4f}" if label in ir_before else "-"
            ra = f"{ir_after[label]:.4f}" if label in ir_after else "-"
            rows.append(f"{label!s:>8} {b:>8d} {a:>8d} {rb:>10} {ra:>10}")
        rows.append(f"MeanIR before {self.mean_ir_before:.4f}  after {self.mean_ir_after:.4f}")
        if self.zero_labels:
            rows.append(f"labels without positives: {', '.join(map(str, self.zero_labels))}")
        return "\n".join(rows) + "\n"

    def to_record(self):
        return {
            "labels": [str(label) for label in self.labels],
            "before": [int(c) for c in self.before],
            "after": [int(c) for c in self.after],
            "irlbl_after": {str(k): round(v, 6) for k, v in self.irlbl.items()},
            "mean_ir_before": round(self.mean_ir_before, 6),
            "mean_ir_after": round(self.mean_ir_after, 6),
            "zero_labels": [str(label) for label in self.zero_labels],
        }

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True, indent=2) + "\n"

    def to_csv(self):
        lines = ["label,before,after"]
        lines += [f"{label},{b},{a}" for label, b, a in zip(self.labels, self.before, self.after)]
        return "\n".join(lines) + "\n"


def _au_matrix(data):
    return np.asarray(data.labels if isinstance(data, Dataset) else data, dtype=np.int64)


def ml_ros(data, oversample_pct=25.0, seed=0):
    """Multilabel random oversampling of AU label sets.

    Each round clones, for every label whose IRLbl exceeds the current
    MeanIR, one uniformly drawn instance carrying that label; ratios are
    recomputed between rounds. Stops once ``oversample_pct`` percent of the
    original size has been cloned or no minority label is left.
    """
    labels = _au_matrix(data)
    n, num_labels = labels.shape
    if n == 0:
        raise ValueError("ml_ros needs a nonempty dataset")
    if oversample_pct < 0:
        raise ValueError("oversample_pct must be >= 0")
    rng = np.random.default_rng(seed)
    budget = int(n * oversample_pct / 100.0)
    counts = labels.sum(axis=0)
    before = counts.copy()
    zero = [l for l in range(num_labels) if counts[l] == 0]
    if zero:
        warnings.warn(f"AU labels {zero} have no positive instances and are skipped", stacklevel=2)
    bags = [np.flatnonzero(labels[:, l]) for l in range(num_labels)]
    reps = np.ones(n, dtype=np.int64)
    added = 0
    while added < budget:
        ratios = irlbl({l: counts[l] for l in range(num_labels) if counts[l] > 0})
        mir = sum(ratios.values()) / len(ratios)
        minority = [l for l, r in ratios.items() if r > mir]
        if not minority:
            break
        for l in minority:
            if added >= budget:
                break
            pick = bags[l][rng.integers(len(bags[l]))]
            reps[pick] += 1
            counts += labels[pick]
            added += 1
    report = BalanceReport(list(range(num_labels)), before.tolist(), counts.tolist(), zero)
    return SamplingPlan(reps), report


def _spread(quota, members, rng):
    """Split an integer ``quota`` evenly over ``members``; the remainder goes to a seeded random subset."""
    out = np.full(len(members), quota // len(members), dtype=np.int64)
    extra = quota % len(members)
    if extra:
        out[rng.permutation(len(members))[:extra]] += 1
    return out


def _equal_class_plan(codes, classes, epoch_size, rng):
    per_class = np.full(len(classes), epoch_size // len(classes), dtype=np.int64)
    per_class[: epoch_size % len(classes)] += 1  # ties in the remainder go to the lowest classes
    counts = np.zeros(len(codes), dtype=np.int64)
    for c, quota in zip(classes, per_class):
        members = np.flatnonzero(codes == c)
        counts[members] = _spread(int(quota), members, rng)
    return SamplingPlan(counts)


def class_resample(data, num_classes=7, epoch_size=None, seed=0):
    """Plan giving every class the same share of an epoch.

    Per-class quotas use largest-remainder rounding, so they differ by at
    most one; inside a class the quota is spread uniformly.
    """
    labels = np.asarray(data.labels if isinstance(data, Dataset) else data, dtype=np.int64)
    present = np.bincount(labels, minlength=num_classes)
    missing = [c for c in range(num_classes) if present[c] == 0]
    if missing:
        raise ValueError(f"class {missing[0]} has no instances")
    epoch_size = len(labels) if epoch_size is None else int(epoch_size)
    return _equal_class_plan(labels, np.arange(num_classes), epoch_size, np.random.default_rng(seed))


def va_cells(va, grid=VA_GRID):
    bins = to_bin(np.asarray(va, dtype=np.float64), grid)
    return bins[:, 0] * grid.num_bins + bins[:, 1]


def _largest_remainder(weights, total, rng):
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    frac = quota - counts
    short = total - int(counts.sum())
    if short:
        order = np.lexsort((rng.permutation(len(weights)), -frac))
        counts[order[:short]] += 1
    return counts


def va_bin_resample(data, grid=VA_GRID, epoch_size=None, seed=0, joint=True):
    """Plan equalising occupied valence-arousal bins.

    With ``joint`` the categories are (valence bin, arousal bin) cells; empty
    cells get nothing. Otherwise each instance is weighted by the average of
    its equal-share weights under the valence and the arousal marginals.
    """
    va = np.asarray(data.labels if isinstance(data, Dataset) else data, dtype=np.float64)
    epoch_size = len(va) if epoch_size is None else int(epoch_size)
    rng = np.random.default_rng(seed)
    if joint:
        codes = va_cells(va, grid)
        return _equal_class_plan(codes, np.unique(codes), epoch_size, rng)
    bins = to_bin(va, grid)
    weights = np.zeros(len(va))
    for k in range(2):
        occupied, inverse, per_bin = np.unique(bins[:, k], return_inverse=True, return_counts=True)
        weights += 0.5 / (len(occupied) * per_bin[inverse])
    return SamplingPlan(_largest_remainder(weights, epoch_size, rng))


def class_report(labels, plan, num_classes=7):
    labels = np.asarray(labels, dtype=np.int64)
    before = np.bincount(labels, minlength=num_classes)
    after = np.bincount(labels, weights=plan.counts, minlength=num_classes).astype(np.int64)
    return BalanceReport(list(range(num_classes)), before.tolist(), after.tolist())


def va_report(va, plan, grid=VA_GRID):
    codes = va_cells(va, grid)
    cells = np.unique(codes)
    before = [int(np.sum(codes == c)) for c in cells]
    after = [int(plan.counts[codes == c].sum()) for c in cells]
    names = [f"{c // grid.num_bins}:{c % grid.num_bins}" for c in cells]
    return BalanceReport(names, before, after)


def merge_downsample(primary, external, keep_every=1):
    """Every ``keep_every``-th instance of ``primary`` followed by all of ``external``."""
    if keep_every < 1:
        raise ValueError("keep_every must be >= 1")
    if primary.task != external.task or primary.input_dim != external.input_dim:
        raise ValueError(
            f"schema mismatch: {primary.task}/{primary.input_dim} vs {external.task}/{external.input_dim}"
        )
    return concat([primary.take(np.arange(0, len(primary), keep_every)), external])


def balance_all(datasets, oversample_pct=25.0, epoch_size=None, seed=0):
    """Apply ML-ROS, class resampling and VA bin resampling; returns (balanced datasets, reports)."""
    au, expr, va = datasets
    au_plan, au_rep = ml_ros(au, oversample_pct, seed)
    expr_plan = class_resample(expr, epoch_size=epoch_size, seed=seed)
    va_plan = va_bin_resample(va, epoch_size=epoch_size, seed=seed)
    balanced = (au_plan.apply(au), expr_plan.apply(expr), va_plan.apply(va))
    reports = {"au": au_rep, "expr": class_report(expr.labels, expr_plan), "va": va_report(va.labels, va_plan)}
    return balanced, reports
