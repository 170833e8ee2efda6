"""Prediction decoding, task metrics, student ensembling and report files."""
import csv
import io
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from mtdistill import kernels
from mtdistill.model import EXPR_DIM, forward
from mtdistill.numerics import VA_GRID, ccc

AU_WEIGHTS = (0.5, 0.5)
EXPR_WEIGHTS = (0.67, 0.33)
TABLE_HEADER = ("model", "au_composite", "expr_composite", "ccc_valence", "ccc_arousal")
ENSEMBLE_MODES = ("prob", "vote")


class Prediction(NamedTuple):
    au_probs: np.ndarray
    au_binary: np.ndarray
    expr_probs: np.ndarray
    expr_class: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray


def _prediction(au_probs, expr_probs, valence, arousal, expr_class=None, au_binary=None):
    if au_binary is None:
        au_binary = (au_probs > 0.5).astype(np.uint8)
    if expr_class is None:
        expr_class = np.argmax(expr_probs, axis=-1)
    return Prediction(au_probs, au_binary, expr_probs, expr_class, valence, arousal)


def _parts(output):
    au = np.atleast_2d(output.au)
    expr = np.atleast_2d(output.expr)
    va = np.atleast_2d(output.va)
    au_probs = kernels.sigmoid_rows(au)
    expr_probs = kernels.softmax_rows(expr, 1.0)
    half = va.shape[1] // 2
    valence, _ = kernels.bin_expectation_rows(np.ascontiguousarray(va[:, :half]), VA_GRID.centers)
    arousal, _ = kernels.bin_expectation_rows(np.ascontiguousarray(va[:, half:]), VA_GRID.centers)
    return au_probs, expr_probs, valence, arousal


def decode(output):
    """Turn raw logits into probabilities, decisions and continuous VA values.

    AU: sigmoid then ``> 0.5``. EXPR: softmax then argmax (ties to the
    lowest index). VA: expected bin center under each block's softmax.
    Batched outputs give batched fields; a single instance gives 1-row arrays.
    """
    return _prediction(*_parts(output))


def ensemble(outputs, mode="prob"):
    """Combine K students' outputs on the same inputs.

    ``"prob"`` averages AU probabilities, EXPR probabilities and continuous
    VA values, then thresholds/argmaxes the averages. ``"vote"`` takes
    per-AU majority and EXPR plurality (ties to the lowest index) over the
    members' decisions; VA is still averaged.
    """
    if not outputs:
        raise ValueError("ensemble needs at least one member")
    if mode not in ENSEMBLE_MODES:
        raise ValueError(f"mode must be one of {ENSEMBLE_MODES}")
    parts = [_parts(o) for o in outputs]
    au, expr, val, aro = (np.mean([p[k] for p in parts], axis=0) for k in range(4))
    if mode == "prob":
        return _prediction(au, expr, val, aro)
    au_votes = np.mean([(p[0] > 0.5) for p in parts], axis=0)
    expr_votes = np.zeros_like(expr)
    for p in parts:
        cls = np.argmax(p[1], axis=-1)
        expr_votes[np.arange(len(cls)), cls] += 1
    return _prediction(au, expr, val, aro, expr_class=np.argmax(expr_votes, axis=-1),
                       au_binary=(au_votes > 0.5).astype(np.uint8))


def f1_per_class(preds, truths):
    preds = np.asarray(preds, dtype=bool)
    truths = np.asarray(truths, dtype=bool)
    tp = np.sum(preds & truths, axis=0)
    fp = np.sum(preds & ~truths, axis=0)
    fn = np.sum(~preds & truths, axis=0)
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def macro_f1(preds, truths):
    """Unweighted mean of per-class F1; a class with no TP, FP or FN scores 0."""
    preds = np.atleast_2d(preds)
    if preds.shape[0] == 0:
        raise ValueError("macro_f1 needs a nonempty evaluation set")
    return float(f1_per_class(preds, truths).mean())


def _onehot(classes, size=EXPR_DIM):
    out = np.zeros((len(classes), size), dtype=bool)
    out[np.arange(len(classes)), classes] = True
    return out


def composite_metrics(pred, truths, task):
    """Metric fields for one task.

    ``pred`` is a :class:`Prediction` (only the task's fields are read);
    ``truths`` are AU bits (n, 8), class indices (n,) or VA pairs (n, 2).
    """
    truths = np.asarray(truths)
    if len(truths) == 0:
        raise ValueError("cannot evaluate an empty set")
    if task == "AU":
        f1 = macro_f1(pred.au_binary, truths)
        acc = float(np.mean(np.asarray(pred.au_binary, dtype=bool) == truths.astype(bool)))
        return {"au_f1_macro": f1, "au_acc": acc, "au_composite": AU_WEIGHTS[0] * f1 + AU_WEIGHTS[1] * acc}
    if task == "EXPR":
        cls = np.asarray(pred.expr_class)
        f1 = macro_f1(_onehot(cls), _onehot(truths))
        acc = float(np.mean(cls == truths))
        return {"expr_f1_macro": f1, "expr_acc": acc,
                "expr_composite": EXPR_WEIGHTS[0] * f1 + EXPR_WEIGHTS[1] * acc}
    if task == "VA":
        return {"ccc_valence": ccc(truths[:, 0], pred.valence), "ccc_arousal": ccc(truths[:, 1], pred.arousal)}
    raise ValueError(f"unknown task {task!r}")


@dataclass
class MetricSet:
    au_f1_macro: float = float("nan")
    au_acc: float = float("nan")
    au_composite: float = float("nan")
    expr_f1_macro: float = float("nan")
    expr_acc: float = float("nan")
    expr_composite: float = float("nan")
    ccc_valence: float = float("nan")
    ccc_arousal: float = float("nan")

    def task_scores(self):
        """One headline number per task; VA uses the mean of the two CCCs."""
        return {"AU": self.au_composite, "EXPR": self.expr_composite,
                "VA": 0.5 * (self.ccc_valence + self.ccc_arousal)}

    def reported(self):
        return {k: getattr(self, k) for k in TABLE_HEADER[1:]}

    def to_dict(self):
        return asdict(self)


def _score(predict, datasets):
    fields = {}
    for dataset in datasets:
        fields.update(composite_metrics(predict(dataset.features), dataset.labels, dataset.task))
    return MetricSet(**fields)


def evaluate_net(net, datasets):
    """Metrics of one network on task datasets (each scored on its own head)."""
    return _score(lambda x: decode(forward(net, x)[0]), datasets)


def evaluate_ensemble(nets, datasets, mode="prob"):
    return _score(lambda x: ensemble([forward(n, x)[0] for n in nets], mode), datasets)


def _fmt(x):
    return f"{float(x):.4f}"


def table_csv(rows):
    """CSV text for ``(name, MetricSet | mapping)`` rows; numbers at 4 decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    for name, metrics in rows:
        values = metrics.reported() if isinstance(metrics, MetricSet) else metrics
        writer.writerow([name] + [_fmt(values[k]) for k in TABLE_HEADER[1:]])
    return buf.getvalue()


def table_text(rows):
    width = max([len("model")] + [len(name) for name, _ in rows])
    lines = [f"{'model':<{width}}  {'AU':>8}  {'EXPR':>8}  {'Valence':>8}  {'Arousal':>8}"]
    for name, metrics in rows:
        values = metrics.reported() if isinstance(metrics, MetricSet) else metrics
        cells = "  ".join(f"{_fmt(values[k]):>8}" for k in TABLE_HEADER[1:])
        lines.append(f"{name:<{width}}  {cells}")
    return "\n".join(lines) + "\n"


def curves_csv(history):
    lines = ["epoch,mean_loss,lr"]
    lines += [f"{rec['epoch']},{rec['mean_loss']:.6f},{rec['lr']:.6g}" for rec in history]
    return "\n".join(lines) + "\n"


def report(rows, histories=None, balance_reports=None, out_dir="."):
    """Write ``table.csv``, ``table.txt``, ``curves_<model>.csv`` and ``balance_<task>.csv``.

    Returns the list of written paths. Output depends only on the inputs.
    """
    if not rows:
        raise ValueError("report needs at least one evaluated model")
    os.makedirs(out_dir, exist_ok=True)
    files = {"table.csv": table_csv(rows), "table.txt": table_text(rows)}
    for name, history in sorted((histories or {}).items()):
        files[f"curves_{name}.csv"] = curves_csv(history)
    for task, rep in sorted((balance_reports or {}).items()):
        files[f"balance_{task}.csv"] = rep.to_csv()
    written = []
    for fname, text in files.items():
        path = os.path.join(out_dir, fname)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)
    return written
