"""Adam, the step-decay schedule, and the teacher/student training procedures."""
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mtdistill import model as mdl
from mtdistill.data import EpochSampler
from mtdistill.evaluate import evaluate_net
from mtdistill.losses import DistillConfig, student_batch_loss, teacher_batch_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of ``params`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise FloatingPointError(
            f"{int(bad.sum())} non-finite gradient entries (first at index {int(np.flatnonzero(bad)[0])}); step aborted"
        )
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-4
    decay_factor: float = 10.0
    decay_every: int = 3

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("learning rate must be positive")
        if not self.decay_factor > 0 or self.decay_every < 1:
            raise ValueError("decay_factor must be positive and decay_every >= 1")


def lr_at(schedule, epoch):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.base_lr / schedule.decay_factor ** (epoch // schedule.decay_every)


@dataclass(frozen=True)
class RunConfig:
    teacher_epochs: int = 8
    student_epochs: int = 3
    num_students: int = 5
    distill: DistillConfig = DistillConfig()
    schedule: Schedule = Schedule()
    batch_n: int = 4
    hidden_dims: tuple = (64, 64)
    seed: int = 0
    student_seeds: tuple = None
    cycle_smaller: bool = False

    def __post_init__(self):
        if self.teacher_epochs < 1 or self.student_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.num_students < 1:
            raise ValueError("num_students must be >= 1")
        if self.student_seeds is not None and len(self.student_seeds) != self.num_students:
            raise ValueError("need one seed per student")

    def resolved_student_seeds(self):
        if self.student_seeds is not None:
            return tuple(self.student_seeds)
        return tuple(self.seed + 1000 + k for k in range(self.num_students))

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["student_seeds"] = list(self.resolved_student_seeds())
        return d


def net_config(datasets, run, seed):
    return mdl.NetConfig(input_dim=datasets[0].input_dim, hidden_dims=run.hidden_dims, seed=seed)


def _run_epochs(net, data, run, epochs, seed, loss_fn, val):
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    sampler = EpochSampler(tuple(data), run.batch_n, seed, cycle_smaller=run.cycle_smaller)
    state = AdamState(net.params.size)
    history = []
    for epoch in range(epochs):
        lr = lr_at(run.schedule, epoch)
        losses = []
        for batch in sampler.iter_epoch():
            net.zero_grad()
            loss = loss_fn(batch, net)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} in epoch {epoch}; batch ids {[i.tolist() for i in batch.ids]}")
            adam_step(net.params, net.grads, state, lr)
            losses.append(loss)
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr}
        if val is not None:
            record["val"] = evaluate_net(net, val).to_dict()
        log.debug("epoch %d lr %g mean loss %.6f", epoch, lr, record["mean_loss"])
        history.append(record)
    net.zero_grad()
    return history


def train_teacher(data, net, run, val=None, seed=None, epochs=None):
    """Train ``net`` in place on the teacher objective; returns ``(net, history)``.

    ``data`` is the (AU, EXPR, VA) dataset triple, already balanced.
    ``epochs`` overrides ``run.teacher_epochs`` (0 leaves the net untouched).
    """
    seed = run.seed if seed is None else seed
    epochs = run.teacher_epochs if epochs is None else epochs
    loss_fn = lambda batch, n: teacher_batch_loss(batch, n)[0]
    return net, _run_epochs(net, data, run, epochs, seed, loss_fn, val)


def train_student(data, teacher, student_seed, run, val=None, epochs=None):
    """Fresh student trained against the frozen ``teacher``; returns ``(student, history)``."""
    before = teacher.param_hash()
    student = mdl.init(replace(teacher.config, seed=student_seed))
    epochs = run.student_epochs if epochs is None else epochs
    loss_fn = lambda batch, n: student_batch_loss(batch, teacher, n, run.distill)[0]
    history = _run_epochs(student, data, run, epochs, student_seed, loss_fn, val)
    if teacher.param_hash() != before:
        raise TrainingError("teacher parameters changed during student training")
    return student, history


@dataclass
class Cohort:
    teacher: mdl.MultitaskNet
    students: list
    histories: dict
    manifest: dict = field(default_factory=dict)


def _sha(net):
    return hashlib.sha256(mdl.serialize(net)).hexdigest()


def train_cohort(data, run, val=None, out_dir=None, parallel_students=False):
    """Train one teacher then ``run.num_students`` students against it.

    When ``out_dir`` is given, writes ``teacher.mtnet``, ``student<k>.mtnet``,
    ``history.json`` and ``manifest.json`` there.
    """
    teacher = mdl.init(net_config(data, run, run.seed))
    teacher, t_hist = train_teacher(data, teacher, run, val)
    seeds = run.resolved_student_seeds()
    job = lambda s: train_student(data, teacher, s, run, val)
    if parallel_students:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(job, seeds))
    else:
        results = [job(s) for s in seeds]
    students = [r[0] for r in results]
    histories = {"teacher": t_hist}
    histories.update({f"student{k}": r[1] for k, r in enumerate(results)})
    entries = [{"name": "teacher", "file": "teacher.mtnet", "seed": run.seed, "sha256": _sha(teacher)}]
    entries += [
        {"name": f"student{k}", "file": f"student{k}.mtnet", "seed": s, "sha256": _sha(net)}
        for k, (s, net) in enumerate(zip(seeds, students))
    ]
    manifest = {"run": run.to_dict(), "models": entries}
    cohort = Cohort(teacher, students, histories, manifest)
    if out_dir is not None:
        write_cohort(cohort, out_dir)
    return cohort


def write_cohort(cohort, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    nets = [cohort.teacher] + list(cohort.students)
    for entry, net in zip(cohort.manifest["models"], nets):
        mdl.save(net, os.path.join(out_dir, entry["file"]))
    with open(os.path.join(out_dir, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(cohort.histories, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(cohort.manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
