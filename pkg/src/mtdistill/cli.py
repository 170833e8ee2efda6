"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 validation error (bad flags, bad input files),
2 runtime failure during training or I/O.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from mtdistill import balance as bal
from mtdistill import data as dat
from mtdistill import evaluate as ev
from mtdistill import model as mdl
from mtdistill.losses import CROSS_TASK_MODES, DistillConfig
from mtdistill.training import (
    RunConfig, Schedule, TrainingError, net_config, train_cohort, train_student, train_teacher,
)

log = logging.getLogger("mtdistill")

SPLIT_FILES = {"AU": "au", "EXPR": "expr", "VA": "va"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_triple(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return tuple(parts)


def _int_list(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use flag spelling (dashes ok)."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _add_run_flags(p, student=False):
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-n", type=int, default=RunConfig.batch_n)
    p.add_argument("--hidden", type=_int_list, default=RunConfig.hidden_dims)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-balance", action="store_true", help="train on the data as stored")
    p.add_argument("--oversample-pct", type=float, default=25.0)
    if student:
        p.add_argument("--lambda", dest="lam", type=float, default=DistillConfig.lam)
        p.add_argument("--temperature", type=float, default=DistillConfig.temperature)
        p.add_argument("--cross-task", choices=CROSS_TASK_MODES, default="instance")


def build_parser():
    parser = _Parser(prog="mtdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/val datasets")
    p.add_argument("--counts", type=_int_triple, default=(2000, 2000, 2000))
    p.add_argument("--val-counts", type=_int_triple, default=(500, 500, 500))
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=dat.GenSpec.noise_sigma)
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("balance", help="resample one task dataset and report imbalance")
    p.add_argument("--data", required=True, help=".mtd file")
    p.add_argument("--external", help="optional .mtd file merged after downsampling --data")
    p.add_argument("--task", choices=("au", "expr", "va"), required=True)
    p.add_argument("--oversample-pct", type=float, default=25.0)
    p.add_argument("--epoch-size", type=int)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--marginal", action="store_true", help="VA: balance valence and arousal bins separately")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-teacher", help="train the teacher on ground truth only")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.mtnet)")

    p = sub.add_parser("train-student", help="train one student against a frozen teacher")
    _add_run_flags(p, student=True)
    p.add_argument("--teacher-ckpt", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.mtnet)")

    p = sub.add_parser("train-cohort", help="teacher, students, ensemble and report in one run")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data-dir", help="datasets from gen-data; generated in memory when omitted")
    p.add_argument("--counts", type=_int_triple, default=(2000, 2000, 2000))
    p.add_argument("--val-counts", type=_int_triple, default=(500, 500, 500))
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=dat.GenSpec.noise_sigma)
    p.add_argument("--teacher-epochs", type=int, default=RunConfig.teacher_epochs)
    p.add_argument("--student-epochs", type=int, default=RunConfig.student_epochs)
    p.add_argument("--num-students", type=int, default=RunConfig.num_students)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=DistillConfig.lam)
    p.add_argument("--temperature", type=float, default=DistillConfig.temperature)
    p.add_argument("--cross-task", choices=CROSS_TASK_MODES, default="instance")
    p.add_argument("--batch-n", type=int, default=RunConfig.batch_n)
    p.add_argument("--hidden", type=_int_list, default=RunConfig.hidden_dims)
    p.add_argument("--oversample-pct", type=float, default=25.0)
    p.add_argument("--no-balance", action="store_true")
    p.add_argument("--ensemble-mode", choices=ev.ENSEMBLE_MODES, default="prob")
    p.add_argument("--parallel-students", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)

    for name, helptext in (("eval", "metrics of each checkpoint"), ("ensemble", "metrics of the averaged checkpoints")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", action="append", required=True)
        p.add_argument("--data", required=True, help="directory with *_val.mtd files, or one .mtd file")
        p.add_argument("--out", required=True, help="output directory")
        if name == "ensemble":
            p.add_argument("--mode", choices=ev.ENSEMBLE_MODES, default="prob")

    p = sub.add_parser("report", help="regenerate report files from a train-cohort directory")
    p.add_argument("--cohort-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ensemble-mode", choices=ev.ENSEMBLE_MODES, default="prob")
    p.add_argument("--out", required=True)

    p = sub.add_parser("selfcheck", help="finite-difference gradient checks of every loss")
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--seed", type=int)
    return parser


def _resolve_seed(args):
    if getattr(args, "seed", 0) is None:
        env = os.environ.get("MTDISTILL_SEED")
        args.seed = int(env) if env is not None else 0


def _log_config(args):
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def load_split(path, split="train"):
    """Load a (AU, EXPR, VA) triple from a gen-data directory, or a single .mtd file."""
    if os.path.isfile(path):
        return (dat.load(path),)
    return tuple(dat.load(os.path.join(path, f"{SPLIT_FILES[t]}_{split}.mtd")) for t in dat.TASKS)


def _prepare(datasets, args):
    if args.no_balance:
        return datasets, {}
    return bal.balance_all(datasets, args.oversample_pct, seed=args.seed)


def cmd_gen_data(args):
    spec = dat.GenSpec(latent_dim=args.latent_dim, input_dim=args.input_dim, counts=args.counts,
                       imbalance_skew=args.skew, noise_sigma=args.noise, seed=args.seed)
    train, val = dat.generate_splits(spec, args.val_counts)
    os.makedirs(args.out_dir, exist_ok=True)
    for split, triple in (("train", train), ("val", val)):
        for d in triple:
            dat.save(d, os.path.join(args.out_dir, f"{SPLIT_FILES[d.task]}_{split}.mtd"))
    return 0


def cmd_balance(args):
    d = dat.load(args.data)
    want = {"au": "AU", "expr": "EXPR", "va": "VA"}[args.task]
    if d.task != want:
        raise ValueError(f"--task {args.task} but {args.data} holds {d.task} instances")
    if args.external:
        d = bal.merge_downsample(d, dat.load(args.external), args.stride)
    elif args.stride > 1:
        d = d.take(np.arange(0, len(d), args.stride))
    if want == "AU":
        plan, report = bal.ml_ros(d, args.oversample_pct, args.seed)
    elif want == "EXPR":
        plan = bal.class_resample(d, epoch_size=args.epoch_size, seed=args.seed)
        report = bal.class_report(d.labels, plan)
    else:
        plan = bal.va_bin_resample(d, epoch_size=args.epoch_size, seed=args.seed, joint=not args.marginal)
        report = bal.va_report(d.labels, plan)
    os.makedirs(args.out, exist_ok=True)
    dat.save(plan.apply(d), os.path.join(args.out, f"{args.task}_balanced.mtd"))
    for fname, text in (("balance.txt", report.to_text()), ("balance.json", report.to_json()),
                        ("balance.csv", report.to_csv())):
        with open(os.path.join(args.out, fname), "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(report.to_text())
    return 0


def _run_from_args(args, student=False):
    distill = DistillConfig(args.temperature, args.lam, args.cross_task) if student else DistillConfig()
    epochs = {}
    if args.epochs is not None:
        epochs = {"student_epochs" if student else "teacher_epochs": args.epochs}
    return RunConfig(schedule=Schedule(base_lr=args.lr), batch_n=args.batch_n, hidden_dims=args.hidden,
                     seed=args.seed, distill=distill, **epochs)


def _write_history(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ev.curves_csv(history))


def cmd_train_teacher(args):
    run = _run_from_args(args)
    data, _ = _prepare(load_split(args.data_dir), args)
    net, history = train_teacher(data, mdl.init(net_config(data, run, args.seed)), run)
    _ensure_parent(args.out)
    mdl.save(net, args.out)
    _write_history(history, os.path.splitext(args.out)[0] + "_curves.csv")
    return 0


def cmd_train_student(args):
    run = _run_from_args(args, student=True)
    data, _ = _prepare(load_split(args.data_dir), args)
    teacher = mdl.load(args.teacher_ckpt)
    student, history = train_student(data, teacher, args.seed, run)
    _ensure_parent(args.out)
    mdl.save(student, args.out)
    _write_history(history, os.path.splitext(args.out)[0] + "_curves.csv")
    return 0


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cohort_rows(teacher, students, val, mode="prob"):
    rows = [("teacher", ev.evaluate_net(teacher, val))]
    rows += [(f"student{k}", ev.evaluate_net(s, val)) for k, s in enumerate(students)]
    rows.append(("ensemble", ev.evaluate_ensemble(students, val, mode)))
    return rows


def cmd_train_cohort(args):
    run = RunConfig(
        teacher_epochs=args.teacher_epochs, student_epochs=args.student_epochs, num_students=args.num_students,
        distill=DistillConfig(args.temperature, args.lam, args.cross_task), schedule=Schedule(base_lr=args.lr),
        batch_n=args.batch_n, hidden_dims=args.hidden, seed=args.seed,
    )
    if args.data_dir:
        train, val = load_split(args.data_dir, "train"), load_split(args.data_dir, "val")
    else:
        spec = dat.GenSpec(counts=args.counts, imbalance_skew=args.skew, noise_sigma=args.noise, seed=args.seed)
        train, val = dat.generate_splits(spec, args.val_counts)
    data, reports = _prepare(train, args)
    log.info("student seeds: %s", list(run.resolved_student_seeds()))
    cohort = train_cohort(data, run, out_dir=args.out_dir, parallel_students=args.parallel_students)
    rows = cohort_rows(cohort.teacher, cohort.students, val, args.ensemble_mode)
    ev.report(rows, cohort.histories, reports, args.out_dir)
    sys.stdout.write(ev.table_text(rows))
    return 0


def _eval_sets(path):
    return load_split(path, "val")


def cmd_eval(args):
    val = _eval_sets(args.data)
    rows = [(os.path.splitext(os.path.basename(c))[0], ev.evaluate_net(mdl.load(c), val)) for c in args.ckpt]
    ev.report(rows, out_dir=args.out)
    sys.stdout.write(ev.table_text(rows))
    return 0


def cmd_ensemble(args):
    val = _eval_sets(args.data)
    nets = [mdl.load(c) for c in args.ckpt]
    rows = [("ensemble", ev.evaluate_ensemble(nets, val, args.mode))]
    ev.report(rows, out_dir=args.out)
    sys.stdout.write(ev.table_text(rows))
    return 0


def cmd_report(args):
    with open(os.path.join(args.cohort_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(args.cohort_dir, "history.json"), encoding="utf-8") as fh:
        histories = json.load(fh)
    nets = {e["name"]: mdl.load(os.path.join(args.cohort_dir, e["file"])) for e in manifest["models"]}
    students = [nets[e["name"]] for e in manifest["models"] if e["name"] != "teacher"]
    rows = cohort_rows(nets["teacher"], students, _eval_sets(args.data), args.ensemble_mode)
    ev.report(rows, histories, out_dir=args.out)
    sys.stdout.write(ev.table_text(rows))
    return 0


def cmd_selfcheck(args):
    from mtdistill.selfcheck import TOLERANCE, run_gradient_checks

    results = run_gradient_checks(args.draws, args.seed)
    ok = True
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<20} max rel err {err:.3e}")
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "balance": cmd_balance,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "train-cohort": cmd_train_cohort,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "report": cmd_report,
    "selfcheck": cmd_selfcheck,
}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # Config-file values become defaults; explicit flags still win on the second parse.
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        overrides = {}
        for key, raw in read_config_file(args.config).items():
            if key not in known or key == "config":
                raise UsageError(f"unknown config key {key!r}")
            action = known[key]
            if action.type is not None:
                overrides[key] = action.type(raw)
            elif action.const is True:
                overrides[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                overrides[key] = raw
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return parser, args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser, args = parse_args(argv)
    except UsageError as exc:
        print(f"mtdistill: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"mtdistill: error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _resolve_seed(args)
    _log_config(args)
    try:
        return COMMANDS[args.command](args)
    except (TrainingError, FloatingPointError) as exc:
        print(f"mtdistill: training failed: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"mtdistill: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mtdistill: I/O failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
