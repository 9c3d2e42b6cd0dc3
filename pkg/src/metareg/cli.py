"""Command-line entry point.

Subcommands: gentasks, pretrain, metatrain, finetune, register, evaluate,
compare. Exit codes: 0 success, 2 configuration/usage error, 3 format or
I/O error, 4 numeric error.
"""
import argparse
import os
import sys

import numpy as np

from . import fileio
from .config import RunConfig
from .data import hist_equalize, resize_bilinear, rescale_unit
from .errors import ConfigError, FormatError, MetaRegError, NumericError
from .evaluate import (evaluate_fields, evaluate_params, landmark_distance,
                       report_rows_for, run_comparison, write_curve_csv,
                       write_report_csv)
from .model import init_params
from .train import TaskSpec, fine_tune, meta_train, pretrain, register_pair


def _common_flags(sp):
    sp.add_argument("--config", default=None, help="path to a section.key = value file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a single config entry (repeatable)")
    sp.add_argument("--seed", type=int, default=None, help="override train.seed")
    sp.add_argument("--workers", type=int, default=1,
                    help="parallel workers; 1 is bit-reproducible sequential mode")
    sp.add_argument("--out", default=".", help="output directory")


def _load_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed = {args.seed}")
    return RunConfig.load(args.config, overrides)


def _write_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,phase,task_id,loss\n")
        for step, phase, task_id, loss_val in rows:
            f.write(f"{step},{phase},{task_id},{loss_val:.9g}\n")


def _ensure_out(args):
    os.makedirs(args.out, exist_ok=True)


def _load_params(path, expected_arch=None):
    params, _ = fileio.load_checkpoint(path)
    if expected_arch is not None and params.arch != expected_arch:
        raise ConfigError(
            f"checkpoint {path} was trained with a different architecture"
            f" ({params.arch.enc}/{params.arch.dec} vs {expected_arch.enc}/{expected_arch.dec})")
    return params


def cmd_gentasks(args):
    cfg = _load_config(args)
    _ensure_out(args)
    tasks = cfg.source_tasks() + [cfg.target_task()]
    manifest = [("task_id", "texture_kind", "n_pairs", "seed")]
    for task in tasks:
        tdir = os.path.join(args.out, task.task_id)
        os.makedirs(tdir, exist_ok=True)
        for i in range(task.n):
            fileio.write_pair(tdir, i, task.pair(i))
        manifest.append((task.task_id, task.domain.texture_kind, str(task.n), str(task.seed)))
    with open(os.path.join(args.out, "manifest.csv"), "w", encoding="utf-8", newline="\n") as f:
        for row in manifest:
            f.write(",".join(row) + "\n")
    return 0


def cmd_pretrain(args):
    cfg = _load_config(args)
    _ensure_out(args)
    train_cfg = cfg.train
    arch = cfg.arch
    if args.init:
        params = _load_params(args.init, arch)
    else:
        params = init_params(arch, train_cfg.seed)
    rows = []
    steps = args.steps if args.steps is not None else train_cfg.pretrain_steps
    params = pretrain(cfg.source_tasks(), train_cfg, params, steps, log_rows=rows)
    fileio.save_checkpoint(os.path.join(args.out, "pretrain.mrck"), params)
    _write_log(os.path.join(args.out, "pretrain_log.csv"), rows)
    return 0


def cmd_metatrain(args):
    cfg = _load_config(args)
    _ensure_out(args)
    train_cfg = cfg.train
    arch = cfg.arch
    if args.init:
        params = _load_params(args.init, arch)
    elif args.from_scratch:
        params = init_params(arch, train_cfg.seed)
    else:
        raise ConfigError("metatrain needs --init CHECKPOINT or --from-scratch")
    rows = []
    iters = args.iterations if args.iterations is not None else train_cfg.meta_iterations
    params = meta_train(params, cfg.source_tasks(), train_cfg, iterations=iters,
                        log_rows=rows, workers=args.workers)
    fileio.save_checkpoint(os.path.join(args.out, "metatrain.mrck"), params)
    _write_log(os.path.join(args.out, "metatrain_log.csv"), rows)
    return 0


def cmd_finetune(args):
    cfg = _load_config(args)
    _ensure_out(args)
    train_cfg = cfg.train
    params = _load_params(args.init, cfg.arch)
    rows = []
    epochs = args.epochs if args.epochs is not None else train_cfg.finetune_epochs
    params, _history = fine_tune(params, cfg.target_task(), epochs, train_cfg, log_rows=rows)
    fileio.save_checkpoint(os.path.join(args.out, "finetune.mrck"), params)
    _write_log(os.path.join(args.out, "finetune_log.csv"), rows)
    return 0


def _preprocess(img8, args):
    if args.hist_eq:
        img8 = hist_equalize(img8)
    img = fileio.to_unit(img8)
    if args.resize:
        img = resize_bilinear(img, (args.resize, args.resize))
    if args.rescale:
        img = rescale_unit(img)
    return img


def cmd_register(args):
    params = _load_params(args.ckpt)
    moving = _preprocess(fileio.read_pgm(args.moving), args)
    fixed = _preprocess(fileio.read_pgm(args.fixed), args)
    field, warped = register_pair(params, moving, fixed)
    fileio.write_field(args.out_field, field)
    fileio.write_pgm(args.out_warped, warped)
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    task = TaskSpec(task_id=os.path.basename(os.path.normpath(args.task)),
                    directory=args.task)
    samples = [task.pair(i) for i in range(task.n)]
    if any(s.landmarks is None for s in samples):
        raise ConfigError(f"task {args.task!r} is missing landmark files")
    seed = cfg["train.seed"]
    if args.ckpt:
        params = _load_params(args.ckpt, None)
        rows = report_rows_for(seed, "ckpt", evaluate_params(params, samples))
    elif args.fields == "zero":
        fields = [np.zeros((2,) + s.fixed.shape) for s in samples]
        rows = report_rows_for(seed, "zero", evaluate_fields(fields, samples))
    elif args.fields == "gt":
        if any(s.gt_field is None for s in samples):
            raise ConfigError(f"task {args.task!r} is missing ground-truth fields")
        rows = report_rows_for(seed, "gt", evaluate_fields(
            [s.gt_field for s in samples], samples))
    elif args.fields:
        fields = [fileio.read_field(os.path.join(args.fields, f"pair_{i:04d}.field.mrf1"))
                  for i in range(len(samples))]
        rows = report_rows_for(seed, "fields", evaluate_fields(fields, samples))
    else:
        raise ConfigError("evaluate needs --ckpt or --fields {zero,gt,DIR}")
    write_report_csv(args.report, rows)
    return 0


def cmd_compare(args):
    cfg = _load_config(args)
    _ensure_out(args)
    report_rows, curve_rows = run_comparison(
        cfg.arms(), cfg.source_tasks(), cfg.target_task(), list(cfg["compare.seeds"]),
        cfg.train, cfg.arch, split=cfg["compare.split"], workers=args.workers)
    write_report_csv(os.path.join(args.out, "report.csv"), report_rows)
    write_curve_csv(os.path.join(args.out, "curve.csv"), curve_rows)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="metareg",
                                 description="deformable 2D registration with a "
                                             "meta-learned initialization")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gentasks", help="write synthetic task directories")
    _common_flags(sp)
    sp.set_defaults(fn=cmd_gentasks)

    sp = sub.add_parser("pretrain", help="pooled unsupervised pretraining")
    _common_flags(sp)
    sp.add_argument("--init", default=None, help="starting checkpoint (default: fresh init)")
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("metatrain", help="task-level meta training")
    _common_flags(sp)
    sp.add_argument("--init", default=None, help="pretraining checkpoint")
    sp.add_argument("--from-scratch", action="store_true")
    sp.add_argument("--iterations", type=int, default=None)
    sp.set_defaults(fn=cmd_metatrain)

    sp = sub.add_parser("finetune", help="adapt a checkpoint to the target task")
    _common_flags(sp)
    sp.add_argument("--init", required=True, help="checkpoint to adapt")
    sp.add_argument("--epochs", type=int, default=None)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("register", help="register one image pair")
    _common_flags(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("moving", help="moving image (PGM)")
    sp.add_argument("fixed", help="fixed image (PGM)")
    sp.add_argument("--out-field", required=True)
    sp.add_argument("--out-warped", required=True)
    sp.add_argument("--resize", type=int, default=None, help="resize to N x N first")
    sp.add_argument("--hist-eq", action="store_true")
    sp.add_argument("--rescale", action="store_true")
    sp.set_defaults(fn=cmd_register)

    sp = sub.add_parser("evaluate", help="metric report for a task directory")
    _common_flags(sp)
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--fields", default=None, help="'zero', 'gt', or a directory of fields")
    sp.add_argument("--task", required=True, help="task directory (from gentasks)")
    sp.add_argument("--report", required=True, help="output report CSV path")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("compare", help="run the initialization-strategy comparison")
    _common_flags(sp)
    sp.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except MetaRegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
