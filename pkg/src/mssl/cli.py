"""Command-line entry point: synth / split / train-teacher / train-student /
evaluate / report / matrix. Thin wiring over the library modules."""

import argparse
import os
import sys

from . import config as cfgmod
from . import data as datamod
from . import evaluation as evalmod
from . import synthdata
from . import training
from .errors import MsslError, MissingCheckpoint
from .momentum import save_checkpoint, load_checkpoint

TRAIN_DATASET = "trainval"


def _load_cfg(args):
    cfg = cfgmod.load_config(args.config)
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"output_dir={args.out}")
    elif os.environ.get("MSSL_OUTPUT_DIR") and cfg.output_dir == "runs":
        overrides.append(f"output_dir={os.environ['MSSL_OUTPUT_DIR']}")
    if getattr(args, "run_id", None):
        overrides.append(f"run_id={args.run_id}")
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    return cfg


def _train_split(cfg):
    root = os.path.join(cfg.data.root_path, TRAIN_DATASET)
    index = datamod.index_dataset(root, with_masks=True, name=TRAIN_DATASET)
    splits = datamod.split_dataset(index, cfg.data.val_fraction,
                                   cfg.data.labeled_ratio, cfg.seed)
    store = datamod.ImageStore(index, cfg.data.image_size)
    return index, splits, store


def _save_run(cfg, splits, history, checkpoints):
    rd = cfgmod.run_dir(cfg)
    os.makedirs(rd, exist_ok=True)
    datamod.save_split(splits, os.path.join(rd, "split.yaml"))
    cfgmod.write_manifest(cfg, resolved={"split_digest": splits.digest})
    training.write_history(history, os.path.join(rd, "history.csv"))
    if history:
        evalmod.plot_history(history, os.path.join(rd, "curves.png"))
    for ckpt in checkpoints:
        if ckpt is None:
            continue
        path = os.path.join(rd, "checkpoints", f"{ckpt.meta['role']}_best.mssl")
        save_checkpoint(ckpt, path)
    return rd


def cmd_synth(args):
    spec = synthdata.SynthSpec(n_train=args.n_train, n_val=args.n_val,
                               n_test=args.n_test,
                               image_size=(args.size, args.size), seed=args.seed or 0)
    out = synthdata.generate_synthetic_dataset(spec, args.out)
    print(f"synthetic dataset written to {out}")
    return 0


def cmd_split(args):
    cfg = _load_cfg(args)
    _, splits, _ = _train_split(cfg)
    rd = cfgmod.run_dir(cfg)
    datamod.save_split(splits, os.path.join(rd, "split.yaml"))
    print(f"val={len(splits.val_ids)} labeled={len(splits.labeled_ids)} "
          f"unlabeled={len(splits.unlabeled_ids)} digest={splits.digest[:12]}")
    return 0


def cmd_train_teacher(args):
    cfg = _load_cfg(args)
    _, splits, store = _train_split(cfg)
    art = training.train_teacher(cfg, splits, store)
    rd = _save_run(cfg, splits, art.history, [art.teacher, art.momentum_teacher])
    print(f"teacher val_mDice={art.teacher.meta['val_mDice']:.4f} "
          f"momentum_teacher val_mDice={art.momentum_teacher.meta['val_mDice']:.4f} "
          f"artifacts in {rd}")
    return 0


def cmd_train_student(args):
    cfg = _load_cfg(args)
    overrides = [f"ssl.mode={args.mode}"]
    if args.momentum_student:
        overrides.append(
            f"ssl.track_momentum_student={'true' if args.momentum_student == 'on' else 'false'}")
    cfg = cfgmod.apply_overrides(cfg, overrides)
    if not args.ckpt or not os.path.isfile(args.ckpt):
        raise MissingCheckpoint(f"momentum teacher checkpoint required: {args.ckpt!r}")
    mt0 = load_checkpoint(args.ckpt)
    _, splits, store = _train_split(cfg)
    train = (training.train_student_online if cfg.ssl.mode == "online"
             else training.train_student_offline)
    art = train(cfg, splits, store, mt0)
    rd = _save_run(cfg, splits, art.history,
                   [art.student, art.momentum_student, art.momentum_teacher])
    final = art.final
    print(f"final role={final.meta['role']} val_mDice={final.meta['val_mDice']:.4f} "
          f"artifacts in {rd}")
    return 0


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    if not args.ckpt or not os.path.isfile(args.ckpt):
        raise MissingCheckpoint(f"checkpoint required: {args.ckpt!r}")
    ckpt = load_checkpoint(args.ckpt)
    rd = cfgmod.run_dir(cfg)
    names = [n for n in (args.datasets or "test").split(",") if n]
    for name in names:
        index = datamod.index_dataset(os.path.join(cfg.data.root_path, name),
                                      with_masks=True, name=name)
        report = evalmod.evaluate(ckpt, index, cfg)
        path = os.path.join(rd, "reports", f"{report.role}_{name}.yaml")
        evalmod.save_report(report, path)
        print(f"{name}: mDice={report.m_dice:.4f} mIoU={report.m_iou:.4f} -> {path}")
        if args.overlays:
            evalmod.export_overlays(ckpt, index, cfg,
                                    os.path.join(rd, "overlays", name))
    return 0


def cmd_report(args):
    reports = [evalmod.load_report(p) for p in args.reports.split(",") if p]
    table = evalmod.render_comparison(reports)
    text = evalmod.table_to_text(table)
    if args.out:
        evalmod.table_to_csv(table, os.path.join(args.out, "comparison.csv"))
        with open(os.path.join(args.out, "comparison.txt"), "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_matrix(args):
    cfg = _load_cfg(args)
    ratios = [int(r) / 100.0 for r in args.ratios.split(",")]
    modes = [m.strip() for m in args.modes.split(",")]
    test_names = [n for n in (args.datasets or "test").split(",") if n]
    reports = []
    for ratio in ratios:
        tag = f"{int(round(ratio * 100))}"
        tcfg = cfgmod.apply_overrides(cfg, [f"data.labeled_ratio={ratio}",
                                            f"run_id={cfg.run_id}-teacher-r{tag}"])
        _, splits, store = _train_split(tcfg)
        t_art = training.train_teacher(tcfg, splits, store)
        _save_run(tcfg, splits, t_art.history, [t_art.teacher, t_art.momentum_teacher])
        for mode in modes:
            scfg = cfgmod.apply_overrides(tcfg, [f"ssl.mode={mode}",
                                                 f"run_id={cfg.run_id}-r{tag}-{mode}",
                                                 "ssl.track_momentum_student=true"])
            train = (training.train_student_online if mode == "online"
                     else training.train_student_offline)
            s_art = train(scfg, splits, store, t_art.momentum_teacher)
            _save_run(scfg, splits, s_art.history,
                      [s_art.student, s_art.momentum_student, s_art.momentum_teacher])
            for name in test_names:
                index = datamod.index_dataset(os.path.join(scfg.data.root_path, name),
                                              with_masks=True, name=name)
                for ckpt in (s_art.student, s_art.momentum_student):
                    reports.append(evalmod.evaluate(ckpt, index, scfg))
    table = evalmod.render_comparison(reports)
    rd = os.path.join(cfg.output_dir, cfg.run_id)
    evalmod.table_to_csv(table, os.path.join(rd, "comparison.csv"))
    text = evalmod.table_to_text(table)
    with open(os.path.join(rd, "comparison.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="config file path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (repeatable)")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--run-id", help="override run id")


def build_parser():
    parser = argparse.ArgumentParser(prog="mssl",
                                     description="Online pseudo labeling with momentum networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=40)
    p.add_argument("--n-test", type=int, default=60)
    p.add_argument("--size", type=int, default=96)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="compute and persist the dataset split")
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-teacher", help="supervised teacher training on D_sup")
    _add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="semi-supervised student training")
    _add_common(p)
    p.add_argument("--mode", choices=("offline", "online"), default="online")
    p.add_argument("--momentum-student", choices=("on", "off"), default=None)
    p.add_argument("--ckpt", help="momentum teacher checkpoint")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on test datasets")
    _add_common(p)
    p.add_argument("--ckpt", help="checkpoint to evaluate")
    p.add_argument("--datasets", help="comma-separated dataset names")
    p.add_argument("--overlays", action="store_true", help="export debug overlays")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a comparison table from stored reports")
    p.add_argument("--reports", required=True, help="comma-separated report files")
    p.add_argument("--out", help="directory for csv/text renderings")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("matrix", help="run the ratio x mode experiment grid")
    _add_common(p)
    p.add_argument("--ratios", default="20,40,60")
    p.add_argument("--modes", default="offline,online")
    p.add_argument("--datasets", help="comma-separated test dataset names")
    p.set_defaults(func=cmd_matrix)
    return parser


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MsslError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
