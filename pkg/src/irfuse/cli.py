"""``irfuse`` command line: prepare, train-translator, generate, train-fss, evaluate, report.

Every command writes under one ``--out`` run directory, holds a lock on it
while running and leaves ``manifests/<command>.json`` behind. Settings
resolve as profile defaults < ``IRFUSE_SEED`` < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import filelock

from . import pipeline
from .config import ConfigError, apply_overrides, load_kv
from .dataset import GENERATED_DIRS, LAYOUTS, METHOD_VARIANTS, DatasetError
from .evaluation import MODES
from .synthetic import write_synthetic_dataset
from .train import TrainConfig, config_dict
from .translate import DIRECTIONS, TranslatorConfig

log = logging.getLogger("irfuse")

EVAL_EPISODES = {"desk": 200, "paper": 1000}
LOCK_NAME = ".irfuse.lock"


class CLIError(RuntimeError):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("IRFUSE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CLIError(f"IRFUSE_SEED must be an integer, got {env!r}") from None


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(base, args, flags: dict):
    """Apply env seed, then the config file, then explicit flags to ``base``."""
    cfg = apply_overrides(base, {"seed": _seed(args)})
    if args.config:
        cfg = apply_overrides(cfg, load_kv(args.config))
    if args.seed is not None:
        flags = {"seed": args.seed, **flags}
    flags = {k: v for k, v in flags.items() if v is not None}
    flags.update(_parse_sets(getattr(args, "set", None)))
    return apply_overrides(cfg, flags)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CLIError(f"{what} directory {p} does not exist")
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} {p} does not exist")
    return p


def _dataset_dir(args) -> Path:
    return Path(args.dataset) if getattr(args, "dataset", None) else Path(args.out) / "dataset"


# ---------------------------------------------------------------------------
# Commands; each returns (config echo, input files, outputs)


def cmd_prepare(args):
    out = Path(args.out)
    if args.synthetic:
        root = write_synthetic_dataset(out / "raw", n=args.synthetic, seed=_seed(args))
        layout = "synthetic"
    else:
        if not args.root:
            raise CLIError("prepare needs --root or --synthetic N")
        root, layout = _require_dir(args.root, "dataset root"), args.layout
    res = pipeline.prepare(root, layout, out / "dataset")
    print(f"prepared {res['n_images']} images, {len(res['classes']) - 1} classes -> {res['dataset']}")
    return {"root": str(root), "layout": layout}, pipeline.tree_files(root), res


def cmd_train_translator(args):
    src = _require_dir(args.src, "source (IR)")
    dst = _require_dir(args.dst, "target (RGB)")
    factory = TranslatorConfig.paper if args.profile == "paper" else TranslatorConfig.desk
    cfg = _resolve(factory(args.direction), args, {"epochs": args.epochs})
    if cfg.direction != args.direction:
        raise CLIError(f"config direction {cfg.direction} conflicts with --direction {args.direction}")
    ir = pipeline.read_image_dir(src, 1)
    rgb = pipeline.read_image_dir(dst, 3)
    path = Path(args.out) / "translators" / f"{cfg.direction}.pt"
    res = pipeline.train_translator_stage(ir, rgb, cfg, path)
    print(f"{cfg.direction} translator ({cfg.epochs} epochs) -> {path}")
    return asdict(cfg), pipeline.tree_files(src) + pipeline.tree_files(dst), res


def cmd_generate(args):
    dataset = _require_dir(args.ir or _dataset_dir(args), "IR dataset")
    tdir = _require_dir(args.translators or Path(args.out) / "translators", "translator")
    paths = {d: _require_file(tdir / f"{d}.pt", f"{d} translator checkpoint") for d in DIRECTIONS}
    res = pipeline.generate_stage(dataset, paths, _seed(args))
    for kind, info in res.items():
        print(f"{kind}: {info['count']} images -> {info['dir']}")
    inputs = pipeline.tree_files(dataset / "images") + list(paths.values())
    return {"ir": str(dataset), "translators": str(tdir)}, inputs, res


def cmd_train_fss(args):
    dataset = _require_dir(_dataset_dir(args), "prepared dataset")
    factory = TrainConfig.paper if args.profile == "paper" else TrainConfig.desk
    cfg = _resolve(factory(method=args.method), args, {"method": args.method, "k_shot": args.shot})
    out_dir = Path(args.out) / "fss" / f"{cfg.method}_fold{args.fold}"
    res = pipeline.train_fss_stage(dataset, cfg.method, args.fold, cfg, out_dir)
    print(f"{cfg.method} fold {args.fold}: best val mIoU {res['best_val_miou']:.4f} "
          f"at epoch {res['best_epoch']} -> {res['checkpoint']}")
    inputs = pipeline.tree_files(dataset)
    return config_dict(cfg), [p for p in inputs if "generated" not in p.parts or _needed(p, cfg.method)], res


def _needed(path: Path, method: str) -> bool:
    kinds = pipeline.method_kinds(method)
    return any(GENERATED_DIRS.get(k) in path.parts for k in kinds)


def cmd_evaluate(args):
    ckpt = _require_file(args.checkpoint, "checkpoint")
    dataset = _require_dir(_dataset_dir(args), "prepared dataset")
    episodes = args.episodes or EVAL_EPISODES[args.profile]
    reports = []
    for shot in args.shot:
        r = pipeline.evaluate_stage(ckpt, dataset, args.fold, shot, args.runs, episodes,
                                    _seed(args) + pipeline.EVAL_SEED_OFFSET, args.mode, args.profile,
                                    args.allow_fold_mismatch)
        reports.append(r)
    paths = pipeline.write_reports(reports, Path(args.out) / "reports" / ckpt.parent.name)
    for r in reports:
        print(f"{r.method} {r.shot}-shot fold {args.fold}: mIoU {100 * r.mean_miou:.2f} "
              f"FB-IoU {100 * r.mean_fb_iou:.2f}")
    echo = {"checkpoint": str(ckpt), "fold": args.fold, "shots": args.shot, "runs": args.runs,
            "episodes": episodes, "mode": args.mode}
    return echo, [ckpt] + pipeline.tree_files(dataset / "images"), paths


def cmd_report(args):
    inputs = args.inputs or sorted(glob.glob(str(Path(args.out) / "reports" / "*" / "*shot.json")))
    if not inputs:
        raise CLIError(f"no report files found under {Path(args.out) / 'reports'}")
    for p in inputs:
        _require_file(p, "report")
    reports = pipeline._merge_folds(pipeline.read_reports(inputs))
    paths = pipeline.write_reports(reports, Path(args.out) / "reports")
    print(Path(paths["table"]).read_text(), end="")
    return {"inputs": [str(p) for p in inputs]}, [Path(p) for p in inputs], paths


COMMANDS = {
    "prepare": cmd_prepare,
    "train-translator": cmd_train_translator,
    "generate": cmd_generate,
    "train-fss": cmd_train_fss,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--seed", type=int, default=None, help="global seed (default: $IRFUSE_SEED or 0)")
    common.add_argument("--config", help="key = value file applied before flags")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="irfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="normalize a dataset and write its folds")
    p.add_argument("--root")
    p.add_argument("--layout", choices=LAYOUTS, default="synthetic")
    p.add_argument("--synthetic", type=int, metavar="N", help="render an N-image synthetic dataset instead")

    p = sub.add_parser("train-translator", parents=[common], help="train an IR->RGB or IR->lightness translator")
    p.add_argument("--src", required=True, help="directory of IR images")
    p.add_argument("--dst", required=True, help="directory of RGB images (unpaired)")
    p.add_argument("--direction", choices=sorted(DIRECTIONS), required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("generate", parents=[common], help="write ir_l/, rgb_ir/, rgb_l/ variants")
    p.add_argument("--ir", help="prepared dataset (default: OUT/dataset)")
    p.add_argument("--translators", help="directory holding ir2l.pt and ir2rgb.pt (default: OUT/translators)")

    p = sub.add_parser("train-fss", parents=[common], help="two-stage few-shot segmentation training")
    p.add_argument("--method", choices=sorted(METHOD_VARIANTS), required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--shot", type=int, default=None)
    p.add_argument("--dataset", help="prepared dataset (default: OUT/dataset)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("evaluate", parents=[common], help="multi-seed evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--shot", type=int, nargs="+", default=[1])
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--episodes", type=int, help="episodes per run (desk 200, paper 1000)")
    p.add_argument("--mode", choices=MODES, default="accumulate")
    p.add_argument("--dataset", help="prepared dataset (default: OUT/dataset)")
    p.add_argument("--allow-fold-mismatch", action="store_true",
                   help="evaluate even if the checkpoint was trained for another fold")

    p = sub.add_parser("report", parents=[common], help="merge report JSON files into one table")
    p.add_argument("inputs", nargs="*", help="report JSON files (default: every report under OUT/reports)")
    return parser


def _manifest_name(args) -> str:
    if args.command == "train-translator":
        return f"{args.command}-{args.direction}"
    if args.command == "train-fss":
        return f"{args.command}-{args.method}-fold{args.fold}"
    if args.command == "evaluate":
        return f"{args.command}-{Path(args.checkpoint).parent.name}-fold{args.fold}"
    return args.command


def run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(out / LOCK_NAME), timeout=0)
    try:
        with lock:
            manifest = pipeline.RunManifest(args.command, {}, "", _seed(args))
            echo, inputs, outputs = COMMANDS[args.command](args)
            manifest.config = {"profile": args.profile, **echo}
            manifest.input_hash = pipeline.file_digest(inputs)
            manifest.outputs = outputs
            manifest.write(out, _manifest_name(args))
    except filelock.Timeout:
        raise CLIError(f"another irfuse process is writing to {out} (lock {out / LOCK_NAME})") from None
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate" and any(s < 1 for s in args.shot):
        print("irfuse: error: --shot must be >= 1", file=sys.stderr)
        return 2
    pipeline.set_determinism()
    try:
        return run(args)
    except (CLIError, ConfigError, DatasetError, pipeline.FoldMismatchError) as exc:
        msg = str(exc)
        if isinstance(exc, pipeline.FoldMismatchError):
            msg += " (pass --allow-fold-mismatch to proceed)"
        print(f"irfuse: error: {msg}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"irfuse: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
