"""On-disk stages shared by the CLI and the end-to-end desk experiment.

A run directory looks like::

    dataset/            images/ masks/ classes.txt train.txt val.txt folds.json
    dataset/generated/  ir_l/ rgb_ir/ rgb_l/   (each with a masks/ copy)
    translators/        ir2l.pt ir2rgb.pt
    fss/<name>/         model.pt train_log.jsonl
    reports/            <method>_<shot>shot.json table.txt
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import (
    GENERATED_DIRS,
    METHOD_VARIANTS,
    DatasetError,
    DatasetVariant,
    load_dataset,
    load_generated,
    make_eval_view,
    make_folds,
    make_view,
    read_folds,
    read_split,
    save_image,
    save_mask,
    split_variants,
    write_folds,
    _read_image,
    _stems,
)
from .evaluation import MetricsReport, multi_seed_evaluate, render_report
from .fss import load_model, save_model
from .synthetic import translation_corpus, write_synthetic_dataset
from .train import TrainConfig, config_dict, n_base_classes, train_base_stage, train_meta_stage
from .translate import (
    TranslatorConfig,
    generate_aux_datasets,
    load_translator,
    save_translator,
    train_translator,
    translation_pair,
)

log = logging.getLogger(__name__)

N_FOLDS = 4
EVAL_SEED_OFFSET = 100  # keeps test episodes apart from the seed-pinned validation set


def set_determinism():
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Manifest


def file_digest(paths) -> str:
    """Content hash over files (sorted by path), git-style sha1 of the blobs."""
    h = hashlib.sha1()
    for p in sorted(Path(x) for x in paths):
        data = p.read_bytes()
        h.update(f"blob {len(data)}\0".encode() + data)
    return h.hexdigest()


def tree_files(root) -> list:
    root = Path(root)
    return sorted(p for p in root.rglob("*") if p.is_file()) if root.exists() else []


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config: dict
    input_hash: str
    seed: int
    outputs: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, out_dir, name: str | None = None) -> Path:
        self.finished = time.time()
        path = Path(out_dir) / "manifests" / f"{name or self.command}.json"
        write_json_atomic(path, asdict(self))
        return path


# ---------------------------------------------------------------------------
# Data


def default_split(stems: list, val_fraction: float = 1 / 3) -> tuple:
    stems = sorted(stems)
    n_val = int(round(len(stems) * val_fraction))
    return stems[: len(stems) - n_val], stems[len(stems) - n_val:]


def prepare(root, layout: str, dataset_dir, n_folds: int = N_FOLDS) -> dict:
    """Normalize a raw dataset into ``dataset_dir`` and write its folds."""
    samples, class_names = load_dataset(root, layout)
    if not samples:
        raise DatasetError(f"no images found under {Path(root) / 'images'}")
    out = Path(dataset_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(out / "images" / f"{s.id}.png", s.image)
        save_mask(out / "masks" / f"{s.id}.png", s.mask)
    (out / "classes.txt").write_text("\n".join(class_names) + "\n")
    stems = [s.id for s in samples]
    train, val = read_split(root, "train"), read_split(root, "val")
    if train is None or val is None:
        train, val = default_split(stems)
    missing = sorted(set(train + val) - set(stems))
    if missing:
        raise DatasetError(f"split lists name unknown images {missing[:5]}")
    (out / "train.txt").write_text("\n".join(train) + "\n")
    (out / "val.txt").write_text("\n".join(val) + "\n")
    folds = make_folds(class_names[1:], n_folds)
    write_folds(out / "folds.json", folds)
    return {"dataset": str(out), "folds": str(out / "folds.json"), "n_images": len(samples),
            "classes": class_names}


@dataclass
class Prepared:
    variants: dict
    class_names: list
    folds: list
    train_stems: list
    val_stems: list

    def fold(self, fold_id: int):
        for f in self.folds:
            if f.fold_id == fold_id:
                return f
        raise DatasetError(f"fold {fold_id} not in folds.json ({[f.fold_id for f in self.folds]})")

    def split(self, name: str) -> dict:
        return split_variants(self.variants, self.train_stems if name == "train" else self.val_stems)


def load_prepared(dataset_dir, kinds=("IR",)) -> Prepared:
    """Load a prepared dataset and the generated variants listed in ``kinds``."""
    d = Path(dataset_dir)
    if not (d / "folds.json").is_file():
        raise DatasetError(f"{d} is not a prepared dataset (missing folds.json)")
    samples, class_names = load_dataset(d, "synthetic")
    variants = {"IR": DatasetVariant("IR", samples)}
    if "IR_L" in kinds or "RGB_L" in kinds:
        variants["IR_L"] = load_generated(d, "IR_L", samples)
    if "RGB_IR" in kinds:
        variants["RGB_IR"] = load_generated(d, "RGB_IR", samples)
    if "RGB_L" in kinds:
        variants["RGB_L"] = load_generated(d, "RGB_L", samples)
    return Prepared(variants, class_names, read_folds(d / "folds.json"), read_split(d, "train"),
                    read_split(d, "val"))


def method_kinds(method: str) -> tuple:
    primary, aux = METHOD_VARIANTS[method]
    return tuple(primary) + tuple(aux)


def read_image_dir(directory, channels: int | None = None) -> np.ndarray:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"image directory {directory} does not exist")
    files = _stems(directory)
    if not files:
        raise DatasetError(f"no images in {directory}")
    return np.stack([_read_image(p, channels) for p in files.values()])


# ---------------------------------------------------------------------------
# Translators and generated data


def train_translator_stage(ir, rgb, config: TranslatorConfig, path) -> dict:
    src, dst = translation_pair(ir, rgb, config.direction, config.gamma, config.clahe)
    translator, history = train_translator(src, dst, config)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_translator(path, translator)
    return {"checkpoint": str(path), "final_cycle": history["cycle"][-1], "iterations": len(history["cycle"])}


def generate_stage(dataset_dir, translator_paths: dict, seed: int = 0) -> dict:
    """Write ``generated/{ir_l,rgb_ir,rgb_l}`` images plus mask copies."""
    translators = {}
    for key, expected in (("ir2l", "ir2l"), ("ir2rgb", "ir2rgb")):
        t = load_translator(translator_paths[key])
        if t.direction != expected:
            raise ValueError(f"{translator_paths[key]} holds a {t.direction} translator, expected {expected}")
        translators[key] = t
    cfg = translators["ir2rgb"].config
    prep = load_prepared(dataset_dir)
    outputs = generate_aux_datasets(prep.variants["IR"], translators, seed, cfg.gamma, cfg.clahe)
    written = {}
    for kind, variant in outputs.items():
        target = Path(dataset_dir) / "generated" / GENERATED_DIRS[kind]
        (target / "masks").mkdir(parents=True, exist_ok=True)
        for s in variant.samples:
            stem = s.id.split("/")[-1]
            save_image(target / f"{stem}.png", s.image)
            save_mask(target / "masks" / f"{stem}.png", s.mask)
        written[kind] = {"dir": str(target), "count": len(variant)}
    return written


# ---------------------------------------------------------------------------
# Few-shot segmentation


def train_fss_stage(dataset_dir, method: str, fold_id: int, config: TrainConfig, out_dir) -> dict:
    prep = load_prepared(dataset_dir, method_kinds(method))
    fold = prep.fold(fold_id)
    train_vars, val_vars = prep.split("train"), prep.split("val")
    train_view = make_view(train_vars, method, prep.class_names)
    val_view = make_eval_view(val_vars, method, prep.class_names)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    model, base_hist = train_base_stage(train_view, fold, config, log_path)
    model, meta_hist = train_meta_stage(train_view, val_view, fold, model, config, log_path)
    ckpt = out / "model.pt"
    save_model(ckpt, model, fold=fold.to_dict(), method=method, k_shot=config.k_shot,
               class_names=prep.class_names, train_config=config_dict(config),
               best_epoch=meta_hist["best_epoch"], best_val_miou=meta_hist["best_val"])
    return {"checkpoint": str(ckpt), "log": str(log_path), "best_epoch": meta_hist["best_epoch"],
            "best_val_miou": meta_hist["best_val"], "stopped_epoch": meta_hist["stopped_epoch"],
            "base_loss": base_hist["loss"]}


def evaluate_stage(checkpoint, dataset_dir, fold_id: int, shot: int, runs: int = 5, n_episodes: int = 1000,
                   base_seed: int = 0, mode: str = "accumulate", profile: str = "desk",
                   allow_fold_mismatch: bool = False) -> MetricsReport:
    model, meta = load_model(checkpoint)
    method = meta.get("method", model.config.variant)
    prep = load_prepared(dataset_dir, ("IR", "RGB_IR") if model.dual else ("IR",))
    fold = prep.fold(fold_id)
    trained = meta.get("fold")
    if trained is not None and trained.get("fold") != fold_id:
        msg = f"checkpoint was trained for fold {trained.get('fold')}, evaluating fold {fold_id}"
        if not allow_fold_mismatch:
            raise FoldMismatchError(msg)
        log.warning(msg)
    view = make_eval_view(prep.split("val"), method, prep.class_names)
    return multi_seed_evaluate(model, view, fold, runs, base_seed, n_episodes=n_episodes, k_shot=shot,
                               method=method, mode=mode, profile=profile)


class FoldMismatchError(ValueError):
    pass


def write_reports(reports, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for r in reports:
        p = out / f"{r.method}_{r.shot}shot.json"
        write_json_atomic(p, r.to_dict())
        paths[f"{r.method}_{r.shot}shot"] = str(p)
    text, payload = render_report(reports)
    (out / "table.txt").write_text(text)
    (out / "reports.json").write_text(payload + "\n")
    paths["table"] = str(out / "table.txt")
    return paths


def read_reports(paths) -> list:
    reports = []
    for p in paths:
        data = json.loads(Path(p).read_text())
        for d in data if isinstance(data, list) else [data]:
            reports.append(MetricsReport.from_dict(d))
    return reports


# ---------------------------------------------------------------------------
# End-to-end desk experiment


@dataclass
class DeskExperiment:
    methods: tuple = ("baseline", "method3")
    shots: tuple = (1, 5)
    folds: tuple = (0,)
    n_images: int = 96
    corpus_size: int = 48
    eval_runs: int = 5
    eval_episodes: int = 200
    train_overrides: dict = field(default_factory=dict)
    translator_overrides: dict = field(default_factory=dict)


def run_pipeline(out_dir, seed: int = 0, experiment: DeskExperiment | None = None) -> dict:
    """Synthetic data -> translators -> generated variants -> FSS training -> reports.

    Returns ``{"reports": [MetricsReport], "metrics_json": str, "timings": {...}}``.
    """
    exp = experiment or DeskExperiment()
    set_determinism()
    out = Path(out_dir)
    timings = {}
    t0 = time.perf_counter()
    raw = write_synthetic_dataset(out / "raw", n=exp.n_images, seed=0)
    dataset_dir = out / "dataset"
    prepare(raw, "synthetic", dataset_dir)
    timings["prepare"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    prep = load_prepared(dataset_dir)
    ir_train = np.stack([s.image for s in prep.split("train")["IR"].samples])
    _, rgb = translation_corpus(exp.corpus_size, ir_train.shape[-1], seed=1)
    paths = {}
    for direction in ("ir2l", "ir2rgb"):
        cfg = TranslatorConfig.desk(direction, seed=seed, **exp.translator_overrides)
        paths[direction] = out / "translators" / f"{direction}.pt"
        train_translator_stage(ir_train, rgb, cfg, paths[direction])
    generate_stage(dataset_dir, paths, seed)
    timings["translate"] = time.perf_counter() - t0

    reports = []
    for method in exp.methods:
        for fold_id in exp.folds:
            t0 = time.perf_counter()
            cfg = TrainConfig.desk(method=method, seed=seed, **exp.train_overrides)
            res = train_fss_stage(dataset_dir, method, fold_id, cfg, out / "fss" / f"{method}_fold{fold_id}")
            timings[f"train_{method}_{fold_id}"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            for shot in exp.shots:
                r = evaluate_stage(res["checkpoint"], dataset_dir, fold_id, shot, exp.eval_runs,
                                   exp.eval_episodes, EVAL_SEED_OFFSET)
                reports.append(r)
            timings[f"eval_{method}_{fold_id}"] = time.perf_counter() - t0
    merged = _merge_folds(reports)
    write_reports(merged, out / "reports")
    metrics_json = json.dumps([r.to_dict() for r in merged], indent=2, sort_keys=True)
    return {"reports": merged, "metrics_json": metrics_json, "timings": timings}


def _merge_folds(reports) -> list:
    by_key: dict = {}
    for r in reports:
        key = (r.method, r.shot)
        by_key[key] = by_key[key].merge(r) if key in by_key else r
    return list(by_key.values())
