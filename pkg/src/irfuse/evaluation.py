"""mIoU / FB-IoU metrics, multi-seed evaluation and report rendering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import CompositeView, FoldSplit, build_validation_set

MODES = ("accumulate", "episode")


def binary_iou(pred, gt) -> float:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _counts(pred, gt) -> np.ndarray:
    """[fg_inter, fg_union, bg_inter, bg_union] as integers."""
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return np.array([
        np.count_nonzero(p & g), np.count_nonzero(p | g),
        np.count_nonzero(~p & ~g), np.count_nonzero(~p | ~g),
    ], dtype=np.int64)


def _ratio(inter, union) -> float:
    return 1.0 if union == 0 else float(inter / union)


def _mean(values) -> float:
    """Correctly rounded mean, independent of summation order."""
    values = list(values)
    return math.fsum(values) / len(values)


def fold_metrics(preds, gts, classes, mode: str = "accumulate") -> dict:
    """Per-class IoU, mIoU and FB-IoU for one fold's episodes.

    ``accumulate`` sums intersections and unions before dividing;
    ``episode`` averages per-episode IoUs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty episode list")
    counts = [_counts(p, g) for p, g in zip(preds, gts)]
    per_class = {}
    for c in sorted(set(classes)):
        rows = [k for k, cls in zip(counts, classes) if cls == c]
        if mode == "accumulate":
            tot = np.sum(rows, axis=0)
            per_class[c] = _ratio(tot[0], tot[1])
        else:
            per_class[c] = _mean([_ratio(r[0], r[1]) for r in rows])
    if mode == "accumulate":
        tot = np.sum(counts, axis=0)
        fg, bg = _ratio(tot[0], tot[1]), _ratio(tot[2], tot[3])
    else:
        fg = _mean([_ratio(r[0], r[1]) for r in counts])
        bg = _mean([_ratio(r[2], r[3]) for r in counts])
    return {
        "per_class_iou": per_class,
        "miou": _mean(per_class.values()),
        "fb_iou": (fg + bg) / 2.0,
        "fg_iou": fg,
        "bg_iou": bg,
    }


def collate_eval(episodes, dtype=torch.float32) -> dict:
    def stack(arrs):
        return torch.from_numpy(np.stack(arrs).astype(np.float32)).to(dtype)

    batch = {
        "supports": stack([np.stack([s[0] for s in e.supports]) for e in episodes]),
        "support_masks": stack([np.stack([s[1] for s in e.supports]) for e in episodes]),
        "query": stack([e.query_image for e in episodes]),
    }
    if episodes[0].aux_query is not None:
        batch["aux_supports"] = stack([np.stack(e.aux_supports) for e in episodes])
        batch["aux_query"] = stack([e.aux_query for e in episodes])
    return batch


@torch.no_grad()
def predict_episodes(model, episodes, batch_size: int = 16) -> list:
    """Binary query predictions at label resolution.

    ``model`` is an ``FSSModel`` or any callable mapping an episode to a mask.
    """
    if not isinstance(model, torch.nn.Module):
        return [np.asarray(model(e)) for e in episodes]
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for i in range(0, len(episodes), batch_size):
        chunk = episodes[i:i + batch_size]
        out = model(collate_eval(chunk, dtype)).final
        out = F.interpolate(out, size=chunk[0].query_mask.shape, mode="bilinear", align_corners=True)
        preds.extend(out.argmax(1).numpy().astype(np.int64))
    model.train(was_training)
    return preds


def evaluate_fold(model, episodes, mode: str = "accumulate") -> dict:
    if len(episodes) == 0:
        raise ValueError("cannot evaluate an empty episode list")
    preds = predict_episodes(model, episodes)
    return fold_metrics(preds, [e.query_mask for e in episodes], [e.target_class for e in episodes], mode)


@dataclass
class MetricsReport:
    method: str
    shot: int
    seeds: list
    folds: dict = field(default_factory=dict)  # fold id -> summary with "per_seed"
    backbone_profile: str = "desk"
    class_names: list | None = None

    @property
    def mean_miou(self) -> float:
        return float(np.mean([f["miou"] for f in self.folds.values()]))

    @property
    def mean_fb_iou(self) -> float:
        return float(np.mean([f["fb_iou"] for f in self.folds.values()]))

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        folds = dict(self.folds)
        folds.update(other.folds)
        return MetricsReport(self.method, self.shot, self.seeds, folds, self.backbone_profile, self.class_names)

    def to_dict(self) -> dict:
        folds = []
        for fid in sorted(self.folds):
            f = self.folds[fid]
            folds.append({
                "fold": fid,
                "per_class": f["per_class"],
                "miou": f["miou"],
                "fb_iou": f["fb_iou"],
                "per_seed": f["per_seed"],
            })
        return {
            "method": self.method,
            "backbone_profile": self.backbone_profile,
            "shot": self.shot,
            "folds": folds,
            "mean_miou": self.mean_miou,
            "mean_fb_iou": self.mean_fb_iou,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        folds = {
            f["fold"]: {"per_class": f["per_class"], "miou": f["miou"], "fb_iou": f["fb_iou"],
                        "per_seed": f.get("per_seed", [])}
            for f in d["folds"]
        }
        return cls(d["method"], d["shot"], d["seeds"], folds, d.get("backbone_profile", "desk"))


def multi_seed_evaluate(
    model,
    view: CompositeView,
    fold: FoldSplit,
    n_runs: int = 5,
    base_seed: int = 0,
    *,
    n_episodes: int = 1000,
    k_shot: int = 1,
    method: str = "model",
    mode: str = "accumulate",
    profile: str = "desk",
    seed_step: int = 1,
) -> MetricsReport:
    """Evaluate on ``n_runs`` validation sets seeded ``base_seed + i * seed_step``."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = [base_seed + i * seed_step for i in range(n_runs)]
    per_seed = []
    for s in seeds:
        episodes = build_validation_set(view, fold, n_episodes, s, k_shot=k_shot)
        m = evaluate_fold(model, episodes, mode)
        per_seed.append({
            "seed": s,
            "miou": m["miou"],
            "fb_iou": m["fb_iou"],
            "per_class": {view.class_names[c]: v for c, v in m["per_class_iou"].items()},
        })
    names = sorted({n for r in per_seed for n in r["per_class"]})
    summary = {
        "per_class": {n: float(np.mean([r["per_class"][n] for r in per_seed if n in r["per_class"]])) for n in names},
        "miou": float(np.mean([r["miou"] for r in per_seed])),
        "fb_iou": float(np.mean([r["fb_iou"] for r in per_seed])),
        "per_seed": per_seed,
    }
    return MetricsReport(method, k_shot, seeds, {fold.fold_id: summary}, profile, list(view.class_names))


def render_report(reports) -> tuple:
    """Render ``(table_text, json_text)``; the best value per column is starred."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to report")
    shots = sorted({r.shot for r in reports})
    folds = sorted({f for r in reports for f in r.folds})
    methods = list(dict.fromkeys(r.method for r in reports))
    by_key = {(r.method, r.shot): r for r in reports}

    columns = []  # (header, shot, getter)
    for shot in shots:
        for f in folds:
            columns.append((f"{shot}s Fold-{f}", shot, lambda r, f=f: r.folds[f]["miou"] if f in r.folds else None))
        columns.append((f"{shot}s MIoU%", shot, lambda r: r.mean_miou))
        columns.append((f"{shot}s FB-IoU%", shot, lambda r: r.mean_fb_iou))

    cells = {}
    best = {}
    for ci, (_, shot, get) in enumerate(columns):
        vals = {m: get(by_key[(m, shot)]) for m in methods if (m, shot) in by_key}
        vals = {m: v for m, v in vals.items() if v is not None}
        cells[ci] = vals
        best[ci] = max(vals.values()) if vals else None

    header = ["Method"] + [c[0] for c in columns]
    rows = []
    for m in methods:
        row = [m]
        for ci in range(len(columns)):
            v = cells[ci].get(m)
            if v is None:
                row.append("-")
            else:
                row.append(f"{100 * v:.2f}" + ("*" if best[ci] is not None and v == best[ci] else ""))
        rows.append(row)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(w) for x, w in zip(r, widths)) for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = "\n".join(lines) + "\n"
    payload = json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    return text, payload

