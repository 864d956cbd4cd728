"""Losses and the two-stage (base, then episodic meta) training protocol."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import (
    CompositeView,
    DatasetError,
    FoldSplit,
    augment_arrays,
    build_validation_set,
    downsample_mask,
    remap_for_base_stage,
    sample_episode,
)
from .evaluation import collate_eval, evaluate_fold
from .fss import DUAL_DOMAIN, VARIANTS, FSSModel, ModelConfig


@dataclass
class TrainConfig:
    method: str = "baseline"
    lr: float = 7.5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    epochs_base: int = 200
    epochs_meta: int = 200
    early_stop_patience: int = 75
    batch_size: int = 8
    episodes_per_batch: int = 4
    steps_per_epoch: int = 0  # 0: one pass over the IR queries
    k_shot: int = 1
    crop_size: int = 473
    n_val: int = 1000
    val_seed: int = 0
    widths: tuple = (64, 128, 256)
    meta_dim: int = 64
    freeze_encoder: bool = True
    augment: bool = True
    grad_clip: float = 10.0  # max global gradient norm per step, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.method not in VARIANTS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if not 0 < self.early_stop_patience < self.epochs_meta:
            raise ValueError("early_stop_patience must be in (0, epochs_meta)")
        if self.k_shot < 1 or self.batch_size < 1 or self.episodes_per_batch < 1:
            raise ValueError("k_shot, batch_size and episodes_per_batch must be >= 1")
        self.widths = tuple(self.widths)

    @classmethod
    def paper(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        base = dict(epochs_base=20, epochs_meta=20, early_stop_patience=8, crop_size=64,
                    widths=(16, 32, 64), meta_dim=32, n_val=100, lr=0.05, steps_per_epoch=40)
        base.update(overrides)
        return cls(**base)

    def model_config(self, n_base: int) -> ModelConfig:
        return ModelConfig(variant=self.method, n_base=n_base, widths=self.widths, meta_dim=self.meta_dim,
                           seed=self.seed)


# ---------------------------------------------------------------------------
# Losses


def _targets_at(mask, size) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask)
    if m.dim() == 2:
        m = m[None]
    if tuple(m.shape[-2:]) != tuple(size):
        m = F.interpolate(m[:, None].float(), size=size, mode="nearest")[:, 0]
    return m.long()


def loss_base(base_logits: torch.Tensor, base_mask) -> torch.Tensor:
    """Pixel-wise cross-entropy, mean over pixels then over the batch."""
    target = _targets_at(base_mask, base_logits.shape[-2:])
    n_cls = base_logits.shape[1]
    if target.min() < 0 or target.max() >= n_cls:
        raise ValueError(f"label index out of range for {n_cls} base logits")
    ce = F.cross_entropy(base_logits, target, reduction="none")
    return ce.flatten(1).mean(1).mean()


def _soft_targets_at(mask, size, dtype) -> torch.Tensor:
    # bilinear (align_corners) resampling, the same geometry used to upsample predictions
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask).to(dtype)
    if m.dim() == 2:
        m = m[None]
    if tuple(m.shape[-2:]) != tuple(size):
        m = downsample_mask(m, tuple(size))
    return m


def _binary_ce(logits: torch.Tensor, mask) -> torch.Tensor:
    # BCE on the softmaxed foreground channel; log(1 - p_fg) is log p_bg
    target = _soft_targets_at(mask, logits.shape[-2:], logits.dtype)
    logp = F.log_softmax(logits, 1)
    bce = -(target * logp[:, 1] + (1 - target) * logp[:, 0])
    return bce.flatten(1).mean(1).mean()


def loss_meta(meta_logits: torch.Tensor, mask) -> torch.Tensor:
    return _binary_ce(meta_logits, mask)


def loss_final(final_logits: torch.Tensor, mask) -> torch.Tensor:
    return _binary_ce(final_logits, mask)


def loss_total(L_f, L_m, L_b, L_m_rgb=None, L_b_rgb=None, method: str = "baseline"):
    if method not in VARIANTS:
        raise ValueError(f"unknown method {method!r}")
    terms = [L_f, L_m, L_b]
    if method in DUAL_DOMAIN:
        if L_m_rgb is None or L_b_rgb is None:
            raise ValueError(f"{method} needs the RGB loss terms")
        terms += [L_m_rgb, L_b_rgb]
    for t in terms:
        if bool(torch.isnan(torch.as_tensor(t)).any()):
            raise ValueError("NaN loss component")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ---------------------------------------------------------------------------
# Batching


def _to3(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, 0) if image.shape[0] == 1 else image


def _poly_lr(base: float, it: int, total: int, power: float) -> float:
    return base * (1 - it / max(total, 1)) ** power


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def augment_episode(episode, crop_size: int, rng: np.random.Generator):
    """Jointly augment each support (with its aux image) and the query.

    A support whose mask vanishes at encoder resolution falls back to the
    deterministic eval transform.
    """
    feat = (max(crop_size // 8, 1),) * 2
    aux = episode.aux_query is not None
    supports, aux_supports = [], []
    for k, (img, m) in enumerate(episode.supports):
        ims = [img] + ([episode.aux_supports[k]] if aux else [])
        out, om = augment_arrays(ims, m, crop_size, True, rng)
        if downsample_mask(om.astype(np.float64), feat).sum() <= 0:
            out, om = augment_arrays(ims, m, crop_size, False)
        supports.append((out[0], om))
        if aux:
            aux_supports.append(out[1])
    ims = [episode.query_image] + ([episode.aux_query] if aux else [])
    extra = [episode.base_mask] if episode.base_mask is not None else []
    res = augment_arrays(ims, episode.query_mask, crop_size, True, rng, extra_masks=extra)
    out, qm = res[0], res[1]
    new = copy.copy(episode)
    new.supports = supports
    new.query_image = out[0]
    new.query_mask = qm
    if extra:
        new.base_mask = res[2][0]
    if aux:
        new.aux_supports = aux_supports
        new.aux_query = out[1]
    return new


def collate_train(episodes, dtype=torch.float32) -> dict:
    batch = collate_eval(episodes, dtype)
    batch["query_mask"] = torch.from_numpy(np.stack([e.query_mask for e in episodes]))
    batch["base_mask"] = torch.from_numpy(np.stack([e.base_mask for e in episodes]))
    batch["base_target"] = torch.tensor([e.base_target for e in episodes])
    return batch


def episode_losses(model: FSSModel, batch: dict, method: str) -> dict:
    out = model(batch)
    q, b = batch["query_mask"], batch["base_mask"]
    terms = {
        "final": loss_final(out.final, q),
        "meta": loss_meta(out.meta_ir, q),
        "base": loss_base(out.base_ir, b),
    }
    if method in DUAL_DOMAIN:
        terms["meta_rgb"] = loss_meta(out.meta_rgb, q)
        terms["base_rgb"] = loss_base(out.base_rgb, b)
    terms["total"] = loss_total(terms["final"], terms["meta"], terms["base"], terms.get("meta_rgb"),
                                terms.get("base_rgb"), method)
    return terms


class _Log:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _clip(params, max_norm: float):
    # The ensemble and fusion 1x1 convs multiply into each other; without a cap a
    # single large-gradient episode can start a runaway under momentum SGD.
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(list(params), max_norm)


def _check_finite(value: float, where: str):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss in {where}")


# ---------------------------------------------------------------------------
# Stages


def n_base_classes(view: CompositeView, fold: FoldSplit) -> int:
    held = [n for n in fold.test_classes if n in view.class_names]
    return len(view.class_names) - 1 - len(held)


def train_base_stage(view: CompositeView, fold: FoldSplit, config: TrainConfig, log_path=None) -> tuple:
    """Supervised base-class training of encoder and base head.

    Returns ``(model, history)``; ``history["loss"]`` holds one mean loss per epoch.
    """
    samples = view.all_samples()
    if not samples:
        raise DatasetError("base stage needs a non-empty dataset view")
    n_classes = len(view.class_names)
    held = [view.class_index(n) for n in fold.test_classes if n in view.class_names]
    model = FSSModel(config.model_config(n_base_classes(view, fold)))
    params = list(model.encoder.parameters()) + list(model.base_head.parameters())
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    torch.manual_seed(config.seed)
    masks = [remap_for_base_stage(s.mask, held, n_classes)[0] for s in samples]
    steps = math.ceil(len(samples) / config.batch_size)
    total = steps * config.epochs_base
    log = _Log(log_path)
    history = {"loss": []}
    model.train()
    it = 0
    for epoch in range(config.epochs_base):
        rng = _rng(config.seed, 0, epoch)
        order = rng.permutation(len(samples))
        losses = []
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            ims, ms = [], []
            for i in idx:
                (im,), m = augment_arrays([_to3(samples[i].image)], masks[i], config.crop_size, True, rng)
                ims.append(im)
                ms.append(m)
            x = torch.from_numpy(np.stack(ims))
            lr = _poly_lr(config.lr, it, total, config.poly_power)
            _set_lr(opt, lr)
            loss = loss_base(model.base_forward(x), np.stack(ms))
            opt.zero_grad()
            loss.backward()
            _clip(params, config.grad_clip)
            opt.step()
            it += 1
            losses.append(loss.item())
            _check_finite(losses[-1], "base stage")
        history["loss"].append(float(np.mean(losses)))
        log.write({"stage": "base", "epoch": epoch, "losses": {"base": history["loss"][-1]},
                   "val_miou": None, "lr": lr})
    return model, history


def _meta_mode(model: FSSModel, freeze_encoder: bool):
    model.train()
    model.base_head.eval()
    if freeze_encoder:
        model.encoder.eval()


def meta_parameters(model: FSSModel, freeze_encoder: bool = True) -> list:
    frozen = ["base_head"] + (["encoder"] if freeze_encoder else [])
    out = []
    for name, mod in model.component_modules().items():
        trainable = name not in frozen
        for p in mod.parameters():
            p.requires_grad_(trainable)
            if trainable:
                out.append(p)
    return out


def train_meta_stage(
    train_view: CompositeView,
    val_view: CompositeView | None,
    fold: FoldSplit,
    model: FSSModel,
    config: TrainConfig,
    log_path=None,
    episodes=None,
    val_episodes=None,
) -> tuple:
    """Episodic training with per-epoch validation and early stopping.

    ``episodes`` pins a fixed list of training episodes (used for overfitting
    checks); otherwise fresh episodes are drawn every step. ``val_episodes``
    replaces the seed-pinned validation set built from ``val_view``. Returns
    ``(model_at_best_epoch, history)``.
    """
    if model is None:
        raise ValueError("meta stage needs base-stage weights")
    if model.config.variant != config.method:
        raise ValueError(f"model variant {model.config.variant} != config method {config.method}")
    dual = config.method in DUAL_DOMAIN
    if dual and not train_view.has_aux:
        raise DatasetError(f"{config.method} needs auxiliary RGB data")
    params = meta_parameters(model, config.freeze_encoder)
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    torch.manual_seed(config.seed)
    val_eps = list(val_episodes) if val_episodes is not None else None
    if val_eps is None and val_view is not None and config.n_val > 0:
        val_eps = build_validation_set(val_view, fold, config.n_val, config.val_seed, k_shot=config.k_shot,
                                       feature_size=max(config.crop_size // 8, 1))
    steps = config.steps_per_epoch or max(1, math.ceil(len(train_view.parts[0]) / config.episodes_per_batch))
    total = steps * config.epochs_meta
    log = _Log(log_path)
    history = {"records": [], "best_epoch": None, "best_val": -1.0, "stopped_epoch": None}
    best_state = None
    it = 0
    for epoch in range(config.epochs_meta):
        _meta_mode(model, config.freeze_encoder)
        sums: dict = {}
        for s in range(steps):
            rng = _rng(config.seed, 1, epoch, s)
            if episodes is None:
                eps = [sample_episode(train_view, fold, config.k_shot, "meta_train", [config.seed, epoch, s, j],
                                      with_aux=dual)
                       for j in range(config.episodes_per_batch)]
            else:
                eps = list(episodes)
            if config.augment:
                eps = [augment_episode(e, config.crop_size, rng) for e in eps]
            lr = _poly_lr(config.lr, it, total, config.poly_power)
            _set_lr(opt, lr)
            terms = episode_losses(model, collate_train(eps), config.method)
            opt.zero_grad()
            terms["total"].backward()
            _clip(params, config.grad_clip)
            opt.step()
            it += 1
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            _check_finite(terms["total"].item(), "meta stage")
        losses = {k: v / steps for k, v in sums.items()}
        val = evaluate_fold(model, val_eps)["miou"] if val_eps else None
        record = {"stage": "meta", "epoch": epoch, "losses": losses, "val_miou": val, "lr": lr}
        history["records"].append(record)
        log.write(record)
        score = val if val is not None else -losses["total"]
        if best_state is None or score > history["best_val"]:
            history["best_val"], history["best_epoch"] = score, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - history["best_epoch"] >= config.early_stop_patience:
            history["stopped_epoch"] = epoch
            break
    model.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return model, history


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d
