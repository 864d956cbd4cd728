"""Few-shot segmentation core: shared encoder, base learner, meta learner,
Gram-matrix adjustment, per-domain ensembles and the IR/RGB fusion merge.

Logit maps use channel 0 for background and channel 1 for foreground so that
``argmax`` yields the binary prediction directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import downsample_mask

CHECKPOINT_VERSION = 1
VARIANTS = ("baseline", "method1", "method2", "method3")
DUAL_DOMAIN = ("method2", "method3")
COMPONENTS = ("encoder", "base_head", "meta_shared", "ensemble_ir", "ensemble_rgb", "fusion_merge")
COS_EPS = 1e-7
PRIOR_EPS = 1e-7


class EmptyMaskError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "baseline"
    n_base: int = 3
    widths: tuple = (16, 32, 64)
    meta_dim: int = 32
    ppm_bins: tuple = (1, 2, 4)
    aspp_rates: tuple = (1, 2, 4)
    attention_reduction: int = 4
    gram_normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_base < 1:
            raise ValueError("n_base must be >= 1")
        self.widths = tuple(self.widths)
        self.ppm_bins = tuple(self.ppm_bins)
        self.aspp_rates = tuple(self.aspp_rates)

    @property
    def dual(self) -> bool:
        return self.variant in DUAL_DOMAIN


@dataclass
class FeaturePyramid:
    low: torch.Tensor
    mid: torch.Tensor
    high: torch.Tensor

    def __iter__(self):
        return iter((self.low, self.mid, self.high))


@dataclass
class PredictionMaps:
    meta_ir: torch.Tensor
    base_ir: torch.Tensor
    adj_ir: torch.Tensor
    fg_final: torch.Tensor
    bg_final: torch.Tensor
    final: torch.Tensor
    meta_rgb: torch.Tensor | None = None
    base_rgb: torch.Tensor | None = None
    adj_rgb: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Encoder and base learner


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Encoder(nn.Module):
    """Three stride-2 stages; a 64x64 input gives 32/16/8 feature maps."""

    min_size = 16

    def __init__(self, widths=(16, 32, 64), in_channels: int = 3):
        super().__init__()
        w0, w1, w2 = widths
        self.in_channels = in_channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w0, 3, 2, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU(), ResBlock(w0, w0)
        )
        self.stage2 = ResBlock(w0, w1, stride=2)
        self.stage3 = ResBlock(w1, w2, stride=2)

    def forward(self, x) -> FeaturePyramid:
        if x.dim() == 3:
            x = x[None]
        if min(x.shape[-2:]) < self.min_size:
            raise ValueError(f"input {tuple(x.shape[-2:])} smaller than encoder minimum {self.min_size}")
        if x.shape[1] == 1 and self.in_channels != 1:
            x = x.expand(-1, self.in_channels, -1, -1)
        low = self.stem(x)
        mid = self.stage2(low)
        high = self.stage3(mid)
        return FeaturePyramid(low, mid, high)


def encode(encoder: Encoder, image) -> FeaturePyramid:
    return encoder(image)


class BaseHead(nn.Module):
    """Pyramid pooling over the high-level map followed by a per-pixel classifier."""

    def __init__(self, in_channels: int, n_base: int, bins=(1, 2, 4)):
        super().__init__()
        branch = max(1, in_channels // 4)
        self.bins = bins
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_channels, branch, 1, bias=False), nn.BatchNorm2d(branch), nn.ReLU())
            for _ in bins
        )
        fused = in_channels + branch * len(bins)
        self.bottleneck = nn.Sequential(
            nn.Conv2d(fused, in_channels, 3, 1, 1, bias=False), nn.BatchNorm2d(in_channels), nn.ReLU()
        )
        self.classifier = nn.Conv2d(in_channels, n_base + 1, 1)

    def forward(self, high, out_size):
        h, w = high.shape[-2:]
        feats = [high]
        for b, stage in zip(self.bins, self.stages):
            pooled = stage(F.adaptive_avg_pool2d(high, b))
            feats.append(F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=True))
        logits = self.classifier(self.bottleneck(torch.cat(feats, 1)))
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=True)


def base_predict(base_head: BaseHead, pyramid: FeaturePyramid, out_size=None):
    out_size = out_size or tuple(pyramid.mid.shape[-2:])
    return base_head(pyramid.high, out_size)


# ---------------------------------------------------------------------------
# Guiding features


def _mask_at(mask: torch.Tensor, size, dtype) -> torch.Tensor:
    m = mask.to(dtype)
    if tuple(m.shape[-2:]) != tuple(size):
        m = downsample_mask(m, tuple(size))
    if (m.flatten(-2).sum(-1) <= 0).any():
        raise EmptyMaskError(f"support mask is empty at feature resolution {tuple(size)}")
    return m


def masked_average_pooling(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Prototype ``sum(f * m) / sum(m)`` per channel; ``features`` is (..., C, h, w)."""
    m = _mask_at(mask, features.shape[-2:], features.dtype).unsqueeze(-3)
    return (features * m).sum((-2, -1)) / m.sum((-2, -1))


def max_cosine_similarity(query: torch.Tensor, support: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per query position, the largest cosine similarity to any masked support position.

    ``query``/``support`` are (B, C, h, w); ``mask`` is any-resolution (B, H, W).
    Returns (B, h, w) of raw cosines.
    """
    m = _mask_at(mask, support.shape[-2:], support.dtype)
    b, c, h, w = query.shape
    q = query.flatten(2).transpose(1, 2)  # B x hw x C
    s = support.flatten(2)  # B x C x n
    q = q / (q.norm(dim=2, keepdim=True) + COS_EPS)
    s = s / (s.norm(dim=1, keepdim=True) + COS_EPS)
    cos = torch.bmm(q, s)  # B x hw x n
    valid = (m.flatten(1) > 0).unsqueeze(1)
    cos = cos.masked_fill(~valid, float("-inf"))
    return cos.max(dim=2).values.reshape(b, h, w)


def minmax_normalize(x: torch.Tensor, eps: float = PRIOR_EPS) -> torch.Tensor:
    flat = x.flatten(1)
    lo = flat.min(1).values.reshape(-1, 1, 1)
    hi = flat.max(1).values.reshape(-1, 1, 1)
    return (x - lo) / (hi - lo + eps)


def prior_mask(query_high, support_high, support_mask) -> torch.Tensor:
    """Training-free prior: normalized max cosine between query and masked support features."""
    return minmax_normalize(max_cosine_similarity(query_high, support_high, support_mask))


def multi_similarity(support_pyramid: FeaturePyramid, query_pyramid: FeaturePyramid, support_mask) -> dict:
    """Max-cosine correspondence maps at the mid and high levels."""
    return {
        level: max_cosine_similarity(getattr(query_pyramid, level), getattr(support_pyramid, level), support_mask)
        for level in ("mid", "high")
    }


class AttentionBlock(nn.Module):
    """Channel attention: pooled descriptor -> bottleneck -> sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(F.adaptive_avg_pool2d(x, 1)))))

    def forward(self, x, gate=None):
        return x * (self.gate(x) if gate is None else gate)


def attention_block(block: AttentionBlock, features, gate=None):
    return block(features, gate)


class ASPP(nn.Module):
    def __init__(self, channels: int, rates=(1, 2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 1 if r == 1 else 3, 1, 0 if r == 1 else r, dilation=r) for r in rates
        )
        self.image_pool = nn.Conv2d(channels, channels, 1)
        self.project = nn.Conv2d(channels * (len(rates) + 1), channels, 1)

    def forward(self, x):
        outs = [F.relu(b(x)) for b in self.branches]
        pooled = F.relu(self.image_pool(F.adaptive_avg_pool2d(x, 1)))
        outs.append(pooled.expand(-1, -1, *x.shape[-2:]))
        return F.relu(self.project(torch.cat(outs, 1)))


class MetaLearner(nn.Module):
    """Guiding-feature construction, ASPP and decoder. One instance serves both domains."""

    def __init__(self, widths, dim: int = 32, rates=(1, 2, 4), reduction: int = 4):
        super().__init__()
        w0, w1, w2 = widths
        skip = max(dim // 2, 1)
        self.reduce = nn.Conv2d(w1 + w2, dim, 1)
        self.attention = AttentionBlock(dim, reduction)
        self.merge = nn.Conv2d(2 * dim + 3, dim, 1)
        self.aspp = ASPP(dim, rates)
        self.skip = nn.Conv2d(w0, skip, 1)
        self.decoder = nn.Sequential(nn.Conv2d(dim + skip, dim, 3, 1, 1), nn.ReLU(), nn.Conv2d(dim, 2, 3, 1, 1))

    def features(self, pyr: FeaturePyramid):
        high = F.interpolate(pyr.high, size=pyr.mid.shape[-2:], mode="bilinear", align_corners=True)
        return F.relu(self.reduce(torch.cat([pyr.mid, high], 1)))

    def guides(self, support_pyrs: list, support_masks: torch.Tensor, query_pyr: FeaturePyramid) -> dict:
        """The five guiding maps, averaged over shots. ``support_masks`` is (B, K, H, W)."""
        q_feat = self.features(query_pyr)
        size = q_feat.shape[-2:]

        def up(x):
            return F.interpolate(x.unsqueeze(1), size=size, mode="bilinear", align_corners=True)

        protos, priors, ms_mid, ms_high = [], [], [], []
        for k, s_pyr in enumerate(support_pyrs):
            m = support_masks[:, k]
            protos.append(masked_average_pooling(self.features(s_pyr), m))
            priors.append(up(prior_mask(query_pyr.high, s_pyr.high, m)))
            ms = multi_similarity(s_pyr, query_pyr, m)
            ms_mid.append(up(ms["mid"]))
            ms_high.append(up(ms["high"]))
        proto = torch.stack(protos).mean(0)
        return {
            "prototype": proto[..., None, None].expand(-1, -1, *size),
            "query": self.attention(q_feat),
            "prior": torch.stack(priors).mean(0),
            "sim_mid": torch.stack(ms_mid).mean(0),
            "sim_high": torch.stack(ms_high).mean(0),
        }

    def forward(self, support_pyrs, support_masks, query_pyr, out_size=None):
        g = self.guides(support_pyrs, support_masks, query_pyr)
        x = torch.cat([g["prototype"], g["query"], g["prior"], g["sim_mid"], g["sim_high"]], 1)
        x = self.aspp(F.relu(self.merge(x)))
        # decode at the low-level resolution with a skip from the query's low features
        x = F.interpolate(x, size=query_pyr.low.shape[-2:], mode="bilinear", align_corners=True)
        logits = self.decoder(torch.cat([x, F.relu(self.skip(query_pyr.low))], 1))
        if out_size is not None and tuple(out_size) != tuple(logits.shape[-2:]):
            logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=True)
        return logits


# ---------------------------------------------------------------------------
# Adjustment, ensemble, fusion


def gram_matrix(features: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """``R R^T`` for (..., C, H, W) features reshaped to C x N; ``normalize`` divides by N."""
    r = features.flatten(-2)
    g = r @ r.transpose(-1, -2)
    return g / r.shape[-1] if normalize else g


def gram_adjustment(support_low, query_low, out_size=None, normalize: bool = False) -> torch.Tensor:
    """Frobenius distance between support and query Gram matrices.

    Returns a scalar per item, broadcast to ``out_size`` when given.
    """
    if support_low.shape != query_low.shape:
        raise ValueError(f"support {tuple(support_low.shape)} and query {tuple(query_low.shape)} differ")
    diff = gram_matrix(support_low, normalize) - gram_matrix(query_low, normalize)
    dist = torch.linalg.matrix_norm(diff, ord="fro")
    if out_size is None:
        return dist
    return dist[..., None, None].expand(*dist.shape, *out_size)


class Ensemble(nn.Module):
    """Adjustment (meta fg/bg with the adjustment map) then merge with base evidence.

    One 1x1 adjustment convolution serves both the foreground and the
    background path, so the adjustment cannot bias one class against the other.
    """

    def __init__(self):
        super().__init__()
        self.adjust = nn.Conv2d(2, 1, 1)
        self.bg_merge = nn.Conv2d(2, 1, 1)
        with torch.no_grad():
            for conv in (self.adjust, self.bg_merge):
                conv.weight.zero_()
                conv.weight[0, 0] = 1.0
                conv.bias.zero_()

    def forward(self, meta_logits, base_logits, adj, base_target=None):
        return ensemble(meta_logits, base_logits, adj, self, base_target)


def base_background(base_logits, base_target=None) -> torch.Tensor:
    """Background evidence of the base learner, (B, 1, H, W).

    During meta training the episode's target is itself a base class; its
    probability is folded into the background so that the base learner only
    suppresses *other* known classes. ``base_target`` holds that base index
    per item (0 for none).
    """
    prob = base_logits.softmax(1)
    bg = prob[:, :1]
    if base_target is None:
        return bg
    target = torch.as_tensor(base_target, device=prob.device).long().view(-1, 1, 1, 1)
    picked = prob.gather(1, target.expand(-1, 1, *prob.shape[-2:]))
    return torch.where(target > 0, bg + picked, bg)


def ensemble(meta_logits, base_logits, adj, weights: Ensemble, base_target=None) -> tuple:
    """Return (fg, bg) maps of shape (B, 1, H, W)."""
    meta = meta_logits.softmax(1)
    base_bg = base_background(base_logits, base_target)
    adj = adj.unsqueeze(1) if adj.dim() == 3 else adj
    fg = weights.adjust(torch.cat([meta[:, 1:2], adj], 1))
    bg_psi = weights.adjust(torch.cat([meta[:, 0:1], adj], 1))
    bg = weights.bg_merge(torch.cat([bg_psi, base_bg], 1))
    return fg, bg


class FusionMerge(nn.Module):
    """1x1 merges of IR/RGB foreground maps and of IR/RGB background maps."""

    def __init__(self):
        super().__init__()
        self.fg = nn.Conv2d(2, 1, 1)
        self.bg = nn.Conv2d(2, 1, 1)
        with torch.no_grad():
            for conv in (self.fg, self.bg):
                conv.weight.fill_(0.5)
                conv.bias.zero_()

    def forward(self, ir, rgb):
        return fusion_ensemble(ir, rgb, self)


def fusion_ensemble(ir: tuple, rgb: tuple, weights: FusionMerge) -> torch.Tensor:
    """Final (B, 2, H, W) map, channel order [background, foreground]."""
    fg = weights.fg(torch.cat([ir[0], rgb[0]], 1))
    bg = weights.bg(torch.cat([ir[1], rgb[1]], 1))
    return torch.cat([bg, fg], 1)


# ---------------------------------------------------------------------------
# Full model


class FSSModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder = Encoder(config.widths)
        self.base_head = BaseHead(config.widths[2], config.n_base, config.ppm_bins)
        self.meta_shared = MetaLearner(config.widths, config.meta_dim, config.aspp_rates, config.attention_reduction)
        self.ensemble_ir = Ensemble()
        if config.dual:
            self.ensemble_rgb = Ensemble()
            self.fusion_merge = FusionMerge()

    @property
    def dual(self) -> bool:
        return self.config.dual

    def pred_size(self, image_size) -> tuple:
        return (image_size[0] // 2, image_size[1] // 2)

    def encode_episode(self, supports, query):
        """Encode (B, K, C, H, W) supports and (B, C, H, W) queries in one pass."""
        b, k = supports.shape[:2]
        c = max(supports.shape[2], query.shape[1])
        images = torch.cat([
            supports.flatten(0, 1).expand(-1, c, -1, -1) if supports.shape[2] != c else supports.flatten(0, 1),
            query.expand(-1, c, -1, -1) if query.shape[1] != c else query,
        ])
        pyr = self.encoder(images)

        def split(t):
            return t[: b * k].unflatten(0, (b, k)), t[b * k:]

        lows, highs, mids = split(pyr.low), split(pyr.high), split(pyr.mid)
        support_pyrs = [FeaturePyramid(lows[0][:, i], mids[0][:, i], highs[0][:, i]) for i in range(k)]
        return support_pyrs, FeaturePyramid(lows[1], mids[1], highs[1])

    def domain_forward(self, supports, support_masks, query, ensemble_mod: Ensemble, base_target=None) -> dict:
        size = self.pred_size(query.shape[-2:])
        s_pyrs, q_pyr = self.encode_episode(supports, query)
        meta = self.meta_shared(s_pyrs, support_masks, q_pyr, size)
        base = base_predict(self.base_head, q_pyr, size)
        s_low = torch.stack([p.low for p in s_pyrs]).mean(0)
        adj = gram_adjustment(s_low, q_pyr.low, size, self.config.gram_normalize)
        fg, bg = ensemble_mod(meta, base, adj, base_target)
        return {"meta": meta, "base": base, "adj": adj, "fg": fg, "bg": bg}

    def forward(self, batch: dict) -> PredictionMaps:
        target = batch.get("base_target")
        ir = self.domain_forward(batch["supports"], batch["support_masks"], batch["query"], self.ensemble_ir, target)
        if not self.dual:
            return PredictionMaps(
                meta_ir=ir["meta"], base_ir=ir["base"], adj_ir=ir["adj"],
                fg_final=ir["fg"][:, 0], bg_final=ir["bg"][:, 0], final=torch.cat([ir["bg"], ir["fg"]], 1),
            )
        if batch.get("aux_query") is None:
            raise ValueError(f"variant {self.config.variant} needs auxiliary RGB inputs")
        rgb = self.domain_forward(batch["aux_supports"], batch["support_masks"], batch["aux_query"],
                                  self.ensemble_rgb, target)
        final = self.fusion_merge((ir["fg"], ir["bg"]), (rgb["fg"], rgb["bg"]))
        return PredictionMaps(
            meta_ir=ir["meta"], base_ir=ir["base"], adj_ir=ir["adj"],
            meta_rgb=rgb["meta"], base_rgb=rgb["base"], adj_rgb=rgb["adj"],
            fg_final=final[:, 1], bg_final=final[:, 0], final=final,
            extras={"ir": (ir["fg"], ir["bg"]), "rgb": (rgb["fg"], rgb["bg"])},
        )

    def base_forward(self, images):
        """Base-learner logits at prediction resolution for a (B, C, H, W) batch."""
        pyr = self.encoder(images)
        return base_predict(self.base_head, pyr, self.pred_size(images.shape[-2:]))

    def component_modules(self) -> dict:
        return {name: getattr(self, name) for name in COMPONENTS if hasattr(self, name)}


def meta_predict(model: FSSModel, batch: dict, domain: str = "ir") -> torch.Tensor:
    """Meta-learner logits for one domain; both domains run the same shared module."""
    if domain == "ir":
        supports, query = batch["supports"], batch["query"]
    elif domain == "rgb":
        supports, query = batch["aux_supports"], batch["aux_query"]
    else:
        raise ValueError(f"unknown domain {domain!r}")
    s_pyrs, q_pyr = model.encode_episode(supports, query)
    return model.meta_shared(s_pyrs, batch["support_masks"], q_pyr, model.pred_size(query.shape[-2:]))


def count_parameters(model: FSSModel) -> dict:
    by_component = {
        name: sum(p.numel() for p in mod.parameters()) for name, mod in model.component_modules().items()
    }
    return {"total": sum(by_component.values()), "by_component": by_component}


def parameter_overhead(model: FSSModel, reference: FSSModel) -> dict:
    """Extra parameters of ``model`` over ``reference`` and which components carry them."""
    a, b = count_parameters(model), count_parameters(reference)
    changed = {
        name: a["by_component"].get(name, 0) - b["by_component"].get(name, 0)
        for name in set(a["by_component"]) | set(b["by_component"])
    }
    changed = {k: v for k, v in changed.items() if v}
    extra = a["total"] - b["total"]
    return {"extra": extra, "ratio": extra / b["total"], "components": changed}


def save_model(path, model: FSSModel, **metadata) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "fss",
        "config": asdict(model.config),
        "variant": model.config.variant,
        "components": {name: mod.state_dict() for name, mod in model.component_modules().items()},
        "metadata": metadata,
    }, Path(path))


def load_model(path) -> tuple:
    """Return ``(model, metadata)``."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION or blob.get("kind") != "fss":
        raise ValueError(f"{path}: model checkpoint version {blob.get('format_version')} != {CHECKPOINT_VERSION}")
    model = FSSModel(ModelConfig(**blob["config"]))
    for name, state in blob["components"].items():
        getattr(model, name).load_state_dict(state)
    model.eval()
    return model, blob.get("metadata", {})
