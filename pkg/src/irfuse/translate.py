"""Diffusion maths and the adversarial conditional diffusion translator.

The translator pairs two non-diffusive cycle-consistent generators (which
give rough cross-domain estimates) with two time-conditioned denoising
generators that jump ``k`` diffusion steps at a time. Discriminators judge
``(x_{t-k}, x_t)`` pairs so that few large reverse steps stay sharp.

Images enter and leave in ``[0, 1]``; internally they live in ``[-1, 1]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import DEFAULT_CLAHE, DatasetVariant, ImageSample, preprocess_ir, rgb_to_lightness

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DIRECTIONS = {"ir2rgb": (1, 3), "ir2l": (1, 1)}


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Variance schedule; arrays are indexed by timestep with entry 0 meaning "clean"."""

    T: int
    k: int
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape == (self.T,):
            beta = np.concatenate([[0.0], beta])
        if beta.shape != (self.T + 1,):
            raise ScheduleError(f"expected {self.T} betas, got {beta.shape}")
        if self.k < 1 or self.T % self.k:
            raise ScheduleError(f"step size k={self.k} must divide T={self.T}")
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)
        ab_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            var = beta * (1.0 - ab_prev) / (1.0 - self.alpha_bar)
        var[:2] = 0.0
        self.sigma = np.sqrt(var)
        # large-step quantities, defined on multiples of k
        self.gamma_big = np.full(self.T + 1, np.nan)
        self.sigma_big = np.full(self.T + 1, np.nan)
        for t in range(self.k, self.T + 1, self.k):
            prev = self.alpha_bar[t - self.k]
            g = 1.0 - self.alpha_bar[t] / prev
            self.gamma_big[t] = g
            with np.errstate(divide="ignore", invalid="ignore"):
                self.sigma_big[t] = np.sqrt(g * (1.0 - prev) / (1.0 - self.alpha_bar[t]))
        self.sigma_big[self.k] = 0.0

    @classmethod
    def linear(cls, T: int = 1000, k: int = 250, beta_min: float = 1e-4, beta_max: float = 2e-2):
        return cls(T, k, np.linspace(beta_min, beta_max, T))

    @property
    def n_large_steps(self) -> int:
        return self.T // self.k

    def large_steps(self) -> list:
        """Reverse-order timesteps visited by the large-step sampler: T, T-k, ..., k."""
        return list(range(self.T, 0, -self.k))

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return t

    def check_large_t(self, t: int) -> int:
        t = self.check_t(t)
        if t % self.k:
            raise ScheduleError(f"timestep {t} is not a multiple of k={self.k}")
        return t

    def posterior_coefficients(self, t: int) -> tuple:
        """Coefficients of q(x_{t-k} | x_t, x_0): ``(c_x0, c_xt, std)``."""
        t = self.check_large_t(t)
        ab_t, ab_prev, g = self.alpha_bar[t], self.alpha_bar[t - self.k], self.gamma_big[t]
        c_x0 = math.sqrt(ab_prev) * g / (1.0 - ab_t)
        c_xt = math.sqrt(1.0 - g) * (1.0 - ab_prev) / (1.0 - ab_t)
        return c_x0, c_xt, float(self.sigma_big[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "k": self.k, "beta": self.beta[1:].tolist()}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(d["T"], d["k"], np.asarray(d["beta"]))


def forward_diffuse_step(x_prev, t: int, schedule: NoiseSchedule, noise):
    t = schedule.check_t(t)
    b = float(schedule.beta[t])
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def forward_diffuse_marginal(x0, t: int, schedule: NoiseSchedule, noise):
    t = schedule.check_t(t)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def large_step_forward(x_prev_k, t: int, schedule: NoiseSchedule, noise):
    t = schedule.check_large_t(t)
    g = float(schedule.gamma_big[t])
    return math.sqrt(1.0 - g) * x_prev_k + math.sqrt(g) * noise


class ReverseModel:
    """Noise predictor with the schedule's fixed (non-learned) variance."""

    def __init__(self, eps_fn, schedule: NoiseSchedule):
        self.eps_fn = eps_fn
        self.schedule = schedule

    def mean(self, x_t, t: int):
        s = self.schedule
        a, ab = float(s.alpha[t]), float(s.alpha_bar[t])
        return (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * self.eps_fn(x_t, t)) / math.sqrt(a)

    def variance(self, t: int) -> float:
        return float(self.schedule.sigma[t]) ** 2


def ddpm_sample_step(x_t, t: int, reverse_model, schedule: NoiseSchedule, z=None):
    """One ancestral step x_t -> x_{t-1}; the noise term is dropped at t = 1."""
    t = schedule.check_t(t)
    if not isinstance(reverse_model, ReverseModel):
        reverse_model = ReverseModel(reverse_model, schedule)
    mean = reverse_model.mean(x_t, t)
    if t == 1 or z is None:
        return mean
    return mean + float(schedule.sigma[t]) * z


def adversarial_reverse_step(x_t, t: int, y, G, schedule: NoiseSchedule, z=None):
    """Sample x_{t-k} from q(x_{t-k} | x_t, x0_hat = G(x_t, y, t)); noiseless when t == k."""
    t = schedule.check_large_t(t)
    x0_hat = G(x_t, y, t)
    if x0_hat.shape != x_t.shape:
        raise ValueError(f"generator output {tuple(x0_hat.shape)} does not match x_t {tuple(x_t.shape)}")
    return _posterior_sample(x0_hat, x_t, t, schedule, z)


def _posterior_sample(x0_hat, x_t, t, schedule, z):
    c0, ct, std = schedule.posterior_coefficients(t)
    mean = c0 * x0_hat + ct * x_t
    if t == schedule.k or z is None or std == 0.0:
        return mean
    return mean + std * z


# ---------------------------------------------------------------------------
# Networks


def _time_map(t, x: torch.Tensor, T: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device).reshape(-1, 1, 1, 1)
    return (t / T).expand(x.shape[0], 1, *x.shape[2:])


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride, 1),
            nn.GroupNorm(1, cout),
            nn.SiLU(),
        )


class DenoisingGenerator(nn.Module):
    """Predicts x0 from (x_t, conditioning image, t) with a two-level U-Net."""

    def __init__(self, x_channels: int, cond_channels: int, width: int = 16, T: int = 1000):
        super().__init__()
        self.T = T
        self.x_channels = x_channels
        self.inc = ConvBlock(x_channels + cond_channels + 1, width)
        self.down1 = ConvBlock(width, 2 * width, stride=2)
        self.down2 = ConvBlock(2 * width, 2 * width, stride=2)
        self.mid = ConvBlock(2 * width, 2 * width)
        self.up2 = ConvBlock(4 * width, 2 * width)
        self.up1 = ConvBlock(3 * width, width)
        self.out = nn.Conv2d(width, x_channels, 1)

    def forward(self, x_t, cond, t):
        h0 = self.inc(torch.cat([x_t, cond, _time_map(t, x_t, self.T)], 1))
        h1 = self.down1(h0)
        h2 = self.mid(self.down2(h1))
        u = F.interpolate(h2, size=h1.shape[-2:], mode="bilinear", align_corners=False)
        u = self.up2(torch.cat([u, h1], 1))
        u = F.interpolate(u, size=h0.shape[-2:], mode="bilinear", align_corners=False)
        u = self.up1(torch.cat([u, h0], 1))
        return torch.tanh(self.out(u))


class ResidualTranslator(nn.Module):
    """Non-diffusive generator: small residual encoder-decoder."""

    def __init__(self, in_channels: int, out_channels: int, width: int = 16, n_blocks: int = 2):
        super().__init__()
        self.head = nn.Sequential(ConvBlock(in_channels, width), ConvBlock(width, 2 * width, stride=2))
        self.blocks = nn.ModuleList(
            nn.Sequential(ConvBlock(2 * width, 2 * width), nn.Conv2d(2 * width, 2 * width, 3, 1, 1))
            for _ in range(n_blocks)
        )
        self.tail = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            ConvBlock(2 * width, width),
            nn.Conv2d(width, out_channels, 3, 1, 1),
        )

    def forward(self, x):
        h = self.head(x)
        for block in self.blocks:
            h = h + block(h)
        return torch.tanh(self.tail(h))


class PatchDiscriminator(nn.Module):
    """Patch-level real/fake logits; optionally sees (x_{t-k}, x_t, t)."""

    def __init__(self, channels: int, width: int = 16, diffusive: bool = False, T: int = 1000):
        super().__init__()
        self.diffusive = diffusive
        self.T = T
        cin = 2 * channels + 1 if diffusive else channels
        self.net = nn.Sequential(
            nn.Conv2d(cin, width, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1),
            nn.GroupNorm(1, 2 * width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, 1, 1),
        )

    def forward(self, x, x_t=None, t=None):
        if self.diffusive:
            x = torch.cat([x, x_t, _time_map(t, x, self.T)], 1)
        return self.net(x)


# ---------------------------------------------------------------------------
# Translator


@dataclass
class TranslatorConfig:
    direction: str = "ir2rgb"
    T: int = 1000
    k: int = 250
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    cycle_weight: float = 10.0
    epochs: int = 100
    resolution: int = 256
    batch_size: int = 4
    lr: float = 2e-4
    width: int = 16
    seed: int = 0
    gamma: float = 0.8
    clahe: dict | None = field(default_factory=lambda: dict(DEFAULT_CLAHE))

    @classmethod
    def desk(cls, direction: str = "ir2rgb", **overrides):
        epochs = {"ir2rgb": 10, "ir2l": 5}[direction]
        base = dict(direction=direction, epochs=epochs, resolution=64, width=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, direction: str = "ir2rgb", **overrides):
        epochs = {"ir2rgb": 100, "ir2l": 50}[direction]
        base = dict(direction=direction, epochs=epochs, resolution=256)
        base.update(overrides)
        return cls(**base)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.k, self.beta_min, self.beta_max)


class AdversarialTranslator(nn.Module):
    """Two-domain translator; domain ``a`` is the source, ``b`` the target.

    ``nd_ab``/``nd_ba`` are the non-diffusive generators, ``g_a``/``g_b`` the
    denoising generators (``g_b`` consumes ``(b_t, a-conditioning, t)``),
    ``d_a``/``d_b`` the diffusive discriminators and ``dn_a``/``dn_b`` the
    non-diffusive ones.
    """

    def __init__(self, src_channels, dst_channels, schedule, cycle_weight=10.0, *, nd_ab, nd_ba, g_a, g_b,
                 d_a, d_b, dn_a, dn_b, direction=None):
        super().__init__()
        self.src_channels, self.dst_channels = src_channels, dst_channels
        self.schedule = schedule
        self.cycle_weight = cycle_weight
        self.direction = direction
        self.nd_ab, self.nd_ba = nd_ab, nd_ba
        self.g_a, self.g_b = g_a, g_b
        self.d_a, self.d_b = d_a, d_b
        self.dn_a, self.dn_b = dn_a, dn_b

    @classmethod
    def build(cls, direction: str, schedule: NoiseSchedule, width: int = 16, cycle_weight: float = 10.0):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}; expected one of {sorted(DIRECTIONS)}")
        ca, cb = DIRECTIONS[direction]
        T = schedule.T
        return cls(
            ca, cb, schedule, cycle_weight, direction=direction,
            nd_ab=ResidualTranslator(ca, cb, width), nd_ba=ResidualTranslator(cb, ca, width),
            g_a=DenoisingGenerator(ca, cb, width, T), g_b=DenoisingGenerator(cb, ca, width, T),
            d_a=PatchDiscriminator(ca, width, True, T), d_b=PatchDiscriminator(cb, width, True, T),
            dn_a=PatchDiscriminator(ca, width), dn_b=PatchDiscriminator(cb, width),
        )

    def generators(self):
        return [self.nd_ab, self.nd_ba, self.g_a, self.g_b]

    def discriminators(self):
        return [self.d_a, self.d_b, self.dn_a, self.dn_b]

    def draw(self, a: torch.Tensor, b: torch.Tensor, generator: torch.Generator | None = None) -> dict:
        """All randomness needed for one training step, drawn up front."""
        s = self.schedule
        n = s.n_large_steps

        def steps(batch):
            return (torch.randint(1, n + 1, (batch,), generator=generator) * s.k).tolist()

        def gauss(x):
            return torch.randn(x.shape, generator=generator, dtype=x.dtype)

        return {
            "t_a": steps(a.shape[0]), "t_b": steps(b.shape[0]),
            "n1_a": gauss(a), "n2_a": gauss(a), "z_a": gauss(a),
            "n1_b": gauss(b), "n2_b": gauss(b), "z_b": gauss(b),
        }

    def _noised_pair(self, x0, ts, n1, n2):
        """Sample (x_{t-k}, x_t) per item for large-step timesteps ``ts``."""
        s = self.schedule
        prev, cur = [], []
        for i, t in enumerate(ts):
            xp = x0[i] if t == s.k else forward_diffuse_marginal(x0[i], t - s.k, s, n1[i])
            prev.append(xp)
            cur.append(large_step_forward(xp, t, s, n2[i]))
        return torch.stack(prev), torch.stack(cur)

    def _denoise(self, G, x_t, cond, ts, z):
        s = self.schedule
        x0_hat = G(x_t, cond, torch.tensor(ts, dtype=x_t.dtype))
        prev = torch.stack([_posterior_sample(x0_hat[i], x_t[i], t, s, z[i]) for i, t in enumerate(ts)])
        return x0_hat, prev

    def forward_terms(self, a: torch.Tensor, b: torch.Tensor, draws: dict) -> dict:
        """Shared forward pass for the generator and discriminator objectives.

        ``a`` and ``b`` are unpaired batches scaled to [-1, 1].
        """
        b_tilde = self.nd_ab(a)
        a_tilde = self.nd_ba(b)
        a_prev, a_t = self._noised_pair(a, draws["t_a"], draws["n1_a"], draws["n2_a"])
        b_prev, b_t = self._noised_pair(b, draws["t_b"], draws["n1_b"], draws["n2_b"])
        a0_hat, a_prev_hat = self._denoise(self.g_a, a_t, b_tilde, draws["t_a"], draws["z_a"])
        b0_hat, b_prev_hat = self._denoise(self.g_b, b_t, a_tilde, draws["t_b"], draws["z_b"])
        return dict(
            a=a, b=b, a_tilde=a_tilde, b_tilde=b_tilde,
            a_rec=self.nd_ba(b_tilde), b_rec=self.nd_ab(a_tilde),
            a_t=a_t, b_t=b_t, a_prev=a_prev, b_prev=b_prev,
            a0_hat=a0_hat, b0_hat=b0_hat, a_prev_hat=a_prev_hat, b_prev_hat=b_prev_hat,
            t_a=torch.tensor(draws["t_a"], dtype=a.dtype), t_b=torch.tensor(draws["t_b"], dtype=b.dtype),
        )

    def generator_loss(self, terms: dict) -> dict:
        adv = (
            F.softplus(-self.dn_a(terms["a_tilde"])).mean()
            + F.softplus(-self.dn_b(terms["b_tilde"])).mean()
            + F.softplus(-self.d_a(terms["a_prev_hat"], terms["a_t"], terms["t_a"])).mean()
            + F.softplus(-self.d_b(terms["b_prev_hat"], terms["b_t"], terms["t_b"])).mean()
        )
        cycle = (
            (terms["a_rec"] - terms["a"]).abs().mean()
            + (terms["b_rec"] - terms["b"]).abs().mean()
            + (terms["a0_hat"] - terms["a"]).abs().mean()
            + (terms["b0_hat"] - terms["b"]).abs().mean()
        )
        return {"adv": adv, "cycle": cycle, "total": adv + self.cycle_weight * cycle}

    def discriminator_loss(self, terms: dict) -> torch.Tensor:
        def pair(D, real, fake, *ctx):
            return F.softplus(-D(real, *ctx)).mean() + F.softplus(D(fake.detach(), *ctx)).mean()

        return (
            pair(self.dn_a, terms["a"], terms["a_tilde"])
            + pair(self.dn_b, terms["b"], terms["b_tilde"])
            + pair(self.d_a, terms["a_prev"], terms["a_prev_hat"], terms["a_t"], terms["t_a"])
            + pair(self.d_b, terms["b_prev"], terms["b_prev_hat"], terms["b_t"], terms["t_b"])
        )

    @torch.no_grad()
    def sample(self, src: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Translate a source batch in [-1, 1] to the target domain in [-1, 1]."""
        if src.shape[1] != self.src_channels:
            raise ValueError(f"expected {self.src_channels}-channel input, got {src.shape[1]}")
        s = self.schedule
        estimate = self.nd_ab(src)
        x = forward_diffuse_marginal(estimate, s.T, s, torch.randn(estimate.shape, generator=generator))

        def G(x_t, y, t):
            return self.g_b(x_t, y, torch.full((x_t.shape[0],), float(t)))

        for t in s.large_steps():
            z = torch.randn(x.shape, generator=generator)
            x = adversarial_reverse_step(x, t, src, G, s, z)
        return x


def _to_tensor(images, resolution: int | None) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if resolution and arr.shape[-2:] != (resolution, resolution):
        arr = np.stack([
            np.stack([cv2.resize(p, (resolution, resolution), interpolation=cv2.INTER_AREA) for p in im])
            for im in arr
        ])
    return torch.from_numpy(arr) * 2.0 - 1.0


def translation_pair(ir, rgb, direction: str, gamma: float = 0.8, clahe: dict | None = DEFAULT_CLAHE) -> tuple:
    """Unpaired training stacks for ``direction``: preprocessed IR and RGB (or its lightness)."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    src = np.stack([preprocess_ir(im, gamma, clahe) for im in ir]).astype(np.float32)
    dst = np.asarray(rgb, dtype=np.float32)
    if direction == "ir2l":
        dst = np.stack([rgb_to_lightness(im) for im in dst])
    return src, dst


def train_translator(src, dst, config: TranslatorConfig | None = None, iterations: int | None = None):
    """Train on unpaired stacks ``src`` (N,Ca,H,W) and ``dst`` (M,Cb,H,W) in [0, 1].

    Returns ``(translator, history)`` where ``history`` holds per-iteration
    ``gen``, ``adv``, ``cycle`` and ``disc`` losses. ``iterations`` overrides
    the epoch-derived step count.
    """
    config = config or TranslatorConfig()
    src, dst = np.asarray(src), np.asarray(dst)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("translator training needs non-empty source and target sets")
    ca, cb = DIRECTIONS[config.direction]
    if src.shape[1] != ca or dst.shape[1] != cb:
        raise ValueError(
            f"{config.direction} expects channels ({ca}, {cb}); got ({src.shape[1]}, {dst.shape[1]})"
        )
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    translator = AdversarialTranslator.build(config.direction, config.schedule(), config.width, config.cycle_weight)
    a_all, b_all = _to_tensor(src, config.resolution), _to_tensor(dst, config.resolution)

    g_params = [p for m in translator.generators() for p in m.parameters()]
    d_params = [p for m in translator.discriminators() for p in m.parameters()]
    opt_g = torch.optim.Adam(g_params, lr=config.lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(d_params, lr=config.lr, betas=(0.5, 0.9))

    per_epoch = max(1, math.ceil(max(len(a_all), len(b_all)) / config.batch_size))
    total = iterations if iterations is not None else config.epochs * per_epoch
    history = {"gen": [], "adv": [], "cycle": [], "disc": []}
    for it in range(total):
        ia = torch.randint(len(a_all), (config.batch_size,), generator=gen)
        ib = torch.randint(len(b_all), (config.batch_size,), generator=gen)
        a, b = a_all[ia], b_all[ib]
        draws = translator.draw(a, b, gen)

        terms = translator.forward_terms(a, b, draws)
        d_loss = translator.discriminator_loss(terms)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # fakes are reused; only the discriminators changed since they were made
        losses = translator.generator_loss(terms)
        opt_g.zero_grad()
        losses["total"].backward()
        opt_g.step()

        values = {"gen": losses["total"].item(), "adv": losses["adv"].item(),
                  "cycle": losses["cycle"].item(), "disc": d_loss.item()}
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise FloatingPointError(f"non-finite translator loss {bad} at iteration {it}: {values}")
        for key, v in values.items():
            history[key].append(v)
        if it % 50 == 0:
            log.debug("translator %s it %d %s", config.direction, it, values)
    translator.eval()
    translator.config = config
    return translator, history


def translate(image, direction: str, translator: AdversarialTranslator, seed: int = 0) -> np.ndarray:
    """Translate one ``C x H x W`` image in [0, 1]; output keeps ``H x W``."""
    return translate_batch(np.asarray(image)[None], direction, translator, [seed])[0]


def translate_batch(images, direction: str, translator: AdversarialTranslator, seeds) -> np.ndarray:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    if translator.direction is not None and translator.direction != direction:
        raise ValueError(f"translator was trained for {translator.direction}, not {direction}")
    images = np.asarray(images, dtype=np.float32)
    h, w = images.shape[-2:]
    resolution = getattr(getattr(translator, "config", None), "resolution", None)
    outs = []
    for im, seed in zip(images, seeds):
        x = _to_tensor(im, resolution)
        y = translator.sample(x, torch.Generator().manual_seed(int(seed)))
        y = ((y[0].numpy() + 1.0) / 2.0).clip(0.0, 1.0)
        if y.shape[-2:] != (h, w):
            y = np.stack([cv2.resize(p, (w, h), interpolation=cv2.INTER_LINEAR) for p in y])
        outs.append(y.astype(np.float32))
    return np.stack(outs)


def generate_aux_datasets(
    ir: DatasetVariant,
    translators: dict,
    seed: int = 0,
    gamma: float = 0.8,
    clahe: dict | None = DEFAULT_CLAHE,
) -> dict:
    """Translate an IR variant into IR_L, RGB_IR and RGB_L variants (masks copied)."""
    for key in ("ir2l", "ir2rgb"):
        if key not in translators:
            raise ValueError(f"missing {key} translator")
    prepped = np.stack([preprocess_ir(s.image, gamma, clahe) for s in ir.samples]) if len(ir) else None
    seeds = [seed * 1_000_003 + i for i in range(len(ir))]

    def variant(kind, prefix, outputs, sources):
        samples, source_map = [], {}
        for src, out in zip(sources, outputs):
            stem = src.id.split("/")[-1]
            gid = f"{prefix}/{stem}"
            samples.append(ImageSample(gid, out, src.mask, src.class_set))
            source_map[gid] = src.id
        return DatasetVariant(kind, samples, source_map)

    if prepped is None:
        return {k: DatasetVariant(k, []) for k in ("IR_L", "RGB_IR", "RGB_L")}
    ir_l = variant("IR_L", "ir_l", translate_batch(prepped, "ir2l", translators["ir2l"], seeds), ir.samples)
    rgb_ir = variant("RGB_IR", "rgb_ir", translate_batch(prepped, "ir2rgb", translators["ir2rgb"], seeds),
                     ir.samples)
    l_imgs = np.stack([s.image for s in ir_l.samples])
    rgb_l = variant("RGB_L", "rgb_l", translate_batch(l_imgs, "ir2rgb", translators["ir2rgb"], seeds),
                    ir_l.samples)
    return {"IR_L": ir_l, "RGB_IR": rgb_ir, "RGB_L": rgb_l}


def save_translator(path, translator: AdversarialTranslator) -> None:
    config = getattr(translator, "config", None)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "translator",
        "direction": translator.direction,
        "channels": [translator.src_channels, translator.dst_channels],
        "schedule": translator.schedule.to_dict(),
        "config": asdict(config) if config is not None else None,
        "state_dict": translator.state_dict(),
    }, Path(path))


def load_translator(path) -> AdversarialTranslator:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION or blob.get("kind") != "translator":
        raise ValueError(
            f"{path}: translator checkpoint version {blob.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    config = TranslatorConfig(**blob["config"]) if blob["config"] else TranslatorConfig(direction=blob["direction"])
    translator = AdversarialTranslator.build(
        blob["direction"], NoiseSchedule.from_dict(blob["schedule"]), config.width, config.cycle_weight
    )
    translator.load_state_dict(blob["state_dict"])
    translator.eval()
    translator.config = config
    return translator
