"""Procedural stand-ins for IR segmentation data and an unpaired IR/RGB corpus.

Every scene is rendered twice: as a low-contrast single-channel "thermal"
image and as a colour image with the same geometry. The segmentation dataset
keeps the IR rendering; the translation corpus samples the two renderings
from *different* scenes so the sets are unpaired.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .dataset import save_image, save_mask

CLASS_NAMES = ["bar", "blob", "cross", "ring"]  # alphabetical -> fold order

# per-class (IR level, RGB colour)
_APPEARANCE = {
    "bar": (0.55, (0.85, 0.20, 0.20)),
    "blob": (0.75, (0.20, 0.70, 0.25)),
    "cross": (0.42, (0.20, 0.30, 0.90)),
    "ring": (0.88, (0.90, 0.80, 0.15)),
}


def _shape_mask(name: str, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if name == "blob":
        return (u / r) ** 2 + (v / (0.75 * r)) ** 2 <= 1.0
    if name == "ring":
        d = np.hypot(dx, dy)
        return (d <= r) & (d >= 0.5 * r)
    if name == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.45 * r)
    if name == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    raise ValueError(name)


def render_scene(rng: np.random.Generator, size: int = 64, n_objects: tuple = (2, 3)) -> tuple:
    """Return ``(ir 1xHxW, rgb 3xHxW, mask HxW)`` for one random scene."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    slope = rng.uniform(-0.15, 0.15, size=2)
    ir = 0.25 + slope[0] * yy + slope[1] * xx
    horizon = rng.uniform(0.3, 0.6)
    sky = np.array(rng.uniform([0.45, 0.6, 0.75], [0.65, 0.8, 0.95]))
    ground = np.array(rng.uniform([0.3, 0.25, 0.15], [0.5, 0.4, 0.3]))
    upper = (yy < horizon)[None]
    rgb = np.where(upper, sky[:, None, None], ground[:, None, None]) * (1 - 0.2 * yy)[None]
    mask = np.zeros((size, size), dtype=np.int64)

    k = int(rng.integers(n_objects[0], n_objects[1] + 1))
    for _ in range(k):
        ci = int(rng.integers(len(CLASS_NAMES)))
        name = CLASS_NAMES[ci]
        r = rng.uniform(0.14, 0.24) * size
        cy, cx = rng.uniform(r * 0.6, size - r * 0.6, size=2)
        m = _shape_mask(name, size, cy, cx, r, rng.uniform(0, np.pi))
        if m.sum() == 0:
            continue
        level, colour = _APPEARANCE[name]
        level = level + rng.normal(0, 0.03)
        texture = 0.0
        if name == "bar":
            texture = 0.08 * np.sign(np.sin(2 * np.pi * (xx + yy) * size / 6.0))
        ir = np.where(m, level + texture, ir)
        shade = rng.uniform(0.85, 1.1)
        rgb = np.where(m[None], np.clip(np.array(colour)[:, None, None] * shade, 0, 1), rgb)
        mask[m] = ci + 1

    ir = cv2.GaussianBlur(ir.astype(np.float32), (5, 5), 1.0).astype(np.float64)
    contrast = rng.uniform(0.5, 0.8)
    ir = 0.3 + contrast * (ir - 0.3) + rng.normal(0, 0.02, size=ir.shape)
    rgb = rgb + rng.normal(0, 0.015, size=rgb.shape)
    return (
        np.clip(ir, 0, 1).astype(np.float32)[None],
        np.clip(rgb, 0, 1).astype(np.float32),
        mask,
    )


def write_synthetic_dataset(root, n: int = 96, size: int = 64, seed: int = 0, val_fraction: float = 1 / 3) -> Path:
    """Write an IR segmentation dataset in the ``images/ masks/ classes.txt`` layout.

    Also writes ``train.txt`` / ``val.txt`` stem lists.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n):
        ir, _, mask = render_scene(rng, size)
        stem = f"scene_{i:04d}"
        save_image(root / "images" / f"{stem}.png", ir)
        save_mask(root / "masks" / f"{stem}.png", mask)
        stems.append(stem)
    (root / "classes.txt").write_text("\n".join(["background"] + CLASS_NAMES) + "\n")
    n_val = int(round(n * val_fraction))
    (root / "train.txt").write_text("\n".join(stems[: n - n_val]) + "\n")
    (root / "val.txt").write_text("\n".join(stems[n - n_val:]) + "\n")
    return root


def translation_corpus(n: int = 48, size: int = 64, seed: int = 1) -> tuple:
    """Unpaired IR and RGB image stacks, ``(n,1,H,W)`` and ``(n,3,H,W)``."""
    rng = np.random.default_rng(seed)
    ir = [render_scene(rng, size)[0] for _ in range(n)]
    rgb = [render_scene(rng, size)[1] for _ in range(n)]
    return np.stack(ir), np.stack(rgb)


def write_translation_corpus(root, n: int = 48, size: int = 64, seed: int = 1) -> Path:
    """Write ``root/ir/*.png`` and ``root/rgb/*.png`` from independent scenes."""
    root = Path(root)
    ir, rgb = translation_corpus(n, size, seed)
    for sub, stack in (("ir", ir), ("rgb", rgb)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(stack):
            save_image(root / sub / f"{sub}_{i:04d}.png", im)
    return root
