"""Dataset loading, class folds, episode sampling and IR preprocessing.

Images are float32 arrays shaped ``C x H x W`` in ``[0, 1]``; masks are int64
``H x W`` arrays of class indices with 0 reserved for background.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage.color import rgb2lab

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LAYOUTS = ("soda", "scutseg", "synthetic")
KINDS = ("IR", "IR_L", "RGB_IR", "RGB_L")
GENERATED_DIRS = {"IR_L": "ir_l", "RGB_IR": "rgb_ir", "RGB_L": "rgb_l"}

# Documented fold order; contiguous blocks of these lists form the folds.
SODA_CLASSES = [
    "Person", "Building", "Tree", "Road", "Pole",
    "Grass", "Door", "Table", "Chair", "Car",
    "Bicycle", "Lamp", "Monitor", "Lane", "Trash Can",
    "Animal", "Fence", "Sky", "River", "Side Walk",
]
SCUTSEG_CLASSES = ["Person", "Truck", "Car", "Pole", "Rider", "Bus", "Fence", "Tree"]
SCUTSEG_RAW_CLASSES = [
    "background", "Road", "Person", "Rider", "Car", "Truck", "Fence", "Tree", "Bus", "Pole",
]
SCUTSEG_BACKGROUND_CLASSES = ("Road",)


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    class_set: frozenset = field(default=None)

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise DatasetError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if self.class_set is None:
            self.class_set = frozenset(int(c) for c in np.unique(self.mask) if c != 0)

    @property
    def channels(self) -> int:
        return self.image.shape[0]


@dataclass
class DatasetVariant:
    """One dataset kind; ``source_map`` links generated ids to their source ids."""

    kind: str
    samples: list
    source_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        self._index = {s.id: i for i, s in enumerate(self.samples)}
        self._by_source = {src: gid for gid, src in self.source_map.items()}

    def __len__(self):
        return len(self.samples)

    def get(self, sample_id: str) -> ImageSample:
        return self.samples[self._index[sample_id]]

    def derived_from(self, source_id: str) -> ImageSample:
        return self.get(self._by_source[source_id])


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    test_classes: frozenset
    train_classes: frozenset

    def to_dict(self) -> dict:
        return {
            "fold": self.fold_id,
            "test_classes": sorted(self.test_classes),
            "train_classes": sorted(self.train_classes),
        }


# Which auxiliary variant pairs with each primary variant (IR -> RGB_IR, IR_L -> RGB_L).
AUX_PAIRING = {"IR": "RGB_IR", "IR_L": "RGB_L"}

METHOD_VARIANTS = {
    "baseline": (("IR",), ()),
    "method1": (("IR", "IR_L"), ()),
    "method2": (("IR",), ("RGB_IR",)),
    "method3": (("IR", "IR_L"), ("RGB_IR", "RGB_L")),
}


class CompositeView:
    """A union of dataset variants without copying samples.

    ``parts`` are the primary (IR-domain) variants that episodes draw from;
    ``aux`` maps a primary kind to the RGB variant paired with it.
    """

    def __init__(self, parts: Sequence[DatasetVariant], class_names: Sequence[str], aux: dict | None = None):
        self.parts = tuple(parts)
        self.class_names = list(class_names)
        self.aux = dict(aux or {})
        self._carriers: dict = {}

    def __len__(self):
        return sum(len(p) for p in self.parts)

    def __iter__(self):
        for part in self.parts:
            yield from part.samples

    @property
    def has_aux(self) -> bool:
        return bool(self.aux)

    def all_samples(self) -> list:
        """Primary samples followed by any auxiliary samples (base-stage training set)."""
        out = list(self)
        for kind in sorted(self.aux):
            out.extend(self.aux[kind].samples)
        return out

    def class_index(self, name: str) -> int:
        return self.class_names.index(name)

    def aux_for(self, part_idx: int, sample: ImageSample) -> ImageSample:
        kind = self.parts[part_idx].kind
        return self.aux[kind].derived_from(sample.id)

    def carriers(self, min_pixels: int = 16, feature_size: int | None = 8) -> dict:
        """Map class index -> list of (part_idx, sample_idx) with usable target masks."""
        key = (min_pixels, feature_size)
        if key not in self._carriers:
            table: dict = {}
            for p, part in enumerate(self.parts):
                for i, s in enumerate(part.samples):
                    for c in sorted(s.class_set):
                        m = s.mask == c
                        if m.sum() < min_pixels:
                            continue
                        if feature_size and downsample_mask(m, (feature_size, feature_size)).sum() <= 0:
                            continue
                        table.setdefault(c, []).append((p, i))
            self._carriers[key] = table
        return self._carriers[key]


def make_view(variants: dict, method: str, class_names: Sequence[str]) -> CompositeView:
    """Build the dataset view a method trains on."""
    if method not in METHOD_VARIANTS:
        raise DatasetError(f"unknown method {method!r}")
    primary, auxiliary = METHOD_VARIANTS[method]
    missing = [k for k in primary + auxiliary if k not in variants]
    if missing:
        raise DatasetError(f"method {method} needs dataset variants {missing}")
    aux = {p: variants[AUX_PAIRING[p]] for p in primary if AUX_PAIRING[p] in auxiliary}
    return CompositeView([variants[k] for k in primary], class_names, aux)


def make_eval_view(variants: dict, method: str, class_names: Sequence[str]) -> CompositeView:
    """Evaluation view: real IR queries only, with RGB_IR attached for dual-domain methods."""
    if method not in METHOD_VARIANTS:
        raise DatasetError(f"unknown method {method!r}")
    if "IR" not in variants:
        raise DatasetError("evaluation needs the IR variant")
    aux = {}
    if METHOD_VARIANTS[method][1]:
        if "RGB_IR" not in variants:
            raise DatasetError(f"method {method} needs dataset variant RGB_IR for evaluation")
        aux = {"IR": variants["RGB_IR"]}
    return CompositeView([variants["IR"]], class_names, aux)


def _root_id(variants: dict, kind: str, sample_id: str) -> str:
    while kind != "IR":
        sample_id = variants[kind].source_map[sample_id]
        kind = "IR_L" if kind == "RGB_L" else "IR"
    return sample_id


def split_variants(variants: dict, stems: Iterable[str]) -> dict:
    """Restrict every variant to samples whose IR ancestor is in ``stems``."""
    keep = set(stems)
    out = {}
    for kind, var in variants.items():
        samples = [s for s in var.samples if _root_id(variants, kind, s.id) in keep]
        ids = {s.id for s in samples}
        out[kind] = DatasetVariant(kind, samples, {g: src for g, src in var.source_map.items() if g in ids})
    return out


@dataclass
class Episode:
    target_class: int
    support_ids: list
    supports: list  # (image, binary mask) pairs
    query_id: str
    query_image: np.ndarray
    query_mask: np.ndarray
    base_mask: np.ndarray | None = None
    base_target: int = 0  # target's index among base classes, 0 when held out
    aux_support_ids: list | None = None
    aux_supports: list | None = None
    aux_query_id: str | None = None
    aux_query: np.ndarray | None = None

    @property
    def k_shot(self) -> int:
        return len(self.supports)

    @property
    def ids(self) -> tuple:
        return tuple(self.support_ids) + (self.query_id,)


# ---------------------------------------------------------------------------
# Loading


def _norm_name(name: str) -> str:
    return re.sub(r"[\s_\-]+", "", name.strip().lower())


def _read_image(path: Path, channels: int | None = None) -> np.ndarray:
    """Read an 8/16-bit image; ``channels=None`` collapses gray-looking RGB to one channel."""
    with Image.open(path) as im:
        if channels == 3:
            return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()
        if im.mode in ("RGB", "RGBA", "P", "CMYK"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            gray = np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])
            if gray or channels == 1:
                return arr[..., 0][None].copy() if gray else np.asarray(
                    im.convert("L"), dtype=np.float32)[None] / 255.0
            return arr.transpose(2, 0, 1).copy()
        arr = np.asarray(im)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return (arr.astype(np.float32) / scale)[None]


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int64)


def _default_classes(layout: str) -> list:
    if layout == "soda":
        return ["background"] + SODA_CLASSES
    if layout == "scutseg":
        return list(SCUTSEG_RAW_CLASSES)
    raise DatasetError(f"{layout} layout requires a classes.txt")


def _class_remap(raw_names: list, layout: str) -> tuple:
    """Return (lookup array raw->new, new class table)."""
    documented = {"soda": SODA_CLASSES, "scutseg": SCUTSEG_CLASSES}.get(layout)
    to_background = {_norm_name(n) for n in SCUTSEG_BACKGROUND_CLASSES} if layout == "scutseg" else set()
    fg_raw = [n for n in raw_names[1:] if _norm_name(n) not in to_background]
    if documented and {_norm_name(n) for n in fg_raw} == {_norm_name(n) for n in documented}:
        table = ["background"] + list(documented)
    else:
        table = ["background"] + fg_raw
    position = {_norm_name(n): i for i, n in enumerate(table)}
    lookup = np.zeros(len(raw_names), dtype=np.int64)
    for i, name in enumerate(raw_names):
        if i == 0 or _norm_name(name) in to_background:
            continue
        lookup[i] = position[_norm_name(name)]
    return lookup, table


def _stems(directory: Path) -> dict:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_dataset(root, layout: str = "synthetic") -> tuple:
    """Load ``root/images`` + ``root/masks`` into samples.

    Returns ``(samples, class_names)`` where ``class_names[0] == "background"``
    and mask values index ``class_names``.
    """
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    image_dir, mask_dir = root / "images", root / "masks"
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")

    classes_file = root / "classes.txt"
    if classes_file.exists():
        raw_names = [ln.strip() for ln in classes_file.read_text().splitlines() if ln.strip()]
    else:
        raw_names = _default_classes(layout)
    lookup, table = _class_remap(raw_names, layout)

    images, masks = _stems(image_dir), _stems(mask_dir)
    samples = []
    for stem, path in images.items():
        if stem not in masks:
            raise DatasetError(f"image {stem!r} has no mask in {mask_dir}")
        raw = _read_mask(masks[stem])
        bad = np.unique(raw[raw >= len(raw_names)])
        if bad.size:
            raise DatasetError(f"mask {stem!r} has unknown class indices {bad.tolist()}")
        samples.append(ImageSample(stem, _read_image(path), lookup[raw]))
    return samples, table


def load_generated(root, kind: str, source: Sequence[ImageSample]) -> DatasetVariant:
    """Load ``root/generated/<kind>/`` images; masks are taken from ``source`` by stem."""
    directory = Path(root) / "generated" / GENERATED_DIRS[kind]
    if not directory.is_dir():
        raise DatasetError(f"missing generated directory {directory}")
    by_stem = {s.id: s for s in source}
    prefix = GENERATED_DIRS[kind]
    samples, source_map = [], {}
    for stem, path in _stems(directory).items():
        if stem not in by_stem:
            raise DatasetError(f"generated image {stem!r} has no source sample")
        src = by_stem[stem]
        gid = f"{prefix}/{stem}"
        channels = 3 if kind.startswith("RGB") else 1
        samples.append(ImageSample(gid, _read_image(path, channels), src.mask, src.class_set))
        source_map[gid] = _source_id(kind, stem)
    return DatasetVariant(kind, samples, source_map)


def _source_id(kind: str, stem: str) -> str:
    # RGB_L is translated from IR_L; everything else comes from IR
    return f"{GENERATED_DIRS['IR_L']}/{stem}" if kind == "RGB_L" else stem


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def read_split(root, name: str) -> list | None:
    path = Path(root) / f"{name}.txt"
    if not path.exists():
        return None
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


# ---------------------------------------------------------------------------
# Folds


def make_folds(class_names: Sequence[str], n_folds: int) -> list:
    """Split an ordered foreground class list into contiguous test blocks."""
    names = list(class_names)
    if n_folds < 2:
        raise DatasetError("n_folds must be at least 2")
    if n_folds > len(names):
        raise DatasetError(f"cannot split {len(names)} classes into {n_folds} folds")
    size = len(names) // n_folds
    folds = []
    for f in range(n_folds):
        stop = len(names) if f == n_folds - 1 else (f + 1) * size
        test = frozenset(names[f * size:stop])
        folds.append(FoldSplit(f, test, frozenset(names) - test))
    return folds


def write_folds(path, folds: Iterable[FoldSplit]) -> None:
    Path(path).write_text(json.dumps([f.to_dict() for f in folds], indent=2) + "\n")


def read_folds(path) -> list:
    data = json.loads(Path(path).read_text())
    return [
        FoldSplit(d["fold"], frozenset(d["test_classes"]), frozenset(d["train_classes"])) for d in data
    ]


# ---------------------------------------------------------------------------
# Masks


def binarize_mask(mask: np.ndarray, target_class: int) -> np.ndarray:
    return (np.asarray(mask) == target_class).astype(np.int64)


def remap_for_base_stage(mask: np.ndarray, heldout_classes: Iterable[int], n_classes: int) -> tuple:
    """Zero held-out classes and re-index the rest to ``1..N_base``.

    Returns ``(base_mask, table)`` with ``table[new_index] = old_index``.
    """
    heldout = set(int(c) for c in heldout_classes)
    table = [0] + [c for c in range(1, n_classes) if c not in heldout]
    lookup = np.zeros(n_classes, dtype=np.int64)
    for new, old in enumerate(table):
        lookup[old] = new
    return lookup[np.asarray(mask)], table


def downsample_mask(mask, size: tuple) -> np.ndarray | torch.Tensor:
    """Bilinear (align_corners) resampling of a binary mask, as used by the meta learner."""
    is_numpy = isinstance(mask, np.ndarray)
    t = torch.as_tensor(mask, dtype=torch.float64 if is_numpy else None)
    if not t.is_floating_point():
        t = t.float()
    shape = t.shape
    t = t.reshape(-1, 1, *shape[-2:])
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=True)
    out = out.reshape(*shape[:-2], *size)
    return out.numpy() if is_numpy else out


# ---------------------------------------------------------------------------
# Episodes


def _episode_rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [int(seed)]))


def sample_episode(
    view: CompositeView,
    fold: FoldSplit,
    k_shot: int,
    stage: str = "meta_train",
    seed=0,
    *,
    with_aux: bool | None = None,
    min_pixels: int = 16,
    feature_size: int | None = 8,
) -> Episode:
    """Draw one K-shot episode; a pure function of its arguments."""
    if stage not in ("meta_train", "meta_eval"):
        raise DatasetError(f"unknown stage {stage!r}")
    if k_shot < 1:
        raise DatasetError("k_shot must be >= 1")
    with_aux = view.has_aux if with_aux is None else with_aux
    if with_aux and not view.has_aux:
        raise DatasetError("auxiliary data requested but the view has none")
    names = fold.train_classes if stage == "meta_train" else fold.test_classes
    carriers = view.carriers(min_pixels, feature_size)
    candidates = sorted(view.class_index(n) for n in names if n in view.class_names)
    usable = [c for c in candidates if len(carriers.get(c, ())) >= k_shot + 1]
    if not usable:
        listed = {view.class_names[c]: len(carriers.get(c, ())) for c in candidates}
        raise DatasetError(f"no class has {k_shot + 1} carriers; candidates (carrier counts): {listed}")

    rng = _episode_rng(seed)
    target = usable[rng.integers(len(usable))]
    pool = carriers[target]
    picks = rng.choice(len(pool), size=k_shot + 1, replace=False)
    chosen = [pool[i] for i in picks]
    *support_refs, query_ref = chosen

    def fetch(ref):
        return view.parts[ref[0]].samples[ref[1]]

    supports = [fetch(r) for r in support_refs]
    query = fetch(query_ref)
    test_idx = [view.class_index(n) for n in fold.test_classes if n in view.class_names]
    base_mask, table = remap_for_base_stage(query.mask, test_idx, len(view.class_names))
    base_target = table.index(target) if target in table else 0
    episode = Episode(
        target_class=target,
        support_ids=[s.id for s in supports],
        supports=[(s.image, binarize_mask(s.mask, target)) for s in supports],
        query_id=query.id,
        query_image=query.image,
        query_mask=binarize_mask(query.mask, target),
        base_mask=base_mask,
        base_target=base_target,
    )
    if with_aux:
        aux_s = [view.aux_for(r[0], fetch(r)) for r in support_refs]
        aux_q = view.aux_for(query_ref[0], query)
        episode.aux_support_ids = [a.id for a in aux_s]
        episode.aux_supports = [a.image for a in aux_s]
        episode.aux_query_id = aux_q.id
        episode.aux_query = aux_q.image
    return episode


def build_validation_set(view: CompositeView, fold: FoldSplit, n: int, seed: int = 0, k_shot: int = 1, **kwargs) -> list:
    """``n`` meta-eval episodes; episode ``i`` is seeded by ``(seed, i)`` so order does not matter."""
    return [sample_episode(view, fold, k_shot, "meta_eval", [int(seed), i], **kwargs) for i in range(n)]


# ---------------------------------------------------------------------------
# Image operations


def preprocess_ir(image: np.ndarray, gamma: float = 0.8, clahe: dict | None = None) -> np.ndarray:
    """Gamma correction followed by CLAHE (pass ``clahe=None`` to skip it)."""
    if gamma <= 0:
        raise DatasetError(f"gamma must be positive, got {gamma}")
    img = np.asarray(image, dtype=np.float64)
    out = np.power(np.clip(img, 0.0, 1.0), gamma) if gamma != 1 else img.copy()
    if clahe:
        tile = clahe.get("tile_grid", (8, 8))
        op = cv2.createCLAHE(clipLimit=float(clahe.get("clip_limit", 2.0)), tileGridSize=tuple(tile))
        planes = out if out.ndim == 3 else out[None]
        eq = [op.apply(np.rint(p * 65535).astype(np.uint16)).astype(np.float64) / 65535 for p in planes]
        out = np.stack(eq) if out.ndim == 3 else eq[0]
    return out.astype(np.asarray(image).dtype if np.asarray(image).dtype.kind == "f" else np.float32)


DEFAULT_CLAHE = {"clip_limit": 2.0, "tile_grid": (8, 8)}


def rgb_to_lightness(rgb: np.ndarray) -> np.ndarray:
    """CIE L* (D65) of a ``3 x H x W`` sRGB image, scaled to [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lab = rgb2lab(np.clip(rgb.transpose(1, 2, 0), 0, 1), illuminant="D65")
    return (lab[..., 0] / 100.0)[None].astype(np.float32)


def augment_arrays(
    images: Sequence[np.ndarray],
    mask: np.ndarray,
    crop_size: int,
    train: bool,
    rng: np.random.Generator | None = None,
    scale_range: tuple = (0.9, 1.1),
    extra_masks: Sequence[np.ndarray] = (),
) -> tuple:
    """Apply one geometric transform to several aligned images and masks.

    Returns ``(images, mask)``, or ``(images, mask, extra_masks)`` when extra
    masks are given.
    """
    h, w = mask.shape
    if min(h, w) < 8:
        raise DatasetError(f"degenerate image of size {h}x{w}")
    images = [np.asarray(im) for im in images]
    if train:
        rng = rng or np.random.default_rng()
        s = rng.uniform(*scale_range)
        s = max(s, crop_size / min(h, w))
        nh, nw = max(crop_size, int(round(h * s))), max(crop_size, int(round(w * s)))
        flip = rng.random() < 0.5
        top = int(rng.integers(0, nh - crop_size + 1))
        left = int(rng.integers(0, nw - crop_size + 1))
    else:
        s = max(1.0, crop_size / min(h, w))
        nh, nw = max(crop_size, int(round(h * s))), max(crop_size, int(round(w * s)))
        flip = False
        top, left = (nh - crop_size) // 2, (nw - crop_size) // 2

    def geo(arr, interp):
        if (nh, nw) != arr.shape[-2:]:
            if arr.ndim == 3:
                arr = np.stack([cv2.resize(p, (nw, nh), interpolation=interp) for p in arr])
            else:
                arr = cv2.resize(arr, (nw, nh), interpolation=interp)
        if flip:
            arr = arr[..., ::-1]
        return np.ascontiguousarray(arr[..., top:top + crop_size, left:left + crop_size])

    out_images = [np.clip(geo(im.astype(np.float32), cv2.INTER_LINEAR), 0, 1) for im in images]
    out_mask = geo(mask.astype(np.int32), cv2.INTER_NEAREST).astype(np.int64)
    if extra_masks:
        extras = [geo(np.asarray(m).astype(np.int32), cv2.INTER_NEAREST).astype(np.int64) for m in extra_masks]
        return out_images, out_mask, extras
    return out_images, out_mask


def crop_resize_augment(sample: ImageSample, crop_size: int, train: bool, rng=None) -> ImageSample:
    (image,), mask = augment_arrays([sample.image], sample.mask, crop_size, train, rng)
    return ImageSample(sample.id, image, mask)


def hflip(sample: ImageSample) -> ImageSample:
    return ImageSample(sample.id, sample.image[..., ::-1].copy(), sample.mask[..., ::-1].copy())
