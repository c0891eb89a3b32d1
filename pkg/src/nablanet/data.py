"""Dataset loading, preprocessing, augmentation, batching and synthetic lesions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from nablanet.tensor import Tensor

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MASK_THRESHOLD = 128
# label order used by the ISIC-2018 seven-class task
CLASS_NAMES = (
    "Nevus",
    "Dermatofibroma",
    "Melanoma",
    "Pigmented Bowen's",
    "Pigmented Benign Keratoses",
    "Basal Cell Carcinoma",
    "Vascular",
)


@dataclass
class SegRecord:
    image: np.ndarray  # H x W x C uint8
    mask: np.ndarray  # H x W uint8 in {0, 1}
    id: str


@dataclass
class ClsRecord:
    image: np.ndarray
    label: int
    id: str


@dataclass
class SplitPlan:
    seed: int
    train_ids: list
    test_ids: list
    train_fraction: float

    def partition(self, records: Sequence) -> tuple:
        by_id = {r.id: r for r in records}
        return [by_id[i] for i in self.train_ids], [by_id[i] for i in self.test_ids]


# --- io ---------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Decode to H x W x 3 uint8."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Decode a grayscale mask and threshold it to {0, 1}."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode mask {path}: {exc}") from exc
    return (gray >= MASK_THRESHOLD).astype(np.uint8)


def write_png(path, array: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def _mask_key(stem: str) -> str:
    # ISIC ground-truth files carry a "_segmentation" suffix
    return stem[: -len("_segmentation")] if stem.endswith("_segmentation") else stem


def _list_images(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_segmentation_dataset(image_dir, mask_dir) -> list:
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    images = _list_images(image_dir)
    if not images:
        return []
    masks = {_mask_key(p.stem): p for p in _list_images(mask_dir)} if mask_dir.is_dir() else {}
    records = []
    for p in images:
        if p.stem not in masks:
            raise FileNotFoundError(f"missing mask for image id {p.stem!r}")
        records.append(SegRecord(read_image(p), read_mask(masks[p.stem]), p.stem))
    records.sort(key=lambda r: r.id)
    return records


def _parse_label(value: str) -> int:
    value = value.strip()
    if value.lstrip("-").isdigit():
        label = int(value)
    else:
        lookup = {n.lower(): i for i, n in enumerate(CLASS_NAMES)}
        if value.lower() not in lookup:
            raise ValueError(f"unknown class name {value!r}")
        label = lookup[value.lower()]
    return label


def load_classification_dataset(image_dir, labels_csv) -> list:
    """Images plus a CSV of (filename, class index or class name)."""
    image_dir = Path(image_dir)
    records = []
    with open(labels_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0].strip().lower() in ("filename", "image", "file"):
        rows = rows[1:]
    for row in rows:
        if not row:
            continue
        name, label = row[0].strip(), _parse_label(row[1])
        path = image_dir / name
        if not path.exists():
            raise FileNotFoundError(f"labelled image not found: {path}")
        records.append(ClsRecord(read_image(path), label, Path(name).stem))
    records.sort(key=lambda r: r.id)
    return records


# --- preprocessing ----------------------------------------------------------


def resize(image: np.ndarray, target: tuple, interp: str = "bilinear") -> np.ndarray:
    """Resize an H x W (x C) uint8 raster to exactly ``target`` = (H, W)."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"resize target must be positive, got {target}")
    if image.shape[:2] == (th, tw) and interp == "nearest":
        return image.copy()
    resample = {"bilinear": Image.BILINEAR, "nearest": Image.NEAREST}[interp]
    return np.asarray(Image.fromarray(image).resize((tw, th), resample=resample))


def resize_record(rec, size: int):
    if isinstance(rec, SegRecord):
        return replace(rec, image=resize(rec.image, (size, size)), mask=resize(rec.mask, (size, size), "nearest"))
    return replace(rec, image=resize(rec.image, (size, size)))


def hflip(a: np.ndarray) -> np.ndarray:
    return a[:, ::-1].copy()


def vflip(a: np.ndarray) -> np.ndarray:
    return a[::-1].copy()


def augment_flips(records: Sequence) -> list:
    """Originals, then horizontal flips, then vertical flips (3x the records)."""
    out = list(records)
    for tag, flip in (("hflip", hflip), ("vflip", vflip)):
        for r in records:
            if isinstance(r, SegRecord):
                out.append(SegRecord(flip(r.image), flip(r.mask), f"{r.id}_{tag}"))
            else:
                out.append(ClsRecord(flip(r.image), r.label, f"{r.id}_{tag}"))
    return out


def split(
    records: Sequence,
    train_fraction: float,
    seed: int = 0,
    train_count: Optional[int] = None,
) -> SplitPlan:
    """Seeded shuffle then prefix split; ``train_count`` overrides the fraction."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    ids = sorted(r.id for r in records)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids))) if train_count is None else int(train_count)
    if not 0 <= n_train <= len(ids):
        raise ValueError(f"train_count {n_train} out of range for {len(ids)} records")
    shuffled = [ids[i] for i in order]
    return SplitPlan(seed, shuffled[:n_train], shuffled[n_train:], train_fraction)


def to_tensor_image(image: np.ndarray, channels: int) -> np.ndarray:
    """H x W x 3 uint8 -> C x H x W float in [0, 1]."""
    x = image.astype(np.float32) / 255.0
    if x.ndim == 2:
        x = x[:, :, None]
    if channels == 1 and x.shape[2] == 3:
        x = (x @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[:, :, None]
    elif channels == 3 and x.shape[2] == 1:
        x = np.repeat(x, 3, axis=2)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def make_batches(
    records: Sequence,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    channels: int = 3,
    shuffle: bool = True,
    dtype=np.float32,
) -> Iterator[tuple]:
    """Yield (image Tensor, target array) batches; the last batch may be short.

    Targets are N x 1 x H x W {0, 1} masks for segmentation records and label
    vectors for classification records. The order depends only on (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not records:
        raise ValueError("make_batches: empty dataset")
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        x = np.stack([to_tensor_image(r.image, channels) for r in chunk]).astype(dtype)
        if isinstance(chunk[0], SegRecord):
            y = np.stack([r.mask[None] for r in chunk]).astype(dtype)
        else:
            y = np.array([r.label for r in chunk], dtype=np.int64)
        yield Tensor(x), y


# --- synthetic lesions ------------------------------------------------------


def ellipse_mask(size: tuple, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated ellipse."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


@dataclass
class SynthSegParams:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    skin: tuple = (0, 0, 0)
    lesion: tuple = (0, 0, 0)


def _synth_seg_one(rng: np.random.Generator, size: tuple) -> tuple:
    h, w = size
    p = SynthSegParams(
        cy=rng.uniform(0.3, 0.7) * h,
        cx=rng.uniform(0.3, 0.7) * w,
        ry=rng.uniform(0.15, 0.35) * h,
        rx=rng.uniform(0.15, 0.35) * w,
        angle=rng.uniform(0, np.pi),
        skin=tuple(rng.uniform([190, 140, 110], [240, 190, 160])),
        lesion=tuple(rng.uniform([70, 35, 20], [140, 90, 60])),
    )
    mask = ellipse_mask(size, p.cy, p.cx, p.ry, p.rx, p.angle)
    base = np.where(mask[:, :, None] == 1, np.array(p.lesion), np.array(p.skin))
    noise = rng.normal(0, 12, size=(h, w, 1)) + rng.normal(0, 4, size=(h, w, 3))
    image = np.clip(base + noise, 0, 255).astype(np.uint8)
    return image, mask, p


def _class_pattern(label: int, size: tuple, rng: np.random.Generator) -> np.ndarray:
    """Boolean foreground for one of several distinct shape families."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy = h / 2 + rng.uniform(-0.1, 0.1) * h
    cx = w / 2 + rng.uniform(-0.1, 0.1) * w
    r = rng.uniform(0.25, 0.35) * min(h, w)
    dy, dx = yy - cy, xx - cx
    family = label % 7
    if family == 0:  # disc
        return dy**2 + dx**2 <= r**2
    if family == 1:  # square
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if family == 2:  # ring
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r * 0.55)
    if family == 3:  # horizontal stripes
        return (yy // max(1, h // 8)).astype(int) % 2 == 0
    if family == 4:  # cross
        return ((np.abs(dy) <= r * 0.3) | (np.abs(dx) <= r * 0.3)) & (np.maximum(np.abs(dy), np.abs(dx)) <= r)
    if family == 5:  # checkerboard
        step = max(1, h // 4)
        return ((yy // step).astype(int) + (xx // step).astype(int)) % 2 == 0
    return np.abs(dy) + np.abs(dx) <= r  # diamond


# a distinct tint per class so colour alone is informative
_CLASS_TINTS = np.array(
    [[150, 60, 40], [60, 140, 60], [50, 60, 150], [160, 150, 40], [140, 50, 140], [40, 140, 150], [90, 90, 90]],
    dtype=np.float64,
)


def synth_lesions(n: int, size, classes: int = 0, seed: int = 0, task: str = "segment") -> list:
    """Deterministic synthetic dermoscopy-like data.

    segment: random textured ellipses on skin tones with exact masks.
    classify: ``classes`` shape/tint families, labels cycling through all classes.
    """
    size = (size, size) if isinstance(size, int) else tuple(size)
    rng = np.random.default_rng(seed)
    records = []
    if task == "segment":
        for i in range(n):
            image, mask, _ = _synth_seg_one(rng, size)
            records.append(SegRecord(image, mask, f"synth_{i:05d}"))
        return records
    if task != "classify":
        raise ValueError(f"unknown synth task {task!r}")
    if classes < 2:
        raise ValueError(f"classification synth needs >= 2 classes, got {classes}")
    for i in range(n):
        label = i % classes
        fg = _class_pattern(label, size, rng)
        tint = _CLASS_TINTS[label % len(_CLASS_TINTS)]
        bg = rng.uniform(200, 235, size=3)
        base = np.where(fg[:, :, None], tint, bg)
        image = np.clip(base + rng.normal(0, 10, size=size + (3,)), 0, 255).astype(np.uint8)
        records.append(ClsRecord(image, label, f"synth_{i:05d}"))
    return records


def write_segmentation_dataset(records: Sequence, out_dir) -> None:
    out = Path(out_dir)
    for r in records:
        write_png(out / "images" / f"{r.id}.png", r.image)
        write_png(out / "masks" / f"{r.id}.png", (r.mask * 255).astype(np.uint8))


def write_classification_dataset(records: Sequence, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("filename", "label"))
        for r in records:
            write_png(out / "images" / f"{r.id}.png", r.image)
            w.writerow((f"{r.id}.png", r.label))


def load_dataset_dir(data_dir) -> list:
    """Load ``<dir>/images`` with either ``<dir>/masks`` or ``<dir>/labels.csv``."""
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    if (d / "labels.csv").exists():
        return load_classification_dataset(d / "images", d / "labels.csv")
    return load_segmentation_dataset(d / "images", d / "masks")
