"""Datasets: class-per-directory loading, target splitting, synthetic domains.

Images are held as float32 (C, H, W) arrays with values in [0, 1].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from adapter.errors import DataError, ParameterError
from adapter.ndcore.serialize import atomic_write
from adapter.resample import crop_resize, resize

RAW_MAGIC = b"ADTR"
RAW_SUFFIX = ".adt"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class ImageRecord:
    pixels: np.ndarray
    label: int
    origin: str = ""


@dataclass
class Dataset:
    records: List[ImageRecord]
    class_names: List[str]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def indices_by_class(self) -> Dict[int, np.ndarray]:
        labels = self.labels
        return {c: np.flatnonzero(labels == c) for c in range(len(self.class_names))}

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.records[i] for i in indices], list(self.class_names))

    def stack(self, indices: Sequence[int], size: Optional[int] = None, mean=0.5, std=0.5) -> np.ndarray:
        """Resized, normalised images at ``indices`` as one (B, C, H, W) array."""
        return np.stack([resize_normalize(self.records[i], size, mean, std) for i in indices])


# -- raw tensor files ---------------------------------------------------------

def write_raw_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    header = RAW_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    atomic_write(path, header + np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_raw_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RAW_MAGIC or len(raw) < 8:
        raise DataError(f"{path}: not a raw tensor file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    body = raw[8 + 4 * ndim:]
    if len(body) != 4 * math.prod(shape):
        raise DataError(f"{path}: body holds {len(body)} bytes, header promises {shape}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


def decode_image(path, channels: int = 3) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == RAW_SUFFIX:
            arr = read_raw_tensor(path)
            if arr.ndim == 2:
                arr = arr[None]
        else:
            from PIL import Image

            with Image.open(path) as im:
                im = im.convert("RGB" if channels == 3 else "L")
                arr = np.asarray(im, dtype=np.float32) / 255.0
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[0] != channels:
        raise DataError(f"{path}: expected {channels} channels, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise DataError(f"{path}: pixel values must lie in [0, 1]")
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_folder(root, channels: int = 3) -> Dataset:
    """Load ``root/<class_name>/<file>``; classes and files in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class directories")
    records = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES | {RAW_SUFFIX})
        if not files:
            raise DataError(f"class directory {cdir} contains no images")
        records.extend(ImageRecord(decode_image(f, channels), label, str(f)) for f in files)
    return Dataset(records, [p.name for p in class_dirs])


# -- splitting ------------------------------------------------------------------

@dataclass
class TargetSplit:
    """Target-side split: unlabeled pool for pretraining, the rest for evaluation."""

    unlabeled: Dataset
    evaluation: Dataset
    unlabeled_indices: np.ndarray
    evaluation_indices: np.ndarray


def split_target(dataset: Dataset, fraction: float = 0.20, seed: int = 0) -> TargetSplit:
    """Stratified split: ``round(fraction * n_c)`` samples of each class go to the unlabeled pool."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    unl, ev = [], []
    for c, idx in dataset.indices_by_class().items():
        if len(idx) < 2:
            raise DataError(f"class {dataset.class_names[c]!r} has {len(idx)} samples; need >= 2 to split")
        n_u = min(max(int(math.floor(fraction * len(idx) + 0.5)), 1), len(idx) - 1)
        perm = rng.permutation(idx)
        unl.extend(sorted(perm[:n_u]))
        ev.extend(sorted(perm[n_u:]))
    unl, ev = np.array(unl, dtype=np.int64), np.array(ev, dtype=np.int64)
    return TargetSplit(dataset.subset(unl), dataset.subset(ev), unl, ev)


def write_split_manifest(path, dataset: Dataset, split: TargetSplit) -> None:
    lines = [f"{dataset.records[i].origin or i}\tunlabeled" for i in split.unlabeled_indices]
    lines += [f"{dataset.records[i].origin or i}\tevaluation" for i in split.evaluation_indices]
    atomic_write(path, "\n".join(lines) + "\n")


# -- preprocessing / augmentation primitives -------------------------------------

def resize_normalize(record, size: Optional[int] = None, mean=0.5, std=0.5) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size`` (if given), then ``(x - mean) / std`` per channel."""
    pixels = record.pixels if isinstance(record, ImageRecord) else np.asarray(record, dtype=np.float32)
    if size is not None:
        if size < 1:
            raise ParameterError(f"target resolution must be >= 1, got {size}")
        if pixels.shape[1:] != (size, size):
            pixels = resize(pixels, size, size)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (pixels.shape[0],))[:, None, None]
    std = np.broadcast_to(np.asarray(std, dtype=np.float32), (pixels.shape[0],))[:, None, None]
    return ((pixels - mean) / std).astype(np.float32)


def random_resized_crop(pixels: np.ndarray, size: int, scale, rng: np.random.Generator,
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random box of area fraction in ``scale`` and aspect in ``ratio``; resize to ``size``."""
    _, h, w = pixels.shape
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = math.sqrt(target * aspect)
        ch = math.sqrt(target / aspect)
        if cw <= w and ch <= h:
            top = rng.uniform(0.0, h - ch)
            left = rng.uniform(0.0, w - cw)
            return crop_resize(pixels, top, left, ch, cw, size, size)
    side = min(h, w) * math.sqrt(min(max(scale[1], 0.0), 1.0))
    return crop_resize(pixels, (h - side) / 2, (w - side) / 2, side, side, size, size)


def color_jitter(pixels: np.ndarray, rng: np.random.Generator, brightness=0.4, contrast=0.4,
                 saturation=0.2) -> np.ndarray:
    out = pixels * rng.uniform(1 - brightness, 1 + brightness)
    c = rng.uniform(1 - contrast, 1 + contrast)
    out = (out - out.mean()) * c + out.mean()
    if out.shape[0] == 3:
        s = rng.uniform(1 - saturation, 1 + saturation)
        gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
        out = (out - gray) * s + gray
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(pixels, sigma=(0, sigma, sigma), mode="reflect").astype(np.float32)


# -- synthetic domains ------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Two-domain blob images; each class is a fixed constellation of coloured Gaussian blobs."""

    n_classes: int = 5
    samples_per_class: int = 40
    base_classes: int = 5
    base_samples_per_class: int = 40
    image_size: int = 16
    channels: int = 3
    blobs_per_class: int = 2
    blob_sigma: float = 2.0
    jitter: float = 0.5
    noise: float = 0.03
    domain_transform: str = "invert"
    disjoint_classes: bool = True
    seed: int = 0


def _prototypes(spec: SyntheticSpec, count: int, rng: np.random.Generator):
    protos = []
    lo, hi = 0.2 * spec.image_size, 0.8 * spec.image_size
    for _ in range(count):
        centres = rng.uniform(lo, hi, size=(spec.blobs_per_class, 2))
        colours = rng.uniform(0.2, 1.0, size=(spec.blobs_per_class, spec.channels))
        protos.append((centres, colours))
    return protos


def _render(proto, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    centres, colours = proto
    yy, xx = np.mgrid[0:spec.image_size, 0:spec.image_size].astype(np.float64)
    img = np.zeros((spec.channels, spec.image_size, spec.image_size))
    for (cy, cx), colour in zip(centres + rng.normal(0.0, spec.jitter, size=centres.shape) if spec.jitter else centres,
                                colours):
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spec.blob_sigma ** 2))
        img += colour[:, None, None] * blob[None]
    if spec.noise:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_domain_transform(img: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return img
    if kind == "invert":
        return 1.0 - img
    if kind == "blur":
        return gaussian_filter(img, sigma=(0, 1.0, 1.0), mode="reflect")
    if kind == "invert_blur":
        return 1.0 - gaussian_filter(img, sigma=(0, 1.0, 1.0), mode="reflect")
    raise ParameterError(f"unknown domain transform {kind!r}")


def synth_generate(spec: SyntheticSpec):
    """(base, target) datasets; the target domain differs by ``spec.domain_transform``."""
    rng = np.random.default_rng(spec.seed)
    n_protos = spec.base_classes + (spec.n_classes if spec.disjoint_classes else 0)
    protos = _prototypes(spec, max(n_protos, spec.n_classes), rng)
    base_protos = protos[:spec.base_classes]
    target_protos = protos[spec.base_classes:n_protos] if spec.disjoint_classes else protos[:spec.n_classes]

    def build(proto_list, per_class, transform, tag):
        records = []
        for label, proto in enumerate(proto_list):
            for i in range(per_class):
                img = apply_domain_transform(_render(proto, spec, rng), transform)
                records.append(ImageRecord(img.astype(np.float32), label, f"synthetic:{tag}:{label}:{i}"))
        names = [f"{tag}{c:02d}" for c in range(len(proto_list))]
        return Dataset(records, names)

    base = build(base_protos, spec.base_samples_per_class, "identity", "base")
    target = build(target_protos, spec.samples_per_class, spec.domain_transform, "target")
    return base, target


def write_folder(dataset: Dataset, root, fmt: str = "adt") -> None:
    """Materialise a dataset as ``root/<class>/<index>.<fmt>`` (PNG or raw tensor)."""
    root = Path(root)
    for i, rec in enumerate(dataset.records):
        cdir = root / dataset.class_names[rec.label]
        cdir.mkdir(parents=True, exist_ok=True)
        if fmt == "adt":
            write_raw_tensor(cdir / f"{i:05d}.adt", rec.pixels)
        elif fmt == "png":
            from PIL import Image

            arr = np.round(np.clip(rec.pixels, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr.squeeze() if arr.shape[2] == 1 else arr).save(cdir / f"{i:05d}.png")
        else:
            raise ParameterError(f"unknown image format {fmt!r}")
