"""Synthetic colored-shapes dataset with instance annotations.

Each sample is a flat-colored scene: a background plus a few disks,
squares, and triangles painted back-to-front.  Every shape is one
instance; its class decides the shape geometry and the hue distribution
its color is drawn from, so class identity carries a measurable style
distribution and instances of the same class differ in a known,
one-dimensional way.  Images are built as 8-bit RGB first, then mapped
to float [-1, 1], which keeps disk round-trips lossless.

On disk a dataset is a directory with a manifest, 8-bit RGB images,
16-bit single-channel mask/instance files, and one JSON metadata record
per sample (see README for the exact field names).
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import NoiseBank, sample_noise_bank
from .errors import ConfigInvalid, CorruptFile, DimensionMismatch, SchemaMismatch
from .labels import InstanceMap, LabelPair, SemanticMask, validate_pair
from .rng import derived_seed

DATASET_FORMAT_VERSION = 1


@dataclass
class ShapesConfig:
    """Generation knobs for the shapes dataset.

    ``num_classes`` counts the background class; foreground classes cycle
    through disk, square, triangle geometry.  ``min_instances`` and
    ``max_instances`` bound the number of foreground shapes per image.
    """

    image_size: int = 64
    num_classes: int = 4
    min_instances: int = 2
    max_instances: int = 4
    class_hues: Optional[tuple] = None
    hue_spread: float = 0.03
    saturation: float = 0.75
    value: float = 0.85
    dataset_size: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigInvalid(f"image_size must be at least 8, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigInvalid("need a background class plus at least one shape class")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigInvalid(
                f"bad instance range [{self.min_instances}, {self.max_instances}]")
        if self.dataset_size < 1:
            raise ConfigInvalid("dataset_size must be positive")
        if self.hue_spread < 0:
            raise ConfigInvalid("hue_spread must be nonnegative")
        if self.class_hues is None:
            hues = tuple((0.08 + 0.25 * i) % 1.0 for i in range(self.num_classes))
            object.__setattr__(self, "class_hues", hues)
        elif len(self.class_hues) != self.num_classes:
            raise ConfigInvalid(
                f"class_hues needs {self.num_classes} entries, got {len(self.class_hues)}")
        else:
            object.__setattr__(self, "class_hues", tuple(float(h) for h in self.class_hues))


@dataclass
class Sample:
    """One image with its label pair and the per-instance hue ground truth."""

    image: np.ndarray
    pair: LabelPair
    hues: Optional[np.ndarray] = None


class ShapesDataset:
    """An in-memory sequence of samples plus the config that produced it."""

    def __init__(self, samples: list[Sample], config: ShapesConfig):
        self.samples = samples
        self.config = config

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)


def _hue_to_rgb8(hue: float, saturation: float, value: float) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(hue % 1.0, saturation, value)
    return np.array([round(c * 255) for c in rgb], dtype=np.uint8)


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean footprint of one shape placed inside the image."""
    radius = int(rng.integers(max(3, size // 10), max(4, size // 4)))
    cy = int(rng.integers(radius, size - radius))
    cx = int(rng.integers(radius, size - radius))
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    if kind == 1:  # square
        return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    # upright triangle: apex at the top, half-width growing to radius
    inside = (yy >= cy - radius) & (yy <= cy + radius)
    half_width = (yy - (cy - radius)) / 2.0
    return inside & (np.abs(xx - cx) <= half_width)


def _paint_sample(cfg: ShapesConfig, rng: np.random.Generator) -> Sample:
    size = cfg.image_size
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    mask = np.ones((size, size), dtype=np.int64)
    inst = np.ones((size, size), dtype=np.int64)
    classes = [1]
    hues = [float(rng.normal(cfg.class_hues[0], cfg.hue_spread)) % 1.0]
    fg_classes = np.arange(2, cfg.num_classes + 1)
    for k in range(count):
        cls = int(rng.choice(fg_classes))
        for _ in range(50):
            footprint = _shape_mask((cls - 2) % 3, size, rng)
            trial = inst.copy()
            trial[footprint] = k + 2
            visible = np.bincount(trial.ravel(), minlength=k + 3)[1:k + 3]
            if (visible > 0).all():
                inst = trial
                mask[footprint] = cls
                break
        else:
            raise ConfigInvalid(
                f"could not place shape {k + 1} without erasing an earlier instance")
        classes.append(cls)
        hues.append(float(rng.normal(cfg.class_hues[cls - 1], cfg.hue_spread)) % 1.0)

    # Compact paint-order labels (full occlusion is retried away above, so
    # this is the identity, but it keeps the invariant explicit).
    used = np.unique(inst)
    lut = np.zeros(inst.max() + 1, dtype=np.int64)
    lut[used] = np.arange(1, used.size + 1)
    inst = lut[inst]
    classes = [classes[u - 1] for u in used]
    hues = [hues[u - 1] for u in used]

    image8 = np.zeros((size, size, 3), dtype=np.uint8)
    for label, hue in enumerate(hues, start=1):
        image8[inst == label] = _hue_to_rgb8(hue, cfg.saturation, cfg.value)
    image = (image8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)

    pair = validate_pair(
        SemanticMask(grid=mask, num_classes=cfg.num_classes),
        InstanceMap(grid=inst, num_instances=int(used.size)),
    )
    return Sample(image=image, pair=pair, hues=np.array(hues, dtype=np.float64))


def generate_shapes(cfg: ShapesConfig) -> ShapesDataset:
    """Generate a dataset, reproducible from the config seed alone."""
    samples = []
    for index in range(cfg.dataset_size):
        rng = np.random.default_rng(derived_seed(cfg.seed, 100, index))
        samples.append(_paint_sample(cfg, rng))
    return ShapesDataset(samples, cfg)


@dataclass
class Batch:
    """Stacked images with per-element label pairs (instance counts vary)."""

    images: torch.Tensor
    pairs: list[LabelPair]

    def sample_banks(self, channels: int, generator: torch.Generator) -> list[NoiseBank]:
        """Fresh noise banks, one per element, sized to each element's instances."""
        return [sample_noise_bank(p.num_instances, channels, generator) for p in self.pairs]

    def __len__(self):
        return len(self.pairs)


def collate(samples: Sequence[Sample]) -> Batch:
    """Stack images and keep label pairs ragged."""
    if not samples:
        raise DimensionMismatch("cannot collate an empty batch")
    dims = {s.pair.shape for s in samples}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed image dims in batch: {sorted(dims)}")
    images = torch.stack([torch.as_tensor(s.image, dtype=torch.float32) for s in samples])
    return Batch(images=images, pairs=[s.pair for s in samples])


def write_label_png(path: Path, grid: np.ndarray):
    """Store an integer label grid as a 16-bit single-channel PNG."""
    arr = np.asarray(grid)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ConfigInvalid(f"labels outside uint16 range: [{arr.min()}, {arr.max()}]")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def read_label_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise CorruptFile(f"could not read label file {path}: {exc}") from exc
    return arr.astype(np.int64)


def save_dataset(dataset: ShapesDataset, root: Path):
    """Write the documented directory layout (manifest, images, labels, meta)."""
    root = Path(root)
    for sub in ("images", "masks", "instances", "meta"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(dataset):
        name = f"{i:05d}"
        image8 = ((sample.image.transpose(1, 2, 0) + 1.0) * 127.5).round().astype(np.uint8)
        Image.fromarray(image8).save(root / "images" / f"{name}.png", format="PNG")
        write_label_png(root / "masks" / f"{name}.png", sample.pair.mask.grid)
        write_label_png(root / "instances" / f"{name}.png", sample.pair.inst.grid)
        meta = {
            "num_classes": sample.pair.num_classes,
            "num_instances": sample.pair.num_instances,
            "g": [int(v) for v in sample.pair.g],
            "hues": None if sample.hues is None else [float(h) for h in sample.hues],
        }
        (root / "meta" / f"{name}.json").write_text(json.dumps(meta))
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(dataset),
        "config": asdict(dataset.config),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root: Path) -> ShapesDataset:
    """Read a dataset directory back; inverse of save_dataset."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorruptFile(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"unreadable manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise SchemaMismatch(
            f"dataset format version {version} unsupported "
            f"(expected {DATASET_FORMAT_VERSION})")
    try:
        config = ShapesConfig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in manifest["config"].items()})
        count = int(manifest["count"])
    except (KeyError, TypeError) as exc:
        raise SchemaMismatch(f"manifest fields missing or malformed: {exc}") from exc
    samples = []
    for i in range(count):
        name = f"{i:05d}"
        image_path = root / "images" / f"{name}.png"
        meta_path = root / "meta" / f"{name}.json"
        try:
            with Image.open(image_path) as img:
                image8 = np.asarray(img.convert("RGB"))
            meta = json.loads(meta_path.read_text())
        except FileNotFoundError as exc:
            raise CorruptFile(f"missing sample file: {exc.filename}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptFile(f"unreadable sample {name}: {exc}") from exc
        try:
            num_classes = int(meta["num_classes"])
            num_instances = int(meta["num_instances"])
            g = np.array(meta["g"], dtype=np.int64)
            hues = meta.get("hues")
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"sample metadata {name} malformed: {exc}") from exc
        mask = SemanticMask(grid=read_label_png(root / "masks" / f"{name}.png"),
                            num_classes=num_classes)
        inst = InstanceMap(grid=read_label_png(root / "instances" / f"{name}.png"),
                           num_instances=num_instances)
        pair = LabelPair(mask=mask, inst=inst, g=g)
        image = (image8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)
        samples.append(Sample(
            image=image, pair=pair,
            hues=None if hues is None else np.array(hues, dtype=np.float64)))
    return ShapesDataset(samples, config)
