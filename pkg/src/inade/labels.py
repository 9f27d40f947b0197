"""Semantic masks, instance maps, and their geometric transforms.

Labels are 1-based: a semantic mask stores values in {1..num_classes} and
an instance map stores values in {1..num_instances}, with instance labels
compacted so every declared label occupies at least one pixel.  One-hot
plane ``l - 1`` corresponds to label ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInstanceLabel,
    InconsistentInstance,
    LabelOutOfRange,
)

_LABEL_DTYPE = np.int64


def _as_label_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=_LABEL_DTYPE)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise DimensionMismatch(f"label grid must be 2-D and non-empty, got shape {grid.shape}")
    return grid


@dataclass(frozen=True)
class SemanticMask:
    """Per-pixel semantic class labels in {1..num_classes}."""

    grid: np.ndarray
    num_classes: int

    def __post_init__(self):
        grid = _as_label_grid(self.grid)
        object.__setattr__(self, "grid", grid)
        if self.num_classes < 1:
            raise LabelOutOfRange(f"num_classes must be positive, got {self.num_classes}")
        lo, hi = int(grid.min()), int(grid.max())
        if lo < 1 or hi > self.num_classes:
            raise LabelOutOfRange(
                f"semantic labels must lie in [1, {self.num_classes}], found [{lo}, {hi}]"
            )

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel instance labels in {1..num_instances}, compacted."""

    grid: np.ndarray
    num_instances: int

    def __post_init__(self):
        grid = _as_label_grid(self.grid)
        object.__setattr__(self, "grid", grid)
        if self.num_instances < 1:
            raise LabelOutOfRange(f"num_instances must be positive, got {self.num_instances}")
        lo, hi = int(grid.min()), int(grid.max())
        if lo < 1 or hi > self.num_instances:
            raise LabelOutOfRange(
                f"instance labels must lie in [1, {self.num_instances}], found [{lo}, {hi}]"
            )
        present = np.bincount(grid.ravel(), minlength=self.num_instances + 1)[1:]
        missing = np.nonzero(present == 0)[0]
        if missing.size:
            raise EmptyInstanceLabel(
                f"instance labels {list(missing + 1)} occupy zero pixels; labels must be compacted"
            )

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class LabelPair:
    """A semantic mask and instance map with the instance-to-class table.

    ``g[l - 1]`` is the semantic label shared by every pixel of instance l.
    """

    mask: SemanticMask
    inst: InstanceMap
    g: np.ndarray
    _resize_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "g", np.asarray(self.g, dtype=_LABEL_DTYPE))

    @property
    def shape(self):
        return self.mask.shape

    @property
    def num_classes(self) -> int:
        return self.mask.num_classes

    @property
    def num_instances(self) -> int:
        return self.inst.num_instances

    def instance_class(self, label: int) -> int:
        """Semantic class of instance ``label``."""
        if not 1 <= label <= self.num_instances:
            raise LabelOutOfRange(f"instance label {label} outside [1, {self.num_instances}]")
        return int(self.g[label - 1])

    def resized_instances(self, height: int, width: int) -> np.ndarray:
        """Instance grid resized to (height, width), memoized per size."""
        key = (height, width)
        cached = self._resize_cache.get(key)
        if cached is None:
            cached = resize_nearest(self.inst.grid, (height, width))
            self._resize_cache[key] = cached
        return cached

    def same_layout(self, other: "LabelPair") -> bool:
        """True when masks, instances, and g tables are identical."""
        return (
            self.mask.num_classes == other.mask.num_classes
            and self.inst.num_instances == other.inst.num_instances
            and np.array_equal(self.mask.grid, other.mask.grid)
            and np.array_equal(self.inst.grid, other.inst.grid)
            and np.array_equal(self.g, other.g)
        )


@dataclass(frozen=True)
class OneHotMask:
    """Boolean label planes, exactly one true plane per pixel."""

    planes: np.ndarray

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=bool)
        object.__setattr__(self, "planes", planes)
        if planes.ndim != 3:
            raise DimensionMismatch(f"one-hot planes must be 3-D, got shape {planes.shape}")

    def argmax_grid(self) -> np.ndarray:
        """Recover the 1-based label grid."""
        return self.planes.argmax(axis=0).astype(_LABEL_DTYPE) + 1


def validate_pair(mask: SemanticMask, inst: InstanceMap) -> LabelPair:
    """Check mask/instance consistency and derive the instance-to-class table.

    Raises DimensionMismatch when shapes differ and InconsistentInstance when
    any instance label covers more than one semantic label.
    """
    if mask.shape != inst.shape:
        raise DimensionMismatch(f"mask shape {mask.shape} != instance shape {inst.shape}")
    g = np.zeros(inst.num_instances, dtype=_LABEL_DTYPE)
    flat_inst = inst.grid.ravel()
    flat_mask = mask.grid.ravel()
    for label in range(1, inst.num_instances + 1):
        classes = np.unique(flat_mask[flat_inst == label])
        if classes.size != 1:
            raise InconsistentInstance(
                f"instance {label} covers semantic labels {list(classes)}"
            )
        g[label - 1] = classes[0]
    return LabelPair(mask=mask, inst=inst, g=g)


def degenerate_instances(mask: SemanticMask) -> LabelPair:
    """Treat each used semantic class as one instance.

    Used classes are mapped, in ascending order, onto compacted instance
    labels 1..n; ``g`` records the mapping back to the original classes.
    For a mask using all of its classes the instance grid equals the mask
    grid bit-exactly and g is the identity.
    """
    used = np.unique(mask.grid)
    lut = np.zeros(mask.num_classes + 1, dtype=_LABEL_DTYPE)
    lut[used] = np.arange(1, used.size + 1)
    inst = InstanceMap(grid=lut[mask.grid], num_instances=int(used.size))
    return LabelPair(mask=mask, inst=inst, g=used.copy())


def to_one_hot(grid, num_labels: int) -> OneHotMask:
    """One-hot planes for a 1-based label grid."""
    grid = _as_label_grid(grid)
    lo, hi = int(grid.min()), int(grid.max())
    if lo < 1 or hi > num_labels:
        raise LabelOutOfRange(f"labels must lie in [1, {num_labels}], found [{lo}, {hi}]")
    planes = np.zeros((num_labels,) + grid.shape, dtype=bool)
    rows, cols = np.indices(grid.shape)
    planes[grid - 1, rows, cols] = True
    return OneHotMask(planes=planes)


def resize_nearest(grid, target) -> np.ndarray:
    """Nearest-neighbour resize under half-pixel-center mapping.

    Output pixel (i, j) copies source pixel (floor((i+0.5)*H/H'),
    floor((j+0.5)*W/W')); no labels outside the input ever appear.
    """
    grid = _as_label_grid(grid)
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise DimensionMismatch(f"target dims must be positive, got {(th, tw)}")
    h, w = grid.shape
    src_r = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    src_c = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return grid[np.ix_(src_r, src_c)]


def instance_region(inst: InstanceMap, label: int) -> np.ndarray:
    """Boolean occupancy of one instance label."""
    if not 1 <= label <= inst.num_instances:
        raise LabelOutOfRange(f"instance label {label} outside [1, {inst.num_instances}]")
    return inst.grid == label


def boundary_map(inst: InstanceMap) -> np.ndarray:
    """1.0 where any 4-neighbour carries a different instance label, else 0.0."""
    grid = inst.grid
    edge = np.zeros(grid.shape, dtype=bool)
    edge[:-1, :] |= grid[:-1, :] != grid[1:, :]
    edge[1:, :] |= grid[1:, :] != grid[:-1, :]
    edge[:, :-1] |= grid[:, :-1] != grid[:, 1:]
    edge[:, 1:] |= grid[:, 1:] != grid[:, :-1]
    return edge.astype(np.float64)
