"""Synthetic scene generator: colored shapes on a noisy background.

Stands in for a real segmentation dataset at desk scale.  Class 0 is the
background; shape classes get distinct base colors except for the last two,
whose palettes overlap enough that color alone does not separate them.  One
class can be marked rare: it then appears only in a configured fraction of a
split's images, allocated exactly (round(freq * n) images) and reproducibly.
"""

from dataclasses import dataclass

import numpy as np

from .sampling import substream

# base colors; classes 3 and 4 deliberately close, jitter makes them overlap
PALETTE = np.array([
    [0.25, 0.35, 0.45],
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.25],
    [0.72, 0.68, 0.18],
    [0.66, 0.62, 0.24],
])
COLOR_JITTER = 0.08


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 5
    shapes_per_image: tuple = (2, 4)
    shape_size: tuple = (10, 28)
    noise_sigma: float = 0.05
    rare_class: int | None = 4
    rare_freq: float = 0.1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.height < 32 or self.width < 32:
            raise ValueError(f"canvas must be at least 32x32, got {self.height}x{self.width}")
        if self.n_classes > PALETTE.shape[0]:
            raise ValueError(f"palette supports up to {PALETTE.shape[0]} classes")
        if self.shape_size[1] > min(self.height, self.width):
            raise ValueError(
                f"largest shape ({self.shape_size[1]}) exceeds canvas {self.height}x{self.width}")
        if self.rare_class is not None and not 0 < self.rare_class < self.n_classes:
            raise ValueError(f"rare class {self.rare_class} outside (0, {self.n_classes})")
        if not 0.0 <= self.rare_freq <= 1.0:
            raise ValueError("rare_freq must be in [0, 1]")


@dataclass
class SyntheticScene:
    image: np.ndarray   # (3, H, W) floats in [0, 1]
    labels: np.ndarray  # (H, W) ints in [0, n_classes)


def _paint_shape(image, labels, cls, color, rng, spec):
    h, w = spec.height, spec.width
    size = int(rng.integers(spec.shape_size[0], spec.shape_size[1] + 1))
    kind = rng.integers(0, 2)
    if kind == 0:
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        image[:, top : top + size, left : left + size] = color[:, None, None]
        labels[top : top + size, left : left + size] = cls
    else:
        r = size // 2
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        image[:, mask] = color[:, None]
        labels[mask] = cls


def generate_scene(spec: SceneSpec, rng: np.random.Generator, include_rare: bool = False) -> SyntheticScene:
    """Render one scene.  Deterministic for a given generator state."""
    bg = np.clip(PALETTE[0] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0, 1)
    image = np.tile(bg[:, None, None], (1, spec.height, spec.width))
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)

    common = [c for c in range(1, spec.n_classes) if c != spec.rare_class]
    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    classes = list(rng.choice(common, size=n_shapes)) if (n_shapes and common) else []
    if include_rare and spec.rare_class is not None:
        if classes:
            classes[-1] = spec.rare_class  # drawn last: stays on top, never fully occluded
        else:
            classes = [spec.rare_class]
    for cls in classes:
        color = np.clip(PALETTE[cls] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0, 1)
        _paint_shape(image, labels, int(cls), color, rng, spec)

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return SyntheticScene(np.clip(image, 0.0, 1.0), labels)


class SceneDataset:
    """A reproducible split of n scenes, regenerable from (spec, seed).

    Scene i is drawn from its own seed substream, so any subset of the split
    can be materialized without generating the rest.  Rare-class images are
    chosen up front: exactly round(rare_freq * n) of them.
    """

    _NAMESPACE = 2

    def __init__(self, spec: SceneSpec, seed: int, n_images: int):
        self.spec = spec
        self.seed = int(seed)
        self.n_images = int(n_images)
        self.rare_flags = np.zeros(self.n_images, dtype=bool)
        if spec.rare_class is not None and spec.rare_freq > 0:
            n_rare = int(round(spec.rare_freq * self.n_images))
            picks = substream(self.seed, self._NAMESPACE, 0).choice(
                self.n_images, size=min(n_rare, self.n_images), replace=False)
            self.rare_flags[picks] = True

    def __len__(self):
        return self.n_images

    def scene(self, i: int) -> SyntheticScene:
        if not 0 <= i < self.n_images:
            raise IndexError(f"scene index {i} outside split of {self.n_images}")
        rng = substream(self.seed, self._NAMESPACE, 1 + i)
        return generate_scene(self.spec, rng, include_rare=bool(self.rare_flags[i]))

    def batch(self, indices):
        scenes = [self.scene(int(i)) for i in indices]
        images = np.stack([s.image for s in scenes])
        labels = np.stack([s.labels for s in scenes])
        return images, labels
