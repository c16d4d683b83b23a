"""Synthetic head phantoms with exactly known tissue labels.

Each phantom is a set of concentric, randomly sized ellipsoids: a bright
outer rim ("skull", labelled background), a gray-matter shell and a
white-matter core.  Optional Gaussian intensity noise, smoothing and label
corruption near tissue boundaries imitate imperfect automatic labels.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidConfig
from .volume import LabelVolume, Volume, write_volume

BACKGROUND, GRAY, WHITE = 0, 1, 2


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    count: int = 5
    center_jitter: float = 3.0  # voxels, uniform per axis
    outer_axes: tuple[float, float] = (0.30, 0.40)  # brain semi-axes as a fraction of dims
    inner_ratio: tuple[float, float] = (0.55, 0.70)  # white-core semi-axes relative to brain
    skull_gap: float = 2.0  # voxels between brain and rim
    skull_thickness: float = 2.0
    intensity: dict = field(default_factory=lambda: {"background": 0.05, "skull": 1.0, "gray": 0.45, "white": 0.75})
    intensity_noise: float = 0.08
    smoothing: float = 0.0  # gaussian blur sigma (voxels) before noise
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.intensity_noise < 0 or self.smoothing < 0:
            raise InvalidConfig("noise and smoothing must be >= 0")
        if not 0 <= self.label_noise < 0.5:
            raise InvalidConfig(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        lo, hi = self.inner_ratio
        if not 0 < lo <= hi < 1:
            raise InvalidConfig("inner_ratio must satisfy 0 < lo <= hi < 1 so shells nest")
        if self.count < 1:
            raise InvalidConfig("count must be >= 1")


@dataclass(frozen=True)
class Phantom:
    image: Volume
    labels: LabelVolume  # emitted (possibly corrupted) labels
    clean: LabelVolume


def _ellipsoid_radius(dims, center, axes) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(d) + 0.5 for d in dims), indexing="ij")
    return np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes)))


def boundary_band(labels: np.ndarray) -> np.ndarray:
    """Voxels whose 3x3x3 neighbourhood holds more than one class."""
    return ndimage.maximum_filter(labels, size=3, mode="nearest") != ndimage.minimum_filter(
        labels, size=3, mode="nearest")


def corrupt_labels(labels: np.ndarray, rate: float, rng: np.random.Generator, num_classes: int = 3) -> np.ndarray:
    """Relabel each boundary-band voxel with probability ``rate`` to another class from its neighbourhood."""
    out = labels.copy()
    if rate <= 0:
        return out
    band = boundary_band(labels)
    present = np.stack([ndimage.maximum_filter(labels == c, size=3, mode="nearest") for c in range(num_classes)])
    flip = band & (rng.random(labels.shape) < rate)
    idx = np.argwhere(flip)
    u = rng.random(len(idx))
    for (z, y, x), r in zip(idx, u):
        choices = [c for c in range(num_classes) if present[c, z, y, x] and c != labels[z, y, x]]
        out[z, y, x] = choices[int(r * len(choices))]
    return out


def make_phantom(spec: PhantomSpec, index: int) -> Phantom:
    rng = np.random.default_rng([spec.seed, index])
    dims = np.array(spec.dims, float)
    center = dims / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
    outer = dims * rng.uniform(*spec.outer_axes, 3)
    inner = outer * rng.uniform(*spec.inner_ratio, 3)

    r_outer = _ellipsoid_radius(spec.dims, center, outer)
    r_inner = _ellipsoid_radius(spec.dims, center, inner)
    gap_scale = 1 + spec.skull_gap / outer.min()
    rim_scale = 1 + (spec.skull_gap + spec.skull_thickness) / outer.min()

    labels = np.full(spec.dims, BACKGROUND, np.uint8)
    labels[r_outer <= 1] = GRAY
    labels[r_inner <= 1] = WHITE

    lv = spec.intensity
    img = np.full(spec.dims, lv["background"], np.float64)
    img[(r_outer > gap_scale) & (r_outer <= rim_scale)] = lv["skull"]
    img[labels == GRAY] = lv["gray"]
    img[labels == WHITE] = lv["white"]
    if spec.smoothing > 0:
        img = ndimage.gaussian_filter(img, spec.smoothing)
    if spec.intensity_noise > 0:
        img = img + rng.normal(0.0, spec.intensity_noise, img.shape)

    emitted = corrupt_labels(labels, spec.label_noise, rng)
    return Phantom(Volume(img.astype(np.float32)), LabelVolume(emitted, 3), LabelVolume(labels, 3))


def make_dataset(spec: PhantomSpec) -> list[Phantom]:
    return [make_phantom(spec, i) for i in range(spec.count)]


def write_dataset(spec: PhantomSpec, out_dir: str | os.PathLike) -> dict:
    """Write image/label/clean-label VVOL triples plus ``manifest.json``; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    pairs = []
    for i, ph in enumerate(make_dataset(spec)):
        names = {k: f"phantom_{i:03d}_{k}.vvol" for k in ("image", "labels", "clean")}
        write_volume(ph.image, os.path.join(out_dir, names["image"]))
        write_volume(ph.labels, os.path.join(out_dir, names["labels"]))
        write_volume(ph.clean, os.path.join(out_dir, names["clean"]))
        pairs.append(names)
    manifest = {"spec": asdict(spec), "pairs": pairs}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
