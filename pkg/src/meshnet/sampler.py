"""Gaussian-centred subvolume sampling and whole-volume inference plans."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, SubvolumeTooLarge
from .volume import SubvolumeRef


@dataclass(frozen=True)
class SamplerConfig:
    side: int
    sigma: tuple[float, float, float] = (50.0, 50.0, 50.0)  # voxels, per axis (z, y, x)
    mean: tuple[float, float, float] | None = None  # None: centre of the volume
    seed: int = 0

    def __post_init__(self):
        sigma = tuple(float(s) for s in np.broadcast_to(self.sigma, 3))
        object.__setattr__(self, "sigma", sigma)
        if min(sigma) <= 0:
            raise InvalidConfig(f"sigma must be positive, got {sigma}")
        if self.side < 1:
            raise InvalidConfig(f"side must be >= 1, got {self.side}")
        if self.mean is not None:
            object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))

    def for_worker(self, index: int) -> "SamplerConfig":
        return SamplerConfig(self.side, self.sigma, self.mean, self.seed + index)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), -np.floor(-x + 0.5)).astype(np.int64)


def _check_fits(side: int, dims) -> None:
    if any(side > d for d in dims):
        raise SubvolumeTooLarge(f"subvolume side {side} exceeds volume dims {tuple(dims)}")


class CenterSampler:
    """Endless, seed-reproducible stream of in-bounds subvolume refs."""

    def __init__(self, cfg: SamplerConfig, dims):
        _check_fits(cfg.side, dims)
        self.cfg = cfg
        self.dims = tuple(int(d) for d in dims)
        self.mean = np.array(cfg.mean if cfg.mean is not None else [d / 2 for d in self.dims])
        self.rng = np.random.default_rng(cfg.seed)

    def draw_centers(self, count: int) -> np.ndarray:
        """(count, 3) integer centres, rounded half away from zero, before clamping."""
        return round_half_away(self.rng.normal(self.mean, self.cfg.sigma, size=(count, 3)))

    def draw(self, count: int) -> list[SubvolumeRef]:
        return [self.ref_for_center(c) for c in self.draw_centers(count)]

    def ref_for_center(self, center) -> SubvolumeRef:
        side = self.cfg.side
        hi = np.array(self.dims) - side
        origin = np.clip(np.asarray(center) - side // 2, 0, hi)
        return SubvolumeRef(tuple(int(o) for o in origin), side)


def sample_training_centers(cfg: SamplerConfig, dims, count: int) -> list[SubvolumeRef]:
    return CenterSampler(cfg, dims).draw(count)


def grid_origins(dim: int, side: int) -> list[int]:
    """Stride-`side` tiling from 0; the last tile is shifted back to end at the boundary."""
    if side > dim:
        raise SubvolumeTooLarge(f"subvolume side {side} exceeds dim {dim}")
    origins = [min(o, dim - side) for o in range(0, dim, side)]
    return sorted(set(origins))


@dataclass(frozen=True)
class CoveragePlan:
    dims: tuple[int, int, int]
    side: int
    grid: tuple[SubvolumeRef, ...]
    sampled: tuple[SubvolumeRef, ...] = field(default=())

    @property
    def refs(self) -> tuple[SubvolumeRef, ...]:
        return self.grid + self.sampled

    def coverage(self) -> np.ndarray:
        counts = np.zeros(self.dims, np.int64)
        for r in self.refs:
            counts[r.slices] += 1
        return counts


def plan_inference(dims, side: int, n_sampled: int, seed: int = 0,
                   sigma=(50.0, 50.0, 50.0), mean=None) -> CoveragePlan:
    dims = tuple(int(d) for d in dims)
    _check_fits(side, dims)
    axes = [grid_origins(d, side) for d in dims]
    grid = tuple(SubvolumeRef((z, y, x), side) for z in axes[0] for y in axes[1] for x in axes[2])
    sampled = ()
    if n_sampled > 0:
        cfg = SamplerConfig(side, sigma, mean, seed)
        sampled = tuple(CenterSampler(cfg, dims).draw(n_sampled))
    return CoveragePlan(dims, side, grid, sampled)
