"""Whole-volume segmentation by majority vote over subvolume predictions."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyAccumulator, PlanMismatch, ShapeMismatch
from .models import ModelSpec, Params, predict
from .sampler import CoveragePlan
from .trainer import normalize
from .volume import LabelVolume, SubvolumeRef, Volume

# (batch of subvolumes (B, M, A, A, A), their refs) -> labels (B, A, A, A)
LabelPredictor = Callable[[np.ndarray, Sequence[SubvolumeRef]], np.ndarray]


@dataclass
class VoteAccumulator:
    dims: tuple[int, int, int]
    num_classes: int
    counts: np.ndarray = None  # uint16, (N, D, H, W)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.counts is None:
            self.counts = np.zeros((self.num_classes,) + self.dims, np.uint16)

    def coverage(self) -> np.ndarray:
        return self.counts.sum(axis=0, dtype=np.int64)


def accumulate_votes(acc: VoteAccumulator, ref: SubvolumeRef, labels: np.ndarray) -> VoteAccumulator:
    labels = np.asarray(labels)
    if labels.shape != (ref.side,) * 3:
        raise ShapeMismatch(f"predicted labels {labels.shape} do not match side {ref.side}")
    ref.check(acc.dims)
    if labels.size and labels.max() >= acc.num_classes:
        raise ShapeMismatch(f"label {labels.max()} outside [0, {acc.num_classes})")
    sl = ref.slices
    for c in range(acc.num_classes):
        acc.counts[c][sl] += labels == c
    return acc


def finalize(acc: VoteAccumulator) -> LabelVolume:
    """Per-voxel argmax of vote counts; ties go to the smallest class index."""
    if np.any(acc.coverage() == 0):
        raise EmptyAccumulator("some voxels received no votes")
    return LabelVolume(acc.counts.argmax(axis=0).astype(np.uint8), acc.num_classes)


def model_predictor(spec: ModelSpec, params: Params) -> LabelPredictor:
    def run(batch, refs):
        return predict(spec, params, batch).argmax(axis=1).astype(np.uint8)
    return run


def segment_volume(predictor: LabelPredictor, vol: Volume, plan: CoveragePlan, num_classes: int,
                   batch_size: int = 8, workers: int = 1, normalize_mode: str = "minmax") -> LabelVolume:
    """Predict every planned subvolume (grid first, then sampled) and fuse the votes.

    The volume is normalized once, so each subvolume sees the parent
    volume's intensity scale.
    """
    if tuple(plan.dims) != vol.dims:
        raise PlanMismatch(f"plan dims {plan.dims} != volume dims {vol.dims}")
    data = normalize(vol, normalize_mode).data
    refs = list(plan.refs)
    for r in refs:
        r.check(vol.dims)
    batches = [refs[i:i + batch_size] for i in range(0, len(refs), batch_size)]

    def run(batch_refs):
        x = np.stack([data[(slice(None),) + r.slices] for r in batch_refs])
        return predictor(x, batch_refs)

    acc = VoteAccumulator(vol.dims, num_classes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run, batches)
            for batch_refs, labels in zip(batches, results):
                for r, lab in zip(batch_refs, labels):
                    accumulate_votes(acc, r, lab)
    else:
        for batch_refs in batches:
            for r, lab in zip(batch_refs, run(batch_refs)):
                accumulate_votes(acc, r, lab)
    return finalize(acc)


def segment_with_model(spec: ModelSpec, params: Params, vol: Volume, plan: CoveragePlan,
                       batch_size: int = 8, workers: int = 1, normalize_mode: str = "minmax") -> LabelVolume:
    return segment_volume(model_predictor(spec, params), vol, plan, spec.num_classes,
                          batch_size, workers, normalize_mode)


def write_pgm_slices(labels: LabelVolume, prefix: str) -> list[str]:
    """Mid-slice along each axis as binary PGM, classes mapped to evenly spaced gray levels."""
    lut = np.linspace(0, 255, max(labels.num_classes, 2)).round().astype(np.uint8)
    img = lut[labels.labels]
    d, h, w = labels.dims
    paths = []
    for axis, sl in (("z", img[d // 2]), ("y", img[:, h // 2]), ("x", img[:, :, w // 2])):
        path = f"{prefix}_{axis}.pgm"
        with open(path, "wb") as f:
            f.write(f"P5\n{sl.shape[1]} {sl.shape[0]}\n255\n".encode())
            f.write(np.ascontiguousarray(sl).tobytes())
        paths.append(path)
    return paths
