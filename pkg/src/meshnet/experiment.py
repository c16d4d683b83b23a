"""The desk-scale phantom experiment shared by the acceptance suite and ``scripts/``.

A width-reduced MeshNet (8 feature maps, 32^3 subvolumes, receptive field
31) is trained on three 64^3 phantoms and evaluated on two held-out ones.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .metrics import SegmentationReport, evaluate
from .models import ModelSpec, Params, build_meshnet
from .phantom import Phantom, PhantomSpec, make_dataset
from .sampler import SamplerConfig, plan_inference
from .stitcher import segment_with_model
from .trainer import TrainConfig, TrainResult, train
from .volume import LabelVolume


@dataclass(frozen=True)
class DeskConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train_indices: tuple[int, ...] = (0, 1, 2)
    test_indices: tuple[int, ...] = (3, 4)
    features: int = 8
    side: int = 32
    sigma: float = 12.5  # 64 / 256 of the full-size 50 voxels
    batch_size: int = 8
    batches: int = 200
    lr: float = 3e-3
    dropout: float = 0.0
    subvolumes: int = 200
    seed: int = 0

    def model(self) -> ModelSpec:
        return build_meshnet(32, 1, 3, self.dropout, features=self.features)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.side, self.sigma, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.batches, self.lr, seed=self.seed)


def train_desk_model(cfg: DeskConfig, phantoms: list[Phantom] | None = None,
                     checkpoint_path=None, on_record=None) -> tuple[ModelSpec, TrainResult, list[Phantom]]:
    phantoms = phantoms if phantoms is not None else make_dataset(cfg.phantom)
    spec = cfg.model()
    data = [(phantoms[i].image, phantoms[i].labels) for i in cfg.train_indices]
    res = train(spec, data, cfg.sampler(), cfg.train_config(), on_record=on_record,
                checkpoint_path=checkpoint_path)
    return spec, res, phantoms


def segment_phantom(cfg: DeskConfig, spec: ModelSpec, params: Params, phantom: Phantom,
                    n: int | None = None, seed: int = 1) -> tuple[LabelVolume, float]:
    """Segment one phantom; returns (labels, wall-clock seconds)."""
    n = cfg.subvolumes if n is None else n
    t0 = time.perf_counter()
    plan = plan_inference(phantom.image.dims, cfg.side, n, seed=seed, sigma=cfg.sigma)
    labels = segment_with_model(spec, params, phantom.image, plan)
    return labels, time.perf_counter() - t0


def held_out_reports(cfg: DeskConfig, spec: ModelSpec, params: Params, phantoms: list[Phantom],
                     n: int | None = None) -> list[SegmentationReport]:
    """Reports against the clean labels of each held-out phantom."""
    return [evaluate(segment_phantom(cfg, spec, params, phantoms[i], n)[0], phantoms[i].clean)
            for i in cfg.test_indices]
