"""Mini-batch training: voxel-wise categorical cross-entropy and Adam."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .errors import ClassOutOfRange, InvalidConfig, NonFiniteLoss, ShapeMismatch
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)


# --- data preparation ---------------------------------------------------------

def normalize(vol: Volume, mode: str = "minmax", scale: float = 255.0) -> Volume:
    """Map intensities to the unit interval.

    ``minmax`` rescales each channel by its own min and max (a constant
    channel becomes all zeros); ``constant`` divides by ``scale``.
    """
    data = vol.data.astype(np.float64)
    if mode == "constant":
        return Volume((data / scale).astype(np.float32))
    if mode != "minmax":
        raise InvalidConfig(f"unknown normalization mode {mode!r}")
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        lo, hi = data[c].min(), data[c].max()
        if hi > lo:
            out[c] = (data[c] - lo) / (hi - lo)
    return Volume(out.astype(np.float32))


# --- loss -----------------------------------------------------------------------

def _check_target(shape, target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 3:
        target = target[None]
    if target.shape != (shape[0],) + tuple(shape[2:]):
        raise ShapeMismatch(f"target shape {target.shape} does not match predictions {shape}")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ClassOutOfRange(f"target labels outside [0, {num_classes})")
    return target.astype(np.int64)


def _onehot(target: np.ndarray, n: int) -> np.ndarray:
    return (target[:, None] == np.arange(n).reshape(1, n, 1, 1, 1)).astype(np.float64)


def cross_entropy_loss(probs, target) -> tuple[float, np.ndarray]:
    """Mean voxel cross-entropy of softmax outputs; second value is the gradient w.r.t. the logits."""
    probs = ops._as_batch(probs)
    target = _check_target(probs.shape, target, probs.shape[1])
    p_true = np.take_along_axis(probs, target[:, None], axis=1)
    nvox = target.size
    loss = float(-np.log(p_true).sum() / nvox)
    grad = (probs - _onehot(target, probs.shape[1])) / nvox
    return loss, grad


def softmax_cross_entropy(logits, target) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused softmax + cross-entropy from logits via log-sum-exp.  Returns (loss, grad_logits, probs)."""
    logits = ops._as_batch(logits)
    target = _check_target(logits.shape, target, logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nvox = target.size
    loss = float(-np.take_along_axis(logp, target[:, None], axis=1).sum() / nvox)
    probs = np.exp(logp)
    grad = (probs - _onehot(target, logits.shape[1])) / nvox
    return loss, grad, probs


# --- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One Adam update of every entry of ``params`` (in place; dtypes are kept)."""
    if set(grads) - set(params):
        raise ShapeMismatch(f"gradients for unknown parameters {sorted(set(grads) - set(params))}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        g = np.asarray(g, np.float64)
        if g.shape != np.shape(p):
            raise ShapeMismatch(f"{k}: grad shape {g.shape} != param shape {np.shape(p)}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros(g.shape)
            state.v[k] = np.zeros(g.shape)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[k] = (np.asarray(p, np.float64) - step).astype(np.asarray(p).dtype)
    return params, state


# --- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 64
    batches: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_every: int = 0  # 0 disables validation
    val_subvolumes: int = 8  # sampled subvolumes per validation segmentation
    normalize: str = "minmax"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.batches < 0:
            raise InvalidConfig("batches must be >= 0")
        if self.lr <= 0:
            raise InvalidConfig("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("beta1, beta2 must lie in [0, 1)")


@dataclass
class TrainResult:
    params: "Params"
    history: list[dict]


class JsonlLog:
    """Append-only line-delimited JSON log."""

    def __init__(self, path):
        self.path = path

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")


def train(spec, dataset: Sequence[tuple[Volume, LabelVolume]], sampler_cfg, cfg: TrainConfig,
          params=None, validation: Sequence[tuple[Volume, LabelVolume]] = (),
          on_record: Callable[[dict], None] | None = None, checkpoint_path=None) -> TrainResult:
    """Sample -> extract -> forward -> loss -> backward -> Adam, for ``cfg.batches`` mini-batches.

    Every random choice derives from ``cfg.seed`` (parameter init, volume
    choice, dropout) and ``sampler_cfg.seed`` (subvolume centres, one stream
    per training volume at seed + volume index), so a run is reproducible
    bit for bit.
    """
    from .checkpoint import save_checkpoint
    from .models import backward, forward, init_params
    from .sampler import CenterSampler, plan_inference
    from .stitcher import segment_with_model
    from .metrics import evaluate

    if not dataset:
        raise InvalidConfig("training needs at least one volume")
    params = init_params(spec, cfg.seed) if params is None else params.copy()
    vols = [normalize(v, cfg.normalize).data for v, _ in dataset]
    labs = [l.labels for _, l in dataset]
    samplers = [CenterSampler(sampler_cfg.for_worker(i), v.dims) for i, (v, _) in enumerate(dataset)]
    pick_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []

    for step in range(cfg.batches):
        which = pick_rng.integers(len(dataset), size=cfg.batch_size)
        xs, ys = [], []
        for i in which:
            ref = samplers[i].draw(1)[0]
            xs.append(vols[i][(slice(None),) + ref.slices])
            ys.append(labs[i][ref.slices])
        x = np.stack(xs).astype(np.float64)
        y = np.stack(ys)
        _, logits, tape = forward(spec, params, x, train=True, rng=drop_rng)
        loss, grad, _ = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at batch {step}; logits range "
                                f"[{logits.min():.3g}, {logits.max():.3g}]")
        grads = backward(spec, params, tape, grad)
        adam_step(params.weights, grads, adam)
        record = {"batch": step, "loss": loss}
        if validation and cfg.val_every and (step + 1) % cfg.val_every == 0:
            dices = []
            for vol, lab in validation:
                plan = plan_inference(vol.dims, sampler_cfg.side, cfg.val_subvolumes, seed=cfg.seed,
                                      sigma=sampler_cfg.sigma, mean=sampler_cfg.mean)
                pred = segment_with_model(spec, params, vol, plan, normalize_mode=cfg.normalize)
                dices.append([d if d is not None else float("nan") for d in evaluate(pred, lab).dice().values()])
            record["val_dice"] = [float(v) for v in np.nanmean(np.array(dices), axis=0)]
        history.append(record)
        if on_record is not None:
            on_record(record)
        log.debug("batch %d loss %.5f", step, loss)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, spec, params, seed=cfg.seed,
                        extra={"train": asdict(cfg), "sampler": asdict(sampler_cfg)})
    return TrainResult(params, history)
