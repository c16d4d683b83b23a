"""Declarative MeshNet / U-Net descriptions and their forward/backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import InvalidConfig, InvalidVariant, NonDivisibleDims, ShapeMismatch

# (padding, dilation) of the seven 3^3 layers; the classifier is always 1^3, pad 0, dil 1.
MESHNET_SCHEDULES = {
    64: (1, 1, 1, 2, 4, 8, 1),
    68: (1, 1, 2, 4, 8, 16, 1),
    # width-reduced desk variant, receptive field 31 for 32^3 subvolumes
    32: (1, 1, 2, 4, 4, 2, 1),
}
MESHNET_FEATURES = 21
UNET_BASE = 32


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool | upsample | concat
    name: str
    in_channels: int
    out_channels: int
    extent: tuple[int, int, int] = (1, 1, 1)
    dilation: int = 1
    padding: tuple[int, int, int] = (0, 0, 0)
    activation: str = "none"  # relu | tanh | none
    batchnorm: bool = False
    dropout_p: float = 0.0
    skip_from: str | None = None  # concat only: layer whose output is appended

    @property
    def conv_config(self) -> ops.ConvConfig:
        return ops.ConvConfig(self.dilation, self.padding)

    @property
    def kernel_volume(self) -> int:
        return int(np.prod(self.extent))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    in_channels: int
    num_classes: int
    side: int | None = None  # subvolume side A the model is meant for
    preserve_dims: bool = False

    def __post_init__(self):
        outputs = {}
        channels = self.in_channels
        for layer in self.layers:
            if layer.in_channels != channels:
                raise InvalidConfig(f"{layer.name}: expects {layer.in_channels} channels, receives {channels}")
            if layer.kind == "conv":
                if any(k % 2 == 0 for k in layer.extent) or layer.dilation < 1:
                    raise InvalidConfig(f"{layer.name}: bad extent/dilation")
                if not 0.0 <= layer.dropout_p < 1.0:
                    raise InvalidConfig(f"{layer.name}: dropout_p must be in [0, 1)")
            elif layer.kind == "concat":
                if layer.skip_from not in outputs:
                    raise InvalidConfig(f"{layer.name}: unknown skip source {layer.skip_from!r}")
                if layer.out_channels != channels + outputs[layer.skip_from]:
                    raise InvalidConfig(f"{layer.name}: concat channel count mismatch")
            elif layer.kind in ("maxpool", "upsample"):
                if layer.out_channels != channels:
                    raise InvalidConfig(f"{layer.name}: {layer.kind} cannot change channels")
            else:
                raise InvalidConfig(f"{layer.name}: unknown layer kind {layer.kind!r}")
            channels = layer.out_channels
            outputs[layer.name] = channels
        if channels != self.num_classes:
            raise InvalidConfig(f"final layer emits {channels} channels, expected {self.num_classes}")

    @property
    def skips(self) -> dict[str, str]:
        """Map concat layer -> source layer."""
        return {l.name: l.skip_from for l in self.layers if l.kind == "concat"}

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]


def _conv(name, cin, cout, k, dil=1, pad=0, **kw) -> LayerSpec:
    return LayerSpec("conv", name, cin, cout, (k, k, k), dil, (pad, pad, pad), **kw)


def build_meshnet(side_variant: int, in_channels: int = 1, num_classes: int = 3,
                  dropout_p: float = 0.0, features: int = MESHNET_FEATURES,
                  dilations=None) -> ModelSpec:
    if dilations is None:
        if side_variant not in MESHNET_SCHEDULES:
            raise InvalidVariant(f"no MeshNet schedule for side {side_variant}; known: {sorted(MESHNET_SCHEDULES)}")
        dilations = MESHNET_SCHEDULES[side_variant]
    if in_channels < 1 or num_classes < 2:
        raise InvalidConfig("MeshNet needs M >= 1 and N >= 2")
    layers = []
    cin = in_channels
    for i, dil in enumerate(dilations, start=1):
        layers.append(_conv(f"conv{i}", cin, features, 3, dil, dil, activation="relu",
                            batchnorm=True, dropout_p=dropout_p))
        cin = features
    layers.append(_conv(f"conv{len(dilations) + 1}", cin, num_classes, 1))
    return ModelSpec(f"meshnet-{side_variant}", tuple(layers), in_channels, num_classes,
                     side=side_variant, preserve_dims=True)


def build_unet(in_channels: int = 1, num_classes: int = 3, base: int = UNET_BASE) -> ModelSpec:
    """Ten-block U-Net: one 3^3 conv per block, concatenating skips."""
    if in_channels < 1 or num_classes < 2:
        raise InvalidConfig("U-Net needs M >= 1 and N >= 2")
    widths = [base * 2**i for i in range(5)]
    layers = []
    cin = in_channels
    for i, w in enumerate(widths, start=1):
        layers.append(_conv(f"block{i}", cin, w, 3, 1, 1, activation="relu"))
        cin = w
        if i < 5:
            layers.append(LayerSpec("maxpool", f"pool{i}", w, w))
    for block, skip in zip(range(6, 10), range(4, 0, -1)):
        layers.append(LayerSpec("upsample", f"up{block}", cin, cin))
        cat = cin + widths[skip - 1]
        layers.append(LayerSpec("concat", f"cat{block}", cin, cat, skip_from=f"block{skip}"))
        act = "tanh" if block == 9 else "relu"
        layers.append(_conv(f"block{block}", cat, widths[skip - 1], 3, 1, 1, activation=act))
        cin = widths[skip - 1]
    layers.append(_conv("block10", cin, num_classes, 1))
    return ModelSpec("unet", tuple(layers), in_channels, num_classes, side=64)


def build_model(name: str, in_channels: int = 1, num_classes: int = 3, dropout_p: float = 0.0,
                features: int | None = None) -> ModelSpec:
    """Builder keyed by name tag: meshnet-64, meshnet-68, meshnet-32 or unet."""
    if name == "unet":
        return build_unet(in_channels, num_classes, features or UNET_BASE)
    if name.startswith("meshnet-"):
        try:
            side = int(name.split("-", 1)[1])
        except ValueError:
            raise InvalidVariant(f"unknown model variant {name!r}") from None
        return build_meshnet(side, in_channels, num_classes, dropout_p, features or MESHNET_FEATURES)
    raise InvalidVariant(f"unknown model variant {name!r}")


def parameter_count(spec: ModelSpec) -> int:
    n = 0
    for l in spec.conv_layers:
        n += l.kernel_volume * l.in_channels * l.out_channels + l.out_channels
        if l.batchnorm:
            n += 2 * l.out_channels
    return n


def receptive_field(spec: ModelSpec) -> tuple[int, int, int]:
    """Per-axis receptive field, returned as (rx, ry, rz).

    Exact for a plain conv chain (1 + sum of l*(k-1)); for networks with
    pooling it follows the main path only and so is a lower bound.
    """
    rf = np.ones(3)  # z, y, x
    jump = 1.0
    for l in spec.layers:
        if l.kind == "conv":
            rf += l.dilation * (np.array(l.extent) - 1) * jump
        elif l.kind == "maxpool":
            rf += jump
            jump *= 2
        elif l.kind == "upsample":
            jump /= 2
    rz, ry, rx = (int(v) for v in rf)
    return rx, ry, rz


def layer_table(spec: ModelSpec) -> str:
    rows = [("Layer", "Kernel", "Input", "Output", "Pad", "Dil")]
    for i, l in enumerate(spec.conv_layers, start=1):
        k = "x".join(str(e) for e in l.extent)
        pad = l.padding[0] if len(set(l.padding)) == 1 else "x".join(map(str, l.padding))
        rows.append((str(i), k, str(l.in_channels), str(l.out_channels), str(pad), str(l.dilation)))
    widths = [max(len(r[c]) for r in rows) for c in range(6)]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows)


# --- parameters ---------------------------------------------------------------

@dataclass
class Params:
    """Trainable tensors plus batch-norm running statistics, all float32."""

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.weights.items()},
                      {k: v.copy() for k, v in self.buffers.items()})

    def bn_state(self, name: str) -> ops.BatchNormState:
        return ops.BatchNormState(self.weights[f"{name}.gamma"], self.weights[f"{name}.beta"],
                                  self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"])


def param_shapes(spec: ModelSpec) -> tuple[dict[str, tuple], dict[str, tuple]]:
    weights, buffers = {}, {}
    for l in spec.conv_layers:
        weights[f"{l.name}.weight"] = (l.out_channels, l.in_channels) + tuple(l.extent)
        weights[f"{l.name}.bias"] = (l.out_channels,)
        if l.batchnorm:
            weights[f"{l.name}.gamma"] = (l.out_channels,)
            weights[f"{l.name}.beta"] = (l.out_channels,)
            buffers[f"{l.name}.running_mean"] = (l.out_channels,)
            buffers[f"{l.name}.running_var"] = (l.out_channels,)
    return weights, buffers


def init_params(spec: ModelSpec, seed: int) -> Params:
    """He-style uniform fan-in init for conv weights; zero biases; gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    weights, buffers = {}, {}
    for l in spec.conv_layers:
        fan_in = l.in_channels * l.kernel_volume
        bound = np.sqrt(6.0 / fan_in)
        shape = (l.out_channels, l.in_channels) + tuple(l.extent)
        weights[f"{l.name}.weight"] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        weights[f"{l.name}.bias"] = np.zeros(l.out_channels, np.float32)
        if l.batchnorm:
            weights[f"{l.name}.gamma"] = np.ones(l.out_channels, np.float32)
            weights[f"{l.name}.beta"] = np.zeros(l.out_channels, np.float32)
            buffers[f"{l.name}.running_mean"] = np.zeros(l.out_channels, np.float32)
            buffers[f"{l.name}.running_var"] = np.ones(l.out_channels, np.float32)
    return Params(weights, buffers)


def check_params(spec: ModelSpec, params: Params) -> None:
    wshapes, bshapes = param_shapes(spec)
    for store, shapes in ((params.weights, wshapes), (params.buffers, bshapes)):
        if set(store) != set(shapes):
            raise ShapeMismatch(f"parameter names {sorted(store)} do not match spec {sorted(shapes)}")
        for k, shape in shapes.items():
            if store[k].shape != shape:
                raise ShapeMismatch(f"{k}: shape {store[k].shape}, spec wants {shape}")


# --- forward / backward -------------------------------------------------------

@dataclass
class Tape:
    """Intermediate values recorded by a forward pass, consumed by backward."""

    entries: list = field(default_factory=list)
    probs: np.ndarray | None = None


def forward(spec: ModelSpec, params: Params, x, train: bool = False,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, Tape]:
    """Run the network on a batch (B, M, D, H, W).

    Returns (probs, logits, tape).  In train mode batch-norm uses batch
    statistics and updates the running buffers in ``params``; dropout draws
    from ``rng``.  Eval mode is a pure function of its inputs.
    """
    h = ops._as_batch(x)
    if h.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input has {h.shape[1]} channels, model expects {spec.in_channels}")
    tape = Tape()
    outputs = {}
    for l in spec.layers:
        if l.kind == "conv":
            w, b = params.weights[f"{l.name}.weight"], params.weights[f"{l.name}.bias"]
            z = ops.conv3d_forward(h, w, b, l.conv_config)
            if spec.preserve_dims and z.shape[2:] != h.shape[2:]:
                raise ShapeMismatch(f"{l.name}: spatial dims {h.shape[2:]} -> {z.shape[2:]} not preserved")
            entry = {"input": h}
            if l.batchnorm:
                z, entry["bn"] = ops.batchnorm_forward(z, params.bn_state(l.name), train)
            if l.activation == "relu":
                entry["pre_act"] = z
                z = ops.relu_forward(z)
            elif l.activation == "tanh":
                z = ops.tanh_forward(z)
                entry["post_act"] = z
            z, entry["mask"] = ops.dropout_forward(z, l.dropout_p, train, rng)
            h = z
        elif l.kind == "maxpool":
            h, arg = ops.maxpool3d_forward(h)
            entry = {"argmax": arg}
        elif l.kind == "upsample":
            h = ops.upsample3d_forward(h)
            entry = {}
        else:  # concat
            skip = outputs[l.skip_from]
            if skip.shape[2:] != h.shape[2:]:
                raise ShapeMismatch(f"{l.name}: skip dims {skip.shape[2:]} != {h.shape[2:]}")
            entry = {"split": h.shape[1]}
            h = np.concatenate([h, skip], axis=1)
        outputs[l.name] = h
        tape.entries.append(entry)
    logits = h
    probs = ops.softmax_forward(logits)
    tape.probs = probs
    return probs, logits, tape


def backward(spec: ModelSpec, params: Params, tape: Tape, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Back-propagate a gradient w.r.t. the pre-softmax logits; returns float64 grads per weight."""
    grads = {}
    pending: dict[str, np.ndarray] = {}
    g = np.asarray(grad_logits, np.float64)
    for idx in range(len(spec.layers) - 1, -1, -1):
        l, entry = spec.layers[idx], tape.entries[idx]
        if l.name in pending:
            g = g + pending.pop(l.name)
        if l.kind == "conv":
            g = ops.dropout_backward(g, entry["mask"])
            if l.activation == "relu":
                g = ops.relu_backward(g, entry["pre_act"])
            elif l.activation == "tanh":
                g = ops.tanh_backward(g, entry["post_act"])
            if l.batchnorm:
                g, grads[f"{l.name}.gamma"], grads[f"{l.name}.beta"] = ops.batchnorm_backward(g, entry["bn"])
            g, grads[f"{l.name}.weight"], grads[f"{l.name}.bias"] = ops.conv3d_backward(
                g, entry["input"], params.weights[f"{l.name}.weight"], l.conv_config,
                need_input_grad=idx > 0)
        elif l.kind == "maxpool":
            g = ops.maxpool3d_backward(g, entry["argmax"])
        elif l.kind == "upsample":
            g = ops.upsample3d_backward(g)
        else:
            split = entry["split"]
            skip_grad = g[:, split:]
            pending[l.skip_from] = pending.get(l.skip_from, 0) + skip_grad
            g = g[:, :split]
    return grads


def predict(spec: ModelSpec, params: Params, x) -> np.ndarray:
    """Eval-mode class probabilities."""
    return forward(spec, params, x, train=False)[0]


def required_divisor(spec: ModelSpec) -> int:
    return 2 ** sum(1 for l in spec.layers if l.kind == "maxpool")


def check_input_dims(spec: ModelSpec, dims) -> None:
    div = required_divisor(spec)
    if any(d % div for d in dims):
        raise NonDivisibleDims(f"{spec.name} needs dims divisible by {div}, got {tuple(dims)}")
