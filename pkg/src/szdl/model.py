"""The SE-VGG-11BN volumetric classifier.

Five convolution blocks over a 2x down-sampled input, each convolution
followed by batch normalization, a squeeze-and-excitation gate and ReLU.
Blocks 1 and 2 hold one conv each, blocks 3-5 hold two; blocks 1-4 end in
2x2x2 max-pooling while block 5 keeps its spatial extent so the final
feature maps stay large enough for class-activation mapping.  The
classifier is dropout -> dense -> ReLU -> dropout -> dense -> sigmoid ->
dense -> softmax over the flattened feature maps.

The layer stack is built once as a list of :class:`LayerInfo` descriptors
and the forward pass interprets that list, so structural assertions and
execution can never drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import BadInputExtent, IndivisibleSERatio, ShapeMismatch
from .nifti import Volume
from .ops import BNState
from .tensor import Parameter, Tape, Tensor

_POOL_STAGES = 4  # blocks 1-4 halve the extent; block 5 does not


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters of the classifier."""

    input_extent: int = 96
    in_channels: int = 1
    block_channels: tuple[int, ...] = (64, 128, 256, 256, 512, 512, 512, 512)
    se_ratio: int = 16
    classifier_dims: tuple[int, int] = (128, 16)
    dropout_p: float = 0.5
    num_classes: int = 2
    width_scale: float = 1.0
    mid_sigmoid: bool = True       # sigmoid between dense layers 2 and 3, as published
    se_after_relu: bool = False    # ablation: SE after ReLU instead of before
    downsample_mode: str = "mean"  # "mean" (anti-aliasing) or "nearest"

    def scaled_channels(self) -> tuple[int, ...]:
        scaled = []
        for c in self.block_channels:
            v = c * self.width_scale
            if abs(v - round(v)) > 1e-9 or round(v) < 1:
                raise ValueError(f"width_scale {self.width_scale} does not scale {c} "
                                 "to a positive integer")
            scaled.append(int(round(v)))
        return tuple(scaled)

    def validate(self) -> None:
        if len(self.block_channels) != 8:
            raise ValueError("block_channels must list all 8 convolution widths")
        if self.input_extent % (2 ** _POOL_STAGES) != 0 or self.input_extent <= 0:
            raise BadInputExtent(
                f"input_extent {self.input_extent} must be a positive multiple of "
                f"{2 ** _POOL_STAGES} (four pooling stages)")
        for c in self.scaled_channels():
            if c % self.se_ratio != 0:
                raise IndivisibleSERatio(
                    f"se_ratio {self.se_ratio} does not divide channel width {c}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return {
            "input_extent": self.input_extent,
            "in_channels": self.in_channels,
            "block_channels": list(self.block_channels),
            "se_ratio": self.se_ratio,
            "classifier_dims": list(self.classifier_dims),
            "dropout_p": self.dropout_p,
            "num_classes": self.num_classes,
            "width_scale": self.width_scale,
            "mid_sigmoid": self.mid_sigmoid,
            "se_after_relu": self.se_after_relu,
            "downsample_mode": self.downsample_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        allowed = set(cls().to_dict())
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("block_channels", "classifier_dims"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class LayerInfo:
    kind: str                 # downsample|conv|bn|se|relu|pool|flatten|dropout|dense|sigmoid|softmax
    name: str
    in_channels: int = 0
    out_channels: int = 0


@dataclass
class ForwardResult:
    probs: Tensor
    logits: Tensor
    features: Tensor  # activations of the last convolution block


class Model:
    """Layer stack, named parameters and batch-norm running statistics."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.bn_states: dict[str, BNState] = {}
        self.layers: list[LayerInfo] = []
        self.block_extents: list[int] = []
        self.feature_layer: str = ""

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def layer_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for layer in self.layers:
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
        return counts

    def snapshot(self) -> dict:
        """Deep copy of everything a best-epoch checkpoint must restore."""
        return {
            "params": {k: p.data.copy() for k, p in self.params.items()},
            "bn": {k: s.copy() for k, s in self.bn_states.items()},
        }

    def restore(self, snap: dict) -> None:
        for k, data in snap["params"].items():
            self.params[k].data = data.copy()
        for k, s in snap["bn"].items():
            self.bn_states[k] = s.copy()

    # -- execution -----------------------------------------------------

    def apply(self, x: Tensor, mode: str = "eval", tape: Optional[Tape] = None,
              rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Run the full stack; returns probabilities, logits and feature maps."""
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        extent = self.config.input_extent
        if x.data.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected [N, {self.config.in_channels}, D, H, W] input, "
                                f"got {x.shape}")
        spatial = x.shape[2:]
        if spatial == (2 * extent,) * 3:
            needs_downsample = True
        elif spatial == (extent,) * 3:
            needs_downsample = False
        else:
            raise ShapeMismatch(f"input extent {spatial} matches neither {extent} "
                                f"nor {2 * extent}")

        cur = x
        features = logits = probs = None
        for layer in self.layers:
            kind = layer.kind
            if kind == "downsample":
                if needs_downsample:
                    cur = ops.downsample2x(cur, mode=self.config.downsample_mode, tape=tape)
            elif kind == "conv":
                cur = ops.conv3d(cur, self.params[layer.name + ".weight"],
                                 self.params[layer.name + ".bias"], tape=tape)
            elif kind == "bn":
                cur = ops.batchnorm3d(cur, self.params[layer.name + ".gamma"],
                                      self.params[layer.name + ".beta"], mode,
                                      self.bn_states[layer.name], tape=tape)
            elif kind == "se":
                cur = se_block(cur, self._se_params(layer.name), self.config.se_ratio,
                               tape=tape)
            elif kind == "relu":
                cur = ops.relu(cur, tape=tape)
                if layer.name == self.feature_layer:
                    features = cur
            elif kind == "pool":
                cur, _ = ops.maxpool3d(cur, tape=tape)
            elif kind == "flatten":
                cur = ops.reshape(cur, (cur.shape[0], -1), tape=tape)
            elif kind == "dropout":
                cur = ops.dropout(cur, self.config.dropout_p, mode, rng=rng, tape=tape)
            elif kind == "dense":
                cur = ops.dense(cur, self.params[layer.name + ".weight"],
                                self.params[layer.name + ".bias"], tape=tape)
                if layer.name == "classifier.fc3":
                    logits = cur
            elif kind == "sigmoid":
                cur = ops.sigmoid(cur, tape=tape)
            elif kind == "softmax":
                probs = ops.softmax(cur, tape=tape)
                cur = probs
            else:  # pragma: no cover
                raise AssertionError(f"unhandled layer kind {kind}")
        return ForwardResult(probs=probs, logits=logits, features=features)

    def forward(self, x: Tensor, mode: str = "eval", tape: Optional[Tape] = None,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Class probabilities [N, 2]; rows sum to one."""
        return self.apply(x, mode=mode, tape=tape, rng=rng).probs

    def _se_params(self, name: str) -> "SEParams":
        return SEParams(self.params[name + ".fc1.weight"], self.params[name + ".fc1.bias"],
                        self.params[name + ".fc2.weight"], self.params[name + ".fc2.bias"])


@dataclass
class SEParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def se_block(x: Tensor, params: SEParams, ratio: int, tape: Optional[Tape] = None) -> Tensor:
    """Squeeze-and-excitation: pool to [N,C], bottleneck C/ratio, sigmoid gate.

    output(n, c, .) = gate(n, c) * x(n, c, .) with gate in (0, 1).
    """
    c = x.shape[1]
    if c % ratio != 0:
        raise IndivisibleSERatio(f"ratio {ratio} does not divide {c} channels")
    squeezed = ops.global_avg_pool(x, tape=tape)
    hidden = ops.relu(ops.dense(squeezed, params.w1, params.b1, tape=tape), tape=tape)
    gate = ops.sigmoid(ops.dense(hidden, params.w2, params.b2, tape=tape), tape=tape)
    return ops.channel_scale(x, gate, tape=tape)


# ---------------------------------------------------------------------------
# construction


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize the full layer stack from one seed.

    Conv and dense weights (SE bottlenecks included) draw from a fan-in
    scaled uniform distribution; batch-norm starts at gamma 1 / beta 0 with
    running mean 0 / variance 1.
    """
    config.validate()
    model = Model(config, dtype=dtype)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0]))
    dt = model.dtype

    def add_conv(name, cin, cout):
        fan_in = cin * 27
        model.params[name + ".weight"] = Parameter(
            name + ".weight", _fan_in_uniform(rng, (cout, cin, 3, 3, 3), fan_in, dt))
        model.params[name + ".bias"] = Parameter(
            name + ".bias", _fan_in_uniform(rng, (cout,), fan_in, dt))
        model.layers.append(LayerInfo("conv", name, cin, cout))

    def add_bn(name, c):
        model.params[name + ".gamma"] = Parameter(name + ".gamma", np.ones(c, dtype=dt))
        model.params[name + ".beta"] = Parameter(name + ".beta", np.zeros(c, dtype=dt))
        model.bn_states[name] = BNState(np.zeros(c, dtype=dt), np.ones(c, dtype=dt))
        model.layers.append(LayerInfo("bn", name, c, c))

    def add_se(name, c):
        hidden = c // config.se_ratio
        model.params[name + ".fc1.weight"] = Parameter(
            name + ".fc1.weight", _fan_in_uniform(rng, (c, hidden), c, dt))
        model.params[name + ".fc1.bias"] = Parameter(
            name + ".fc1.bias", _fan_in_uniform(rng, (hidden,), c, dt))
        model.params[name + ".fc2.weight"] = Parameter(
            name + ".fc2.weight", _fan_in_uniform(rng, (hidden, c), hidden, dt))
        model.params[name + ".fc2.bias"] = Parameter(
            name + ".fc2.bias", _fan_in_uniform(rng, (c,), hidden, dt))
        model.layers.append(LayerInfo("se", name, c, c))

    def add_dense(name, fin, fout):
        model.params[name + ".weight"] = Parameter(
            name + ".weight", _fan_in_uniform(rng, (fin, fout), fin, dt))
        model.params[name + ".bias"] = Parameter(
            name + ".bias", _fan_in_uniform(rng, (fout,), fin, dt))
        model.layers.append(LayerInfo("dense", name, fin, fout))

    def add_conv_unit(block, idx, cin, cout):
        prefix = f"block{block}"
        add_conv(f"{prefix}.conv{idx}", cin, cout)
        add_bn(f"{prefix}.bn{idx}", cout)
        if config.se_after_relu:
            model.layers.append(LayerInfo("relu", f"{prefix}.relu{idx}", cout, cout))
            add_se(f"{prefix}.se{idx}", cout)
        else:
            add_se(f"{prefix}.se{idx}", cout)
            model.layers.append(LayerInfo("relu", f"{prefix}.relu{idx}", cout, cout))

    channels = config.scaled_channels()
    model.layers.append(LayerInfo("downsample", "downsample"))

    extent = config.input_extent
    cin = config.in_channels
    conv_idx = 0
    for block, n_convs in enumerate((1, 1, 2, 2, 2), start=1):
        for idx in range(1, n_convs + 1):
            cout = channels[conv_idx]
            add_conv_unit(block, idx, cin, cout)
            cin = cout
            conv_idx += 1
        if block < 5:
            model.layers.append(LayerInfo("pool", f"block{block}.pool"))
            extent //= 2
        model.block_extents.append(extent)
    model.feature_layer = "block5.relu2"

    flat = channels[-1] * extent ** 3
    h1, h2 = config.classifier_dims
    model.layers.append(LayerInfo("flatten", "classifier.flatten", channels[-1], flat))
    model.layers.append(LayerInfo("dropout", "classifier.drop1"))
    add_dense("classifier.fc1", flat, h1)
    model.layers.append(LayerInfo("relu", "classifier.relu1", h1, h1))
    model.layers.append(LayerInfo("dropout", "classifier.drop2"))
    add_dense("classifier.fc2", h1, h2)
    if config.mid_sigmoid:
        model.layers.append(LayerInfo("sigmoid", "classifier.sigmoid", h2, h2))
    add_dense("classifier.fc3", h2, config.num_classes)
    model.layers.append(LayerInfo("softmax", "classifier.softmax"))
    return model


def parameter_count(model: Model) -> int:
    return sum(p.data.size for p in model.params.values())


def predict_likelihood(model: Model, volume: Volume) -> float:
    """Eval-mode softmax probability of the schizophrenia class for one scan."""
    extent = model.config.input_extent
    if volume.extents not in ((extent,) * 3, (2 * extent,) * 3):
        raise ShapeMismatch(f"volume extents {volume.extents} match neither "
                            f"{extent}^3 nor {2 * extent}^3")
    x = Tensor(volume.data[None, None].astype(model.dtype))
    probs = model.forward(x, mode="eval")
    return float(probs.data[0, 1])
