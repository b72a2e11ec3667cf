"""Convolutional feature extractors with batch normalization.

Two desk-scale architectures are provided: TinyConvBN-4 and TinyConvBN-2,
each a stack of conv3x3 + BN + ReLU + 2x2 average pool blocks followed by a
linear layer producing a 64-wide feature vector. The extractor exposes the
activations flowing into (or out of) each BN layer, which both the polytope
attack and the filtering defense consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng, serialize, tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

FEATURE_WIDTH = 64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_ARCH_WIDTHS = {
    "tinyconvbn-4": (16, 32, 64, 64),
    "tinyconvbn-2": (16, 32),
}


@dataclass
class Conv2dLayer:
    weight: Tensor  # OIHW
    stride: int = 1
    padding: int = 1


@dataclass
class BatchNormLayer:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def inference_transform(self, x: Tensor) -> Tensor:
        """Affine map per channel using running statistics."""
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        normalize_scale = Tensor(inv_std)
        normalize_shift = Tensor(-self.running_mean * inv_std)
        xhat = T.affine_scale_shift(x, normalize_scale, normalize_shift)
        return T.affine_scale_shift(xhat, self.scale, self.shift)


@dataclass
class ReLULayer:
    pass


@dataclass
class AvgPoolLayer:
    kernel: int = 2


@dataclass
class FlattenLayer:
    pass


@dataclass
class LinearLayer:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)


@dataclass
class FeatureExtractor:
    arch: str
    in_channels: int
    side: int
    layers: list = field(default_factory=list)
    frozen: bool = False

    @property
    def bn_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNormLayer)]

    @property
    def feature_width(self) -> int:
        return FEATURE_WIDTH

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2dLayer):
                params.append((f"layers.{i}.conv.weight", layer.weight))
            elif isinstance(layer, BatchNormLayer):
                params.append((f"layers.{i}.bn.scale", layer.scale))
                params.append((f"layers.{i}.bn.shift", layer.shift))
            elif isinstance(layer, LinearLayer):
                params.append((f"layers.{i}.linear.weight", layer.weight))
                params.append((f"layers.{i}.linear.bias", layer.bias))
        return params

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.parameters():
            p.requires_grad = flag
            p._needs_grad = flag

    def freeze(self) -> None:
        self.frozen = True
        self.set_requires_grad(False)

    def forward(self, x: Tensor, train: bool = False, capture: str | None = None):
        """Run the extractor; returns features, or (features, bn_activations).

        capture="input" records the tensor flowing into each BN layer,
        capture="output" the tensor flowing out; order follows bn_indices.
        """
        if train and self.frozen:
            raise ContractError("training forward on a frozen extractor")
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"extractor expects (N, {self.in_channels}, H, W) input, got {x.shape}")
        captured: list[Tensor] = []
        h = x
        for layer in self.layers:
            if isinstance(layer, Conv2dLayer):
                h = T.conv2d(h, layer.weight, stride=layer.stride, padding=layer.padding)
            elif isinstance(layer, BatchNormLayer):
                if capture == "input":
                    captured.append(h)
                if train:
                    h, mean, var = T.batch_norm_train(h, layer.scale, layer.shift, layer.eps)
                    layer.running_mean = (1 - layer.momentum) * layer.running_mean + layer.momentum * mean
                    layer.running_var = (1 - layer.momentum) * layer.running_var + layer.momentum * var
                else:
                    h = layer.inference_transform(h)
                if capture == "output":
                    captured.append(h)
            elif isinstance(layer, ReLULayer):
                h = T.relu(h)
            elif isinstance(layer, AvgPoolLayer):
                h = T.avgpool2d(h, layer.kernel)
            elif isinstance(layer, FlattenLayer):
                h = T.flatten(h)
            elif isinstance(layer, LinearLayer):
                h = T.add(T.matmul(h, layer.weight), layer.bias)
        if capture is not None:
            return h, captured
        return h


@dataclass
class DownstreamHead:
    weight: Tensor  # (feature_width, classes)
    bias: Tensor  # (classes,)

    @property
    def classes(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.weight", self.weight), ("head.bias", self.bias)]

    def forward(self, features: Tensor) -> Tensor:
        if features.data.ndim != 2 or features.shape[1] != self.weight.shape[0]:
            raise DimensionError(
                f"head expects (N, {self.weight.shape[0]}) features, got {features.shape}")
        return T.add(T.matmul(features, self.weight), self.bias)


def build_extractor(arch: str, seed: int, in_channels: int = 3, side: int = 16) -> FeatureExtractor:
    """Deterministically initialized extractor; He fan-in conv init, BN at identity."""
    key = arch.lower()
    if key not in _ARCH_WIDTHS:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of "
                          + ", ".join(sorted(_ARCH_WIDTHS)))
    widths = _ARCH_WIDTHS[key]
    if side % (2 ** len(widths)) != 0:
        raise ConfigError(f"{arch} needs side divisible by {2 ** len(widths)}, got {side}")
    model = FeatureExtractor(arch=arch, in_channels=in_channels, side=side)
    gen = rng.stream(seed, "extractor-init", key)
    channels = in_channels
    spatial = side
    for width in widths:
        std = np.sqrt(2.0 / (channels * 9))
        weight = Tensor(gen.normal(0.0, std, size=(width, channels, 3, 3)), requires_grad=True)
        model.layers.append(Conv2dLayer(weight=weight))
        model.layers.append(BatchNormLayer(
            scale=Tensor(np.ones(width), requires_grad=True),
            shift=Tensor(np.zeros(width), requires_grad=True),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
        ))
        model.layers.append(ReLULayer())
        model.layers.append(AvgPoolLayer(kernel=2))
        channels = width
        spatial //= 2
    model.layers.append(FlattenLayer())
    fan_in = channels * spatial * spatial
    std = np.sqrt(2.0 / fan_in)
    model.layers.append(LinearLayer(
        weight=Tensor(gen.normal(0.0, std, size=(fan_in, FEATURE_WIDTH)), requires_grad=True),
        bias=Tensor(np.zeros(FEATURE_WIDTH), requires_grad=True),
    ))
    return model


def build_head(classes: int, seed: int, feature_width: int = FEATURE_WIDTH) -> DownstreamHead:
    gen = rng.stream(seed, "head-init")
    std = np.sqrt(2.0 / feature_width)
    return DownstreamHead(
        weight=Tensor(gen.normal(0.0, std, size=(feature_width, classes)), requires_grad=True),
        bias=Tensor(np.zeros(classes), requires_grad=True),
    )


def _as_batch_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def extract_features(model: FeatureExtractor, x) -> Tensor:
    """Inference-mode feature vectors, one row per batch element."""
    with T.no_grad():
        return model.forward(_as_batch_tensor(x), train=False)


def capture_bn_inputs(model: FeatureExtractor, x, tap: str = "input") -> list[Tensor]:
    """Inference-mode activations at each BN layer, ordered by depth."""
    if tap not in ("input", "output"):
        raise ConfigError(f"bn tap must be 'input' or 'output', got {tap!r}")
    if not model.bn_indices:
        raise ContractError("model has no batch normalization layers")
    with T.no_grad():
        _, captured = model.forward(_as_batch_tensor(x), train=False, capture=tap)
    return captured


def extractor_state(model: FeatureExtractor) -> dict[str, np.ndarray]:
    state = {path: p.data.copy() for path, p in model.parameters()}
    for i in model.bn_indices:
        bn = model.layers[i]
        state[f"layers.{i}.bn.running_mean"] = bn.running_mean.copy()
        state[f"layers.{i}.bn.running_var"] = bn.running_var.copy()
    return state


def load_extractor_state(model: FeatureExtractor, state: dict[str, np.ndarray]) -> None:
    params = dict(model.parameters())
    for path, value in state.items():
        if path.endswith(".running_mean") or path.endswith(".running_var"):
            idx = int(path.split(".")[1])
            bn = model.layers[idx]
            if path.endswith("mean"):
                bn.running_mean = value.copy()
            else:
                bn.running_var = value.copy()
        elif path in params:
            if params[path].shape != value.shape:
                raise DimensionError(f"checkpoint shape mismatch at {path}")
            params[path].data = value.copy()
        else:
            raise ConfigError(f"unknown parameter path {path!r} in checkpoint")


def save_extractor(model: FeatureExtractor, directory: str | Path) -> None:
    serialize.write_checkpoint(directory, extractor_state(model), meta={
        "arch": model.arch,
        "in_channels": str(model.in_channels),
        "side": str(model.side),
        "frozen": str(model.frozen),
    })


def load_extractor(directory: str | Path) -> FeatureExtractor:
    tensors, meta = serialize.read_checkpoint(directory)
    model = build_extractor(meta["arch"], seed=0,
                            in_channels=int(meta.get("in_channels", 3)),
                            side=int(meta.get("side", 16)))
    load_extractor_state(model, tensors)
    if meta.get("frozen", "False") == "True":
        model.freeze()
    return model


def save_head(head: DownstreamHead, directory: str | Path) -> None:
    serialize.write_checkpoint(directory, {path: p.data.copy() for path, p in head.parameters()},
                               meta={"classes": str(head.classes)})


def load_head(directory: str | Path) -> DownstreamHead:
    tensors, meta = serialize.read_checkpoint(directory)
    head = build_head(int(meta["classes"]), seed=0,
                      feature_width=tensors["head.weight"].shape[0])
    head.weight.data = tensors["head.weight"].copy()
    head.bias.data = tensors["head.bias"].copy()
    return head
