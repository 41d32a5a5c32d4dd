"""Builders for small CIFAR-style residual networks with group normalization.

A model is a flat, ordered list of named layers (``ModelSpec``) plus a map
from (layer name, tensor role) to its parameter tensor (``ParamSet``).
Shortcut convolutions of downsampling blocks live in the layer list too but
are flagged off-path: the executor applies them only when the owning
residual-add layer references them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

CONV_ROLES = ("kernel",)
NORM_ROLES = ("gamma", "beta")
FC_ROLES = ("weight", "bias")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | group_norm | relu | pool | fc | residual_add
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    channels: int = 0
    groups: int = 0
    in_features: int = 0
    out_features: int = 0
    source: str = ""  # residual_add: layer whose output joins the main path
    shortcut_conv: str = ""
    shortcut_norm: str = ""
    off_path: bool = False


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in model '{self.name}'")
        self._by_name = {l.name: l for l in self.layers}

    def layer(self, name: str) -> LayerSpec:
        return self._by_name[name]


class ParamSet:
    """Ordered map from (layer name, role) to its tensor."""

    def __init__(self):
        self._tensors: dict[tuple[str, str], Tensor] = {}

    def __setitem__(self, key: tuple[str, str], value: Tensor) -> None:
        self._tensors[key] = value

    def __getitem__(self, key: tuple[str, str]) -> Tensor:
        return self._tensors[key]

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def keys(self):
        return self._tensors.keys()

    @staticmethod
    def flat_name(key: tuple[str, str]) -> str:
        return f"{key[0]}.{key[1]}"


def count_parameters(params: ParamSet, which: str = "all") -> int:
    """Total element count over the selected tensors ('all' or 'trainable')."""
    if which not in ("all", "trainable"):
        raise ConfigError(f"unknown parameter filter '{which}'")
    total = 0
    for _, t in params.items():
        if which == "all" or t.requires_grad:
            total += t.size
    return total


def group_norm_groups_for(channels: int) -> int:
    """Group count used after a conv with the given channel width: 32 when
    the width allows it, the width itself below 32, and otherwise the
    largest divisor not exceeding 32 (the result always divides channels)."""
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    if channels < 32:
        return channels
    for groups in range(32, 0, -1):
        if channels % groups == 0:
            return groups
    return 1


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_params(spec: ModelSpec, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for layer in spec.layers:
        if layer.kind == "conv":
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            params[(layer.name, "kernel")] = Tensor(
                _kaiming_uniform(rng, shape, fan_in), requires_grad=True
            )
        elif layer.kind == "group_norm":
            params[(layer.name, "gamma")] = Tensor(
                np.ones(layer.channels, np.float32), requires_grad=True
            )
            params[(layer.name, "beta")] = Tensor(
                np.zeros(layer.channels, np.float32), requires_grad=True
            )
        elif layer.kind == "fc":
            params[(layer.name, "weight")] = Tensor(
                _kaiming_uniform(
                    rng, (layer.in_features, layer.out_features), layer.in_features
                ),
                requires_grad=True,
            )
            params[(layer.name, "bias")] = Tensor(
                np.zeros(layer.out_features, np.float32), requires_grad=True
            )
    return params


def _gn_layer(name: str, channels: int) -> LayerSpec:
    return LayerSpec(
        name, "group_norm", channels=channels, groups=group_norm_groups_for(channels)
    )


def _basic_block(
    prefix: str, source: str, in_ch: int, out_ch: int, stride: int
) -> list[LayerSpec]:
    """conv-gn-relu-conv-gn, joined to `source` (through a 1x1 conv shortcut
    when the block downsamples or widens), then relu."""
    layers = [
        LayerSpec(f"{prefix}_conv1", "conv", in_ch=in_ch, out_ch=out_ch,
                  kernel=3, stride=stride, padding=1),
        _gn_layer(f"{prefix}_norm1", out_ch),
        LayerSpec(f"{prefix}_relu1", "relu"),
        LayerSpec(f"{prefix}_conv2", "conv", in_ch=out_ch, out_ch=out_ch,
                  kernel=3, stride=1, padding=1),
        _gn_layer(f"{prefix}_norm2", out_ch),
    ]
    if stride != 1 or in_ch != out_ch:
        layers.append(
            LayerSpec(f"{prefix}_shortcut_conv", "conv", in_ch=in_ch, out_ch=out_ch,
                      kernel=1, stride=stride, padding=0, off_path=True)
        )
        layers.append(
            replace(_gn_layer(f"{prefix}_shortcut_norm", out_ch), off_path=True)
        )
        layers.append(
            LayerSpec(f"{prefix}_add", "residual_add", source=source,
                      shortcut_conv=f"{prefix}_shortcut_conv",
                      shortcut_norm=f"{prefix}_shortcut_norm")
        )
    else:
        layers.append(LayerSpec(f"{prefix}_add", "residual_add", source=source))
    layers.append(LayerSpec(f"{prefix}_relu2", "relu"))
    return layers


def _build_resnet(
    name: str, stage_channels: tuple[int, ...], blocks_per_stage: int,
    num_classes: int, seed: int,
) -> tuple[ModelSpec, ParamSet]:
    layers = [
        LayerSpec("stem_conv", "conv", in_ch=3, out_ch=stage_channels[0],
                  kernel=3, stride=1, padding=1),
        _gn_layer("stem_norm", stage_channels[0]),
        LayerSpec("stem_relu", "relu"),
    ]
    in_ch = stage_channels[0]
    source = "stem_relu"
    for si, out_ch in enumerate(stage_channels, start=1):
        for bi in range(1, blocks_per_stage + 1):
            stride = 2 if (si > 1 and bi == 1) else 1
            prefix = f"stage{si}_block{bi}"
            layers.extend(_basic_block(prefix, source, in_ch, out_ch, stride))
            source = f"{prefix}_relu2"
            in_ch = out_ch
    layers.append(LayerSpec("pool", "pool"))
    layers.append(LayerSpec("fc", "fc", in_features=in_ch, out_features=num_classes))
    spec = ModelSpec(name, (3, 32, 32), num_classes, layers)
    return spec, _init_params(spec, seed)


def build_resnet8(num_classes: int = 10, seed: int = 0) -> tuple[ModelSpec, ParamSet]:
    """3-stage CIFAR ResNet, one basic block per stage at 64/128/256 channels."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return _build_resnet("resnet8", (64, 128, 256), 1, num_classes, seed)


def build_resnet18(num_classes: int = 10, seed: int = 0) -> tuple[ModelSpec, ParamSet]:
    """4-stage CIFAR ResNet, two basic blocks per stage at 64/128/256/512."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return _build_resnet("resnet18", (64, 128, 256, 512), 2, num_classes, seed)


def build_tiny(
    num_classes: int = 3,
    channels: tuple[int, ...] = (16, 32, 32),
    image_size: int = 16,
    seed: int = 0,
) -> tuple[ModelSpec, ParamSet]:
    """Plain conv stack (no residuals) for desk-scale experiments.

    The first conv keeps resolution; later convs halve it.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if not channels:
        raise ConfigError("tiny model needs at least one conv")
    layers: list[LayerSpec] = []
    in_ch = 3
    for i, out_ch in enumerate(channels, start=1):
        stride = 1 if i == 1 else 2
        layers.append(
            LayerSpec(f"block{i}_conv", "conv", in_ch=in_ch, out_ch=out_ch,
                      kernel=3, stride=stride, padding=1)
        )
        layers.append(_gn_layer(f"block{i}_norm", out_ch))
        layers.append(LayerSpec(f"block{i}_relu", "relu"))
        in_ch = out_ch
    layers.append(LayerSpec("pool", "pool"))
    layers.append(LayerSpec("fc", "fc", in_features=in_ch, out_features=num_classes))
    spec = ModelSpec("tiny", (3, image_size, image_size), num_classes, layers)
    return spec, _init_params(spec, seed)


BUILDERS = {
    "resnet8": build_resnet8,
    "resnet18": build_resnet18,
}


def forward(spec: ModelSpec, params: ParamSet, x, layer_override=None) -> Tensor:
    """Run the model on a [N,C,H,W] batch (array or Tensor) to logits.

    ``layer_override(layer, params, inp)`` may return a Tensor to replace the
    default computation of a conv or fc layer (adapters hook in here), or
    None to fall through.
    """
    cur = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if cur.data.ndim != 4:
        raise ShapeError(f"model input must be 4-D [N,C,H,W], got {cur.shape}")
    outputs: dict[str, Tensor] = {}

    def apply(layer: LayerSpec, inp: Tensor) -> Tensor:
        if layer_override is not None and layer.kind in ("conv", "fc"):
            replaced = layer_override(layer, params, inp)
            if replaced is not None:
                return replaced
        if layer.kind == "conv":
            return T.conv2d(inp, params[(layer.name, "kernel")],
                            stride=layer.stride, padding=layer.padding)
        if layer.kind == "group_norm":
            return T.group_norm(inp, layer.groups,
                                params[(layer.name, "gamma")],
                                params[(layer.name, "beta")])
        if layer.kind == "relu":
            return T.relu(inp)
        if layer.kind == "pool":
            return T.avg_pool(inp)
        if layer.kind == "fc":
            return T.linear(inp, params[(layer.name, "weight")],
                            params[(layer.name, "bias")])
        if layer.kind == "residual_add":
            branch = outputs[layer.source]
            if layer.shortcut_conv:
                branch = apply(spec.layer(layer.shortcut_conv), branch)
                branch = apply(spec.layer(layer.shortcut_norm), branch)
            return T.add(inp, branch)
        raise ConfigError(f"unknown layer kind '{layer.kind}'")

    for layer in spec.layers:
        if layer.off_path:
            continue
        cur = apply(layer, cur)
        outputs[layer.name] = cur
    return cur
