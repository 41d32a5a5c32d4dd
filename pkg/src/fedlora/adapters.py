"""Low-rank adapters for convolution (and optionally FC) layers.

An adapter adds a rank-r bottleneck branch next to a frozen base weight:
for a conv with kernel [O,I,k,k] the branch is a k x k conv to r channels
(`b`, zero-initialized) followed by a 1x1 conv back to O channels (`a`,
randomly initialized), scaled by alpha/r. Because `b` starts at zero, an
adapted model computes exactly what the base model computes until training
moves the adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

VARIANTS = ("vanilla", "plus_norm", "plus_norm_plus_final_fc")


@dataclass(frozen=True)
class FreezePolicy:
    """Which layers train directly and which get adapters.

    - vanilla: everything frozen; adapters on every conv and on the final FC.
    - plus_norm: vanilla, plus trainable group-norm gamma/beta.
    - plus_norm_plus_final_fc: norm layers and the final FC train directly;
      adapters only on convs.

    ``adapt_overrides`` may switch individual conv adapters off (or back on)
    by layer name.
    """

    variant: str = "plus_norm_plus_final_fc"
    adapt_overrides: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown freeze variant '{self.variant}'; expected one of {VARIANTS}"
            )

    @property
    def norm_trainable(self) -> bool:
        return self.variant in ("plus_norm", "plus_norm_plus_final_fc")

    @property
    def fc_trainable(self) -> bool:
        return self.variant == "plus_norm_plus_final_fc"

    @property
    def fc_adapted(self) -> bool:
        return self.variant in ("vanilla", "plus_norm")


@dataclass
class AdapterPair:
    """The (b, a) low-rank factor pair attached to one layer.

    For a conv target, b is [r,I,k,k] and a is [O,r,1,1]; for an FC target,
    b is [in,r] and a is [r,out]. The branch output is scaled by exactly
    alpha/rank.
    """

    layer: str
    kind: str  # "conv" | "fc"
    b: Tensor
    a: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if self.kind == "conv":
            if self.b.data.ndim != 4 or self.a.data.ndim != 4:
                raise ShapeError("conv adapter factors must be 4-D")
            if self.b.shape[0] != self.rank or self.a.shape[1] != self.rank:
                raise ShapeError(
                    f"adapter factor shapes {self.b.shape}/{self.a.shape} "
                    f"inconsistent with rank {self.rank}"
                )
        elif self.kind == "fc":
            if self.b.shape[1] != self.rank or self.a.shape[0] != self.rank:
                raise ShapeError(
                    f"fc adapter factor shapes {self.b.shape}/{self.a.shape} "
                    f"inconsistent with rank {self.rank}"
                )
        else:
            raise ConfigError(f"unknown adapter kind '{self.kind}'")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class AdaptedModel:
    spec: M.ModelSpec
    params: M.ParamSet
    adapters: dict[str, AdapterPair]
    policy: FreezePolicy

    def forward(self, x) -> Tensor:
        return M.forward(self.spec, self.params, x, layer_override=self._override)

    def _override(self, layer: M.LayerSpec, params: M.ParamSet, inp: Tensor):
        pair = self.adapters.get(layer.name)
        if pair is None:
            return None
        if layer.kind == "conv":
            return adapter_forward(
                inp, params[(layer.name, "kernel")], pair,
                stride=layer.stride, padding=layer.padding,
            )
        return _fc_adapter_forward(
            inp, params[(layer.name, "weight")], params[(layer.name, "bias")], pair
        )

    def trainable(self) -> list[tuple[str, Tensor]]:
        return trainable_tensors(self)


def attach_adapters(
    spec: M.ModelSpec,
    params: M.ParamSet,
    rank: int,
    alpha: float,
    policy: FreezePolicy | None = None,
    seed: int = 0,
) -> AdaptedModel:
    """Freeze the base parameters and attach zero-initialized adapters.

    Immediately after attaching, the adapted model's forward pass equals the
    base model's bit for bit.
    """
    policy = policy or FreezePolicy()
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    conv_names = {l.name for l in spec.layers if l.kind == "conv"}
    for name in policy.adapt_overrides:
        if name not in conv_names:
            raise ConfigError(f"freeze policy references unknown conv layer '{name}'")

    for (lname, role), t in params.items():
        t.requires_grad = False
    if policy.norm_trainable:
        for (lname, role), t in params.items():
            if role in M.NORM_ROLES:
                t.requires_grad = True
    if policy.fc_trainable:
        for (lname, role), t in params.items():
            if role in M.FC_ROLES:
                t.requires_grad = True

    rng = np.random.default_rng(seed)
    adapters: dict[str, AdapterPair] = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            if not policy.adapt_overrides.get(layer.name, True):
                continue
            b = Tensor(
                np.zeros((rank, layer.in_ch, layer.kernel, layer.kernel), np.float32),
                requires_grad=True,
            )
            fan_in = rank
            bound = math.sqrt(6.0 / fan_in)
            a = Tensor(
                rng.uniform(-bound, bound, size=(layer.out_ch, rank, 1, 1)).astype(np.float32),
                requires_grad=True,
            )
            adapters[layer.name] = AdapterPair(layer.name, "conv", b, a, rank, alpha)
        elif layer.kind == "fc" and policy.fc_adapted:
            b = Tensor(np.zeros((layer.in_features, rank), np.float32), requires_grad=True)
            bound = math.sqrt(6.0 / rank)
            a = Tensor(
                rng.uniform(-bound, bound, size=(rank, layer.out_features)).astype(np.float32),
                requires_grad=True,
            )
            adapters[layer.name] = AdapterPair(layer.name, "fc", b, a, rank, alpha)
    return AdaptedModel(spec, params, adapters, policy)


def adapter_forward(
    x: Tensor, kernel: Tensor, pair: AdapterPair, stride: int = 1, padding: int = 0
) -> Tensor:
    """Frozen conv plus the scaled low-rank branch: conv(x, W) +
    (alpha/r) * conv1x1(conv(x, b), a)."""
    if pair.kind != "conv":
        raise ShapeError("adapter_forward applies to conv adapters")
    base = T.conv2d(x, kernel, stride=stride, padding=padding)
    mid = T.conv2d(x, pair.b, stride=stride, padding=padding)
    branch = T.conv2d(mid, pair.a, stride=1, padding=0)
    return T.add(base, T.scale(branch, pair.scale))


def _fc_adapter_forward(x: Tensor, weight: Tensor, bias: Tensor, pair: AdapterPair) -> Tensor:
    base = T.linear(x, weight, bias)
    zero_mid = Tensor(np.zeros(pair.rank, np.float32))
    mid = T.linear(x, pair.b, zero_mid)
    zero_out = Tensor(np.zeros(pair.a.shape[1], np.float32))
    branch = T.linear(mid, pair.a, zero_out)
    return T.add(base, T.scale(branch, pair.scale))


def merge_adapter(kernel: Tensor, pair: AdapterPair) -> Tensor:
    """Fold the adapter into the base weight: W + (alpha/r) * (a o b)."""
    if pair.kind == "conv":
        if kernel.data.ndim != 4:
            raise ShapeError(f"expected a 4-D conv kernel, got {kernel.shape}")
        o, i, kh, kw = kernel.shape
        r = pair.rank
        if pair.b.shape != (r, i, kh, kw) or pair.a.shape != (o, r, 1, 1):
            raise ShapeError(
                f"adapter shapes {pair.b.shape}/{pair.a.shape} do not match kernel {kernel.shape}"
            )
        a2 = pair.a.data.reshape(o, r)
        delta = np.einsum("or,rikl->oikl", a2, pair.b.data, dtype=np.float32)
        return Tensor(kernel.data + np.float32(pair.scale) * delta)
    if kernel.data.ndim != 2:
        raise ShapeError(f"expected a 2-D fc weight, got {kernel.shape}")
    delta = pair.b.data @ pair.a.data
    return Tensor(kernel.data + np.float32(pair.scale) * delta)


def trainable_tensors(adapted: AdaptedModel) -> list[tuple[str, Tensor]]:
    """Adapter factors plus policy-unfrozen base tensors, in sorted name order."""
    named: list[tuple[str, Tensor]] = []
    for lname, pair in adapted.adapters.items():
        named.append((f"{lname}.lora_b", pair.b))
        named.append((f"{lname}.lora_a", pair.a))
    for key, t in adapted.params.items():
        if t.requires_grad:
            named.append((M.ParamSet.flat_name(key), t))
    named.sort(key=lambda kv: kv[0])
    return named
