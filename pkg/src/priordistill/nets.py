"""Networks.

The ConvNet used for experts, students and ψ features is written functionally
over one flat parameter vector, so trajectory checkpoints, unrolled inner
loops and feature taps all share a single code path. The cross-architecture
evaluation nets are ordinary modules.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

NORMS = ("instance", "layer", "none")


@dataclass(frozen=True)
class StudentArch:
    class_count: int
    in_channels: int = 3
    image_size: int = 32
    block_count: int = 3
    width: int = 128
    norm: str = "instance"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}", "experts.norm")
        if self.image_size % (2**self.block_count):
            raise ConfigError(
                f"image size {self.image_size} not divisible by 2^{self.block_count}", "experts.block_count"
            )

    @classmethod
    def for_image(cls, class_count: int, image_shape, **kw) -> "StudentArch":
        h, w, c = image_shape
        if h != w:
            raise ShapeError("ConvNet expects square images")
        default_blocks = {32: 3, 64: 4, 128: 5}.get(h, 3)
        kw.setdefault("block_count", default_blocks)
        return cls(class_count=class_count, in_channels=c, image_size=h, **kw)

    @property
    def feature_size(self) -> int:
        return self.image_size // 2**self.block_count

    def feature_dim(self, tap: int | None = None) -> int:
        tap = self.block_count - 1 if tap is None else tap
        side = self.image_size // 2 ** (tap + 1)
        return self.width * side * side

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        cin = self.in_channels
        for b in range(self.block_count):
            shapes += [(f"conv{b}.weight", (self.width, cin, 3, 3)), (f"conv{b}.bias", (self.width,))]
            if self.norm != "none":
                shapes += [(f"norm{b}.weight", (self.width,)), (f"norm{b}.bias", (self.width,))]
            cin = self.width
        shapes += [("fc.weight", (self.class_count, self.feature_dim())), ("fc.bias", (self.class_count,))]
        return shapes

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for _, s in self.layout())

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(arch: StudentArch, generator: torch.Generator | None = None) -> torch.Tensor:
    """PyTorch-default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    parts = []
    fan_in = 1
    for name, shape in arch.layout():
        if name.endswith("weight") and name.startswith(("conv", "fc")):
            fan_in = math.prod(shape[1:])
        if name.startswith("norm"):
            fill = 1.0 if name.endswith("weight") else 0.0
            parts.append(torch.full(shape, fill))
        else:
            bound = 1.0 / math.sqrt(fan_in)
            parts.append((torch.rand(shape, generator=generator) * 2 - 1) * bound)
    return torch.cat([p.reshape(-1) for p in parts])


def unflatten(arch: StudentArch, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    if flat.ndim != 1 or flat.numel() != arch.param_count:
        raise ShapeError(f"expected flat vector of {arch.param_count} params, got {tuple(flat.shape)}")
    out, offset = {}, 0
    for name, shape in arch.layout():
        n = math.prod(shape)
        out[name] = flat[offset : offset + n].view(shape)
        offset += n
    return out


def _check_input(arch: StudentArch, x: torch.Tensor):
    if x.ndim != 4 or tuple(x.shape[1:]) != (arch.in_channels, arch.image_size, arch.image_size):
        raise ShapeError(
            f"input {tuple(x.shape)} does not match arch (N, {arch.in_channels}, {arch.image_size}, {arch.image_size})"
        )


def _blocks(arch: StudentArch, p: dict, x: torch.Tensor, stop: int):
    for b in range(stop + 1):
        x = F.conv2d(x, p[f"conv{b}.weight"], p[f"conv{b}.bias"], padding=1)
        if arch.norm == "instance":
            x = F.group_norm(x, arch.width, p[f"norm{b}.weight"], p[f"norm{b}.bias"])
        elif arch.norm == "layer":
            x = F.group_norm(x, 1, p[f"norm{b}.weight"], p[f"norm{b}.bias"])
        x = F.avg_pool2d(F.relu(x), 2)
    return x


def convnet_forward(arch: StudentArch, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Logits for NCHW input ``x`` under flat parameters ``flat``."""
    _check_input(arch, x)
    p = unflatten(arch, flat)
    h = _blocks(arch, p, x, arch.block_count - 1)
    return F.linear(h.flatten(1), p["fc.weight"], p["fc.bias"])


def convnet_features(arch: StudentArch, flat: torch.Tensor, x: torch.Tensor, tap: int | None = None) -> torch.Tensor:
    """Flattened post-pool activation of block ``tap`` (default: last block)."""
    _check_input(arch, x)
    tap = arch.block_count - 1 if tap is None else tap
    if not 0 <= tap < arch.block_count:
        raise ConfigError(f"tap {tap} outside [0, {arch.block_count})", "distill.feature_tap")
    return _blocks(arch, unflatten(arch, flat), x, tap).flatten(1)


class ConvNet(nn.Module):
    """Module wrapper around the functional ConvNet (one flat parameter)."""

    def __init__(self, arch: StudentArch, generator: torch.Generator | None = None, flat: torch.Tensor | None = None):
        super().__init__()
        self.arch = arch
        self.flat = nn.Parameter(flat.clone() if flat is not None else init_params(arch, generator))

    def forward(self, x):
        return convnet_forward(self.arch, self.flat, x)


# --- cross-architecture evaluation nets (small, image-size agnostic) ---


def _norm2d(kind: str, c: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(c)
    if kind == "instance":
        return nn.GroupNorm(c, c, affine=True)
    return nn.Identity()


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, norm):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm2d(norm, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm2d(norm, cout)
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm2d(norm, cout))

    def forward(self, x):
        out = F.relu(self.n1(self.c1(x)))
        return F.relu(self.n2(self.c2(out)) + self.skip(x))


class ResNetSmall(nn.Module):
    """ResNet-18 layout (2-2-2-2 basic blocks) at configurable base width."""

    def __init__(self, in_channels, class_count, width=16, norm="batch"):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 1, 1, bias=False), _norm2d(norm, width), nn.ReLU())
        layers, cin = [], width
        for i, mult in enumerate((1, 2, 4, 8)):
            cout = width * mult
            layers += [_BasicBlock(cin, cout, 1 if i == 0 else 2, norm), _BasicBlock(cout, cout, 1, norm)]
            cin = cout
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, class_count)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.layers(self.stem(x)), 1).flatten(1))


class VGGSmall(nn.Module):
    """VGG-11 layout at reduced width."""

    CFG = (1, "M", 2, "M", 4, 4, "M", 8, 8, "M", 8, 8, "M")

    def __init__(self, in_channels, class_count, width=8, norm="instance"):
        super().__init__()
        layers, cin = [], in_channels
        for v in self.CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            else:
                layers += [nn.Conv2d(cin, width * v, 3, padding=1), _norm2d(norm, width * v), nn.ReLU()]
                cin = width * v
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, class_count)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


class AlexNetSmall(nn.Module):
    def __init__(self, in_channels, class_count, width=16, norm="none"):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 4 * w, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(4 * w, 12 * w, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(12 * w, 16 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16 * w, 16 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16 * w, 8 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.fc = nn.Linear(8 * w, class_count)

    def forward(self, x):
        return self.fc(F.adaptive_avg_pool2d(self.features(x), 1).flatten(1))


ARCHITECTURES = ("convnet", "resnet", "vgg", "alexnet")


def build_eval_net(name: str, image_shape, class_count: int, generator: torch.Generator | None = None, convnet_arch: StudentArch | None = None) -> nn.Module:
    h, w, c = image_shape
    if name == "convnet":
        arch = convnet_arch or StudentArch.for_image(class_count, image_shape)
        if (arch.image_size, arch.in_channels, arch.class_count) != (h, c, class_count):
            raise ConfigError(f"convnet arch {arch} does not accept images {image_shape} / {class_count} classes")
        return ConvNet(arch, generator)
    if h < 8 or w < 8:
        raise ConfigError(f"{name} needs images of at least 8x8, got {image_shape}")
    if generator is not None:
        # module initializers draw from the global stream
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
    if name == "resnet":
        return ResNetSmall(c, class_count)
    if name == "vgg":
        return VGGSmall(c, class_count)
    if name == "alexnet":
        return AlexNetSmall(c, class_count)
    raise ConfigError(f"unknown architecture {name!r}; choose from {ARCHITECTURES}", "eval.architecture")
