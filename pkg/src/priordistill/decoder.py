"""Latent-to-image generator: linear projection, transposed-conv blocks, conv + tanh head.

Every block is ``ConvTranspose2d(k=4, s=2, p=1) -> BatchNorm2d -> LeakyReLU(0.2)``
and doubles the spatial size, so ``grid * 2**block_count`` must equal the
output side. The projection maps ``z`` to ``projection_channels`` feature maps
on a ``grid x grid`` square.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

KERNEL, STRIDE, PADDING = 4, 2, 1
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class DecoderSpec:
    latent_dim: int
    projection_channels: int
    channels: tuple[int, ...]
    output_shape: tuple[int, int, int]
    size_class: str = "custom"
    head_kernel: int = 3

    @property
    def block_count(self) -> int:
        return len(self.channels)

    @property
    def grid(self) -> int:
        return self.output_shape[0] // 2**self.block_count

    @property
    def projection_dim(self) -> int:
        return self.projection_channels * self.grid * self.grid

    def validate(self) -> "DecoderSpec":
        h, w, c = self.output_shape
        if h != w:
            raise ConfigError(f"decoder output must be square, got {h}x{w}")
        if self.latent_dim < 1 or self.projection_channels < 1 or c < 1 or any(ch < 1 for ch in self.channels):
            raise ConfigError("decoder dimensions must be positive")
        side = h / 2**self.block_count
        if side < 1 or side != int(side):
            raise ConfigError(
                f"{self.block_count} doubling blocks cannot reach {h}x{w}: {h} / 2^{self.block_count} = {side:g} is not a positive integer grid"
            )
        if self.head_kernel % 2 != 1:
            raise ConfigError("head kernel must be odd")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(kernel=KERNEL, stride=STRIDE, padding=PADDING, leaky_slope=LEAKY_SLOPE)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        keys = {"latent_dim", "projection_channels", "channels", "output_shape", "size_class", "head_kernel"}
        kw = {k: v for k, v in d.items() if k in keys}
        kw["channels"] = tuple(kw["channels"])
        kw["output_shape"] = tuple(kw["output_shape"])
        return cls(**kw)


def halving_schedule(first: int, blocks: int, floor: int) -> tuple[int, ...]:
    """Output channels of each block: ``first / 2**(i+1)`` clipped at ``floor``."""
    return tuple(max(first // 2 ** (i + 1), floor) for i in range(blocks))


# size class -> (latent dim, projection channels, channel floor, grid side)
_PRESETS = {
    "S": (64, 256, 32, 1),
    "M": (1028, 576, 32, 2),
    "L": (2048, 480, 32, 2),
}


def preset(size_class: str, output_shape=(32, 32, 3)) -> DecoderSpec:
    """S / M / L decoders; block count follows from output side and grid."""
    if size_class not in _PRESETS:
        raise ConfigError(f"unknown decoder size {size_class!r}; choose S, M or L", "distill.decoder.size_class")
    d, k, floor, grid = _PRESETS[size_class]
    side = output_shape[0]
    blocks = int(round(math.log2(side / grid)))
    spec = DecoderSpec(d, k, halving_schedule(k, blocks, floor), tuple(output_shape), size_class)
    return spec.validate()


def param_count(spec: DecoderSpec) -> int:
    """Learnable parameters (weights, biases, BatchNorm affine). Running stats are not parameters."""
    spec.validate()
    total = spec.latent_dim * spec.projection_dim + spec.projection_dim
    cin = spec.projection_channels
    for cout in spec.channels:
        total += cin * cout * KERNEL * KERNEL + cout  # transposed conv
        total += 2 * cout  # batchnorm affine
        cin = cout
    out_c = spec.output_shape[2]
    total += cin * out_c * spec.head_kernel**2 + out_c
    return total


def buffer_count(spec: DecoderSpec) -> int:
    """Running mean and variance of every BatchNorm."""
    return 2 * sum(spec.channels)


class Decoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec.validate()
        self.project = nn.Linear(spec.latent_dim, spec.projection_dim)
        blocks, cin = [], spec.projection_channels
        for cout in spec.channels:
            blocks += [
                nn.ConvTranspose2d(cin, cout, KERNEL, STRIDE, PADDING),
                nn.BatchNorm2d(cout, track_running_stats=True),
                nn.LeakyReLU(LEAKY_SLOPE),
            ]
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(cin, spec.output_shape[2], spec.head_kernel, padding=spec.head_kernel // 2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """NCHW image batch in [-1, 1]."""
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(f"latent batch {tuple(z.shape)} does not match latent_dim {self.spec.latent_dim}")
        h = self.project(z).view(-1, self.spec.projection_channels, self.spec.grid, self.spec.grid)
        return torch.tanh(self.head(self.blocks(h)))


def state_entries(decoder: Decoder) -> list[tuple[str, torch.Tensor]]:
    """Float state_dict entries (params + running stats); ``num_batches_tracked`` is unused with fixed momentum."""
    return [(k, v) for k, v in decoder.state_dict().items() if v.is_floating_point()]


@dataclass
class DecoderParams:
    flat: np.ndarray
    shapes: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @classmethod
    def from_decoder(cls, decoder: Decoder) -> "DecoderParams":
        entries = state_entries(decoder)
        flat = np.concatenate([v.detach().reshape(-1).numpy().astype(np.float32) for _, v in entries])
        return cls(flat, [(k, tuple(v.shape)) for k, v in entries])

    def load_into(self, decoder: Decoder) -> Decoder:
        state, offset = decoder.state_dict(), 0
        for name, shape in self.shapes:
            n = math.prod(shape)
            state[name] = torch.from_numpy(self.flat[offset : offset + n].reshape(shape).copy())
            offset += n
        if offset != self.flat.size:
            raise ShapeError(f"decoder blob holds {self.flat.size} values, shape table needs {offset}")
        decoder.load_state_dict(state)
        return decoder


def build_decoder(spec: DecoderSpec, rng: int | torch.Generator = 0) -> Decoder:
    if isinstance(rng, torch.Generator):
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=rng))
    else:
        seed = int(rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Decoder(spec)


def decode(decoder: Decoder, z: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
    """Run the decoder; ``train_mode`` selects batch statistics (and updates running stats)."""
    was = decoder.training
    decoder.train(train_mode)
    try:
        return decoder(z)
    finally:
        decoder.train(was)
