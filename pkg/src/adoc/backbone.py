"""Convolutional feature extractor with per-domain residual adapters.

A stack of residual modules reduces a [1, 32, 128] grayscale image to a
width-wise feature sequence of height 1. Each block runs two 3x3
convolutions with per-channel normalization, applies the active domain's
1x1 adapter to the branch output as ``z + adapter(z)``, adds the shortcut
(identity, or a strided 1x1 projection when shape changes), and finishes
with a ReLU. Convolution kernels and projections are shared across domains;
normalization parameters and adapters belong to a single domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, channel_norm, conv2d, relu, tmean, transpose


class RoutingError(LookupError):
    """A forward pass touched parameters of the wrong domain."""


IMAGE_HEIGHT = 32
IMAGE_WIDTH = 128


@dataclass(frozen=True)
class BackboneConfig:
    num_modules: int = 4
    blocks_per_module: int = 2
    channel_widths: tuple[int, ...] = (16, 32, 64, 128)
    vertical_strides: tuple[int, ...] = (2, 2, 2, 2)
    horizontal_strides: tuple[int, ...] = (1, 1, 2, 2)

    def __post_init__(self):
        if len(self.channel_widths) != self.num_modules:
            raise ValueError("one channel width per module required")
        if len(self.vertical_strides) != self.num_modules:
            raise ValueError("one vertical stride per module required")
        if len(self.horizontal_strides) != self.num_modules:
            raise ValueError("one horizontal stride per module required")
        v = int(np.prod(self.vertical_strides))
        if IMAGE_HEIGHT % v != 0:
            raise ValueError(f"vertical strides {self.vertical_strides} do not divide {IMAGE_HEIGHT}")
        h = int(np.prod(self.horizontal_strides))
        if IMAGE_WIDTH % h != 0:
            raise ValueError(f"horizontal strides {self.horizontal_strides} do not divide {IMAGE_WIDTH}")

    @property
    def feature_width(self) -> int:
        return IMAGE_WIDTH // int(np.prod(self.horizontal_strides))

    @property
    def feature_channels(self) -> int:
        return self.channel_widths[-1]

    @property
    def residual_height(self) -> int:
        """Height left over after the strided modules; pooled away at the end."""
        return IMAGE_HEIGHT // int(np.prod(self.vertical_strides))


@dataclass
class BlockNorms:
    """Per-domain affine parameters for a block's two normalization layers."""

    gain1: Tensor
    bias1: Tensor
    gain2: Tensor
    bias2: Tensor


@dataclass
class ResidualAdapter:
    """Per-domain 1x1 filter bank mixed into a block's residual branch."""

    kernel: Tensor  # [C, C, 1, 1]
    domain_id: int


@dataclass
class ResidualBlockParams:
    """Shared convolution weights plus each domain's normalization bank."""

    conv1_kernel: Tensor
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor
    proj_kernel: Tensor | None
    stride: tuple[int, int]
    norms: dict[int, BlockNorms] = field(default_factory=dict)

    @property
    def in_channels(self) -> int:
        return self.conv1_kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv1_kernel.shape[0]


def _bias3(bias: Tensor) -> Tensor:
    return bias.reshape((bias.shape[0], 1, 1))


def residual_block_forward(x: Tensor, block: ResidualBlockParams,
                           adapter: ResidualAdapter, domain: int) -> Tensor:
    """One residual block with the given domain's adapter and norms."""
    if x.data.ndim != 3 or x.shape[0] != block.in_channels:
        raise ShapeError(
            f"block expects {block.in_channels} input channels, got map of shape {x.shape}"
        )
    if adapter.domain_id != domain:
        raise RoutingError(
            f"adapter belongs to domain {adapter.domain_id}, forward is for domain {domain}"
        )
    norms = block.norms.get(domain)
    if norms is None:
        raise RoutingError(f"block has no normalization bank for domain {domain}")

    z = conv2d(x, block.conv1_kernel, stride=block.stride, padding=(1, 1))
    z = z + _bias3(block.conv1_bias)
    z = channel_norm(z, norms.gain1, norms.bias1)
    z = relu(z)
    z = conv2d(z, block.conv2_kernel, stride=(1, 1), padding=(1, 1))
    z = z + _bias3(block.conv2_bias)
    z = channel_norm(z, norms.gain2, norms.bias2)

    z = z + conv2d(z, adapter.kernel)

    if block.proj_kernel is not None:
        shortcut = conv2d(x, block.proj_kernel, stride=block.stride)
    else:
        shortcut = x
    return relu(shortcut + z)


@dataclass
class BackboneParams:
    config: BackboneConfig
    blocks: list[ResidualBlockParams]
    adapters: dict[int, list[ResidualAdapter]] = field(default_factory=dict)

    def domain_ids(self):
        return sorted(self.adapters)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    """Shared weights only; domains attach their banks at registration."""
    blocks = []
    in_ch = 1
    for m in range(config.num_modules):
        out_ch = config.channel_widths[m]
        for b in range(config.blocks_per_module):
            stride = (config.vertical_strides[m], config.horizontal_strides[m]) if b == 0 else (1, 1)
            k1 = rng.normal(0.0, np.sqrt(2.0 / (in_ch * 9)), size=(out_ch, in_ch, 3, 3))
            k2 = rng.normal(0.0, np.sqrt(2.0 / (out_ch * 9)), size=(out_ch, out_ch, 3, 3))
            proj = None
            if stride != (1, 1) or in_ch != out_ch:
                proj = Tensor(
                    rng.normal(0.0, np.sqrt(2.0 / in_ch), size=(out_ch, in_ch, 1, 1)),
                    requires_grad=True,
                )
            blocks.append(ResidualBlockParams(
                conv1_kernel=Tensor(k1, requires_grad=True),
                conv1_bias=Tensor(np.zeros(out_ch), requires_grad=True),
                conv2_kernel=Tensor(k2, requires_grad=True),
                conv2_bias=Tensor(np.zeros(out_ch), requires_grad=True),
                proj_kernel=proj,
                stride=stride,
            ))
            in_ch = out_ch
    return BackboneParams(config=config, blocks=blocks)


def extract_features(image: Tensor, backbone: BackboneParams, domain: int) -> Tensor:
    """Map a normalized [1, 32, 128] image to a [W', C'] feature sequence."""
    if image.shape != (1, IMAGE_HEIGHT, IMAGE_WIDTH):
        raise ShapeError(
            f"expected image of shape (1, {IMAGE_HEIGHT}, {IMAGE_WIDTH}), got {image.shape}"
        )
    adapters = backbone.adapters.get(domain)
    if adapters is None:
        raise RoutingError(f"domain {domain} is not registered")
    x = image
    for block, adapter in zip(backbone.blocks, adapters):
        x = residual_block_forward(x, block, adapter, domain)
    if x.shape[1] > 1:
        x = tmean(x, axis=1, keepdims=True)  # collapse leftover height
    # [C', 1, W'] -> [W', C']
    return transpose(x.reshape((x.shape[0], x.shape[2])))
