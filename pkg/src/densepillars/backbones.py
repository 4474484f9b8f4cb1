"""The dense-connectivity backbone and the baseline stride-2 conv backbone.

Both emit three multi-scale taps with identical shapes (strides 2, 4, 8
relative to the pseudo-image), so one can replace the other without touching
the encoder, neck, or head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor


@dataclass
class GrowthSchedule:
    mode: str = "table_matched"  # fixed | doubling | table_matched
    k: int = 32  # fixed rate, or the block-1 rate for doubling

    TABLE_MATCHED = (32, 32, 64)

    def rate(self, block: int) -> int:
        """Growth rate for block 1..n_blocks."""
        if block < 1:
            raise ConfigurationError("block index is 1-based")
        if self.mode == "fixed":
            return self.k
        if self.mode == "doubling":
            return self.k * (2 ** (block - 1))
        if self.mode == "table_matched":
            return self.TABLE_MATCHED[block - 1]
        raise ConfigurationError(f"unknown growth mode {self.mode!r}")


@dataclass
class DenseBackboneSpec:
    layers_per_block: tuple = (3, 5, 5)
    growth: GrowthSchedule = field(default_factory=GrowthSchedule)
    transition_out_channels: tuple = (64, 128, 256)
    input_channels: int = 64
    downsample: str = "avg_pool"  # avg_pool | strided_conv

    def __post_init__(self):
        if len(self.layers_per_block) != len(self.transition_out_channels):
            raise ConfigurationError("layers_per_block / transition channels mismatch")
        if self.downsample not in ("avg_pool", "strided_conv"):
            raise ConfigurationError(f"unknown downsample {self.downsample!r}")

    @property
    def n_blocks(self):
        return len(self.layers_per_block)


@dataclass
class BaselineBackboneSpec:
    layers_per_block: tuple = (3, 5, 5)  # convs after each stride-2 entry conv
    channels: tuple = (64, 128, 256)
    input_channels: int = 64

    @property
    def n_blocks(self):
        return len(self.layers_per_block)


def he_conv_weight(rng, c_out, c_in, k):
    std = np.sqrt(2.0 / (c_out * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)


class ConvBNRelu:
    """3x3 or 1x1 conv (no bias) + batch norm + relu."""

    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0):
        self.conv = T.Conv2dParams(
            Tensor(he_conv_weight(rng, c_out, c_in, k), requires_grad=True),
            bias=None,
            stride=stride,
            padding=padding,
        )
        self.bn = T.BatchNormParams.create(c_out)

    def forward(self, x):
        return T.relu(T.batch_norm(T.conv2d(x, self.conv), self.bn))

    def named_params(self, prefix):
        return {
            f"{prefix}.conv.weight": self.conv.weight,
            f"{prefix}.bn.gamma": self.bn.gamma,
            f"{prefix}.bn.beta": self.bn.beta,
        }

    def bn_list(self):
        return [self.bn]


def dense_block_forward(x, layers):
    """Feed-forward conv chain; input and every stage output concatenated once."""
    feats = [x]
    h = x
    for layer in layers:
        h = layer.forward(h)
        feats.append(h)
    return T.channel_concat(feats)


class DenseBackbone:
    """Dense blocks + transition layers producing strides 2/4/8 taps."""

    def __init__(self, spec: DenseBackboneSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.blocks = []
        self.transitions = []
        self.pool_convs = []
        c_in = spec.input_channels
        for b in range(1, spec.n_blocks + 1):
            k = spec.growth.rate(b)
            n = spec.layers_per_block[b - 1]
            layers = [ConvBNRelu(rng, c_in if i == 0 else k, k, 3, padding=1) for i in range(n)]
            self.blocks.append(layers)
            concat_c = c_in + n * k
            c_out = spec.transition_out_channels[b - 1]
            self.transitions.append(ConvBNRelu(rng, concat_c, c_out, 1))
            if spec.downsample == "strided_conv":
                self.pool_convs.append(ConvBNRelu(rng, c_out, c_out, 3, stride=2, padding=1))
            else:
                self.pool_convs.append(None)
            c_in = c_out

    def forward(self, pseudo_image):
        taps = []
        h = pseudo_image
        for layers, trans, pool_conv in zip(self.blocks, self.transitions, self.pool_convs):
            h = dense_block_forward(h, layers)
            h = trans.forward(h)
            h = pool_conv.forward(h) if pool_conv is not None else T.avg_pool2x2(h)
            taps.append(h)
        return taps

    def named_params(self, prefix="backbone"):
        out = {}
        for b, (layers, trans, pool_conv) in enumerate(
            zip(self.blocks, self.transitions, self.pool_convs), start=1
        ):
            for i, layer in enumerate(layers, start=1):
                out.update(layer.named_params(f"{prefix}.block{b}.layer{i}"))
            out.update(trans.named_params(f"{prefix}.block{b}.transition"))
            if pool_conv is not None:
                out.update(pool_conv.named_params(f"{prefix}.block{b}.downsample"))
        return out

    def bn_list(self):
        bns = []
        for layers, trans, pool_conv in zip(self.blocks, self.transitions, self.pool_convs):
            for layer in layers:
                bns.extend(layer.bn_list())
            bns.extend(trans.bn_list())
            if pool_conv is not None:
                bns.extend(pool_conv.bn_list())
        return bns


class BaselineBackbone:
    """Stride-2 entry conv + same-resolution conv stack per block."""

    def __init__(self, spec: BaselineBackboneSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.blocks = []
        c_in = spec.input_channels
        for b in range(spec.n_blocks):
            c = spec.channels[b]
            layers = [ConvBNRelu(rng, c_in, c, 3, stride=2, padding=1)]
            layers += [
                ConvBNRelu(rng, c, c, 3, padding=1) for _ in range(spec.layers_per_block[b])
            ]
            self.blocks.append(layers)
            c_in = c

    def forward(self, pseudo_image):
        taps = []
        h = pseudo_image
        for layers in self.blocks:
            for layer in layers:
                h = layer.forward(h)
            taps.append(h)
        return taps

    def named_params(self, prefix="backbone"):
        out = {}
        for b, layers in enumerate(self.blocks, start=1):
            for i, layer in enumerate(layers):
                name = "entry" if i == 0 else f"layer{i}"
                out.update(layer.named_params(f"{prefix}.block{b}.{name}"))
        return out

    def bn_list(self):
        return [bn for layers in self.blocks for layer in layers for bn in layer.bn_list()]


def build_backbone(kind: str, seed: int = 0, growth: GrowthSchedule | None = None,
                   downsample: str = "avg_pool"):
    if kind == "dense":
        spec = DenseBackboneSpec(
            growth=growth or GrowthSchedule(), downsample=downsample
        )
        return DenseBackbone(spec, seed=seed)
    if kind == "baseline":
        return BaselineBackbone(BaselineBackboneSpec(), seed=seed)
    raise ConfigurationError(f"unknown backbone {kind!r}")
