"""RepVGG blocks and their structural re-parameterization.

A training block sums three branches (3x3 conv + BN, 1x1 conv + BN and,
when shapes allow, a BN-only identity) before a ReLU. Every branch is an
affine map that can be written as a 3x3 convolution with bias, so the
whole block collapses into one 3x3 conv + ReLU for inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .tensor import (
    BatchNormParams,
    Conv2dParams,
    ShapeError,
    batchnorm_inference,
    conv2d,
    conv_output_size,
    relu,
)


@dataclass(frozen=True)
class RepVGGBlockTrain:
    conv3: np.ndarray  # [C_out, C_in/groups, 3, 3], no bias
    bn3: BatchNormParams
    conv1: np.ndarray  # [C_out, C_in/groups, 1, 1], no bias
    bn1: BatchNormParams
    id_bn: BatchNormParams | None = None
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        w3 = np.asarray(self.conv3, dtype=np.float64)
        w1 = np.asarray(self.conv1, dtype=np.float64)
        object.__setattr__(self, "conv3", w3)
        object.__setattr__(self, "conv1", w1)
        if w3.ndim != 4 or w3.shape[2:] != (3, 3):
            raise ShapeError(f"conv3 must be [C_out, C_in/g, 3, 3], got {w3.shape}")
        if w1.shape != w3.shape[:2] + (1, 1):
            raise ShapeError(f"conv1 shape {w1.shape} does not match conv3 {w3.shape}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.out_channels % self.groups or self.in_channels % self.groups:
            raise ShapeError(f"channels ({self.in_channels}->{self.out_channels}) "
                             f"not divisible by groups={self.groups}")
        for name in ("bn3", "bn1"):
            if getattr(self, name).channels != self.out_channels:
                raise ShapeError(f"{name} has {getattr(self, name).channels} channels, "
                                 f"expected {self.out_channels}")
        want_id = self.in_channels == self.out_channels and self.stride == 1
        if want_id != (self.id_bn is not None):
            raise ShapeError("identity BN must be present exactly when C_in == C_out and stride == 1")
        if self.id_bn is not None and self.id_bn.channels != self.out_channels:
            raise ShapeError("identity BN channel count mismatch")

    @property
    def out_channels(self) -> int:
        return self.conv3.shape[0]

    @property
    def in_channels(self) -> int:
        return self.conv3.shape[1] * self.groups

    def param_count(self) -> int:
        n = self.conv3.size + self.conv1.size + 4 * self.out_channels * 2
        if self.id_bn is not None:
            n += 4 * self.out_channels
        return n

    @classmethod
    def random(cls, in_channels: int, out_channels: int, stride: int = 1,
               groups: int = 1, rng: np.random.Generator | None = None,
               eps: float = 1e-5) -> "RepVGGBlockTrain":
        """Random weights and random (but valid) running BN statistics."""
        rng = np.random.default_rng() if rng is None else rng
        cg = in_channels // groups
        fan_in = cg * 9

        def bn():
            return BatchNormParams(
                gamma=rng.uniform(0.5, 1.5, out_channels),
                beta=rng.normal(0.0, 0.1, out_channels),
                mean=rng.normal(0.0, 0.1, out_channels),
                var=rng.uniform(0.5, 1.5, out_channels),
                eps=eps,
            )

        conv3 = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, cg, 3, 3))
        conv1 = rng.normal(0.0, np.sqrt(2.0 / cg), (out_channels, cg, 1, 1))
        bn3, bn1 = bn(), bn()
        id_bn = bn() if (in_channels == out_channels and stride == 1) else None
        return cls(conv3, bn3, conv1, bn1, id_bn, stride, groups)


@dataclass(frozen=True)
class RepVGGBlockDeploy:
    conv: Conv2dParams

    def __post_init__(self):
        if self.conv.kernel_size != (3, 3):
            raise ShapeError(f"deploy kernel must be 3x3, got {self.conv.kernel_size}")
        if self.conv.bias is None:
            raise ShapeError("deploy conv must carry a bias")

    @property
    def stride(self) -> int:
        return self.conv.stride[0]

    @property
    def groups(self) -> int:
        return self.conv.groups

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def param_count(self) -> int:
        return self.conv.weight.size + self.conv.bias.size

    def as_train(self) -> RepVGGBlockTrain:
        """Single-branch training view: identity BN on the 3x3 branch, zeroed 1x1 and identity."""
        c = self.out_channels
        bn3 = BatchNormParams(np.ones(c), self.conv.bias.copy(), np.zeros(c), np.ones(c), 0.0)
        zero_bn = BatchNormParams(np.zeros(c), np.zeros(c), np.zeros(c), np.ones(c), 0.0)
        conv1 = np.zeros(self.conv.weight.shape[:2] + (1, 1))
        want_id = self.in_channels == c and self.stride == 1
        return RepVGGBlockTrain(self.conv.weight.copy(), bn3, conv1,
                                BatchNormParams.identity(c), zero_bn if want_id else None,
                                self.stride, self.groups)


Block = Union[RepVGGBlockTrain, RepVGGBlockDeploy]


def fuse_conv_bn(weight: np.ndarray, bias: np.ndarray | None,
                 bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    """Fold inference-mode BN into the preceding conv's weight and bias."""
    weight = np.asarray(weight, dtype=np.float64)
    if bn.channels != weight.shape[0]:
        raise ShapeError(f"batchnorm has {bn.channels} channels, conv has C_out={weight.shape[0]}")
    if bias is None:
        bias = np.zeros(weight.shape[0])
    std = np.sqrt(bn.var + bn.eps)
    t = bn.gamma / std
    return weight * t[:, None, None, None], bn.beta + (np.asarray(bias) - bn.mean) * t


def pad_1x1_to_3x3(weight_1x1: np.ndarray) -> np.ndarray:
    w = np.asarray(weight_1x1, dtype=np.float64)
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError(f"expected a 1x1 kernel, got spatial size {w.shape[2:]}")
    return np.pad(w, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_to_3x3(channels: int, groups: int = 1) -> np.ndarray:
    """Dirac kernel whose pad-1 stride-1 grouped convolution is the identity."""
    if groups < 1 or channels % groups:
        raise ShapeError(f"channels={channels} not divisible by groups={groups}")
    per_group = channels // groups
    k = np.zeros((channels, per_group, 3, 3))
    o = np.arange(channels)
    k[o, o % per_group, 1, 1] = 1.0
    return k


def reparameterize_block(block: Block) -> RepVGGBlockDeploy:
    if isinstance(block, RepVGGBlockDeploy):
        return block
    k3, b3 = fuse_conv_bn(block.conv3, None, block.bn3)
    k1, b1 = fuse_conv_bn(block.conv1, None, block.bn1)
    kernel = k3 + pad_1x1_to_3x3(k1)
    bias = b3 + b1
    if block.id_bn is not None:
        kid, bid = fuse_conv_bn(identity_to_3x3(block.in_channels, block.groups), None, block.id_bn)
        kernel = kernel + kid
        bias = bias + bid
    conv = Conv2dParams(kernel, bias, stride=block.stride, padding=1, groups=block.groups)
    return RepVGGBlockDeploy(conv)


def block_forward(block: Block, x: np.ndarray, mode: str = "train") -> np.ndarray:
    """Run one block on ``[C, H, W]`` or ``[N, C, H, W]`` input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3] != block.in_channels:
        raise ShapeError(f"input has {x.shape[-3]} channels, block expects {block.in_channels}")
    if mode == "deploy":
        if not isinstance(block, RepVGGBlockDeploy):
            raise ValueError("deploy mode requires a re-parameterized block; call reparameterize_block first")
        return relu(conv2d(x, block.conv))
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if not isinstance(block, RepVGGBlockTrain):
        raise ValueError("train mode requires a three-branch training block")
    s, g = block.stride, block.groups
    y = batchnorm_inference(conv2d(x, Conv2dParams(block.conv3, None, s, 1, g)), block.bn3)
    y = y + batchnorm_inference(conv2d(x, Conv2dParams(block.conv1, None, s, 0, g)), block.bn1)
    if block.id_bn is not None:
        y = y + batchnorm_inference(x, block.id_bn)
    return relu(y)


def block_mode(block: Block) -> str:
    return "deploy" if isinstance(block, RepVGGBlockDeploy) else "train"


@dataclass(frozen=True)
class StageSpec:
    num_blocks: int
    channels: int
    stride: int = 2
    groups: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Explicit stage layout; nothing about named RepVGG variants is hardcoded."""

    stages: tuple[StageSpec, ...]
    input_channels: int = 1
    base_channels: int = 64

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("backbone needs at least one stage")
        for i, st in enumerate(stages):
            if st.num_blocks < 1:
                raise ValueError(f"stage {i}: num_blocks must be >= 1")
            if st.channels % st.groups:
                raise ValueError(f"stage {i}: channels={st.channels} not divisible by groups={st.groups}")


# Example layouts in the spirit of the original RepVGG family, scaled by
# base width. Depths are illustrative, supply your own for real work.
EXAMPLE_CONFIGS = {
    "tiny": BackboneConfig(((1, 8, 1), (1, 8, 2), (1, 16, 2)), base_channels=8),
    "a2-like": BackboneConfig(((2, 96, 1), (4, 192, 2), (14, 384, 2), (1, 768, 2)), base_channels=96),
    "b1-like": BackboneConfig(((4, 128, 1), (6, 256, 2), (16, 512, 2), (1, 1024, 2)), base_channels=64),
    "b2g4-like": BackboneConfig(((4, 160, 1, 4), (6, 320, 2, 4), (16, 640, 2, 4), (1, 1280, 2)),
                                base_channels=64),
}


def parse_stages(text: str) -> tuple[StageSpec, ...]:
    """Parse ``"n:c:s[:g],..."`` into stage specs."""
    stages = []
    for part in text.split(","):
        fields = [int(v) for v in part.strip().split(":")]
        if len(fields) not in (3, 4):
            raise ValueError(f"stage {part!r} must be num_blocks:channels:stride[:groups]")
        stages.append(StageSpec(*fields))
    return tuple(stages)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> list[RepVGGBlockTrain]:
    blocks = []
    c_in = config.input_channels
    for st in config.stages:
        for b in range(st.num_blocks):
            stride = st.stride if b == 0 else 1
            # a grouped block needs its input channels to divide too
            groups = st.groups if c_in % st.groups == 0 else 1
            blocks.append(RepVGGBlockTrain.random(c_in, st.channels, stride, groups, rng))
            c_in = st.channels
    return blocks


def reparameterize_backbone(blocks: Sequence[Block]) -> list[RepVGGBlockDeploy]:
    return [reparameterize_block(b) for b in blocks]


def backbone_forward(blocks: Sequence[Block], features: np.ndarray, mode: str | None = None) -> np.ndarray:
    """Map ``[1, F, T]`` features to a frame sequence ``[T', C*F']``.

    Frequency and channel axes are flattened per time step.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.size == 0:
        raise ShapeError(f"features must be a nonempty [1, F, T] map, got {x.shape}")
    for i, block in enumerate(blocks):
        h, w = x.shape[-2:]
        s = block.stride
        if conv_output_size(h, 3, s, 1, 1) < 1 or conv_output_size(w, 3, s, 1, 1) < 1:
            raise ShapeError(f"block {i} would produce a zero-extent map from {h}x{w}")
        x = block_forward(block, x, mode or block_mode(block))
    c, f, t = x.shape
    return x.transpose(2, 0, 1).reshape(t, c * f)


def output_shape(config: BackboneConfig, n_freq: int, n_time: int) -> tuple[int, int]:
    """``(T', d)`` produced by a backbone built from ``config``."""
    f, t = n_freq, n_time
    for st in config.stages:
        f = conv_output_size(f, 3, st.stride, 1, 1)
        t = conv_output_size(t, 3, st.stride, 1, 1)
    return t, config.stages[-1].channels * f
