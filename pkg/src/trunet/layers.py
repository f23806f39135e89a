"""Composite building blocks of the hybrid CNN/transformer segmenter.

Pre-activation ResNet bottlenecks form the convolutional encoder, a stack of
pre-norm transformer layers processes the /16 feature grid as tokens, and a
cascade of upsample+conv stages brings the features back to full resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as K
from . import tensor as T
from .errors import ConfigurationError
from .nn import Module, ModuleList, constant, he_normal, ones, xavier_uniform, zeros
from .tensor import Tensor

POS_ZERO = "zero_init_learnable"
POS_RANDOM_1D = "random_init_learnable_1d"
POS_EMBEDDINGS = (POS_ZERO, POS_RANDOM_1D)


@dataclass(frozen=True)
class BottleneckSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.out_channels != 4 * self.mid_channels:
            raise ConfigurationError(
                f"bottleneck out_channels ({self.out_channels}) must be 4x mid_channels ({self.mid_channels})")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"bottleneck stride must be 1 or 2, got {self.stride}")

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class ViTSpec:
    hidden: int = 768
    mlp: int = 3072
    heads: int = 12
    layers: int = 12
    pos_embedding: str = POS_ZERO

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


# -- primitive wrappers ------------------------------------------------------

class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=None,
                 bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_channels * kernel ** 3
        self.weight = he_normal(rng, (out_channels, in_channels, kernel, kernel, kernel), fan_in)
        self.bias = zeros((out_channels,)) if bias else None

    def forward(self, x):
        return K.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    """Group normalisation; 32 groups, reduced to the largest divisor of C."""

    def __init__(self, channels, groups=None):
        super().__init__()
        self.groups = K.default_groups(channels) if groups is None else groups
        self.weight = ones((channels,))
        self.bias = zeros((channels,))

    def forward(self, x):
        return K.group_norm(x, self.groups, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.weight = ones((dim,))
        self.bias = zeros((dim,))

    def forward(self, x):
        return K.layer_norm(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = xavier_uniform(rng, in_features, out_features)
        self.bias = zeros((out_features,))

    def forward(self, x):
        return T.matmul(x, self.weight) + self.bias


class PReLU(Module):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.alpha = constant((channels,), init)

    def forward(self, x):
        return T.prelu(x, self.alpha, axis=1)


# -- convolutional encoder ------------------------------------------------

class Bottleneck(Module):
    """Pre-activation 1-3-1 bottleneck unit with identity or 1x1x1 projection shortcut."""

    def __init__(self, spec: BottleneckSpec, rng=None):
        super().__init__()
        self.spec = spec
        self.norm1 = GroupNorm(spec.in_channels)
        self.conv1 = Conv3d(spec.in_channels, spec.mid_channels, 1, bias=False, rng=rng)
        self.norm2 = GroupNorm(spec.mid_channels)
        self.conv2 = Conv3d(spec.mid_channels, spec.mid_channels, 3, spec.stride, 1, bias=False, rng=rng)
        self.norm3 = GroupNorm(spec.mid_channels)
        self.conv3 = Conv3d(spec.mid_channels, spec.out_channels, 1, bias=False, rng=rng)
        self.projection = (Conv3d(spec.in_channels, spec.out_channels, 1, spec.stride, 0,
                                  bias=False, rng=rng)
                           if spec.has_projection else None)

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ConfigurationError(
                f"bottleneck expects {self.spec.in_channels} channels, got {x.shape[1]}")
        pre = T.relu(self.norm1(x))
        shortcut = self.projection(pre) if self.projection is not None else x
        y = self.conv1(pre)
        y = self.conv2(T.relu(self.norm2(y)))
        y = self.conv3(T.relu(self.norm3(y)))
        return y + shortcut


def scaled(channels: int, width) -> int:
    value = channels * width
    if value != int(value) or int(value) < 1:
        raise ConfigurationError(f"width multiplier {width} gives non-integral channels for {channels}")
    return int(value)


def encoder_channels(width=1) -> dict:
    """Stem and block output widths for a width multiplier."""
    return {"stem": scaled(64, width), "blocks": (scaled(256, width), scaled(512, width),
                                                  scaled(1024, width))}


def encoder_block_specs(width=1, depths=(3, 4, 9)) -> list[list[BottleneckSpec]]:
    ch = encoder_channels(width)
    blocks = []
    in_ch = ch["stem"]
    for b, (out_ch, depth) in enumerate(zip(ch["blocks"], depths)):
        units = []
        for u in range(depth):
            stride = 2 if (b > 0 and u == 0) else 1
            units.append(BottleneckSpec(in_ch, out_ch // 4, out_ch, stride))
            in_ch = out_ch
        blocks.append(units)
    return blocks


class ResNetEncoder(Module):
    """Stem (7^3 conv /2, norm, relu, 3^3 max-pool /2) and three bottleneck blocks.

    Returns the /16 feature grid and the skip features at /2, /4 and /8.
    """

    def __init__(self, in_channels=1, width=1, depths=(3, 4, 9), rng=None):
        super().__init__()
        ch = encoder_channels(width)
        self.stem_conv = Conv3d(in_channels, ch["stem"], 7, 2, 3, bias=False, rng=rng)
        self.stem_norm = GroupNorm(ch["stem"])
        self.blocks = ModuleList()
        for units in encoder_block_specs(width, depths):
            self.blocks.append(ModuleList(Bottleneck(s, rng) for s in units))
        self.out_norm = GroupNorm(ch["blocks"][-1])
        self.out_channels = ch["blocks"][-1]
        self.skip_channels = (ch["stem"], ch["blocks"][0], ch["blocks"][1])

    def forward(self, x):
        s = x.shape[2]
        if any(e % 16 for e in x.shape[2:]):
            raise ConfigurationError(f"encoder input extent {x.shape[2:]} not divisible by 16")
        stem = T.relu(self.stem_norm(self.stem_conv(x)))
        y = K.maxpool3d(stem, 3, 2, 1)
        skips = [stem]
        for i, block in enumerate(self.blocks):
            for unit in block:
                y = unit(y)
            if i < 2:
                skips.append(y)
        assert y.shape[2] * 16 == s
        return T.relu(self.out_norm(y)), skips


# -- transformer ------------------------------------------------------------

class PatchEmbedding(Module):
    """Per-voxel linear map of the /16 feature grid to tokens plus a positional term."""

    def __init__(self, in_channels, hidden, tokens, pos_embedding=POS_ZERO, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if pos_embedding not in POS_EMBEDDINGS:
            raise ConfigurationError(f"unknown positional embedding {pos_embedding!r}")
        self.proj = Conv3d(in_channels, hidden, 1, bias=True, rng=rng)
        if pos_embedding == POS_ZERO:
            self.position = zeros((tokens, hidden))
        else:
            self.position = Tensor(rng.normal(0.0, 0.02, size=(tokens, hidden)).astype(np.float32),
                                   requires_grad=True)
        self.hidden, self.tokens = hidden, tokens

    def forward(self, features):
        y = self.proj(features)
        n, e = y.shape[:2]
        # row-major over the (D, H, W) grid
        tokens = T.transpose(T.reshape(y, (n, e, -1)), (0, 2, 1))
        if tokens.shape[1] != self.tokens:
            raise ConfigurationError(f"expected {self.tokens} tokens, got {tokens.shape[1]}")
        return tokens + self.position


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng=None):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"hidden size {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x):
        n, t, _ = x.shape
        return T.transpose(T.reshape(x, (n, t, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def forward(self, x):
        n, t, e = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(e // self.heads))
        weights = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (n, t, e))
        return self.out(ctx)


class MLP(Module):
    def __init__(self, dim, hidden, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class ViTLayer(Module):
    """Pre-norm transformer layer: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, spec: ViTSpec, rng=None):
        super().__init__()
        self.attn_norm = LayerNorm(spec.hidden)
        self.attn = MultiHeadAttention(spec.hidden, spec.heads, rng)
        self.mlp_norm = LayerNorm(spec.hidden)
        self.mlp = MLP(spec.hidden, spec.mlp, rng)

    def forward(self, x):
        x = x + self.attn(self.attn_norm(x))
        return x + self.mlp(self.mlp_norm(x))


class ViTEncoder(Module):
    def __init__(self, spec: ViTSpec, rng=None):
        super().__init__()
        self.layers = ModuleList(ViTLayer(spec, rng) for _ in range(spec.layers))
        self.norm = LayerNorm(spec.hidden)

    def forward(self, tokens):
        for layer in self.layers:
            tokens = layer(tokens)
        return self.norm(tokens)


# -- decoder -----------------------------------------------------------------

class DecoderStage(Module):
    """x2 trilinear upsample, optional skip concat, 3^3 conv, norm, relu."""

    def __init__(self, in_channels, skip_channels, out_channels, rng=None):
        super().__init__()
        self.skip_channels = skip_channels
        self.conv = Conv3d(in_channels + skip_channels, out_channels, 3, 1, 1, bias=False, rng=rng)
        self.norm = GroupNorm(out_channels)

    def forward(self, x, skip: Optional[Tensor] = None):
        y = K.trilinear_upsample(x, 2)
        if skip is not None:
            if skip.shape[2:] != y.shape[2:]:
                raise ConfigurationError(
                    f"skip extent {skip.shape[2:]} does not match upsampled {y.shape[2:]}")
            y = T.concat([y, skip], axis=1)
        return T.relu(self.norm(self.conv(y)))


class SegmentationHead(Module):
    """3^3 conv to class logits and a channel softmax.

    With ``upsample_to`` set, features are first resized to that extent.
    """

    def __init__(self, in_channels, num_classes, upsample_to=None, rng=None):
        super().__init__()
        self.conv = Conv3d(in_channels, num_classes, 3, 1, 1, bias=True, rng=rng)
        self.upsample_to = upsample_to

    def forward(self, x):
        if self.upsample_to is not None and x.shape[2] != self.upsample_to:
            x = K.resize_trilinear(x, (self.upsample_to,) * 3)
        return T.softmax(self.conv(x), axis=1)


def predict_labels(probabilities: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return np.argmax(probabilities, axis=1).astype(np.uint8)


# -- residual U-Net pieces ---------------------------------------------------

class ResidualUnit(Module):
    """``subunits`` x (conv 3^3 -> norm -> PReLU) plus a residual path.

    The first conv carries the stride. The residual path is identity when the
    unit keeps shape, otherwise a conv (3^3 when strided, 1^3 otherwise).
    """

    def __init__(self, in_channels, out_channels, stride=1, subunits=2,
                 last_conv_only=False, rng=None):
        super().__init__()
        self.convs = ModuleList()
        self.norms = ModuleList()
        self.acts = ModuleList()
        ch = in_channels
        for i in range(subunits):
            self.convs.append(Conv3d(ch, out_channels, 3, stride if i == 0 else 1, 1, rng=rng))
            if not (last_conv_only and i == subunits - 1):
                self.norms.append(GroupNorm(out_channels))
                self.acts.append(PReLU(out_channels))
            ch = out_channels
        if stride != 1 or in_channels != out_channels:
            k = 3 if stride != 1 else 1
            self.residual = Conv3d(in_channels, out_channels, k, stride, k // 2, rng=rng)
        else:
            self.residual = None
        self.stride = stride

    def forward(self, x):
        y = x
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.norms):
                y = self.acts[i](self.norms[i](y))
        res = self.residual(x) if self.residual is not None else x
        return y + res


class UpLayer(Module):
    """x2 upsample + conv 3^3 (stand-in for a transposed conv), norm, PReLU,
    then a single-conv residual unit."""

    def __init__(self, in_channels, out_channels, is_top, rng=None):
        super().__init__()
        self.conv = Conv3d(in_channels, out_channels, 3, 1, 1, rng=rng)
        self.norm = GroupNorm(out_channels)
        self.act = PReLU(out_channels)
        self.unit = ResidualUnit(out_channels, out_channels, 1, 1, last_conv_only=is_top, rng=rng)

    def forward(self, x):
        y = self.act(self.norm(self.conv(K.trilinear_upsample(x, 2))))
        return self.unit(y)


class UNetLevel(Module):
    """One encoder/decoder level; recursion mirrors the nested skip structure."""

    def __init__(self, in_channels, out_channels, channels, res_units=2, is_top=True, rng=None):
        super().__init__()
        c = channels[0]
        self.down = ResidualUnit(in_channels, c, 2, res_units, rng=rng)
        if len(channels) > 2:
            self.sub = UNetLevel(c, c, channels[1:], res_units, False, rng)
            up_in = 2 * c
        else:
            self.sub = ResidualUnit(c, channels[1], 1, res_units, rng=rng)
            up_in = c + channels[1]
        self.up = UpLayer(up_in, out_channels, is_top, rng)

    def forward(self, x):
        d = self.down(x)
        return self.up(T.concat([d, self.sub(d)], axis=1))
