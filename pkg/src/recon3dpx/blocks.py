"""Network building blocks: encoder ConvBlock, multi-axis gated MLP,
channel attention and the hybrid MLP-CNN decoder block."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import (
    DimensionError,
    RunningStats,
    Tensor,
    batch_norm,
    concat,
    concat_channels,
    conv2d,
    gelu,
    layer_norm,
    matmul,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
    split,
    transpose_axes,
)


class Module:
    """Parameter container with deterministic, registration-ordered traversal."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield f"{prefix}{name}.mean", value.mean
                yield f"{prefix}{name}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.cin, self.cout = cin, cout
        std = np.sqrt(2.0 / (cin * 9))
        self.weight = _param(rng.normal(0.0, std, (cout, cin, 3, 3)), dtype)
        self.bias = _param(np.zeros(cout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=1)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.stats = RunningStats.fresh(channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, train=self.training)


class Dense(Module):
    """Affine map over the last axis."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        w = np.zeros((cin, cout)) if zero else rng.normal(0.0, 1.0 / np.sqrt(cin), (cin, cout))
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(cout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class ConvBlock(Module):
    """(Conv3x3 -> BN -> ReLU) twice; spatial size preserved."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.in_channels, self.out_channels = cin, cout
        self.conv1 = Conv3x3(cin, cout, rng, dtype)
        self.bn1 = BatchNorm(cout, dtype)
        self.conv2 = Conv3x3(cout, cout, rng, dtype)
        self.bn2 = BatchNorm(cout, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"ConvBlock expects {self.in_channels} input channels, got shape {x.shape}")
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


# ---------------------------------------------------------------------------
# Multi-axis gated MLP
# ---------------------------------------------------------------------------


def _to_windows(x: Tensor, window: int, mode: str) -> tuple[Tensor, tuple]:
    """Channel-last ``x[B,H,W,c]`` -> ``[B, n1, n2, c, P]`` with P mixing positions.

    ``block``: P enumerates positions inside each window x window tile.
    ``grid``: the image is cut into a window x window grid; P enumerates the
    grid cells sharing one intra-cell offset.
    """
    b, h, w, c = x.shape
    for axis, n in (("H", h), ("W", w)):
        if n % window:
            raise DimensionError(f"{mode} gating: {axis}={n} is not divisible by {window}")
    if mode == "block":
        shape = (b, h // window, window, w // window, window, c)
        perm = (0, 1, 3, 5, 2, 4)
    else:
        shape = (b, window, h // window, window, w // window, c)
        perm = (0, 2, 4, 5, 1, 3)
    t = transpose_axes(reshape(x, shape), perm)
    permuted = t.shape
    return reshape(t, permuted[:4] + (window * window,)), (permuted, perm)


def _from_windows(t: Tensor, layout: tuple, hw: tuple[int, int]) -> Tensor:
    permuted, perm = layout
    t = reshape(t, permuted)
    t = transpose_axes(t, tuple(np.argsort(perm)))
    b, c = permuted[0], permuted[3]
    return reshape(t, (b, hw[0], hw[1], c))


class SpatialGatingUnit(Module):
    """Split channels into (u, v); mix v across window positions; return u * v.

    The mixing weight starts at zero and its bias at one, so the unit passes
    ``u`` through unchanged at initialization.
    """

    def __init__(self, channels: int, window: int, mode: str, dtype=np.float32):
        if mode not in ("block", "grid"):
            raise ValueError(f"unknown gating mode {mode!r}")
        if channels % 2:
            raise DimensionError(f"gating unit needs an even channel count, got {channels}")
        self.window, self.mode = window, mode
        positions = window * window
        self.norm = LayerNorm(channels // 2, dtype)
        self.weight = _param(np.zeros((positions, positions)), dtype)
        self.bias = _param(np.ones(positions), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        half = x.shape[-1] // 2
        u, v = split(x, [half, half], axis=-1)
        v = self.norm(v)
        vw, layout = _to_windows(v, self.window, self.mode)
        vw = matmul(vw, self.weight) + self.bias
        v = _from_windows(vw, layout, x.shape[1:3])
        return u * v


class MultiAxisGatedMlp(Module):
    """Residual gated MLP with a local (block) and a global (grid) branch.

    x -> LayerNorm -> Dense(C->2C) -> GELU -> split into halves; one half is
    gated inside b x b blocks, the other across a g x g grid; the gated
    halves are concatenated, projected back to C and added to x.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        block_size: int = 4,
        grid_size: int = 4,
        dtype=np.float32,
        zero_init_output: bool = False,
    ):
        if channels % 2:
            raise DimensionError(f"gated MLP needs an even channel count, got {channels}")
        self.channels = channels
        self.block_size, self.grid_size = block_size, grid_size
        self.norm = LayerNorm(channels, dtype)
        self.proj_in = Dense(channels, 2 * channels, rng, dtype)
        self.block_gate = SpatialGatingUnit(channels, block_size, "block", dtype)
        self.grid_gate = SpatialGatingUnit(channels, grid_size, "grid", dtype)
        self.proj_out = Dense(channels, channels, rng, dtype, zero=zero_init_output)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"gated MLP expects {self.channels} channels, got shape {x.shape}")
        _, _, h, w = x.shape
        for axis, n in (("H", h), ("W", w)):
            if n % self.block_size:
                raise DimensionError(f"gated MLP: {axis}={n} is not divisible by block size {self.block_size}")
            if n % self.grid_size:
                raise DimensionError(f"gated MLP: {axis}={n} is not divisible by grid size {self.grid_size}")
        shortcut = transpose_axes(x, (0, 2, 3, 1))
        y = gelu(self.proj_in(self.norm(shortcut)))
        local, global_ = split(y, [self.channels, self.channels], axis=-1)
        y = concat([self.block_gate(local), self.grid_gate(global_)], axis=-1)
        y = shortcut + self.proj_out(y)
        return transpose_axes(y, (0, 3, 1, 2))


class ChannelAttention(Module):
    """Squeeze-excite: pool -> C/r -> ReLU -> C -> sigmoid -> rescale channels."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype=np.float32):
        if channels % reduction:
            raise DimensionError(f"channels {channels} not divisible by reduction ratio {reduction}")
        self.channels, self.reduction = channels, reduction
        self.squeeze = Dense(channels, channels // reduction, rng, dtype)
        self.excite = Dense(channels // reduction, channels, rng, dtype)

    def scale(self, x: Tensor) -> Tensor:
        pooled = reduce_mean(x, axis=(2, 3))
        return sigmoid(self.excite(relu(self.squeeze(pooled))))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"channel attention expects {self.channels} channels, got shape {x.shape}")
        s = self.scale(x)
        return x * reshape(s, s.shape + (1, 1))


class HybridBlock(Module):
    """Fuse conv -> gated MLP -> channel attention -> fuse conv.

    The second fusing convolution sees the attention output concatenated
    with the first fusion output (the second step of the skip connection).
    """

    def __init__(
        self,
        up_channels: int,
        skip_channels: int,
        depth: int,
        rng: np.random.Generator,
        block_size: int = 4,
        grid_size: int = 4,
        reduction: int = 4,
        dtype=np.float32,
        zero_init_output: bool = False,
    ):
        self.up_channels, self.skip_channels, self.depth = up_channels, skip_channels, depth
        self.fuse1 = Conv3x3(up_channels + skip_channels, depth, rng, dtype)
        self.bn1 = BatchNorm(depth, dtype)
        self.gmlp = MultiAxisGatedMlp(depth, rng, block_size, grid_size, dtype, zero_init_output)
        self.attention = ChannelAttention(depth, rng, reduction, dtype)
        self.fuse2 = Conv3x3(2 * depth, depth, rng, dtype)
        self.bn2 = BatchNorm(depth, dtype)

    def __call__(self, up: Tensor, skip: Tensor) -> Tensor:
        if up.shape[2:] != skip.shape[2:]:
            raise DimensionError(f"hybrid block spatial mismatch: {up.shape[2:]} vs {skip.shape[2:]}")
        f1 = relu(self.bn1(self.fuse1(concat_channels([up, skip]))))
        f2 = self.attention(self.gmlp(f1))
        return relu(self.bn2(self.fuse2(concat_channels([f2, f1]))))


class CnnDecoderBlock(Module):
    """Plain ConvBlock on the concatenated (up, skip) inputs."""

    def __init__(self, up_channels: int, skip_channels: int, depth: int, rng: np.random.Generator, dtype=np.float32):
        self.block = ConvBlock(up_channels + skip_channels, depth, rng, dtype)

    def __call__(self, up: Tensor, skip: Tensor) -> Tensor:
        if up.shape[2:] != skip.shape[2:]:
            raise DimensionError(f"decoder block spatial mismatch: {up.shape[2:]} vs {skip.shape[2:]}")
        return self.block(concat_channels([up, skip]))
