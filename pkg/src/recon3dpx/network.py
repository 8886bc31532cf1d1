"""The progressive pyramid network: stem, encoder, bottleneck, decoder and
per-level reconstruction taps; plus the checkpoint container."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DimensionError, Tensor, max_pool2d, relu, upsample2d
from .blocks import BatchNorm, CnnDecoderBlock, Conv3x3, ConvBlock, HybridBlock, Module

N_BLOCKS = 8  # four encoder + four decoder blocks
FIRST_TAP = 3  # B3 is the first block whose output has depth channels


@dataclass(frozen=True)
class NetworkConfig:
    input_hw: tuple[int, int] = (32, 64)
    depth: int = 16
    stem_channels: int = 8
    encoder_channels: tuple[int, ...] = (8, 16, 16, 16)
    bottleneck_channels: int = 64
    decoder_type: str = "hybrid"
    progressive: bool = True
    block_size: int = 4
    grid_size: int = 4
    reduction: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        h, w = self.input_hw
        if h % 8 or w % 8:
            raise ValueError(f"input_hw {self.input_hw} must be divisible by 8 (three pooling stages)")
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels must list exactly 4 block widths")
        if self.decoder_type not in ("cnn", "hybrid"):
            raise ValueError(f"decoder_type must be 'cnn' or 'hybrid', got {self.decoder_type!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def paper_scale(cls, **overrides) -> "NetworkConfig":
        base = dict(
            input_hw=(128, 256),
            depth=128,
            stem_channels=16,
            encoder_channels=(32, 64, 128, 128),
            bottleneck_channels=256,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def level_sizes(self) -> dict[int, tuple[int, int]]:
        """Spatial size of every emitted reconstruction level."""
        h, w = self.input_hw
        sizes = {3: (h // 8, w // 8), 4: (h // 8, w // 8), 5: (h // 4, w // 4), 6: (h // 2, w // 2), 7: (h, w)}
        return sizes if self.progressive else {7: sizes[7]}


@dataclass
class PyramidOutput:
    levels: dict[int, Tensor] = field(default_factory=dict)

    @property
    def final(self) -> Tensor:
        return self.levels[max(self.levels)]


class Net3DPX(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        c = config.encoder_channels
        d = config.depth
        self.stem = Conv3x3(1, config.stem_channels, rng, dt)
        self.enc0 = ConvBlock(config.stem_channels, c[0], rng, dt)
        self.enc1 = ConvBlock(c[0], c[1], rng, dt)
        self.enc2 = ConvBlock(c[1], c[2], rng, dt)
        self.enc3 = ConvBlock(c[2], c[3], rng, dt)
        self.bottleneck = Conv3x3(c[3], config.bottleneck_channels, rng, dt)
        self.bottleneck_bn = BatchNorm(config.bottleneck_channels, dt)
        ups = [config.bottleneck_channels, d, d, d]
        skips = [c[3], c[2], c[1], c[0]]
        for i, (up, skip) in enumerate(zip(ups, skips)):
            if config.decoder_type == "hybrid":
                blk = HybridBlock(
                    up, skip, d, rng, config.block_size, config.grid_size, config.reduction, dt
                )
            else:
                blk = CnnDecoderBlock(up, skip, d, rng, dt)
            setattr(self, f"dec{i}", blk)

    def __call__(self, px: Tensor) -> PyramidOutput:
        return self.forward(px)

    def forward(self, px: Tensor) -> PyramidOutput:
        cfg = self.config
        if px.ndim != 4 or px.shape[1] != 1:
            raise DimensionError(f"expected px of shape [B,1,H,W], got {px.shape}")
        if tuple(px.shape[2:]) != cfg.input_hw:
            raise DimensionError(f"px spatial size {px.shape[2:]} != configured {cfg.input_hw}")
        x = relu(self.stem(px))
        e0 = self.enc0(x)
        e1 = self.enc1(max_pool2d(e0))
        e2 = self.enc2(max_pool2d(e1))
        e3 = self.enc3(max_pool2d(e2))
        bott = relu(self.bottleneck_bn(self.bottleneck(e3)))
        d0 = self.dec0(bott, e3)
        d1 = self.dec1(upsample2d(d0), e2)
        d2 = self.dec2(upsample2d(d1), e1)
        d3 = self.dec3(upsample2d(d2), e0)
        if not cfg.progressive:
            return PyramidOutput({7: d3})
        return PyramidOutput({3: e3, 4: d0, 5: d1, 6: d2, 7: d3})


def parameter_count(config: NetworkConfig) -> int:
    """Trainable scalar count, computed in closed form from the config."""

    def conv(cin, cout):
        return cout * cin * 9 + cout

    def bn(c):
        return 2 * c

    def conv_block(cin, cout):
        return conv(cin, cout) + bn(cout) + conv(cout, cout) + bn(cout)

    def dense(cin, cout):
        return cin * cout + cout

    def gating(c, window):
        p = window * window
        return 2 * (c // 2) + p * p + p

    def gmlp(c):
        return 2 * c + dense(c, 2 * c) + gating(c, config.block_size) + gating(c, config.grid_size) + dense(c, c)

    def attention(c):
        return dense(c, c // config.reduction) + dense(c // config.reduction, c)

    ch = config.encoder_channels
    d = config.depth
    total = conv(1, config.stem_channels)
    total += conv_block(config.stem_channels, ch[0])
    total += sum(conv_block(a, b) for a, b in zip(ch[:-1], ch[1:]))
    total += conv(ch[3], config.bottleneck_channels) + bn(config.bottleneck_channels)
    for up, skip in zip([config.bottleneck_channels, d, d, d], [ch[3], ch[2], ch[1], ch[0]]):
        if config.decoder_type == "hybrid":
            total += conv(up + skip, d) + bn(d) + gmlp(d) + attention(d) + conv(2 * d, d) + bn(d)
        else:
            total += conv_block(up + skip, d)
    return total


# ---------------------------------------------------------------------------
# Checkpoint container
#
#   b"3DPX" | u32 version | 32-byte sha256 config digest
#   | u32 config-json length | config json
#   | u32 tensor count | per tensor: u16 name length, name, u8 dtype code,
#     u8 ndim, ndim * u32 dims, little-endian payload
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"3DPX"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class DigestMismatch(CheckpointError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"config digest mismatch: expected {expected[:16]}..., checkpoint has {found[:16]}...")
        self.expected, self.found = expected, found


def model_state(model: Net3DPX) -> dict[str, np.ndarray]:
    state = {f"param.{k}": v.data for k, v in model.named_parameters()}
    state.update({f"buffer.{k}": v for k, v in model.named_buffers()})
    return state


def save_checkpoint(path: str | os.PathLike, model: Net3DPX) -> None:
    """Write atomically: serialize to a sibling temp file, then rename."""
    cfg = model.config
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    state = model_state(model)
    chunks = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        bytes.fromhex(cfg.digest()),
        struct.pack("<I", len(cfg_json)),
        cfg_json,
        struct.pack("<I", len(state)),
    ]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[NetworkConfig, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[8:40].hex()
    (n,) = struct.unpack_from("<I", buf, 40)
    pos = 44
    cfg = NetworkConfig.from_dict(json.loads(buf[pos : pos + n]))
    pos += n
    if cfg.digest() != digest:
        raise CheckpointError(f"{path}: embedded config does not hash to the stored digest")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dt.itemsize
        state[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    return cfg, state


def load_checkpoint(path: str | os.PathLike, expected: NetworkConfig | None = None) -> Net3DPX:
    """Rebuild a model from a checkpoint, refusing a config digest mismatch."""
    cfg, state = read_checkpoint(path)
    if expected is not None and expected.digest() != cfg.digest():
        raise DigestMismatch(expected.digest(), cfg.digest())
    model = Net3DPX(cfg)
    load_state(model, state)
    return model


def load_state(model: Net3DPX, state: dict[str, np.ndarray]) -> None:
    current = model_state(model)
    if set(current) != set(state):
        missing = sorted(set(current) - set(state))
        extra = sorted(set(state) - set(current))
        raise CheckpointError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, arr in current.items():
        if arr.shape != state[name].shape:
            raise CheckpointError(f"{name}: shape {state[name].shape} != {arr.shape}")
        arr[...] = state[name]
