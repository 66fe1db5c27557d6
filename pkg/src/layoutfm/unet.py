"""UNet with residual blocks, deep self-attention and command-channel intake."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import tensor as T
from .nn.layers import Conv2d, Downsample, GroupNorm, Module, ResidualBlock, SelfAttention, Upsample
from .nn.tensor import ConfigError, DimensionError, Tensor

MAGIC = b"ALFW"
VERSION = 1
HEAD_BIAS = -9.0  # sigmoid ≈ 1.2e-4
HEAD_WEIGHT_SCALE = 0.1


class IncompatibleWeightsError(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 21
    command_channels: int = 0
    stem_channels: int = 8
    levels: int = 3
    res_blocks_per_level: int = 2
    attention_heads: int = 2
    attention: bool = True
    groups: int = 4
    patch_px: int = 64

    @property
    def out_channels(self) -> int:
        return self.in_channels

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.patch_px % (2 ** self.levels):
            raise ConfigError(f"patch_px {self.patch_px} not divisible by 2^levels = {2 ** self.levels}")
        if self.stem_channels % self.groups:
            raise ConfigError("stem_channels must be divisible by groups")
        if self.command_channels < 0 or self.res_blocks_per_level < 1:
            raise ConfigError("command_channels >= 0 and res_blocks_per_level >= 1 required")

    def channels(self, level: int) -> int:
        return self.stem_channels * 2 ** level

    def attention_levels(self) -> tuple[int, ...]:
        """Down/up levels carrying attention; the bottleneck always does when enabled."""
        return (self.levels - 1,) if self.attention else ()

    def fingerprint(self) -> bytes:
        d = asdict(self)
        d.pop("command_channels")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class _Stage(Module):
    def __init__(self, cin: int, cout: int, blocks: int, attn_heads: int | None, rng, groups: int):
        super().__init__()
        self.blocks = []
        c = cin
        for i in range(blocks):
            self.blocks.append(self.add_child(f"res{i}", ResidualBlock(c, cout, rng, groups)))
            c = cout
        self.attn = (self.add_child("attn", SelfAttention(cout, attn_heads, rng))
                     if attn_heads else None)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        if self.attn is not None:
            x = self.attn(x)
        return x


class UNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        heads = cfg.attention_heads
        attn_at = set(cfg.attention_levels())
        nb = cfg.res_blocks_per_level
        self.stem = self.add_child("stem", Conv2d(cfg.in_channels + cfg.command_channels,
                                                  cfg.stem_channels, 3, rng))
        self.down, self.pool = [], []
        for i in range(cfg.levels):
            c = cfg.channels(i)
            self.down.append(self.add_child(
                f"down{i}", _Stage(c, c, nb, heads if i in attn_at else None, rng, cfg.groups)))
            self.pool.append(self.add_child(f"pool{i}", Downsample(c, cfg.channels(i + 1), rng)))
        cb = cfg.channels(cfg.levels)
        self.mid = self.add_child("mid", _Stage(cb, cb, nb, heads if cfg.attention else None,
                                                rng, cfg.groups))
        self.up, self.ups = [], []
        for i in reversed(range(cfg.levels)):
            c = cfg.channels(i)
            self.ups.append(self.add_child(f"upsample{i}", Upsample(cfg.channels(i + 1), c, rng)))
            self.up.append(self.add_child(
                f"up{i}", _Stage(2 * c, c, nb, heads if i in attn_at else None, rng, cfg.groups)))
        self.head_norm = self.add_child("head_norm", GroupNorm(cfg.stem_channels, cfg.groups))
        self.head = self.add_child("head", Conv2d(cfg.stem_channels, cfg.out_channels, 1, rng))
        # start every channel near "nothing missing" so none saturates at 1 early on
        self.head.weight.data *= np.float32(HEAD_WEIGHT_SCALE)
        self.head.bias.data[:] = np.float32(HEAD_BIAS)

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.stem.weight.data.dtype))
        cfg = self.config
        want = cfg.in_channels + cfg.command_channels
        if x.data.ndim != 4 or x.shape[1] != want or x.shape[2:] != (cfg.patch_px, cfg.patch_px):
            raise DimensionError(
                f"UNet expects N×{want}×{cfg.patch_px}×{cfg.patch_px}, got {tuple(x.shape)}")
        h = self.stem(x)
        skips = []
        for stage, pool in zip(self.down, self.pool):
            h = stage(h)
            skips.append(h)
            h = pool(h)
        h = self.mid(h)
        for ups, stage in zip(self.ups, self.up):
            h = ups(h)
            h = stage(T.concat([h, skips.pop()], axis=1))
        return T.sigmoid(self.head(T.relu(self.head_norm(h))))

    def predict(self, x: np.ndarray, batch: int = 8) -> np.ndarray:
        """Forward without recording a graph consumer; returns numpy probabilities."""
        outs = []
        for i in range(0, len(x), batch):
            outs.append(self.forward(Tensor(np.asarray(x[i:i + batch], np.float32))).data)
        if not outs:
            c = self.config
            return np.zeros((0, c.out_channels, c.patch_px, c.patch_px), np.float32)
        return np.concatenate(outs, axis=0)

    def state(self) -> "dict[str, np.ndarray]":
        return {k: v.data for k, v in self.named_parameters()}


def build_model(config: ModelConfig, seed: int = 0) -> UNet:
    return UNet(config, seed)


# ----------------------------------------------------------------------------
# persistence


def save_weights(model: UNet, path) -> None:
    params = list(model.named_parameters())
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += model.config.fingerprint()
    buf += struct.pack("<I", len(params))
    for name, t in params:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_weights(path) -> tuple[bytes, "dict[str, np.ndarray]"]:
    """Parse a weights file into (fingerprint, ordered name → array)."""
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise WeightFormatError(f"truncated weights file: need {n} bytes for {what} at offset {off}, "
                                    f"file has {len(data)}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightFormatError("bad magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version} at offset 4")
    fp = take(32, "fingerprint")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"values of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if off != len(data):
        raise WeightFormatError(f"trailing bytes after offset {off}")
    return fp, tensors


def _assign(model: UNet, tensors: dict) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(own))[:3]
        raise IncompatibleWeightsError(f"parameter names differ (missing {missing}, extra {extra})")
    for name, t in own.items():
        if t.shape != tensors[name].shape:
            raise IncompatibleWeightsError(
                f"{name}: stored shape {tensors[name].shape} != model shape {t.shape}")
        t.data = tensors[name].copy()


def load_weights(path, config: ModelConfig) -> UNet:
    fp, tensors = read_weights(path)
    if fp != config.fingerprint():
        raise IncompatibleWeightsError("weights fingerprint does not match model config")
    model = UNet(config, seed=0)
    _assign(model, tensors)
    return model


def model_from_state(config: ModelConfig, state: dict) -> UNet:
    model = UNet(config, seed=0)
    _assign(model, state)
    return model


@dataclass
class CopyReport:
    copied: int = 0
    fresh: int = 0
    fresh_slices: list[str] = field(default_factory=list)


def load_pretrained_for_task(foundation: "dict[str, np.ndarray] | UNet", foundation_config: ModelConfig,
                             task_config: ModelConfig, seed: int = 0) -> tuple[UNet, CopyReport]:
    """Build a task model, copying every foundation tensor; extra stem inputs start random."""
    if replace(task_config, command_channels=foundation_config.command_channels) != foundation_config:
        raise IncompatibleWeightsError("task config differs from foundation beyond command channels")
    if task_config.command_channels < foundation_config.command_channels:
        raise IncompatibleWeightsError("task model cannot drop command channels")
    state = foundation.state() if isinstance(foundation, UNet) else foundation
    model = UNet(task_config, seed=seed)
    own = dict(model.named_parameters())
    if set(own) != set(state):
        raise IncompatibleWeightsError("foundation parameter names do not match task model")
    report = CopyReport()
    base_in = foundation_config.in_channels + foundation_config.command_channels
    for name, t in own.items():
        src = np.asarray(state[name], dtype=np.float32)
        if name == "stem.weight" and src.shape != t.shape:
            if src.shape[0] != t.shape[0] or src.shape[2:] != t.shape[2:] or src.shape[1] != base_in:
                raise IncompatibleWeightsError(f"stem shape {src.shape} incompatible with {t.shape}")
            w = t.data.copy()  # fresh slices keep this model's seeded init
            w[:, :base_in] = src
            t.data = w
            report.copied += 1
            for k in range(base_in, t.shape[1]):
                report.fresh += 1
                report.fresh_slices.append(f"stem.weight[:, {k}]")
            continue
        if src.shape != t.shape:
            raise IncompatibleWeightsError(f"{name}: {src.shape} vs {t.shape}")
        t.data = src.copy()
        report.copied += 1
    return model, report
