"""Model configuration, builders for the three experiment presets, and
checkpoint serialization.

Presets:
  gmlp4  — no conv stem, 4x4 patches (64 tokens), 4 spatial-gated blocks
  cgmlp1 — 1 conv stem block ([32] channels, 16x16 map -> 256 tokens)
  cgmlp2 — 2 conv stem blocks ([32, 64] channels, 8x8 map -> 64 tokens)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .layers import (ClassifierHead, ConvStemBlock, FeatureMapTokenizer, GmlpBlock,
                     PatchEmbed)
from .tensor import Rng, ShapeError, Tape, Tensor

IMAGE_SIZE = 32

CHECKPOINT_MAGIC = b"CGMLP1\0"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A ModelConfig invariant is violated."""


class CheckpointError(Exception):
    """Checkpoint file is malformed or inconsistent."""


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class TensorMismatchError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    dataset: str = "cifar10"
    stem_layers: int = 0
    stem_channels: tuple = ()
    patch_size: int = 4
    d_model: int = 256
    d_ffn: int = 512
    num_blocks: int = 4
    gating: tuple = ()  # per-block "spatial" | "channel"; empty = all spatial
    seed: int = 0
    norm_mean: tuple = (0.0, 0.0, 0.0)
    norm_std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.gating:
            self.gating = ("spatial",) * self.num_blocks
        self.stem_channels = tuple(self.stem_channels)
        self.gating = tuple(self.gating)
        self.validate()

    @property
    def num_classes(self) -> int:
        return {"cifar10": 10, "cifar100": 100}[self.dataset]

    @property
    def tokens(self) -> int:
        if self.stem_layers > 0:
            side = IMAGE_SIZE // (2 ** self.stem_layers)
        else:
            side = IMAGE_SIZE // self.patch_size
        return side * side

    def validate(self) -> None:
        if self.dataset not in ("cifar10", "cifar100"):
            raise ConfigError(f"dataset: must be cifar10 or cifar100, got {self.dataset!r}")
        if self.stem_layers < 0:
            raise ConfigError(f"stem_layers: must be >= 0, got {self.stem_layers}")
        if self.stem_layers != len(self.stem_channels):
            raise ConfigError(f"stem_channels: expected {self.stem_layers} entries, "
                              f"got {len(self.stem_channels)}")
        if self.d_model % 2:
            raise ConfigError(f"d_model: must be even, got {self.d_model}")
        if self.d_ffn % 2:
            raise ConfigError(f"d_ffn: must be even, got {self.d_ffn}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks: must be >= 1, got {self.num_blocks}")
        if len(self.gating) != self.num_blocks:
            raise ConfigError(f"gating: expected {self.num_blocks} entries, "
                              f"got {len(self.gating)}")
        for g in self.gating:
            if g not in ("spatial", "channel"):
                raise ConfigError(f"gating: unknown kind {g!r}")
        if self.stem_layers > 0:
            if IMAGE_SIZE % (2 ** self.stem_layers):
                raise ConfigError(f"stem_layers: {IMAGE_SIZE} not divisible by "
                                  f"2^{self.stem_layers}")
        else:
            if self.patch_size < 1 or IMAGE_SIZE % self.patch_size:
                raise ConfigError(f"patch_size: {IMAGE_SIZE} not divisible by "
                                  f"{self.patch_size}")
        if any(g == "channel" for g in self.gating) and self.tokens % 2:
            raise ConfigError(f"gating: channel gating needs an even token count, "
                              f"got {self.tokens}")


PRESETS = {
    "gmlp4": dict(stem_layers=0, stem_channels=(), patch_size=4),
    "cgmlp1": dict(stem_layers=1, stem_channels=(32,), patch_size=4),
    "cgmlp2": dict(stem_layers=2, stem_channels=(32, 64), patch_size=4),
}


def preset_config(name: str, dataset: str = "cifar100", **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(dataset=dataset, **kw)


class Model:
    """Instantiated parameter set plus the forward composition
    conv stem -> tokenize / patch embed -> gMLP blocks -> classifier head."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.dtype = dtype
        rng = Rng(cfg.seed)
        self.stem = []
        c_in = 3
        for c_out in cfg.stem_channels:
            self.stem.append(ConvStemBlock(rng, c_in, c_out, dtype))
            c_in = c_out
        if cfg.stem_layers > 0:
            self.embed = FeatureMapTokenizer(rng, c_in, cfg.d_model, dtype)
        else:
            self.embed = PatchEmbed(rng, 3, cfg.patch_size, cfg.d_model, dtype)
        self.blocks = [GmlpBlock(rng, cfg.tokens, cfg.d_model, cfg.d_ffn, g, dtype)
                       for g in cfg.gating]
        self.head = ClassifierHead(rng, cfg.d_model, cfg.num_classes, dtype)

        self.params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.stem):
            self._register(f"stem.{i}", blk)
        self._register("embed", self.embed)
        for i, blk in enumerate(self.blocks):
            self._register(f"block.{i}", blk)
        self._register("head", self.head)

    def _register(self, prefix: str, layer) -> None:
        for name, t in layer.params():
            full = f"{prefix}.{name}"
            if full in self.params:
                raise ValueError(f"duplicate parameter name {full}")
            t.name = full
            self.params[full] = t

    def capture_names(self) -> list[str]:
        names = []
        for i in range(len(self.stem)):
            names += [f"stem.{i}.act", f"stem.{i}.pool"]
        return names

    def forward(self, batch: Tensor, tape: Tape | None = None,
                capture: dict | None = None) -> Tensor:
        if batch.data.ndim != 4 or batch.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"forward: expected [B,3,{IMAGE_SIZE},{IMAGE_SIZE}], "
                             f"got {batch.shape}")
        h = batch
        for i, blk in enumerate(self.stem):
            h = blk.forward(h, tape, capture=capture, tag=f"stem.{i}")
        h = self.embed.forward(h, tape)
        for blk in self.blocks:
            h = blk.forward(h, tape)
        return self.head.forward(h, tape)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_copy(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.data[...] = state[n]

    def to_dtype(self, dtype) -> "Model":
        """Fresh model with the same config and parameter values cast to dtype."""
        m = Model(self.config, dtype=dtype)
        for n, t in m.params.items():
            t.data[...] = self.params[n].data.astype(dtype)
        return m


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    return Model(cfg, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint format: magic "CGMLP1\0", u32 version, u32 config-text length +
# UTF-8 canonical config, then per tensor: u32 name length, name, u32 rank,
# rank x u64 dims, float32 little-endian payload.  Read until EOF.


def config_to_text(cfg: ModelConfig) -> str:
    def floats(xs):
        return ",".join(float(x).hex() for x in xs)

    lines = [
        f"dataset={cfg.dataset}",
        f"stem_layers={cfg.stem_layers}",
        "stem_channels=" + ",".join(str(c) for c in cfg.stem_channels),
        f"patch_size={cfg.patch_size}",
        f"d_model={cfg.d_model}",
        f"d_ffn={cfg.d_ffn}",
        f"num_blocks={cfg.num_blocks}",
        "gating=" + ",".join(cfg.gating),
        f"seed={cfg.seed}",
        "norm_mean=" + floats(cfg.norm_mean),
        "norm_std=" + floats(cfg.norm_std),
    ]
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.strip().splitlines():
        k, _, v = line.partition("=")
        kv[k] = v

    def ints(s):
        return tuple(int(x) for x in s.split(",")) if s else ()

    def floats(s):
        return tuple(float.fromhex(x) for x in s.split(","))

    try:
        return ModelConfig(
            dataset=kv["dataset"],
            stem_layers=int(kv["stem_layers"]),
            stem_channels=ints(kv["stem_channels"]),
            patch_size=int(kv["patch_size"]),
            d_model=int(kv["d_model"]),
            d_ffn=int(kv["d_ffn"]),
            num_blocks=int(kv["num_blocks"]),
            gating=tuple(kv["gating"].split(",")),
            seed=int(kv["seed"]),
            norm_mean=floats(kv["norm_mean"]),
            norm_std=floats(kv["norm_std"]),
        )
    except KeyError as e:
        raise CheckpointError(f"config text missing field {e}") from None


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    text = config_to_text(model.config).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        for dim in t.data.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise TruncatedError(f"checkpoint truncated while reading {what}")
    return b


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint.  If `config` is given it overrides
    the embedded one; tensor shapes must then still match."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tlen, = struct.unpack("<I", _read_exact(f, 4, "config length"))
        text = _read_exact(f, tlen, "config text").decode("utf-8")
        cfg = config if config is not None else config_from_text(text)
        model = Model(cfg)
        seen = set()
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise TruncatedError("checkpoint truncated while reading tensor name length")
            nlen, = struct.unpack("<I", head)
            name = _read_exact(f, nlen, "tensor name").decode("utf-8")
            rank, = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"dims of {name}"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(f, 4 * count, f"payload of {name}")
            if name not in model.params:
                raise TensorMismatchError(f"unexpected tensor {name!r} for this config")
            t = model.params[name]
            if tuple(dims) != t.data.shape:
                raise TensorMismatchError(f"tensor {name!r}: checkpoint shape {tuple(dims)} "
                                          f"!= config shape {t.data.shape}")
            t.data[...] = np.frombuffer(payload, dtype="<f4").reshape(dims)
            seen.add(name)
        missing = set(model.params) - seen
        if missing:
            raise TensorMismatchError(f"checkpoint missing tensors: {sorted(missing)[:3]}")
    return model


def with_norm_stats(cfg: ModelConfig, mean, std) -> ModelConfig:
    return replace(cfg, norm_mean=tuple(float(x) for x in mean),
                   norm_std=tuple(float(x) for x in std))
