"""Model assembly, configuration validation and checkpoint files."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, FormatError
from .layers import (POS_EMBEDDINGS, Conv3d, DecoderStage, GroupNorm, PatchEmbedding,
                     ResNetEncoder, SegmentationHead, UNetLevel, ViTEncoder, ViTSpec,
                     encoder_block_specs, encoder_channels)
from .nn import Module, ModuleList

KINDS = ("trunet", "res_unet", "localizer")
PATCH_EXTENT = 16  # total downsampling of the CNN encoder


@dataclass
class ModelConfig:
    kind: str = "trunet"
    input_extent: int = 224
    num_classes: int = 6
    in_channels: int = 1
    width_multiplier: Fraction = Fraction(1)
    block_depths: tuple = (3, 4, 9)
    vit: ViTSpec = field(default_factory=ViTSpec)
    decoder_channels: tuple = (512, 256, 128, 64)
    unet_channels: tuple = (16, 32, 64, 128, 256)
    unet_res_units: int = 2
    head_upsample: bool = False

    def __post_init__(self):
        self.width_multiplier = Fraction(self.width_multiplier)
        self.block_depths = tuple(self.block_depths)
        self.decoder_channels = tuple(self.decoder_channels)
        self.unet_channels = tuple(self.unet_channels)
        if isinstance(self.vit, dict):
            self.vit = ViTSpec(**self.vit)
        if self.kind == "localizer":
            self.num_classes = 2

    # -- derived quantities ----------------------------------------------
    @property
    def grid_extent(self) -> int:
        return self.input_extent // PATCH_EXTENT

    @property
    def token_count(self) -> int:
        return self.grid_extent ** 3

    @property
    def voxels_per_patch(self) -> int:
        return PATCH_EXTENT ** 3

    @property
    def unet_factor(self) -> int:
        return 2 ** (len(self.unet_channels) - 1)

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            out.append(f"kind must be one of {KINDS}, got {self.kind!r}")
            return out
        if self.input_extent < 1:
            out.append("input_extent must be positive")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if self.kind == "trunet":
            if self.input_extent % PATCH_EXTENT:
                out.append(f"input_extent {self.input_extent} not divisible by {PATCH_EXTENT}")
            if self.vit.hidden % self.vit.heads:
                out.append(f"vit.hidden {self.vit.hidden} not divisible by vit.heads {self.vit.heads}")
            if self.vit.layers < 1 or self.vit.mlp < 1:
                out.append("vit.layers and vit.mlp must be positive")
            if self.vit.pos_embedding not in POS_EMBEDDINGS:
                out.append(f"vit.pos_embedding must be one of {POS_EMBEDDINGS}")
            if len(self.block_depths) != 3 or min(self.block_depths) < 1:
                out.append("block_depths must be three positive ints")
            if len(self.decoder_channels) != 4 or min(self.decoder_channels) < 1:
                out.append("decoder_channels must be four positive ints")
            for base in (64, 256, 512, 1024):
                v = base * self.width_multiplier
                if v.denominator != 1 or v < 1:
                    out.append(f"width_multiplier {self.width_multiplier} gives {v} channels for {base}")
                    break
        else:
            if len(self.unet_channels) < 2 or min(self.unet_channels) < 1:
                out.append("unet_channels needs at least two positive entries")
            elif self.input_extent % self.unet_factor:
                out.append(f"input_extent {self.input_extent} not divisible by {self.unet_factor}")
            if self.unet_res_units < 1:
                out.append("unet_res_units must be >= 1")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        d["block_depths"] = list(self.block_depths)
        d["decoder_channels"] = list(self.decoder_channels)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "vit" in d and isinstance(d["vit"], dict):
            d["vit"] = ViTSpec(**d["vit"])
        if "width_multiplier" in d:
            d["width_multiplier"] = Fraction(d["width_multiplier"])
        return cls(**d)


def full_trunet_config() -> ModelConfig:
    return ModelConfig(kind="trunet", input_extent=224, num_classes=6)


def toy_trunet_config(**overrides) -> ModelConfig:
    base = dict(kind="trunet", input_extent=32, num_classes=6,
                width_multiplier=Fraction(1, 8), block_depths=(1, 1, 2),
                vit=ViTSpec(hidden=64, mlp=128, heads=4, layers=2),
                decoder_channels=(64, 32, 16, 8))
    base.update(overrides)
    return ModelConfig(**base)


def toy_res_unet_config(**overrides) -> ModelConfig:
    base = dict(kind="res_unet", input_extent=32, num_classes=6)
    base.update(overrides)
    return ModelConfig(**base)


# -- models -------------------------------------------------------------------

class TRUNet(Module):
    """ResNet encoder -> token transformer -> cascade decoder with skips -> softmax head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.width_multiplier
        self.encoder = ResNetEncoder(config.in_channels, w, config.block_depths, rng)
        vit = config.vit
        self.embedding = PatchEmbedding(self.encoder.out_channels, vit.hidden, config.token_count,
                                        vit.pos_embedding, rng)
        self.transformer = ViTEncoder(vit, rng)
        dec = config.decoder_channels
        self.bridge = Conv3d(vit.hidden, dec[0], 3, 1, 1, bias=False, rng=rng)
        self.bridge_norm = GroupNorm(dec[0])
        skip_ch = self.encoder.skip_channels
        self.decoder = ModuleList([
            DecoderStage(dec[0], skip_ch[2], dec[0], rng),
            DecoderStage(dec[0], skip_ch[1], dec[1], rng),
            DecoderStage(dec[1], skip_ch[0], dec[2], rng),
            DecoderStage(dec[2], 0, dec[3], rng),
        ])
        self.head = SegmentationHead(dec[3], config.num_classes,
                                     config.input_extent if config.head_upsample else None, rng)

    def forward(self, x):
        if x.shape[1:] != (self.config.in_channels,) + (self.config.input_extent,) * 3:
            raise ConfigurationError(f"TRUNet expects input [N,{self.config.in_channels},"
                                     f"{self.config.input_extent}^3], got {x.shape}")
        features, skips = self.encoder(x)
        tokens = self.transformer(self.embedding(features))
        n, t, e = tokens.shape
        g = self.config.grid_extent
        grid = T.reshape(T.transpose(tokens, (0, 2, 1)), (n, e, g, g, g))
        y = T.relu(self.bridge_norm(self.bridge(grid)))
        y = self.decoder[0](y, skips[2])
        y = self.decoder[1](y, skips[1])
        y = self.decoder[2](y, skips[0])
        y = self.decoder[3](y)
        return self.head(y)


class ResUNet(Module):
    """Residual U-Net: strided residual units down, upsample+conv units up, softmax head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.body = UNetLevel(config.in_channels, config.num_classes, config.unet_channels,
                              config.unet_res_units, True, rng)

    def forward(self, x):
        if x.shape[2:] != (self.config.input_extent,) * 3:
            raise ConfigurationError(f"ResUNet expects extent {self.config.input_extent}, got {x.shape}")
        return T.softmax(self.body(x), axis=1)


def build_trunet(config: ModelConfig, seed: int = 0) -> TRUNet:
    if config.kind != "trunet":
        raise ConfigurationError(f"build_trunet needs kind 'trunet', got {config.kind!r}")
    return TRUNet(config, seed)


def build_res_unet(config: ModelConfig, seed: int = 0) -> ResUNet:
    if config.kind not in ("res_unet", "localizer"):
        raise ConfigurationError(f"build_res_unet needs kind 'res_unet', got {config.kind!r}")
    return ResUNet(config, seed)


def build_localizer(config: ModelConfig, seed: int = 0) -> ResUNet:
    """Residual U-Net for binary heart/background segmentation (always 2 classes)."""
    cfg = dataclasses.replace(config, kind="localizer", num_classes=2)
    return ResUNet(cfg, seed)


def build_model(config: ModelConfig, seed: int = 0) -> Module:
    if config.kind == "trunet":
        return build_trunet(config, seed)
    if config.kind == "localizer":
        return build_localizer(config, seed)
    return build_res_unet(config, seed)


def describe(config: ModelConfig) -> dict:
    """Symbolic structure summary derived from the config alone (no weights)."""
    config.validate()
    s = config.input_extent
    if config.kind == "trunet":
        ch = encoder_channels(config.width_multiplier)
        blocks = encoder_block_specs(config.width_multiplier, config.block_depths)
        return {
            "kind": "trunet",
            "input_extent": s,
            "encoder_blocks": [len(b) for b in blocks],
            "bottleneck_units": sum(len(b) for b in blocks),
            "encoder_out_channels": ch["blocks"][-1],
            "feature_extent": s // PATCH_EXTENT,
            "skip_channels": [ch["stem"], ch["blocks"][0], ch["blocks"][1]],
            "skip_extents": [s // 2, s // 4, s // 8],
            "patch_extent": PATCH_EXTENT,
            "token_grid": config.grid_extent,
            "token_count": config.token_count,
            "voxels_per_patch": config.voxels_per_patch,
            "vit": {"hidden": config.vit.hidden, "mlp": config.vit.mlp,
                    "heads": config.vit.heads, "layers": config.vit.layers,
                    "pos_embedding": config.vit.pos_embedding},
            "decoder_channels": list(config.decoder_channels),
            "num_classes": config.num_classes,
            "output_shape": [config.num_classes, s, s, s],
        }
    return {
        "kind": config.kind,
        "input_extent": s,
        "levels": len(config.unet_channels),
        "channels": list(config.unet_channels),
        "convs_per_unit": config.unet_res_units,
        "kernel": 3,
        "stride": 2,
        "activation": "prelu",
        "num_classes": config.num_classes,
        "output_shape": [config.num_classes, s, s, s],
    }


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"TRUNETCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Module, path, step: int = 0, optimizer=None,
                    extra: Optional[dict] = None) -> None:
    """Write magic, a u32-length-prefixed JSON header and a little-endian f32 blob."""
    records, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    moments = []
    opt_step = None
    if optimizer is not None:
        opt_step = optimizer.step_count
        for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
            for name, arr in zip(optimizer.names, store):
                a = np.ascontiguousarray(arr, dtype="<f4")
                moments.append({"name": f"{kind}:{name}", "shape": list(a.shape), "offset": offset})
                blobs.append(a.tobytes())
                offset += a.nbytes
    header = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
              "names": records, "moments": moments, "optimizer_step": opt_step,
              "step": int(step), "extra": extra or {}, "payload_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


@dataclass
class Checkpoint:
    model: Module
    step: int
    extra: dict
    moments: dict  # "m:<name>" / "v:<name>" -> array
    optimizer_step: Optional[int]


def read_checkpoint(path) -> Checkpoint:
    """Load a checkpoint; raises FormatError naming the first bad record."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise FormatError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", raw[pos: pos + 4])
    pos += 4
    try:
        header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    payload = raw[pos + hlen:]
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config)
    params = list(model.named_parameters())
    records = header["names"]
    if len(records) != len(params):
        first = records[len(params)]["name"] if len(records) > len(params) else params[len(records)][0]
        raise FormatError(f"{path}: parameter count {len(records)} != {len(params)} (first offending record {first!r})")

    def take(rec):
        n = int(np.prod(rec["shape"], dtype=np.int64)) * 4
        start = rec["offset"]
        if start + n > len(payload):
            raise FormatError(f"{path}: record {rec['name']!r} truncated: needs bytes "
                              f"[{start}, {start + n}) but payload has {len(payload)}")
        return np.frombuffer(payload, dtype="<f4", count=n // 4, offset=start).reshape(rec["shape"])

    for rec, (name, p) in zip(records, params):
        if rec["name"] != name:
            raise FormatError(f"{path}: record {rec['name']!r} does not match expected parameter {name!r}")
        if tuple(rec["shape"]) != p.shape:
            raise FormatError(f"{path}: record {name!r} has shape {rec['shape']}, expected {list(p.shape)}")
        p.data = take(rec).astype(np.float32)
    moments = {rec["name"]: take(rec).astype(np.float32) for rec in header.get("moments", [])}
    return Checkpoint(model, header.get("step", 0), header.get("extra", {}), moments,
                      header.get("optimizer_step"))


def load_checkpoint(path) -> Module:
    return read_checkpoint(path).model
