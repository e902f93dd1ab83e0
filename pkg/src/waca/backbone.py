"""ConvNeXtV2 blocks and the attention-gated U-Net built from them."""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import wtns
from .attention import (
    ATTENTION_KINDS,
    AttentionState,
    AttnGateParams,
    ChannelAttnParams,
    FusionConfig,
    SpatialAttnParams,
    attention_gate,
    channel_attention,
    spatial_attention,
)
from .nn import Module, param, trunc_normal
from .pipeline.data import NormStats
from .tensor import ShapeError, Tensor, concat, conv2d, gelu, grn, layer_norm_channelwise, resize_bilinear


class ConfigError(ValueError):
    """Invalid model configuration or configuration/input mismatch."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match its declared architecture."""


@dataclass
class UNetConfig:
    in_channels: int = 6
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    attention_kind: str = "waca_cbam"
    alpha: float = 0.5
    r: int = 4
    spatial_kernel: int = 7

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ConfigError("widths must be non-empty")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must be strictly increasing, got {list(self.widths)}")
        if self.in_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigError("in_channels and blocks_per_stage must be >= 1")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}")
        if self.attention_kind != "none":
            bad = [w for w in self.widths if w % self.r]
            if bad:
                raise ConfigError(f"reduction ratio r={self.r} does not divide widths {bad}")
        FusionConfig(self.alpha)

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown model config keys {unknown}")
        return cls(**known)


class CnxBlockParams(Module):
    """Depthwise 7x7 conv, channel LayerNorm, 1x1 expand (x4), GELU, GRN, 1x1 project."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        c, e = channels, 4 * channels
        init = (lambda s: trunc_normal(rng, s)) if rng is not None else np.zeros
        ones = np.ones if rng is not None else np.zeros
        self.channels = channels
        self.dw_w = param(init((c, 1, 7, 7)))
        self.dw_b = param(np.zeros(c))
        self.ln_g = param(ones(c))
        self.ln_b = param(np.zeros(c))
        self.pw1_w = param(init((e, c, 1, 1)))
        self.pw1_b = param(np.zeros(e))
        self.grn_g = param(ones(e))
        self.grn_b = param(np.zeros(e))
        self.pw2_w = param(init((c, e, 1, 1)))
        self.pw2_b = param(np.zeros(c))


def cnx_block(x: Tensor, p: CnxBlockParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"cnx_block: input {x.shape} does not have {p.channels} channels")
    h = conv2d(x, p.dw_w, p.dw_b, padding=3, groups=p.channels)
    h = layer_norm_channelwise(h, p.ln_g, p.ln_b)
    h = gelu(conv2d(h, p.pw1_w, p.pw1_b))
    h = grn(h, p.grn_g, p.grn_b)
    h = conv2d(h, p.pw2_w, p.pw2_b)
    return x + h


class CnxWaaBlock(Module):
    def __init__(self, channels: int, cfg: UNetConfig, rng: Optional[np.random.Generator] = None):
        self.kind = cfg.attention_kind
        self.fusion = cfg.fusion
        self.cnx = CnxBlockParams(channels, rng)
        if self.kind != "none":
            self.chan = ChannelAttnParams(channels, cfg.r, rng)
            self.spat = SpatialAttnParams(cfg.spatial_kernel, rng)


def cnx_waa_block(x: Tensor, block: CnxWaaBlock) -> tuple[Tensor, Optional[AttentionState]]:
    """ConvNeXtV2 block followed by channel then spatial attention.

    ``attention_kind == "none"`` leaves the ConvNeXtV2 output untouched.
    """
    y = cnx_block(x, block.cnx)
    if block.kind == "none":
        return y, None
    y, state = channel_attention(y, block.chan, block.kind, block.fusion)
    return spatial_attention(y, block.spat), state


class _Stage(Module):
    def __init__(self, channels: int, cfg: UNetConfig, rng):
        self.blocks = [CnxWaaBlock(channels, cfg, rng) for _ in range(cfg.blocks_per_stage)]


class _Down(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.w = param(trunc_normal(rng, (cout, cin, 2, 2)))
        self.b = param(np.zeros(cout))


class _DecoderStage(Module):
    def __init__(self, skip: int, below: int, cfg: UNetConfig, rng):
        self.gate = AttnGateParams(below, skip, rng=rng)
        self.fuse_w = param(trunc_normal(rng, (skip, below + skip, 1, 1)))
        self.fuse_b = param(np.zeros(skip))
        self.blocks = [CnxWaaBlock(skip, cfg, rng) for _ in range(cfg.blocks_per_stage)]


class WacaUNet(Module):
    """Encoder-decoder with CNX+WAA blocks and attention-gated skips.

    Stem is a 1x1 conv, downsampling a stride-2 2x2 conv, upsampling bilinear,
    and the head a linear 1x1 conv to one channel.
    """

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        rng = np.random.default_rng(seed)
        ws = config.widths
        self.stem_w = param(trunc_normal(rng, (ws[0], config.in_channels, 1, 1)))
        self.stem_b = param(np.zeros(ws[0]))
        self.enc = [_Stage(w, config, rng) for w in ws]
        self.down = [_Down(a, b, rng) for a, b in zip(ws, ws[1:])]
        self.dec = [_DecoderStage(ws[k], ws[k + 1], config, rng) for k in range(len(ws) - 1)]
        self.head_w = param(trunc_normal(rng, (1, ws[0], 1, 1)))
        self.head_b = param(np.zeros(1))
        if dtype != np.float64:
            self.astype(dtype)

    @property
    def dtype(self):
        return self.stem_w.dtype

    def block_names(self) -> list[str]:
        names = []
        for k, stage in enumerate(self.enc):
            names += [f"enc{k}.block{i}" for i in range(len(stage.blocks))]
        for k in reversed(range(len(self.dec))):
            names += [f"dec{k}.block{i}" for i in range(len(self.dec[k].blocks))]
        return names

    def forward(self, x: Tensor, states: Optional[list] = None) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ConfigError(f"input has shape {x.shape}, model expects {cfg.in_channels} channels")
        factor = 2 ** (len(cfg.widths) - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigError(
                f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by {factor} "
                f"({len(cfg.widths)} stages)"
            )

        def run(h, blocks, prefix):
            for i, blk in enumerate(blocks):
                h, st = cnx_waa_block(h, blk)
                if states is not None and st is not None:
                    states.append((f"{prefix}.block{i}", st))
            return h

        h = conv2d(x, self.stem_w, self.stem_b)
        skips = []
        for k, stage in enumerate(self.enc):
            h = run(h, stage.blocks, f"enc{k}")
            if k < len(self.down):
                skips.append(h)
                h = conv2d(h, self.down[k].w, self.down[k].b, stride=2)
        for k in reversed(range(len(self.dec))):
            stage, skip = self.dec[k], skips[k]
            up = resize_bilinear(h, skip.shape[2], skip.shape[3])
            gated = attention_gate(up, skip, stage.gate)
            h = conv2d(concat([up, gated], axis=1), stage.fuse_w, stage.fuse_b)
            h = run(h, stage.blocks, f"dec{k}")
        return conv2d(h, self.head_w, self.head_b)

    __call__ = forward

    def clone(self) -> "WacaUNet":
        other = WacaUNet.__new__(WacaUNet)
        WacaUNet.__init__(other, self.config, seed=0)
        other.load_arrays(self.state_arrays())
        return other


def unet_forward(x: Tensor, model: WacaUNet, states: Optional[list] = None) -> Tensor:
    return model.forward(x, states)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"WTNC"
CKPT_VERSION = 1


@dataclass
class ModelCheckpoint:
    config: UNetConfig
    model: WacaUNet
    epoch: int = 0
    val_f1: float = float("nan")
    norm_stats: Optional[NormStats] = None
    extra: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)  # training log rows; not serialized

    @property
    def params(self) -> dict:
        return self.model.named_parameters()


def _meta_bytes(ckpt: ModelCheckpoint) -> bytes:
    meta = {
        "config": ckpt.config.to_dict(),
        "epoch": int(ckpt.epoch),
        "val_f1": None if ckpt.val_f1 != ckpt.val_f1 else float(ckpt.val_f1),
        "norm_stats": ckpt.norm_stats.to_dict() if ckpt.norm_stats is not None else None,
        "extra": ckpt.extra,
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    buf = io.BytesIO()
    meta = _meta_bytes(ckpt)
    buf.write(CKPT_MAGIC + bytes([CKPT_VERSION]))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    params = ckpt.model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(wtns.encode(t.data))
    return buf.getvalue()


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def decode_checkpoint(buf: bytes) -> ModelCheckpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a model checkpoint")
    if buf[4] != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {buf[4]}")
    pos = 5
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    dtypes = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        try:
            arr, pos = wtns.decode(buf, pos)
        except wtns.FormatError as exc:
            raise CheckpointError(f"tensor {name!r}: {exc}") from exc
        arrays[name] = arr
        dtypes.add(arr.dtype)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor record")
    try:
        config = UNetConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from exc
    model = WacaUNet(config, seed=0)
    try:
        model.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    stats = NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None
    val_f1 = meta.get("val_f1")
    return ModelCheckpoint(
        config=config,
        model=model,
        epoch=int(meta.get("epoch", 0)),
        val_f1=float("nan") if val_f1 is None else float(val_f1),
        norm_stats=stats,
        extra=meta.get("extra", {}),
    )


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
