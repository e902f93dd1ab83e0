"""Channel, spatial and skip-gate attention.

Channel attention comes in four flavours sharing one parameter layout
(:class:`ChannelAttnParams`): squeeze-excitation (``se``), CBAM's
avg+max pooled variant (``cbam``), and their weakness-aware two-stage
extensions (``waca_se`` / ``waca_cbam``). The weakness-aware forms reuse the
same MLP for both stages, so they carry exactly as many parameters as the
base form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import Module, param, trunc_normal
from .tensor import (
    ShapeError,
    Tensor,
    channel_pool_spatial,
    conv2d,
    global_avg_pool,
    global_max_pool,
    linear,
    relu,
    sigmoid,
)

ATTENTION_KINDS = ("none", "se", "cbam", "waca_se", "waca_cbam")
WACA_KINDS = ("waca_se", "waca_cbam")


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class AttentionState:
    """Intermediate values of one weakness-aware channel-attention pass.

    All gate fields have shape [N, C]. ``s1`` is a single descriptor for the
    SE form and an ``(avg, max)`` pair for the CBAM form.
    """

    s1: object
    a1: Tensor
    w1: Tensor
    s2: Tensor
    a2: Tensor
    fused: Tensor

    def record(self, block_id, name: str | None = None) -> dict:
        """Flat per-block export (batch-averaged channel scores)."""
        rec = {"block_id": block_id}
        if name is not None:
            rec["name"] = name
        rec["stage1"] = self.a1.data.mean(axis=0).tolist()
        rec["stage2"] = self.a2.data.mean(axis=0).tolist()
        rec["fused"] = self.fused.data.mean(axis=0).tolist()
        return rec


class ChannelAttnParams(Module):
    """FC1 (C -> C/r) and FC2 (C/r -> C), both with bias."""

    def __init__(self, channels: int, r: int = 4, rng: Optional[np.random.Generator] = None):
        if channels < 1 or r < 1 or channels % r:
            raise ValueError(f"reduction ratio r={r} must divide channels={channels}")
        self.channels = channels
        self.r = r
        hidden = channels // r
        init = (lambda s: trunc_normal(rng, s)) if rng is not None else np.zeros
        self.fc1_w = param(init((hidden, channels)))
        self.fc1_b = param(np.zeros(hidden))
        self.fc2_w = param(init((channels, hidden)))
        self.fc2_b = param(np.zeros(channels))


class SpatialAttnParams(Module):
    def __init__(self, kernel_size: int = 7, rng: Optional[np.random.Generator] = None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"spatial attention kernel must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        shape = (1, 2, kernel_size, kernel_size)
        self.conv_w = param(trunc_normal(rng, shape) if rng is not None else np.zeros(shape))
        self.conv_b = param(np.zeros(1))


class AttnGateParams(Module):
    """1x1 convolutions W_g, W_x and psi of an additive skip-connection gate."""

    def __init__(self, gate_channels: int, skip_channels: int, inter_channels: int | None = None,
                 rng: Optional[np.random.Generator] = None):
        f_int = inter_channels if inter_channels is not None else max(1, -(-skip_channels // 2))
        init = (lambda s: trunc_normal(rng, s)) if rng is not None else np.zeros
        self.gate_channels = gate_channels
        self.skip_channels = skip_channels
        self.wg_w = param(init((f_int, gate_channels, 1, 1)))
        self.wg_b = param(np.zeros(f_int))
        self.wx_w = param(init((f_int, skip_channels, 1, 1)))
        self.wx_b = param(np.zeros(f_int))
        self.psi_w = param(init((1, f_int, 1, 1)))
        self.psi_b = param(np.zeros(1))


def _check_channels(x: Tensor, p: ChannelAttnParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] input, got {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, attention params expect {p.channels}")


def shared_mlp(s: Tensor, p: ChannelAttnParams) -> Tensor:
    """FC2(ReLU(FC1(s))) on a [N, C] descriptor."""
    return linear(relu(linear(s, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each channel of ``x`` by its [N, C] gate value."""
    n, c = gate.shape
    return x * gate.reshape(n, c, 1, 1)


def se_channel_gate(x: Tensor, p: ChannelAttnParams) -> Tensor:
    _check_channels(x, p)
    return sigmoid(shared_mlp(global_avg_pool(x), p))


def cbam_channel_gate(x: Tensor, p: ChannelAttnParams) -> Tensor:
    _check_channels(x, p)
    return sigmoid(shared_mlp(global_avg_pool(x), p) + shared_mlp(global_max_pool(x), p))


def _stage2_descriptor(x: Tensor, a1: Tensor, pooling_mode: str) -> Tensor:
    suppressed = scale_channels(x, 1.0 - a1)
    if pooling_mode == "se":
        return global_avg_pool(suppressed)
    if pooling_mode == "cbam":
        return global_avg_pool(suppressed) + global_max_pool(suppressed)
    raise ValueError(f"pooling_mode must be 'se' or 'cbam', got {pooling_mode!r}")


def waca_stage2(x: Tensor, a1: Tensor, p: ChannelAttnParams, pooling_mode: str = "cbam") -> Tensor:
    """Gate computed from ``x`` after damping each channel by ``1 - a1``.

    In CBAM mode the avg- and max-pooled descriptors of the damped features are
    summed and passed through the MLP once.
    """
    _check_channels(x, p)
    if a1.shape != (x.shape[0], x.shape[1]):
        raise ShapeError(f"stage-1 gate shape {a1.shape} does not match input {x.shape[:2]}")
    return sigmoid(shared_mlp(_stage2_descriptor(x, a1, pooling_mode), p))


def waca_fuse(a1: Tensor, a2: Tensor, cfg: FusionConfig = FusionConfig()) -> Tensor:
    if a1.shape != a2.shape:
        raise ShapeError(f"gate shapes differ: {a1.shape} vs {a2.shape}")
    return a1 * cfg.alpha + a2 * (1.0 - cfg.alpha)


def _waca(x: Tensor, p: ChannelAttnParams, cfg: FusionConfig, mode: str):
    _check_channels(x, p)
    if mode == "se":
        s1 = global_avg_pool(x)
        a1 = sigmoid(shared_mlp(s1, p))
    else:
        s_avg, s_max = global_avg_pool(x), global_max_pool(x)
        s1 = (s_avg, s_max)
        a1 = sigmoid(shared_mlp(s_avg, p) + shared_mlp(s_max, p))
    w1 = 1.0 - a1
    suppressed = scale_channels(x, w1)
    if mode == "se":
        s2 = global_avg_pool(suppressed)
    else:
        s2 = global_avg_pool(suppressed) + global_max_pool(suppressed)
    a2 = sigmoid(shared_mlp(s2, p))
    fused = waca_fuse(a1, a2, cfg)
    state = AttentionState(s1=s1, a1=a1, w1=w1, s2=s2, a2=a2, fused=fused)
    return scale_channels(x, fused), state


def waca_se(x: Tensor, p: ChannelAttnParams, cfg: FusionConfig = FusionConfig()):
    return _waca(x, p, cfg, "se")


def waca_cbam(x: Tensor, p: ChannelAttnParams, cfg: FusionConfig = FusionConfig()):
    return _waca(x, p, cfg, "cbam")


def channel_attention(x: Tensor, p: ChannelAttnParams, kind: str, cfg: FusionConfig = FusionConfig()):
    """Dispatch on attention kind; returns ``(y, state)`` with ``state`` None for base kinds."""
    if kind == "se":
        return scale_channels(x, se_channel_gate(x, p)), None
    if kind == "cbam":
        return scale_channels(x, cbam_channel_gate(x, p)), None
    if kind == "waca_se":
        return waca_se(x, p, cfg)
    if kind == "waca_cbam":
        return waca_cbam(x, p, cfg)
    raise ValueError(f"unknown channel attention kind {kind!r}")


def spatial_attention(x: Tensor, p: SpatialAttnParams) -> Tensor:
    pad = (p.kernel_size - 1) // 2
    m = sigmoid(conv2d(channel_pool_spatial(x), p.conv_w, p.conv_b, padding=pad))
    return x * m


def waa(x: Tensor, chan_params: ChannelAttnParams, spat_params: SpatialAttnParams,
        cfg: FusionConfig = FusionConfig(), kind: str = "waca_cbam"):
    """Channel attention (weakness-aware by default) followed by spatial attention."""
    y, state = channel_attention(x, chan_params, kind, cfg)
    return spatial_attention(y, spat_params), state


def attention_gate(g: Tensor, x: Tensor, p: AttnGateParams) -> Tensor:
    """Scale skip features ``x`` by sigmoid(psi(relu(W_g g + W_x x)))."""
    if g.ndim != 4 or x.ndim != 4 or g.shape[0] != x.shape[0] or g.shape[2:] != x.shape[2:]:
        raise ShapeError(f"gating signal {g.shape} and skip features {x.shape} are not spatially aligned")
    q = relu(conv2d(g, p.wg_w, p.wg_b) + conv2d(x, p.wx_w, p.wx_b))
    beta = sigmoid(conv2d(q, p.psi_w, p.psi_b))
    return x * beta
