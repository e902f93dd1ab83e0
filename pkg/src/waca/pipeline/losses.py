"""SSIM, Huber and focal-frequency losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ShapeError, Tensor, conv2d


@dataclass(frozen=True)
class LossConfig:
    w_ssim: float = 1.0
    w_huber: float = 1.0
    w_ffl: float = 1.0
    huber_delta: float = 1.0
    ssim_window: int = 7
    ssim_sigma: float = 1.5
    ffl_alpha: float = 1.0

    def __post_init__(self):
        weights = (self.w_ssim, self.w_huber, self.w_ffl)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError(f"loss weights must be nonnegative with at least one positive, got {weights}")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def huber(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    pred, target = _pair(pred, target)
    e = pred.data - target.data
    ae = np.abs(e)
    quad = ae <= delta
    elem = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
    n = e.size
    out = np.asarray(elem.sum() / n, dtype=pred.dtype)

    def backward(g):
        de = np.where(quad, e, delta * np.sign(e)) * (g / n)
        return de, -de

    return Tensor._make(out, (pred, target), backward)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(pred: Tensor, target: Tensor, window: int = 7, sigma: float = 1.5, dynamic_range: float = 1.0) -> Tensor:
    """Local SSIM over valid Gaussian-window positions, per channel."""
    n, c, h, w = pred.shape
    k = min(window, h, w)
    if k % 2 == 0:
        k -= 1
    win = np.broadcast_to(gaussian_window(k, sigma), (c, 1, k, k)).astype(pred.dtype)
    win_t = Tensor(win)

    def filt(t):
        return conv2d(t, win_t, groups=c)

    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_x, mu_y = filt(pred), filt(target)
    sxx = filt(pred * pred) - mu_x * mu_x
    syy = filt(target * target) - mu_y * mu_y
    sxy = filt(pred * target) - mu_x * mu_y
    num = (mu_x * mu_y * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim_loss(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """1 - mean local SSIM; dynamic range is the largest per-map target range in the batch, at least 1."""
    pred, target = _pair(pred, target)
    t = target.data
    n = t.shape[0]
    ranges = t.reshape(n, -1).max(axis=1) - t.reshape(n, -1).min(axis=1)
    dyn = max(float(ranges.max()), 1.0)
    return 1.0 - ssim_map(pred, target, cfg.ssim_window, cfg.ssim_sigma, dyn).mean()


def fft2(x: Tensor) -> Tensor:
    """Unitary 2-D DFT over the last two axes; real/imag stacked on a new last axis."""
    f = np.fft.fft2(x.data, norm="ortho")
    out = np.stack([f.real, f.imag], axis=-1).astype(x.dtype)

    def backward(g):
        gc = g[..., 0] + 1j * g[..., 1]
        return (np.fft.ifft2(gc, norm="ortho").real.astype(x.dtype),)

    return Tensor._make(out, (x,), backward)


def ffl(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Focal frequency loss.

    Each frequency's squared spectral error is weighted by its magnitude
    ``|F_pred - F_target| ** alpha`` divided by the largest such magnitude in
    the same map. The weight is not detached, so the loss equals
    ``mean(|d| ** (2 + alpha)) / max|d| ** alpha`` per map.
    """
    pred, target = _pair(pred, target)
    alpha = cfg.ffl_alpha
    d = fft2(pred) - fft2(target)
    power = (d * d).sum(axis=-1)  # |F_pred - F_target|^2, shape [N, C, H, W]
    if alpha == 0:
        return power.mean()
    peak = power.max(axis=(-2, -1), keepdims=True) + 1e-30
    weighted = power ** (1.0 + alpha / 2.0) / peak ** (alpha / 2.0)
    return weighted.mean()


def composite_loss(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    pred, target = _pair(pred, target)
    total = None
    for weight, term in (
        (cfg.w_ssim, lambda: ssim_loss(pred, target, cfg)),
        (cfg.w_huber, lambda: huber(pred, target, cfg.huber_delta)),
        (cfg.w_ffl, lambda: ffl(pred, target, cfg)),
    ):
        if weight == 0:
            continue
        part = term() if weight == 1 else term() * weight
        total = part if total is None else total + part
    return total
