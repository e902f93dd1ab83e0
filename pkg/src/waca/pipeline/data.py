"""Feature normalization, dihedral augmentation and Lanczos resampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @property
    def channels(self) -> int:
        return len(self.mean)


def _features(item) -> np.ndarray:
    arr = getattr(item, "features", item)
    return np.asarray(getattr(arr, "data", arr), dtype=np.float64)


def compute_norm_stats(train_cases: Iterable, floor: float = STD_FLOOR) -> NormStats:
    """Per-channel mean and population std over every pixel of every case.

    Cases are merged one at a time (pairwise mean/M2 update), so the set can
    be streamed. Accepts CaseBundles or raw [C, H, W] arrays.
    """
    count = 0
    mean = m2 = None
    for item in train_cases:
        x = _features(item)
        c = x.shape[0]
        flat = x.reshape(c, -1)
        n_i = flat.shape[1]
        m_i = flat.mean(axis=1)
        m2_i = ((flat - m_i[:, None]) ** 2).sum(axis=1)
        if mean is None:
            mean, m2, count = m_i, m2_i, n_i
            continue
        if len(m_i) != len(mean):
            raise ValueError(f"channel count changed from {len(mean)} to {len(m_i)}")
        total = count + n_i
        delta = m_i - mean
        mean = mean + delta * (n_i / total)
        m2 = m2 + m2_i + delta**2 * (count * n_i / total)
        count = total
    if mean is None:
        raise ValueError("cannot compute normalization statistics of an empty set")
    std = np.sqrt(m2 / count)
    low = std < floor
    if low.any():
        warnings.warn(f"channels {np.flatnonzero(low).tolist()} are constant; std floored at {floor}")
        std = np.where(low, floor, std)
    return NormStats(mean=mean, std=std)


def apply_zscore(features, stats: NormStats):
    """Normalize [C,H,W] or [N,C,H,W] features channel-wise."""
    from ..tensor import Tensor

    is_tensor = isinstance(features, Tensor)
    x = features.data if is_tensor else np.asarray(features)
    axis = x.ndim - 3
    if x.shape[axis] != stats.channels:
        raise ValueError(f"features have {x.shape[axis]} channels, statistics cover {stats.channels}")
    shape = [1] * x.ndim
    shape[axis] = -1
    out = (x - stats.mean.reshape(shape)) / stats.std.reshape(shape)
    out = out.astype(x.dtype, copy=False)
    return Tensor(out) if is_tensor else out


# code -> (name, function on arrays whose last two axes are H, W)
_DIHEDRAL = {
    0: ("identity", lambda a: a),
    1: ("hflip", lambda a: a[..., ::-1]),
    2: ("vflip", lambda a: a[..., ::-1, :]),
    3: ("rot90", lambda a: np.rot90(a, 1, axes=(-2, -1))),
    4: ("rot180", lambda a: np.rot90(a, 2, axes=(-2, -1))),
    5: ("rot270", lambda a: np.rot90(a, 3, axes=(-2, -1))),
    6: ("transpose", lambda a: np.swapaxes(a, -1, -2)),
    7: ("antitranspose", lambda a: np.rot90(np.swapaxes(a, -1, -2), 2, axes=(-2, -1))),
}
_AXIS_SWAPPING = {3, 5, 6, 7}


def dihedral_name(code: int) -> str:
    return _DIHEDRAL[code][0]


def dihedral_transform(array: np.ndarray, code: int) -> np.ndarray:
    if code not in _DIHEDRAL:
        raise ValueError(f"dihedral code must be in 0..7, got {code}")
    if code in _AXIS_SWAPPING and array.shape[-1] != array.shape[-2]:
        raise ValueError(f"{dihedral_name(code)} needs square maps, got {array.shape[-2:]}")
    return np.ascontiguousarray(_DIHEDRAL[code][1](array))


def dihedral_augment(features: np.ndarray, target: np.ndarray, code: int):
    """Apply the same symmetry of the square to every feature channel and the target."""
    return dihedral_transform(np.asarray(features), code), dihedral_transform(np.asarray(target), code)


def _lanczos_kernel(x: np.ndarray, a: int) -> np.ndarray:
    out = np.sinc(x) * np.sinc(x / a)
    return np.where(np.abs(x) < a, out, 0.0)


def lanczos_matrix(n_in: int, n_out: int, a: int = 3) -> np.ndarray:
    """1-D Lanczos-``a`` resampling matrix, edge-clamped, rows normalized to 1.

    When downsampling the kernel is stretched by the scale factor (antialiasing).
    """
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale = n_in / n_out
    fscale = max(scale, 1.0)
    support = a * fscale
    for o in range(n_out):
        center = (o + 0.5) * scale
        lo = int(math.floor(center - support))
        hi = int(math.ceil(center + support))
        taps = np.arange(lo, hi + 1)
        w = _lanczos_kernel((taps + 0.5 - center) / fscale, a)
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(m[o], idx, w)
        m[o] /= m[o].sum()
    return m


def lanczos_resize(array: np.ndarray, out_h: int, out_w: int, a: int = 3) -> np.ndarray:
    """Resize the last two axes of ``array`` with a separable Lanczos filter."""
    arr = np.asarray(array, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    rh = lanczos_matrix(h, out_h, a)
    rw = lanczos_matrix(w, out_w, a)
    return np.einsum("oh,...hw,pw->...op", rh, arr, rw, optimize=True)
