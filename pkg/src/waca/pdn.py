"""Static IR-drop golden solver and synthetic power-grid case generator.

A :class:`PdnGrid` is a stack of resistive meshes. Layer 0 has a node at every
cell and carries the load currents; layer ``l`` has nodes every ``pitch``
cells along both axes. Adjacent layers connect through vias wherever both
have a node. Pad nodes are held at ``vdd``.

Modified nodal analysis over the non-pad nodes gives ``G V = J`` with ``G``
symmetric positive definite, solved here by Jacobi-preconditioned conjugate
gradients.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import distance_transform_cdt
from scipy.sparse.csgraph import connected_components

from . import wtns
from .tensor import Tensor, bilinear_matrix

GEN_VERSION = 1
FEATURE_NAMES = (
    "current_ma",
    "pad_distance",
    "via_density",
    "layer0_conductance",
    "layer1_conductance",
    "hypothetical_ir_mv",
)


class SingularSystemError(ValueError):
    """The conductance matrix would be singular (no node tied to the supply)."""


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"CG did not converge: relative residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass
class Layer:
    pitch: int
    sheet_conductance: float
    scale: Optional[np.ndarray] = None  # [H, W] multiplier on branch conductance


@dataclass
class PdnGrid:
    h: int
    w: int
    layers: list
    via_conductance: float
    pads: list  # (layer, i, j)
    currents: np.ndarray  # [H, W] amperes drawn at layer 0
    vdd: float = 1.0
    via_mask: Optional[np.ndarray] = None  # [H, W] bool; False removes the via stack at that cell

    def __post_init__(self):
        self.currents = np.asarray(self.currents, dtype=np.float64)
        self.pads = [tuple(int(v) for v in p) for p in self.pads]
        self.validate()

    def validate(self) -> None:
        if self.h < 1 or self.w < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.layers:
            raise ValueError("grid needs at least one layer")
        if self.layers[0].pitch != 1:
            raise ValueError("layer 0 must have pitch 1 (a node per cell)")
        for lo, hi in zip(self.layers, self.layers[1:]):
            if hi.pitch % lo.pitch:
                raise ValueError(f"pitch {hi.pitch} is not a multiple of the layer below ({lo.pitch})")
        for k, layer in enumerate(self.layers):
            if layer.sheet_conductance <= 0:
                raise ValueError(f"layer {k}: conductance must be positive")
            if layer.scale is not None and (layer.scale.shape != (self.h, self.w) or (layer.scale <= 0).any()):
                raise ValueError(f"layer {k}: scale must be a positive [{self.h}, {self.w}] array")
        if len(self.layers) > 1 and self.via_conductance <= 0:
            raise ValueError("via conductance must be positive")
        if self.currents.shape != (self.h, self.w):
            raise ValueError(f"currents must have shape ({self.h}, {self.w}), got {self.currents.shape}")
        if (self.currents < 0).any():
            raise ValueError("load currents must be nonnegative")
        for lay, i, j in self.pads:
            if not 0 <= lay < len(self.layers):
                raise ValueError(f"pad {lay, i, j}: no such layer")
            p = self.layers[lay].pitch
            if not (0 <= i < self.h and 0 <= j < self.w) or i % p or j % p:
                raise ValueError(f"pad {lay, i, j} is not on a layer-{lay} node")

    def with_currents(self, currents: np.ndarray) -> "PdnGrid":
        return PdnGrid(self.h, self.w, self.layers, self.via_conductance, self.pads,
                       currents, self.vdd, self.via_mask)

    def layer_index(self) -> list:
        """Global node ids per layer, each an array over that layer's node lattice."""
        out, offset = [], 0
        for layer in self.layers:
            nr = len(range(0, self.h, layer.pitch))
            nc = len(range(0, self.w, layer.pitch))
            out.append(offset + np.arange(nr * nc).reshape(nr, nc))
            offset += nr * nc
        return out

    @property
    def num_nodes(self) -> int:
        return sum(ids.size for ids in self.layer_index())


@dataclass
class MnaSystem:
    G: sp.csr_matrix
    J: np.ndarray
    unknown: np.ndarray  # global node id -> row in G, or -1 for pads
    vdd: float
    V: Optional[np.ndarray] = None
    iterations: int = 0
    residual: float = float("nan")
    load: Optional[np.ndarray] = None  # exact J - G*vdd (minus the load currents) when known


def _branches(grid: PdnGrid):
    """(a, b, g) arrays for every resistive branch and via."""
    ids = grid.layer_index()
    a_all, b_all, g_all = [], [], []
    for k, layer in enumerate(grid.layers):
        p = layer.pitch
        scale = layer.scale if layer.scale is not None else np.ones((grid.h, grid.w))
        sub = scale[::p, ::p]
        g_line = layer.sheet_conductance / p
        node = ids[k]
        # horizontal neighbours
        a_all.append(node[:, :-1].ravel())
        b_all.append(node[:, 1:].ravel())
        g_all.append((g_line * 0.5 * (sub[:, :-1] + sub[:, 1:])).ravel())
        # vertical neighbours
        a_all.append(node[:-1, :].ravel())
        b_all.append(node[1:, :].ravel())
        g_all.append((g_line * 0.5 * (sub[:-1, :] + sub[1:, :])).ravel())
    for k in range(len(grid.layers) - 1):
        p_hi = grid.layers[k + 1].pitch
        ratio = p_hi // grid.layers[k].pitch
        upper = ids[k + 1]
        lower = ids[k][::ratio, ::ratio][: upper.shape[0], : upper.shape[1]]
        keep = np.ones(upper.shape, dtype=bool)
        if grid.via_mask is not None:
            keep = grid.via_mask[::p_hi, ::p_hi].astype(bool)
        a_all.append(lower[keep])
        b_all.append(upper[keep])
        g_all.append(np.full(int(keep.sum()), float(grid.via_conductance)))
    return np.concatenate(a_all), np.concatenate(b_all), np.concatenate(g_all)


def pad_node_ids(grid: PdnGrid) -> np.ndarray:
    ids = grid.layer_index()
    return np.array(sorted({int(ids[l][i // grid.layers[l].pitch, j // grid.layers[l].pitch])
                            for l, i, j in grid.pads}), dtype=np.int64)


def assemble_mna(grid: PdnGrid) -> MnaSystem:
    """Stamp branch conductances into G over non-pad nodes and build J.

    A branch to a pad adds ``g`` to the free node's diagonal and ``g * vdd``
    to its right-hand side; load currents are subtracted from J.
    """
    if not grid.pads:
        raise SingularSystemError("grid has no pad node; G would be singular")
    n = grid.num_nodes
    is_pad = np.zeros(n, dtype=bool)
    is_pad[pad_node_ids(grid)] = True
    unknown = np.full(n, -1, dtype=np.int64)
    free = ~is_pad
    unknown[free] = np.arange(int(free.sum()))
    m = int(free.sum())

    a, b, g = _branches(grid)
    adj = sp.coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n))
    n_comp, labels = connected_components(adj, directed=False)
    floating = np.setdiff1d(np.arange(n_comp), labels[is_pad])
    if floating.size:
        raise SingularSystemError(f"{floating.size} node island(s) have no path to a pad; G would be singular")
    pa, pb = is_pad[a], is_pad[b]
    both = ~pa & ~pb
    ua, ub = unknown[a[both]], unknown[b[both]]
    gb = g[both]
    rows = np.concatenate([ua, ub, ua, ub])
    cols = np.concatenate([ua, ub, ub, ua])
    vals = np.concatenate([gb, gb, -gb, -gb])
    J = np.zeros(m)
    # free endpoint of a branch tied to a pad
    for free_end, mask in ((b, pa & ~pb), (a, pb & ~pa)):
        u = unknown[free_end[mask]]
        rows = np.concatenate([rows, u])
        cols = np.concatenate([cols, u])
        vals = np.concatenate([vals, g[mask]])
        np.add.at(J, u, g[mask] * grid.vdd)
    G = sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()
    G.sum_duplicates()

    ids0 = grid.layer_index()[0].ravel()
    u0 = unknown[ids0]
    loads = grid.currents.ravel()
    on_free = u0 >= 0
    load = np.zeros(m)
    np.add.at(load, u0[on_free], -loads[on_free])
    J += load
    return MnaSystem(G=G, J=J, unknown=unknown, vdd=grid.vdd, load=load)


def solve_cg(sys: MnaSystem, tol: float = 1e-10, max_iter: Optional[int] = None) -> np.ndarray:
    """Jacobi-preconditioned CG from a warm start at ``vdd``.

    Iterates on the deviation ``e = V - vdd`` whose right-hand side
    ``J - G vdd`` is the load term alone, and stops once the true residual is
    below ``tol`` relative to that term. Since the load term is never larger
    than ``J`` this implies ``||G V - J|| / ||J|| <= tol``, while keeping the
    small drops accurate to ``tol`` rather than to ``tol * vdd``.
    """
    G, J = sys.G, sys.J
    m = J.shape[0]
    if max_iter is None:
        max_iter = max(1000, 10 * m)
    if m == 0:
        sys.V, sys.iterations, sys.residual = np.zeros(0), 0, 0.0
        return sys.V
    norm_j = float(np.linalg.norm(J))
    start = np.full(m, float(sys.vdd))
    b = sys.load if sys.load is not None else J - G @ start
    norm_b = float(np.linalg.norm(b))
    if norm_j == 0.0 or norm_b == 0.0:
        V = np.zeros(m) if norm_j == 0.0 else start
        sys.V, sys.iterations, sys.residual = V, 0, 0.0
        return V
    inv_diag = 1.0 / G.diagonal()
    e = np.zeros(m)
    it = 0
    while True:
        r = b - G @ e
        rel = float(np.linalg.norm(r)) / norm_b
        if rel <= tol:
            break
        if it >= max_iter:
            raise ConvergenceError(rel, it)
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        while it < max_iter:
            q = G @ p
            step = rz / float(p @ q)
            e += step * p
            r -= step * q
            it += 1
            if float(np.linalg.norm(r)) / norm_b <= tol:
                break
            z = inv_diag * r
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        # loop back: recompute the true residual (guards against recurrence drift)
    V = start + e
    sys.V, sys.iterations = V, it
    sys.residual = float(np.linalg.norm(J - G @ V)) / norm_j
    return V


def solve_dense(sys: MnaSystem) -> np.ndarray:
    """Direct LU solve on the densified G; for small grids and cross-checks."""
    return np.linalg.solve(sys.G.toarray(), sys.J)


def node_voltages(grid: PdnGrid, sys: MnaSystem, V: np.ndarray) -> np.ndarray:
    full = np.full(grid.num_nodes, float(grid.vdd))
    free = sys.unknown >= 0
    full[free] = V[sys.unknown[free]]
    return full


def ir_drop_map(grid: PdnGrid, V: np.ndarray, sys: Optional[MnaSystem] = None) -> Tensor:
    """Per-cell drop ``(vdd - V) * 1000`` in millivolts at layer 0, shape [1, H, W]."""
    if sys is None:
        sys = assemble_mna(grid)
    full = node_voltages(grid, sys, V)
    ids0 = grid.layer_index()[0]
    drop = (grid.vdd - full[ids0]) * 1000.0
    drop[sys.unknown[ids0] < 0] = 0.0
    return Tensor(drop[None])


def golden_drop(grid: PdnGrid, tol: float = 1e-10) -> np.ndarray:
    """Convenience: assemble, solve by CG and return the [H, W] drop map in mV."""
    sys = assemble_mna(grid)
    V = solve_cg(sys, tol=tol)
    return ir_drop_map(grid, V, sys).data[0]


# ---------------------------------------------------------------------------
# synthetic cases
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    h: int = 64
    w: int = 64
    layer_ratio: float = 4.0
    upper_pitches: tuple = (4, 8)
    sheet_conductance: tuple = (1.0, 3.0)
    via_conductance: tuple = (5.0, 20.0)
    via_keep: tuple = (0.7, 1.0)
    pads: tuple = (3, 8)
    blobs: tuple = (2, 5)
    blob_sigma: tuple = (3.0, 10.0)
    background: tuple = (0.05, 0.3)
    total_current: tuple = (0.1, 0.4)
    scale_range: tuple = (0.5, 1.5)
    vdd: float = 1.0
    coarse_factor: int = 4

    def __post_init__(self):
        for name in ("upper_pitches",):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("sheet_conductance", "via_conductance", "via_keep", "pads", "blobs",
                     "blob_sigma", "background", "total_current", "scale_range"):
            val = tuple(getattr(self, name))
            if len(val) != 2 or val[0] > val[1]:
                raise ValueError(f"{name} must be a (low, high) pair, got {val}")
            setattr(self, name, val)
        if self.h < 8 or self.w < 8:
            raise ValueError("grid must be at least 8x8 cells")
        if self.h % self.coarse_factor or self.w % self.coarse_factor:
            raise ValueError(f"h, w must be multiples of coarse_factor={self.coarse_factor}")
        if not self.upper_pitches or min(self.upper_pitches) < 2:
            raise ValueError("upper_pitches must be >= 2")
        if self.sheet_conductance[0] <= 0 or self.via_conductance[0] <= 0:
            raise ValueError("conductances must be positive")
        if not 0 < self.via_keep[0] <= self.via_keep[1] <= 1:
            raise ValueError("via_keep must lie in (0, 1]")
        if self.pads[0] < 1 or self.blobs[0] < 0 or self.blob_sigma[0] <= 0:
            raise ValueError("need >= 1 pad, >= 0 blobs and positive blob sigma")
        if self.total_current[0] < 0 or self.background[0] < 0 or self.scale_range[0] <= 0:
            raise ValueError("currents, background and scale bounds must be nonnegative/positive")
        if self.layer_ratio <= 0 or self.vdd <= 0:
            raise ValueError("layer_ratio and vdd must be positive")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown generator config keys {unknown}")
        return cls(**d)


@dataclass
class CaseBundle:
    features: np.ndarray  # [Cf, H, W]
    target: np.ndarray  # [1, H, W], millivolts
    meta: dict = field(default_factory=dict)

    @property
    def case_id(self) -> str:
        return f"case_{self.meta.get('seed', 'x')}"


def _smooth_field(rng: np.random.Generator, h: int, w: int, lo: float, hi: float, knots: int = 4) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(knots, knots))
    return bilinear_matrix(knots, h) @ coarse @ bilinear_matrix(knots, w).T


def random_grid(seed: int, cfg: GenConfig = GenConfig()) -> PdnGrid:
    """Two-layer grid with smooth conductance variation, random vias, pads and blob loads."""
    rng = np.random.default_rng(seed)
    h, w = cfg.h, cfg.w
    pitch = int(rng.choice(cfg.upper_pitches))
    g0 = float(rng.uniform(*cfg.sheet_conductance))
    layers = [
        Layer(1, g0, _smooth_field(rng, h, w, *cfg.scale_range)),
        Layer(pitch, g0 * cfg.layer_ratio, _smooth_field(rng, h, w, *cfg.scale_range)),
    ]
    via_g = float(rng.uniform(*cfg.via_conductance))
    keep = float(rng.uniform(*cfg.via_keep))
    via_mask = rng.random((h, w)) < keep

    rows, cols = np.arange(0, h, pitch), np.arange(0, w, pitch)
    n_sites = len(rows) * len(cols)
    n_pads = int(rng.integers(cfg.pads[0], cfg.pads[1] + 1))
    chosen = rng.choice(n_sites, size=min(n_pads, n_sites), replace=False)
    pads = sorted((1, int(rows[s // len(cols)]), int(cols[s % len(cols)])) for s in chosen)
    for _, i, j in pads:
        via_mask[i, j] = True  # every pad feeds the bottom layer directly

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    load = np.zeros((h, w))
    for _ in range(int(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(*cfg.blob_sigma)
        amp = rng.uniform(0.3, 1.0)
        load += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    bg = rng.uniform(*cfg.background)
    load += bg * (load.mean() if load.any() else 1.0) * rng.uniform(0.5, 1.5, size=(h, w))
    total = float(rng.uniform(*cfg.total_current))
    currents = load * (total / load.sum())
    return PdnGrid(h, w, layers, via_g, pads, currents, cfg.vdd, via_mask)


def coarse_grid(grid: PdnGrid, factor: int) -> PdnGrid:
    """Single-layer approximation on a ``factor``-times coarser lattice.

    Layer sheet conductances are lumped (upper layers weighted by 1/pitch),
    vias are ideal, block currents are summed and any block holding a pad
    becomes a pad.
    """
    hc, wc = grid.h // factor, grid.w // factor

    def block_mean(a):
        return a.reshape(hc, factor, wc, factor).mean(axis=(1, 3))

    eff = np.zeros((grid.h, grid.w))
    for layer in grid.layers:
        scale = layer.scale if layer.scale is not None else 1.0
        eff = eff + layer.sheet_conductance * scale / layer.pitch
    currents = grid.currents.reshape(hc, factor, wc, factor).sum(axis=(1, 3))
    pads = sorted({(0, i // factor, j // factor) for _, i, j in grid.pads})
    return PdnGrid(hc, wc, [Layer(1, 1.0, block_mean(eff))], 1.0, pads, currents, grid.vdd)


def hypothetical_ir(grid: PdnGrid, factor: int = 4) -> np.ndarray:
    coarse = coarse_grid(grid, factor)
    drop = golden_drop(coarse)
    return bilinear_matrix(coarse.h, grid.h) @ drop @ bilinear_matrix(coarse.w, grid.w).T


def grid_features(grid: PdnGrid, factor: int = 4) -> np.ndarray:
    """The six generator-v1 input channels (order given by ``FEATURE_NAMES``)."""
    h, w = grid.h, grid.w
    pad_mask = np.zeros((h, w), dtype=bool)
    for _, i, j in grid.pads:
        pad_mask[i, j] = True
    pad_dist = distance_transform_cdt(~pad_mask, metric="chessboard").astype(np.float64)

    vias = np.zeros((h, w))
    for k in range(len(grid.layers) - 1):
        p = grid.layers[k + 1].pitch
        site = np.zeros((h, w), dtype=bool)
        site[::p, ::p] = True
        if grid.via_mask is not None:
            site &= grid.via_mask.astype(bool)
        vias += site

    cond = []
    for layer in grid.layers[:2]:
        p = layer.pitch
        scale = layer.scale if layer.scale is not None else np.ones((h, w))
        on_wire = np.zeros((h, w), dtype=bool)
        on_wire[::p, :] = True
        on_wire[:, ::p] = True
        cond.append(np.where(on_wire, layer.sheet_conductance * scale, 0.0))

    return np.stack([grid.currents * 1000.0, pad_dist, vias, cond[0], cond[1], hypothetical_ir(grid, factor)])


def gen_case(seed: int, cfg: GenConfig = GenConfig()) -> CaseBundle:
    grid = random_grid(seed, cfg)
    target = golden_drop(grid)[None]
    features = grid_features(grid, cfg.coarse_factor)
    meta = {
        "seed": int(seed),
        "vdd_v": float(cfg.vdd),
        "h": cfg.h,
        "w": cfg.w,
        "layers": [{"pitch": l.pitch, "sheet_conductance": l.sheet_conductance} for l in grid.layers],
        "gen_version": GEN_VERSION,
        "via_conductance": grid.via_conductance,
        "pads": [list(p) for p in grid.pads],
        "total_current_a": float(grid.currents.sum()),
        "feature_names": list(FEATURE_NAMES),
    }
    return CaseBundle(features=features, target=target, meta=meta)


def save_case(case: CaseBundle, root: str | os.PathLike) -> Path:
    out = Path(root) / f"case_{case.meta['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    wtns.save(out / "features.wtns", case.features)
    wtns.save(out / "target.wtns", case.target)
    (out / "meta.json").write_text(json.dumps(case.meta, sort_keys=True, indent=1) + "\n")
    return out


def load_case(path: str | os.PathLike) -> CaseBundle:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    return CaseBundle(wtns.load(path / "features.wtns"), wtns.load(path / "target.wtns"), meta)


def load_cases(root: str | os.PathLike) -> list:
    root = Path(root)
    dirs = [d for d in root.iterdir() if d.is_dir() and d.name.startswith("case_") and (d / "meta.json").exists()]
    dirs.sort(key=lambda d: (len(d.name), d.name))
    return [load_case(d) for d in dirs]
