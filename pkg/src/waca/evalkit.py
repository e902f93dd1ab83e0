"""Contest-style scoring: MAE, hotspot masks, F1, runtime and report files."""

from __future__ import annotations

import csv
import os
import platform
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import wtns
from .backbone import ConfigError
from .pipeline.data import apply_zscore, lanczos_resize
from .tensor import Tensor, no_grad

REPORT_FIELDS = ("case", "mae_mv", "f1", "tp", "fp", "fn", "runtime_s")


@dataclass(frozen=True)
class HotspotConfig:
    ratio: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"hotspot ratio must lie in (0, 1], got {self.ratio}")


@dataclass(frozen=True)
class EvalConfig:
    hotspot: HotspotConfig = HotspotConfig()
    model_resolution: Optional[int] = None  # None: run the model at the case's native size
    single_thread: bool = True


@dataclass
class EvalReport:
    case_id: str
    mae_mv: float
    tp: int
    fp: int
    fn: int
    f1: float
    runtime_s: float


@dataclass
class SuiteResult:
    reports: list
    aggregate: EvalReport
    f1_std: float
    mae_std: float


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def mae(pred, target) -> float:
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} differ in shape")
    return float(np.abs(p - t).mean())


def hotspot_mask(map_, cfg: HotspotConfig = HotspotConfig()) -> np.ndarray:
    """Pixels at or above ``ratio`` times the map's own maximum.

    A map whose maximum is not positive has no hotspots.
    """
    m = _arr(map_)
    peak = m.max()
    if not peak > 0:
        return np.zeros(m.shape, dtype=bool)
    return m >= cfg.ratio * peak


def f1(pred_mask, true_mask) -> tuple:
    """Return ``(f1, tp, fp, fn)``; two empty masks score 1.0."""
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(true_mask, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    denom = 2 * tp + fp + fn
    return (1.0 if denom == 0 else 2.0 * tp / denom), tp, fp, fn


def predict_map(ckpt, features, resolution: Optional[int] = None) -> np.ndarray:
    """Normalize, optionally resize to the model resolution, run the model, resize back.

    Returns the [H, W] prediction at the features' native resolution.
    """
    feats = _arr(features)
    cin = ckpt.config.in_channels
    if feats.shape[0] != cin:
        raise ConfigError(f"case has {feats.shape[0]} feature channels, checkpoint expects {cin}")
    if ckpt.norm_stats is None:
        raise ConfigError("checkpoint carries no normalization statistics")
    h, w = feats.shape[1:]
    x = apply_zscore(feats, ckpt.norm_stats)
    resized = resolution is not None and (resolution, resolution) != (h, w)
    if resized:
        x = lanczos_resize(x, resolution, resolution)
    dtype = getattr(ckpt.model, "dtype", np.float64)
    with no_grad():
        out = ckpt.model.forward(Tensor(x[None].astype(dtype)))
    pred = np.asarray(out.data[0, 0], dtype=np.float64)
    if resized:
        pred = lanczos_resize(pred, h, w)
    return pred


def score_maps(case_id: str, pred, target, cfg: HotspotConfig = HotspotConfig(), runtime_s: float = 0.0) -> EvalReport:
    p, t = _arr(pred), _arr(target)
    score, tp, fp, fn = f1(hotspot_mask(p, cfg), hotspot_mask(t, cfg))
    return EvalReport(case_id, mae(p, t), tp, fp, fn, score, runtime_s)


def evaluate_case(model, case, eval_cfg: EvalConfig = EvalConfig()) -> EvalReport:
    target = _arr(case.target)
    target = target.reshape(target.shape[-2:])
    limit = threadpool_limits(1) if eval_cfg.single_thread else None
    try:
        start = time.perf_counter()
        pred = predict_map(model, case.features, eval_cfg.model_resolution)
        runtime = time.perf_counter() - start
    finally:
        if limit is not None:
            limit.unregister()
    return score_maps(case.case_id, pred, target, eval_cfg.hotspot, runtime)


def aggregate_reports(reports: Sequence[EvalReport]) -> SuiteResult:
    if not reports:
        raise ValueError("no reports to aggregate")
    maes = np.array([r.mae_mv for r in reports])
    f1s = np.array([r.f1 for r in reports])
    rts = np.array([r.runtime_s for r in reports])
    agg = EvalReport(
        case_id="average",
        mae_mv=float(maes.mean()),
        tp=int(sum(r.tp for r in reports)),
        fp=int(sum(r.fp for r in reports)),
        fn=int(sum(r.fn for r in reports)),
        f1=float(f1s.mean()),
        runtime_s=float(rts.mean()),
    )
    return SuiteResult(list(reports), agg, f1_std=float(f1s.std()), mae_std=float(maes.std()))


def evaluate_suite(model, cases, eval_cfg: EvalConfig = EvalConfig()) -> SuiteResult:
    cases = list(cases)
    if not cases:
        raise ValueError("evaluate_suite needs at least one case")
    return aggregate_reports([evaluate_case(model, c, eval_cfg) for c in cases])


def hardware_info() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
    }


def write_report_csv(result: SuiteResult, path: str | os.PathLike) -> None:
    """Per-case rows then an ``average`` row (counts in that row are totals)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in result.reports + [result.aggregate]:
            writer.writerow([r.case_id, repr(r.mae_mv), repr(r.f1), r.tp, r.fp, r.fn, repr(r.runtime_s)])


def read_report_csv(path: str | os.PathLike) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EvalReport(row["case"], float(row["mae_mv"]), int(row["tp"]), int(row["fp"]), int(row["fn"]),
                   float(row["f1"]), float(row["runtime_s"]))
        for row in rows
    ]


def summary_dict(result: SuiteResult) -> dict:
    agg = asdict(result.aggregate)
    agg.pop("case_id")
    return {"aggregate": agg, "f1_std": result.f1_std, "mae_std": result.mae_std,
            "cases": len(result.reports), "hardware": hardware_info()}


def dump_case_artifacts(out_dir: str | os.PathLike, pred, target, cfg: HotspotConfig = HotspotConfig()) -> Path:
    """Prediction, |error| map, both hotspot masks and pred-vs-target scatter data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p, t = _arr(pred), _arr(target)
    pm, tm = hotspot_mask(p, cfg), hotspot_mask(t, cfg)
    wtns.save(out / "pred.wtns", p[None])
    wtns.save(out / "abs_error.wtns", np.abs(p - t)[None])
    wtns.save(out / "pred_mask.wtns", pm.astype(np.float64)[None])
    wtns.save(out / "true_mask.wtns", tm.astype(np.float64)[None])
    with open(out / "scatter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_mv", "pred_mv", "true_hotspot", "pred_hotspot"])
        for tv, pv, a, b in zip(t.ravel(), p.ravel(), tm.ravel(), pm.ravel()):
            writer.writerow([repr(float(tv)), repr(float(pv)), int(a), int(b)])
    return out
