"""``waca`` command line: data generation, training, evaluation, inference and attention export.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, wtns
from .attention import ATTENTION_KINDS, WACA_KINDS
from .backbone import CheckpointError, ConfigError, UNetConfig, WacaUNet, load_checkpoint, save_checkpoint
from .evalkit import (
    EvalConfig,
    HotspotConfig,
    dump_case_artifacts,
    evaluate_suite,
    predict_map,
    summary_dict,
    write_report_csv,
)
from .pdn import ConvergenceError, GenConfig, SingularSystemError, gen_case, load_case, load_cases, save_case
from .pipeline.data import apply_zscore
from .pipeline.losses import LossConfig
from .pipeline.train import DivergenceError, TrainConfig, train, write_log_csv
from .tensor import Tensor, no_grad

log = logging.getLogger("waca")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_SECTIONS = ("gen", "model", "train", "loss", "eval")
SEED_ENV = "WACA_SEED"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it to our usage code instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config, seed and manifest helpers
# ---------------------------------------------------------------------------


@dataclass
class EvalSection:
    """The ``eval`` config section."""

    ratio: float = 0.9
    model_resolution: Optional[int] = None

    def __post_init__(self):
        HotspotConfig(self.ratio)
        if self.model_resolution is not None and self.model_resolution < 1:
            raise ValueError("model_resolution must be positive")

    def hotspot(self) -> HotspotConfig:
        return HotspotConfig(self.ratio)

    def to_eval_config(self) -> EvalConfig:
        return EvalConfig(hotspot=self.hotspot(), model_resolution=self.model_resolution)


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must hold a JSON object")
    unknown = sorted(set(cfg) - set(CONFIG_SECTIONS))
    if unknown:
        raise DataError(f"config {path}: unknown sections {unknown}; expected some of {list(CONFIG_SECTIONS)}")
    # a typo in a section the command does not use is still a broken file
    for name, cls in (("gen", GenConfig), ("train", TrainConfig), ("loss", LossConfig), ("eval", EvalSection)):
        _section(cfg, name, cls)
    _model_config(cfg.get("model", {}))
    return cfg


def _model_config(data: dict) -> UNetConfig:
    try:
        return UNetConfig.from_dict(dict(data))
    except (TypeError, ValueError) as exc:
        raise DataError(f"config section 'model': {exc}") from exc


def _section(cfg: dict, name: str, cls):
    data = dict(cfg.get(name, {}))
    unknown = sorted(set(data) - set(cls.__dataclass_fields__))
    if unknown:
        raise DataError(f"config section {name!r}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config section {name!r}: {exc}") from exc


def resolve_seed(flag: Optional[int], configured: Optional[int], default: int = 0) -> int:
    """Flag, then config file, then ``WACA_SEED``, then ``default``."""
    if flag is not None:
        return int(flag)
    if configured is not None:
        return int(configured)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise DataError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return default


def _git(*args) -> Optional[str]:
    try:
        out = subprocess.run(["git", *args], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else None


def version_string() -> str:
    """``git describe`` output, or ``v<version>-g<hash>`` for an untagged tree."""
    described = _git("describe", "--tags", "--dirty")
    if described:
        return described
    head = _git("rev-parse", "--short", "HEAD")
    if head:
        dirty = "-dirty" if _git("status", "--porcelain", "--untracked-files=no") else ""
        return f"v{__version__}-g{head}{dirty}"
    return f"v{__version__}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def write_manifest(out: Path, command: str, config_path: Optional[str], seed: Optional[int],
                   started: str, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "config_path": str(Path(config_path).resolve()) if config_path else None,
        "seed": seed,
        "version": version_string(),
        "started_utc": started,
        "finished_utc": _now(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_dataset(path: str, what: str) -> list:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{what} directory {root} does not exist")
    try:
        cases = load_cases(root)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read {what} cases under {root}: {exc}") from exc
    if not cases:
        raise DataError(f"no case_* directories under {root}")
    return cases


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _load_one_case(path: str):
    try:
        return load_case(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read case {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _gen_one(job):
    seed, cfg_dict, out = job
    case = gen_case(seed, GenConfig.from_dict(cfg_dict))
    save_case(case, out)
    return seed


def cmd_gen_data(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    gen = _section(cfg, "gen", GenConfig)
    seed = resolve_seed(args.seed, None)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    out = _prepare_out(args.out)
    jobs = [(s, gen.to_dict(), str(out)) for s in range(seed, seed + args.count)]
    # each case draws from its own seed, so the pool size cannot change any bytes
    if args.workers == 1:
        for job in jobs:
            _gen_one(job)
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_gen_one, jobs, chunksize=max(1, len(jobs) // (4 * args.workers))))
    log.info("wrote %d cases to %s", args.count, out)
    write_manifest(out, "gen-data", args.config, seed, started,
                   {"count": args.count, "workers": args.workers, "gen": gen.to_dict()})
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    model_cfg = dict(cfg.get("model", {}))
    if args.attention_kind is not None:
        model_cfg["attention_kind"] = args.attention_kind
    mcfg = _model_config(model_cfg)
    tsec = dict(cfg.get("train", {}))
    tsec["seed"] = resolve_seed(args.seed, tsec.get("seed"))
    if args.epochs is not None:
        tsec["epochs"] = args.epochs
    tcfg = _section({"train": tsec}, "train", TrainConfig)
    lcfg = _section(cfg, "loss", LossConfig)
    hot = _section(cfg, "eval", EvalSection).hotspot()

    train_set = _load_dataset(args.data, "training")
    val_set = _load_dataset(args.val, "validation")
    channels = {c.features.shape[0] for c in train_set + val_set}
    if channels != {mcfg.in_channels}:
        raise DataError(f"cases have {sorted(channels)} feature channels, model expects {mcfg.in_channels}")
    out = _prepare_out(args.out)

    model = WacaUNet(mcfg, seed=tcfg.seed)
    ckpt = train(model, train_set, val_set, tcfg, lcfg, hotspot=hot)
    ckpt.extra = {"train": tcfg.to_dict(), "loss": asdict(lcfg)}
    save_checkpoint(ckpt, out / "checkpoint.wtnc")
    write_log_csv(ckpt.history, out / "train_log.csv")
    write_manifest(out, "train", args.config, tcfg.seed, started,
                   {"data": str(Path(args.data).resolve()), "val": str(Path(args.val).resolve()),
                    "best_epoch": ckpt.epoch, "best_val_f1": ckpt.val_f1})
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    ev = _section(cfg, "eval", EvalSection)
    ckpt = _load_ckpt(args.checkpoint)
    cases = _load_dataset(args.data, "evaluation")
    out = _prepare_out(args.out)
    res = evaluate_suite(ckpt, cases, ev.to_eval_config())
    write_report_csv(res, out / "report.csv")
    (out / "summary.json").write_text(json.dumps(summary_dict(res), indent=1, sort_keys=True) + "\n")
    log.info("mean MAE %.4f mV, mean F1 %.4f over %d cases", res.aggregate.mae_mv, res.aggregate.f1, len(cases))
    write_manifest(out, "eval", args.config, None, started, {"checkpoint": str(Path(args.checkpoint).resolve())})
    return EXIT_OK


def cmd_infer(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    ev = _section(cfg, "eval", EvalSection)
    ckpt = _load_ckpt(args.checkpoint)
    case = _load_one_case(args.case)
    pred = predict_map(ckpt, case.features, ev.model_resolution)
    target = np.asarray(case.target, dtype=np.float64).reshape(pred.shape)
    out = dump_case_artifacts(_prepare_out(args.out), pred, target, ev.hotspot())
    write_manifest(out, "infer", args.config, None, started,
                   {"checkpoint": str(Path(args.checkpoint).resolve()), "case": str(Path(args.case).resolve())})
    return EXIT_OK


def attention_records(ckpt, features) -> list:
    """Per-block stage-1 / stage-2 / fused channel scores for one case (64-bit forward)."""
    kind = ckpt.config.attention_kind
    if kind not in WACA_KINDS:
        raise ConfigError(f"attention export needs a weakness-aware checkpoint {WACA_KINDS}, got {kind!r}")
    if features.shape[0] != ckpt.config.in_channels:
        raise ConfigError(f"case has {features.shape[0]} feature channels, checkpoint expects {ckpt.config.in_channels}")
    model = ckpt.model.clone().astype(np.float64)
    x = apply_zscore(np.asarray(features, dtype=np.float64), ckpt.norm_stats)
    states: list = []
    with no_grad():
        model.forward(Tensor(x[None]), states)
    return [st.record(i, name) for i, (name, st) in enumerate(states, start=1)]


def cmd_inspect_attn(args) -> int:
    started = _now()
    ckpt = _load_ckpt(args.checkpoint)
    case = _load_one_case(args.case)
    records = attention_records(ckpt, np.asarray(case.features))
    out = _prepare_out(args.out)
    (out / "attention.json").write_text(json.dumps(records, indent=1) + "\n")
    write_manifest(out, "inspect-attn", None, None, started,
                   {"checkpoint": str(Path(args.checkpoint).resolve()), "case": str(Path(args.case).resolve()),
                    "alpha": ckpt.config.alpha, "blocks": len(records)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="waca", description="Weakness-aware channel attention U-Net for static IR-drop maps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate synthetic PDN cases")
    g.add_argument("--config", help="JSON config (section 'gen')")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, help=f"first seed (default: ${SEED_ENV} or 0)")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and keep the best validation-F1 checkpoint")
    t.add_argument("--config", help="JSON config (sections 'model', 'train', 'loss', 'eval')")
    t.add_argument("--data", required=True, help="directory of training cases")
    t.add_argument("--val", required=True, help="directory of validation cases")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--attention-kind", choices=ATTENTION_KINDS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a directory of cases")
    e.add_argument("--config", help="JSON config (section 'eval')")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one case and dump maps, masks and scatter data")
    i.add_argument("--config", help="JSON config (section 'eval')")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--case", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("inspect-attn", help="export per-block channel attention scores")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--case", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_inspect_attn)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"waca {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ConvergenceError, FloatingPointError) as exc:
        print(f"waca {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, CheckpointError, SingularSystemError, wtns.FormatError,
            ValueError, OSError) as exc:
        print(f"waca {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
