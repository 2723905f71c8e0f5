"""Command-line entry point: ``python -m ofdmce {generate,train,eval}``.

An experiment is described by an INI file; every output is a pure function of
that file and the master seed. Files land under ``<out>/N<spacing>/``::

    train.aftd val.aftd test_<sweep>.aftd      (generate)
    <variant>-<size>.aftc .history.csv         (train)
    lmmse.aftl                                 (train, LMMSE statistics sidecar)
    eval_<sweep>.csv                           (eval)

``eval --sweep pilots`` writes one table across all spacings to
``<out>/eval_pilots.csv``.

Config sections: ``[experiment]`` (seed, preset, out), ``[grid]``, ``[pilots]``
(spacing list, time_indices), ``[data]`` (record counts, sweeps), ``[model]``
(variants, size), ``[train]`` and optional per-variant ``[train.<variant>]``
overrides of batch_size, lr, lr_decay, max_epochs, patience, micro_batch.
Unset values fall back to the preset.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import (SWEEPS, Dataset, DatasetFormatError, build_dataset, describe, read_dataset,
                      sweep_recipe, training_recipe)
from .estimators import LmmseEstimator, fit_lmmse_statistics, interpolate_ls, load_lmmse, save_lmmse
from .model import SIZES, VARIANTS, CheckpointMismatchError, ModelConfig, load_checkpoint, save_checkpoint
from .sim import GridConfig
from .train import PRESETS, EvalReport, TrainConfig, TrainingDiverged, evaluate, model_estimator, train

log = logging.getLogger("ofdmce")

# records per file: (train, val, test per sweep point)
PRESET_SIZES = {"desk": (2000, 500, 200), "paper": (100_000, 10_000, 2000)}

# per-role offsets mixed into the master seed
_ROLE = {"train": 1, "val": 2, "test_snr": 3, "test_doppler": 4, "test_delay_spread": 5,
         "test_pilots": 6, "train_seed": 7}

_DEFAULT_CONFIG = """\
[experiment]
seed = 0
preset = desk

[grid]
n_subcarriers = 120
n_symbols = 14
subcarrier_spacing = 15000

[pilots]
spacing = 3
time_indices = 2 11

[data]
sweeps = snr doppler delay_spread pilots

[model]
variants = adafortitran linear
size = S
"""


class CliError(Exception):
    """User-facing failure; reported without a traceback."""


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    preset: str
    out: Optional[Path]
    grid: GridConfig
    spacings: Tuple[int, ...]
    time_indices: Tuple[int, ...]
    n_train: int
    n_val: int
    n_test: int
    sweeps: Tuple[str, ...]
    variants: Tuple[str, ...]
    size: str
    train: TrainConfig
    train_overrides: Tuple[Tuple[str, TrainConfig], ...] = ()
    workers: int = 1

    def train_config(self, variant: str) -> TrainConfig:
        tc = dict(self.train_overrides).get(variant, self.train)
        return replace(tc, seed=self.derived_seed("train_seed") % 2**32)

    def model_config(self, variant: str, spacing: int) -> ModelConfig:
        return ModelConfig(variant=variant, n_layers=SIZES[self.size] if variant != "linear" else 0,
                           grid=self.grid, pilot_spacing=spacing,
                           pilot_time_indices=self.time_indices)

    def run_dir(self, spacing: int) -> Path:
        assert self.out is not None
        return self.out / f"N{spacing}"

    def derived_seed(self, role: str) -> int:
        state = np.random.SeedSequence([self.seed, _ROLE[role]]).generate_state(1, dtype=np.uint64)
        return int(state[0])


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _words(text: str) -> Tuple[str, ...]:
    return tuple(text.replace(",", " ").split())


def load_experiment(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None,
                    preset: Optional[str] = None, workers: int = 1) -> ExperimentConfig:
    """Parse an experiment file; command-line values override file values."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(_DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        try:
            cp.read_string(p.read_text(), source=str(p))
        except configparser.Error as exc:
            raise CliError(f"{p}: {exc}") from None
    try:
        exp = cp["experiment"]
        preset = preset or exp.get("preset", "desk")
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        n_train, n_val, n_test = PRESET_SIZES[preset]
        data = cp["data"]
        tc = _train_config(cp, "train", PRESETS[preset])
        # optional per-variant overrides, e.g. [train.adafortitran]
        tc_by_variant = {v: _train_config(cp, f"train.{v}", tc) for v in VARIANTS
                         if cp.has_section(f"train.{v}")}
        g = cp["grid"]
        grid = GridConfig(int(g["n_subcarriers"]), int(g["n_symbols"]), float(g["subcarrier_spacing"]))
        cfg = ExperimentConfig(
            seed=int(seed if seed is not None else exp.get("seed", "0")),
            preset=preset,
            out=Path(out) if out is not None else (Path(exp["out"]) if "out" in exp else None),
            grid=grid,
            spacings=_ints(cp["pilots"]["spacing"]),
            time_indices=_ints(cp["pilots"]["time_indices"]),
            n_train=int(data.get("train_records", n_train)),
            n_val=int(data.get("val_records", n_val)),
            n_test=int(data.get("test_records_per_point", n_test)),
            sweeps=_words(data["sweeps"]),
            variants=_words(cp["model"]["variants"]),
            size=cp["model"].get("size", "S"),
            train=tc,
            train_overrides=tuple(sorted(tc_by_variant.items())),
            workers=workers,
        )
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid experiment config: {exc}") from None
    _validate(cfg)
    return cfg


def _train_config(cp: configparser.ConfigParser, section: str, base: TrainConfig) -> TrainConfig:
    if not cp.has_section(section):
        return base
    sec = cp[section]
    unknown = set(sec) - {"batch_size", "lr", "lr_decay", "max_epochs", "patience", "micro_batch"}
    if unknown:
        raise CliError(f"[{section}]: unknown keys {sorted(unknown)}")
    return replace(
        base,
        batch_size=sec.getint("batch_size", base.batch_size),
        lr=sec.getfloat("lr", base.lr),
        lr_decay=sec.getfloat("lr_decay", base.lr_decay),
        max_epochs=sec.getint("max_epochs", base.max_epochs),
        patience=sec.getint("patience", base.patience),
        micro_batch=sec.getint("micro_batch", base.micro_batch),
    )


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.out is None:
        raise CliError("no output directory: pass --out or set [experiment] out")
    if not 0 <= cfg.seed < 2**64:
        raise CliError(f"seed must be an unsigned 64-bit integer, got {cfg.seed}")
    if not cfg.spacings or any(n < 1 for n in cfg.spacings):
        raise CliError(f"pilot spacing must be >= 1, got {cfg.spacings}")
    bad = [s for s in cfg.sweeps if s not in SWEEPS]
    if bad:
        raise CliError(f"unknown sweeps {bad}; choose from {sorted(SWEEPS)}")
    bad = [v for v in cfg.variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown model variants {bad}; choose from {list(VARIANTS)}")
    if cfg.size not in SIZES:
        raise CliError(f"unknown model size {cfg.size!r}; choose from {list(SIZES)}")
    if min(cfg.n_train, cfg.n_val, cfg.n_test) < 1:
        raise CliError("record counts must be positive")
    try:
        for n in cfg.spacings:
            for v in cfg.variants:
                cfg.model_config(v, n).pilots.check(cfg.grid)
    except ValueError as exc:
        raise CliError(f"invalid model/grid settings: {exc}") from None


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror}") from None


def _read(path: Path) -> Dataset:
    if not path.is_file():
        raise CliError(f"dataset not found: {path} (run `generate` first)")
    try:
        return read_dataset(path)
    except DatasetFormatError as exc:
        raise CliError(f"{path}: {exc}") from None


def _model_name(cfg: ExperimentConfig, variant: str) -> str:
    return "linear" if variant == "linear" else f"{variant}-{cfg.size}"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> None:
    kw = dict(grid=cfg.grid, pilot_time_indices=cfg.time_indices)
    for n in cfg.spacings:
        d = cfg.run_dir(n)
        _ensure_dir(d)
        jobs = [("train", training_recipe(cfg.n_train, n, **kw)),
                ("val", training_recipe(cfg.n_val, n, **kw))]
        jobs += [(f"test_{s}", sweep_recipe(s, cfg.n_test, n, **kw)) for s in cfg.sweeps]
        for role, recipe in jobs:
            path = d / f"{role}.aftd"
            try:
                ds = build_dataset(recipe, path, cfg.derived_seed(role), cfg.workers)
            except OSError as exc:
                raise CliError(f"cannot write {path}: {exc.strerror}") from None
            print(f"{path}: {describe(ds)}")


def cmd_train(cfg: ExperimentConfig) -> None:
    for n in cfg.spacings:
        d = cfg.run_dir(n)
        train_set, val_set = _read(d / "train.aftd"), _read(d / "val.aftd")
        save_lmmse(fit_lmmse_statistics(train_set), d / "lmmse.aftl")
        for variant in cfg.variants:
            config = cfg.model_config(variant, n)
            name = _model_name(cfg, variant)
            t0 = time.perf_counter()
            try:
                log.info("training %s at N=%d", name, n)
                res = train(config, train_set, val_set, cfg.train_config(variant))
            except TrainingDiverged as exc:
                save_checkpoint(exc.best_params, config, d / f"{name}.diverged.aftc")
                raise CliError(f"training {name} (N={n}) diverged: {exc}; last good parameters "
                               f"saved to {d / (name + '.diverged.aftc')}") from None
            save_checkpoint(res.params, config, d / f"{name}.aftc")
            (d / f"{name}.history.csv").write_text(res.history_csv())
            print(f"{d / (name + '.aftc')}: {len(res.history)} epochs, best epoch {res.best_epoch}, "
                  f"val MSE {res.best_val_mse:.6g} ({time.perf_counter() - t0:.0f}s)")


def _eval_one(cfg: ExperimentConfig, n: int, sweep: str, checkpoints: Dict[str, Path]) -> EvalReport:
    d = cfg.run_dir(n)
    test = _read(d / f"test_{sweep}.aftd")
    value = float(n) if sweep == "pilots" else None
    if (d / "lmmse.aftl").is_file():
        lmmse = LmmseEstimator.from_statistics(load_lmmse(d / "lmmse.aftl"), test.grid)
    else:
        lmmse = LmmseEstimator(_read(d / "train.aftd"))
    report = EvalReport(dataset=f"test_{sweep}")
    report.extend(evaluate(lambda ls, st: interpolate_ls(ls, test.pilots, test.grid), test, sweep,
                           "interp_ls", value))
    report.extend(evaluate(lmmse, test, sweep, "lmmse", value))
    for variant in cfg.variants:
        config = cfg.model_config(variant, n)
        name = _model_name(cfg, variant)
        path = checkpoints.get(name, d / f"{name}.aftc")
        if not path.is_file():
            raise CliError(f"checkpoint not found: {path} (run `train` first)")
        try:
            params = load_checkpoint(path, config)
        except CheckpointMismatchError as exc:
            raise CliError(f"config hash mismatch: {exc}") from None
        report.extend(evaluate(model_estimator(params, config), test, sweep, name, value))
    return report


def cmd_eval(cfg: ExperimentConfig, sweeps: Sequence[str], checkpoint: Optional[str] = None) -> None:
    checkpoints: Dict[str, Path] = {}
    if checkpoint is not None:
        if len(cfg.variants) != 1 or len(cfg.spacings) != 1:
            raise CliError("--checkpoint needs a config with exactly one variant and one pilot spacing")
        checkpoints[_model_name(cfg, cfg.variants[0])] = Path(checkpoint)
    for sweep in sweeps:
        if sweep not in cfg.sweeps:
            raise CliError(f"sweep {sweep!r} is not generated by this config (sweeps = {' '.join(cfg.sweeps)})")
        if sweep == "pilots":
            report = EvalReport(dataset="test_pilots")
            for n in sorted(cfg.spacings, reverse=True):
                report.extend(_eval_one(cfg, n, sweep, checkpoints))
            path = cfg.out / "eval_pilots.csv"
            report.rows.sort(key=lambda r: (r.model != "interp_ls", r.model != "lmmse", r.model,
                                            -r.sweep_value))
            report.to_csv(path)
            print(f"{path}: {len(report.rows)} rows")
        else:
            for n in cfg.spacings:
                path = cfg.run_dir(n) / f"eval_{sweep}.csv"
                report = _eval_one(cfg, n, sweep, checkpoints)
                report.to_csv(path)
                print(f"{path}: {len(report.rows)} rows")
                for model in dict.fromkeys(r.model for r in report.rows):
                    curve = " ".join(f"{r.mse_db:7.2f}" for r in report.for_model(model))
                    print(f"  {model:<18} {curve}")


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="experiment INI file (grid, pilots, data, model, train sections)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [experiment] out)")
    common.add_argument("--seed", type=_u64, metavar="U64", help="master seed (overrides [experiment] seed)")
    common.add_argument("--workers", type=_positive, default=1, metavar="N",
                        help="worker processes; affects wall-clock time only (default 1)")
    common.add_argument("--preset", choices=sorted(PRESETS),
                        help="record counts and training schedule; desk: 2,000 training records with "
                             "batch 64 for up to 100 epochs, paper: 100,000 records with batch 512 "
                             "for up to 1,000 epochs")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training progress")

    parser = argparse.ArgumentParser(prog="ofdmce", description="OFDM channel-estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{generate,train,eval}")
    sub.add_parser("generate", parents=[common], help="write train/val/test dataset files",
                   description="Write the training/validation pair plus one test set per sweep, for every pilot spacing.")
    sub.add_parser("train", parents=[common], help="train the configured model variants",
                   description="Train every configured variant; writes per-model checkpoints with "
                               "history CSVs, plus the LMMSE statistics sidecar.")
    ev = sub.add_parser("eval", parents=[common], help="evaluate checkpoints and baselines on a sweep",
                        description="Evaluate trained models against the interpolated-LS and LMMSE baselines.")
    ev.add_argument("--sweep", choices=sorted(SWEEPS), action="append", metavar="KEY",
                    help=f"sweep to evaluate, repeatable ({', '.join(sorted(SWEEPS))}); "
                         "default: every sweep in the config")
    ev.add_argument("--checkpoint", metavar="PATH",
                    help="checkpoint to evaluate instead of <out>/N<n>/<model>.aftc "
                         "(single variant and spacing only)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_experiment(args.config, args.seed, args.out, args.preset, args.workers)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        else:
            cmd_eval(cfg, args.sweep or list(cfg.sweeps), args.checkpoint)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
