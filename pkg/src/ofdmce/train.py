"""Training loop, MSE evaluation and sweep reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .dataset import Dataset, group_indices, sweep_column
from .estimators import LmmseEstimator, interpolate_ls
from .model import ModelConfig, Params, forward, forward_parts, init_model, split_complex

__all__ = [
    "TrainConfig", "PRESETS", "TrainResult", "TrainingDiverged", "EvalRow", "EvalReport",
    "mse_loss", "mse_db", "train", "evaluate", "model_estimator", "baseline_estimators",
    "dataset_mse",
]

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
Estimator = Callable[[np.ndarray, np.ndarray], np.ndarray]

DB_FLOOR = -120.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.995
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    # frames per forward/backward pass; gradients are summed in a fixed order
    micro_batch: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")


PRESETS: Dict[str, TrainConfig] = {
    "desk": TrainConfig(),
    "paper": TrainConfig(batch_size=512, max_epochs=1000),
}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``best_params`` holds the last good parameters."""

    def __init__(self, msg: str, best_params: Params):
        super().__init__(msg)
        self.best_params = best_params


def mse_loss(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Mean over grid entries of the squared complex error."""
    estimate, truth = np.asarray(estimate), np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.mean(_sq_err(estimate, truth)))


def _sq_err(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    d = estimate - truth
    return d.real ** 2 + d.imag ** 2


def mse_db(mse: float) -> float:
    return DB_FLOOR if mse <= 0 else max(DB_FLOOR, 10.0 * math.log10(mse))


def _copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def _batch_loss(params: Params, config: ModelConfig, ls: np.ndarray, stats: np.ndarray,
                truth: np.ndarray, weight: float):
    """Recorded loss ``weight * sum |err|^2 / (B N_f N_t)`` and its gradients."""
    b = len(ls)
    target = np.concatenate([truth.real, truth.imag], axis=0)
    with Tape() as tape:
        out = forward_parts(Tensor(split_complex(ls)), np.concatenate([stats, stats]), params, config)
        diff = ad.sub(out, Tensor(target))
        loss = ad.scale(ad.sum_all(ad.mul(diff, diff)), weight / (b * config.grid.size))
    grads = ad.backward(tape, loss)
    return float(loss.data), {name: grads[t] for name, t in params.items() if t in grads}


def dataset_mse(params: Params, config: ModelConfig, ds: Dataset, batch_size: int = 32) -> float:
    est = forward(ds.ls, ds.stats, params, config, batch_size=batch_size)
    return mse_loss(est, ds.channels)


@dataclass
class TrainResult:
    params: Params
    history: List[dict]
    best_epoch: int          # 0 means the initial parameters were never beaten
    initial_val_mse: float

    @property
    def best_val_mse(self) -> float:
        return min([self.initial_val_mse] + [h["val_mse"] for h in self.history])

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "lr"])
        for h in self.history:
            w.writerow([h["epoch"], repr(h["train_mse"]), repr(h["val_mse"]), repr(h["lr"])])
        return buf.getvalue()


def _check_compatible(config: ModelConfig, ds: Dataset, what: str) -> None:
    if ds.grid != config.grid or ds.pilots.spacing != config.pilot_spacing \
            or ds.pilots.time_indices != tuple(config.pilot_time_indices):
        raise ValueError(f"{what} set (grid {ds.grid.shape}, pilots {ds.pilots.shape}) does not "
                         f"match the model (grid {config.grid.shape}, spacing {config.pilot_spacing})")


def train(config: ModelConfig, train_set: Dataset, val_set: Dataset, tc: TrainConfig = TrainConfig(),
          params: Optional[Params] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Adam with per-epoch decay and early stopping on validation MSE.

    Returns the parameters of the best validation epoch (or the initial ones
    if no epoch improved on them).
    """
    _check_compatible(config, train_set, "training")
    _check_compatible(config, val_set, "validation")
    if params is None:
        params = init_model(config, tc.seed)
    state = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, decay=tc.lr_decay)
    best_params = _copy_params(params)
    best = initial = dataset_mse(params, config, val_set)
    best_epoch, stale = 0, 0
    history: List[dict] = []
    micro = tc.micro_batch or tc.batch_size
    k = len(train_set)
    for epoch in range(1, tc.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([tc.seed, epoch])).permutation(k)
        total = 0.0
        for start in range(0, k, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            grads: Dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for ms in range(0, len(idx), micro):
                sub = idx[ms:ms + micro]
                try:
                    loss, g = _batch_loss(params, config, train_set.ls[sub], train_set.stats[sub],
                                          train_set.channels[sub], len(sub) / len(idx))
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", best_params) from exc
                batch_loss += loss
                for name, v in g.items():
                    grads[name] = v if name not in grads else grads[name] + v
            try:
                ad.adam_step(params, grads, state)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best_params) from exc
            total += batch_loss * len(idx)
        lr_used = state.lr
        state.end_epoch()
        val = dataset_mse(params, config, val_set)
        if not math.isfinite(val):
            raise TrainingDiverged(f"epoch {epoch}: validation MSE is {val}", best_params)
        row = dict(epoch=epoch, train_mse=total / k, val_mse=val, lr=lr_used)
        history.append(row)
        log.info("epoch %d train %.4g val %.4g (%.1fs)", epoch, row["train_mse"], val,
                 time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
        if val < best:
            best, best_epoch, stale = val, epoch, 0
            best_params = _copy_params(params)
        else:
            stale += 1
            if stale >= tc.patience:
                break
    return TrainResult(best_params, history, best_epoch, initial)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    sweep_key: str
    sweep_value: float
    model: str
    mse_linear: float
    mse_db: float
    n: int


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    dataset: str = ""

    COLUMNS = ("sweep_key", "sweep_value", "model", "mse_linear", "mse_db", "n")

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def for_model(self, model: str) -> List[EvalRow]:
        return [r for r in self.rows if r.model == model]

    def curve(self, model: str) -> Dict[float, float]:
        return {r.sweep_value: r.mse_db for r in self.for_model(model)}

    def to_csv(self, path: Optional[PathLike] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.sweep_key, f"{r.sweep_value:g}", r.model, repr(r.mse_linear),
                        repr(r.mse_db), r.n])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def model_estimator(params: Params, config: ModelConfig, batch_size: int = 32) -> Estimator:
    def estimate(ls, stats):
        return forward(ls, stats if config.adaptive else None, params, config, batch_size=batch_size)
    return estimate


def baseline_estimators(train_set: Dataset, per_snr_lmmse: bool = False) -> Dict[str, Estimator]:
    lmmse = LmmseEstimator(train_set, per_snr=per_snr_lmmse)
    pilots, grid = train_set.pilots, train_set.grid
    return {
        "interp_ls": lambda ls, stats: interpolate_ls(ls, pilots, grid),
        "lmmse": lmmse,
    }


def evaluate(estimator: Estimator, test_set: Dataset, sweep_key: str, model: str,
             sweep_value: Optional[float] = None, stats_override: Optional[np.ndarray] = None,
             dataset_name: str = "") -> EvalReport:
    """Mean MSE per distinct value of the swept statistic.

    ``sweep_key`` is ``snr``, ``doppler`` or ``delay_spread``; for any other key
    (e.g. ``pilots``) all records form one group reported at ``sweep_value``.
    ``stats_override`` replaces the channel statistics fed to the estimator.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    fed = test_set.stats if stats_override is None else np.broadcast_to(
        np.asarray(stats_override, dtype=np.float64), test_set.stats.shape)
    est = estimator(test_set.ls, fed)
    err = np.mean(_sq_err(est, test_set.channels), axis=(1, 2))
    if sweep_key in ("snr", "doppler", "delay_spread"):
        groups = group_indices(test_set.stats[:, sweep_column(sweep_key)])
    else:
        if sweep_value is None:
            raise ValueError(f"sweep {sweep_key!r} needs an explicit sweep_value")
        groups = [(float(sweep_value), np.arange(len(test_set)))]
    rows = []
    for value, idx in groups:
        if len(idx) == 0:
            raise ValueError(f"empty group at {sweep_key}={value}")
        m = float(err[idx].mean())
        rows.append(EvalRow(sweep_key, value, model, m, mse_db(m), len(idx)))
    return EvalReport(rows, dataset_name)
