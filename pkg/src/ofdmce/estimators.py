"""Classical pilot-aided estimators: interpolated LS and LMMSE."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import scipy.linalg

from .dataset import Dataset
from .sim import GridConfig, PilotGrid, PilotObservation, unvec

__all__ = [
    "InterpolationError", "LmmseStatistics", "interpolation_matrices", "interpolate_ls",
    "fit_lmmse_statistics", "lmmse_estimate", "LmmseEstimator", "save_lmmse", "load_lmmse",
]

PathLike = Union[str, os.PathLike]


class InterpolationError(ValueError):
    """Not enough pilot rows/columns to interpolate."""


def _axis_matrix(n: int, knots) -> np.ndarray:
    # np.interp extends with the edge value outside the knot range
    eye = np.eye(len(knots))
    grid = np.arange(n)
    return np.stack([np.interp(grid, knots, eye[j]) for j in range(len(knots))], axis=1)


def interpolation_matrices(pilots: PilotGrid, grid: GridConfig):
    """Separable linear interpolation operators ``(N_f x n_fp)`` and ``(N_t x n_tp)``."""
    if len(pilots.freq_indices) < 2 or len(pilots.time_indices) < 2:
        raise InterpolationError(f"bilinear interpolation needs >= 2 pilot rows and columns, "
                                 f"got {pilots.shape}")
    return (_axis_matrix(grid.n_subcarriers, pilots.freq_indices),
            _axis_matrix(grid.n_symbols, pilots.time_indices))


def interpolate_ls(ls_estimate, pilots: PilotGrid, grid: GridConfig) -> np.ndarray:
    """Bilinear interpolation of LS pilot estimates over the full grid.

    Accepts a :class:`PilotObservation` or an array ``(..., |P|)``; returns
    ``(..., N_f, N_t)``. Outside the pilot hull the nearest edge value is held.
    """
    if isinstance(ls_estimate, PilotObservation):
        ls_estimate = ls_estimate.ls_estimate
    ls_estimate = np.asarray(ls_estimate)
    if ls_estimate.shape[-1] != pilots.size:
        raise ValueError(f"expected {pilots.size} pilot values, got {ls_estimate.shape[-1]}")
    wf, wt = interpolation_matrices(pilots, grid)
    n_fp, n_tp = pilots.shape
    hp = np.swapaxes(ls_estimate.reshape(*ls_estimate.shape[:-1], n_tp, n_fp), -1, -2)
    return wf @ hp @ wt.T


@dataclass(eq=False)
class LmmseStatistics:
    r_h_hp: np.ndarray    # (N_f N_t, |P|)
    r_hp_hp: np.ndarray   # (|P|, |P|)
    noise_var: float

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")
        if self.r_hp_hp.shape[0] != self.r_hp_hp.shape[1] or self.r_h_hp.shape[1] != self.r_hp_hp.shape[0]:
            raise ValueError(f"inconsistent correlation shapes {self.r_h_hp.shape}, {self.r_hp_hp.shape}")

    def gain(self) -> np.ndarray:
        """``R_hhp (R_hphp + s2 I)^-1`` computed by a Hermitian solve."""
        a = self.r_hp_hp + self.noise_var * np.eye(len(self.r_hp_hp))
        rhs = self.r_h_hp.conj().T
        try:
            x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(a, lower=True), rhs)
        except np.linalg.LinAlgError:
            x = scipy.linalg.solve(a, rhs)  # raises LinAlgError if truly singular
        # a is Hermitian, so (a^-1 R^H)^H = R a^-1
        return x.conj().T


def fit_lmmse_statistics(train: Dataset) -> LmmseStatistics:
    """Sample-mean correlation matrices and LS noise power from a dataset."""
    k = len(train)
    if k == 0:
        raise ValueError("cannot fit LMMSE statistics on an empty dataset")
    h = np.swapaxes(train.channels, -1, -2).reshape(k, -1)
    hp = train.pilot_truth()
    r_h_hp = h.T @ hp.conj() / k
    r_hp_hp = hp.T @ hp.conj() / k
    r_hp_hp = 0.5 * (r_hp_hp + r_hp_hp.conj().T)
    noise_var = float(np.mean(np.abs(train.ls - hp) ** 2))
    return LmmseStatistics(r_h_hp, r_hp_hp, noise_var)


def lmmse_estimate(obs, stats: LmmseStatistics, grid: GridConfig) -> np.ndarray:
    """Apply the LMMSE filter to LS pilot estimates ``(..., |P|)``; returns frames."""
    if isinstance(obs, PilotObservation):
        obs = obs.ls_estimate
    obs = np.asarray(obs)
    if obs.shape[-1] != stats.r_hp_hp.shape[0] or stats.r_h_hp.shape[0] != grid.size:
        raise ValueError(f"LMMSE statistics {stats.r_h_hp.shape} do not match input "
                         f"{obs.shape} on grid {grid.shape}")
    return unvec(obs @ stats.gain().T, grid)


class LmmseEstimator:
    """Batched LMMSE with one pooled statistic, or per-SNR noise variances.

    With ``per_snr=True`` the correlation matrices stay pooled and the noise
    variance is re-estimated from the training records of each SNR value.
    """

    def __init__(self, train: Dataset, per_snr: bool = False):
        self.grid = train.grid
        self.stats = fit_lmmse_statistics(train)
        self._gain = self.stats.gain()
        self._by_snr: Dict[float, np.ndarray] = {}
        if per_snr:
            hp = train.pilot_truth()
            for snr in np.unique(train.stats[:, 0]):
                sel = train.stats[:, 0] == snr
                nv = float(np.mean(np.abs(train.ls[sel] - hp[sel]) ** 2))
                s = LmmseStatistics(self.stats.r_h_hp, self.stats.r_hp_hp, nv)
                self._by_snr[float(snr)] = s.gain()

    @classmethod
    def from_statistics(cls, stats: LmmseStatistics, grid: GridConfig) -> "LmmseEstimator":
        self = cls.__new__(cls)
        self.grid, self.stats, self._gain, self._by_snr = grid, stats, stats.gain(), {}
        return self

    def __call__(self, ls: np.ndarray, stats: Optional[np.ndarray] = None) -> np.ndarray:
        if not self._by_snr or stats is None:
            return unvec(ls @ self._gain.T, self.grid)
        out = np.empty((len(ls), self.grid.size), dtype=np.complex128)
        for i, snr in enumerate(stats[:, 0]):
            out[i] = self._by_snr.get(float(snr), self._gain) @ ls[i]
        return unvec(out, self.grid)


_LMMSE_MAGIC = b"AFTL"


def save_lmmse(stats: LmmseStatistics, path: PathLike) -> None:
    """Binary sidecar: magic, version u16, n_grid u32, n_pilots u32, noise_var f32,
    then ``r_h_hp`` and ``r_hp_hp`` as row-major interleaved complex f32 pairs."""
    n, p = stats.r_h_hp.shape
    with open(path, "wb") as fh:
        fh.write(_LMMSE_MAGIC + struct.pack("<HIIf", 1, n, p, stats.noise_var))
        for m in (stats.r_h_hp, stats.r_hp_hp):
            fh.write(np.ascontiguousarray(m, dtype=np.complex64).view("<f4").tobytes())


def load_lmmse(path: PathLike) -> LmmseStatistics:
    buf = Path(path).read_bytes()
    if buf[:4] != _LMMSE_MAGIC:
        raise ValueError(f"{path}: not an LMMSE statistics file")
    version, n, p, noise_var = struct.unpack_from("<HIIf", buf, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HIIf")
    a = np.frombuffer(buf, "<f4", 2 * n * p, off).view(np.complex64).reshape(n, p)
    b = np.frombuffer(buf, "<f4", 2 * p * p, off + 8 * n * p).view(np.complex64).reshape(p, p)
    return LmmseStatistics(a.astype(np.complex128), b.astype(np.complex128), float(noise_var))
