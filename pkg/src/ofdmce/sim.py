"""OFDM resource grid, TDL-A fading channels and pilot observations.

Channels are synthesized directly in the frequency domain: tap gains are
sampled once per OFDM symbol with a Jakes sum-of-sinusoids generator and the
per-subcarrier response is evaluated analytically from the tap delays.

Vectorization convention used everywhere in the package: a ``(N_f, N_t)``
frame is flattened frequency-major, i.e. the subcarrier index runs fastest
(``H.flatten(order="F")``). Pilot vectors follow the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "GridConfig", "PilotGrid", "ChannelStats", "TapTrajectory", "PilotObservation",
    "InvalidPilotError", "PILOT_SEED", "load_tdl_profile", "rms_delay_spread",
    "generate_tdl_taps", "taps_to_frequency_response", "simulate_pilots",
    "vec", "unvec",
]

#: Seed of the project-wide QPSK pilot sequence.
PILOT_SEED = 0x5EED_F0_7E

DEFAULT_PILOT_SYMBOLS = (2, 11)


class InvalidPilotError(ValueError):
    """A pilot symbol is zero, so the LS division is undefined."""


@dataclass(frozen=True)
class GridConfig:
    n_subcarriers: int = 120
    n_symbols: int = 14
    subcarrier_spacing: float = 15e3

    def __post_init__(self):
        if self.n_subcarriers <= 0 or self.n_symbols <= 0:
            raise ValueError(f"grid must be non-empty, got {self.n_subcarriers}x{self.n_symbols}")
        if self.subcarrier_spacing <= 0:
            raise ValueError("subcarrier spacing must be positive")

    @property
    def symbol_duration(self) -> float:
        """Useful symbol duration ``1 / spacing`` (cyclic prefix ignored)."""
        return 1.0 / self.subcarrier_spacing

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_subcarriers, self.n_symbols)

    @property
    def size(self) -> int:
        return self.n_subcarriers * self.n_symbols

    def check_patchable(self, patch: Tuple[int, int] = (3, 2)) -> None:
        if self.n_subcarriers % patch[0] or self.n_symbols % patch[1]:
            raise ValueError(f"grid {self.shape} not divisible by patch {patch}")


def vec(frame: np.ndarray) -> np.ndarray:
    """Flatten ``(..., N_f, N_t)`` frames frequency-major to ``(..., N_f*N_t)``."""
    return np.swapaxes(frame, -1, -2).reshape(*frame.shape[:-2], -1)


def unvec(v: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Inverse of :func:`vec`."""
    return np.swapaxes(v.reshape(*v.shape[:-1], grid.n_symbols, grid.n_subcarriers), -1, -2)


def _qpsk_sequence(n: int, seed: int = PILOT_SEED) -> np.ndarray:
    bits = np.random.default_rng(seed).integers(0, 2, size=(n, 2))
    return ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / math.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class PilotGrid:
    """Lattice pilot pattern: the product of ``freq_indices`` and ``time_indices``.

    Pilot vectors are ordered frequency-major (frequency index fastest).
    """

    freq_indices: Tuple[int, ...]
    time_indices: Tuple[int, ...]
    spacing: int
    symbols: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.symbols) != self.size:
            raise ValueError(f"{len(self.symbols)} pilot symbols for {self.size} pilot positions")
        if list(self.freq_indices) != sorted(set(self.freq_indices)) \
                or list(self.time_indices) != sorted(set(self.time_indices)):
            raise ValueError("pilot indices must be sorted and unique")

    @classmethod
    def lattice(cls, grid: GridConfig, spacing: int,
                time_indices: Sequence[int] = DEFAULT_PILOT_SYMBOLS,
                seed: int = PILOT_SEED) -> "PilotGrid":
        """Pilots on every ``spacing``-th subcarrier from 0 and on ``time_indices``."""
        if spacing < 1:
            raise ValueError(f"pilot spacing must be >= 1, got {spacing}")
        freq = tuple(range(0, grid.n_subcarriers, spacing))
        time = tuple(int(t) for t in time_indices)
        if any(t < 0 or t >= grid.n_symbols for t in time):
            raise ValueError(f"pilot symbols {time} outside grid with {grid.n_symbols} symbols")
        return cls(freq, time, spacing, _qpsk_sequence(len(freq) * len(time), seed))

    @property
    def shape(self) -> Tuple[int, int]:
        return (len(self.freq_indices), len(self.time_indices))

    @property
    def size(self) -> int:
        return len(self.freq_indices) * len(self.time_indices)

    def check(self, grid: GridConfig) -> None:
        if self.freq_indices[-1] >= grid.n_subcarriers or self.time_indices[-1] >= grid.n_symbols:
            raise ValueError(f"pilot pattern {self.shape} exceeds grid {grid.shape}")

    def flat_positions(self, grid: GridConfig) -> np.ndarray:
        """Indices of the pilots inside the frequency-major vectorized frame."""
        f = np.asarray(self.freq_indices)
        t = np.asarray(self.time_indices)
        return (t[:, None] * grid.n_subcarriers + f[None, :]).ravel()

    def extract(self, frame: np.ndarray) -> np.ndarray:
        """Values of ``(..., N_f, N_t)`` frames at the pilot positions, ``(..., |P|)``."""
        sub = frame[..., list(self.freq_indices), :][..., list(self.time_indices)]
        return vec(sub)


@dataclass(frozen=True)
class ChannelStats:
    snr_db: float
    doppler_hz: float
    delay_spread_ns: float

    def __post_init__(self):
        if not self.doppler_hz >= 0:
            raise ValueError(f"Doppler must be non-negative, got {self.doppler_hz}")
        if not self.delay_spread_ns > 0:
            raise ValueError(f"delay spread must be positive, got {self.delay_spread_ns}")

    def as_array(self) -> np.ndarray:
        return np.array([self.snr_db, self.doppler_hz, self.delay_spread_ns])


@dataclass(eq=False)
class TapTrajectory:
    delays: np.ndarray   # seconds, ascending
    powers: np.ndarray   # linear, sums to one
    gains: np.ndarray    # (n_taps, N_t) complex

    @property
    def n_taps(self) -> int:
        return len(self.delays)


@dataclass(eq=False)
class PilotObservation:
    y_p: np.ndarray
    x_p: np.ndarray
    ls_estimate: np.ndarray

    def __post_init__(self):
        if not (len(self.y_p) == len(self.x_p) == len(self.ls_estimate)):
            raise ValueError("pilot observation vectors differ in length")


@lru_cache(maxsize=None)
def _read_profile(name: str) -> Tuple[Tuple[float, float], ...]:
    text = resources.files("ofdmce.data").joinpath(name).read_text()
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            d, p = line.split()
            rows.append((float(d), float(p)))
    return tuple(rows)


def load_tdl_profile(name: str = "tdl_a.txt") -> Tuple[np.ndarray, np.ndarray]:
    """Normalized delays (sorted ascending) and linear powers summing to one."""
    rows = np.array(sorted(_read_profile(name)))
    powers = 10.0 ** (rows[:, 1] / 10.0)
    return rows[:, 0], powers / powers.sum()


def rms_delay_spread(delays: np.ndarray, powers: np.ndarray) -> float:
    p = powers / powers.sum()
    mean = np.sum(p * delays)
    return float(np.sqrt(np.sum(p * delays ** 2) - mean ** 2))


def generate_tdl_taps(stats: ChannelStats, grid: GridConfig, seed: int,
                      n_sinusoids: int = 64, profile: str = "tdl_a.txt") -> TapTrajectory:
    """Draw one time-varying TDL realization sampled at the OFDM symbol rate.

    Each tap is a sum of ``n_sinusoids`` complex exponentials with arrival
    angles jittered inside equal sectors of the circle and random phases, so
    the ensemble autocorrelation is exactly ``J0(2 pi f_d tau)``.
    """
    if not stats.delay_spread_ns > 0:
        raise ValueError(f"delay spread must be positive, got {stats.delay_spread_ns}")
    norm_delays, powers = load_tdl_profile(profile)
    # scale so the realized RMS spread hits the target exactly
    delays = norm_delays * (stats.delay_spread_ns * 1e-9 / rms_delay_spread(norm_delays, powers))

    rng = np.random.default_rng(seed)
    n_taps = len(delays)
    m = np.arange(1, n_sinusoids + 1)
    theta = rng.uniform(-np.pi, np.pi, size=(n_taps, n_sinusoids))
    phi = rng.uniform(-np.pi, np.pi, size=(n_taps, n_sinusoids))
    alpha = (2.0 * np.pi * m - np.pi + theta) / n_sinusoids
    t = np.arange(grid.n_symbols) * grid.symbol_duration
    omega = 2.0 * np.pi * stats.doppler_hz * np.cos(alpha)
    # sinusoids on the contiguous axis so every symbol is reduced in the same
    # order; with zero Doppler the gains are then exactly time-constant
    phase = t[None, :, None] * omega[:, None, :] + phi[:, None, :]
    gains = np.exp(1j * phase).sum(axis=2) / math.sqrt(n_sinusoids)
    gains *= np.sqrt(powers)[:, None]
    return TapTrajectory(delays=delays, powers=powers, gains=gains)


def taps_to_frequency_response(taps: TapTrajectory, grid: GridConfig) -> np.ndarray:
    """``H[n, k] = sum_l gains[l, k] exp(-j 2 pi n df tau_l)``, shape ``(N_f, N_t)``."""
    if taps.gains.shape != (taps.n_taps, grid.n_symbols):
        raise ValueError(f"tap gains {taps.gains.shape} do not match "
                         f"{taps.n_taps} taps x {grid.n_symbols} symbols")
    f = np.arange(grid.n_subcarriers) * grid.subcarrier_spacing
    steering = np.exp(-2j * np.pi * np.outer(f, taps.delays))
    # explicit reduction over the contiguous tap axis instead of a BLAS product,
    # whose blocking can round identical columns differently
    return (steering[:, None, :] * taps.gains.T[None, :, :]).sum(axis=-1)


def simulate_pilots(channel: np.ndarray, pilots: PilotGrid, snr_db: float,
                    seed: Optional[int] = None) -> PilotObservation:
    """Transmit the pilot symbols through ``channel`` and form the LS estimate.

    Noise power is set per frame from the mean received pilot power; pass
    ``snr_db=math.inf`` for a noiseless observation.
    """
    if channel.ndim != 2:
        raise ValueError(f"channel must be a 2-D frame, got shape {channel.shape}")
    if pilots.freq_indices[-1] >= channel.shape[0] or pilots.time_indices[-1] >= channel.shape[1]:
        raise ValueError(f"pilot pattern {pilots.shape} exceeds channel {channel.shape}")
    x_p = pilots.symbols
    if np.any(x_p == 0):
        raise InvalidPilotError("zero pilot symbol makes the LS estimate undefined")
    h_p = pilots.extract(channel)
    rx = h_p * x_p
    if math.isinf(snr_db) and snr_db > 0:
        y_p = rx
    else:
        noise_var = np.mean(np.abs(rx) ** 2) * 10.0 ** (-snr_db / 10.0)
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((2, len(rx)))
        y_p = rx + math.sqrt(noise_var / 2.0) * (noise[0] + 1j * noise[1])
    return PilotObservation(y_p=y_p, x_p=x_p, ls_estimate=y_p / x_p)
