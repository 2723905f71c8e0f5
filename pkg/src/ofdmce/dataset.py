"""Dataset recipes, generation and the ``.aftd`` binary file format.

File layout (little-endian throughout, floats are IEEE-754 binary32)::

    magic "AFTD" | version u16
    n_subcarriers u32 | n_symbols u32 | subcarrier_spacing f32
    pilot_spacing u32 | n_freq u32 | freq_indices u32[n_freq]
    n_time u32 | time_indices u32[n_time] | pilot_symbols f32[2 |P|]
    record_count u64
    records: { stats f32[3] | ls f32[2 |P|] | channel f32[2 N_f N_t] } * count

Complex values are stored as interleaved (re, im) pairs; channels are stored
frequency-major. ``stats`` is (snr_db, doppler_hz, delay_spread_ns).
"""

from __future__ import annotations

import itertools
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .sim import (DEFAULT_PILOT_SYMBOLS, ChannelStats, GridConfig, PilotGrid, generate_tdl_taps,
                  simulate_pilots, taps_to_frequency_response, unvec, vec)

__all__ = [
    "Dataset", "DatasetRecipe", "DatasetFormatError", "build_dataset", "generate_records",
    "write_dataset", "read_dataset", "plan_records", "TRAIN_SNR_DB", "TRAIN_DOPPLER_HZ",
    "TRAIN_DELAY_SPREAD_NS", "training_recipe", "sweep_recipe",
]

MAGIC = b"AFTD"
VERSION = 1

TRAIN_SNR_DB = tuple(range(0, 26, 5))
TRAIN_DOPPLER_HZ = tuple(range(50, 1001, 50))
TRAIN_DELAY_SPREAD_NS = tuple(range(25, 301, 25))

# fixed operating points of the swept test sets
SWEEPS: Dict[str, Dict[str, Tuple[float, ...]]] = {
    "snr": dict(snr_db=TRAIN_SNR_DB, doppler_hz=(500,), delay_spread_ns=(200,)),
    "delay_spread": dict(snr_db=(20,), doppler_hz=(500,), delay_spread_ns=tuple(range(50, 301, 50))),
    "doppler": dict(snr_db=(20,), doppler_hz=tuple(range(200, 1001, 200)), delay_spread_ns=(200,)),
    "pilots": dict(snr_db=(5,), doppler_hz=(500,), delay_spread_ns=(200,)),
}

PathLike = Union[str, os.PathLike]


class DatasetFormatError(ValueError):
    """The file is not a valid dataset file."""


@dataclass(frozen=True)
class DatasetRecipe:
    """How to draw the channel statistics of each record.

    ``mode="train"``: each of ``n_records`` records draws SNR, Doppler and
    delay spread independently and uniformly from the given sets.
    ``mode="sweep"``: ``n_records`` records for every combination of the
    sets, grouped in product order.
    """

    n_records: int
    snr_db: Tuple[float, ...]
    doppler_hz: Tuple[float, ...]
    delay_spread_ns: Tuple[float, ...]
    mode: str = "train"
    pilot_spacing: int = 3
    grid: GridConfig = field(default_factory=GridConfig)
    pilot_time_indices: Tuple[int, ...] = DEFAULT_PILOT_SYMBOLS

    def __post_init__(self):
        if self.mode not in ("train", "sweep"):
            raise ValueError(f"unknown recipe mode {self.mode!r}")
        if self.n_records < 1:
            raise ValueError("recipe needs at least one record")
        for name in ("snr_db", "doppler_hz", "delay_spread_ns"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"empty parameter grid: {name}")

    @property
    def total_records(self) -> int:
        if self.mode == "train":
            return self.n_records
        return self.n_records * len(self.snr_db) * len(self.doppler_hz) * len(self.delay_spread_ns)


def training_recipe(n_records: int, pilot_spacing: int = 3, grid: GridConfig = GridConfig(),
                    **kw) -> DatasetRecipe:
    return DatasetRecipe(n_records, TRAIN_SNR_DB, TRAIN_DOPPLER_HZ, TRAIN_DELAY_SPREAD_NS,
                         "train", pilot_spacing, grid, **kw)


def sweep_recipe(kind: str, records_per_point: int, pilot_spacing: int = 3,
                 grid: GridConfig = GridConfig(), **kw) -> DatasetRecipe:
    if kind not in SWEEPS:
        raise ValueError(f"unknown sweep {kind!r}; expected one of {sorted(SWEEPS)}")
    return DatasetRecipe(records_per_point, mode="sweep", pilot_spacing=pilot_spacing,
                         grid=grid, **SWEEPS[kind], **kw)


@dataclass(eq=False)
class Dataset:
    grid: GridConfig
    pilots: PilotGrid
    stats: np.ndarray      # (K, 3) float64
    ls: np.ndarray         # (K, |P|) complex128
    channels: np.ndarray   # (K, N_f, N_t) complex128

    def __len__(self) -> int:
        return len(self.stats)

    def __post_init__(self):
        k = len(self.stats)
        if self.ls.shape != (k, self.pilots.size) or self.channels.shape != (k, *self.grid.shape):
            raise ValueError("dataset arrays disagree with grid/pilot descriptors")

    def subset(self, index) -> "Dataset":
        return replace(self, stats=self.stats[index], ls=self.ls[index], channels=self.channels[index])

    def pilot_truth(self) -> np.ndarray:
        """Ground-truth channel at the pilot positions, ``(K, |P|)``."""
        return self.pilots.extract(self.channels)


def plan_records(recipe: DatasetRecipe, seed: int) -> np.ndarray:
    """Per-record channel statistics ``(K, 3)`` in file order."""
    if recipe.mode == "sweep":
        combos = list(itertools.product(recipe.snr_db, recipe.doppler_hz, recipe.delay_spread_ns))
        return np.repeat(np.array(combos, dtype=np.float64), recipe.n_records, axis=0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57A7]))
    cols = [np.asarray(vals, dtype=np.float64)[rng.integers(0, len(vals), recipe.n_records)]
            for vals in (recipe.snr_db, recipe.doppler_hz, recipe.delay_spread_ns)]
    return np.stack(cols, axis=1)


def _record_seeds(seed: int, index: int) -> Tuple[int, int]:
    taps, noise = np.random.SeedSequence([seed, index]).generate_state(2, dtype=np.uint64)
    return int(taps), int(noise)


def _seed_indices(recipe: DatasetRecipe) -> np.ndarray:
    """Index each record's RNG stream is derived from.

    Sweep records reuse the stream of the same slot in every group (common
    random numbers), so sweep points differ only in the swept statistic.
    """
    k = recipe.total_records
    if recipe.mode == "sweep":
        return np.arange(k) % recipe.n_records
    return np.arange(k)


def _generate_chunk(args) -> Tuple[np.ndarray, np.ndarray]:
    grid, pilots, stats, seed, slots = args
    ls = np.empty((len(stats), pilots.size), dtype=np.complex128)
    channels = np.empty((len(stats), *grid.shape), dtype=np.complex128)
    for i, (snr, fd, ds) in enumerate(stats):
        tap_seed, noise_seed = _record_seeds(seed, int(slots[i]))
        taps = generate_tdl_taps(ChannelStats(snr, fd, ds), grid, tap_seed)
        h = taps_to_frequency_response(taps, grid)
        ls[i] = simulate_pilots(h, pilots, snr, noise_seed).ls_estimate
        channels[i] = h
    return ls, channels


def generate_records(recipe: DatasetRecipe, seed: int, workers: int = 1) -> Dataset:
    """Generate a dataset in memory.

    Each record draws from its own RNG stream derived from ``seed`` and its
    index, so the worker count never changes the values.
    """
    grid = recipe.grid
    pilots = PilotGrid.lattice(grid, recipe.pilot_spacing, recipe.pilot_time_indices)
    stats = plan_records(recipe, seed)
    slots = _seed_indices(recipe)
    chunk = 256
    jobs = [(grid, pilots, stats[s:s + chunk], seed, slots[s:s + chunk])
            for s in range(0, len(stats), chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_generate_chunk, jobs))
    else:
        parts = [_generate_chunk(j) for j in jobs]
    ls = np.concatenate([p[0] for p in parts])
    channels = np.concatenate([p[1] for p in parts])
    # quantize exactly as the file does, so in-memory and re-read data agree
    return Dataset(grid, pilots, stats.astype(np.float32).astype(np.float64),
                   ls.astype(np.complex64).astype(np.complex128),
                   channels.astype(np.complex64).astype(np.complex128))


def build_dataset(recipe: DatasetRecipe, out_path: PathLike, seed: int, workers: int = 1) -> Dataset:
    """Generate the records of ``recipe`` and write them to ``out_path``."""
    ds = generate_records(recipe, seed, workers)
    write_dataset(ds, out_path)
    return ds


def _record_dtype(n_pilots: int, n_grid: int) -> np.dtype:
    return np.dtype([("stats", "<f4", (3,)), ("ls", "<f4", (2 * n_pilots,)),
                     ("channel", "<f4", (2 * n_grid,))])


def _complex_to_pairs(z: np.ndarray) -> np.ndarray:
    z = np.ascontiguousarray(z, dtype=np.complex64)
    return z.view(np.float32).reshape(*z.shape[:-1], 2 * z.shape[-1]).astype("<f4")


def _pairs_to_complex(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    return a.view(np.complex64).astype(np.complex128)


def _header_bytes(grid: GridConfig, pilots: PilotGrid) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<IIf", grid.n_subcarriers, grid.n_symbols, grid.subcarrier_spacing),
             struct.pack("<II", pilots.spacing, len(pilots.freq_indices)),
             np.asarray(pilots.freq_indices, dtype="<u4").tobytes(),
             struct.pack("<I", len(pilots.time_indices)),
             np.asarray(pilots.time_indices, dtype="<u4").tobytes(),
             _complex_to_pairs(pilots.symbols[None])[0].tobytes()]
    return b"".join(parts)


def write_dataset(ds: Dataset, path: PathLike) -> None:
    path = Path(path)
    records = np.empty(len(ds), dtype=_record_dtype(ds.pilots.size, ds.grid.size))
    records["stats"] = ds.stats
    records["ls"] = _complex_to_pairs(ds.ls)
    records["channel"] = _complex_to_pairs(vec(ds.channels))
    with open(path, "wb") as fh:
        fh.write(_header_bytes(ds.grid, ds.pilots))
        fh.write(struct.pack("<Q", len(ds)))
        fh.write(records.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise DatasetFormatError("truncated header")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def array(self, dtype: str, n: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * n
        if self.pos + size > len(self.buf):
            raise DatasetFormatError("truncated header")
        out = np.frombuffer(self.buf, dtype=dtype, count=n, offset=self.pos)
        self.pos += size
        return out


def _read_header(r: _Reader) -> Tuple[GridConfig, PilotGrid]:
    if r.take("4s")[0] != MAGIC:
        raise DatasetFormatError("bad magic, not a dataset file")
    (version,) = r.take("<H")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    nf, nt, df = r.take("<IIf")
    grid = GridConfig(nf, nt, float(df))
    spacing, n_freq = r.take("<II")
    freq = tuple(int(i) for i in r.array("<u4", n_freq))
    (n_time,) = r.take("<I")
    time = tuple(int(i) for i in r.array("<u4", n_time))
    symbols = _pairs_to_complex(r.array("<f4", 2 * n_freq * n_time))
    if np.any(symbols == 0):
        raise DatasetFormatError("zero pilot symbol in header")
    # pilots are unit-modulus; undo the binary32 rounding of the header
    symbols = symbols / np.abs(symbols)
    pilots = PilotGrid(freq, time, int(spacing), symbols)
    pilots.check(grid)
    return grid, pilots


def read_dataset(path: PathLike) -> Dataset:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    grid, pilots = _read_header(r)
    (count,) = r.take("<Q")
    dtype = _record_dtype(pilots.size, grid.size)
    if len(buf) - r.pos != count * dtype.itemsize:
        raise DatasetFormatError(f"header announces {count} records, file holds "
                                 f"{(len(buf) - r.pos) / dtype.itemsize:g}")
    records = np.frombuffer(buf, dtype=dtype, count=count, offset=r.pos)
    stats = records["stats"].astype(np.float64)
    ls = _pairs_to_complex(records["ls"])
    channels = unvec(_pairs_to_complex(records["channel"]), grid)
    return Dataset(grid, pilots, stats, ls, np.ascontiguousarray(channels))


def group_indices(values: np.ndarray) -> List[Tuple[float, np.ndarray]]:
    """Record indices grouped by distinct value, ascending."""
    return [(float(v), np.flatnonzero(values == v)) for v in np.unique(values)]


def sweep_column(key: str) -> int:
    return {"snr": 0, "doppler": 1, "delay_spread": 2}[key]


def describe(ds: Dataset) -> str:
    counts = ", ".join(name + "={" + ",".join(f"{v:g}" for v in np.unique(ds.stats[:, i])) + "}"
                       for i, name in enumerate(("snr_db", "doppler_hz", "delay_spread_ns")))
    return f"{len(ds)} records, pilots {ds.pilots.shape}, {counts}"

