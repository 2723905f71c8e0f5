"""Walk through one frame: fading channel, pilots, LS, interpolation, LMMSE.

Then sweep SNR over a small test set and print the classical baselines.
Runs in well under a minute.

    python demos/baselines.py
"""

import math

import numpy as np

from ofdmce.dataset import generate_records, sweep_recipe, training_recipe
from ofdmce.estimators import LmmseEstimator, interpolate_ls
from ofdmce.sim import (ChannelStats, GridConfig, PilotGrid, generate_tdl_taps, simulate_pilots,
                        taps_to_frequency_response)
from ofdmce.train import evaluate, mse_db

grid = GridConfig()                       # 120 subcarriers x 14 symbols, 15 kHz
pilots = PilotGrid.lattice(grid, 3)       # every 3rd subcarrier on symbols 2 and 11
print(f"grid {grid.shape}, pilots {pilots.shape} -> {pilots.size} observations")

stats = ChannelStats(snr_db=10, doppler_hz=600, delay_spread_ns=250)
taps = generate_tdl_taps(stats, grid, seed=1)
h = taps_to_frequency_response(taps, grid)
print(f"{taps.n_taps} taps, max delay {taps.delays[-1] * 1e9:.0f} ns, "
      f"mean |H|^2 = {np.mean(np.abs(h) ** 2):.3f}")

clean = simulate_pilots(h, pilots, math.inf)
noisy = simulate_pilots(h, pilots, stats.snr_db, seed=2)
print(f"noiseless LS error {np.max(np.abs(clean.ls_estimate - pilots.extract(h))):.1e}")

full = interpolate_ls(noisy.ls_estimate, pilots, grid)
print(f"interpolated LS on this frame: {mse_db(np.mean(np.abs(full - h) ** 2)):.2f} dB")

# statistics for LMMSE come from a training set; the test set is an SNR sweep
train = generate_records(training_recipe(2000), seed=10)
test = generate_records(sweep_recipe("snr", 100), seed=11)
lmmse = LmmseEstimator(train)
curves = {
    "interp_ls": evaluate(lambda ls, st: interpolate_ls(ls, test.pilots, grid), test, "snr",
                          "interp_ls").curve("interp_ls"),
    "lmmse": evaluate(lmmse, test, "snr", "lmmse").curve("lmmse"),
}
print("\nSNR dB     " + "".join(f"{s:>8.0f}" for s in curves["lmmse"]))
for name, curve in curves.items():
    print(f"{name:<10} " + "".join(f"{v:8.2f}" for v in curve.values()))
