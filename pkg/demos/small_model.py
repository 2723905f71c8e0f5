"""Train the linear baseline and a one-layer AdaFortiTran on a small dataset.

A few minutes on one core; the numbers are far from converged but show the
pieces fitting together: training history, checkpoint round trip, and the
effect of telling the adaptive model the wrong SNR.

    python demos/small_model.py
"""

import tempfile
from pathlib import Path

from ofdmce.dataset import generate_records, sweep_recipe, training_recipe
from ofdmce.model import ModelConfig, count_parameters, load_checkpoint, save_checkpoint
from ofdmce.train import TrainConfig, evaluate, model_estimator, train

train_set = generate_records(training_recipe(400), seed=1)
val_set = generate_records(training_recipe(100), seed=2)
test = generate_records(sweep_recipe("snr", 50), seed=3)

runs = {
    "linear": (ModelConfig(variant="linear"), TrainConfig(max_epochs=60, lr=3e-3)),
    "adafortitran-S": (ModelConfig.sized("S"), TrainConfig(max_epochs=3, batch_size=32)),
}
for name, (config, tc) in runs.items():
    print(f"{name}: {count_parameters(config):,} parameters")
    res = train(config, train_set, val_set, tc)
    print(f"  {len(res.history)} epochs, val MSE {res.initial_val_mse:.4f} -> {res.best_val_mse:.4f}")

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "model.aftc"
        save_checkpoint(res.params, config, path)
        params = load_checkpoint(path, config)
    curve = evaluate(model_estimator(params, config), test, "snr", name).curve(name)
    print("  test dB by SNR: " + " ".join(f"{s:.0f}:{v:.2f}" for s, v in curve.items()))

    if config.adaptive:
        wrong = test.stats.copy()
        wrong[:, 0] = 0.0
        lied = evaluate(model_estimator(params, config), test, "snr", name, stats_override=wrong)
        print("  told SNR=0 dB:  " + " ".join(f"{s:.0f}:{v:.2f}" for s, v in lied.curve(name).items()))
