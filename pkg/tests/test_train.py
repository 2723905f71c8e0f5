import math

import numpy as np
import pytest

from ofdmce.estimators import interpolate_ls
from ofdmce.dataset import Dataset, DatasetRecipe, generate_records, sweep_recipe, training_recipe
from ofdmce.model import ModelConfig, init_model
from ofdmce.sim import GridConfig, PilotGrid
from ofdmce.train import (
    EvalReport, PRESETS, TrainConfig, TrainingDiverged, baseline_estimators, dataset_mse, evaluate,
    model_estimator, mse_db, mse_loss, train,
)

TINY_GRID = GridConfig(12, 4)
TINY = dict(grid=TINY_GRID, pilot_spacing=3, pilot_time_indices=(0, 3), d_enc=8, n_heads=2, n_layers=1)


def _tiny_sets(n_train=64, n_val=16):
    kw = dict(pilot_spacing=3, grid=TINY_GRID, pilot_time_indices=(0, 3))
    return (generate_records(training_recipe(n_train, **kw), seed=1),
            generate_records(training_recipe(n_val, **kw), seed=2))


def test_mse_examples(rng):
    h = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    assert mse_loss(h, h) == 0.0
    assert mse_loss(np.full((3, 4), 1 + 1j), np.zeros((3, 4))) == 2.0
    e = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    loop = sum((e[i, j].real - h[i, j].real) ** 2 + (e[i, j].imag - h[i, j].imag) ** 2
               for i in range(3) for j in range(4)) / 12
    assert abs(mse_loss(e, h) - loop) < 1e-12
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mse_db():
    assert mse_db(0.0) == -120.0
    assert mse_db(1e-20) == -120.0
    assert mse_db(0.01) == pytest.approx(-20.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    assert PRESETS["paper"].batch_size == 512 and PRESETS["paper"].max_epochs == 1000
    assert PRESETS["desk"].batch_size == 64 and PRESETS["desk"].max_epochs == 100


def test_linear_memorizes_single_frame(rng):
    config = ModelConfig(variant="linear", **TINY)
    pilots = config.pilots
    h = rng.standard_normal((12, 4)) + 1j * rng.standard_normal((12, 4))
    frames = np.repeat(h[None], 8, axis=0)
    ds = Dataset(TINY_GRID, pilots, np.tile([[100.0, 0, 100]], (8, 1)), pilots.extract(frames), frames)
    res = train(config, ds, ds, TrainConfig(batch_size=8, max_epochs=200, patience=200, lr=1e-2))
    # 40 dB below the untrained error and still falling
    assert res.history[-1]["train_mse"] < 1e-4 * res.initial_val_mse
    assert res.history[-1]["train_mse"] < res.history[100]["train_mse"]
    assert res.best_val_mse < 1e-4


def test_history_bookkeeping_and_determinism():
    train_set, val_set = _tiny_sets()
    config = ModelConfig(variant="adafortitran", **TINY)
    tc = TrainConfig(batch_size=16, max_epochs=6, patience=2, seed=3)
    a = train(config, train_set, val_set, tc)
    b = train(config, train_set, val_set, tc)
    assert a.history_csv() == b.history_csv()
    assert 1 <= len(a.history) <= 6
    assert a.best_val_mse == min([a.initial_val_mse] + [h["val_mse"] for h in a.history])
    assert dataset_mse(a.params, config, val_set) == a.best_val_mse
    assert a.best_val_mse <= a.initial_val_mse
    lrs = [h["lr"] for h in a.history]
    assert lrs[0] == 1e-3 and all(math.isclose(y, x * 0.995) for x, y in zip(lrs, lrs[1:]))
    assert a.history_csv().splitlines()[0] == "epoch,train_mse,val_mse,lr"


def test_micro_batches_match_full_batch():
    train_set, val_set = _tiny_sets(32, 8)
    config = ModelConfig(variant="fortitran", **TINY)
    full = train(config, train_set, val_set, TrainConfig(batch_size=16, max_epochs=2))
    micro = train(config, train_set, val_set, TrainConfig(batch_size=16, max_epochs=2, micro_batch=5))
    for k in full.params:
        np.testing.assert_allclose(micro.params[k].data, full.params[k].data, rtol=1e-7, atol=1e-10)


def test_divergence_aborts_with_last_good_params():
    train_set, val_set = _tiny_sets(32, 8)
    config = ModelConfig(variant="fortitran", **TINY)
    init = init_model(config, 0)
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        train(config, train_set, val_set, TrainConfig(batch_size=8, max_epochs=3, lr=1e300, lr_decay=1.0))
    best = info.value.best_params
    assert all(np.all(np.isfinite(t.data)) for t in best.values())
    assert all(best[k].data.tobytes() == init[k].data.tobytes() for k in init)


def test_incompatible_dataset_rejected():
    train_set, val_set = _tiny_sets(8, 4)
    with pytest.raises(ValueError, match="does not match"):
        train(ModelConfig(variant="linear"), train_set, val_set, TrainConfig(max_epochs=1))


def test_evaluate_groups_and_csv():
    test = generate_records(sweep_recipe("snr", 5), seed=0)
    train_set = generate_records(training_recipe(100), seed=1)
    report = evaluate(baseline_estimators(train_set)["interp_ls"], test, "snr", "interp_ls",
                      dataset_name="snr")
    assert [r.sweep_value for r in report.rows] == [0, 5, 10, 15, 20, 25]
    assert sum(r.n for r in report.rows) == len(test)
    for r in report.rows:
        assert abs(r.mse_db - 10 * math.log10(r.mse_linear)) < 1e-9
    text = report.to_csv()
    assert text.splitlines()[0] == "sweep_key,sweep_value,model,mse_linear,mse_db,n"
    assert text.splitlines()[1].startswith("snr,0,interp_ls,")


def test_perfect_estimator_hits_floor():
    test = generate_records(sweep_recipe("doppler", 2), seed=0)
    truth = {id(test.ls): test.channels}
    report = evaluate(lambda ls, stats: truth[id(ls)], test, "doppler", "oracle")
    assert len(report.rows) == 5
    assert all(r.mse_linear == 0.0 and r.mse_db == -120.0 for r in report.rows)


def test_interpolation_of_flat_channel_is_exact():
    recipe = DatasetRecipe(4, (math.inf,), (0.0,), (200.0,))
    ds = generate_records(recipe, seed=0)
    flat = np.broadcast_to(ds.channels[:, :1, :1], ds.channels.shape).copy()
    pilots = ds.pilots
    flat_ds = Dataset(ds.grid, pilots, ds.stats, pilots.extract(flat), flat)
    report = evaluate(lambda ls, stats: interpolate_ls(ls, pilots, ds.grid), flat_ds, "pilots",
                      "interp_ls", sweep_value=3)
    assert report.rows[0].mse_linear < 1e-20


def test_evaluate_needs_value_for_other_keys():
    test = generate_records(sweep_recipe("pilots", 2), seed=0)
    with pytest.raises(ValueError):
        evaluate(lambda ls, s: np.zeros((len(ls), 120, 14)), test, "pilots", "zero")


def test_stats_override_and_report_helpers():
    test = generate_records(sweep_recipe("snr", 2), seed=0)
    seen = []

    def spy(ls, stats):
        seen.append(np.array(stats))
        return np.zeros((len(ls), 120, 14), complex)

    rep = evaluate(spy, test, "snr", "zero", stats_override=[0.0, 500, 200])
    assert np.all(seen[0][:, 0] == 0) and rep.curve("zero")[25.0] == rep.rows[-1].mse_db
    merged = EvalReport().extend(rep).extend(rep)
    assert len(merged.for_model("zero")) == 12


def test_model_estimator_ignores_stats_for_fortitran():
    config = ModelConfig(variant="fortitran", **TINY)
    params = init_model(config, 0)
    est = model_estimator(params, config)
    ls = np.ones((2, 8), complex)
    np.testing.assert_array_equal(est(ls, np.zeros((2, 3))), est(ls, np.ones((2, 3))))
