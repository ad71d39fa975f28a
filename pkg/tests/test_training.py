import dataclasses

import numpy as np
import pytest
from scipy import stats

from fesurrogate.fesolver import SimulationSample
from fesurrogate.tensorcore import BatchNormState, batch_norm
from fesurrogate.training import (AdamState, TrainConfig, TrainingError, ablation_run, adam_step,
                                  bootstrap_indices, bootstrap_sample, learning_rate_at,
                                  recalibrate_batch_norm, select_mode, train, validation_mae)
from _gradcheck import bagging_gradient_zscores, tiny_network_config

TINY = {k: (list(v) if isinstance(v, tuple) else v)
        for k, v in dataclasses.asdict(tiny_network_config()).items()
        if k not in ("input_dim", "gfv_size", "zero_head")}


def _cfg(**kw):
    base = dict(points_per_pass=32, minibatch=2, epochs=2, seed=0, gfv_size=16, network=TINY,
                learning_rate=3e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples(small_dataset):
    return small_dataset[0]


def test_bootstrap_single_node():
    s = SimulationSample(np.arange(9.0)[None], np.ones((1, 3)), np.zeros(1, dtype=np.uint8))
    x, y = bootstrap_sample(s, 5, 0)
    assert np.array_equal(x, np.tile(np.arange(9.0), (5, 1)))
    assert np.array_equal(y, np.ones((5, 3)))


def test_bootstrap_empty():
    s = SimulationSample(np.zeros((0, 9)), np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
    with pytest.raises(TrainingError):
        bootstrap_sample(s, 5, 0)


def test_bootstrap_uniform_frequencies():
    N, draws = 50, 100_000
    idx = bootstrap_indices(N, draws, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=N)
    p = 1 / N
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma + 1)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_bootstrap_aligned_and_deterministic(samples):
    s = samples[0]
    x1, y1 = bootstrap_sample(s, 100, 7)
    x2, y2 = bootstrap_sample(s, 100, 7)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    for xi, yi in zip(x1, y1):
        n = np.flatnonzero(np.all(s.features == xi, axis=1))[0]
        assert np.array_equal(s.displacements[n], yi)


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    st = AdamState.zeros_like(p)
    adam_step(p, [np.zeros(2)], st, 1e-3)
    assert p[0].tolist() == [1.0, -2.0] and st.step == 1


def test_adam_first_step():
    p = [np.array([0.0])]
    st = AdamState.zeros_like(p)
    adam_step(p, [np.array([1.0])], st, 1e-3)
    assert p[0][0] == pytest.approx(-0.001, abs=1e-11)


def test_adam_three_steps_by_hand():
    g = [0.5, -1.0, 2.0]
    p = [np.array([1.0])]
    st = AdamState.zeros_like(p)
    # hand recurrence
    m = v = 0.0
    x = 1.0
    for k, gk in enumerate(g, start=1):
        m = 0.9 * m + 0.1 * gk
        v = 0.999 * v + 0.001 * gk * gk
        x -= 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        adam_step(p, [np.array([gk])], st, 0.01)
        assert st.m[0][0] == pytest.approx(m, abs=1e-15)
        assert st.v[0][0] == pytest.approx(v, abs=1e-15)
    assert p[0][0] == pytest.approx(x, abs=1e-14)
    # m3 = 0.1*(0.81*0.5 - 0.9*1.0 + 2.0), v3 = 0.001*(0.998001*0.25 + 0.999*1 + 4)
    assert st.m[0][0] == pytest.approx(0.15050, abs=1e-12)
    assert st.v[0][0] == pytest.approx(0.00524850025, abs=1e-12)


def test_adam_shape_mismatch():
    st = AdamState.zeros_like([np.zeros(2)])
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], st)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = [rng.standard_normal(4)]
        st = AdamState.zeros_like(p)
        for _ in range(20):
            adam_step(p, [np.sin(p[0]) + rng.standard_normal(4)], st)
        return p[0]
    assert run().tobytes() == run().tobytes()


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(points_per_pass=1)
    with pytest.raises(ValueError):
        TrainConfig(minibatch=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(feature_mode="k")
    cfg = _cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig().minibatch == 32 and TrainConfig().learning_rate == 1e-3


def test_overfit_single_sample(samples):
    # the tiny test network is too narrow for dropout noise to average out; use desk widths
    cfg = TrainConfig(points_per_pass=128, minibatch=1, epochs=200, gfv_size=256,
                      network={"tnet_mlp": [64, 128, 256], "tnet_fc": [128, 64],
                               "head": [256, 128, 64]})
    params, log = train([samples[1]], cfg)
    losses = log.iteration_losses
    assert len(losses) == 200
    assert np.mean(losses[-10:]) <= np.mean(losses[:10]) / 10


def test_pb_mode_trains_seven_inputs(samples):
    pb = select_mode(samples, "pb")
    params, log = train(pb[:4], _cfg(feature_mode="pb", epochs=1), pb[4:])
    assert params.config.input_dim == 7 and params.feature_mode == "pb"
    assert all(np.isfinite(e["train_loss"]) for e in log.epochs)


def test_mode_mismatch(samples):
    with pytest.raises(TrainingError, match="mismatch"):
        train(samples, _cfg(feature_mode="pb"))
    with pytest.raises(TrainingError):
        select_mode(select_mode(samples, "pb"), "pbk")
    with pytest.raises(TrainingError):
        train([], _cfg())


def test_training_deterministic(samples):
    _, a = train(samples[:4], _cfg(), samples[4:])
    _, b = train(samples[:4], _cfg(), samples[4:])
    assert a.iteration_losses == b.iteration_losses
    assert [e["val_mae"] for e in a.epochs] == [e["val_mae"] for e in b.epochs]


def test_best_checkpoint_retained(samples):
    cfg = _cfg(epochs=4)
    params, log = train(samples[:4], cfg, samples[4:])
    vals = [e["val_mae"] for e in log.epochs]
    assert log.best_epoch == int(np.argmin(vals))
    retained = validation_mae(params, samples[4:], cfg.points_per_pass, cfg.val_passes, cfg.seed)
    assert retained == pytest.approx(min(vals), rel=1e-12)
    assert retained <= vals[-1]
    csv = log.to_csv().splitlines()
    assert csv[0] == "epoch,train_loss,val_mae,seconds" and len(csv) == 5
    assert all(0 < c <= 1 for c in log.coverage)


def test_nan_loss_aborts(samples):
    bad = SimulationSample(samples[0].features, samples[0].displacements * np.nan,
                           samples[0].labels)
    with pytest.raises(TrainingError, match="iteration 0"):
        train([bad], _cfg(epochs=1), params=None)


def test_training_phantoms_recorded(samples):
    tagged = [SimulationSample(s.features, s.displacements, s.labels, {"phantom_id": i % 2})
              for i, s in enumerate(samples[:4])]
    params, _ = train(tagged, _cfg(epochs=1, max_iterations=1))
    assert params.extra["training_phantoms"] == [0, 1]


def test_ablation_single_value(samples):
    res = ablation_run(samples[:3], samples[3:4], samples[4:], "gfv", [16], _cfg(epochs=1))
    assert len(res.rows) == 1 and res.rows[0]["value"] == 16
    assert "GFV Sizes" in res.to_text()
    res = ablation_run(samples[:3], samples[3:4], samples[4:], "materials", ["pbk", "pb"],
                       _cfg(epochs=1))
    assert [r["value"] for r in res.rows] == ["pbk", "pb"]
    assert "Input Feat. Vectors" in res.to_text()
    with pytest.raises(ValueError):
        ablation_run(samples, samples, samples, "depth", [1], _cfg())


def test_bagging_gradient_expectation_small():
    z = bagging_gradient_zscores(M=2000, seed=1)
    assert np.all(np.abs(z) < 3.5)


def test_cosine_schedule():
    const = _cfg(epochs=5)
    assert [learning_rate_at(const, e) for e in range(5)] == [3e-3] * 5
    cos = _cfg(epochs=5, lr_schedule="cosine", lr_floor=0.1)
    lrs = [learning_rate_at(cos, e) for e in range(5)]
    assert lrs[0] == pytest.approx(3e-3) and lrs[-1] == pytest.approx(3e-4)
    assert lrs[2] == pytest.approx(0.5 * (3e-3 + 3e-4))
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        _cfg(lr_schedule="step")


def test_momentum_override_gives_equal_weight_average():
    rng = np.random.default_rng(0)
    st = BatchNormState(3)
    batches = [rng.normal(k, 1.0 + k, (7, 3)) for k in range(5)]
    for k, x in enumerate(batches):
        st.momentum = k / (k + 1.0)
        batch_norm(x, np.ones(3), np.zeros(3), st, train=True)
    np.testing.assert_allclose(st.running_mean, np.mean([x.mean(0) for x in batches], axis=0))
    np.testing.assert_allclose(st.running_var, np.mean([x.var(0, ddof=1) for x in batches], axis=0))


def test_recalibration_touches_only_running_stats(samples):
    params, _ = train(samples[:4], _cfg(epochs=1))
    before = [w.data.copy() for w in params.trainable()]
    stats_before = {k: st.running_mean.copy() for k, st in params.bn.items()}
    recalibrate_batch_norm(params, samples[:4], 32, 2, 3, np.random.default_rng(1))
    assert all(np.array_equal(a, w.data) for a, w in zip(before, params.trainable()))
    assert all(st.momentum is None for st in params.bn.values())
    assert any(not np.array_equal(stats_before[k], st.running_mean) for k, st in params.bn.items())
    again, _ = train(samples[:4], _cfg(epochs=1))
    recalibrate_batch_norm(again, samples[:4], 32, 2, 3, np.random.default_rng(1))
    assert all(np.array_equal(params.bn[k].running_var, again.bn[k].running_var) for k in params.bn)


def test_recalibration_option_changes_training(samples):
    _, a = train(samples[:4], _cfg(), samples[4:])
    _, b = train(samples[:4], _cfg(bn_recalibration=4), samples[4:])
    # train-mode forwards ignore running stats, so only validation sees the change
    assert a.iteration_losses == b.iteration_losses
    assert [e["val_mae"] for e in a.epochs] != [e["val_mae"] for e in b.epochs]
