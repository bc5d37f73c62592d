import math

import numpy as np
import pytest

from hierflow.data import SyntheticSpec, simulate
from hierflow.errors import ConfigError, DataError
from hierflow.hierarchy import PanelSeries
from hierflow.pipeline import (
    Checkpoint,
    HierForecaster,
    ModelConfig,
    Scaler,
    TrainConfig,
    baseline_forecast,
    forecast,
    make_windows,
    nll_loss,
    rollout,
    scale_apply,
    scale_fit,
    scale_invert,
    train,
    untrained_checkpoint,
)
from hierflow.reconcile import METHODS

SMALL = ModelConfig(d_model=16, n_heads=2, d_ff=32, n_enc_layers=1, n_dec_layers=1, dropout=0.0,
                    flow_layers=2, flow_hidden=16)
FAST = TrainConfig(context_length=12, prediction_length=4, epochs=3, batch_size=16, sample_count=20)


@pytest.fixture(scope="module")
def panel():
    return simulate(SyntheticSpec(length=80, seed=4))[0]


@pytest.fixture(scope="module")
def checkpoint(panel):
    return train(panel, FAST, SMALL)


def test_scaler(panel):
    sc = scale_fit(panel, stop=60)
    z = scale_apply(sc, panel.values[:60])
    assert np.max(np.abs(z.mean(axis=0))) < 1e-10
    np.testing.assert_allclose(scale_invert(sc, scale_apply(sc, panel.values)), panel.values,
                               rtol=0, atol=1e-12)
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        flat = Scaler.fit(np.full((10, 2), 4.0))
    np.testing.assert_array_equal(flat.apply(np.full((3, 2), 4.0)), 0.0)


def test_window_alignment(tree7):
    T = 20
    vals = np.arange(T * 7, dtype=float).reshape(T, 7)
    cov = np.arange(T, dtype=float)[:, None]
    w = make_windows(vals, cov, tree7.r, 5, 3, [0, 4])
    np.testing.assert_array_equal(w.enc_y[1], vals[4:9])
    np.testing.assert_array_equal(w.dec_y[1], vals[8:11])
    np.testing.assert_array_equal(w.dec_x[1, :, 0], [8, 9, 10])
    np.testing.assert_array_equal(w.target[1], vals[9:12, 3:])
    with pytest.raises(DataError):
        make_windows(vals, cov, tree7.r, 5, 3, [13])


def _batch(panel, starts=(0, 7, 30)):
    sc = Scaler.fit(panel.values)
    return make_windows(sc.apply(panel.values), panel.covariates, panel.tree.r, 12, 4, list(starts))


def test_identity_flow_nll_at_origin(panel):
    model = HierForecaster(panel.tree, 3, SMALL, np.random.default_rng(0))
    for name, p in model.flow.named_parameters():
        if ".fc3." in name:
            p.data = np.zeros_like(p.data)
    batch = _batch(panel)
    batch.target = np.zeros_like(batch.target)
    loss = nll_loss(batch, model).item()
    assert loss == pytest.approx(-4 * math.log(1 / math.sqrt(2 * math.pi)), abs=1e-12)


def test_nll_is_pure_and_mean_invariant(panel):
    model = HierForecaster(panel.tree, 3, SMALL, np.random.default_rng(1))
    batch = _batch(panel)
    a = nll_loss(batch, model).item()
    assert nll_loss(batch, model).item() == a
    doubled = batch.take(np.r_[np.arange(len(batch)), np.arange(len(batch))])
    assert abs(nll_loss(doubled, model).item() - a) <= 1e-10


def test_epochs_zero_is_initialization(panel):
    ck = train(panel, TrainConfig(**{**FAST.__dict__, "epochs": 0}), SMALL)
    init_seq, _ = np.random.SeedSequence(FAST.seed).spawn(2)
    fresh = HierForecaster(panel.tree, 3, SMALL, np.random.default_rng(init_seq))
    for k, v in fresh.state_dict().items():
        np.testing.assert_array_equal(ck.params[k], v)
    assert ck.log == []
    un = untrained_checkpoint(panel, FAST, SMALL)
    for k in ck.params:
        np.testing.assert_array_equal(un.params[k], ck.params[k])


def test_training_is_bit_reproducible(panel, tmp_path):
    a = train(panel, FAST, SMALL, log_path=tmp_path / "a.csv")
    b = train(panel, FAST, SMALL, log_path=tmp_path / "b.csv")
    assert a.log == b.log
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    head = (tmp_path / "a.csv").read_text().splitlines()
    assert head[0] == "epoch,split,nll"
    assert head[1].startswith("1,train,") and head[2].startswith("1,val,")


def test_loss_decreases_over_fifty_epochs():
    panel = simulate(SyntheticSpec(length=200, seed=0))[0]
    ck = train(panel, TrainConfig(epochs=50, patience=1000), ModelConfig(), validation=False)
    tr = np.array([nll for _, split, nll in ck.log if split == "train"])
    assert len(tr) == 50
    avg = np.convolve(tr, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(avg) < 0)


def test_overfit_capacity():
    panel, meta = simulate(SyntheticSpec(length=64, seed=0))
    cfg = TrainConfig(epochs=60, lr=3e-3, batch_size=16, patience=1000)
    ck = train(panel, cfg, ModelConfig(dropout=0.0), validation=False)
    best = min(nll for _, split, nll in ck.log if split == "train")
    # convert per-step NLL of the scaled bottom series back to original units
    original_units = best + np.log(ck.scaler.std[panel.tree.r:]).sum()
    true_nll = panel.tree.m * 0.5 * math.log(2 * math.pi * math.e)
    assert original_units < true_nll + 0.5


def test_trained_beats_untrained_on_validation():
    panel = simulate(SyntheticSpec(length=120, seed=2))[0]
    cfg = TrainConfig(epochs=15, context_length=16, prediction_length=8)
    trained = train(panel, cfg)
    val = [nll for _, split, nll in trained.log if split == "val"]
    untrained = train(panel, TrainConfig(**{**cfg.__dict__, "epochs": 1, "lr": 0.0}))
    init_val = [nll for _, split, nll in untrained.log if split == "val"][0]
    assert min(val) < init_val


def test_forecast_determinism_and_coherency(panel, checkpoint):
    one = forecast(panel, checkpoint, 1, 1, seed=3)
    assert one.samples.shape == (1, 1, 7)
    np.testing.assert_array_equal(one.samples, forecast(panel, checkpoint, 1, 1, seed=3).samples)

    ens = forecast(panel, checkpoint, 8, 200, seed=5)
    again = forecast(panel, checkpoint, 8, 200, seed=5)
    assert ens.samples.tobytes() == again.samples.tobytes()
    scale = np.abs(ens.samples).max()
    assert ens.step_coherency().max() <= 1e-6 * scale
    raw = forecast(panel, checkpoint, 8, 200, seed=5, descale=False)
    assert raw.step_coherency().max() <= 1e-8
    assert ens.timestamps == [str(k) for k in range(80, 88)]


def test_rollout_paths_are_independent(panel, checkpoint):
    model = checkpoint.build_model()
    tree, sc = panel.tree, checkpoint.scaler
    enc_y = sc.apply(panel.values[-12:])
    enc_x = panel.covariates[-12:]
    dec_x = np.vstack([panel.covariates[-1:], panel.future_covariates(4)])
    noise = np.random.default_rng(0).standard_normal((5, 30, tree.m))
    out = rollout(model, sc, tree, enc_y, enc_x, dec_x, noise)
    perm = np.random.default_rng(1).permutation(30)
    shuffled = rollout(model, sc, tree, enc_y, enc_x, dec_x, noise[:, perm])
    np.testing.assert_allclose(shuffled, out[perm], rtol=0, atol=1e-12)
    q = np.quantile(out, [0.1, 0.5, 0.9], axis=0)
    np.testing.assert_allclose(np.quantile(shuffled, [0.1, 0.5, 0.9], axis=0), q, atol=1e-12)
    alone = rollout(model, sc, tree, enc_y, enc_x, dec_x, noise[:, 7:8])
    np.testing.assert_allclose(alone[0], out[7], atol=1e-12)


def test_checkpoint_roundtrip(panel, checkpoint, tmp_path):
    path = tmp_path / "ck.txt"
    checkpoint.save(path)
    back = Checkpoint.load(path)
    for k, v in checkpoint.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert back.model_config == checkpoint.model_config
    assert back.train_config == checkpoint.train_config
    np.testing.assert_array_equal(
        forecast(panel, back, 3, 4, seed=1).samples, forecast(panel, checkpoint, 3, 4, seed=1).samples
    )


def test_forecast_rejects_mismatches(panel, checkpoint):
    other = simulate(SyntheticSpec(depth=1, branching=3, length=80))[0]
    with pytest.raises(DataError, match="mismatch"):
        forecast(other, checkpoint, 2)
    ext = PanelSeries(panel.values, panel.covariates, panel.timestamps, panel.tree, None)
    with pytest.raises(DataError, match="missing future covariates"):
        forecast(ext, checkpoint, 3)
    ok = forecast(ext, checkpoint, 3, 2, future_covariates=panel.future_covariates(2))
    assert ok.samples.shape == (2, 3, 7)
    with pytest.raises(ConfigError):
        forecast(panel, checkpoint, 0)


def test_train_needs_enough_data():
    short = simulate(SyntheticSpec(length=20))[0]
    with pytest.raises(DataError, match="insufficient"):
        train(short, TrainConfig(context_length=24, prediction_length=8))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(context_length=0)
    with pytest.raises(ConfigError):
        TrainConfig(sample_count=0)
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(d_model=10, n_heads=4).attention()


@pytest.mark.parametrize("method", METHODS)
def test_baselines_coherent(panel, method):
    ens = baseline_forecast(panel, 8, method, 12)
    assert ens.samples.shape == (1, 8, 7)
    assert ens.coherency_error() <= 1e-8 * np.abs(ens.samples).max()
