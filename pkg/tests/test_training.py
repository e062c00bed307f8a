import os
import numpy as np
import pandas as pd
import pytest
from hybridode.models import training
from hybridode.models.datagen import Dataset, PendulumSampleSpec, gen_encoder_pretraining_data
from hybridode.models.networks import EncoderNet
from hybridode.models.hybrid import CE_SCALE, CP_SCALE, HybridModel, build_model
from hybridode.models.numerics import Tensor
from hybridode.models.training import (LossSpec, TrainConfig, estimate_beta, fit_model, full_batch, load_encoder,
                                       model_conditioning, pretrain_encoder, reconstruction_loss, sample_window_batch, save_encoder,
                                       write_run_artifacts)
from hybridode.utils.exceptions import ConfigurationError, MissingArtifactError, ShapeError, WindowSamplingError


def _sparse_dataset(active_step=7):
    times = np.arange(11) * 0.5
    states = np.stack([np.column_stack([times + 100.0 * unit, -times]) for unit in range(2)])
    eta = np.zeros((2, 11, 1))
    if active_step is not None:
        eta[1, active_step, 0] = 1.0
    records = pd.DataFrame({"unit": [0, 1], "m": [4.0, 4.0], "l_cm": [2.0, 2.0]})
    return Dataset("sparse", "pendulum", ["theta", "omega"], times, states, eta, records)


def test_window_batch_composition(rng):
    dataset = _sparse_dataset()
    batch = sample_window_batch(dataset, 3, 10, rng, zero_start_min=0.2, nonzero_eta_min=0.3)
    assert len(batch) == 10
    np.testing.assert_array_equal(batch.starts[:2], 0)
    np.testing.assert_array_equal(batch.units[2:5], 1)
    assert set(batch.starts[2:5]) <= {5, 6, 7}
    assert np.all(np.any(batch.eta[2:5] != 0.0, axis=(1, 2)))
    assert np.all(batch.starts <= 7)


def test_window_batch_slices(rng):
    dataset = _sparse_dataset()
    batch = sample_window_batch(dataset, 4, 6, rng)
    assert batch.target.shape == (6, 5, 2)
    assert batch.eta.shape == (6, 5, 1)
    for i in range(len(batch)):
        unit, start = batch.units[i], batch.starts[i]
        np.testing.assert_array_equal(batch.target[i], dataset.observed[unit, start:start + 5])
        np.testing.assert_array_equal(batch.start_state[i], dataset.states[unit, start])
        assert batch.t0[i] == dataset.times[start]


def test_window_batch_respects_unit_restriction(rng):
    batch = sample_window_batch(_sparse_dataset(), 2, 8, rng, units=np.array([0]))
    np.testing.assert_array_equal(batch.units, 0)


def test_window_sampling_errors(rng):
    dataset = _sparse_dataset()
    with pytest.raises(WindowSamplingError):
        sample_window_batch(dataset, 11, 4, rng)
    with pytest.raises(WindowSamplingError):
        sample_window_batch(dataset, 3, 10, rng, zero_start_min=0.6, nonzero_eta_min=0.6)
    with pytest.raises(WindowSamplingError):
        sample_window_batch(_sparse_dataset(active_step=None), 3, 10, rng, nonzero_eta_min=0.1)
    with pytest.raises(WindowSamplingError):
        sample_window_batch(dataset, 3, 10, rng, units=np.array([], dtype=np.int64))


def test_full_batch_covers_the_horizon():
    batch = full_batch(_sparse_dataset(), start=4)
    assert batch.target.shape == (2, 7, 2)
    np.testing.assert_array_equal(batch.t0, [2.0, 2.0])


def test_reconstruction_loss():
    target = np.zeros((3, 4, 2))
    assert reconstruction_loss(target.copy(), target, LossSpec()) == 0.0
    pred = target.copy()
    pred[..., 0] = 1.0
    assert reconstruction_loss(pred, target, LossSpec()) == pytest.approx(1.0)
    pred[..., 0] = 2.0
    assert reconstruction_loss(pred, target, LossSpec("relative_mse", (2.0, 1.0))) == pytest.approx(1.0)
    out = reconstruction_loss(Tensor(pred), target, LossSpec())
    assert isinstance(out, Tensor)
    assert out.item() == pytest.approx(4.0)


def test_reconstruction_loss_shape_errors():
    with pytest.raises(ShapeError):
        reconstruction_loss(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)), LossSpec())
    with pytest.raises(ShapeError):
        reconstruction_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), LossSpec())


def test_loss_spec():
    assert LossSpec.for_case("pk", "relative_mse").normalizers == (CP_SCALE, CE_SCALE)
    assert LossSpec.for_case("pk", "plain_mse").normalizers == (1.0, 1.0)
    with pytest.raises(ConfigurationError):
        LossSpec("relative_mse", (0.0, 1.0))


@pytest.mark.parametrize("settings", [
    {"zero_start_min": 1.5},
    {"zero_start_min": 0.6, "nonzero_eta_min": 0.6},
    {"loss": "huber"},
    {"batch_size": 0},
    {"window_len": 0},
    {"scheduler": {"kind": "cosine"}},
])
def test_train_config_rejects(settings):
    with pytest.raises(ConfigurationError):
        TrainConfig(**settings)


def test_train_config_from_dict_ignores_unknown_keys():
    cfg = TrainConfig.from_dict({"batch_size": 16, "comment": "x"}, seed=9)
    assert cfg.batch_size == 16
    assert cfg.seed == 9


def test_fit_hybrid_pendulum(tmp_path, tiny_config, pendulum_train):
    model, result = fit_model("hybrid", tiny_config, pendulum_train)
    assert list(result.history.columns) == ["epoch", "train_loss", "val_loss", "lr"]
    assert result.epochs_run == len(result.history) == 2
    assert result.best_val_loss == pytest.approx(result.history["val_loss"].min())
    assert result.best_epoch in (1, 2)
    assert np.all(np.isfinite(result.history["train_loss"]))

    write_run_artifacts(str(tmp_path), tiny_config, model, result, {"seed": 0})
    for name in ("config.yaml", "epochs.csv", "best.json", "final.json"):
        assert os.path.isfile(tmp_path / name)
    best = HybridModel.load(str(tmp_path / "best.json"))
    for key, value in model.state_dict().items():
        np.testing.assert_array_equal(best.state_dict()[key], value)
    final = HybridModel.load(str(tmp_path / "final.json"))
    for key, value in result.final_state.items():
        np.testing.assert_array_equal(final.state_dict()[key], value)


def test_fit_is_deterministic(tiny_config, pendulum_train):
    first = fit_model("data-driven", tiny_config, pendulum_train)[1]
    second = fit_model("data-driven", tiny_config, pendulum_train)[1]
    pd.testing.assert_frame_equal(first.history, second.history)


def test_mechanistic_models_are_not_trained(tiny_config, pendulum_train):
    model, result = fit_model("mechanistic", tiny_config, pendulum_train)
    assert result.epochs_run == 0
    assert result.history.empty
    assert np.isfinite(result.best_val_loss)
    assert model.parameters() == []


def test_encoder_pretraining_round_trip(tmp_path, rng):
    dataset = gen_encoder_pretraining_data(PendulumSampleSpec(n=8), seed=0)
    cfg = TrainConfig(batch_size=4, max_epochs=2, window_len=None)
    encoder, result = pretrain_encoder(dataset, cfg, hidden_dim=8, window=100, rng=rng)
    assert 1 <= result.epochs_run <= 2
    assert np.isfinite(result.best_val_loss)
    estimates = estimate_beta(encoder, dataset)
    assert estimates.shape == (8, 2)
    assert np.all(estimates >= 1e-3)

    path = str(tmp_path / "encoder.json")
    save_encoder(encoder, path, {"seed": 0})
    np.testing.assert_array_equal(estimate_beta(load_encoder(path), dataset), estimates)


def test_explicit_zero_validation_fraction_is_kept(monkeypatch, rng):
    dataset = gen_encoder_pretraining_data(PendulumSampleSpec(n=6), seed=0)
    dataset.records["split"] = "train"
    fractions = []
    split_units = training._split_units

    def recording_split(n, fraction, generator):
        fractions.append(fraction)
        return split_units(n, fraction, generator)

    monkeypatch.setattr(training, "_split_units", recording_split)
    cfg = TrainConfig(batch_size=4, max_epochs=1, window_len=None, validation_fraction=0.0)
    _, result = pretrain_encoder(dataset, cfg, hidden_dim=8, window=100, rng=rng)
    assert fractions == [0.0]
    assert np.isfinite(result.best_val_loss)


def test_correction_training_leaves_the_encoder_untouched(tiny_config, pendulum_train):
    tiny_config["pendulum"]["beta_source"] = "encoder"
    encoder = EncoderNet(100, 3, np.random.default_rng(4), hidden_dim=8)
    encoder(np.random.default_rng(5).normal(size=(6, 100, 3)))
    encoder.zero_().eval()
    encoder.output_layer.bias.data[...] = [4.0, 2.2]
    before = encoder.state_dict()
    _, result = fit_model("hybrid", tiny_config, pendulum_train, encoder)
    assert result.epochs_run == 2
    after = encoder.state_dict()
    assert sorted(after) == sorted(before)
    for name, value in before.items():
        np.testing.assert_array_equal(after[name], value)


def test_encoder_models_need_an_encoder(tiny_config, pendulum_train):
    tiny_config["pendulum"]["beta_source"] = "encoder"
    model = build_model("hybrid", "pendulum", tiny_config)
    with pytest.raises(MissingArtifactError):
        model_conditioning(model, pendulum_train)
    with pytest.raises(MissingArtifactError):
        fit_model("hybrid", tiny_config, pendulum_train)


def test_pk_models_need_the_prior(tiny_config, pk_cohort_dataset):
    model = build_model("hybrid", "pk", tiny_config)
    with pytest.raises(ConfigurationError):
        model_conditioning(model, pk_cohort_dataset)
