import dataclasses

import numpy as np
import pytest

from iob import datasets, training
from iob.bottleneck import IobConfig, weight_profile
from iob.errors import DimensionError, DomainError, FormatError
from iob.training import (
    RunManifest,
    TrainConfig,
    TrainingDiverged,
    early_stop_triggered,
    evaluate_mse_curve,
    nearest_rank_percentile,
    train_autoencoder,
    train_iob,
    train_separate_autoencoders,
)

FAST = TrainConfig(lr=1e-3, patience=5, max_epochs=15)


@pytest.fixture(scope="module")
def scurve():
    return datasets.sample_scurve(datasets.ScurveConfig(n_samples=2000, seed=0))


@pytest.fixture(scope="module")
def scurve_run(scurve):
    return train_iob(training.scurve_spec(4), IobConfig.linear(4), scurve, FAST)


@pytest.fixture(scope="module")
def separate_runs(scurve):
    return train_separate_autoencoders(training.scurve_spec(2), scurve, FAST)


def _layer_sizes(layers):
    return [tuple(l.args) for l in layers if l.kind == "dense"]


class TestPresets:
    def test_scurve_widths(self):
        spec = training.scurve_spec()
        assert spec.k_max == 4
        assert _layer_sizes(spec.encoder) == [(3, 64), (64, 64), (64, 4)]
        assert _layer_sizes(spec.decoder) == [(4, 64), (64, 64), (64, 3)]

    def test_activations(self):
        spec = training.scurve_spec()
        assert [l.activation for l in spec.encoder] == ["relu", "relu", "identity"]
        assert [l.activation for l in spec.decoder] == ["relu", "relu", "identity"]

    def test_ndisk_shapes(self):
        spec = training.ndisk_spec()
        model = training.build_autoencoder(spec)
        x = np.zeros((2, 1, 32, 32), np.float32)
        z = model.encoder(x)
        assert z.shape == (2, 16)
        assert model.decoder(z).shape == (2, 1, 32, 32)
        convs = [l.args for l in spec.encoder if l.kind == "conv"]
        assert [c[:2] for c in convs] == [(1, 4), (4, 12), (12, 24)]
        assert all(c[2:] == (4, 2, 1) for c in convs)
        assert _layer_sizes(spec.encoder) == [(384, 256), (256, 128), (128, 16)]

    def test_linear_preset_is_single_map(self):
        spec = training.linear_spec(10, 4)
        assert _layer_sizes(spec.encoder) == [(10, 4)] and _layer_sizes(spec.decoder) == [(4, 10)]
        assert {l.activation for l in spec.encoder + spec.decoder} == {"identity"}

    def test_spec_dict_round_trip(self):
        spec = training.ndisk_spec(8)
        assert training.AutoencoderSpec.from_dict(spec.to_dict()) == spec

    def test_with_bottleneck(self):
        spec = training.scurve_spec().with_bottleneck(2)
        assert spec.k_max == 2 and spec.encoder[-1].args == (64, 2) and spec.decoder[0].args == (2, 64)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.batch_size, cfg.min_improvement, cfg.patience) == (5e-5, 64, 1e-4, 20)

    @pytest.mark.parametrize("kwargs", [{"lr": 0}, {"batch_size": 0}, {"patience": 0}, {"min_improvement": -1}])
    def test_rejects(self, kwargs):
        with pytest.raises(DomainError):
            TrainConfig(**kwargs)

    def test_kmax_mismatch(self, scurve):
        with pytest.raises(DimensionError):
            train_iob(training.scurve_spec(4), IobConfig.linear(3), scurve, FAST)

    def test_input_shape_mismatch(self, scurve):
        with pytest.raises(DimensionError):
            train_iob(training.dense_spec([5, 8], 2), IobConfig.linear(2), scurve, FAST)


class TestEarlyStop:
    def test_flat_history_stops(self):
        assert early_stop_triggered([1.0] * 20, 1e-4, 20)

    def test_short_history_never_stops(self):
        assert not early_stop_triggered([1.0] * 19, 1e-4, 20)

    def test_steady_gain_continues(self):
        hist = list(np.linspace(2.0, 1.0, 30))
        assert not early_stop_triggered(hist, 1e-4, 20)

    def test_gain_just_below_threshold(self):
        # best before the window is 1.0; the window improves it by 0.5e-4 relative
        hist = [1.0] + [1.0 - 0.5e-4] * 19
        assert early_stop_triggered(hist, 1e-4, 20)
        hist = [1.0] + [1.0 - 2e-4] * 19
        assert not early_stop_triggered(hist, 1e-4, 20)

    def test_late_spike_does_not_hide_old_best(self):
        hist = [1.0] * 5 + [5.0] * 15
        assert early_stop_triggered(hist, 1e-4, 15)


class TestPercentile:
    def test_nearest_rank(self):
        v = np.arange(1, 101)
        assert nearest_rank_percentile(v, 16) == 16
        assert nearest_rank_percentile(v, 84) == 84
        assert nearest_rank_percentile(v, 0) == 1
        assert nearest_rank_percentile(v, 100) == 100

    def test_small_sample(self):
        assert nearest_rank_percentile([3.0, 1.0, 2.0], 50) == 2.0

    def test_empty(self):
        with pytest.raises(DomainError):
            nearest_rank_percentile([], 50)


class TestLinearIob:
    def test_manifest_contents(self, scurve_run, scurve):
        _, man = scurve_run
        assert man.status == "converged"
        assert man.dataset_fingerprint == scurve.fingerprint()
        assert man.prng == datasets.PRNG_NAME
        assert 1 <= len(man.val_losses) == len(man.train_losses) <= FAST.max_epochs
        assert man.wall_clock > 0

    def test_curve_shape_and_k0(self, scurve_run, scurve):
        model, _ = scurve_run
        curve = evaluate_mse_curve(model, scurve)
        assert [r[0] for r in curve] == [0, 1, 2, 3, 4]
        assert curve[0][1] == pytest.approx(1.0, abs=0.1)
        assert all(r[2] <= r[1] * 10 and r[2] <= r[3] for r in curve)

    def test_curve_subset(self, scurve_run, scurve):
        model, _ = scurve_run
        assert [r[0] for r in evaluate_mse_curve(model, scurve, ks=[1, 3])] == [1, 3]

    def test_k0_matches_variance_ratio(self, scurve_run, scurve):
        model, _ = scurve_run
        ratio = scurve.val.astype(np.float64).var(axis=0).mean() / scurve.population_variance
        k0 = evaluate_mse_curve(model, scurve, ks=[0])[0][1]
        # the constant output is a mean estimate, plus its offset from the val mean
        assert k0 >= ratio * 0.999 and k0 == pytest.approx(ratio, rel=0.1)

    def test_best_val_restored(self, scurve_run, scurve):
        model, man = scurve_run
        rho = weight_profile(IobConfig.linear(4)).rho
        got = training._exact_loss_value(model, scurve.val, 4, rho, scurve.population_variance)
        assert got == pytest.approx(min(man.val_losses), rel=1e-5)

    def test_deterministic(self, scurve):
        cfg = TrainConfig(lr=1e-3, max_epochs=3)
        a = train_iob(training.scurve_spec(4), IobConfig.linear(4), scurve, cfg)
        b = train_iob(training.scurve_spec(4), IobConfig.linear(4), scurve, cfg)
        assert a[1].to_text(include_wall_clock=False) == b[1].to_text(include_wall_clock=False)
        assert training.config_hash(a[1].config_hash) == training.config_hash(b[1].config_hash)

    def test_seed_changes_run(self, scurve):
        a = train_iob(training.scurve_spec(4), IobConfig.linear(4), scurve, TrainConfig(lr=1e-3, max_epochs=2, seed=0))
        b = train_iob(training.scurve_spec(4), IobConfig.linear(4), scurve, TrainConfig(lr=1e-3, max_epochs=2, seed=1))
        assert a[1].val_losses != b[1].val_losses

    def test_kmax_zero_is_mean_predictor(self, scurve):
        model, _ = train_iob(training.scurve_spec(0), IobConfig.linear(0), scurve, TrainConfig(lr=1e-2, max_epochs=30, patience=5))
        assert evaluate_mse_curve(model, scurve)[0][1] == pytest.approx(1.0, abs=0.05)

    def test_divergence_flags_manifest(self, scurve):
        train = scurve.train.copy()
        train[7, 1] = np.nan
        bad = dataclasses.replace(scurve, train=train)
        with pytest.raises(TrainingDiverged) as info:
            train_iob(training.scurve_spec(2), IobConfig.linear(2), bad, FAST)
        assert info.value.manifest.status == "diverged"
        assert "diverged at epoch 1" in info.value.manifest.events


class TestGeometricIob:
    def test_sweep_finishes(self, scurve):
        cfg = IobConfig.geometric(3, 0.5, patience_epochs=2, convergence_threshold=0.5)
        model, man = train_iob(training.scurve_spec(3), cfg, scurve, TrainConfig(lr=1e-3, max_epochs=40))
        assert man.extra["frozen_units"] == 3
        assert any("final convergence window" in e for e in man.events)
        assert any("unit 0 frozen" in e for e in man.events)


class TestSeparate:
    @pytest.fixture
    def runs(self, separate_runs):
        return separate_runs

    def test_one_per_width(self, runs):
        assert sorted(runs) == [0, 1, 2]
        assert all(runs[k][0].k_max == k for k in runs)

    def test_k0_mean_predictor(self, scurve):
        runs = train_separate_autoencoders(training.scurve_spec(2), scurve, TrainConfig(lr=1e-2, max_epochs=30, patience=5), ks=[0])
        curve = evaluate_mse_curve({0: runs[0][0]}, scurve)
        assert curve[0][1] == pytest.approx(1.0, abs=0.1)

    def test_capacity_order(self, runs, scurve):
        curve = evaluate_mse_curve({k: m for k, (m, _) in runs.items()}, scurve)
        means = [r[1] for r in curve]
        assert all(b <= a * 1.05 for a, b in zip(means, means[1:]))

    def test_explicit_ks(self, scurve):
        runs = train_separate_autoencoders(training.scurve_spec(2), scurve, TrainConfig(lr=1e-3, max_epochs=1), ks=[1])
        assert list(runs) == [1]

    def test_plain_autoencoder_manifest(self, scurve):
        _, man = train_autoencoder(training.scurve_spec(2), scurve, TrainConfig(lr=1e-3, max_epochs=2))
        assert len(man.val_losses) == 2 and man.model == "separate_w2"


class TestParamFiles:
    def test_round_trip(self, tmp_path, scurve_run, scurve):
        model, _ = scurve_run
        training.save_model(tmp_path / "m.iobn", model)
        back = training.load_model(tmp_path / "m.iobn")
        for (ka, a), (kb, b) in zip(model.get_state().items(), back.get_state().items()):
            assert ka == kb and a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(back.reconstruct(scurve.val, 2), model.reconstruct(scurve.val, 2))

    def test_zero_width_round_trip(self, tmp_path, scurve):
        model = training.build_autoencoder(training.scurve_spec(4).with_bottleneck(0), seed=3)
        training.save_model(tmp_path / "z.iobn", model)
        back = training.load_model(tmp_path / "z.iobn")
        np.testing.assert_array_equal(back.reconstruct(scurve.val[:5]), model.reconstruct(scurve.val[:5]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            training.load_model(tmp_path / "none.iobn")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.iobn").write_bytes(b"XXXX\0\0\0\0")
        with pytest.raises(FormatError):
            training.read_param_file(tmp_path / "b.iobn")


class TestManifest:
    def test_text_is_key_value(self):
        man = RunManifest("abc", 0, "PCG64", "ff", "linear_iob")
        man.log_epoch(1.5, 2.5)
        man.events.append("early stop at epoch 1")
        text = man.to_text()
        pairs = dict(line.split(" = ", 1) for line in text.strip().splitlines())
        assert pairs["epoch.0001.val"] == "2.5" and pairs["epochs"] == "1"
        assert "wall_clock_seconds" in pairs
        assert "wall_clock_seconds" not in man.to_text(include_wall_clock=False)

    def test_config_hash_stable(self):
        a = training.config_hash(training.scurve_spec().to_dict(), TrainConfig())
        b = training.config_hash(training.scurve_spec().to_dict(), TrainConfig())
        c = training.config_hash(training.scurve_spec().to_dict(), TrainConfig(lr=1e-3))
        assert a == b != c and len(a) == 16
