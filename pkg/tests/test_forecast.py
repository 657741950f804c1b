import math

import numpy as np
import pytest

from app.constants import ClusterMethod
from app.constants.status import Status
from app.lib.clusters import ClusterAssignment, entire_matrix_clusters, local_clusters
from app.lib.exception import TmException
from app.lib.forecast import (
    Adam,
    EarlyStopping,
    TrainConfig,
    derive_seed,
    forward,
    forward_batch,
    init_forecaster,
    load_checkpoint,
    loss_and_gradients,
    predict_group,
    run_experiment,
    save_checkpoint,
    train,
)
from app.lib.forecast.gru import PARAM_NAMES, mse
from app.lib.synthetic import planted_regimes
from app.lib.tmdata import (
    NormalizationParams,
    WindowedDataset,
    build_windows,
    chronological_split,
    fit_normalization,
    with_history,
)


def _random_model(seed, input_dim=2, hidden_dim=3):
    """Model with non-zero biases so every parameter affects the output."""
    m = init_forecaster(input_dim, hidden_dim, seed)
    rng = np.random.default_rng(seed + 1000)
    params = {k: v + (rng.uniform(-0.5, 0.5, size=v.shape) if k.startswith("b_") else 0.0)
              for k, v in m.params.items()}
    return m.with_params(params)


def _reference_forward(params, window):
    """Scalar transcription of the gated recurrence, one unit at a time."""
    hidden = params["U_z"].shape[0]
    h = [0.0] * hidden

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    for x in window:
        def pre(name_w, name_u, name_b, state, i):
            total = params[name_b][i]
            total += sum(params[name_w][i, j] * x[j] for j in range(len(x)))
            total += sum(params[name_u][i, j] * state[j] for j in range(hidden))
            return total

        z = [sigmoid(pre("W_z", "U_z", "b_z", h, i)) for i in range(hidden)]
        r = [sigmoid(pre("W_r", "U_r", "b_r", h, i)) for i in range(hidden)]
        rh = [r[i] * h[i] for i in range(hidden)]
        n = [math.tanh(pre("W_n", "U_n", "b_n", rh, i)) for i in range(hidden)]
        h = [(1 - z[i]) * h[i] + z[i] * n[i] for i in range(hidden)]

    out_dim = params["W_out"].shape[0]
    return [params["b_out"][k] + sum(params["W_out"][k, i] * h[i] for i in range(hidden)) for k in range(out_dim)]


def _dataset(inputs, targets, flow_ids=None):
    inputs = np.asarray(inputs, dtype=float)
    return WindowedDataset(inputs=inputs, targets=np.asarray(targets, dtype=float),
                           window_length=inputs.shape[1] + 1,
                           flow_ids=flow_ids if flow_ids is not None else list(range(inputs.shape[2])))


def _sine_dataset(steps=240, window_length=5):
    t = np.arange(steps)
    values = 0.5 + 0.4 * np.sin(2 * np.pi * t / 8)
    windows = np.lib.stride_tricks.sliding_window_view(values, window_length)
    return _dataset(windows[:, :-1, None], windows[:, -1:])


class TestInit:
    def test_parameter_count(self):
        m = init_forecaster(144, 30, 0)
        assert m.parameter_count == 3 * (30 * 144 + 30 * 30 + 30) + 144 * 30 + 144

    def test_same_seed_same_weights(self):
        a, b = init_forecaster(4, 5, 7), init_forecaster(4, 5, 7)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_weight_range_and_zero_biases(self):
        m = init_forecaster(3, 16, 1)
        bound = 1 / math.sqrt(16)
        assert np.all(np.abs(m.params["U_r"]) <= bound)
        assert not m.params["b_n"].any()

    def test_zero_hidden(self):
        with pytest.raises(TmException) as e:
            init_forecaster(3, 0, 1)
        assert e.value.code == Status.DIMENSION_ERROR


class TestForward:
    def test_zero_model_outputs_readout_bias(self, rng):
        m = init_forecaster(2, 3, 0)
        m = m.with_params({k: np.zeros_like(v) for k, v in m.params.items()})
        np.testing.assert_array_equal(forward(m, rng.uniform(size=(4, 2))), [0.0, 0.0])

    def test_matches_scalar_reference(self, rng):
        for seed in range(5):
            m = _random_model(seed)
            window = rng.uniform(size=(4, 2))
            np.testing.assert_allclose(forward(m, window), _reference_forward(m.params, window), rtol=0, atol=1e-12)

    def test_batch_rows_are_independent(self, rng):
        m = _random_model(3)
        batch = rng.uniform(size=(5, 4, 2))
        outputs = forward_batch(m, batch)
        np.testing.assert_allclose(outputs[2], forward(m, batch[2]), rtol=0, atol=1e-14)

    def test_wrong_width(self, rng):
        with pytest.raises(TmException) as e:
            forward(_random_model(0), rng.uniform(size=(4, 3)))
        assert e.value.code == Status.DIMENSION_ERROR


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_central_differences(self, seed):
        m = _random_model(seed)
        rng = np.random.default_rng(seed)
        inputs = rng.uniform(size=(3, 4, 2))
        targets = rng.uniform(size=(3, 2))
        _, grads = loss_and_gradients(m, inputs, targets)

        eps = 1e-5
        for name in PARAM_NAMES:
            numeric = np.zeros_like(m.params[name])
            for index in np.ndindex(numeric.shape):
                plus = {k: v.copy() for k, v in m.params.items()}
                minus = {k: v.copy() for k, v in m.params.items()}
                plus[name][index] += eps
                minus[name][index] -= eps
                numeric[index] = (mse(m.with_params(plus), inputs, targets)
                                  - mse(m.with_params(minus), inputs, targets)) / (2 * eps)
            np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-9, err_msg=name)

    def test_perfect_prediction_has_zero_gradient(self, rng):
        m = _random_model(2)
        inputs = rng.uniform(size=(3, 4, 2))
        loss, grads = loss_and_gradients(m, inputs, forward_batch(m, inputs))
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_duplicated_batch_is_mean_invariant(self, rng):
        m = _random_model(4)
        inputs = rng.uniform(size=(1, 4, 2))
        targets = rng.uniform(size=(1, 2))
        loss1, grads1 = loss_and_gradients(m, inputs, targets)
        loss4, grads4 = loss_and_gradients(m, np.repeat(inputs, 4, axis=0), np.repeat(targets, 4, axis=0))
        assert loss4 == pytest.approx(loss1, rel=1e-12)
        for name in PARAM_NAMES:
            np.testing.assert_allclose(grads4[name], grads1[name], rtol=1e-10, atol=1e-15)

    def test_non_finite_output_names_the_batch_row(self, rng):
        m = _random_model(0)
        inputs = rng.uniform(size=(3, 4, 2))
        inputs[1, 0, 0] = np.nan
        with pytest.raises(TmException) as e:
            loss_and_gradients(m, inputs, np.zeros((3, 2)))
        assert e.value.code == Status.NUMERIC_ERROR
        assert "batch index 1" in e.value.msg


class TestOptimizer:
    def test_first_adam_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0])}
        adam = Adam(params, learning_rate=0.1)
        updated = adam.step(params, {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(updated["w"], [0.9, -1.9], rtol=0, atol=1e-6)
        assert params["w"][0] == 1.0

    def test_stops_patience_epochs_after_the_best(self):
        stopper = EarlyStopping(patience=3, min_delta=0.0)
        losses = [5.0, 4.0, 3.0, 3.5, 4.0, 5.0, 6.0, 7.0]
        stopped_at = None
        for epoch, loss in enumerate(losses):
            stopper(loss, epoch)
            if stopper.early_stop:
                stopped_at = epoch
                break
        assert stopped_at == 2 + 3
        assert stopper.best_epoch == 2
        assert stopper.best_loss == 3.0

    def test_improvements_below_min_delta_do_not_reset_patience(self):
        stopper = EarlyStopping(patience=2, min_delta=0.1)
        for epoch, loss in enumerate([1.0, 0.95, 0.93]):
            stopper(loss, epoch)
        assert stopper.early_stop
        assert stopper.best_epoch == 2


class TestTrain:
    CONFIG = TrainConfig(epochs=40, batch_size=32, learning_rate=0.01, patience=5, min_delta=0.0, seed=3)

    def test_zero_targets_stay_at_zero_loss(self):
        ds = _dataset(np.zeros((40, 4, 2)), np.zeros((40, 2)))
        _, report = train(init_forecaster(2, 4, 0), ds, ds, self.CONFIG.model_copy(update={"epochs": 5}))
        assert max(report.val_loss_curve) <= 1e-6

    def test_learns_a_periodic_signal(self):
        ds = _sine_dataset()
        _, report = train(init_forecaster(1, 8, 0), ds, None, self.CONFIG)
        assert report.monitored == "training"
        assert not report.val_loss_curve
        assert report.best_loss < 0.5 * report.train_loss_curve[0]

    def test_returns_best_validation_parameters(self):
        ds = _sine_dataset()
        val = _sine_dataset(steps=60)
        trained, report = train(init_forecaster(1, 4, 1), ds, val, self.CONFIG)

        assert report.best_epoch == int(np.argmin(report.val_loss_curve))
        assert mse(trained, val.inputs, val.targets) == report.val_loss_curve[report.best_epoch]
        assert report.epochs_run == len(report.train_loss_curve) == len(report.val_loss_curve)
        if report.stopped_early:
            assert report.epochs_run < self.CONFIG.epochs

    def test_noiseless_autoregression_reaches_small_validation_error(self):
        # y[t+1] = 0.9 y[t] from random starting levels
        rng = np.random.default_rng(9)

        def windows(count):
            series = rng.uniform(0.2, 1.0, size=(count, 1)) * 0.9 ** np.arange(5)
            return _dataset(series[:, :-1, None], series[:, -1:])

        config = TrainConfig(epochs=100, batch_size=32, learning_rate=0.01, patience=10, min_delta=0.0, seed=0)
        _, report = train(init_forecaster(1, 8, 0), windows(320), windows(80), config)
        assert report.best_loss <= 1e-3

    def test_stops_patience_epochs_after_validation_turns_upward(self):
        # zero inputs: training pulls the output from 0 towards 1, so validation at 0.05 is passed once
        train_ds = _dataset(np.zeros((20, 4, 1)), np.ones((20, 1)))
        val_ds = _dataset(np.zeros((10, 4, 1)), np.full((10, 1), 0.05))
        config = TrainConfig(epochs=50, batch_size=32, learning_rate=0.01, patience=3, min_delta=0.0, seed=0)
        trained, report = train(init_forecaster(1, 2, 0), train_ds, val_ds, config)

        best = report.best_epoch
        assert best >= 1
        assert best == int(np.argmin(report.val_loss_curve))
        assert np.all(np.diff(report.val_loss_curve[best:]) > 0)
        assert report.stopped_early
        assert report.epochs_run == best + config.patience + 1
        assert mse(trained, val_ds.inputs, val_ds.targets) == report.val_loss_curve[best]

    def test_deterministic(self):
        ds = _sine_dataset()
        a, report_a = train(init_forecaster(1, 4, 5), ds, None, self.CONFIG.model_copy(update={"epochs": 5}))
        b, report_b = train(init_forecaster(1, 4, 5), ds, None, self.CONFIG.model_copy(update={"epochs": 5}))
        assert report_a == report_b
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_empty_dataset(self):
        ds = _dataset(np.zeros((0, 4, 1)), np.zeros((0, 1)))
        with pytest.raises(TmException) as e:
            train(init_forecaster(1, 2, 0), ds, None, self.CONFIG)
        assert e.value.code == Status.EMPTY_INPUT

    def test_flow_mismatch(self):
        ds = _sine_dataset()
        with pytest.raises(TmException) as e:
            train(init_forecaster(2, 2, 0), ds, None, self.CONFIG)
        assert e.value.code == Status.DIMENSION_ERROR


class TestPredictGroup:
    def test_constant_flow_emits_its_constant(self, rng):
        params = NormalizationParams(per_flow_min=[4.0, 0.0], per_flow_max=[4.0, 10.0])
        ds = _dataset(rng.uniform(size=(6, 3, 2)), rng.uniform(size=(6, 2)))
        predicted = predict_group(_random_model(1), ds, params)
        assert predicted.shape == (6, 2)
        np.testing.assert_array_equal(predicted[:, 0], np.full(6, 4.0))
        assert np.all(predicted[:, 1] >= 0.0)

    def test_single_flow_shape(self, rng):
        params = NormalizationParams(per_flow_min=[0.0], per_flow_max=[1.0])
        ds = _dataset(rng.uniform(size=(7, 3, 1)), rng.uniform(size=(7, 1)))
        assert predict_group(_random_model(0, input_dim=1), ds, params).shape == (7, 1)

    def test_tracks_an_autoregressive_flow(self):
        # x[t+1] = 20 + 0.8 x[t] + noise, stationary around 100
        rng = np.random.default_rng(42)
        values = np.empty(700)
        values[0] = 100.0
        for t in range(1, len(values)):
            values[t] = 20.0 + 0.8 * values[t - 1] + rng.normal(0.0, 5.0)
        train_part, test_part = values[:600], values[600:]
        params = NormalizationParams(per_flow_min=[train_part.min()], per_flow_max=[train_part.max()])
        scale = lambda v: (v - train_part.min()) / (train_part.max() - train_part.min())

        windows = np.lib.stride_tricks.sliding_window_view(scale(train_part), 5)
        ds = _dataset(windows[:, :-1, None], windows[:, -1:])
        trained, _ = train(init_forecaster(1, 8, 0), ds, None,
                           TrainConfig(epochs=150, batch_size=32, learning_rate=0.01, patience=20, seed=0))

        test_windows = np.lib.stride_tricks.sliding_window_view(test_part, 5)
        test_ds = _dataset(scale(test_windows[:, :-1, None]), scale(test_windows[:, -1:]))
        predicted = predict_group(trained, test_ds, params)[:, 0]
        noiseless = 20.0 + 0.8 * test_windows[:, -2]
        assert np.mean(np.abs(predicted - noiseless) / noiseless) < 0.05


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = _random_model(6)
        loaded = load_checkpoint(save_checkpoint(m, tmp_path / "model.npz"))
        assert (loaded.input_dim, loaded.hidden_dim, loaded.seed) == (2, 3, 6)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(loaded.params[name], m.params[name])

    def test_missing(self, tmp_path):
        with pytest.raises(TmException) as e:
            load_checkpoint(tmp_path / "absent.npz")
        assert e.value.code == Status.MISSING_ARTIFACT

    def test_garbage(self, tmp_path):
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(TmException) as e:
            load_checkpoint(path)
        assert e.value.code == Status.CHECKPOINT_ERROR

    def test_wrong_version(self, tmp_path):
        m = _random_model(0)
        path = tmp_path / "old.npz"
        np.savez(path, format_version=np.int64(99), input_dim=np.int64(2), hidden_dim=np.int64(3),
                 seed=np.int64(0), **m.params)
        with pytest.raises(TmException) as e:
            load_checkpoint(path)
        assert e.value.code == Status.CHECKPOINT_ERROR


class TestExperiment:
    CONFIG = TrainConfig(epochs=3, batch_size=16, learning_rate=0.01, patience=5, seed=11)

    @pytest.fixture(scope="class")
    def tm(self):
        series, _ = planted_regimes(2, 200, regimes=2, seed=1)
        return series

    def test_cluster_outputs_scatter_into_their_flows(self, tm):
        assignment = ClusterAssignment.from_clusters(ClusterMethod.HISTOGRAM, [[0, 2], [1, 3]])
        result = run_experiment(tm, assignment, self.CONFIG, 5, hidden_dim=4)

        assert len(result.fits) == 2
        assert result.split == {"train": 144, "validation": 16, "test": 40}
        assert result.predicted.shape == (40, 2, 2)
        np.testing.assert_array_equal(result.truth, tm.matrices[160:])

        train_s, val_s, test_s = chronological_split(tm, 0.8, 0.1)
        params = fit_normalization(train_s)
        test_ds = build_windows(with_history(tm.slice(0, 160), test_s, 4), params, range(4), 5)
        columns = result.predicted.reshape(40, 4)
        for fit in result.fits:
            expected = predict_group(fit.model, test_ds.subset(fit.flow_ids), params)
            np.testing.assert_array_equal(columns[:, fit.flow_ids], expected)

    def test_entire_matrix_and_local_model_counts(self, tm):
        em = run_experiment(tm, entire_matrix_clusters(4), self.CONFIG, 5, hidden_dim=4)
        assert [m.input_dim for m in em.models] == [4]
        local = run_experiment(tm, local_clusters(4), self.CONFIG, 5, hidden_dim=4)
        assert [m.input_dim for m in local.models] == [1, 1, 1, 1]

    def test_jobs_do_not_change_results(self, tm):
        serial = run_experiment(tm, local_clusters(4), self.CONFIG, 5, hidden_dim=4, jobs=1)
        parallel = run_experiment(tm, local_clusters(4), self.CONFIG, 5, hidden_dim=4, jobs=3)
        np.testing.assert_array_equal(serial.predicted, parallel.predicted)
        assert serial.reports == parallel.reports

    def test_cluster_seeds_differ(self):
        assert len({derive_seed(42, i) for i in range(50)}) == 50
        assert derive_seed(42, 3) == derive_seed(42, 3)

    def test_assignment_size_mismatch(self, tm):
        with pytest.raises(TmException) as e:
            run_experiment(tm, local_clusters(9), self.CONFIG, 5)
        assert e.value.code == Status.DIMENSION_ERROR
