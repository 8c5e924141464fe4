import math

import numpy as np
import pytest

from sceneipw import (
    CheckpointFormatError,
    ConvLayerSpec,
    ConvNetSpec,
    DivergenceError,
    PropensityModel,
    Raster,
    TrainConfig,
    build_model,
    forward,
    gradient_wrt_input,
    load_model,
    loss_and_gradient,
    predict_batch,
    save_model,
    trace_forward,
    train,
)
from sceneipw.propensity import _lr_at, _Optimizer

LOGISTIC_1 = 0.7310585786300049
LOGISTIC_2 = 0.8807970779778823
LN2 = 0.6931471805599453


def tiny_identity_model():
    """1x1 conv net whose logit equals the largest positive pixel."""
    spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=1),))
    model = build_model(spec, input_shape=(2, 2, 1), seed=0)
    params = np.zeros_like(model.params)
    net = model.net
    params[net.slices["conv0.weights"]] = 1.0
    params[net.slices["head.weights"]] = 1.0
    return PropensityModel(spec=spec, input_shape=(2, 2, 1), params=params)


def raster_of(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Raster(arr)


class TestGeometry:
    def test_param_layout_single_layer(self):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        model = build_model(spec, input_shape=(8, 8, 1))
        net = model.net
        # 3*3*1*1 weights + 1 bias + 1 head weight + 1 head bias.
        assert net.n_params == 12
        assert net.shapes["conv0.weights"] == (3, 3, 1, 1)
        assert net.stack_spatial == (6, 6)

    def test_param_layout_full_stack(self):
        spec = ConvNetSpec(
            layers=(
                ConvLayerSpec(filter_count=4, kernel_width=3, pool="max2"),
                ConvLayerSpec(filter_count=6, kernel_width=3),
            ),
            batch_norm=True,
            projection_dim=5,
        )
        model = build_model(spec, input_shape=(12, 10, 2))
        net = model.net
        # conv0 out 10x8 -> pool 5x4; conv1 out 3x2.
        assert net.stack_spatial == (3, 2)
        assert net.stack_channels == 6
        expect = (
            3 * 3 * 2 * 4 + 4          # conv0
            + 3 * 3 * 4 * 6 + 6        # conv1
            + 6 + 6                    # batch norm scale/shift
            + 6 * 5 + 5                # projection
            + 5 + 1                    # head
        )
        assert net.n_params == expect
        offsets = [net.slices[k] for k in net.shapes]
        assert offsets[0].start == 0 and offsets[-1].stop == net.n_params

    def test_kernel_exceeds_input(self):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=9),))
        with pytest.raises(ValueError):
            build_model(spec, input_shape=(8, 8, 1))

    def test_pool_needs_room(self):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3, pool="max2"),))
        with pytest.raises(ValueError):
            build_model(spec, input_shape=(3, 3, 1))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvLayerSpec(filter_count=1, kernel_width=4)

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError):
            ConvNetSpec(layers=())


class TestInit:
    def test_biases_zero_weights_bounded(self):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=3, kernel_width=3),))
        model = build_model(spec, input_shape=(8, 8, 1), seed=5)
        net = model.net
        assert np.array_equal(model.params[net.slices["conv0.bias"]], [0.0, 0.0, 0.0])
        assert model.params[net.slices["head.bias"]] == 0.0
        w = model.params[net.slices["conv0.weights"]]
        limit = math.sqrt(6.0 / (3 * 3 * 1 + 3))
        assert np.abs(w).max() <= limit
        assert np.abs(w).max() > 0

    def test_seed_controls_init(self):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=2, kernel_width=3),))
        a = build_model(spec, input_shape=(6, 6, 1), seed=1)
        b = build_model(spec, input_shape=(6, 6, 1), seed=1)
        c = build_model(spec, input_shape=(6, 6, 1), seed=2)
        assert np.array_equal(a.params, b.params)
        assert not np.array_equal(a.params, c.params)


class TestForward:
    def test_logit_one_hand_value(self):
        model = tiny_identity_model()
        assert forward(model, raster_of([[1.0, 0.0], [0.0, 0.0]])) == LOGISTIC_1

    def test_logit_two_hand_value(self):
        model = tiny_identity_model()
        assert forward(model, raster_of([[2.0, -5.0], [1.0, 0.0]])) == LOGISTIC_2

    def test_relu_floors_at_zero(self):
        model = tiny_identity_model()
        tr = trace_forward(model, raster_of([[-3.0, -1.0], [-2.0, -4.0]]))
        assert tr.logit == 0.0
        assert tr.probability == 0.5

    def test_pool_tie_count(self):
        model = tiny_identity_model()
        assert trace_forward(model, raster_of([[7.0, 7.0], [1.0, 0.0]])).pool_ties == 1
        assert trace_forward(model, raster_of([[7.0, 6.0], [1.0, 0.0]])).pool_ties == 0

    def test_head_bias_shifts_logit(self):
        model = tiny_identity_model()
        params = model.params.copy()
        params[model.net.slices["head.bias"]] = -1.0
        shifted = PropensityModel(spec=model.spec, input_shape=model.input_shape, params=params)
        tr = trace_forward(shifted, raster_of([[1.0, 0.0], [0.0, 0.0]]))
        assert tr.logit == 0.0

    def test_shape_mismatch_rejected(self):
        model = tiny_identity_model()
        with pytest.raises(ValueError):
            forward(model, raster_of(np.zeros((3, 2))))

    def test_predict_batch_matches_forward(self, rng):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=2, kernel_width=3, pool="max2"),))
        model = build_model(spec, input_shape=(8, 8, 1), seed=3)
        rasters = [raster_of(rng.normal(size=(8, 8))) for _ in range(7)]
        got = predict_batch(model, rasters, chunk=3)
        expect = np.array([forward(model, r) for r in rasters])
        assert np.array_equal(got, expect)
        assert np.array_equal(predict_batch(model, rasters, chunk=100), got)


def fd_param_gradient(model, rasters, treatments, step=1e-5):
    base = model.params.copy()
    grad = np.empty_like(base)
    for j in range(base.size):
        for sign in (1.0, -1.0):
            params = base.copy()
            params[j] += sign * step
            probe = PropensityModel(
                spec=model.spec,
                input_shape=model.input_shape,
                params=params,
                bn_mean=model.bn_mean,
                bn_var=model.bn_var,
            )
            loss, _ = loss_and_gradient(probe, rasters, treatments)
            if sign > 0:
                hi = loss
            else:
                lo = loss
        grad[j] = (hi - lo) / (2 * step)
    return grad


class TestGradients:
    def test_loss_hand_value_at_zero_logit(self):
        model = tiny_identity_model()
        rasters = [raster_of(np.full((2, 2), -1.0))]
        loss, grad = loss_and_gradient(model, rasters, [1.0])
        assert loss == LN2
        assert grad.shape == model.params.shape

    def test_param_gradient_matches_fd_plain(self, rng):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=2, kernel_width=3),))
        model = build_model(spec, input_shape=(6, 6, 1), seed=11)
        rasters = [raster_of(rng.normal(size=(6, 6))) for _ in range(4)]
        t = [1.0, 0.0, 1.0, 0.0]
        _, grad = loss_and_gradient(model, rasters, t)
        fd = fd_param_gradient(model, rasters, t)
        scale = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-4)
        assert np.max(np.abs(fd - grad) / scale) < 1e-6

    def test_param_gradient_matches_fd_full_stack(self, rng):
        spec = ConvNetSpec(
            layers=(ConvLayerSpec(filter_count=2, kernel_width=3, pool="max2"),),
            batch_norm=True,
            projection_dim=3,
        )
        model = build_model(spec, input_shape=(7, 7, 2), seed=13)
        rasters = [raster_of(rng.normal(size=(7, 7, 2))) for _ in range(3)]
        t = [0.0, 1.0, 1.0]
        _, grad = loss_and_gradient(model, rasters, t)
        fd = fd_param_gradient(model, rasters, t)
        scale = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-4)
        assert np.max(np.abs(fd - grad) / scale) < 1e-6

    def test_input_gradient_matches_fd(self, rng):
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=2, kernel_width=3),))
        model = build_model(spec, input_shape=(6, 6, 1), seed=7)
        x = rng.normal(size=(6, 6, 1))
        grad = gradient_wrt_input(model, Raster(x))
        step = 1e-6
        fd = np.empty_like(x)
        for pos in np.ndindex(x.shape):
            hi, lo = x.copy(), x.copy()
            hi[pos] += step
            lo[pos] -= step
            fd[pos] = (
                trace_forward(model, Raster(hi)).logit - trace_forward(model, Raster(lo)).logit
            ) / (2 * step)
        scale = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-4)
        assert np.max(np.abs(fd - grad) / scale) < 1e-5

    def test_input_gradient_hand_value(self):
        # Only the argmax pixel carries gradient; value is the conv weight.
        model = tiny_identity_model()
        params = model.params.copy()
        params[model.net.slices["conv0.weights"]] = 3.0
        scaled = PropensityModel(spec=model.spec, input_shape=model.input_shape, params=params)
        g = gradient_wrt_input(scaled, raster_of([[1.0, 2.0], [0.0, 4.0]]))
        assert np.array_equal(g[:, :, 0], [[0.0, 0.0], [0.0, 3.0]])


class TestOptimizer:
    def test_sgd_step(self):
        opt = _Optimizer("sgd", 2, np.float64)
        p = np.array([1.0, -1.0])
        opt.step(p, np.array([0.5, 0.5]), lr=0.1)
        assert np.array_equal(p, [0.95, -1.05])

    def test_nesterov_adam_first_step(self):
        # Frozen: bias-corrected momentum look-ahead from zero state.
        opt = _Optimizer("adam_nesterov", 1, np.float64)
        p = np.array([1.0])
        opt.step(p, np.array([1.0]), lr=0.1)
        assert p[0] == pytest.approx(0.8100000019, abs=1e-9)

    def test_schedule_cosine(self):
        cfg = TrainConfig(base_lr=1.0, epochs=4, lr_schedule="cosine")
        lrs = [_lr_at(cfg, e) for e in range(4)]
        assert lrs[0] == 1.0
        assert lrs[1] == pytest.approx(0.8535533905932737, abs=1e-15)
        assert lrs[2] == 0.5
        assert lrs[3] == pytest.approx(0.14644660940672627, abs=1e-15)

    def test_schedule_constant(self):
        cfg = TrainConfig(base_lr=0.3, epochs=10, lr_schedule="constant")
        assert [_lr_at(cfg, e) for e in (0, 5, 9)] == [0.3, 0.3, 0.3]


def toy_training_set(rng, n=24, size=8):
    """Scenes whose treatment depends on the brightest patch."""
    rasters = [raster_of(rng.normal(size=(size, size))) for _ in range(n)]
    scores = np.array([r.data.max() for r in rasters])
    t = (scores > np.median(scores)).astype(float)
    return rasters, t


class TestTraining:
    def test_seed_reproducibility(self, rng):
        rasters, t = toy_training_set(rng)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        cfg = TrainConfig(base_lr=0.05, epochs=4, batch_size=8, seed=42)
        a = train(rasters, t, spec, cfg)
        b = train(rasters, t, spec, cfg)
        assert np.array_equal(a.model.params, b.model.params)
        assert np.array_equal(a.loss_trace, b.loss_trace)
        c = train(rasters, t, spec, TrainConfig(base_lr=0.05, epochs=4, batch_size=8, seed=43))
        assert not np.array_equal(a.model.params, c.model.params)

    def test_loss_trace_shape_and_descent(self, rng):
        rasters, t = toy_training_set(rng, n=40)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        cfg = TrainConfig(base_lr=0.1, epochs=30, batch_size=10, seed=3)
        res = train(rasters, t, spec, cfg)
        assert res.loss_trace.shape == (30,)
        assert np.isfinite(res.loss_trace).all()
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_fast_path_matches_generic(self, rng, monkeypatch):
        rasters, t = toy_training_set(rng)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        cfg = TrainConfig(base_lr=0.05, epochs=5, batch_size=8, seed=9)
        fast = train(rasters, t, spec, cfg)
        import sceneipw.propensity as mod

        monkeypatch.setattr(mod, "_PATCH_BYTES_CAP", 0)
        slow = train(rasters, t, spec, cfg)
        assert np.max(np.abs(fast.model.params - slow.model.params)) < 1e-6
        assert np.max(np.abs(fast.loss_trace - slow.loss_trace)) < 1e-6

    def test_augmentation_changes_result(self, rng):
        rasters, t = toy_training_set(rng)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        plain = train(rasters, t, spec, TrainConfig(epochs=3, batch_size=8, seed=4))
        flipped = train(
            rasters, t, spec, TrainConfig(epochs=3, batch_size=8, seed=4, augment_flips=True)
        )
        assert not np.array_equal(plain.model.params, flipped.model.params)

    def test_batch_norm_stats_move(self, rng):
        rasters, t = toy_training_set(rng, n=16)
        spec = ConvNetSpec(
            layers=(ConvLayerSpec(filter_count=2, kernel_width=3),), batch_norm=True
        )
        res = train(rasters, t, spec, TrainConfig(epochs=3, batch_size=8, seed=1))
        assert res.model.bn_mean is not None
        assert not np.array_equal(res.model.bn_mean, np.zeros(2))
        assert (res.model.bn_var > 0).all()

    def test_divergence_reported_with_epoch(self, rng):
        rasters, t = toy_training_set(rng, n=12)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        cfg = TrainConfig(optimizer="sgd", base_lr=1e30, epochs=3, batch_size=6, seed=0)
        with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
            train(rasters, t, spec, cfg)
        assert info.value.epoch in (0, 1, 2)

    def test_bad_treatments(self, rng):
        rasters, _ = toy_training_set(rng, n=4)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        with pytest.raises(ValueError):
            train(rasters, [0.0, 0.5, 1.0, 0.0], spec, TrainConfig(epochs=1))

    def test_mixed_shapes_rejected(self, rng):
        rasters = [raster_of(rng.normal(size=(8, 8))), raster_of(rng.normal(size=(6, 6)))]
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        with pytest.raises(ValueError):
            train(rasters, [0.0, 1.0], spec, TrainConfig(epochs=1))


class TestCheckpoint:
    def round_trip(self, tmp_path, model):
        path = tmp_path / "net.ckpt"
        save_model(path, model)
        return path, load_model(path)

    def test_round_trip_plain(self, tmp_path, rng):
        rasters, t = toy_training_set(rng, n=8)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=2, kernel_width=3, pool="max2"),))
        model = train(rasters, t, spec, TrainConfig(epochs=2, batch_size=4, seed=6)).model
        path, back = self.round_trip(tmp_path, model)
        assert back.spec == model.spec
        assert back.input_shape == model.input_shape
        assert np.array_equal(back.params, model.params)
        # Saving the loaded model reproduces the file byte for byte.
        path2 = tmp_path / "again.ckpt"
        save_model(path2, back)
        assert path2.read_bytes() == path.read_bytes()

    def test_round_trip_batch_norm(self, tmp_path, rng):
        rasters, t = toy_training_set(rng, n=8)
        spec = ConvNetSpec(
            layers=(ConvLayerSpec(filter_count=2, kernel_width=3),),
            batch_norm=True,
            projection_dim=2,
        )
        model = train(rasters, t, spec, TrainConfig(epochs=2, batch_size=4, seed=6)).model
        _, back = self.round_trip(tmp_path, model)
        assert np.array_equal(back.bn_mean, model.bn_mean)
        assert np.array_equal(back.bn_var, model.bn_var)

    def test_predictions_survive_round_trip(self, tmp_path, rng):
        rasters, t = toy_training_set(rng, n=8)
        spec = ConvNetSpec(layers=(ConvLayerSpec(filter_count=1, kernel_width=3),))
        model = train(rasters, t, spec, TrainConfig(epochs=2, batch_size=4, seed=2)).model
        _, back = self.round_trip(tmp_path, model)
        assert np.array_equal(predict_batch(back, rasters), predict_batch(model, rasters))

    def test_bad_magic(self, tmp_path):
        model = tiny_identity_model()
        path = tmp_path / "net.ckpt"
        save_model(path, model)
        blob = path.read_bytes()
        path.write_bytes(b"XX" + blob[2:])
        with pytest.raises(CheckpointFormatError):
            load_model(path)

    def test_truncated_payload(self, tmp_path):
        model = tiny_identity_model()
        path = tmp_path / "net.ckpt"
        save_model(path, model)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(CheckpointFormatError):
            load_model(path)

    def test_missing_terminator(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(b"SCENEIPW-NET 1\ninput 2 2 1\n")
        with pytest.raises(CheckpointFormatError):
            load_model(path)

    def test_param_count_mismatch(self, tmp_path):
        model = tiny_identity_model()
        path = tmp_path / "net.ckpt"
        save_model(path, model)
        text = path.read_bytes()
        path.write_bytes(text.replace(b"params 4", b"params 5"))
        with pytest.raises(CheckpointFormatError):
            load_model(path)

    def test_non_finite_payload(self, tmp_path):
        model = tiny_identity_model()
        path = tmp_path / "net.ckpt"
        save_model(path, model)
        blob = bytearray(path.read_bytes())
        bad = np.array([np.nan], dtype="<f4").tobytes()
        blob[-4:] = bad
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_model(path)
