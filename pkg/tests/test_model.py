import numpy as np
import pytest

from xnet.errors import ConfigError, DimensionError, FormatError, StateError
from xnet.model import (
    ArchConfig,
    ModelParams,
    XNet,
    build_xnet,
    layer_plan,
    load_checkpoint,
    save_checkpoint,
)

from conftest import max_rel_error

DESK = ArchConfig(input_size=(64, 64), base_filters=8)
MINI = ArchConfig(input_size=(8, 8), base_filters=2)


def count_params_by_walking(f0, f1, f2, num_classes):
    """Independent shape walk over the architecture."""
    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    total, cin = 0, 1
    for _ in range(2):
        total += conv(cin, f0) + conv(f0, f0)
        total += conv(f0, f1) + conv(f1, f1)
        total += conv(f1, f2) + conv(f2, f2)
        total += conv(f2 + f1, f1) + conv(f1, f1)
        total += conv(f1 + f0, f0) + conv(f0, f0)
        cin = f0
    return total + conv(f0, num_classes, k=1)


class TestArchConfig:
    def test_indivisible_input_rejected(self):
        with pytest.raises(ConfigError, match="divisible by 4"):
            ArchConfig(input_size=(50, 48))

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig(input_size=(64, 64), num_classes=1)

    def test_kv_round_trip(self):
        cfg = ArchConfig(input_size=(64, 64), base_filters=8, l2_lambda=1e-3)
        again = ArchConfig.from_kv(cfg.to_kv())
        assert again == ArchConfig(
            input_size=(64, 64), base_filters=8, l2_lambda=1e-3,
            filters_per_stage=(8, 16, 32),
        )
        assert again.fingerprint() == cfg.fingerprint()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            ArchConfig.from_kv({"dropout": "0.5"})

    def test_fingerprint_distinguishes_configs(self):
        a = ArchConfig(input_size=(64, 64), base_filters=8)
        b = ArchConfig(input_size=(64, 64), base_filters=16)
        assert a.fingerprint() != b.fingerprint()


class TestBuild:
    def test_same_config_and_seed_is_bit_identical(self):
        p1 = build_xnet(DESK, seed=7)
        p2 = build_xnet(DESK, seed=7)
        for a, b in zip(p1.layers, p2.layers):
            np.testing.assert_array_equal(a.kernel.data, b.kernel.data)
            np.testing.assert_array_equal(a.bias.data, b.bias.data)

    def test_different_seeds_differ(self):
        p1 = build_xnet(DESK, seed=7)
        p2 = build_xnet(DESK, seed=8)
        assert not np.array_equal(p1.layers[0].kernel.data, p2.layers[0].kernel.data)

    def test_parameter_count_matches_shape_walk(self):
        params = build_xnet(DESK, seed=0)
        assert params.num_parameters() == count_params_by_walking(8, 16, 32, 3)
        assert params.num_parameters() == 59747  # frozen from the walk above

    def test_layer_plan_shapes_consistent(self):
        params = build_xnet(MINI, seed=1)
        params.validate_shapes()
        for (lid, cout, cin, k), pl in zip(layer_plan(MINI), params.layers):
            assert pl.kernel.data.shape == (cout, cin, k, k)

    def test_biases_start_at_zero(self):
        params = build_xnet(MINI, seed=3)
        for pl in params.layers:
            assert not pl.bias.data.any()


class TestForward:
    def test_output_is_probability_map(self, rng):
        net = XNet(build_xnet(MINI, seed=5))
        out = net.forward(rng.normal(size=(2, 1, 8, 8)))
        assert out.data.shape == (2, 3, 8, 8)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("size", [64, 200])
    def test_output_spatial_dims_equal_input(self, rng, size):
        cfg = ArchConfig(input_size=(size, size), base_filters=2)
        net = XNet(build_xnet(cfg, seed=2))
        out = net.forward(rng.normal(size=(1, 1, size, size)))
        assert out.data.shape == (1, 3, size, size)

    def test_zero_input_zero_head_gives_uniform(self):
        params = build_xnet(MINI, seed=4)
        head = params["head"]
        head.kernel.data[:] = 0.0
        head.bias.data[:] = 0.0
        out = XNet(params).forward(np.zeros((1, 1, 8, 8)))
        np.testing.assert_allclose(out.data, 1 / 3, atol=1e-15)

    def test_forward_is_deterministic(self, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        a = XNet(build_xnet(MINI, seed=9)).forward(x)
        b = XNet(build_xnet(MINI, seed=9)).forward(x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_wrong_spatial_size_rejected(self, rng):
        net = XNet(build_xnet(MINI, seed=0))
        with pytest.raises(DimensionError, match="spatial"):
            net.forward(rng.normal(size=(1, 1, 12, 12)))

    def test_wrong_channel_count_rejected(self, rng):
        net = XNet(build_xnet(MINI, seed=0))
        with pytest.raises(DimensionError, match="channel"):
            net.forward(rng.normal(size=(1, 2, 8, 8)))

    def test_skip_tensors_feed_the_decoder_concats(self, rng):
        net = XNet(build_xnet(MINI, seed=6))
        probs = net.forward(rng.normal(size=(1, 1, 8, 8)), train_mode=True)
        graph = probs._toposort()
        for key in ("m1.skip0", "m1.skip1", "m2.skip0", "m2.skip1"):
            skip = net.activations[key]
            concats = [
                node for node in graph
                if len(node._parents) == 2 and node._parents[1] is skip
            ]
            assert concats, f"{key} never concatenated"
            np.testing.assert_array_equal(
                concats[0].data[:, -skip.data.shape[1]:], skip.data
            )


def inference_objective(params, batch, labels, lam):
    """Loss recomputed without the autodiff path (for finite differences)."""
    probs = XNet(params).forward(batch)
    picked = np.take_along_axis(probs.data, labels[:, None], axis=1)
    ce = -np.log(np.clip(picked, 1e-12, 1.0)).mean()
    reg = lam * sum(float((pl.kernel.data ** 2).sum()) for pl in params.layers)
    return float(ce + reg)


class TestBackward:
    def test_backward_without_forward_raises(self):
        net = XNet(build_xnet(MINI, seed=0))
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 8, 8), dtype=int))

    def test_sampled_gradients_match_finite_differences(self, rng):
        lam = 5e-4
        params = build_xnet(MINI, seed=11)
        # Freshly built biases are exactly zero, which parks them on the
        # rectifier kink wherever an input patch is entirely dead; central
        # differences straddle two linear regimes there.  Jitter to a
        # generic point where the loss is differentiable.
        for pl in params.layers:
            pl.bias.data += rng.normal(scale=0.05, size=pl.bias.data.shape)
        batch = rng.normal(size=(2, 1, 8, 8))
        labels = rng.integers(0, 3, size=(2, 8, 8))
        net = XNet(params)
        net.forward(batch, train_mode=True)
        grads = net.backward(labels, l2_lambda=lam)

        eps = 1e-6
        for pl in params.layers:
            dk, db = grads[pl.layer_id]
            for tensor, grad in ((pl.kernel, dk), (pl.bias, db)):
                flat = tensor.data.reshape(-1)
                for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                    orig = flat[idx]
                    flat[idx] = orig + eps
                    fp = inference_objective(params, batch, labels, lam)
                    flat[idx] = orig - eps
                    fm = inference_objective(params, batch, labels, lam)
                    flat[idx] = orig
                    num = (fp - fm) / (2 * eps)
                    denom = max(abs(num), np.abs(grad).max(), 1e-12)
                    assert abs(grad.reshape(-1)[idx] - num) / denom < 1e-4, pl.layer_id

    def test_duplicated_sample_leaves_gradient_unchanged(self, rng):
        params = build_xnet(MINI, seed=12)
        x = rng.normal(size=(1, 1, 8, 8))
        labels = rng.integers(0, 3, size=(1, 8, 8))

        net = XNet(params)
        net.forward(x, train_mode=True)
        g1 = net.backward(labels)

        net.forward(np.concatenate([x, x]), train_mode=True)
        g2 = net.backward(np.concatenate([labels, labels]))

        for (_, dk1, db1), (_, dk2, db2) in zip(g1.layers, g2.layers):
            np.testing.assert_allclose(dk1, dk2, atol=1e-12)
            np.testing.assert_allclose(db1, db2, atol=1e-12)

    def test_loss_recorded(self, rng):
        net = XNet(build_xnet(MINI, seed=13))
        net.forward(rng.normal(size=(1, 1, 8, 8)), train_mode=True)
        net.backward(rng.integers(0, 3, size=(1, 8, 8)))
        assert net.last_loss is not None and np.isfinite(net.last_loss)


class TestCheckpoint:
    def test_round_trip_is_exact_at_float32(self, tmp_path):
        params = build_xnet(MINI, seed=21, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path, dtype=np.float32)
        assert loaded.config == params.config
        for a, b in zip(params.layers, loaded.layers):
            assert a.layer_id == b.layer_id
            np.testing.assert_array_equal(a.kernel.data, b.kernel.data)
            np.testing.assert_array_equal(a.bias.data, b.bias.data)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        params = build_xnet(MINI, seed=22)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        other = ArchConfig(input_size=(8, 8), base_filters=4)
        with pytest.raises(ConfigError, match="fingerprint"):
            load_checkpoint(path, expect_config=other)

    def test_matching_expect_config_accepted(self, tmp_path):
        params = build_xnet(MINI, seed=23)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        load_checkpoint(path, expect_config=MINI)

    def test_truncated_file_reports_offset(self, tmp_path):
        params = build_xnet(MINI, seed=24)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="byte"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_save_quantizes_to_float32(self, tmp_path):
        params = build_xnet(MINI, seed=25, dtype=np.float64)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path, dtype=np.float64)
        for a, b in zip(params.layers, loaded.layers):
            np.testing.assert_array_equal(
                a.kernel.data.astype(np.float32), b.kernel.data.astype(np.float32)
            )
