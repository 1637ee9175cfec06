import logging

import numpy as np
import pytest

from dksd import model as md
from dksd.autodiff import Tensor
from dksd.model import ConfigurationError, ModelConfig

from helpers import assert_grad_close, central_difference


def tiny_config(**overrides):
    base = dict(
        n_mels=4,
        k=2,
        dynamics_lstm_widths=(2,),
        dynamics_residual_widths=(2,),
        content_lstm_widths=(2,),
        content_residual_widths=(2,),
        decoder_residual_widths=(2,),
        decoder_lstm_widths=(2,),
        m_steps=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_defaults_satisfy_invariants(self):
        cfg = ModelConfig()
        assert cfg.dynamics_residual_widths[-1] == cfg.k
        assert cfg.content_residual_widths[-1] == cfg.k
        assert cfg.decoder_input_width == 2 * cfg.k == 128

    def test_mismatched_latent_width_rejected(self):
        with pytest.raises(ConfigurationError, match="k=2"):
            tiny_config(dynamics_residual_widths=(3,))

    def test_dict_roundtrip(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            ModelConfig.from_dict({"n_mels": 80, "n_melz": 81})


class TestInstanceNormalize:
    def test_constant_row_maps_to_zeros(self):
        out = md.instance_normalize(Tensor(np.array([[5.0, 5.0, 5.0]])), 1e-5)
        assert np.abs(out.data).max() < 1e-2  # 5/sqrt(eps-only variance) ~ 0

    def test_closed_form_z_score(self):
        out = md.instance_normalize(Tensor(np.array([[1.0, 2.0, 3.0]])), 1e-12)
        expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0)
        assert np.allclose(out.data[0], expected, atol=1e-4)

    def test_row_statistics_on_random_input(self):
        rng = np.random.default_rng(0)
        out = md.instance_normalize(Tensor(rng.normal(size=(16, 80))), 1e-5).data
        assert np.abs(out.mean(axis=1)).max() < 1e-6
        row_var = out.var(axis=1)
        assert row_var.min() > 1.0 - 1e-3
        assert row_var.max() <= 1.0 + 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(8, 16))
        base = md.instance_normalize(Tensor(h), 1e-5).data
        shifted = md.instance_normalize(Tensor(h + 3.7), 1e-5).data
        assert np.abs(base - shifted).max() < 1e-5

    @pytest.mark.parametrize("scale", [0.5, 2.0])
    def test_scale_invariance_up_to_epsilon(self, scale):
        rng = np.random.default_rng(2)
        h = rng.normal(size=(8, 16))
        base = md.instance_normalize(Tensor(h), 1e-5).data
        scaled = md.instance_normalize(Tensor(h * scale), 1e-5).data
        assert np.abs(base - scaled).max() < 1e-4

    def test_single_feature_rejected(self):
        with pytest.raises(ValueError, match="2 features"):
            md.instance_normalize(Tensor(np.ones((4, 1))), 1e-5)

    def test_batch_layout_matches_per_utterance(self):
        rng = np.random.default_rng(3)
        batch = rng.normal(size=(3, 6, 8))
        out3 = md.instance_normalize(Tensor(batch), 1e-5).data
        for b in range(3):
            out2 = md.instance_normalize(Tensor(batch[b]), 1e-5).data
            assert np.allclose(out3[b], out2)


class TestResidualBlock:
    def test_zero_weights_equal_widths_is_identity(self):
        x = Tensor(np.arange(12.0).reshape(1, 3, 4))
        w = Tensor(np.zeros((4, 4)))
        b = Tensor(np.zeros(4))
        out = md.residual_block(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_scalar_closed_form(self):
        x = Tensor(np.array([[[0.3]]]))
        w = Tensor(np.array([[1.7]]))
        b = Tensor(np.zeros(1))
        out = md.residual_block(x, w, b)
        assert out.data[0, 0, 0] == pytest.approx(0.3 + np.tanh(1.7 * 0.3))

    def test_width_change_without_projection_rejected(self):
        x = Tensor(np.ones((1, 2, 4)))
        with pytest.raises(ConfigurationError, match="projection"):
            md.residual_block(x, Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))

    def test_incompatible_weights_rejected(self):
        x = Tensor(np.ones((1, 2, 4)))
        with pytest.raises(ConfigurationError, match="width"):
            md.residual_block(x, Tensor(np.zeros((5, 4))), Tensor(np.zeros(4)))

    def test_gradient_wrt_weights(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 5, 3))
        w0 = rng.normal(size=(3, 2))
        skip0 = rng.normal(size=(3, 2))

        def loss_given_w(arr):
            out = md.residual_block(
                Tensor(x), Tensor(arr), Tensor(np.zeros(2)), Tensor(skip0)
            )
            return float((out.data**2).sum())

        w = Tensor(w0, requires_grad=True)
        out = md.residual_block(Tensor(x), w, Tensor(np.zeros(2)), Tensor(skip0))
        (out * out).sum().backward()
        assert_grad_close(w.grad, central_difference(loss_given_w, w0), rel=1e-4)


class TestBuildModel:
    def test_same_seed_same_parameters(self):
        cfg = tiny_config()
        a, _ = md.build_model(cfg, seed=7)
        b, _ = md.build_model(cfg, seed=7)
        assert a.names() == b.names()
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data)

    def test_different_seed_differs(self):
        cfg = tiny_config()
        a, _ = md.build_model(cfg, seed=7)
        b, _ = md.build_model(cfg, seed=8)
        assert any(
            not np.array_equal(a[n].data, b[n].data)
            for n in a.names()
            if not md.is_bias_name(n)
        )

    def test_tiny_count_matches_hand_sum(self):
        cfg = tiny_config()
        _, count = md.build_model(cfg, seed=0)
        # lstm(d_in, h) = 4h*d_in + 4h*h + 4h; residual adds a bias-free
        # projection when the width changes.
        dyn = (4 * 8 + 2 * 8 + 8) + (2 * 2 + 2)
        content = dyn
        dec = (4 * 2 + 2 + 4 * 2) + (2 * 8 + 2 * 8 + 8) + (2 * 4 + 4)
        assert count == dyn + content + dec == 194
        assert md.parameter_count_formula(cfg) == count

    def test_default_count_logged_against_reference(self, caplog):
        cfg = ModelConfig()
        with caplog.at_level(logging.INFO, logger="dksd.model"):
            params, count = md.build_model(cfg, seed=0)
        assert count == params.total_count() == md.parameter_count_formula(cfg)
        assert any(str(md.REFERENCE_PARAM_COUNT) in r.getMessage() for r in caplog.records)

    def test_forget_gate_bias_is_one(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=0)
        b = params["dynamics.lstm0.b"].data
        h = cfg.dynamics_lstm_widths[0]
        assert np.array_equal(b[h : 2 * h], np.ones(h))
        assert np.array_equal(b[:h], np.zeros(h))

    def test_bias_name_classifier(self):
        assert md.is_bias_name("decoder.out.b")
        assert not md.is_bias_name("decoder.out.w")
        assert not md.is_bias_name("dynamics.residual0.w_skip")


class TestEncoders:
    def test_dynamics_output_shape_default_config(self):
        cfg = ModelConfig()
        params, _ = md.build_model(cfg, seed=0)
        x = np.random.default_rng(5).normal(size=(32, 80)).astype(np.float32)
        z = md.encode_dynamics(x, params, cfg)
        assert z.shape == (32, 64)

    def test_content_output_shape_default_config(self):
        cfg = ModelConfig()
        params, _ = md.build_model(cfg, seed=0)
        x = np.random.default_rng(6).normal(size=(32, 80)).astype(np.float32)
        z = md.encode_content(x, params, cfg)
        assert z.shape == (32, 64)

    def test_encoders_deterministic(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=1)
        x = np.random.default_rng(7).normal(size=(10, 4)).astype(np.float32)
        a = md.encode_dynamics(x, params, cfg).data
        b = md.encode_dynamics(x, params, cfg).data
        assert np.array_equal(a, b)

    def test_wrong_feature_count_rejected(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=1)
        with pytest.raises(ValueError, match="features"):
            md.encode_dynamics(np.zeros((10, 5)), params, cfg)

    def test_batch_matches_loop(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=2)
        x = np.random.default_rng(8).normal(size=(3, 6, 4))
        batch = md.encode_dynamics(x, params, cfg).data
        for i in range(3):
            single = md.encode_dynamics(x[i], params, cfg).data
            assert np.allclose(batch[i], single, atol=1e-12)


class TestDecode:
    def test_output_shape(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=3)
        z = np.random.default_rng(9).normal(size=(7, 2)).astype(np.float32)
        out = md.decode(z, z + 1, params, cfg)
        assert out.shape == (7, 4)

    def test_constant_network_emits_final_bias(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=4)
        zeros = {name: np.zeros_like(t.data) for name, t in params.items()}
        zeros["decoder.out.b"] = np.array([1.0, -2.0, 3.0, 4.0], dtype=np.float32)
        params.load_values(zeros)
        z = np.random.default_rng(10).normal(size=(5, 2)).astype(np.float32)
        out = md.decode(z, z, params, cfg).data
        assert np.allclose(out, zeros["decoder.out.b"], atol=1e-7)

    def test_time_mismatch_rejected(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=4)
        with pytest.raises(ValueError, match="match"):
            md.decode(np.zeros((5, 2)), np.zeros((6, 2)), params, cfg)

    def test_full_forward_preserves_time_axis(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=5)
        for t in (3, 9):
            x = np.random.default_rng(t).normal(size=(t, 4)).astype(np.float32)
            _, _, x_hat = md.reconstruct(x, params, cfg)
            assert x_hat.shape == (t, 4)


class TestLosses:
    def test_perfect_reconstruction_is_zero(self):
        x = Tensor(np.random.default_rng(11).normal(size=(4, 3)))
        assert md.reconstruction_loss(x, x, 2).item() == 0.0

    def test_all_ones_residual(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.zeros((2, 3)))
        assert md.reconstruction_loss(a, b, 1).item() == pytest.approx(6.0)

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(3, 5, 4))
        b = rng.normal(size=(3, 5, 4))
        got = md.reconstruction_loss(Tensor(a), Tensor(b), 3).item()
        expected = ((a - b) ** 2).sum() / 3
        assert got == pytest.approx(expected, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            md.reconstruction_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), 1)

    def test_total_loss_weighted_sum(self):
        got = md.total_loss(2.0, 10.0, 0.2, (1.0, 0.1, 5.0))
        assert got.item() == pytest.approx(4.0)

    def test_total_loss_zero_weights(self):
        assert md.total_loss(2.0, 10.0, 0.2, (0, 0, 0)).item() == 0.0

    def test_total_loss_projects_to_reconstruction(self):
        assert md.total_loss(2.5, 10.0, 0.2, (1, 0, 0)).item() == pytest.approx(2.5)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            md.total_loss(1.0, 1.0, 1.0, (1, -0.1, 5))


class TestEndToEndGradients:
    def test_reconstruction_gradients_match_finite_differences(self):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=6, dtype=np.float64)
        rng = np.random.default_rng(13)
        x = rng.normal(size=(6, 4))

        def loss_value():
            _, _, x_hat = md.reconstruct(x, params, cfg)
            return md.reconstruction_loss(x_hat, Tensor(x), 1)

        params.zero_grad()
        loss_value().backward()

        for name in ("dynamics.lstm0.w_h", "content.residual0.w",
                     "decoder.residual0.w_skip", "decoder.out.b"):
            tensor = params[name]
            analytic = tensor.grad.copy()
            base = tensor.data.copy()

            def probe(arr, tensor=tensor, base=base):
                tensor.data = arr
                value = loss_value().item()
                tensor.data = base
                return value

            numeric = central_difference(probe, base)
            assert_grad_close(analytic, numeric, rel=1e-3, abs_floor=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=7)
        meta = {"epoch": 3, "val_total": 0.5}
        path = tmp_path / "model.ckpt"
        md.save_checkpoint(path, params, cfg, meta)
        loaded, cfg2, meta2 = md.load_checkpoint(path)
        assert cfg2 == cfg
        assert meta2 == meta
        assert loaded.names() == params.names()
        for name in params.names():
            assert np.array_equal(loaded[name].data, params[name].data)
        assert not path.with_suffix(".ckpt.tmp").exists()

    def test_magic_is_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(md.CheckpointError, match="magic"):
            md.load_checkpoint(path)

    def test_truncation_is_detected(self, tmp_path):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=8)
        path = tmp_path / "model.ckpt"
        md.save_checkpoint(path, params, cfg)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(md.CheckpointError):
            md.load_checkpoint(path)

    def test_header_layout(self, tmp_path):
        cfg = tiny_config()
        params, _ = md.build_model(cfg, seed=9)
        path = tmp_path / "model.ckpt"
        md.save_checkpoint(path, params, cfg)
        blob = path.read_bytes()
        assert blob[:8] == b"DKSDCKPT"
        assert int.from_bytes(blob[8:12], "little") == 1
        first_name_len = int.from_bytes(blob[12:16], "little")
        name = blob[16 : 16 + first_name_len].decode("utf-8")
        assert name == params.names()[0]
