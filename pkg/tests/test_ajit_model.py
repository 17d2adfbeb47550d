from dataclasses import replace

import numpy as np
import pytest

from tensor_core import Graph, Tensor, backward, finite_difference_grad
from ajit_model import (AjitModel, ModelConfig, ModelConfigError, ModelError, embed_tokens,
                        get_2d_sincos_pos_embed, global_condition, model_forward, patchify,
                        timestep_features, timestep_frequencies, unpatchify)
from rectified_flow import CouplingSample, LossKind, TargetKind, training_loss_node

from conftest import random_params


def zeroed(params, prefixes):
    return {name: Tensor(np.zeros(p.shape), name=name) if name.startswith(prefixes) else p
            for name, p in params.items()}


class TestPatchify:
    def test_index_bookkeeping(self):
        field_values = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        patches = patchify(field_values, 2)
        assert patches.shape == (4, 4)
        assert patches[0].tolist() == [0, 1, 4, 5]
        assert patches[1].tolist() == [2, 3, 6, 7]

    def test_large_patch_token_count(self):
        patches = patchify(np.zeros((2, 256, 128)), 16)
        assert patches.shape == (128, 2 * 16 * 16)

    def test_roundtrip_random_fields(self):
        rng = np.random.default_rng(0)
        combos = [(1, 4, 4, 2), (2, 8, 12, 2), (3, 16, 8, 4), (2, 32, 16, 8), (2, 256, 128, 16)]
        for trial in range(100):
            channels, height, width, p = combos[trial % len(combos)]
            field_values = rng.standard_normal((channels, height, width))
            assert np.array_equal(unpatchify(patchify(field_values, p), p, height, width), field_values)

    def test_zero_matrix(self):
        assert np.all(unpatchify(np.zeros((4, 8)), 2, 4, 4) == 0)

    def test_single_entry_location(self):
        patches = np.zeros((24, 8))
        patches[7, 6] = 1.0
        field_values = unpatchify(patches, 2, 8, 12)
        assert field_values.shape == (2, 8, 12)
        assert list(zip(*np.nonzero(field_values))) == [(1, 3, 2)]

    def test_indivisible_patch(self):
        with pytest.raises(ModelConfigError):
            patchify(np.zeros((1, 6, 4)), 4)


class TestModelConfig:
    def test_matched_token_pairs(self):
        small = ModelConfig(height=64, width=32, patch_size=4)
        large = ModelConfig(height=256, width=128, patch_size=16)
        assert small.num_tokens == large.num_tokens == 128
        assert large.patch_dim == 16 * small.patch_dim

        desk_small = ModelConfig(height=32, width=16, patch_size=2)
        desk_large = ModelConfig(height=128, width=64, patch_size=8)
        assert desk_small.num_tokens == desk_large.num_tokens == 128
        assert desk_large.patch_dim // desk_small.patch_dim == 16

    def test_validation(self):
        assert ModelConfig().validate() == []
        assert ModelConfig(patch_size=3).validate()
        assert ModelConfig(hidden_size=190).validate()
        with pytest.raises(ModelConfigError):
            ModelConfig(patch_size=2, bottleneck=8).check()
        ModelConfig(height=128, width=64, patch_size=8, bottleneck=64).check()
        with pytest.raises(ModelConfigError):
            ModelConfig(height=128, width=64, patch_size=8, bottleneck=128).check()

    def test_dict_roundtrip(self):
        config = ModelConfig(bottleneck=4)
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestParameters:
    def test_initialization(self, tiny_model_config):
        params = AjitModel.init_params(tiny_model_config, seed=0)
        for name, p in params.items():
            if name.endswith(".b") or ".adaln." in name or name.startswith("final."):
                assert np.all(p.data == 0), name
            else:
                assert np.all(np.abs(p.data) <= 2 * tiny_model_config.init_std), name
                assert np.any(p.data != 0), name

    def test_history_embedder_width(self, tiny_model_config):
        shapes = AjitModel.param_shapes(tiny_model_config)
        k, dim, d = tiny_model_config.context_length, tiny_model_config.patch_dim, tiny_model_config.hidden_size
        assert shapes["hist_embed.w"] == (k * dim, d)
        assert shapes["z_embed.w"] == (dim, d)

    def test_bottleneck_pairs(self, tiny_model_config):
        shapes = AjitModel.param_shapes(replace(tiny_model_config, bottleneck=3))
        assert shapes["z_embed.down.w"] == (8, 3)
        assert shapes["z_embed.up.w"] == (3, 8)
        assert "z_embed.w" not in shapes

    def test_seeded_init_is_deterministic(self, tiny_model_config):
        a = AjitModel.init_params(tiny_model_config, seed=4)
        b = AjitModel.init_params(tiny_model_config, seed=4)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)

    def test_wrong_param_shapes_rejected(self, tiny_model_config):
        params = AjitModel.init_params(tiny_model_config)
        params["final.linear.b"] = Tensor(np.zeros(3))
        with pytest.raises(ModelConfigError):
            AjitModel(tiny_model_config, params=params)


class TestEmbeddings:
    def test_history_isolation(self, tiny_model_config):
        cfg = tiny_model_config
        params = zeroed(random_params(cfg, 1), ("hist_embed",))
        rng = np.random.default_rng(0)
        z = rng.standard_normal((2, 4, 4))
        history = rng.standard_normal((4, 4, 4))
        tokens = embed_tokens(z, history, params, np.zeros((cfg.num_tokens, cfg.hidden_size)), cfg)
        expected = patchify(z, 2) @ params["z_embed.w"].data + params["z_embed.b"].data
        np.testing.assert_allclose(tokens, expected, atol=1e-12)

    def test_zero_inputs_give_position_embedding(self, tiny_model_config):
        cfg = tiny_model_config
        params = zeroed(random_params(cfg, 2), ("z_embed.b", "hist_embed.b"))
        pos = get_2d_sincos_pos_embed(cfg.hidden_size, cfg.grid_h, cfg.grid_w)
        tokens = embed_tokens(np.zeros((2, 4, 4)), np.zeros((4, 4, 4)), params, pos, cfg)
        np.testing.assert_allclose(tokens, pos, atol=1e-15)

    def test_position_embedding_layout(self):
        pos = get_2d_sincos_pos_embed(8, 2, 3)
        assert pos.shape == (6, 8)
        assert np.allclose(pos[0], [0, 0, 1, 1, 0, 0, 1, 1])

    def test_theta_isolation(self, tiny_model_config):
        cfg = tiny_model_config
        params = zeroed(random_params(cfg, 3), ("theta_embed",))
        features = timestep_features(0.37, cfg.frequency_embedding_size)
        hidden = features @ params["t_embed.fc1.w"].data + params["t_embed.fc1.b"].data
        hidden = hidden / (1.0 + np.exp(-hidden))
        expected = hidden @ params["t_embed.fc2.w"].data + params["t_embed.fc2.b"].data
        np.testing.assert_allclose(global_condition(0.37, 0.9, params, cfg), expected, atol=1e-12)
        np.testing.assert_allclose(global_condition(0.37, 0.1, params, cfg), expected, atol=1e-12)

    def test_bottleneck_limits_embedding_rank(self, tiny_model_config):
        rng = np.random.default_rng(8)
        pos = np.zeros((tiny_model_config.num_tokens, tiny_model_config.hidden_size))
        history = np.zeros((4, 4, 4))
        for bottleneck, rank in [(3, 3), (None, 8)]:
            cfg = replace(tiny_model_config, bottleneck=bottleneck)
            params = random_params(cfg, 7)
            base = embed_tokens(np.zeros((2, 4, 4)), history, params, pos, cfg)
            responses = np.concatenate([embed_tokens(rng.standard_normal((2, 4, 4)), history, params, pos, cfg) - base
                                        for _ in range(10)])
            assert np.linalg.matrix_rank(responses, tol=1e-9) == rank

        cfg = replace(tiny_model_config, bottleneck=3)
        params = random_params(cfg, 7)
        composite = params["z_embed.down.w"].data @ params["z_embed.up.w"].data
        assert composite.shape == (cfg.patch_dim, cfg.hidden_size)
        assert np.linalg.matrix_rank(composite) <= 3

    def test_theta_shift_is_independent_of_tau(self, tiny_model_config):
        cfg = tiny_model_config
        params = random_params(cfg, 9)
        shifts = [global_condition(tau, 0.8, params, cfg) - global_condition(tau, 0.2, params, cfg)
                  for tau in (0.0, 0.3, 0.7, 1.0)]
        assert not np.allclose(shifts[0], 0.0)
        for shift in shifts[1:]:
            np.testing.assert_allclose(shift, shifts[0], atol=1e-12)

    def test_condition_is_lipschitz_in_tau(self, tiny_model_config):
        cfg = tiny_model_config
        params = random_params(cfg, 10)
        # |d features/dτ| = 1000·|ω|; silu 的导数不超过 1.1
        feature_slope = 1000.0 * np.linalg.norm(timestep_frequencies(cfg.frequency_embedding_size))
        bound = (np.linalg.norm(params["t_embed.fc2.w"].data, 2) * 1.1
                 * np.linalg.norm(params["t_embed.fc1.w"].data, 2) * feature_slope)
        step = 1e-6
        for tau in (0.0, 0.25, 0.5, 0.999):
            change = np.linalg.norm(global_condition(tau + step, 0.4, params, cfg)
                                    - global_condition(tau, 0.4, params, cfg))
            assert 0.0 < change <= bound * step

    def test_tau_out_of_range(self, tiny_model_config):
        params = AjitModel.init_params(tiny_model_config)
        with pytest.raises(ModelError):
            global_condition(1.5, 0.0, params, tiny_model_config)


class TestForward:
    def test_output_shape_at_128_tokens(self):
        cfg = ModelConfig(channels=2, height=64, width=32, patch_size=4, hidden_size=8, depth=1,
                          n_heads=2, frequency_embedding_size=8)
        assert cfg.num_tokens == 128
        rng = np.random.default_rng(0)
        out = model_forward(rng.standard_normal((2, 64, 32)), 0.5, rng.standard_normal((2, 2, 64, 32)),
                            0.3, AjitModel.init_params(cfg), cfg)
        assert out.shape == (2, 64, 32)

    def test_dead_network_returns_head_bias(self, tiny_model_config):
        cfg = tiny_model_config
        params = {name: Tensor(np.zeros(p.shape), name=name) for name, p in AjitModel.init_params(cfg).items()}
        bias = np.random.default_rng(1).standard_normal(cfg.patch_dim)
        params["final.linear.b"] = Tensor(bias, name="final.linear.b")
        rng = np.random.default_rng(2)
        out = model_forward(rng.standard_normal((2, 4, 4)), 0.2, rng.standard_normal((2, 2, 4, 4)), 0.5, params, cfg)
        expected = unpatchify(np.tile(bias, (cfg.num_tokens, 1)), cfg.patch_size, cfg.height, cfg.width)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_history_order_matters(self, tiny_model_config):
        model = AjitModel(tiny_model_config, params=random_params(tiny_model_config, 5))
        rng = np.random.default_rng(3)
        z = rng.standard_normal((2, 4, 4))
        context = rng.standard_normal((2, 2, 4, 4))
        out = model.forward(z, 0.4, context, 0.2)
        swapped = model.forward(z, 0.4, context[::-1], 0.2)
        assert not np.allclose(out, swapped)

    def test_zero_modulation_ignores_condition(self, tiny_model_config):
        cfg = tiny_model_config
        params = zeroed(random_params(cfg, 6), ("blocks.0.adaln", "final.adaln"))
        model = AjitModel(cfg, params=params)
        rng = np.random.default_rng(4)
        z = rng.standard_normal((2, 4, 4))
        context = rng.standard_normal((2, 2, 4, 4))
        a = model.forward(z, 0.1, context, 0.2)
        b = model.forward(z, 0.9, context, 0.7)
        np.testing.assert_allclose(a, b, atol=1e-14)
        assert np.any(a != 0)

    def test_inference_graph_has_no_backward(self, tiny_model_config):
        model = AjitModel(tiny_model_config)
        graph = Graph()
        rng = np.random.default_rng(5)
        model.build_forward(graph, rng.standard_normal((2, 4, 4)), 0.5, rng.standard_normal((2, 2, 4, 4)),
                            0.0, trainable=False)
        assert all(node.backward_fn is None for node in graph.nodes)

    def test_shape_mismatch(self, tiny_model_config):
        model = AjitModel(tiny_model_config)
        with pytest.raises(ModelError, match="shape mismatch"):
            model.forward(np.zeros((2, 4, 4)), 0.5, np.zeros((3, 2, 4, 4)), 0.0)

    @pytest.mark.parametrize("bottleneck", [None, 3])
    def test_loss_gradients_match_finite_differences(self, tiny_model_config, bottleneck):
        cfg = replace(tiny_model_config, bottleneck=bottleneck)
        base = random_params(cfg, 7)
        model = AjitModel(cfg, params=base)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 4))
        context = rng.standard_normal((2, 2, 4, 4))
        sample = CouplingSample.draw(x, 0.4, rng)

        def loss_value(params):
            graph = Graph()
            y = model.build_forward(graph, sample.z, sample.tau, context, 0.3, params=params)
            root = training_loss_node(graph, y, TargetKind.X, LossKind.V_LOSS, sample)
            return graph, root

        graph, root = loss_value(base)
        grads = backward(graph, root)
        assert set(grads) == set(base)

        for name in base:
            def f(values, name=name):
                params = dict(base)
                params[name] = Tensor(values, name=name)
                g, r = loss_value(params)
                return float(g.value(r))

            numeric = finite_difference_grad(f, base[name].data, h=1e-6).data
            analytic = grads[name].data
            error = np.max(np.abs(analytic - numeric))
            assert error <= 1e-3 * max(np.max(np.abs(numeric)), 1e-3), name
