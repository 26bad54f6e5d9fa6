import numpy as np
import pytest

from apckit import encoders as enc
from apckit import tensor as T
from apckit.errors import ConfigError
from gradcheck import check_gradients


def make_gru_layer(rng, in_dim, hidden, dtype=np.float64):
    return enc.GRULayerParams.create(rng, in_dim, hidden, dtype)


def zero_gru_layer(in_dim, hidden, dtype=np.float64):
    z = lambda shape: T.DiffValue(np.zeros(shape, dtype=dtype))
    return enc.GRULayerParams(
        w_r=z((in_dim, hidden)), w_z=z((in_dim, hidden)), w_c=z((in_dim, hidden)),
        u_r=z((hidden, hidden)), u_z=z((hidden, hidden)), u_c=z((hidden, hidden)),
        b_r=z(hidden), b_z=z(hidden), b_c=z(hidden))


class TestGruCell:
    def test_zero_weights_zero_state(self):
        p = zero_gru_layer(3, 4)
        out = enc.gru_cell(np.ones((1, 3)), np.zeros((1, 4)), p)
        np.testing.assert_array_equal(out.value, np.zeros((1, 4)))

    def test_zero_weights_halve_state(self, rng):
        p = zero_gru_layer(3, 4)
        v = rng.standard_normal((1, 4))
        out = enc.gru_cell(np.zeros((1, 3)), v, p)
        np.testing.assert_allclose(out.value, 0.5 * v, rtol=1e-12)

    def test_dim_mismatch(self, rng):
        p = make_gru_layer(rng, 3, 4)
        with pytest.raises(T.ShapeError):
            enc.gru_cell(np.zeros((1, 5)), np.zeros((1, 4)), p)

    def test_gradient_through_three_chained_cells(self, rng):
        p = make_gru_layer(rng, 3, 4)
        xs = rng.standard_normal((3, 2, 3))
        w = rng.standard_normal((2, 4))
        params = [getattr(p, k) for k in
                  ("w_r", "w_z", "w_c", "u_r", "u_z", "u_c", "b_r", "b_z", "b_c")]

        def build():
            h = np.zeros((2, 4))
            for t in range(3):
                h = enc.gru_cell(xs[t], h, p)
            return T.sum_(T.mul(h, w))

        check_gradients(build, params)

    def test_gradient_wrt_input(self, rng):
        p = make_gru_layer(rng, 3, 4)
        x = T.DiffValue(rng.standard_normal((2, 3)))
        w = rng.standard_normal((2, 4))
        check_gradients(
            lambda: T.sum_(T.mul(enc.gru_cell(x, np.zeros((2, 4)), p), w)), [x])


class TestRnnEncoder:
    def make(self, rng, layers=2, hidden=6, input_dim=5, dtype=np.float64):
        cfg = enc.RNNConfig(input_dim=input_dim, layers=layers, hidden=hidden)
        return enc.RNNEncoder(cfg, rng, dtype)

    def test_causality_bitwise(self, rng):
        model = self.make(rng)
        x = rng.standard_normal((10, 5))
        with T.no_grad():
            base = model.forward(x).predictions.value
        for k in (2, 5, 9):
            perturbed = x.copy()
            perturbed[k:] += rng.standard_normal(perturbed[k:].shape) * 3.0
            with T.no_grad():
                y = model.forward(perturbed).predictions.value
            assert np.array_equal(base[:k], y[:k])
            assert not np.array_equal(base[k:], y[k:])

    def test_single_layer_has_no_residual(self, rng):
        # with input_dim == hidden a buggy residual would be shape-legal;
        # compare against a manual unrolling without any skip connection
        cfg = enc.RNNConfig(input_dim=4, layers=1, hidden=4)
        model = enc.RNNEncoder(cfg, rng, np.float64)
        x = rng.standard_normal((6, 4))
        with T.no_grad():
            out = model.forward(x)
            manual = enc.run_gru_layer([r[None, :] for r in x], model.layers[0])
            stacked = np.concatenate([m.value for m in manual], axis=0)
        np.testing.assert_array_equal(out.layers[0].value, stacked)

    def test_output_shape(self, rng):
        model = self.make(rng)
        for n in (1, 4, 9):
            with T.no_grad():
                out = model.forward(rng.standard_normal((n, 5)))
            assert out.predictions.value.shape == (n, 5)
            assert out.last_layer.value.shape == (n, 6)

    def test_zeroed_layers_make_residual_stack_identity(self, rng):
        model = self.make(rng, layers=3)
        for layer in model.layers[1:]:
            for name in ("w_r", "w_z", "w_c", "u_r", "u_z", "u_c", "b_r", "b_z", "b_c"):
                getattr(layer, name).value[:] = 0.0
        x = rng.standard_normal((5, 5))
        with T.no_grad():
            out = model.forward(x)
        np.testing.assert_allclose(out.layers[-1].value, out.layers[0].value, rtol=1e-12)

    def test_param_count_formula(self, rng):
        cfg = enc.RNNConfig(input_dim=80, layers=4, hidden=512)
        model = enc.RNNEncoder(cfg, rng)
        assert model.param_count() == enc.rnn_param_count(cfg)

    def test_batched_matches_unbatched(self, rng):
        model = self.make(rng)
        x = rng.standard_normal((2, 7, 5))
        with T.no_grad():
            preds, _ = model.forward_steps(x)
            batched = np.stack([p.value for p in preds], axis=1)
            solo0 = model.forward(x[0]).predictions.value
            solo1 = model.forward(x[1]).predictions.value
        np.testing.assert_allclose(batched[0], solo0, atol=1e-12)
        np.testing.assert_allclose(batched[1], solo1, atol=1e-12)


class TestSinusoidalPE:
    def test_row_zero_alternates(self):
        pe = enc.sinusoidal_pe(3, 6, np.float64)
        np.testing.assert_array_equal(pe[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])

    def test_position_one_first_column(self):
        pe = enc.sinusoidal_pe(4, 8, np.float64)
        assert pe[1, 0] == pytest.approx(np.sin(1.0), abs=1e-12)
        assert abs(pe[1, 0] - 0.841471) < 1e-6

    def test_bounded(self):
        pe = enc.sinusoidal_pe(50, 16)
        assert np.all(pe <= 1.0) and np.all(pe >= -1.0)

    def test_odd_d_model_rejected(self):
        with pytest.raises(ConfigError):
            enc.sinusoidal_pe(4, 7)


class TestAttention:
    def make_block(self, rng, d_model=8, ffn=12, dtype=np.float64):
        return enc.TransformerBlockParams.create(rng, d_model, ffn, dtype)

    def test_mask_pattern(self, rng):
        p = self.make_block(rng)
        h = T.DiffValue(rng.standard_normal((3, 8)))
        _, w = enc.causal_self_attention(h, p, heads=2, return_weights=True)
        weights = w.value  # [heads x 3 x 3]
        assert np.all(weights[:, 0, 1:] == 0.0)
        assert np.all(weights[:, 1, 2:] == 0.0)
        assert np.all(weights[:, np.tril_indices(3)[0], np.tril_indices(3)[1]] > 0.0)

    def test_singleton_attends_to_itself(self, rng):
        p = self.make_block(rng)
        h = T.DiffValue(rng.standard_normal((1, 8)))
        _, w = enc.causal_self_attention(h, p, heads=2, return_weights=True)
        np.testing.assert_array_equal(w.value, np.ones((2, 1, 1)))

    def test_attention_causality_bitwise(self, rng):
        p = self.make_block(rng)
        base = rng.standard_normal((6, 8))
        with T.no_grad():
            ref = enc.causal_self_attention(T.constant(base), p, heads=2).value
        k = 3
        pert = base.copy()
        pert[k:] = rng.standard_normal((3, 8)) * 10
        with T.no_grad():
            out = enc.causal_self_attention(T.constant(pert), p, heads=2).value
        assert np.array_equal(ref[:k], out[:k])


class TestTransformerBlock:
    def test_shape_preserved(self, rng):
        p = enc.TransformerBlockParams.create(rng, 8, 12, np.float64)
        h = T.DiffValue(rng.standard_normal((5, 8)))
        out = enc.transformer_block(h, p, heads=2)
        assert out.value.shape == (5, 8)

    def test_block_causality_bitwise(self, rng):
        p = enc.TransformerBlockParams.create(rng, 8, 12, np.float64)
        base = rng.standard_normal((6, 8))
        with T.no_grad():
            ref = enc.transformer_block(T.constant(base), p, heads=2).value
            pert = base.copy()
            pert[4:] *= -7.0
            out = enc.transformer_block(T.constant(pert), p, heads=2).value
        assert np.array_equal(ref[:4], out[:4])

    def test_gradient_on_tiny_config(self, rng):
        p = enc.TransformerBlockParams.create(rng, 16, 8, np.float64)
        x = T.DiffValue(rng.standard_normal((4, 16)))
        w = rng.standard_normal((4, 16))
        params = [x] + [getattr(p, f.name) for f in p.__dataclass_fields__.values()]

        def build():
            return T.sum_(T.mul(enc.transformer_block(x, p, heads=4), w))

        check_gradients(build, params)


class TestTransformerEncoder:
    def make(self, rng, blocks=2, d_model=8, input_dim=5, dtype=np.float64):
        cfg = enc.TransformerConfig(input_dim=input_dim, blocks=blocks,
                                    d_model=d_model, heads=2, ffn_hidden=12)
        return enc.TransformerEncoder(cfg, rng, dtype)

    def test_weight_tying_shares_storage(self, rng):
        model = self.make(rng)
        assert np.shares_memory(model.w_out, model.w_in.value)
        np.testing.assert_array_equal(model.w_out, model.w_in.value.T)
        # stays tied after an in-place update, as the optimizer performs
        model.w_in.value += 1.0
        np.testing.assert_array_equal(model.w_out, model.w_in.value.T)

    def test_end_to_end_causality_bitwise(self, rng):
        model = self.make(rng)
        x = rng.standard_normal((8, 5))
        with T.no_grad():
            base = model.forward(x).predictions.value
        for k in (1, 4, 7):
            pert = x.copy()
            pert[k:] += 5.0
            with T.no_grad():
                y = model.forward(pert).predictions.value
            assert np.array_equal(base[:k], y[:k])

    def test_zero_input_gives_positional_encoding(self, rng):
        model = self.make(rng)
        pe = enc.sinusoidal_pe(6, 8, np.float64)
        h0 = T.add(T.matmul(np.zeros((6, 5)), model.w_in), pe)
        np.testing.assert_array_equal(h0.value, pe)

    def test_zero_blocks_is_tied_linear_map(self, rng):
        model = self.make(rng, blocks=0)
        x = rng.standard_normal((4, 5))
        with T.no_grad():
            y = model.forward(x).predictions.value
        pe = enc.sinusoidal_pe(4, 8, np.float64)
        expected = (x @ model.w_in.value + pe) @ model.w_in.value.T
        np.testing.assert_allclose(y, expected, rtol=1e-12)

    def test_param_count_formula(self, rng):
        cfg = enc.TransformerConfig(input_dim=80, blocks=4, d_model=512,
                                    heads=8, ffn_hidden=2048)
        model = enc.TransformerEncoder(cfg, rng)
        assert model.param_count() == enc.transformer_param_count(cfg)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            enc.TransformerConfig(d_model=10, heads=3)
