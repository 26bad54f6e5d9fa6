import numpy as np
import pytest

from apckit import seq2seq as s2s
from apckit import tensor as T
from apckit.optim import Adam
from gradcheck import check_gradients


def tiny_model(rng, input_dim=8, vocab_texts=("ab", "ba"), dtype=np.float64, **kw):
    vocab = s2s.Vocabulary.from_texts(list(vocab_texts))
    cfg = s2s.Seq2SeqConfig(input_dim=input_dim, conv_channels=kw.get("channels", 4),
                            encoder_layers=kw.get("layers", 1),
                            encoder_hidden=kw.get("hidden", 4),
                            decoder_hidden=kw.get("hidden", 4),
                            attention_dim=4, embed_dim=4, seed=0)
    return s2s.Seq2SeqModel(cfg, vocab, rng, dtype), vocab


class TestVocabulary:
    def test_round_trip(self):
        vocab = s2s.Vocabulary.from_texts(["hello", "world"])
        ids = vocab.encode("hold")
        assert vocab.decode(ids) == "hold"

    def test_specials_first(self):
        vocab = s2s.Vocabulary.from_texts(["xy"])
        assert vocab.tokens[:2] == [s2s.SOS, s2s.EOS]


class TestEncoder:
    @pytest.mark.parametrize("n", [4, 5, 9, 16, 17])
    def test_downsample_length(self, n, rng):
        model, _ = tiny_model(rng)
        rep = rng.standard_normal((n, 8))
        with T.no_grad():
            enc = model.encode(rep)
        expected = -(-(-(-n // 2)) // 2)  # ceil(ceil(n/2)/2)
        assert enc.value.shape == (expected, 8)  # 2 directions x hidden 4

    def test_conv_downsample_shape(self, rng):
        w = T.DiffValue(rng.standard_normal((3 * 5, 7)))
        b = T.DiffValue(np.zeros(7))
        out = s2s.conv_downsample(T.constant(rng.standard_normal((11, 5))), w, b, 3)
        assert out.value.shape == (6, 7)


class TestForward:
    def test_attention_rows_are_probabilities(self, rng):
        model, vocab = tiny_model(rng)
        rep = rng.standard_normal((10, 8))
        with T.no_grad():
            _, attn = model.forward(rep, vocab.encode("ab"))
        for weights in attn:
            assert weights.value.shape[1] == 1
            assert abs(weights.value.sum() - 1.0) < 1e-6
            assert np.all(weights.value >= 0)

    def test_empty_target_rejected(self, rng):
        model, _ = tiny_model(rng)
        with pytest.raises(ValueError):
            model.forward(rng.standard_normal((6, 8)), [])

    def test_gradient_on_tiny_config(self, rng):
        model, vocab = tiny_model(rng)
        rep = rng.standard_normal((6, 8))
        targets = vocab.encode("aba")
        params = list(model.named_params().values())
        check_gradients(lambda: model.loss(rep, targets), params)

    def test_loss_decreases_when_overfitting(self, rng):
        model, vocab = tiny_model(rng, dtype=np.float32)
        data = [(rng.standard_normal((8, 8)).astype(np.float32), vocab.encode("ab")),
                (rng.standard_normal((8, 8)).astype(np.float32), vocab.encode("ba"))]
        adam = Adam(model.named_params(), lr=5e-3)
        losses = s2s.train_seq2seq(model, data, adam, steps=60, seed=0)
        assert losses[-1] < losses[0]


class TestBeamDecode:
    def greedy_reference(self, model, rep, max_len):
        """Independent greedy loop for the equivalence check."""
        eos = model.vocab.index[s2s.EOS]
        with T.no_grad():
            enc_states = model.encode(rep)
            enc_proj = T.matmul(enc_states, model.attn_enc)
            state = np.zeros((1, model.cfg.decoder_hidden),
                             dtype=model.out_w.value.dtype)
            prev = model.vocab.index[s2s.SOS]
            tokens, total = [], 0.0
            for _ in range(max_len):
                lp, state_dv, _ = model.decode_step(prev, state, enc_states, enc_proj)
                tok = int(lp.value[0].argmax())
                total += float(lp.value[0, tok])
                tokens.append(tok)
                state = state_dv.value
                prev = tok
                if tok == eos:
                    break
        return tokens, total

    def test_beam_one_equals_greedy(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            model, _ = tiny_model(r)
            rep = r.standard_normal((7, 8))
            hyp = s2s.beam_decode(model, rep, beam_size=1, max_len=12)
            tokens, total = self.greedy_reference(model, rep, 12)
            assert hyp.tokens == tokens
            assert hyp.log_prob == pytest.approx(total, abs=1e-9)

    def test_beam_scores_non_decreasing_on_trained_model(self, rng):
        model, vocab = tiny_model(rng, dtype=np.float32)
        data = [(rng.standard_normal((8, 8)).astype(np.float32), vocab.encode("ab")),
                (rng.standard_normal((8, 8)).astype(np.float32), vocab.encode("ba"))]
        adam = Adam(model.named_params(), lr=5e-3)
        s2s.train_seq2seq(model, data, adam, steps=150, seed=0)
        rep = data[0][0]
        scores = [s2s.beam_decode(model, rep, beam_size=b, max_len=10).log_prob
                  for b in (1, 2, 5)]
        assert scores[0] <= scores[1] + 1e-9
        assert scores[1] <= scores[2] + 1e-9

    def test_invalid_beam_size(self, rng):
        model, _ = tiny_model(rng)
        with pytest.raises(ValueError):
            s2s.beam_decode(model, rng.standard_normal((6, 8)), beam_size=0)
