import numpy as np
import pytest

from emocap import autodiff as ad
from emocap import qformer as qf
from emocap.audiofeat import SpeechFeatures


def small_cfg(**kw):
    base = dict(n_q=4, d_q=8, d_k=8, d_v=8, n_layers=2, ff_width=16,
                d_in=6, d_dec=8, vocab_size=12)
    base.update(kw)
    return qf.QFormerConfig(**base)


def np_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def oracle_self_attention(x, wq, wk, wv, d_k):
    # straight-line evaluation, independent of the autodiff graph
    return np_softmax_rows((x @ wq) @ (x @ wk).T / np.sqrt(d_k)) @ (x @ wv)


def oracle_cross_attention(a, s, wq, wk, wv, d_k):
    return np_softmax_rows((a @ wq) @ (s @ wk).T / np.sqrt(d_k)) @ (s @ wv)


class TestSelfAttend:
    def test_single_row_equals_value_projection(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 8))
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        out = qf.self_attend(ad.const(x), ad.const(wq), ad.const(wk), ad.const(wv), 8)
        assert np.allclose(out.value, x @ wv, atol=1e-12)

    def test_identical_rows_give_identical_outputs(self):
        rng = np.random.default_rng(1)
        row = rng.normal(size=8)
        x = np.stack([row, row])
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        out = qf.self_attend(ad.const(x), ad.const(wq), ad.const(wk), ad.const(wv), 8).value
        assert np.allclose(out[0], out[1], atol=1e-12)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 8))
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        out = qf.self_attend(ad.const(x), ad.const(wq), ad.const(wk), ad.const(wv), 8).value
        assert np.max(np.abs(out - oracle_self_attention(x, wq, wk, wv, 8))) < 1e-10


class TestCrossAttend:
    def test_single_frame(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 8))
        s = rng.normal(size=(1, 8))
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        out = qf.cross_attend(ad.const(a), ad.const(s), ad.const(wq), ad.const(wk),
                              ad.const(wv), 8).value
        assert np.allclose(out, np.tile(s @ wv, (4, 1)), atol=1e-12)

    def test_frame_permutation_invariance(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(4, 8))
        s = rng.normal(size=(9, 8))
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        args = (ad.const(wq), ad.const(wk), ad.const(wv), 8)
        base = qf.cross_attend(ad.const(a), ad.const(s), *args).value
        perm = qf.cross_attend(ad.const(a), ad.const(s[rng.permutation(9)]), *args).value
        assert np.max(np.abs(base - perm)) < 1e-10

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 8))
        s = rng.normal(size=(7, 8))
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        out = qf.cross_attend(ad.const(a), ad.const(s), ad.const(wq), ad.const(wk),
                              ad.const(wv), 8).value
        assert np.max(np.abs(out - oracle_cross_attention(a, s, wq, wk, wv, 8))) < 1e-10


class TestEncodeSpeech:
    @pytest.mark.parametrize("t_s", [1, 7, 200])
    def test_output_shape_independent_of_length(self, t_s):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        s = SpeechFeatures(frames=np.random.default_rng(t_s).normal(size=(t_s, 6)),
                           frame_hop=0.01)
        out = qf.encode_speech(s, params, cfg)
        assert out.value.shape == (cfg.n_q, cfg.d_q)

    def test_deterministic(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(1), cfg)
        s = SpeechFeatures(frames=np.random.default_rng(2).normal(size=(11, 6)),
                           frame_hop=0.01)
        a = qf.encode_speech(s, params, cfg).value
        b = qf.encode_speech(s, params, cfg).value
        assert np.array_equal(a, b)

    def test_frame_permutation_invariance(self):
        cfg = small_cfg()
        rng = np.random.default_rng(6)
        params = qf.init_params(rng, cfg)
        frames = rng.normal(size=(13, 6))
        base = qf.encode_speech(SpeechFeatures(frames, 0.01), params, cfg).value
        for _ in range(5):
            perm = qf.encode_speech(
                SpeechFeatures(frames[rng.permutation(13)], 0.01), params, cfg).value
            assert np.max(np.abs(base - perm)) < 1e-10

    def test_wrong_feature_width(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        with pytest.raises(ad.ShapeError):
            qf.encode_speech(SpeechFeatures(np.zeros((5, 9)), 0.01), params, cfg)


class TestEncodeText:
    def test_length_one_shape(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        out = qf.encode_text([3], params, cfg)
        assert out.value.shape == (1, cfg.d_q)

    def test_kind_is_metadata_only(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        ids = [1, 5, 2, 7]
        a = qf.encode_text(ids, params, cfg, kind="transcription").value
        b = qf.encode_text(ids, params, cfg, kind="caption").value
        assert np.array_equal(a, b)

    def test_token_order_matters(self):
        # positional encoding is active, unlike the speech branch
        cfg = small_cfg()
        rng = np.random.default_rng(9)
        params = qf.init_params(rng, cfg)
        found_difference = False
        for _ in range(10):
            ids = rng.integers(0, cfg.vocab_size, size=6)
            if len(set(ids.tolist())) < 2:
                continue
            swapped = ids.copy()
            i, j = 0, int(np.argmax(swapped != swapped[0]))
            swapped[i], swapped[j] = swapped[j], swapped[i]
            a = qf.encode_text(ids, params, cfg).value
            b = qf.encode_text(swapped, params, cfg).value
            if not np.allclose(a, b):
                found_difference = True
        assert found_difference

    def test_unknown_token_id(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        with pytest.raises(IndexError):
            qf.encode_text([cfg.vocab_size + 1], params, cfg)

    def test_empty_sequence(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        with pytest.raises(ValueError):
            qf.encode_text([], params, cfg)


class TestProject:
    def test_identity_projection(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        params["outproj.W"] = np.eye(cfg.d_q)
        params["outproj.b"] = np.zeros(cfg.d_q)
        qe = np.random.default_rng(1).normal(size=(cfg.n_q, cfg.d_q))
        assert np.allclose(qf.project(ad.const(qe), params).value, qe, atol=1e-15)

    def test_zero_weights_give_bias(self):
        cfg = small_cfg()
        params = qf.init_params(np.random.default_rng(0), cfg)
        params["outproj.W"] = np.zeros((cfg.d_q, cfg.d_dec))
        params["outproj.b"] = np.arange(cfg.d_dec, dtype=float)
        out = qf.project(ad.const(np.ones((3, cfg.d_q))), params).value
        assert np.allclose(out, np.tile(np.arange(cfg.d_dec), (3, 1)))

    def test_gradcheck_through_encode_speech(self):
        cfg = small_cfg(n_layers=1)
        rng = np.random.default_rng(11)
        base = qf.init_params(rng, cfg)
        frames = rng.normal(size=(5, cfg.d_in))
        s = SpeechFeatures(frames, 0.01)

        for name in ["qformer.queries", "outproj.W", "featproj.W",
                      "qformer.L0.cross.Wk"]:
            def loss_value(x):
                p = dict(base)
                p[name] = x
                out = qf.project(qf.encode_speech(s, p, cfg), p)
                return float(ad.sum_all(ad.square(out)).value)

            p = dict(base)
            node = ad.param(base[name])
            p[name] = node
            out = qf.project(qf.encode_speech(s, p, cfg), p)
            ad.backward(ad.sum_all(ad.square(out)))
            numeric = ad.finite_diff_grad(loss_value, base[name])
            assert ad.grad_close(node.grad, numeric), name
