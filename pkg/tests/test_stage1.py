import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gacodec import signal as S
from gacodec import stage1 as s1
from gacodec.tensorkit import (Layer, MlpParams, finite_diff_check, init_mlp, mlp_backward,
                               mlp_forward, prng_stream)


def tiny_model(K=6, d=4, n_classes=5, in_dim=6, beta=0.25, commitment=0.25, tau=1.0, seed=0):
    st_ = prng_stream(seed)
    cfg = s1.Stage1Config(latent_dim=d, codebook_size=K, beta=beta, commitment=commitment,
                          tau=tau)
    enc = init_mlp([in_dim, 8, d], ["tanh", "identity"], st_.split("enc"))
    head = init_mlp([d, 8, n_classes], ["tanh", "identity"], st_.split("head"))
    cb = st_.split("cb").normal((K, d))
    return s1.Stage1Model(enc, cb, head, np.zeros(32), np.ones(32), cfg)


def tiny_batch(B=3, nb=4, in_dim=6, n_classes=5, seed=1):
    st_ = prng_stream(seed)
    return st_.normal((B, nb, in_dim)), st_.integers(0, n_classes, B)


class TestEncode:
    @pytest.mark.parametrize("s,rows", [(1, 31), (2, 16), (4, 8)])
    def test_block_counts(self, s, rows):
        cfg = s1.Stage1Config(downsample=s)
        m = s1.init_model(cfg, np.zeros(32), np.ones(32), prng_stream(0))
        z = s1.encode_frames(m, np.random.default_rng(0).normal(size=(31, 32)))
        assert z.shape == (rows, 16)
        assert cfg.n_blocks == rows

    def test_zero_encoder(self):
        m = s1.init_model(s1.Stage1Config(), np.zeros(32), np.ones(32), prng_stream(0))
        for l in m.encoder.layers:
            l.W[:] = 0
            l.b[:] = 0
        assert np.all(s1.encode_frames(m, np.ones((31, 32))) == 0)

    def test_context_and_padding(self):
        f = np.arange(31 * 32, dtype=float).reshape(31, 32)
        x = s1.block_inputs(f, 2)
        assert x.shape == (16, 2 * 3 * 32)
        # first frame: left context repeats the edge
        np.testing.assert_array_equal(x[0, :32], f[0])
        np.testing.assert_array_equal(x[0, 32:64], f[0])
        np.testing.assert_array_equal(x[0, 64:96], f[1])
        # second frame of block 0 is frame 1
        np.testing.assert_array_equal(x[0, 128:160], f[1])
        # block 15 holds frame 30 then a zero frame
        np.testing.assert_array_equal(x[15, 32:64], f[30])
        np.testing.assert_array_equal(x[15, 64:96], f[30])
        assert np.all(x[15, 96:] == 0)

    def test_shape_error(self):
        m = s1.init_model(s1.Stage1Config(), np.zeros(32), np.ones(32), prng_stream(0))
        with pytest.raises(ValueError):
            s1.encode_frames(m, np.zeros((30, 32)))


class TestQuantize:
    def test_hand_example(self):
        cb = np.array([[0.0, 0.0], [1.0, 1.0]])
        tok, q, soft = s1.vq_quantize(cb, np.array([[0.9, 0.8]]))
        assert tok[0] == 1
        np.testing.assert_array_equal(q[0], [1.0, 1.0])
        e = np.exp(-np.array([1.45, 0.05]))
        np.testing.assert_allclose(soft[0], e / e.sum(), rtol=1e-12)

    def test_tie_goes_to_lowest_index(self):
        cb = np.array([[1.0, 0.0], [5.0, 5.0], [7.0, 7.0], [-1.0, 0.0]])
        assert s1.vq_quantize(cb, np.zeros((1, 2)))[0][0] == 0

    def test_hot_softmax_uniform(self):
        cb = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        _, _, soft = s1.vq_quantize(cb, np.zeros((1, 2)), tau=1e6)
        np.testing.assert_allclose(soft[0], 0.25, rtol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (7, 3), elements=st.floats(-5, 5)),
           arrays(np.float64, (10, 3), elements=st.floats(-5, 5)))
    def test_idempotent(self, cb, z):
        tok, q, _ = s1.vq_quantize(cb, z)
        tok2, q2, _ = s1.vq_quantize(cb, q)
        np.testing.assert_array_equal(q2, q)
        np.testing.assert_array_equal(cb[tok2], cb[tok])


class TestInfoLoss:
    def test_uniform(self):
        assert s1.info_loss(np.full((5, 64), 1 / 64)) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot(self):
        assert s1.info_loss(np.eye(4)[[2, 2, 2]]) == pytest.approx(math.log(4), abs=1e-12)

    def test_two_of_four(self):
        assert s1.info_loss([[0.5, 0.5, 0.0, 0.0]]) == pytest.approx(math.log(2), abs=1e-12)

    def test_not_normalised(self):
        with pytest.raises(ValueError):
            s1.info_loss([[0.5, 0.6]])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (6, 5), elements=st.floats(0, 10)))
    def test_bounds(self, raw):
        raw = raw + 1e-9
        p = raw / raw.sum(axis=1, keepdims=True)
        v = s1.info_loss(p)
        assert -1e-12 <= v <= math.log(5) + 1e-12


class TestSemanticLoss:
    def model(self):
        return s1.init_model(s1.Stage1Config(), np.zeros(32), np.ones(32), prng_stream(0))

    def test_uniform_logits(self):
        m = self.model()
        for l in m.head.layers:
            l.W[:] = 0
            l.b[:] = 0
        assert s1.semantic_loss(m, np.ones((31, 16)), 5) == pytest.approx(math.log(24))

    def test_saturated(self):
        m = self.model()
        m.head.layers[-1].W[:] = 0
        m.head.layers[-1].b[:] = 0
        m.head.layers[-1].b[7] = 100.0
        assert s1.semantic_loss(m, np.ones((31, 16)), 7) < 1e-6

    def test_invalid_class(self):
        with pytest.raises(ValueError):
            s1.semantic_loss(self.model(), np.ones((31, 16)), 24)

    def test_random_init_near_uniform(self):
        clips = S.make_corpus(24, 0, stratified=True)
        F = S.corpus_features(clips)
        mean, std = s1.feature_stats(F)
        m = s1.init_model(s1.Stage1Config(), mean, std, prng_stream(3))
        z = s1.encode_frames(m, F)
        _, q, _ = s1.vq_quantize(m.codebook, z.reshape(-1, 16))
        loss = s1.semantic_loss(m, q.reshape(z.shape), [c.label for c in clips])
        assert 3.0 <= loss <= 3.4


class TestGradients:
    def test_bypassed_objective_encoder(self):
        m = tiny_model()
        X, y = tiny_batch()

        def f(enc):
            m.encoder = enc
            loss, g, *_ = s1.stage1_objective(m, X, y, bypass=True)
            return loss, g

        assert finite_diff_check(f, m.encoder) < 1e-4

    def test_bypassed_objective_head(self):
        m = tiny_model(beta=2.0, tau=0.5)
        X, y = tiny_batch()

        def f(head):
            m.head = head
            loss, _, g, *_ = s1.stage1_objective(m, X, y, bypass=True)
            return loss, g

        assert finite_diff_check(f, m.head) < 1e-4

    def test_info_term_alone(self):
        m = tiny_model(beta=1.0, commitment=0.0, tau=0.7)
        X, y = tiny_batch()

        def f(enc):
            m.encoder = enc
            _, g, _, parts, *_ = s1.stage1_objective(m, X, y, bypass=True)
            # drop the semantic part by differencing against a beta=0 copy
            m0 = s1.Stage1Model(enc, m.codebook, m.head, m.feat_mean, m.feat_std,
                                s1.Stage1Config(latent_dim=4, codebook_size=6, beta=0.0,
                                                commitment=0.0))
            _, g0, *_ = s1.stage1_objective(m0, X, y, bypass=True)
            diff = MlpParams([Layer(a.W - b.W, a.b - b.b, a.act)
                              for a, b in zip(g.layers, g0.layers)])
            return parts["info"], diff

        assert finite_diff_check(f, m.encoder) < 1e-4

    def test_straight_through(self):
        # encoder gradient == backprop of d(semantic)/d(quantized), the latter
        # taken by central differences at the quantized codes
        m = tiny_model(beta=0.0, commitment=0.0)
        X, y = tiny_batch()
        B, nb, _ = X.shape
        _, g_enc, *_ = s1.stage1_objective(m, X, y)

        z, cache = mlp_forward(m.encoder, X.reshape(B * nb, -1))
        tok = s1.vq_quantize(m.codebook, z)[0]
        q = m.codebook[tok].copy()

        def downstream(qq):
            logits, _ = mlp_forward(m.head, qq.reshape(B, nb, -1).mean(axis=1))
            return s1._cross_entropy(logits, y)[0]

        dq = np.zeros_like(q)
        eps = 1e-6
        for idx in np.ndindex(q.shape):
            hi, lo = q.copy(), q.copy()
            hi[idx] += eps
            lo[idx] -= eps
            dq[idx] = (downstream(hi) - downstream(lo)) / (2 * eps)
        expected, _ = mlp_backward(m.encoder, cache, dq)
        for a, b in zip(g_enc.arrays(), expected.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)

    def test_commitment_gradient(self):
        m = tiny_model(beta=0.0, commitment=1.0)
        X, y = tiny_batch()
        _, g_full, *_ = s1.stage1_objective(m, X, y)
        m0 = tiny_model(beta=0.0, commitment=0.0)
        _, g_sem, *_ = s1.stage1_objective(m0, X, y)
        B, nb, _ = X.shape
        z, cache = mlp_forward(m.encoder, X.reshape(B * nb, -1))
        q = s1.vq_quantize(m.codebook, z)[1]
        g_commit, _ = mlp_backward(m.encoder, cache, 2 * (z - q) / (B * nb))
        for a, b, c in zip(g_full.arrays(), g_sem.arrays(), g_commit.arrays()):
            np.testing.assert_allclose(a - b, c, atol=1e-12)


def small_corpus():
    clips = S.make_corpus(96, 5)
    return clips, S.corpus_features(clips)


class TestTraining:
    def test_deterministic(self):
        clips, F = small_corpus()
        cfg = s1.Stage1Config(codebook_size=16, steps=40, batch_size=8)
        _, a = s1.train_stage1(clips, cfg, 3, features=F)
        _, b = s1.train_stage1(clips, cfg, 3, features=F)
        assert a == b

    def test_checkpoint_round_trip(self):
        clips, F = small_corpus()
        cfg = s1.Stage1Config(codebook_size=16, downsample=2, steps=20, batch_size=8)
        m, _ = s1.train_stage1(clips, cfg, 3, features=F)
        back = s1.Stage1Model.from_bytes(m.to_bytes(), cfg)
        np.testing.assert_array_equal(s1.tokenize(back, F), s1.tokenize(m, F))
        assert back.to_bytes() == m.to_bytes()

    def test_codebook_rows_distinct(self):
        clips, F = small_corpus()
        m, _ = s1.train_stage1(clips, s1.Stage1Config(codebook_size=32, steps=300), 1,
                               features=F)
        cb = m.codebook
        d = np.sum((cb[:, None] - cb[None]) ** 2, axis=-1) + np.eye(len(cb))
        assert d.min() > 1e-9
        assert np.all(np.isfinite(cb))

    def test_token_count_law(self):
        clips, F = small_corpus()
        for s in (1, 2, 4):
            m, _ = s1.train_stage1(clips, s1.Stage1Config(downsample=s, steps=5), 1, features=F)
            assert s1.tokenize(m, F).shape == (96, math.ceil(31 / s))

    def test_divergence_aborts(self):
        clips, F = small_corpus()
        cfg = s1.Stage1Config(steps=50, lr=1e300)
        with pytest.raises(s1.TrainingDiverged):
            s1.train_stage1(clips, cfg, 1, features=F)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            s1.train_stage1([], s1.Stage1Config(), 0)

    @pytest.mark.slow
    def test_large_beta_flattens_usage(self):
        clips = S.make_corpus(480, 2)
        cfg = s1.Stage1Config(beta=10.0, steps=3000)
        _, tlog = s1.train_stage1(clips, cfg, 1)
        assert tlog.final_info < 0.05
