import numpy as np
import pytest

from gacodec.tensorkit import (AdamState, CheckpointError, Layer, MlpParams, ShapeError,
                               adam_step, dump_checkpoint, finite_diff_check, init_mlp,
                               load_checkpoint, mlp_backward, mlp_forward, prng_stream)


def identity_net(W, b):
    return MlpParams([Layer(np.array(W, float), np.array(b, float), "identity")])


def half_sq_loss(p, x, target):
    y, cache = mlp_forward(p, x)
    r = y - target
    g, _ = mlp_backward(p, cache, r)
    return 0.5 * float(np.sum(r * r)), g


class TestForward:
    def test_identity(self):
        y, _ = mlp_forward(identity_net(np.eye(2), [0, 0]), [1.0, 2.0])
        np.testing.assert_array_equal(y, [1.0, 2.0])

    def test_hand_arithmetic(self):
        y, _ = mlp_forward(identity_net([[2, 0], [0, 3]], [1, 1]), [1.0, 1.0])
        np.testing.assert_array_equal(y, [3.0, 4.0])

    def test_zero_tanh(self):
        p = MlpParams([Layer(np.zeros((3, 4)), np.zeros(3), "tanh")])
        x = np.random.default_rng(0).normal(size=4)
        np.testing.assert_array_equal(mlp_forward(p, x)[0], np.zeros(3))

    def test_batch_matches_rows(self):
        p = init_mlp([4, 6, 3], ["relu", "tanh"], prng_stream(1))
        X = np.random.default_rng(1).normal(size=(5, 4))
        Y, _ = mlp_forward(p, X)
        for i in range(5):
            np.testing.assert_allclose(Y[i], mlp_forward(p, X[i])[0], rtol=1e-14)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            mlp_forward(identity_net(np.eye(2), [0, 0]), [1.0, 2.0, 3.0])

    def test_layers_must_chain(self):
        with pytest.raises(ShapeError):
            MlpParams([Layer(np.eye(2), np.zeros(2)), Layer(np.ones((1, 3)), np.zeros(1))])

    def test_param_count(self):
        p = init_mlp([3, 5, 2], ["tanh", "identity"], prng_stream(0))
        assert p.n_params == 3 * 5 + 5 + 5 * 2 + 2


class TestBackward:
    def test_linear_layer_calculus(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        p = identity_net(W, [0, 0])
        x = np.array([0.5, -1.5])
        _, cache = mlp_forward(p, x)
        g, dx = mlp_backward(p, cache, np.array([1.0, 0.0]))
        np.testing.assert_array_equal(g.layers[0].W[0], x)
        np.testing.assert_array_equal(g.layers[0].W[1], [0.0, 0.0])
        np.testing.assert_array_equal(g.layers[0].b, [1.0, 0.0])
        np.testing.assert_array_equal(dx, W[0])

    def test_zero_upstream(self):
        p = init_mlp([3, 4, 2], ["tanh", "relu"], prng_stream(3))
        _, cache = mlp_forward(p, np.ones(3))
        g, dx = mlp_backward(p, cache, np.zeros(2))
        assert all(np.all(a == 0) for a in g.arrays())
        assert np.all(dx == 0)

    def test_stale_cache(self):
        p = init_mlp([3, 4, 2], ["tanh", "identity"], prng_stream(3))
        q = init_mlp([3, 2], ["identity"], prng_stream(3))
        _, cache = mlp_forward(q, np.ones(3))
        with pytest.raises(ShapeError):
            mlp_backward(p, cache, np.zeros(2))

    def test_random_two_layer_fd(self):
        # 3 -> 5 -> 2, seed 7; central differences eps 1e-5
        st = prng_stream(7)
        p = init_mlp([3, 5, 2], ["tanh", "identity"], st.split("net"))
        x = st.split("x").normal(3)
        target = st.split("y").normal(2)
        assert finite_diff_check(lambda q: half_sq_loss(q, x, target), p, 1e-5) < 1e-4

    @pytest.mark.parametrize("act", ["tanh", "relu", "identity"])
    def test_every_activation_batched(self, act):
        st = prng_stream(11)
        p = init_mlp([4, 8, 6, 3], [act, act, "identity"], st.split("net"))
        X = st.split("x").normal((7, 4))
        T = st.split("y").normal((7, 3))
        assert finite_diff_check(lambda q: half_sq_loss(q, X, T), p, 1e-5) < 1e-4


class TestFiniteDiff:
    def test_quadratic_matches_analytic(self):
        st = prng_stream(2)
        p = identity_net(st.normal((3, 4)), np.zeros(3))
        x, y = st.normal(4), st.normal(3)

        def loss(q):
            r = q.layers[0].W @ x + q.layers[0].b - y
            g = q.zeros_like()
            g.layers[0].W[:] = 2 * np.outer(r, x)
            g.layers[0].b[:] = 2 * r
            return float(r @ r), g

        assert finite_diff_check(loss, p, 1e-5) < 1e-6

    def test_constant_loss(self):
        p = init_mlp([2, 2], ["identity"], prng_stream(0))
        assert finite_diff_check(lambda q: (3.0, q.zeros_like()), p, 1e-5) == 0.0

    def test_nonfinite_loss_raises(self):
        p = init_mlp([2, 2], ["identity"], prng_stream(0))
        with pytest.raises(FloatingPointError):
            finite_diff_check(lambda q: (float("nan"), q.zeros_like()), p)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = init_mlp([3, 2], ["identity"], prng_stream(0))
        before = p.copy()
        s = AdamState.for_params(p, lr=0.1)
        adam_step(s, p, p.zeros_like())
        for a, b in zip(p.arrays(), before.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_first_step_scalar(self):
        # m_hat = v_hat = 1 after bias correction, so w = -lr / (1 + eps)
        p = identity_net([[0.0]], [0.0])
        g = identity_net([[1.0]], [0.0])
        s = AdamState.for_params(p, lr=0.1)
        adam_step(s, p, g)
        assert p.layers[0].W[0, 0] == pytest.approx(-0.1, abs=1e-6)
        assert p.layers[0].b[0] == 0.0
        assert s.step == 1

    def test_deterministic_trajectory(self):
        def run():
            st = prng_stream(5)
            p = init_mlp([3, 4, 1], ["tanh", "identity"], st.split("init"))
            s = AdamState.for_params(p, lr=1e-2)
            data = st.split("data")
            for _ in range(50):
                X = data.normal((8, 3))
                _, g = half_sq_loss(p, X, X[:, :1])
                adam_step(s, p, g)
            return p

        a, b = run(), run()
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_shape_mismatch(self):
        p = init_mlp([3, 2], ["identity"], prng_stream(0))
        q = init_mlp([3, 3], ["identity"], prng_stream(0))
        with pytest.raises(ShapeError):
            adam_step(AdamState.for_params(p), p, q)


class TestPrng:
    def test_same_seed(self):
        np.testing.assert_array_equal(prng_stream(9).uniform(1000), prng_stream(9).uniform(1000))

    def test_split_streams_differ(self):
        s = prng_stream(9)
        assert not np.array_equal(s.split("a").uniform(100), s.split("b").uniform(100))

    def test_split_independent_of_parent_draws(self):
        a = prng_stream(4)
        b = prng_stream(4)
        b.uniform(10)
        np.testing.assert_array_equal(a.split("x").normal(5), b.split("x").normal(5))

    def test_normal_moments(self):
        z = prng_stream(123).normal(100_000)
        assert -0.02 <= z.mean() <= 0.02
        assert 0.97 <= z.var() <= 1.03


class TestCheckpoint:
    def test_round_trip(self):
        blocks = {"enc.0.W": np.arange(6.0).reshape(2, 3), "enc.0.b": np.array([1.5, -2.0]),
                  "cb": np.random.default_rng(0).normal(size=(4, 2))}
        out = load_checkpoint(dump_checkpoint(blocks))
        assert list(out) == list(blocks)
        np.testing.assert_array_equal(out["enc.0.W"], blocks["enc.0.W"])
        np.testing.assert_array_equal(out["enc.0.b"].ravel(), blocks["enc.0.b"])
        np.testing.assert_array_equal(out["cb"], blocks["cb"])

    def test_layout(self):
        data = dump_checkpoint({"ab": np.array([[1.0]])})
        assert data[:4] == b"GACP"
        assert data[4] == 1
        # magic, version, count, name_len + name, rows, cols, one f64, crc
        assert len(data) == 4 + 1 + 4 + 2 + 2 + 8 + 8 + 4

    def test_corruption_detected(self):
        data = bytearray(dump_checkpoint({"w": np.ones((2, 2))}))
        data[20] ^= 0x01
        with pytest.raises(CheckpointError):
            load_checkpoint(bytes(data))

    def test_mlp_blocks_round_trip(self):
        p = init_mlp([3, 4, 2], ["tanh", "identity"], prng_stream(0))
        q = MlpParams.from_blocks(load_checkpoint(dump_checkpoint(p.blocks("enc"))), "enc",
                                  ["tanh", "identity"])
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)
