import numpy as np
import pytest

from monolig.nnet import (
    AdamState,
    Mlp,
    adam_step,
    backward,
    forward,
    init_adam,
    init_mlp,
    load_mlp,
    mlp_from_dict,
    mlp_to_dict,
    save_mlp,
)


def straight_line_forward(net, x):
    """Independent re-implementation: explicit loops, no shared helpers."""
    a = list(map(float, x))
    n_layers = len(net.weights)
    for li in range(n_layers):
        w, b = net.weights[li], net.biases[li]
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += a[i] * w[i, j]
            out.append(s)
        if li < n_layers - 1:
            if net.activation == "tanh":
                out = [float(np.tanh(v)) for v in out]
            else:
                out = [max(v, 0.0) for v in out]
        a = out
    return np.array(a)


def numeric_param_grads(net, x, upstream, h=1e-5):
    """Central finite differences of upstream . forward(x) wrt every parameter."""

    def objective():
        return float(np.dot(upstream, forward(net, x)))

    w_grads = [np.zeros_like(w) for w in net.weights]
    b_grads = [np.zeros_like(b) for b in net.biases]
    for li, w in enumerate(net.weights):
        it = np.nditer(w, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = w[idx]
            w[idx] = old + h
            up = objective()
            w[idx] = old - h
            down = objective()
            w[idx] = old
            w_grads[li][idx] = (up - down) / (2 * h)
            it.iternext()
    for li, b in enumerate(net.biases):
        for j in range(b.shape[0]):
            old = b[j]
            b[j] = old + h
            up = objective()
            b[j] = old - h
            down = objective()
            b[j] = old
            b_grads[li][j] = (up - down) / (2 * h)
    return w_grads, b_grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class TestForward:
    def test_zero_net_zero_output(self):
        net = init_mlp([3, 4, 2], "tanh", np.random.default_rng(0))
        for w in net.weights:
            w[:] = 0.0
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(forward(net, x), np.zeros(2))

    def test_identity_linear_layer(self):
        net = Mlp(layer_dims=[3, 3], weights=[np.eye(3)], biases=[np.zeros(3)])
        x = np.array([0.5, -1.5, 2.0])
        np.testing.assert_array_equal(forward(net, x), x)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(42)
        for act in ("tanh", "relu"):
            net = init_mlp([4, 8, 3], act, rng)
            for _ in range(20):
                x = rng.normal(size=4)
                np.testing.assert_allclose(
                    forward(net, x), straight_line_forward(net, x), atol=1e-12
                )

    def test_batch_matches_per_row(self):
        rng = np.random.default_rng(1)
        net = init_mlp([5, 7, 2], "tanh", rng)
        xb = rng.normal(size=(6, 5))
        out = forward(net, xb)
        for i in range(6):
            np.testing.assert_allclose(out[i], forward(net, xb[i]), atol=1e-14)

    def test_dimension_mismatch(self):
        net = init_mlp([3, 2], "tanh", np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(net, np.zeros(4))


class TestBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(3)
        net = init_mlp([3, 5, 2], "tanh", rng)
        wg, bg, xg = backward(net, rng.normal(size=3), np.zeros(2))
        assert all(np.all(g == 0) for g in wg)
        assert all(np.all(g == 0) for g in bg)
        assert np.all(xg == 0)

    def test_linear_1_1_chain_rule(self):
        net = Mlp(layer_dims=[1, 1], weights=[np.array([[2.0]])],
                  biases=[np.array([0.5])])
        wg, bg, xg = backward(net, np.array([3.0]), np.array([1.0]))
        assert wg[0][0, 0] == 3.0  # d(w*x+b)/dw = x
        assert bg[0][0] == 1.0
        assert xg[0] == 2.0  # d/dx = w

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_matches_finite_differences(self, act):
        rng = np.random.default_rng(17)
        worst = 0.0
        for _ in range(25):
            net = init_mlp([4, 6, 3], act, rng)
            x = rng.normal(size=4)
            upstream = rng.normal(size=3)
            wg, bg, _ = backward(net, x, upstream)
            nwg, nbg = numeric_param_grads(net, x, upstream)
            worst = max(worst, max_rel_err(wg + bg, nwg + nbg))
        assert worst < 1e-4

    def test_batch_grads_sum_rows(self):
        rng = np.random.default_rng(19)
        net = init_mlp([3, 4, 2], "tanh", rng)
        xb = rng.normal(size=(5, 3))
        ub = rng.normal(size=(5, 2))
        wg, bg, xg = backward(net, xb, ub)
        acc_w = [np.zeros_like(w) for w in net.weights]
        acc_b = [np.zeros_like(b) for b in net.biases]
        for i in range(5):
            wgi, bgi, xgi = backward(net, xb[i], ub[i])
            for a, g in zip(acc_w, wgi):
                a += g
            for a, g in zip(acc_b, bgi):
                a += g
            np.testing.assert_allclose(xg[i], xgi, atol=1e-12)
        for a, g in zip(acc_w, wg):
            np.testing.assert_allclose(a, g, atol=1e-12)
        for a, g in zip(acc_b, bg):
            np.testing.assert_allclose(a, g, atol=1e-12)


class TestAdam:
    def test_zero_grad_no_move(self):
        rng = np.random.default_rng(5)
        net = init_mlp([2, 3, 1], "tanh", rng)
        before = [w.copy() for w in net.weights]
        state = init_adam(net)
        zero = ([np.zeros_like(w) for w in net.weights],
                [np.zeros_like(b) for b in net.biases])
        adam_step(net, zero, state)
        for w, b4 in zip(net.weights, before):
            np.testing.assert_array_equal(w, b4)

    def test_descent_direction_under_constant_grad(self):
        net = Mlp(layer_dims=[1, 1], weights=[np.array([[0.0]])],
                  biases=[np.array([0.0])])
        state = init_adam(net, lr=0.01)
        g = ([np.array([[1.0]])], [np.array([0.0])])
        for _ in range(50):
            adam_step(net, g, state)
        assert net.weights[0][0, 0] < 0.0

    def test_first_step_closed_form(self):
        # from zero state, m_hat = g and v_hat = g^2, so the update is
        # lr * g / (|g| + eps): magnitude ~= lr for g = 1
        net = Mlp(layer_dims=[1, 1], weights=[np.array([[0.25]])],
                  biases=[np.array([0.1])])
        state = init_adam(net, lr=1e-3)
        g = ([np.array([[1.0]])], [np.array([2.0])])
        adam_step(net, g, state)
        expect_w = 0.25 - 1e-3 * 1.0 / (1.0 + 1e-8)
        expect_b = 0.1 - 1e-3 * 2.0 / (2.0 + 1e-8)
        assert net.weights[0][0, 0] == pytest.approx(expect_w, abs=1e-9)
        assert net.biases[0][0] == pytest.approx(expect_b, abs=1e-9)
        assert state.step == 1


class TestTrainingSmoke:
    def test_linear_regression_converges(self):
        rng = np.random.default_rng(11)
        true_w = rng.normal(size=(4, 2))
        xs = rng.normal(size=(256, 4))
        ys = xs @ true_w + 0.3
        net = init_mlp([4, 16, 2], "tanh", rng)
        state = init_adam(net, lr=5e-3)
        order = np.arange(len(xs))
        shuffle_rng = np.random.default_rng(12)
        mse = None
        for _ in range(1200):
            shuffle_rng.shuffle(order)
            for start in range(0, len(xs), 64):
                idx = order[start : start + 64]
                from monolig.nnet import forward_cached, backward_from_cache

                out, cache = forward_cached(net, xs[idx])
                err = out - ys[idx]
                grads = backward_from_cache(net, cache, 2.0 * err / len(idx))
                adam_step(net, (grads[0], grads[1]), state)
            mse = float(np.mean((forward(net, xs) - ys) ** 2))
            if mse < 1e-3:
                break
        assert mse < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        net = init_mlp([3, 5, 2], "relu", rng)
        path = tmp_path / "ckpt.json"
        save_mlp(path, net)
        again = load_mlp(path)
        assert again.layer_dims == net.layer_dims
        assert again.activation == "relu"
        for a, b in zip(again.weights, net.weights):
            np.testing.assert_array_equal(a, b)
        x = rng.normal(size=3)
        np.testing.assert_array_equal(forward(again, x), forward(net, x))

    def test_shape_validation(self):
        rng = np.random.default_rng(2)
        d = mlp_to_dict(init_mlp([3, 2], "tanh", rng))
        d["layer_dims"] = [3, 4]
        with pytest.raises(ValueError):
            mlp_from_dict(d)
