import math

import numpy as np
import pytest

from ewaldmp import nn_core as nn
from ewaldmp.errors import EmptyBatchError, ShapeError


def manual_silu(z):
    return z / (1.0 + math.exp(-z))


class TestForwardOps:
    def test_dense_identity_reproduces_input(self):
        store = nn.ParamStore(seed=0)
        layer = nn.DenseLayer(store, "id", 3, 3, activation="identity")
        layer.weight.value = np.eye(3)
        x = np.random.default_rng(1).normal(size=(5, 3))
        out = layer(nn.Var(x))
        np.testing.assert_array_equal(out.value, x)

    def test_silu_dense_hand_value(self):
        store = nn.ParamStore(seed=0)
        layer = nn.DenseLayer(store, "l", 2, 2, activation="silu")
        layer.weight.value = np.array([[1.0, 2.0], [-1.0, 0.5]])
        x = np.array([[0.3, -0.7]])
        out = layer(nn.Var(x)).value
        z = [0.3 * 1.0 + (-0.7) * 2.0, 0.3 * (-1.0) + (-0.7) * 0.5]
        expected = [manual_silu(z[0]), manual_silu(z[1])]
        np.testing.assert_allclose(out[0], expected, rtol=1e-15)

    def test_matmul_against_loop(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        got = nn.matmul(nn.Var(a), nn.Var(b)).value
        expected = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(got, expected, atol=1e-14)

    def test_silu_fixed_points(self):
        x = nn.Var(np.array([[0.0]]))
        assert nn.silu(x).value[0, 0] == 0.0
        grid = np.linspace(0.0, 10.0, 200)
        vals = nn.silu(nn.Var(grid.reshape(1, -1))).value[0]
        assert np.all(np.diff(vals) > 0)

    def test_segment_and_gather_against_loop(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 2))
        idx = np.array([0, 2, 0, 1, 2, 2])
        seg = nn.segment_sum(nn.Var(x), idx, 3).value
        expected = np.zeros((3, 2))
        for row, k in enumerate(idx):
            expected[k] += x[row]
        np.testing.assert_allclose(seg, expected, atol=1e-15)
        gat = nn.gather_rows(nn.Var(x), idx).value
        np.testing.assert_array_equal(gat, x[idx])

    def test_shape_errors(self):
        store = nn.ParamStore(seed=0)
        layer = nn.DenseLayer(store, "l", 4, 2)
        with pytest.raises(ShapeError):
            layer(nn.Var(np.zeros((3, 5))))
        with pytest.raises(ShapeError):
            nn.mul(nn.Var(np.zeros((2, 2))), nn.Var(np.zeros((2, 3))))


class TestBackward:
    def test_sum_linear_gradient_is_outer_product(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 4))
        store = nn.ParamStore(seed=0)
        w = store.create("w", (3, 4))
        loss = nn.sum_all(nn.linear(nn.Var(x), w))
        nn.backward(loss)
        np.testing.assert_allclose(w.grad, np.ones((3, 1)) @ x, atol=1e-14)

    def test_unused_parameter_gets_zero_gradient(self):
        store = nn.ParamStore(seed=0)
        used = store.create("used", (2, 2))
        unused = store.create("unused", (2, 2))
        loss = nn.sum_all(nn.linear(nn.Var(np.ones((1, 2))), used))
        nn.backward(loss)
        assert unused.grad is None
        np.testing.assert_array_equal(unused.grad_or_zero(), np.zeros((2, 2)))

    def test_gradcheck_small_mlp_every_entry(self):
        store = nn.ParamStore(seed=42)
        l1 = nn.DenseLayer(store, "l1", 3, 5, activation="silu")
        l2 = nn.DenseLayer(store, "l2", 5, 1, activation="identity")
        x = np.random.default_rng(0).normal(size=(4, 3))

        def objective():
            return nn.sum_all(l2(l1(nn.Var(x))))

        worst, report = nn.finite_difference_check(objective, store.params())
        assert worst <= 1e-5, report

    def test_gradcheck_residual_and_segment_ops(self):
        store = nn.ParamStore(seed=7)
        block = nn.ResidualBlock(store, "res", 3)
        idx = np.array([0, 1, 0, 1, 1])
        x = np.random.default_rng(5).normal(size=(5, 3))

        def objective():
            h = block(nn.Var(x))
            pooled = nn.segment_sum(h, idx, 2)
            return nn.sum_all(nn.silu(pooled))

        worst, report = nn.finite_difference_check(objective, store.params())
        assert worst <= 1e-5, report

    def test_stack_scalars_distributes_gradient(self):
        store = nn.ParamStore(seed=1)
        w = store.create("w", (1, 1))
        a = nn.sum_all(nn.scale(nn.Var(np.ones((1, 1))), 2.0))
        b = nn.sum_all(nn.linear(nn.Var(np.full((1, 1), 3.0)), w))
        loss = nn.mean_all(nn.stack_scalars([a, b]))
        nn.backward(loss)
        np.testing.assert_allclose(w.grad, [[1.5]])


class TestLoss:
    def test_zero_on_exact_prediction(self):
        pred = nn.Var(np.array([1.0, -2.0, 0.5]))
        assert nn.mae_loss(pred, np.array([1.0, -2.0, 0.5])).value == 0.0

    def test_symmetric_offsets(self):
        pred = nn.Var(np.array([2.0, -2.0]))
        assert float(nn.mae_loss(pred, np.zeros(2)).value) == 2.0

    def test_against_loop(self):
        rng = np.random.default_rng(9)
        p, t = rng.normal(size=12), rng.normal(size=12)
        got = float(nn.mae_loss(nn.Var(p), t).value)
        expected = sum(abs(a - b) for a, b in zip(p, t)) / 12
        assert abs(got - expected) < 1e-14

    def test_empty_batch_raises(self):
        with pytest.raises(EmptyBatchError):
            nn.mae_loss(nn.Var(np.zeros(0)), np.zeros(0))


class TestOptimizers:
    def test_sgd_step(self):
        store = nn.ParamStore(seed=0)
        w = store.create("w", (1, 1), init="zeros")
        w.grad = np.array([[1.0]])
        nn.Sgd([w], lr=0.1).step()
        np.testing.assert_allclose(w.value, [[-0.1]])

    def test_none_gradient_leaves_parameter_unchanged(self):
        store = nn.ParamStore(seed=0)
        w = store.create("w", (2, 2))
        before = w.value.copy()
        opt = nn.Adam([w], lr=0.5)
        opt.step()
        np.testing.assert_array_equal(w.value, before)

    def test_adam_first_step_hand_reference(self):
        theta, g, lr = 0.5, 0.3, 0.01
        store = nn.ParamStore(seed=0)
        w = store.create("w", (1, 1), init="zeros")
        w.value = np.array([[theta]])
        w.grad = np.array([[g]])
        nn.Adam([w], lr=lr).step()
        b1, b2, eps = 0.9, 0.999, 1e-8
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        m_hat = m / (1 - b1)
        v_hat = v / (1 - b2)
        expected = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        np.testing.assert_allclose(w.value, [[expected]], rtol=1e-15)
        assert abs(w.value[0, 0] - (theta - lr)) < lr * 1e-6

    def test_adam_decoupled_weight_decay(self):
        store = nn.ParamStore(seed=0)
        w = store.create("w", (1, 1), init="zeros")
        w.value = np.array([[2.0]])
        w.grad = np.array([[0.0]])
        nn.Adam([w], lr=0.1, weight_decay=0.01).step()
        np.testing.assert_allclose(w.value, [[2.0 - 0.1 * 0.01 * 2.0]], rtol=1e-15)

    def test_training_is_deterministic(self):
        def run():
            store = nn.ParamStore(seed=123)
            l1 = nn.DenseLayer(store, "l1", 2, 4)
            l2 = nn.DenseLayer(store, "l2", 4, 1, activation="identity")
            opt = nn.Adam(store.params(), lr=1e-2, weight_decay=0.01)
            x = np.random.default_rng(55).normal(size=(8, 2))
            target = np.random.default_rng(56).normal(size=8)
            for _ in range(20):
                store.zero_grad()
                preds = [nn.sum_all(l2(l1(nn.Var(x[k : k + 1])))) for k in range(8)]
                loss = nn.mae_loss(nn.stack_scalars(preds), target)
                nn.backward(loss)
                opt.step()
            return store.get_values()

        a, b = run(), run()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])


class TestInitialization:
    def test_orthogonal_columns(self):
        w = nn.orthogonal(np.random.default_rng(0), (6, 3))
        np.testing.assert_allclose(w.T @ w, np.eye(3), atol=1e-12)

    def test_orthogonal_rows_when_wide(self):
        w = nn.orthogonal(np.random.default_rng(0), (3, 6))
        np.testing.assert_allclose(w @ w.T, np.eye(3), atol=1e-12)

    def test_named_rng_independent_of_creation_order(self):
        s1 = nn.ParamStore(seed=9)
        a1 = s1.create("alpha", (4, 4)).value
        s2 = nn.ParamStore(seed=9)
        s2.create("zeta", (2, 2))
        a2 = s2.create("alpha", (4, 4)).value
        np.testing.assert_array_equal(a1, a2)

    def test_duplicate_name_rejected(self):
        store = nn.ParamStore(seed=0)
        store.create("w", (1, 1))
        with pytest.raises(ValueError):
            store.create("w", (1, 1))


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(77)
        values = {
            "block.weight": rng.normal(size=(7, 3)) * 1e3,
            "block.bias": rng.normal(size=(7,)) * 1e-7,
            "scalar": np.array(math.pi),
        }
        path = tmp_path / "params.txt"
        nn.save_params(path, values, meta={"mode": "test", "width": "7"})
        loaded, meta = nn.load_params(path)
        assert meta == {"mode": "test", "width": "7"}
        assert loaded.keys() == values.keys()
        for name in values:
            np.testing.assert_array_equal(loaded[name], np.asarray(values[name]))

    def test_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("something else\n")
        with pytest.raises(ShapeError):
            nn.load_params(path)


class TestResidualBlock:
    def test_matches_manual_formula(self):
        store = nn.ParamStore(seed=31)
        block = nn.ResidualBlock(store, "r", 4)
        x = np.random.default_rng(2).normal(size=(3, 4))
        got = block(nn.Var(x)).value

        def np_silu(z):
            return z / (1.0 + np.exp(-z))

        w1, b1 = block.d1.weight.value, block.d1.bias.value
        w2, b2 = block.d2.weight.value, block.d2.bias.value
        inner = np_silu(np_silu(x) @ w1.T + b1) @ w2.T + b2
        np.testing.assert_allclose(got, (x + inner) / np.sqrt(2.0), atol=1e-14)
