import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monocon import tensor as T
from monocon.errors import DataError, DegenerateError, DimensionError, DomainError, GraphError
from monocon.models import ModelConfig, forward_model, init_params, param_leaves
from monocon.objective import supcon_loss
from monocon.tensor import Tensor

from .conftest import central_diff, max_rel_err


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, np.eye(2)).value, a)

    def test_row_times_column(self):
        assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).value.tolist() == [[11.0]]

    def test_against_loops(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(T.matmul(a, b).value, naive_matmul(a, b), rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
    def test_against_loops_random_sizes(self, n, k, m, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(n, k)), r.normal(size=(k, m))
        np.testing.assert_allclose(T.matmul(a, b).value, naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestElementwise:
    def test_leaky_relu(self):
        out = T.elementwise([[-1.0, 0.0, 2.0]], "leaky_relu", alpha=0.01).value
        np.testing.assert_array_equal(out, [[-0.01, 0.0, 2.0]])

    def test_square(self):
        np.testing.assert_array_equal(T.elementwise([[-3.0, 2.0]], "square").value, [[9.0, 4.0]])

    def test_exp_log_roundtrip(self, rng):
        x = rng.uniform(0.1, 5.0, size=(6, 7))
        np.testing.assert_allclose(T.log(T.exp(x)).value, x, rtol=0, atol=1e-12)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log([[1.0, 0.0]])

    def test_binary_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.elementwise(np.ones((2, 2)), "add", np.ones((2, 3)))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
           arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
    def test_binary_match_numpy(self, a, b):
        np.testing.assert_array_equal(T.add(a, b).value, a + b)
        np.testing.assert_array_equal(T.sub(a, b).value, a - b)
        np.testing.assert_array_equal(T.mul(a, b).value, a * b)
        np.testing.assert_array_equal(T.scale(a, 2.5).value, a * 2.5)


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(T.row_l2_normalize([[3.0, 4.0]]).value, [[0.6, 0.8]])

    def test_unit_row_unchanged(self):
        x = np.array([[0.6, 0.8], [1.0, 0.0]])
        np.testing.assert_allclose(T.row_l2_normalize(x).value, x, rtol=0, atol=1e-15)

    def test_zero_row(self):
        with pytest.raises(DegenerateError):
            T.row_l2_normalize([[1.0, 1.0], [0.0, 0.0]])

    def test_gradient(self, rng):
        x0 = rng.normal(size=(4, 5))

        def f(x):
            return T.total(T.row_l2_normalize(x)).value[0, 0]

        leaf = Tensor(x0, requires_grad=True)
        T.backward(T.total(T.row_l2_normalize(leaf)))
        assert max_rel_err(leaf.grad, central_diff(f, x0)) < 1e-6


# unary/binary ops composed into a scalar through a fixed random weighting
OPS = {
    "square": lambda t: T.square(t),
    "leaky_relu": lambda t: T.leaky_relu(t, 0.1),
    "scale": lambda t: T.scale(t, -1.7),
    "exp": lambda t: T.exp(t),
    "log": lambda t: T.log(T.add(T.square(t), Tensor(np.ones(t.shape)))),
    "normalize": lambda t: T.row_l2_normalize(t),
    "mul_self": lambda t: T.mul(t, T.exp(t)),
    "sub": lambda t: T.sub(T.square(t), t),
    "add_row": lambda t: T.add_row(t, Tensor(np.arange(t.shape[1], dtype=float).reshape(1, -1))),
    "matmul": lambda t: T.matmul(t, Tensor(np.linspace(-1, 1, t.shape[1] * 2).reshape(t.shape[1], 2))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    x0 = rng.normal(size=(3, 4))
    x0[np.abs(x0) < 0.05] = 0.3  # keep away from the leaky-relu kink
    op = OPS[name]
    probe = Tensor(rng.normal(size=op(Tensor(x0)).shape))

    def f(x):
        return T.total(T.mul(op(Tensor(x)), probe)).value[0, 0]

    leaf = Tensor(x0, requires_grad=True)
    T.backward(T.total(T.mul(op(leaf), probe)))
    assert max_rel_err(leaf.grad, central_diff(f, x0)) < 1e-4


class TestBackward:
    def test_sum_of_squares(self):
        w = Tensor([[1.0, 2.0]], requires_grad=True)
        T.backward(T.total(T.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [[2.0, 4.0]])

    def test_constant_loss_gives_zero_gradient(self):
        w = Tensor([[1.0, -2.0]], requires_grad=True)
        T.backward(T.total(T.scale(w, 0.0)))
        np.testing.assert_array_equal(w.grad, [[0.0, 0.0]])

    def test_reused_node_accumulates(self):
        x = Tensor([[3.0]], requires_grad=True)
        T.backward(T.total(T.add(x, x)))
        assert x.grad[0, 0] == 2.0

    def test_diamond_graph_visits_each_node_once(self):
        x = Tensor([[2.0]], requires_grad=True)
        y = T.square(x)
        loss = T.total(T.add(T.mul(y, y), y))  # x^4 + x^2
        T.backward(loss)
        assert x.grad[0, 0] == 4 * 8 + 2 * 2

    def test_non_scalar_root(self):
        with pytest.raises(GraphError):
            T.backward(Tensor(np.ones((2, 2))))

    def test_repeated_backward_rejected_until_reset(self):
        w = Tensor([[1.0, 2.0]], requires_grad=True)
        loss = T.total(T.square(w))
        T.backward(loss)
        with pytest.raises(GraphError):
            T.backward(loss)
        T.reset(loss)
        T.backward(loss)
        np.testing.assert_array_equal(w.grad, [[2.0, 4.0]])

    def test_gradient_shapes_match_values(self, rng):
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 3)))
        loss = T.total(T.leaky_relu(T.matmul(x, w)))
        T.backward(loss)
        for node in T._topo_order(loss):
            assert node.grad.shape == node.value.shape

    def test_supcon_through_head(self, rng):
        """Full model + SupCon gradient w.r.t. every parameter, checked by central differences."""
        params = init_params(ModelConfig(d_in=6, d_enc=4, head="monotonic"), seed=3)
        x = rng.normal(size=(10, 6))
        y = np.array([0, 0, 1, 1, 2, 2, 0, 1, 2, 0])
        leaves = param_leaves(params)
        loss = supcon_loss(forward_model(x, params, leaves)["head_normalized"], y, 0.1, "mean")
        T.backward(loss)
        arrays = [a for _, a in params.named_arrays()]
        for k, leaf in enumerate(leaves):
            def f(a, k=k):
                arrs = list(arrays)
                arrs[k] = a
                p = params.replace_arrays(arrs)
                return supcon_loss(forward_model(x, p)["head_normalized"], y, 0.1, "mean").value[0, 0]

            assert max_rel_err(leaf.grad, central_diff(f, arrays[k]), floor=1e-6) < 1e-4


class TestMatrixIngest:
    def test_rejects_nan(self):
        with pytest.raises(DataError, match="row 1, col 0"):
            T.as_matrix([[1.0, 2.0], [np.nan, 0.0]])

    def test_rejects_3d(self):
        with pytest.raises(DimensionError):
            T.as_matrix(np.zeros((2, 2, 2)))

    def test_vector_is_row(self):
        assert T.as_matrix([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_forward_deterministic(self, rng):
        a, b = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
        r1 = T.total(T.leaky_relu(T.matmul(a, b))).value
        r2 = T.total(T.leaky_relu(T.matmul(a.copy(), b.copy()))).value
        assert r1.tobytes() == r2.tobytes()
