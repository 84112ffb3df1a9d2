import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monocon import tensor as T
from monocon.errors import ConfigError, DegenerateError, DimensionError
from monocon.objective import supcon_loss, supcon_loss_oracle
from monocon.tensor import Tensor

from .conftest import central_diff, max_rel_err


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestClosedForm:
    def test_two_orthogonal_pairs(self):
        # each anchor: one positive at similarity 1, two negatives at 0
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        expected = 4 * math.log(1 + 2 / math.e)
        assert supcon_loss(z, [0, 0, 1, 1], 1.0).value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_temperature_scales_logits(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        tau = 0.25
        expected = 4 * math.log(1 + 2 * math.exp(-1 / tau))
        assert supcon_loss(z, [0, 0, 1, 1], tau).value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_all_same_label_identical_rows(self):
        # every other sample is a positive at the same similarity: loss = log(n-1) per anchor
        z = np.tile([[0.6, 0.8]], (5, 1))
        assert supcon_loss(z, [3] * 5, 0.1).value[0, 0] == pytest.approx(5 * math.log(4), abs=1e-10)

    def test_mean_reduction_divides_by_valid_anchors(self, rng):
        z = unit_rows(rng, 7, 3)
        y = [0, 0, 1, 1, 1, 2, 3]  # two singleton anchors are skipped
        s = supcon_loss(z, y, 0.2, "sum").value[0, 0]
        m = supcon_loss(z, y, 0.2, "mean").value[0, 0]
        assert m == pytest.approx(s / 5, rel=1e-14)

    def test_pair_of_same_label_is_zero(self):
        z = np.array([[0.6, 0.8], [1.0, 0.0]])
        assert supcon_loss(z, [1, 1]).value[0, 0] == 0.0
        assert supcon_loss_oracle(z, [1, 1]) == 0.0

    def test_four_identical(self):
        z = np.tile([[1.0, 0.0, 0.0]], (4, 1))
        assert supcon_loss(z, [0] * 4, 0.1).value[0, 0] == pytest.approx(4 * math.log(3), abs=1e-12)

    def test_high_temperature_limit(self, rng):
        # uniform softmax: each anchor contributes log |A(i)|
        z = unit_rows(rng, 6, 3)
        v = supcon_loss_oracle(z, [0, 0, 1, 1, 2, 2], 1e9)
        assert v == pytest.approx(6 * math.log(5), rel=1e-8)


class TestInvariances:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation(self, seed):
        r = np.random.default_rng(seed)
        z, y = unit_rows(r, 10, 4), r.integers(0, 3, 10)
        y[1] = y[0]
        p = r.permutation(10)
        a = supcon_loss(z, y, 0.1).value[0, 0]
        assert abs(a - supcon_loss(z[p], y[p], 0.1).value[0, 0]) <= 1e-12 * max(1.0, abs(a))

    def test_relabeling_exact(self, rng):
        z, y = unit_rows(rng, 9, 3), np.array([0, 0, 1, 1, 2, 2, 0, 1, 2])
        relabeled = np.array([7, 3, 5])[y]
        assert supcon_loss(z, y, 0.1).value[0, 0] == supcon_loss(z, relabeled, 0.1).value[0, 0]

    def test_finite_with_near_duplicates_at_low_temperature(self, rng):
        base = unit_rows(rng, 1, 5)
        z = base + 1e-9 * rng.normal(size=(8, 5))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        assert np.isfinite(supcon_loss(z, [0, 1] * 4, 0.01).value[0, 0])


class TestOracle:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 32), st.integers(1, 5), st.integers(2, 8), st.integers(0, 2**31))
    def test_matches_double_loop(self, n, c, d, seed):
        r = np.random.default_rng(seed)
        y = r.integers(0, c, size=n)
        y[1] = y[0]  # at least one positive pair
        z = unit_rows(r, n, d)
        got = supcon_loss(z, y, 0.1).value[0, 0]
        assert abs(got - supcon_loss_oracle(z, y, 0.1)) <= 1e-10 * max(1.0, abs(got))

    def test_stable_at_small_temperature(self, rng):
        z = unit_rows(rng, 12, 4)
        y = np.repeat([0, 1, 2], 4)
        v = supcon_loss(z, y, 1e-3).value[0, 0]
        assert np.isfinite(v)


class TestGradient:
    @pytest.mark.parametrize("reduction", ["sum", "mean"])
    def test_matches_finite_differences_through_normalization(self, rng, reduction):
        x0 = rng.normal(size=(9, 4))
        y = np.array([0, 0, 1, 1, 1, 2, 2, 3, 0])

        def f(x):
            return supcon_loss(T.row_l2_normalize(x), y, 0.1, reduction).value[0, 0]

        leaf = Tensor(x0, requires_grad=True)
        T.backward(supcon_loss(T.row_l2_normalize(leaf), y, 0.1, reduction))
        assert max_rel_err(leaf.grad, central_diff(f, x0), floor=1e-6) < 1e-5

    def test_singleton_anchor_still_gets_gradient_as_negative(self, rng):
        z = unit_rows(rng, 4, 3)
        leaf = Tensor(z, requires_grad=True)
        T.backward(supcon_loss(leaf, [0, 0, 1, 2], 0.5))
        assert np.abs(leaf.grad[2]).sum() > 0

    def test_loss_not_increased_by_gradient_step(self, rng):
        x = rng.normal(size=(10, 5))
        y = np.repeat([0, 1], 5)
        leaf = Tensor(x, requires_grad=True)
        loss = supcon_loss(T.row_l2_normalize(leaf), y, 0.5)
        T.backward(loss)
        stepped = x - 1e-3 * leaf.grad
        after = supcon_loss(T.row_l2_normalize(stepped), y, 0.5).value[0, 0]
        assert after < loss.value[0, 0]


class TestValidation:
    def test_rejects_unnormalized(self):
        with pytest.raises(DimensionError):
            supcon_loss(np.array([[2.0, 0.0], [1.0, 0.0]]), [0, 0])

    def test_rejects_nonpositive_temperature(self):
        z = np.eye(2)
        with pytest.raises(ConfigError):
            supcon_loss(z, [0, 0], 0.0)

    def test_rejects_batch_of_one(self):
        with pytest.raises(DegenerateError):
            supcon_loss(np.array([[1.0, 0.0]]), [0])

    def test_rejects_no_positive_pairs(self):
        with pytest.raises(DegenerateError):
            supcon_loss(np.eye(3), [0, 1, 2])
        with pytest.raises(DegenerateError):
            supcon_loss_oracle(np.eye(3), [0, 1, 2])

    def test_label_length_mismatch(self):
        with pytest.raises(DimensionError):
            supcon_loss(np.eye(3), [0, 0])
