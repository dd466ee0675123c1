"""Tensor core: elementwise ops, reductions, backward, rng, immutability."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from gradcheck import check_gradients
from stormseg.errors import ContractError, DomainError, ParameterError, ShapeError
from stormseg.tensor import Rng, Tensor, clip, exp, log, tensor


class TestElementwise:
    def test_add_componentwise(self):
        out = tensor([1.0, 2.0]) + tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.values, [4.0, 6.0])

    def test_mul_by_one_is_identity(self):
        x = tensor([[0.5, -3.25], [7.0, 0.0]])
        out = x * 1.0
        np.testing.assert_array_equal(out.values, x.values)

    def test_scalar_operand_forms(self):
        x = tensor([2.0, 4.0], dtype="f64")
        np.testing.assert_array_equal((1.0 + x).values, [3.0, 5.0])
        np.testing.assert_array_equal((1.0 - x).values, [-1.0, -3.0])
        np.testing.assert_array_equal((2.0 * x).values, [4.0, 8.0])
        np.testing.assert_array_equal((8.0 / x).values, [4.0, 2.0])
        np.testing.assert_array_equal((x**2.0).values, [4.0, 16.0])
        np.testing.assert_array_equal((-x).values, [-2.0, -4.0])

    def test_scalar_op_keeps_dtype(self):
        x = tensor([1.0, 2.0], dtype="f32")
        for out in (x + 0.5, x * 0.5, x / 2.0, x**2.0, 1.0 - x):
            assert out.dtype == "f32"

    def test_zero_dim_operand_acts_as_scalar(self):
        x = tensor([[1.0, 2.0], [3.0, 4.0]], dtype="f64", requires_grad=True)
        s = tensor(3.0, dtype="f64", requires_grad=True)
        (x * s).sum().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 2), 3.0))
        np.testing.assert_allclose(s.grad, 10.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            tensor([1.0, 2.0]) + tensor([1.0, 2.0, 3.0])

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(ContractError):
            tensor([1.0], dtype="f32") * tensor([1.0], dtype="f64")

    def test_log_of_nonpositive_is_domain_error(self):
        with pytest.raises(DomainError):
            log(tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            log(tensor([-2.0]))

    def test_clip_bounds_validated(self):
        with pytest.raises(ParameterError):
            clip(tensor([1.0]), 0.5, 0.5)

    def test_bad_dtype_name_rejected(self):
        with pytest.raises(ParameterError):
            tensor([1.0], dtype="f16")


class TestReduce:
    def test_sum_all_axes(self):
        assert tensor([[1.0, 2.0], [3.0, 4.0]]).sum().item() == 10.0

    def test_mean_of_constant_is_constant(self):
        assert tensor(np.full((3, 5), 2.5)).mean().item() == 2.5

    def test_sum_over_one_axis(self):
        out = tensor([[1.0, 2.0], [3.0, 4.0]]).sum(axes=0)
        np.testing.assert_array_equal(out.values, [4.0, 6.0])
        assert out.shape == (2,)

    def test_max_reduction_value(self):
        out = tensor([[1.0, 5.0], [3.0, 2.0]]).max(axes=1)
        np.testing.assert_array_equal(out.values, [5.0, 3.0])

    def test_max_tie_routes_to_first_occurrence(self):
        x = tensor([[2.0, 7.0, 7.0, 1.0]], dtype="f64", requires_grad=True)
        x.max().backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])

    def test_invalid_axis_rejected(self):
        with pytest.raises(ShapeError):
            tensor([[1.0]]).sum(axes=2)
        with pytest.raises(ShapeError):
            tensor([[1.0]]).sum(axes=(0, 0))


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = tensor(np.arange(6.0).reshape(2, 3), dtype="f64", requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_bilinear_form_grad(self):
        xv = np.array([0.5, -1.5, 2.0])
        w = tensor([1.0, 2.0, 3.0], dtype="f64", requires_grad=True)
        (w * tensor(xv, dtype="f64")).sum().backward()
        np.testing.assert_array_equal(w.grad, xv)

    def test_reuse_accumulates(self):
        x = tensor([4.0], dtype="f64", requires_grad=True)
        (x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_grads_add_across_backward_calls(self):
        x = tensor([1.0], dtype="f64", requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0])
        x.zero_grad()
        assert x.grad is None

    def test_pow_grad_at_three(self):
        x = tensor(3.0, dtype="f64", requires_grad=True)
        (x**2.0).backward()
        step = 1e-5
        fd = ((3.0 + step) ** 2 - (3.0 - step) ** 2) / (2 * step)
        assert x.grad == pytest.approx(6.0)
        assert abs(float(x.grad) - fd) / abs(fd) < 1e-6

    def test_nonscalar_backward_rejected(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_detach_blocks_gradient(self):
        x = tensor([1.0, 2.0], dtype="f64", requires_grad=True)
        y = x.detach()
        assert not y.requires_grad
        (y * 3.0).sum().backward()
        assert x.grad is None

    def test_item_needs_single_element(self):
        with pytest.raises(ContractError):
            tensor([1.0, 2.0]).item()

    def test_mean_grad_divides_by_count(self):
        x = tensor(np.ones((2, 4)), dtype="f64", requires_grad=True)
        x.mean().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 4), 0.125))


def _rng_arrays(seed, *shapes):
    r = Rng(seed)
    return [r.uniform(s, -2.0, 2.0, dtype="f64") for s in shapes]


class TestFiniteDifference:
    """Each differentiable op against the central-difference oracle."""

    def test_add(self):
        check_gradients(lambda a, b: a + b, _rng_arrays(1, (3, 4), (3, 4)))

    def test_sub(self):
        check_gradients(lambda a, b: a - b, _rng_arrays(2, (5,), (5,)))

    def test_mul(self):
        check_gradients(lambda a, b: a * b, _rng_arrays(3, (2, 3, 2), (2, 3, 2)))

    def test_div(self):
        a, b = _rng_arrays(4, (4, 4), (4, 4))
        b = b + 3.0 * np.sign(b) + 0.5  # keep denominators away from zero
        check_gradients(lambda x, y: x / y, [a, b])

    def test_pow_tensor_exponent(self):
        a, b = _rng_arrays(5, (3, 3), (3, 3))
        check_gradients(lambda x, y: (x * x + 0.5) ** y, [a, b])

    def test_neg(self):
        check_gradients(lambda a: -a, _rng_arrays(6, (7,)))

    def test_log(self):
        check_gradients(lambda a: log(a * a + 0.25), _rng_arrays(7, (4, 2)))

    def test_exp(self):
        check_gradients(lambda a: exp(a), _rng_arrays(8, (3, 5)))

    def test_clip_interior_and_exterior(self):
        a = np.array([[-3.0, -0.4], [0.3, 2.5]])
        check_gradients(lambda x: clip(x, -1.0, 1.0), [a])

    def test_sum_axes(self):
        check_gradients(lambda a: a.sum(axes=(0, 2)), _rng_arrays(9, (2, 3, 4)))

    def test_mean_axes(self):
        check_gradients(lambda a: a.mean(axes=1), _rng_arrays(10, (3, 4, 2)))

    def test_max_axes(self):
        # distinct entries so the FD step cannot cross an arg-max boundary
        a = np.arange(24.0).reshape(2, 3, 4)
        a = a[:, ::-1, :].copy()
        check_gradients(lambda x: x.max(axes=(0, 2)), [a])

    def test_scalar_variants(self):
        check_gradients(
            lambda a: (2.5 * a + 1.0) / 3.0 - (a**3.0) + (1.0 - a) + 4.0 / (a * a + 1.0),
            _rng_arrays(11, (3, 3)),
        )

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(
            np.float64,
            array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=4),
            elements=st.floats(-2.0, 2.0, allow_nan=False),
        )
    )
    def test_composite_expression(self, a):
        def build(x):
            u = x * x + 1.5
            return ((x * 0.5 + exp(x * 0.25)) * log(u) - (1.0 - x) / u).mean()

        check_gradients(build, [a])


class TestRng:
    def test_same_seed_same_draws(self):
        a = Rng(123).normal((4, 4))
        b = Rng(123).normal((4, 4))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).uniform((8,)), Rng(2).uniform((8,)))

    def test_spawn_is_keyed_and_reproducible(self):
        r = Rng(99)
        a = r.spawn(7).normal((3,))
        b = Rng(99).spawn(7).normal((3,))
        c = Rng(99).spawn(8).normal((3,))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_permutation_and_integers(self):
        p = Rng(5).permutation(10)
        assert sorted(p.tolist()) == list(range(10))
        k = Rng(5).integers(0, 4)
        assert isinstance(k, int) and 0 <= k < 4


class TestImmutability:
    def test_consumed_buffer_is_frozen(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        _ = x * 2.0
        with pytest.raises(ValueError):
            x.values[0] = 99.0

    def test_backward_leaves_forward_values_untouched(self):
        x = tensor(np.arange(1.0, 7.0).reshape(2, 3), dtype="f64", requires_grad=True)
        y = exp(x * 0.5)
        z = (y * y).mean()
        snap_x, snap_y, snap_z = x.values.copy(), y.values.copy(), z.values.copy()
        z.backward()
        np.testing.assert_array_equal(x.values, snap_x)
        np.testing.assert_array_equal(y.values, snap_y)
        np.testing.assert_array_equal(z.values, snap_z)

    def test_grad_buffer_matches_shape_and_dtype(self):
        x = tensor(np.ones((2, 2)), dtype="f32", requires_grad=True)
        (x * 3.0).sum().backward()
        assert x.grad.shape == x.shape
        assert x.grad.dtype == np.float32
