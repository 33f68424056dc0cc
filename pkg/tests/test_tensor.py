import numpy as np
import numpy.testing as npt
import pytest

from noisymim import tensor as tz
from noisymim.errors import ContractError, DimensionError, DomainError
from noisymim.tensor import Tensor, backward, grad_check, zero_grad


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(tz.matmul(a, b).data, b.data)

    def test_hand_computed(self):
        out = tz.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_array_equal(out.data, [[11.0]])

    def test_grad_of_sum_is_ones_bt(self):
        a = Tensor(rng(1).normal(size=(5, 7)), requires_grad=True)
        b = Tensor(rng(2).normal(size=(7, 3)))
        backward(tz.matmul(a, b).sum())
        npt.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=1e-12)
        err = grad_check(lambda t: tz.matmul(t, b).sum(), Tensor(a.data), eps=1e-6)
        assert err < 1e-6

    def test_shape_errors_name_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tz.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_broadcast(self):
        a = Tensor(rng(3).normal(size=(4, 2, 5, 6)), requires_grad=True)
        b = Tensor(rng(4).normal(size=(6, 3)), requires_grad=True)
        out = tz.matmul(a, b)
        assert out.shape == (4, 2, 5, 3)
        backward(out.sum())
        assert a.grad.shape == a.shape and b.grad.shape == b.shape
        ref = a.data.reshape(-1, 6).T @ np.ones((4 * 2 * 5, 3))
        npt.assert_allclose(b.grad, ref, rtol=1e-10)


class TestSoftmaxRows:
    def test_symmetry(self):
        npt.assert_allclose(tz.softmax_rows(Tensor([0.0, 0.0, 0.0])).data, np.full(3, 1 / 3))

    def test_stability_no_overflow(self):
        out = tz.softmax_rows(Tensor([1000.0, 0.0])).data
        npt.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_reference_values(self):
        out = tz.softmax_rows(Tensor([1.0, 2.0, 3.0])).data
        npt.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    @pytest.mark.parametrize("scale", [1.0, 1e2, 1e4])
    def test_rows_sum_to_one(self, scale):
        x = Tensor(rng(5).normal(size=(6, 9)) * scale)
        sums = tz.softmax_rows(x).data.sum(axis=-1)
        npt.assert_allclose(sums, 1.0, atol=1e-9)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = tz.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = tz.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        npt.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        gain = Tensor(rng(7).normal(size=8) * 0.2 + 1.0)
        bias = Tensor(rng(8).normal(size=8))
        mix = rng(9).normal(size=(4, 8))
        err = grad_check(lambda t: (tz.layer_norm(t, gain, bias) * mix).sum(),
                         Tensor(rng(10).normal(size=(4, 8))))
        assert err < 1e-6


class TestElementwise:
    def test_add(self):
        npt.assert_array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_gelu_fixed_points(self):
        assert tz.gelu(Tensor(0.0)).item() == 0.0
        assert abs(tz.gelu(Tensor(1.0)).item() - 0.8411919906082768) < 1e-12

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            tz.log(Tensor([1.0, 0.0]))

    def test_scalar_operand(self):
        npt.assert_array_equal((Tensor([1.0, 2.0]) * 3.0).data, [3.0, 6.0])

    def test_sqrt_value_and_grad(self):
        x = Tensor(np.abs(rng(11).normal(size=5)) + 0.5)
        assert grad_check(lambda t: tz.sqrt(t).sum(), x) < 1e-7


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor([1.0, 5.0, -2.0], requires_grad=True)
        backward(w.sum())
        npt.assert_array_equal(w.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward((w * w).sum())
        npt.assert_array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(w + w)

    def test_unreachable_leaves_get_zero(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        orphan = Tensor([3.0], requires_grad=True)
        grads = backward(w.sum(), leaves=[w, orphan])
        npt.assert_array_equal(grads[orphan], [0.0])

    def test_accumulation_matches_duplicated_leaf(self):
        data = rng(12).normal(size=4)
        w = Tensor(data.copy(), requires_grad=True)
        backward((w * w).sum())
        a = Tensor(data.copy(), requires_grad=True)
        b = Tensor(data.copy(), requires_grad=True)
        backward((a * b).sum(), leaves=[a, b])
        npt.assert_allclose(w.grad, a.grad + b.grad, rtol=1e-12)

    def test_deterministic_bit_identical(self):
        x = Tensor(rng(13).normal(size=(6, 6)), requires_grad=True)
        w = Tensor(rng(14).normal(size=(6, 6)), requires_grad=True)
        loss = (tz.softmax_rows(tz.matmul(x, w)) * rng(15).normal(size=(6, 6))).sum()
        backward(loss)
        first = (x.grad.copy(), w.grad.copy())
        zero_grad([x, w])
        backward(loss)
        assert np.array_equal(first[0], x.grad) and np.array_equal(first[1], w.grad)

    def test_grad_accumulates_across_backward_calls(self):
        w = Tensor([1.0, 1.0], requires_grad=True)
        backward(w.sum())
        backward(w.sum())
        npt.assert_array_equal(w.grad, [2.0, 2.0])


class TestGradCheck:
    def test_sum_is_exact(self):
        assert grad_check(lambda t: t.sum(), Tensor(rng(16).normal(size=6))) < 1e-10

    def test_sum_of_squares(self):
        assert grad_check(lambda t: (t * t).sum(), Tensor(rng(17).normal(size=8))) < 1e-7

    def test_softmax_cross_row_composite(self):
        mix = rng(18).normal(size=(3, 5))
        err = grad_check(lambda t: (tz.softmax_rows(t) * mix).sum(),
                         Tensor(rng(19).normal(size=(3, 5))))
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_all_op_families_ten_seeds(self, seed):
        from noisymim.verify import op_family_checks

        for name, err in op_family_checks(seed=seed):
            assert err < 1e-4, f"{name} grad check failed at seed {seed}: {err}"


class TestShapeOps:
    def test_reshape_transpose_roundtrip_grads(self):
        x = Tensor(rng(20).normal(size=(2, 3, 4)), requires_grad=True)
        y = tz.transpose(tz.reshape(x, (6, 4)), (1, 0))
        backward((y * rng(21).normal(size=(4, 6))).sum())
        assert x.grad.shape == (2, 3, 4)

    def test_narrow_and_concat_inverse(self):
        x = Tensor(rng(22).normal(size=(5, 3)), requires_grad=True)
        top = tz.narrow(x, 0, 0, 2)
        bottom = tz.narrow(x, 0, 2, 3)
        y = tz.concat([top, bottom], axis=0)
        npt.assert_array_equal(y.data, x.data)
        backward(y.sum())
        npt.assert_array_equal(x.grad, np.ones((5, 3)))

    def test_broadcast_to_sums_gradient(self):
        v = Tensor(rng(23).normal(size=4), requires_grad=True)
        backward(tz.broadcast_to(v, (3, 4)).sum())
        npt.assert_array_equal(v.grad, np.full(4, 3.0))

    def test_no_grad_context(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with tz.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()
