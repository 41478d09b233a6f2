import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitptq import tensor as T
from vitptq.errors import ContractError, DimensionError

from helpers import (
    central_difference,
    gelu_ref,
    layernorm_ref,
    matmul_triple_loop,
    rel_err,
    softmax_ref,
)


def t(data, rg=False):
    return T.Tensor(np.asarray(data, dtype=np.float32), requires_grad=rg)


class TestMatmulForward:
    def test_identity(self):
        out = T.matmul(t([[1, 0], [0, 1]]), t([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        out = T.matmul(t([[1, 2]]), t([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[11]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 3)).astype(np.float32)
        out = T.matmul(t(a), t(b))
        assert rel_err(out.data, matmul_triple_loop(a, b)) < 1e-5

    def test_batch_broadcast(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 6)).astype(np.float32)
        out = T.matmul(t(a), t(b))
        assert out.shape == (2, 3, 4, 6)
        assert rel_err(out.data[1, 2], matmul_triple_loop(a[1, 2], b)) < 1e-5

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            T.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


class TestSoftmaxForward:
    def test_uniform(self):
        out = T.softmax(t([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_overflow_guard(self):
        out = T.softmax(t([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-30)

    def test_against_reference(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=3.0, size=17).astype(np.float32)
        out = T.softmax(t(x), axis=0)
        assert rel_err(out.data, softmax_ref(x, 0)) < 1e-6

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(t([1.0, 2.0]), axis=3)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, values):
        out = T.softmax(t(values), axis=0)
        assert abs(float(out.data.sum()) - 1.0) < 1e-6
        assert np.all(out.data >= 0)


class TestLayernormForward:
    def test_constant_row_maps_to_zero(self):
        out = T.layernorm(t(np.full((3, 4), 2.5)), t(np.ones(4)), t(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-3)

    def test_zero_gamma_gives_beta(self):
        beta = np.arange(4, dtype=np.float32)
        rng = np.random.default_rng(3)
        out = T.layernorm(t(rng.normal(size=(2, 4))), t(np.zeros(4)), t(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (2, 4)))

    def test_against_reference(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 8)).astype(np.float32)
        gamma = rng.normal(size=8).astype(np.float32)
        beta = rng.normal(size=8).astype(np.float32)
        out = T.layernorm(t(x), t(gamma), t(beta))
        assert rel_err(out.data, layernorm_ref(x, gamma, beta)) < 1e-5

    def test_affine_shape_check(self):
        with pytest.raises(DimensionError):
            T.layernorm(t(np.zeros((2, 4))), t(np.zeros(3)), t(np.zeros(4)))


class TestGeluForward:
    def test_zero(self):
        assert T.gelu(t([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = T.gelu(t([8.0, -8.0]))
        np.testing.assert_allclose(out.data[0], 8.0, rtol=1e-6)
        assert abs(out.data[1]) < 1e-6

    def test_at_one_matches_erf_reference(self):
        out = T.gelu(t([1.0]))
        assert rel_err(out.data, gelu_ref(np.array([1.0]))) < 1e-6


class TestBackward:
    def test_sum_of_weights_gives_ones(self):
        w = t(np.arange(6.0).reshape(2, 3), rg=True)
        tape = T.GradTape()
        loss = T.sum_all(w, tape)
        T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, np.ones((2, 3), dtype=np.float32))

    def test_l2_diff_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(3, 4)).astype(np.float32)
        ta, tb = t(a, rg=True), t(b, rg=True)
        tape = T.GradTape()
        loss = T.l2_diff(ta, tb, tape)
        T.backward(loss, tape)
        fd_a, fd_b = central_difference(
            lambda x, y: float(np.sqrt(((x - y) ** 2).sum())), [a, b]
        )
        assert rel_err(ta.grad, fd_a) < 1e-3
        assert rel_err(tb.grad, fd_b) < 1e-3

    def test_off_path_tensor_gets_no_grad(self):
        w = t(np.ones(3), rg=True)
        unused = t(np.ones(3), rg=True)
        tape = T.GradTape()
        loss = T.sum_all(w, tape)
        T.backward(loss, tape)
        assert unused.grad is None

    def test_non_scalar_loss_rejected(self):
        w = t(np.ones(3), rg=True)
        tape = T.GradTape()
        out = T.mul(w, w, tape)
        with pytest.raises(ContractError):
            T.backward(out, tape)

    def test_replay_doubles_grads(self):
        w = t(np.arange(3.0), rg=True)
        tape = T.GradTape()
        loss = T.sum_all(T.mul(w, w, tape), tape)
        T.backward(loss, tape)
        once = w.grad.copy()
        T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, 2 * once)

    def test_shared_operand_accumulates(self):
        # loss = sum(w * w): dw = 2w, exercises fan-out of one tensor
        w = t([1.0, -2.0, 3.0], rg=True)
        tape = T.GradTape()
        loss = T.sum_all(T.mul(w, w, tape), tape)
        T.backward(loss, tape)
        np.testing.assert_allclose(w.grad, [2.0, -4.0, 6.0], rtol=1e-6)


def _fd_check(op_name, build, reference, arrays, h=1e-3, tol=1e-3):
    """Run op under a tape, reduce with sum, compare grads to central FD."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    tape = T.GradTape()
    out = build(tape, *tensors)
    loss = T.sum_all(out, tape) if out.data.size != 1 else out
    T.backward(loss, tape)

    def scalar(*xs):
        r = reference(*xs)
        return float(np.asarray(r, dtype=np.float64).sum())

    fds = central_difference(scalar, arrays, h=h)
    for tt, fd in zip(tensors, fds):
        assert rel_err(tt.grad, fd) < tol, f"{op_name} gradient mismatch"


PRIMITIVE_CASES = {
    "add": (
        lambda tape, a, b: T.add(a, b, tape),
        lambda a, b: a + b,
        [(3, 4), (3, 4)],
    ),
    "add_broadcast": (
        lambda tape, a, b: T.add(a, b, tape),
        lambda a, b: a + b,
        [(3, 4), (4,)],
    ),
    "sub": (
        lambda tape, a, b: T.sub(a, b, tape),
        lambda a, b: a - b,
        [(3, 4), (3, 4)],
    ),
    "mul": (
        lambda tape, a, b: T.mul(a, b, tape),
        lambda a, b: a * b,
        [(3, 4), (3, 4)],
    ),
    "scale": (
        lambda tape, a: T.scale(a, 1.7, tape),
        lambda a: 1.7 * a,
        [(3, 4)],
    ),
    "matmul": (
        lambda tape, a, b: T.matmul(a, b, tape),
        lambda a, b: a @ b,
        [(3, 4), (4, 2)],
    ),
    "matmul_batched": (
        lambda tape, a, b: T.matmul(a, b, tape),
        lambda a, b: a @ b,
        [(2, 3, 4), (4, 2)],
    ),
    "reshape": (
        lambda tape, a: T.reshape(a, (4, 3), tape),
        lambda a: a.reshape(4, 3),
        [(3, 4)],
    ),
    "transpose": (
        lambda tape, a: T.transpose(a, (1, 0), tape),
        lambda a: a.T,
        [(3, 4)],
    ),
    "slice": (
        lambda tape, a: T.slice_axis(a, 1, 1, 3, tape),
        lambda a: a[:, 1:3],
        [(3, 4)],
    ),
    "concat": (
        lambda tape, a, b: T.concat([a, b], 1, tape),
        lambda a, b: np.concatenate([a, b], axis=1),
        [(3, 2), (3, 3)],
    ),
    "softmax": (
        lambda tape, a: T.softmax(a, -1, tape),
        lambda a: softmax_ref(a, -1),
        [(3, 5)],
    ),
    "layernorm": (
        lambda tape, x, g, b: T.layernorm(x, g, b, tape=tape),
        lambda x, g, b: layernorm_ref(x, g, b),
        [(3, 6), (6,), (6,)],
    ),
    "gelu": (
        lambda tape, a: T.gelu(a, tape),
        lambda a: gelu_ref(a),
        [(3, 4)],
    ),
    "sum_all": (
        lambda tape, a: T.sum_all(a, tape),
        lambda a: a.sum(),
        [(3, 4)],
    ),
    "sum_axis": (
        lambda tape, a: T.sum_axis(a, 1, tape),
        lambda a: a.sum(axis=1),
        [(3, 4, 2)],
    ),
    "l2_diff": (
        lambda tape, a, b: T.l2_diff(a, b, tape),
        lambda a, b: np.sqrt(((a - b) ** 2).sum()),
        [(3, 4), (3, 4)],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    build, reference, shapes = PRIMITIVE_CASES[name]
    for seed in range(3):
        rng = np.random.default_rng(hash(name) % 2**32 + seed)
        arrays = [rng.normal(size=s).astype(np.float32) for s in shapes]
        _fd_check(name, build, reference, arrays)


def test_softmax_softmax_gradient_through_composition():
    # a two-op chain exercises adjoint propagation through intermediates
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 5)).astype(np.float32)
    tx = T.Tensor(x, requires_grad=True)
    tape = T.GradTape()
    y = T.softmax(tx, -1, tape)
    z = T.gelu(y, tape)
    loss = T.sum_all(z, tape)
    T.backward(loss, tape)
    fd = central_difference(
        lambda a: float(gelu_ref(softmax_ref(a, -1)).sum()), [x]
    )[0]
    assert rel_err(tx.grad, fd) < 1e-3
