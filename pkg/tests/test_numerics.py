"""Autodiff core: frozen examples, finite-difference sweeps, error paths."""

import numpy as np
import pytest

import tryondit.numerics as nx


def r(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# frozen forward values

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nx.matmul(nx.Tensor(a), nx.Tensor(np.eye(2)))
    assert np.array_equal(out.data, a)


def test_matmul_small_example():
    out = nx.matmul(nx.Tensor([[1.0, 2.0]]), nx.Tensor([[3.0], [4.0]]))
    assert out.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_softmax_uniform():
    out = nx.softmax(nx.Tensor(np.zeros(3)))
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_known_values():
    out = nx.softmax(nx.Tensor(np.array([1.0, 2.0, 3.0])))
    want = np.array([0.09003057, 0.24472847, 0.66524096])
    assert np.allclose(out.data, want, atol=1e-4)
    assert abs(out.data.sum() - 1.0) < 1e-12


def test_softmax_masked_pair():
    x = np.array([[10.0, -3.0, 10.0]])
    mask = np.array([[True, False, True]])
    out = nx.softmax(nx.Tensor(x), mask)
    assert out.data[0, 1] == 0.0
    assert np.allclose(out.data[0, [0, 2]], 0.5, atol=1e-12)


def test_softmax_rows_sum_to_one():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 9)) * 5
        mask = rng.random((4, 9)) < 0.6
        mask[:, 0] = True  # keep every row alive
        out = nx.softmax(nx.Tensor(x), mask)
        assert np.all(out.data[~np.broadcast_to(mask, out.shape)] == 0.0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_gelu_silu_frozen_points():
    assert nx.gelu(nx.Tensor(np.array(0.0))).item() == 0.0
    assert abs(nx.gelu(nx.Tensor(np.array(1.0))).item() - 0.8413447460685429) < 1e-12
    assert abs(nx.silu(nx.Tensor(np.array(1.0))).item() - 0.7310585786300049) < 1e-12


def test_cosine_similarity_trivial_angles():
    v = nx.Tensor(np.array([1.0, 2.0, -3.0]))
    assert abs(nx.cosine_similarity(v, v).item() - 1.0) < 1e-12
    a = nx.Tensor(np.array([1.0, 0.0]))
    b = nx.Tensor(np.array([0.0, 1.0]))
    assert nx.cosine_similarity(a, b).item() == 0.0


def test_grad_of_mean_square():
    x = nx.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with nx.Graph():
        nx.backward(nx.t_mean(nx.square(x)))
    assert np.allclose(x.grad, [1.0, 2.0], atol=1e-12)  # 2x/n with n=2


def test_grad_of_weighted_sum():
    w = nx.Tensor(np.array([3.0, -1.0, 2.0]), requires_grad=True)
    x = np.array([0.5, 4.0, -2.0])
    with nx.Graph():
        nx.backward(nx.t_sum(nx.mul(w, nx.Tensor(x))))
    assert np.array_equal(w.grad, x)


def test_untouched_leaf_reads_zero_grad():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    y = nx.Tensor(np.ones(3), requires_grad=True)
    with nx.Graph():
        nx.backward(nx.t_sum(nx.square(x)))
    assert np.array_equal(y.grad, np.zeros(3))


def test_detach_blocks_gradient_flow():
    # live path contributes 2x; the detached branch contributes nothing
    x = nx.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with nx.Graph():
        loss = nx.add(nx.t_sum(nx.square(x)), nx.t_sum(nx.square(x.detach())))
        nx.backward(loss)
    assert np.allclose(x.grad, 2.0 * x.data, atol=1e-12)


def test_grads_accumulate_across_graphs():
    x = nx.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        with nx.Graph():
            nx.backward(nx.t_sum(nx.square(x)))
    assert np.allclose(x.grad, 4.0 * x.data, atol=1e-12)
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(2))


def test_forward_bitwise_deterministic():
    def run():
        a = nx.Tensor(r(0, 3, 5))
        b = nx.Tensor(r(1, 5, 4))
        h = nx.gelu(nx.matmul(a, b))
        return nx.softmax(h).data.copy()

    assert np.array_equal(run(), run())


def test_dtype_coercion():
    assert nx.Tensor([1, 2]).dtype == np.float32       # ints coerce to f32
    assert nx.Tensor(np.zeros(2)).dtype == np.float64  # f64 preserved
    assert nx.Tensor([1.0], dtype="f64").dtype == np.float64


# ---------------------------------------------------------------------------
# finite differences, op by op

def test_fd_elementwise_binary(fd):
    for seed in range(5):
        a, b = r(seed, 2, 3), r(seed + 100, 2, 3)
        fd(nx.add, [a, b], seed=seed)
        fd(nx.sub, [a, b], seed=seed)
        fd(nx.mul, [a, b], seed=seed)
        # leading-unit broadcast
        fd(nx.add, [r(seed, 3), r(seed + 7, 2, 3)], seed=seed)
        fd(nx.mul, [r(seed, 1, 3), r(seed + 7, 2, 3)], seed=seed)


def test_fd_elementwise_unary(fd):
    for seed in range(5):
        x = r(seed, 2, 3)
        fd(nx.neg, [x], seed=seed)
        fd(lambda t: nx.scale(t, 1.7), [x], seed=seed)
        fd(nx.square, [x], seed=seed)
        fd(nx.gelu, [x], seed=seed)
        fd(nx.silu, [x], seed=seed)


def test_fd_reductions(fd):
    for seed in range(5):
        x = r(seed, 2, 3, 2)
        for red in (nx.t_sum, nx.t_mean):
            fd(red, [x], seed=seed)
            fd(lambda t: red(t, axis=0), [x], seed=seed)
            fd(lambda t: red(t, axis=1, keepdims=True), [x], seed=seed)
            fd(lambda t: red(t, axis=(0, 2)), [x], seed=seed)


def test_fd_matmul(fd):
    fd(nx.matmul, [r(0, 5, 7), r(1, 7, 3)], rel_tol=1e-6)
    for seed in range(4):
        fd(nx.matmul, [r(seed, 2, 3, 4), r(seed + 9, 2, 4, 2)], seed=seed)
        fd(nx.matmul, [r(seed, 2, 3, 4), r(seed + 9, 4, 2)], seed=seed)
        fd(nx.matmul, [r(seed, 3, 4), r(seed + 9, 2, 4, 2)], seed=seed)


def test_fd_shape_ops(fd):
    for seed in range(4):
        fd(lambda t: nx.reshape(t, (3, 2, 2)), [r(seed, 2, 6)], seed=seed)
        fd(lambda t: nx.transpose(t, (2, 0, 1)), [r(seed, 2, 3, 4)], seed=seed)
        fd(lambda t: nx.expand(t, (2, 3, 4)), [r(seed, 1, 3, 1)], seed=seed)
        fd(lambda t: nx.expand(t, (2, 3)), [r(seed, 3)], seed=seed)
        fd(lambda t: nx.narrow(t, 1, 1, 3), [r(seed, 2, 5, 3)], seed=seed)
        fd(lambda a, b, c: nx.concat([a, b, c], axis=1),
           [r(seed, 2, 1), r(seed + 5, 2, 3), r(seed + 6, 2, 2)], seed=seed)


def test_fd_take_rows_with_repeats(fd):
    ids = np.array([[0, 2, 2], [4, 0, 1]])  # repeats exercise the scatter-add
    for seed in range(4):
        fd(lambda t: nx.take_rows(t, ids), [r(seed, 5, 3)], seed=seed)


def test_fd_softmax(fd):
    for seed in range(5):
        x = r(seed, 2, 4) * 3
        fd(nx.softmax, [x], seed=seed)
        mask = np.random.default_rng(seed).random((2, 4)) < 0.7
        mask[:, 0] = True
        fd(lambda t: nx.softmax(t, mask), [x], seed=seed)


def test_fd_layernorm(fd):
    for seed in range(4):
        fd(nx.layernorm_affine,
           [r(seed, 2, 3, 4), 1.0 + 0.1 * r(seed + 3, 4), 0.1 * r(seed + 5, 4)],
           seed=seed)


def test_fd_rotate_pairs(fd):
    for seed in range(4):
        ang = np.random.default_rng(seed + 50).uniform(0, 2 * np.pi, (2, 2))
        cos, sin = np.cos(ang), np.sin(ang)
        fd(lambda t: nx.rotate_pairs(t, cos, sin), [r(seed, 2, 4)], seed=seed)


def test_fd_cosine_and_mse(fd):
    for seed in range(4):
        fd(nx.cosine_similarity, [r(seed, 6), r(seed + 11, 6)], seed=seed)
        fd(nx.mse, [r(seed, 2, 3), r(seed + 11, 2, 3)], seed=seed)


def test_fd_composite_chain(fd):
    def net(x, w1, w2):
        h = nx.gelu(nx.matmul(x, w1))
        return nx.matmul(nx.softmax(h), w2)

    for seed in range(3):
        fd(net, [r(seed, 2, 3), r(seed + 20, 3, 5), r(seed + 21, 5, 2)], seed=seed)


# ---------------------------------------------------------------------------
# error paths

def test_broadcast_rejects_inner_unit_dims():
    with pytest.raises(nx.ShapeError, match="only leading unit dims"):
        nx.add(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 1))))


def test_incompatible_shapes_name_both():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
        nx.add(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 4))))


def test_dtype_mismatch_rejected():
    a = nx.Tensor(np.ones(2, dtype=np.float32))
    b = nx.Tensor(np.ones(2, dtype=np.float64))
    with pytest.raises(nx.ShapeError, match="dtype mismatch"):
        nx.add(a, b)


def test_matmul_shape_errors():
    with pytest.raises(nx.ShapeError, match="ndim >= 2"):
        nx.matmul(nx.Tensor(np.ones(3)), nx.Tensor(np.ones((3, 2))))
    with pytest.raises(nx.ShapeError, match=r"inner dims.*\(2, 3\) @ \(2, 2\)"):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 2))))
    with pytest.raises(nx.ShapeError, match="batch dims"):
        nx.matmul(nx.Tensor(np.ones((2, 3, 4))), nx.Tensor(np.ones((3, 4, 2))))


def test_expand_errors():
    with pytest.raises(nx.ShapeError, match="lower rank"):
        nx.expand(nx.Tensor(np.ones((2, 3))), (3,))
    with pytest.raises(nx.ShapeError, match="cannot expand"):
        nx.expand(nx.Tensor(np.ones((2, 3))), (4, 3))


def test_take_rows_wants_2d_table():
    with pytest.raises(nx.ShapeError, match="2-D table"):
        nx.take_rows(nx.Tensor(np.ones((2, 3, 4))), np.array([0]))


def test_rotate_pairs_odd_dim_rejected():
    with pytest.raises(nx.ShapeError, match="even last dim"):
        nx.rotate_pairs(nx.Tensor(np.ones((2, 3))), np.ones((2, 1)), np.zeros((2, 1)))


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        nx.cosine_similarity(nx.Tensor(np.zeros(3)), nx.Tensor(np.ones(3)))
    with pytest.raises(nx.ShapeError, match="flat vectors"):
        nx.cosine_similarity(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))


def test_fully_masked_row_is_an_error():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(ValueError, match=r"row \(1,\) is fully masked"):
        nx.softmax(nx.Tensor(np.ones((2, 2))), mask)


def test_nonfinite_names_the_op():
    big = nx.Tensor(np.array([1e200, 1.0]))
    with np.errstate(over="ignore"):
        with pytest.raises(nx.NonFiniteError, match="square produced non-finite"):
            nx.square(big)
        with pytest.raises(nx.NonFiniteError, match="mul produced non-finite"):
            nx.mul(big, big)


def test_backward_needs_scalar_loss():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    with nx.Graph():
        out = nx.square(x)
        with pytest.raises(nx.GraphError, match="scalar loss"):
            nx.backward(out)


def test_backward_outside_graph_is_an_error():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    loss = nx.t_sum(nx.square(x))  # no active Graph
    with pytest.raises(nx.GraphError, match="active Graph"):
        nx.backward(loss)


def test_double_backward_is_an_error():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    with nx.Graph():
        loss = nx.t_sum(nx.square(x))
        nx.backward(loss)
        with pytest.raises(nx.GraphError, match="already ran"):
            nx.backward(loss)
