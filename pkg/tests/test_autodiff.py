import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from signformer import autodiff as ad
from signformer.autodiff import Tensor


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def grads_of(fn, *inputs):
    with ad.Tape() as tape:
        out = fn(*inputs)
        ad.backward(out, tape)
    return [x.grad for x in inputs]


shapes = st.sampled_from([(3,), (2, 3), (4, 5), (2, 3, 4)])


# -- forward / backward basics ------------------------------------------------

def test_matmul_grad_check_3x3():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 3))), leaf(rng.standard_normal((3, 3)))
    assert ad.grad_check(lambda x, y: x @ y, [a, b]).passed


def test_broadcast_add_reduces_gradient_to_operand_shape():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones(3))
    ga, gb = grads_of(lambda x, y: (x + y).sum(), a, b)
    assert ga.shape == (2, 3) and gb.shape == (3,)
    np.testing.assert_array_equal(gb, [2.0, 2.0, 2.0])


def test_backward_twice_doubles_gradients_exactly():
    rng = np.random.default_rng(1)
    x = leaf(rng.standard_normal((3, 4)))
    w = leaf(rng.standard_normal((4, 2)))
    with ad.Tape() as tape:
        loss = ad.tsum(ad.sigmoid(x @ w))
        ad.backward(loss, tape, retain=True)
        first_x, first_w = x.grad.copy(), w.grad.copy()
        ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2 * first_x)
    np.testing.assert_array_equal(w.grad, 2 * first_w)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with ad.Tape() as tape:
        y = x * 2.0
        with pytest.raises(ad.ShapeError):
            ad.backward(y, tape)


def test_no_grad_records_nothing():
    x = leaf(np.ones(3))
    with ad.Tape() as tape:
        with ad.no_grad():
            _ = ad.exp(x) * 3.0
        assert len(tape) == 0


def test_non_finite_forward_raises():
    with ad.Tape():
        with pytest.raises(ad.NonFiniteError):
            ad.log(leaf([-1.0, 1.0]))


def test_relu6_kink_subgradient_is_zero():
    x = leaf([0.0, 6.0, 3.0])
    (g,) = grads_of(lambda t: ad.relu6(t).sum(), x)
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_relu6_grad_check_away_from_kinks():
    x = leaf([-1.5, -0.3, 0.4, 2.0, 5.5, 6.7, 9.0])
    assert ad.grad_check(ad.relu6, [x]).passed


def test_layer_norm_matches_reference_values():
    # reference values from an independent framework implementation
    x = Tensor(np.array([[1.0, 2.0, 4.0, 7.0]]))
    g = Tensor(np.array([1.0, 0.5, 2.0, 1.0]))
    b = Tensor(np.array([0.0, 0.1, 0.0, -0.1]))
    out = ad.layer_norm(x, g, b, eps=1e-6).data
    np.testing.assert_allclose(
        out, [[-1.0910893472666958, -0.2273268041800087, 0.4364357389066783, 1.427525086173374]], rtol=1e-12
    )


def test_layer_norm_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_cumsum_reverse_matches_flipped_numpy():
    x = np.arange(1.0, 6.0)
    np.testing.assert_array_equal(ad.cumsum(Tensor(x), reverse=True).data, [15, 14, 12, 9, 5])


def test_clamp_blocks_gradient_outside_range():
    x = leaf([-2.0, 0.5, 3.0])
    (g,) = grads_of(lambda t: ad.clamp(t, -1.0, 1.0).sum(), x)
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_fully_masked_softmax_row_is_zero():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    mask = np.array([[True, False], [False, False]])
    out = ad.softmax(x, mask=mask).data
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


def test_dropout_identity_in_eval_and_scaled_in_training():
    x = Tensor(np.ones((100, 10), dtype=np.float32))
    assert ad.dropout(x, 0.5, None, training=False) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_embedding_lookup_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding_lookup(Tensor(np.zeros((4, 2))), [0, 4])


def test_batch_norm_eval_uses_running_stats():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 16.0])
    out = ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False, eps=0.0).data
    np.testing.assert_allclose(out, [[0.0, 0.0], [1.0, 1.0]])


def test_batch_norm_training_updates_running_buffers():
    x = Tensor(np.array([[0.0], [2.0]]))
    rm, rv = np.zeros(1), np.ones(1)
    ad.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True, momentum=0.5)
    np.testing.assert_allclose(rm, [0.5])  # 0.5 * 0 + 0.5 * mean 1
    np.testing.assert_allclose(rv, [1.5])  # 0.5 * 1 + 0.5 * unbiased var 2


# -- grad_check itself -------------------------------------------------------

def test_grad_check_detects_wrong_rule():
    def bad_square(x):
        return ad.record_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # should be 2x

    report = ad.grad_check(bad_square, [leaf([0.5, -1.0, 2.0])])
    assert not report.passed
    assert report.max_error > 0.1


def test_grad_check_reports_per_input_names():
    report = ad.grad_check(lambda a, b: a * b, [leaf([1.0]), leaf([2.0])], names=["a", "b"])
    assert set(report.errors) == {"a", "b"}


# -- properties --------------------------------------------------------------

unary_ops = {
    "exp": (ad.exp, -2.0, 2.0),
    "log": (ad.log, 0.3, 3.0),
    "sigmoid": (ad.sigmoid, -4.0, 4.0),
    "swish": (ad.swish, -4.0, 4.0),
    "neg": (ad.neg, -3.0, 3.0),
}


@pytest.mark.parametrize("name", sorted(unary_ops))
@pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4)])
def test_unary_ops_grad_check_on_three_shapes(name, shape):
    fn, lo, hi = unary_ops[name]
    x = leaf(np.random.default_rng(len(shape)).uniform(lo, hi, shape))
    assert ad.grad_check(fn, [x]).passed


@pytest.mark.parametrize("shape", [(4,), (3, 6), (2, 3, 5)])
def test_relu6_grad_check_on_three_shapes(shape):
    rng = np.random.default_rng(7)
    x = rng.uniform(-2.0, 8.0, shape)
    x = np.where(np.minimum(np.abs(x), np.abs(x - 6.0)) < 0.1, 3.0, x)  # kink-avoiding
    assert ad.grad_check(ad.relu6, [leaf(x)]).passed


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
@pytest.mark.parametrize("shape", [(3,), (2, 4), (2, 2, 3)])
def test_binary_ops_grad_check_on_three_shapes(op, shape):
    rng = np.random.default_rng(3)
    a = leaf(rng.uniform(0.5, 2.0, shape))
    b = leaf(rng.uniform(0.5, 2.0, shape))
    assert ad.grad_check(op, [a, b]).passed


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
                  elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 2**31 - 1))
def test_depthwise_conv_ignores_padded_frames(valid, pad, k, seed):
    rng = np.random.default_rng(seed)
    t, c = valid + pad, 3
    x = rng.standard_normal((1, t, c))
    mask = np.zeros((1, t))
    mask[0, :valid] = 1
    w, b = Tensor(rng.standard_normal((c, k))), Tensor(rng.standard_normal(c))
    y1 = ad.conv1d_depthwise(Tensor(x), w, b, mask).data
    x2 = x.copy()
    x2[0, valid:] = rng.standard_normal((pad, c)) * 1e3
    y2 = ad.conv1d_depthwise(Tensor(x2), w, b, mask).data
    np.testing.assert_array_equal(y1[0, :valid], y2[0, :valid])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_interp_gather_at_integer_positions_is_indexing(t, q, seed):
    rng = np.random.default_rng(seed)
    seq = rng.standard_normal((t, 3))
    idx = rng.integers(0, t, size=q)
    out = ad.interp_gather(Tensor(seq), idx.astype(np.float64)).data
    np.testing.assert_array_equal(out, seq[idx])


@settings(max_examples=20, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_sum_and_mean_grad_check(shape, seed):
    x = leaf(np.random.default_rng(seed).standard_normal(shape))
    assert ad.grad_check(lambda t: ad.mean(t, axis=-1) * 2.0 + ad.tsum(t), [x]).passed


def test_float32_storage_by_default():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
