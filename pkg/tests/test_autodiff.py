import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmdef import autodiff as ad
from pmdef.autodiff import Tape, Tensor, backward, grad_check
from pmdef.errors import (
    ContractError,
    DimensionError,
    EvaluationError,
    NonFiniteError,
    ParameterError,
    ValidationError,
)
from toys import checked_grad


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_hand_case():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0], [6.0]]))
    assert np.array_equal(ad.matmul(a, b).data, np.array([[17.0], [39.0]]))


def test_matmul_shape_mismatch_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(DimensionError) as err:
        ad.matmul(a, b)
    assert "(2, 3)" in str(err.value)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(0).random((2, 5, 5, 1)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = ad.conv2d(x, k, stride=1, padding="valid")
    assert np.array_equal(out.data, x.data)


def test_conv2d_ones_sum():
    x = Tensor(np.ones((1, 2, 2, 1)))
    k = Tensor(np.ones((2, 2, 1, 1)))
    out = ad.conv2d(x, k, stride=1, padding="valid")
    assert out.shape == (1, 1, 1, 1)
    assert out.data.ravel()[0] == 4.0


def test_conv2d_shape_formula():
    x = Tensor(np.zeros((1, 4, 4, 1)))
    k = Tensor(np.zeros((2, 2, 1, 3)))
    assert ad.conv2d(x, k, stride=2, padding="valid").shape == (1, 2, 2, 3)


def test_conv2d_kernel_too_large():
    x = Tensor(np.zeros((1, 2, 2, 1)))
    k = Tensor(np.zeros((3, 3, 1, 1)))
    with pytest.raises(DimensionError):
        ad.conv2d(x, k, stride=1, padding="valid")


def test_conv2d_one_hot_kernel_selects_channel():
    x = Tensor(np.random.default_rng(1).random((2, 4, 4, 3)))
    k = np.zeros((1, 1, 3, 1))
    k[0, 0, 2, 0] = 1.0
    out = ad.conv2d(x, Tensor(k), stride=1, padding="valid")
    assert np.array_equal(out.data[..., 0], x.data[..., 2])


def test_conv2d_same_padding_shape():
    x = Tensor(np.zeros((1, 5, 5, 2)))
    k = Tensor(np.zeros((3, 3, 2, 4)))
    assert ad.conv2d(x, k, stride=2, padding="same").shape == (1, 3, 3, 4)


# ---------------------------------------------------------------------------
# maxpool2d


def test_maxpool_constant_input():
    x = Tensor(np.full((1, 4, 4, 2), 0.7))
    out = ad.maxpool2d(x, 2, 2)
    assert np.all(out.data == 0.7)


def test_maxpool_hand_case():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert ad.maxpool2d(x, 2, 2).data.ravel()[0] == 4.0


def test_maxpool_shape_formula():
    x = Tensor(np.zeros((1, 4, 4, 3)))
    assert ad.maxpool2d(x, 2, 2).shape == (1, 2, 2, 3)


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        ad.maxpool2d(Tensor(np.zeros((1, 2, 2, 1))), 3, 1)


def test_maxpool_tie_routes_first():
    x = Tensor(np.array([[2.0, 2.0], [1.0, 2.0]]).reshape(1, 2, 2, 1), requires_grad=True)
    with Tape() as tape:
        out = ad.maxpool2d(x, 2, 2)
        loss = ad.sum_all(out)
    backward(tape, loss)
    expected = np.zeros((1, 2, 2, 1))
    expected[0, 0, 0, 0] = 1.0  # first row-major maximum
    assert np.array_equal(x.grad, expected)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_on_zeros():
    out = ad.softmax(Tensor(np.zeros(3)))
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_known_values():
    out = ad.softmax(Tensor(np.array([math.log(1.0), math.log(3.0)])))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(-50, 50))
@settings(max_examples=80, deadline=None)
def test_softmax_shift_invariance_and_row_sum(logits, c):
    z = np.asarray(logits)
    a = ad.softmax(Tensor(z)).data
    b = ad.softmax(Tensor(z + c)).data
    assert abs(a.sum() - 1.0) <= 1e-12
    assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# kl_divergence


def test_kl_identical_is_zero():
    p = Tensor(np.array([0.2, 0.5, 0.3]))
    assert ad.kl_divergence(p, Tensor(p.data.copy())).item() == 0.0


def test_kl_onehot_vs_uniform():
    val = ad.kl_divergence(Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.5, 0.5]))).item()
    assert val == pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_hand_case():
    val = ad.kl_divergence(Tensor(np.array([0.9, 0.1])), Tensor(np.array([0.1, 0.9]))).item()
    assert val == pytest.approx(0.8 * math.log(9.0), abs=1e-12)
    assert val == pytest.approx(1.757780, abs=1e-6)


def test_kl_batched_is_row_mean():
    p = np.array([[0.9, 0.1], [0.5, 0.5]])
    q = np.array([[0.1, 0.9], [0.5, 0.5]])
    batched = ad.kl_divergence(Tensor(p), Tensor(q)).item()
    rows = [ad.kl_divergence(Tensor(p[i]), Tensor(q[i])).item() for i in range(2)]
    assert batched == pytest.approx(np.mean(rows), abs=1e-15)


def test_kl_rejects_unnormalized():
    with pytest.raises(ValidationError):
        ad.kl_divergence(Tensor(np.array([0.7, 0.7])), Tensor(np.array([0.5, 0.5])))
    with pytest.raises(ValidationError):
        ad.kl_divergence(Tensor(np.array([-0.1, 1.1])), Tensor(np.array([0.5, 0.5])))


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_kl_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    p = rng.random(k) + 1e-3
    p /= p.sum()
    q = rng.random(k) + 1e-3
    q /= q.sum()
    val = ad.kl_divergence(Tensor(p), Tensor(q)).item()
    assert val >= 0.0
    if np.array_equal(p, q):
        assert val == 0.0
    same = ad.kl_divergence(Tensor(p), Tensor(p.copy())).item()
    assert same == 0.0


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    grads = backward(tape, loss)
    assert np.allclose(grads[x], [2.0, 4.0, 6.0], atol=1e-15)


def test_backward_constant_function_zero_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        tape.watch(x)
        loss = ad.sum_all(ad.mul_scalar(x, 0.0))
    grads = backward(tape, loss)
    assert np.array_equal(grads[x], np.zeros(2))


def test_backward_unused_leaf_gets_zero():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        tape.watch(y)
        loss = ad.sum_all(ad.mul(x, x))
    grads = backward(tape, loss)
    assert np.array_equal(grads[y], np.zeros(1))


def test_backward_requires_scalar():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_kl_softmax_linear_matches_fd():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(4, 3)) * 0.6)
    target = rng.random(3) + 0.2
    target /= target.sum()
    tgt = Tensor(target)

    def f(x):
        return ad.kl_divergence(tgt, ad.softmax(ad.matmul(x, w)))

    err = grad_check(f, Tensor(rng.normal(size=(1, 4)) * 0.5), 1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_linear_exact():
    w = Tensor(np.array([0.3, -0.7, 1.2]))

    def f(x):
        return ad.sum_all(ad.mul(x, w))

    err = grad_check(f, Tensor(np.array([0.1, 0.2, 0.3])), 1e-5)
    assert err < 1e-10


def test_grad_check_kl_softmax_conv():
    rng = np.random.default_rng(3)
    k = Tensor(rng.normal(size=(2, 2, 1, 2)) * 0.5)
    w = Tensor(rng.normal(size=(8, 3)) * 0.4)
    target = np.array([0.5, 0.2, 0.3])

    def f(x):
        h = ad.conv2d(x, k, stride=1, padding="valid")
        z = ad.matmul(ad.reshape(h, (1, 8)), w)
        return ad.kl_divergence(Tensor(target), ad.softmax(z))

    err = grad_check(f, Tensor(rng.random((1, 3, 3, 1))), 1e-5)
    assert err < 1e-4


def test_grad_check_rejects_zero_step():
    with pytest.raises(ParameterError):
        grad_check(lambda t: ad.sum_all(t), Tensor(np.array([1.0])), 0.0)


def test_grad_check_nonfinite_function_raises():
    def f(x):
        return ad.sum_all(ad.log(x))

    # log of a negative interval is non-finite -> forward raises
    with pytest.raises((EvaluationError, NonFiniteError)):
        grad_check(f, Tensor(np.array([1e-9])), 1e-5)


# ---------------------------------------------------------------------------
# per-primitive finite-difference property (>=100 seeds each)


def _case_add(rng):
    b = Tensor(rng.normal(size=3))
    return (lambda x: ad.sum_all(ad.mul(ad.add(x, b), ad.add(x, b)))), Tensor(rng.normal(size=(2, 3)))


def _case_sub(rng):
    b = Tensor(rng.normal(size=(2, 3)))
    return (lambda x: ad.mean_all(ad.mul(ad.sub(x, b), ad.sub(x, b)))), Tensor(rng.normal(size=(2, 3)))


def _case_mul(rng):
    b = Tensor(rng.normal(size=(4,)))
    return (lambda x: ad.sum_all(ad.mul(x, b))), Tensor(rng.normal(size=(4,)))


def _case_matmul(rng):
    w = Tensor(rng.normal(size=(3, 2)))
    return (lambda x: ad.sum_all(ad.mul(ad.matmul(x, w), ad.matmul(x, w)))), Tensor(rng.normal(size=(2, 3)))


def _case_relu(rng):
    return (lambda x: ad.sum_all(ad.mul(ad.relu(x), ad.relu(x)))), Tensor(rng.normal(size=(2, 4)))


def _case_tanh(rng):
    return (lambda x: ad.sum_all(ad.tanh(x))), Tensor(rng.normal(size=(5,)))


def _case_log(rng):
    return (lambda x: ad.sum_all(ad.log(x))), Tensor(rng.random(4) + 0.5)


def _case_clip(rng):
    return (lambda x: ad.sum_all(ad.mul(ad.clip(x, 0.0, 1.0), ad.clip(x, 0.0, 1.0)))), Tensor(rng.normal(size=(6,)) * 0.8 + 0.5)


def _case_maximum_scalar(rng):
    return (lambda x: ad.sum_all(ad.maximum_scalar(x, 0.25))), Tensor(rng.normal(size=(5,)))


def _case_softmax(rng):
    w = Tensor(rng.normal(size=(2, 4)))
    return (lambda x: ad.sum_all(ad.mul(ad.softmax(x), w))), Tensor(rng.normal(size=(2, 4)))


def _case_logsumexp(rng):
    return (lambda x: ad.sum_all(ad.logsumexp(x))), Tensor(rng.normal(size=(3, 4)))


def _case_take_per_row(rng):
    idx = rng.integers(0, 3, size=2)
    return (lambda x: ad.sum_all(ad.take_per_row(x, idx))), Tensor(rng.normal(size=(2, 3)))


def _case_rowmax(rng):
    return (lambda x: ad.sum_all(ad.rowmax(x))), Tensor(rng.normal(size=(3, 4)))


def _case_conv2d(rng):
    k = Tensor(rng.normal(size=(2, 2, 1, 2)) * 0.7)
    return (lambda x: ad.sum_all(ad.mul(ad.conv2d(x, k, 1, "same"), ad.conv2d(x, k, 1, "same")))), Tensor(
        rng.normal(size=(1, 3, 3, 1))
    )


def _case_conv2d_filters(rng):
    x = Tensor(rng.normal(size=(1, 3, 3, 2)))
    return (lambda w: ad.sum_all(ad.mul(ad.conv2d(x, w, 1, "valid"), ad.conv2d(x, w, 1, "valid")))), Tensor(
        rng.normal(size=(2, 2, 2, 1)) * 0.7
    )


def _case_maxpool(rng):
    return (lambda x: ad.sum_all(ad.mul(ad.maxpool2d(x, 2, 1), ad.maxpool2d(x, 2, 1)))), Tensor(rng.normal(size=(1, 3, 3, 2)))


def _case_standardize(rng):
    w = Tensor(rng.normal(size=(1, 2, 2, 1)))
    return (lambda x: ad.sum_all(ad.mul(ad.standardize_per_image(x), w))), Tensor(rng.normal(size=(1, 2, 2, 1)))


def _case_kl(rng):
    k = int(rng.integers(2, 5))
    raw_p = rng.random(k) + 0.3
    tgt = Tensor(raw_p / raw_p.sum())

    def f(x):
        return ad.kl_divergence(tgt, ad.softmax(x))

    return f, Tensor(rng.normal(size=(1, k)))


def _case_kl_both_sides(rng):
    k = 3
    w = Tensor(rng.normal(size=(k, k)) * 0.5)

    def f(x):
        p = ad.softmax(x)
        q = ad.softmax(ad.matmul(x, w))
        return ad.kl_divergence(p, q)

    return f, Tensor(rng.normal(size=(1, k)))


def _case_dropout(rng):
    mask_rng_seed = int(rng.integers(0, 2**32))

    def f(x):
        return ad.sum_all(ad.dropout(x, 0.4, np.random.default_rng(mask_rng_seed)))

    return f, Tensor(rng.normal(size=(3, 3)))


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "tanh": _case_tanh,
    "log": _case_log,
    "clip": _case_clip,
    "maximum_scalar": _case_maximum_scalar,
    "softmax": _case_softmax,
    "logsumexp": _case_logsumexp,
    "take_per_row": _case_take_per_row,
    "rowmax": _case_rowmax,
    "conv2d": _case_conv2d,
    "conv2d_filters": _case_conv2d_filters,
    "maxpool2d": _case_maxpool,
    "standardize_per_image": _case_standardize,
    "kl_divergence": _case_kl,
    "kl_divergence_both_sides": _case_kl_both_sides,
    "dropout": _case_dropout,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    builder = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(100):
        worst = max(worst, checked_grad(builder, seed * 7919 + hash(name) % 1000))
    assert worst < 1e-4, f"{name}: max relative error {worst}"


# ---------------------------------------------------------------------------
# overflow and tape behavior


def test_overflow_is_an_error_not_a_value():
    x = Tensor(np.array([1e308]))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError):
            ad.add(x, x)


def test_tape_topological_order_and_single_visit():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        a = ad.mul(x, x)
        b = ad.add(a, x)
        loss = ad.sum_all(ad.mul(b, b))
    produced_at = {id(rec.output): i for i, rec in enumerate(tape.records)}
    for i, rec in enumerate(tape.records):
        for t in rec.inputs:
            if id(t) in produced_at:
                assert produced_at[id(t)] < i
    grads = backward(tape, loss)
    # d/dx sum((x^2 + x)^2) = 2(x^2+x)(2x+1)
    expected = 2 * (x.data**2 + x.data) * (2 * x.data + 1)
    assert np.allclose(grads[x], expected, atol=1e-12)


def test_ops_do_not_record_without_tape():
    x = Tensor(np.array([1.0]), requires_grad=True)
    out = ad.mul(x, x)
    assert out.requires_grad  # propagated, but nothing recorded anywhere
