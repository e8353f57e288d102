import numpy as np
import pytest

from dave.errors import LabelError, NonFiniteError, ShapeError
from dave.tensor import (
    Tensor,
    add,
    binary_cross_entropy_vec,
    conv2d,
    float64_mode,
    grad_check,
    maxpool2d,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    softmax_nll,
    spatial_mean,
)

TOL = 1e-4


def t64(arr, requires_grad=False):
    with float64_mode():
        return Tensor(arr, requires_grad=requires_grad)


def scalar_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(w * x) as a scalar graph, built from the ops under test."""
    flat = reshape(x, (1, x.size))
    w = t64(weights.reshape(1, -1))
    # <x, w> through a 1x1 conv over a 1 x N "image"
    xi = reshape(flat, (1, x.size, 1, 1))
    wi = reshape(w, (1, x.size, 1, 1))
    return reshape(conv2d(xi, wi), ())


# -------------------- Forward values --------------------

def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    out = conv2d(t64(x), t64(w), t64(b), stride=1, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    Ho, Wo = xp.shape[2] - 2, xp.shape[3] - 1
    ref = np.zeros((2, 4, Ho, Wo))
    for n in range(2):
        for o in range(4):
            for i in range(Ho):
                for j in range(Wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 2] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv2d_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError, match="input channels 3 != weight channels 4"):
        conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((2, 4, 3, 3))))


def test_maxpool_takes_first_maximum_in_window():
    x = t64(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]), requires_grad=True)
    out = maxpool2d(x, 2, 2)
    out.backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_softmax_rows_sum_to_one(rng):
    p = softmax(t64(rng.normal(size=(5, 7)) * 30)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_smooth_l1_piecewise_values():
    pred = t64(np.array([[0.5, 2.0, -3.0, 0.0]]))
    loss = smooth_l1(pred, np.zeros((1, 4)))
    assert loss.item() == pytest.approx(0.125 + 1.5 + 2.5)


def test_softmax_nll_rejects_out_of_range_label():
    with pytest.raises(LabelError):
        softmax_nll(t64(np.zeros((2, 3))), [0, 3])


def test_bce_rejects_targets_outside_unit_interval():
    with pytest.raises(LabelError):
        binary_cross_entropy_vec(t64(np.full((1, 2), 0.5)), [[0.2, 1.2]])


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        scale(t64(np.array([1e308, 1.0])), 1e10)


def test_implicit_backward_needs_scalar():
    with pytest.raises(ShapeError):
        relu(t64(np.ones((2, 2)), requires_grad=True)).backward()


def test_no_grad_records_nothing(rng):
    x = t64(rng.normal(size=(2, 3)), requires_grad=True)
    with no_grad():
        y = sigmoid(x)
    assert not y.requires_grad
    z = sigmoid(x)
    assert z.requires_grad


def test_gradients_accumulate_over_shared_inputs(rng):
    x = t64(rng.normal(size=(3, 4)), requires_grad=True)
    y = reshape(spatial_mean(reshape(add(x, x), (1, 12, 1, 1))), (12,))
    y.backward(np.ones(12))
    np.testing.assert_allclose(x.grad, np.full((3, 4), 2.0))


# -------------------- Gradient checks --------------------

@pytest.mark.parametrize("seed", range(20))
def test_conv_pool_relu_chain_gradients(seed):
    r = np.random.default_rng(seed)
    x = t64(r.normal(size=(2, 2, 7, 7)))
    w = t64(r.normal(size=(3, 2, 3, 3)))
    b = t64(r.normal(size=3))
    weights = r.normal(size=3 * 3 * 3 * 2)

    def f_x(inp):
        return scalar_sum(maxpool2d(relu(conv2d(inp, w, b, pad=1)), 2, 2), weights)

    def f_w(inp):
        return scalar_sum(maxpool2d(relu(conv2d(x, inp, b, pad=1)), 2, 2), weights)

    assert grad_check(f_x, x, samples=30, rng=r) <= TOL
    assert grad_check(f_w, w, samples=30, rng=r) <= TOL


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    r = np.random.default_rng(100 + seed)
    logits = t64(r.normal(size=(6, 4)))
    labels = r.integers(0, 4, size=6)
    row_w = r.uniform(0.0, 2.0, size=6)
    assert grad_check(lambda z: softmax_nll(z, labels, row_w), logits) <= TOL

    pred = t64(r.normal(size=(5, 4)) * 2)
    target = r.normal(size=(5, 4))
    bbox_w = r.uniform(size=5)
    skip = np.isclose(np.abs(pred.data - target), 1.0, atol=1e-4)
    assert grad_check(lambda z: smooth_l1(z, target, bbox_w), pred, skip=skip) <= TOL

    raw = t64(r.normal(size=(4, 6)))
    tgt = r.uniform(size=(4, 6))
    assert grad_check(lambda z: binary_cross_entropy_vec(sigmoid(z), tgt), raw) <= TOL

    sm_w = r.normal(size=12)
    assert grad_check(lambda z: scalar_sum(softmax(reshape(z, (3, 4))), sm_w), t64(r.normal(size=(3, 4)))) <= TOL


def test_masked_rows_get_bitwise_zero_gradient(rng):
    logits = t64(rng.normal(size=(4, 3)), requires_grad=True)
    softmax_nll(logits, [0, 99, 1, -5], weights=[1.0, 0.0, 1.0, 0.0]).backward()
    assert not np.any(logits.grad[[1, 3]])
    assert np.any(logits.grad[[0, 2]])

    pred = t64(rng.normal(size=(3, 4)), requires_grad=True)
    smooth_l1(pred, np.zeros((3, 4)), weights=[0.0, 0.0, 0.0]).backward()
    assert not np.any(pred.grad)


# -------------------- Worked examples --------------------

def test_conv2d_small_examples():
    ones = t64(np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(conv2d(ones, t64(np.ones((1, 1, 1, 1)))).data, ones.data)
    x = t64(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    w = t64(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    assert conv2d(x, w).data.reshape(-1).tolist() == [5.0]


def test_maxpool_small_examples():
    x = t64(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert maxpool2d(x, 2, 2).data.reshape(-1).tolist() == [4.0]
    ramp = t64(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(maxpool2d(ramp, 2, 2).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    with pytest.raises(ShapeError):
        maxpool2d(t64(np.zeros((1, 1, 1, 1))), 2, 2)


def test_relu_masks_gradient_at_zero():
    x = t64(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    y.backward(np.ones(3))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
