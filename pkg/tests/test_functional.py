import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from ganseg.numerics import functional as F
from ganseg.numerics import Tensor, check_gradients


@given(arrays(np.float64, (2, 4, 3), elements=st.floats(-50, 50)))
def test_log_softmax_matches_logsumexp(x):
    expected = x - logsumexp(x, axis=1, keepdims=True)
    np.testing.assert_allclose(F.log_softmax(Tensor(x), axis=1).data, expected, atol=1e-10)


def test_log_softmax_is_stable_for_huge_logits():
    x = np.array([[1000.0, 0.0], [-1000.0, 0.0]])[:, :, None]
    out = F.log_softmax(Tensor(x), axis=1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0, :, 0], [0.0, -1000.0])


def test_cross_entropy_against_manual(rng):
    logits = rng.normal(size=(2, 3, 4, 5))
    target = rng.integers(0, 3, size=(2, 4, 5))
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    picked = np.take_along_axis(logp, target[:, None], axis=1)
    np.testing.assert_allclose(F.softmax_cross_entropy(Tensor(logits), target).data, -picked.mean(), rtol=1e-12)


def test_cross_entropy_shape_check():
    with pytest.raises(ValueError, match="target shape"):
        F.softmax_cross_entropy(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 4, 3), int))


def test_soft_dice_formula(rng):
    p = rng.uniform(size=(2, 3, 4, 4))
    t = F.one_hot(rng.integers(0, 3, size=(2, 4, 4)), 3, np.float64)
    smooth = 1e-5
    per_class = [(2 * (p[:, c] * t[:, c]).sum() + smooth) / (p[:, c].sum() + t[:, c].sum() + smooth) for c in (1, 2)]
    np.testing.assert_allclose(F.soft_dice_loss(Tensor(p), t, smooth).data, 1 - np.mean(per_class), rtol=1e-12)
    all_classes = [(2 * (p[:, c] * t[:, c]).sum() + smooth) / (p[:, c].sum() + t[:, c].sum() + smooth)
                   for c in range(3)]
    np.testing.assert_allclose(F.soft_dice_loss(Tensor(p), t, smooth, foreground_only=False).data,
                               1 - np.mean(all_classes), rtol=1e-12)


def test_soft_dice_empty_classes_stay_finite():
    p = np.zeros((1, 3, 2, 2))
    p[:, 0] = 1.0
    t = F.one_hot(np.zeros((1, 2, 2), int), 3, np.float64)
    assert F.soft_dice_loss(Tensor(p), t).data == pytest.approx(0.0)


def test_one_hot_validates_range():
    with pytest.raises(ValueError, match="class index 4"):
        F.one_hot(np.array([[[0, 4]]]), 4)


def test_instance_norm_matches_numpy(rng):
    x = rng.normal(3, 2, size=(2, 3, 5, 4))
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    np.testing.assert_allclose(F.instance_norm(Tensor(x)).data, (x - mu) / np.sqrt(var + 1e-5), rtol=1e-10)


def test_pixel_norm_unit_rms(rng):
    y = F.pixel_norm(Tensor(rng.normal(size=(2, 8, 3, 3)) * 7)).data
    np.testing.assert_allclose(np.sqrt((y ** 2).mean(axis=1)), 1.0, rtol=1e-6)


def test_minibatch_stddev_feature(rng):
    x = rng.normal(size=(4, 3, 2, 2))
    out = F.minibatch_stddev(Tensor(x)).data
    assert out.shape == (4, 4, 2, 2)
    expected = np.sqrt(x.var(axis=0) + 1e-8).mean()
    np.testing.assert_allclose(out[:, 3], expected, rtol=1e-12)
    np.testing.assert_array_equal(out[:, :3], x)


def test_upsample_and_sum_pool_are_adjoint(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    y = rng.normal(size=(2, 3, 8, 8))
    up = F.upsample_nearest(Tensor(x), 2).data
    pooled = F.avg_pool2(Tensor(y)).data * 4
    np.testing.assert_allclose((up * y).sum(), (x * pooled).sum(), rtol=1e-12)


def test_downsample_averages_blocks(rng):
    x = rng.normal(size=(1, 1, 8, 8))
    expected = x.reshape(1, 1, 2, 4, 2, 4).mean(axis=(3, 5))
    np.testing.assert_allclose(F.downsample(Tensor(x), 4).data, expected, rtol=1e-12)


def test_avg_pool_rejects_odd_extent():
    with pytest.raises(ValueError, match="even"):
        F.avg_pool2(Tensor(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("op", ["instance_norm", "pixel_norm", "mbstd", "log_softmax", "dice", "upsample"])
def test_functional_gradients(rng, op):
    x = Tensor(rng.normal(size=(3, 4, 4, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4, 4, 4))
    t = F.one_hot(rng.integers(0, 4, size=(3, 4, 4)), 4, np.float64)
    fns = {
        "instance_norm": lambda: (F.instance_norm(x) * Tensor(w)).sum(),
        "pixel_norm": lambda: (F.pixel_norm(x) * Tensor(w)).sum(),
        "mbstd": lambda: (F.minibatch_stddev(x)[:, 4:] * Tensor(w[:, :1])).sum(),
        "log_softmax": lambda: (F.log_softmax(x) * Tensor(w)).sum(),
        "dice": lambda: F.soft_dice_loss(F.softmax(x), t),
        "upsample": lambda: (F.avg_pool2(F.upsample_nearest(x, 2) * F.upsample_nearest(x, 2))).sum(),
    }
    assert check_gradients(fns[op], [x]) < 1e-5


def test_leaky_relu_values():
    out = F.leaky_relu(Tensor(np.array([-1.0, 2.0, 0.0])), 0.01).data
    np.testing.assert_array_equal(out, [-0.01, 2.0, 0.0])


def test_instance_norm_cases(rng):
    const = Tensor(np.full((1, 2, 3, 3), 7.0))
    assert not F.instance_norm(const, Tensor(np.ones(2)), Tensor(np.zeros(2))).data.any()
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    np.testing.assert_array_equal(F.instance_norm(x, Tensor(np.zeros(2)), Tensor(np.full(2, 3.0))).data, 3.0)
    y = F.instance_norm(x).data
    assert np.abs(y.mean(axis=(2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(2, 3)) - 1).max() < 1e-3


def test_upsample_and_pool_cases(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(F.upsample_nearest(Tensor(x), 1).data, x)
    np.testing.assert_array_equal(F.upsample_nearest(Tensor(np.full((1, 1, 1, 1), 5.0)), 2).data, np.full((1, 1, 2, 2), 5.0))
    t = Tensor(x, requires_grad=True)
    F.upsample_nearest(t, 2).sum().backward()
    np.testing.assert_array_equal(t.grad, 4.0)
    assert F.avg_pool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 2.5
    np.testing.assert_array_equal(F.avg_pool2(Tensor(np.full((1, 1, 4, 4), 1.5))).data, 1.5)
    z = rng.normal(size=(2, 3, 8, 8))
    assert F.avg_pool2(Tensor(z)).data.sum() == pytest.approx(z.sum() / 4, abs=1e-10)


def test_cross_entropy_cases(rng):
    zero = F.softmax_cross_entropy(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3), int))
    assert float(zero.data) == pytest.approx(np.log(2))
    sat = np.zeros((1, 2, 1, 1))
    sat[0, 0], sat[0, 1] = 50.0, -50.0
    assert float(F.softmax_cross_entropy(Tensor(sat), np.zeros((1, 1, 1), int)).data) < 1e-20
    logits = rng.normal(size=(1, 3, 2, 2))
    target = rng.integers(0, 3, (1, 2, 2))
    terms = []
    for i in range(2):
        for j in range(2):
            v = logits[0, :, i, j]
            m = max(v)
            terms.append(m + np.log(sum(np.exp(a - m) for a in v)) - v[target[0, i, j]])
    assert float(F.softmax_cross_entropy(Tensor(logits), target).data) == pytest.approx(np.mean(terms), abs=1e-8)


def test_soft_dice_cases(rng):
    t = rng.integers(0, 3, (2, 5, 5))
    onehot = F.one_hot(t, 3, np.float64)
    onehot[0, :, 0, 0] = [0, 1, 1]
    onehot[0, 0, 0, 0] = 0
    assert float(F.soft_dice_loss(Tensor(onehot), onehot).data) < 1e-4
    fg = np.zeros((1, 2, 3, 3))
    fg[0, 1] = 1
    swapped = fg[:, ::-1].copy()
    assert float(F.soft_dice_loss(Tensor(swapped), fg, smooth=1e-5).data) == pytest.approx(1.0, abs=1e-5)
    p = np.full((1, 1, 2, 2), 0.5)
    loss = F.soft_dice_loss(Tensor(p), np.ones((1, 1, 2, 2)), smooth=0.0)
    assert float(loss.data) == pytest.approx(1 / 3, abs=1e-15)


def test_trivial_gradients(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_allclose(y.grad, 2 * y.data)


def test_pixel_norm_vector_length(rng):
    x = rng.normal(size=(2, 16, 3, 3)) * 5
    norms = np.linalg.norm(F.pixel_norm(Tensor(x)).data, axis=1)
    np.testing.assert_allclose(norms, 4.0, atol=1e-3)
