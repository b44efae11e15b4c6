import numpy as np
import pytest

from rbpct import autodiff as ad
from rbpct.autodiff import RmsPropState, Tape, Tensor, backward, numerical_grad, rel_error, rmsprop_step

N_COORDS = 50


def probe(shape, seed=99):
    """A fixed random linear functional, so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(shape)
    return lambda t: ad.linear(t, lambda v: np.asarray((v * w).sum()), lambda g: g * w, name="probe")


def check_grads(build, tensors, tol, seed=0, n=N_COORDS, h=1e-6):
    """Compare tape gradients with central differences on sampled entries."""
    with Tape():
        loss = build()
    backward(loss, tensors)
    analytic = [t.grad.copy() for t in tensors]

    def value():
        return build().item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for t, g in zip(tensors, analytic):
        size = t.data.size
        picks = rng.choice(size, size=min(n, size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, t.shape)
            num = numerical_grad(value, t, idx, h)
            worst = max(worst, rel_error(g[idx], num, floor=1e-8))
            checked += 1
    assert checked >= min(n, sum(t.data.size for t in tensors))
    assert worst <= tol, worst
    return worst


def leaf(shape, seed, low=None):
    data = np.random.default_rng(seed).standard_normal(shape)
    if low is not None:
        # keep samples away from a kink
        data = np.where(np.abs(data) < low, np.sign(data + 1e-300) * low, data)
    return Tensor(data, requires_grad=True)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients(stride, padding):
    x = leaf((2, 5, 5), 1)
    k = leaf((3, 2, 3, 3), 2)
    b = leaf((3,), 3)
    out_shape = ad.conv2d(x, k, b, stride, padding).shape
    p = probe(out_shape)
    check_grads(lambda: p(ad.conv2d(x, k, b, stride, padding)), [x, k, b], 1e-5)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = (xp[:, 2 * i: 2 * i + 3, 2 * j: 2 * j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-13)


def test_conv2d_matches_torch_when_available():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 16, 16))
    k = rng.standard_normal((8, 4, 3, 3))
    b = rng.standard_normal(8)
    ours = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    ref = torch.nn.functional.conv2d(torch.tensor(x)[None], torch.tensor(k), torch.tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(ours, ref[0].numpy(), rtol=1e-12, atol=1e-12)


def test_leaky_relu_gradients():
    x = leaf((2, 5, 5), 6, low=1e-3)
    p = probe(x.shape)
    check_grads(lambda: p(ad.leaky_relu(x, 0.1)), [x], 1e-5)


def test_leaky_relu_values():
    out = ad.leaky_relu(Tensor(np.array([-2.0, 0.0, 3.0])), 0.25).data
    np.testing.assert_array_equal(out, [-0.5, 0.0, 3.0])


def test_upsample_and_pool_gradients():
    x = leaf((2, 4, 6), 7)
    p = probe((2, 8, 12))
    check_grads(lambda: p(ad.upsample2x(x)), [x], 1e-5)
    q = probe((2, 2, 3))
    check_grads(lambda: q(ad.avg_pool2x(x)), [x], 1e-5)


def test_concat_add_scale_const_gradients():
    a = leaf((2, 4, 4), 8)
    b = leaf((3, 4, 4), 9)
    c = leaf((2, 4, 4), 10)
    p = probe((5, 4, 4))
    q = probe((2, 4, 4), seed=3)
    check_grads(lambda: p(ad.concat_channels(a, b)), [a, b], 1e-5)
    check_grads(lambda: q(ad.add_const(ad.scale(ad.add(a, c), -1.7), 0.3)), [a, c], 1e-5)


def test_concat_routes_gradient_to_the_right_source():
    a = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    b = Tensor(np.zeros((2, 2, 2)), requires_grad=True)
    w = np.arange(12.0).reshape(3, 2, 2)
    with Tape():
        out = ad.linear(ad.concat_channels(a, b), lambda v: np.asarray((v * w).sum()), lambda g: g * w)
    backward(out)
    np.testing.assert_array_equal(a.grad, w[:1])
    np.testing.assert_array_equal(b.grad, w[1:])


def test_linear_and_sum_gradients():
    m = np.random.default_rng(11).standard_normal((7, 12))
    x = leaf((12,), 12)
    check_grads(lambda: ad.tsum(ad.linear(x, lambda v: m @ v, lambda g: m.T @ g)), [x], 1e-5)


def test_huber_gradient_away_from_kink():
    x = Tensor(np.random.default_rng(13).uniform(-3, 3, 200), requires_grad=True)
    x.data[np.abs(np.abs(x.data) - 1.0) < 1e-3] += 0.01
    # central differences are exact on both pieces, so a larger step only
    # reduces rounding noise from the 200-term mean
    check_grads(lambda: ad.huber_loss(x, 1.0), [x], 1e-6, n=100, h=1e-4)


def test_huber_values_and_clamped_gradient():
    x = Tensor(np.array([0.5, -2.0, 3.0, 0.0]), requires_grad=True)
    with Tape():
        loss = ad.huber_loss(x, 1.0)
    # (0.125 + 1.5 + 2.5 + 0) / 4
    assert loss.item() == pytest.approx(4.125 / 4, rel=1e-15)
    backward(loss)
    np.testing.assert_allclose(x.grad, np.array([0.5, -1.0, 1.0, 0.0]) / 4, rtol=1e-15)


def test_huber_rejects_bad_delta():
    with pytest.raises(ad.AutodiffError):
        ad.huber_loss(Tensor(np.zeros(3)), 0.0)


def test_backward_replay_is_deterministic():
    x = leaf((2, 6, 6), 14)
    k = leaf((2, 2, 3, 3), 15)
    with Tape():
        loss = ad.huber_loss(ad.leaky_relu(ad.conv2d(x, k, None, 1, 1)), 1.0)
    backward(loss, [x, k])
    first = k.grad.copy(), x.grad.copy()
    backward(loss, [x, k])
    np.testing.assert_array_equal(first[0], k.grad)
    np.testing.assert_array_equal(first[1], x.grad)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    y = ad.scale(x, 2.0)
    assert y.is_leaf
    with Tape() as tape:
        z = ad.scale(Tensor(np.ones(3)), 2.0)  # nothing requires grad
        w = ad.scale(x, 3.0)
    assert z.is_leaf and not w.is_leaf
    assert tape.ops() == ["scale"]


def test_unused_params_get_zero_grad():
    x = leaf((3,), 16)
    unused = Tensor(np.ones(4), requires_grad=True)
    with Tape():
        loss = ad.tsum(x)
    backward(loss, [x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(4))


def test_shape_errors():
    with pytest.raises(ad.AutodiffError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ad.AutodiffError):
        ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ad.AutodiffError):
        ad.avg_pool2x(Tensor(np.zeros((1, 3, 4))))
    with pytest.raises(ad.AutodiffError):
        backward(Tensor(np.zeros(2)))


# ------------------------------------------------------------ RMSProp


def test_learning_rate_schedule():
    s = RmsPropState()
    assert s.lr(0) == 1e-4
    assert s.lr(999) == 1e-4
    assert s.lr(1000) == pytest.approx(9e-5, rel=1e-15)
    assert s.lr(2000) == pytest.approx(8.1e-5, rel=1e-15)


def test_rmsprop_step_by_hand():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    s = RmsPropState(lr0=0.1, rho=0.9, eps=1e-8)
    g = np.array([0.5, -1.0])
    rmsprop_step([p], [g], s, 0)
    acc = 0.1 * g**2
    np.testing.assert_allclose(s.acc[0], acc, rtol=1e-15)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * g / (np.sqrt(acc) + 1e-8), rtol=1e-15)
    rmsprop_step([p], [g], s, 1)
    acc = 0.9 * acc + 0.1 * g**2
    np.testing.assert_allclose(s.acc[0], acc, rtol=1e-15)


def test_rmsprop_minimises_a_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    s = RmsPropState(lr0=0.05, decay_every=100000)
    for it in range(800):
        rmsprop_step([p], [2 * p.data], s, it)
    assert np.linalg.norm(p.data) < 0.1


def test_rmsprop_validation():
    with pytest.raises(ad.AutodiffError):
        RmsPropState(lr0=0.0)
    with pytest.raises(ad.AutodiffError):
        RmsPropState(rho=1.0)
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        rmsprop_step([p], [np.zeros(3)], RmsPropState(), 0)
