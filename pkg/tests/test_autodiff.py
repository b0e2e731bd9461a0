"""Finite-difference checks for every autodiff primitive."""

import numpy as np
import pytest

from adaseg import autodiff as ad
from adaseg.autodiff import Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check(fn_build, *arrays, tol=1e-6):
    """fn_build(*tensors) -> scalar Tensor; compares backward vs central FD."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn_build(*tensors)
    out.backward()
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: fn_build(*[Tensor(x) for x in arrays]).item(), a)
        denom = np.maximum(np.abs(num), 1.0)
        err = np.max(np.abs(t.grad - num) / denom)
        assert err < tol, f"grad mismatch {err}"


RNG = np.random.default_rng(42)


def rand(*shape):
    return RNG.normal(0, 1, size=shape).astype(np.float64)


def test_add_mul_broadcast():
    a, b = rand(3, 4), rand(1, 4)
    check(lambda x, y: ((x * y + y) * x).sum(), a, b)


def test_div_pow():
    a = np.abs(rand(5)) + 0.5
    b = np.abs(rand(5)) + 0.5
    check(lambda x, y: (x / y + ad.power(x, 1.7)).sum(), a, b)


def test_exp_log_sqrt_abs():
    a = np.abs(rand(4, 3)) + 0.5
    check(lambda x: (ad.exp(x) + ad.log(x) + ad.sqrt(x) + ad.abs_(x)).sum(), a)


def test_sigmoid_tanh_lrelu():
    a = rand(6) + 0.1
    check(lambda x: (ad.sigmoid(x) * ad.tanh(x) + ad.leaky_relu(x, 0.2)).sum(), a)


def test_softmax_logsoftmax():
    a = rand(3, 5)
    w = rand(3, 5)
    wt = Tensor(w)
    check(lambda x: (ad.softmax(x, axis=1) * wt).sum(), a)
    check(lambda x: (ad.log_softmax(x, axis=1) * wt).sum(), a)


def test_matmul_batched():
    a, b = rand(2, 3, 4), rand(2, 4, 5)
    check(lambda x, y: (x @ y).sum(), a, b)


def test_matmul_broadcast():
    a, b = rand(3, 4), rand(2, 4, 5)
    check(lambda x, y: ad.mul(x @ y, 0.5).sum(), a, b)


def test_reductions_axes():
    a = rand(3, 4, 2)
    check(lambda x: ad.mean(x, axis=(1, 2)).sum(), a)
    check(lambda x: ad.sum_(x, axis=1, keepdims=True).mean(), a)


def test_reshape_transpose_concat():
    a, b = rand(2, 6), rand(2, 6)
    check(lambda x, y: ad.concat([x.reshape(3, 4), ad.transpose(y.reshape(4, 3))], axis=0).sum(),
          a, b)


def test_clip_gradient_mask():
    a = np.array([-2.0, -0.5, 0.3, 0.9, 2.0])
    t = Tensor(a, requires_grad=True)
    out = ad.clip(t, -1.0, 1.0).sum()
    out.backward()
    assert np.allclose(t.grad, [0, 1, 1, 1, 0])


def test_conv2d_grad():
    x = rand(2, 3, 5, 5)
    w = rand(4, 3, 3, 3) * 0.5
    b = rand(4)
    check(lambda xx, ww, bb: ad.conv2d(xx, ww, bb, stride=1, padding=1).sum(), x, w, b,
          tol=1e-5)


def test_conv2d_strided_grad():
    x = rand(1, 2, 6, 6)
    w = rand(3, 2, 3, 3) * 0.5
    check(lambda xx, ww: (ad.conv2d(xx, ww, None, stride=2, padding=1) ** 2.0).sum(), x, w,
          tol=1e-5)


def test_upsample2x_grad():
    x = rand(2, 3, 4, 4)
    w = Tensor(rand(2, 3, 8, 8))
    check(lambda xx: (ad.upsample2x(xx) * w).sum(), x)


def test_conv2d_matches_direct_loop():
    x = rand(1, 2, 4, 4)
    w = rand(3, 2, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(w), None, stride=1, padding=1).data
    ref = np.zeros((1, 3, 4, 4))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for oc in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, oc, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[oc])
    assert np.max(np.abs(out - ref)) < 1e-12


def test_no_grad_blocks_graph():
    t = Tensor(rand(3), requires_grad=True)
    with ad.no_grad():
        out = (t * 2.0).sum()
    assert not out.requires_grad


def test_backward_requires_scalar():
    t = Tensor(rand(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()
