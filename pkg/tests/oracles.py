"""Independent reference computations used by the tests."""

import numpy as np


def naive_conv2d(x, kernel, pad=0, stride=1):
    n, c, h, w = x.shape
    co, _, k, _ = kernel.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                s += xp[b, ci, i * stride + a, j * stride + bb] * kernel[o, ci, a, bb]
                    out[b, o, i, j] = s
    return out


def numerical_grad(f, x, step=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-7):
    """Elementwise relative error with a floor so entries near zero do not blow up."""
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    assert err.max() < rtol, f"max relative error {err.max():.3e}"
    return float(err.max())
