"""Dense float64 layers with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects in float64. Every ``*_forward``
returns ``(output, cache)`` and the matching ``*_backward`` consumes that
cache. Nothing here holds state, so calls are safe from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert external input to a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class LayerCache:
    tag: str
    in_shape: tuple
    out_shape: tuple
    saved: dict = field(default_factory=dict)

    def check(self, tag: str, grad_out: np.ndarray) -> None:
        if self.tag != tag:
            raise ContractError(f"cache from {self.tag!r} passed to {tag!r} backward")
        if tuple(grad_out.shape) != self.out_shape:
            raise ContractError(
                f"{tag} backward: grad shape {grad_out.shape} does not match "
                f"forward output {self.out_shape}"
            )


def conv_output_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [n, c, ho, wo, k, k] strided view into the padded input
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, pad: int = 0, stride: int = 1):
    """Cross-correlate ``x`` [n,c,h,w] with ``kernel`` [c',c,k,k].

    No kernel flip, zero padding on both sides, returns ``[n,c',h',w']``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    co, ck, k, k2 = kernel.shape
    if ck != c:
        raise DimensionError(f"input has {c} channels but kernel expects {ck}")
    if k != k2:
        raise DimensionError(f"only square kernels are supported, got {k}x{k2}")
    if stride < 1 or pad < 0:
        raise ContractError(f"invalid stride={stride} / pad={pad}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = conv_output_size(h, k, pad, stride)
    wo = conv_output_size(w, k, pad, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # [n, ho, wo, c']
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    cache = LayerCache(
        "conv2d", tuple(x.shape), tuple(out.shape),
        {"xp": xp, "kernel": kernel, "pad": pad, "stride": stride},
    )
    return out, cache


def conv2d_backward(cache: LayerCache, grad_out: np.ndarray):
    """Return ``(grad_input, grad_kernel)`` for a ``conv2d_forward`` call."""
    cache.check("conv2d", grad_out)
    xp, kernel = cache.saved["xp"], cache.saved["kernel"]
    pad, stride = cache.saved["pad"], cache.saved["stride"]
    k = kernel.shape[2]
    _, _, ho, wo = grad_out.shape
    win = _windows(xp, k, stride, ho, wo)
    grad_kernel = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # [c', c, k, k]

    grad_xp = np.zeros_like(xp)
    # scatter back one kernel tap at a time; fixed order keeps results bit-stable
    for a in range(k):
        for b in range(k):
            contrib = np.tensordot(grad_out, kernel[:, :, a, b], axes=([1], [0]))  # [n, ho, wo, c]
            grad_xp[:, :, a : a + stride * (ho - 1) + 1 : stride,
                    b : b + stride * (wo - 1) + 1 : stride] += contrib.transpose(0, 3, 1, 2)
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(grad_xp), grad_kernel


def bias_channels_forward(x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x + bias[None, :, None, None]


def bias_channels_backward(grad_out: np.ndarray) -> np.ndarray:
    return grad_out.sum(axis=(0, 2, 3))


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None):
    """``y = x @ weight + bias`` with ``weight`` shaped [in, out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    y = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        y = y + bias
    return y, LayerCache("linear", tuple(x.shape), tuple(y.shape),
                         {"x": x, "weight": weight, "has_bias": bias is not None})


def linear_backward(cache: LayerCache, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None without bias."""
    cache.check("linear", grad_out)
    x, weight = cache.saved["x"], cache.saved["weight"]
    grad_bias = grad_out.sum(axis=0) if cache.saved["has_bias"] else None
    return grad_out @ weight.T, x.T @ grad_out, grad_bias


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), LayerCache("relu", tuple(x.shape), tuple(x.shape), {"mask": mask})


def relu_backward(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    cache.check("relu", grad_out)
    return np.where(cache.saved["mask"], grad_out, 0.0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not match")
    n, k = logits.shape
    if n == 0:
        raise ContractError("cross-entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over every element, and its gradient w.r.t. ``pred``."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    if pred.size == 0:
        raise ContractError("mse on an empty batch")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float, momentum: float = 0.0,
             velocity: np.ndarray | None = None):
    """One (heavy-ball) SGD step, returning ``(new_param, new_velocity)``.

    With ``momentum == 0`` this is exactly ``p - lr * g``.
    """
    if param.shape != grad.shape:
        raise DimensionError(f"param {param.shape} vs grad {grad.shape}")
    if lr < 0 or not 0.0 <= momentum < 1.0:
        raise ContractError(f"invalid lr={lr} / momentum={momentum}")
    if momentum == 0.0:
        return param - lr * grad, np.zeros_like(param) if velocity is None else velocity
    if velocity is None:
        velocity = np.zeros_like(param)
    elif velocity.shape != param.shape:
        raise DimensionError(f"velocity {velocity.shape} vs param {param.shape}")
    velocity = momentum * velocity + grad
    return param - lr * velocity, velocity
