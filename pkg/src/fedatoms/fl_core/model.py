"""Small CNN (optionally decomposed) with a linear head.

Parameters live in a flat ``dict`` of named float64 arrays so aggregation
and serialization never need to know the layer structure:

    conv{i}.alpha, conv{i}.atoms   decomposed filters
    conv{i}.weight                 monolithic filters (decomposition off)
    conv{i}.bias, head.weight, head.bias
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor_nn as nn
from ..decomposition import DecomposedConv, backward_decomposed, compose, forward_decomposed, init_decomposed
from ..errors import ConfigError, DimensionError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    atoms: int = 9
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple  # (c, h, w) for images, (d,) for flat features
    num_outputs: int
    conv: tuple = ()
    decomposed: bool = True
    head_bias: bool = True
    loss: str = "cross_entropy"  # or "mse"

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.conv and len(self.input_shape) != 3:
            raise ConfigError("conv layers need a (c, h, w) input shape")
        for spec in self.conv:
            if not 1 <= spec.atoms:
                raise ConfigError(f"number of atoms must be >= 1, got {spec.atoms}")
        self.feature_shapes()  # raises on a broken chain

    def feature_shapes(self) -> list:
        """Activation shape (without batch axis) after each conv layer."""
        shapes = []
        shape = tuple(self.input_shape)
        for i, spec in enumerate(self.conv):
            c, h, w = shape
            if spec.in_channels != c:
                raise ConfigError(f"conv{i} expects {spec.in_channels} channels, gets {c}")
            if spec.kernel > h + 2 * spec.pad or spec.kernel > w + 2 * spec.pad:
                raise ConfigError(f"conv{i} kernel {spec.kernel} does not fit {h}x{w} (pad {spec.pad})")
            shape = (spec.out_channels,
                     nn.conv_output_size(h, spec.kernel, spec.pad, spec.stride),
                     nn.conv_output_size(w, spec.kernel, spec.pad, spec.stride))
            shapes.append(shape)
        return shapes

    @property
    def head_in(self) -> int:
        shapes = self.feature_shapes()
        return int(np.prod(shapes[-1] if shapes else self.input_shape))

    def param_shapes(self) -> dict:
        shapes = {}
        for i, spec in enumerate(self.conv):
            if self.decomposed:
                shapes[f"conv{i}.alpha"] = (spec.out_channels, spec.in_channels, spec.atoms)
                shapes[f"conv{i}.atoms"] = (spec.atoms, spec.kernel, spec.kernel)
            else:
                shapes[f"conv{i}.weight"] = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            shapes[f"conv{i}.bias"] = (spec.out_channels,)
        shapes["head.weight"] = (self.head_in, self.num_outputs)
        if self.head_bias:
            shapes["head.bias"] = (self.num_outputs,)
        return shapes


def param_kind(name: str) -> str:
    """Transmission group of a parameter: coefficients, atoms, filters or head."""
    if name.endswith(".alpha"):
        return "coefficients"
    if name.endswith(".atoms"):
        return "atoms"
    if name.startswith("conv") and name.endswith(".weight"):
        return "filters"
    return "head"


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict:
    """Fresh parameters. Monolithic filters are composed from a decomposed draw,
    so decomposed and plain models built from the same seed start as the same function."""
    params = {}
    for i, cs in enumerate(spec.conv):
        dc = init_decomposed(cs.out_channels, cs.in_channels, cs.kernel, cs.atoms, rng)
        if spec.decomposed:
            params[f"conv{i}.alpha"] = dc.alpha
            params[f"conv{i}.atoms"] = dc.atoms
        else:
            params[f"conv{i}.weight"] = compose(dc.alpha, dc.atoms)
        params[f"conv{i}.bias"] = np.zeros(cs.out_channels)
    params["head.weight"] = rng.normal(0.0, np.sqrt(1.0 / spec.head_in), size=(spec.head_in, spec.num_outputs))
    if spec.head_bias:
        params["head.bias"] = np.zeros(spec.num_outputs)
    return params


def conv_filters(spec: ModelSpec, params: dict) -> list:
    """Full [c', c, k, k] filter bank of every conv layer."""
    if spec.decomposed:
        return [compose(params[f"conv{i}.alpha"], params[f"conv{i}.atoms"]) for i in range(len(spec.conv))]
    return [params[f"conv{i}.weight"] for i in range(len(spec.conv))]


def forward(spec: ModelSpec, params: dict, x: np.ndarray):
    """Model output and the per-layer caches needed by ``backward``."""
    caches = []
    h = x
    for i, cs in enumerate(spec.conv):
        if spec.decomposed:
            dc = DecomposedConv(params[f"conv{i}.alpha"], params[f"conv{i}.atoms"], cs.pad, cs.stride)
            h, conv_cache = forward_decomposed(dc, h)
        else:
            h, conv_cache = nn.conv2d_forward(h, params[f"conv{i}.weight"], cs.pad, cs.stride)
        h = nn.bias_channels_forward(h, params[f"conv{i}.bias"])
        h, relu_cache = nn.relu_forward(h)
        caches.append((conv_cache, relu_cache))
    flat_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    out, head_cache = nn.linear_forward(h, params["head.weight"], params.get("head.bias"))
    return out, (caches, flat_shape, head_cache)


def backward(spec: ModelSpec, caches, grad_out: np.ndarray) -> dict:
    conv_caches, flat_shape, head_cache = caches
    grads = {}
    g, grads["head.weight"], gb = nn.linear_backward(head_cache, grad_out)
    if gb is not None:
        grads["head.bias"] = gb
    g = g.reshape(flat_shape)
    for i in reversed(range(len(spec.conv))):
        conv_cache, relu_cache = conv_caches[i]
        g = nn.relu_backward(relu_cache, g)
        grads[f"conv{i}.bias"] = nn.bias_channels_backward(g)
        if spec.decomposed:
            g, grads[f"conv{i}.alpha"], grads[f"conv{i}.atoms"] = backward_decomposed(conv_cache, g)
        else:
            g, grads[f"conv{i}.weight"] = nn.conv2d_backward(conv_cache, g)
    return grads


def _loss(spec: ModelSpec, out: np.ndarray, y: np.ndarray):
    if spec.loss == "cross_entropy":
        return nn.softmax_cross_entropy(out, y)
    return nn.mse(out, y)


def loss_and_grad(spec: ModelSpec, params: dict, x: np.ndarray, y: np.ndarray):
    out, caches = forward(spec, params, x)
    loss, grad_out = _loss(spec, out, y)
    return loss, backward(spec, caches, grad_out)


def predict_labels(spec: ModelSpec, out: np.ndarray) -> np.ndarray:
    if spec.loss == "cross_entropy":
        return out.argmax(axis=1)
    if out.shape[1] == 1:
        return (out[:, 0] > 0.5).astype(int)
    return out.argmax(axis=1)


def evaluate(spec: ModelSpec, params: dict, x: np.ndarray, y: np.ndarray, batch: int = 512):
    """Mean loss and accuracy over ``(x, y)``."""
    if len(x) == 0:
        raise DimensionError("evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for start in range(0, len(x), batch):
        xb, yb = x[start:start + batch], y[start:start + batch]
        out, _ = forward(spec, params, xb)
        loss, _ = _loss(spec, out, yb)
        total_loss += loss * len(xb)
        correct += int(np.sum(predict_labels(spec, out) == yb))
    return total_loss / len(x), correct / len(x)


@dataclass
class GlobalModel:
    spec: ModelSpec
    params: dict
    round: int = 0
    # set by fast/slow aggregation: round of the latest coefficient sync
    meta: dict = field(default_factory=dict)

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.spec, {k: v.copy() for k, v in self.params.items()}, self.round, dict(self.meta))

    def filters(self) -> list:
        return conv_filters(self.spec, self.params)
