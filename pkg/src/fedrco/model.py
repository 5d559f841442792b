"""Small numpy feed-forward networks with exact backprop.

Every parameterized layer (dense or conv) holds a single weight matrix of
shape ``d_out x (d_in + 1)``; the last column is the bias, and inputs are
extended with a constant-1 row before the product. ``forward_backward`` also
returns, per parameterized layer, the homogeneous inputs ``A`` and the
per-sample pre-activation gradients ``G`` needed for Kronecker factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyDataset, KernelLargerThanInput, LabelOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2d, ReLU, MaxPool, Flatten]
PARAM_LAYERS = (Dense, Conv2d)


def param_shape(layer: LayerSpec) -> tuple[int, int] | None:
    if isinstance(layer, Dense):
        return (layer.out_features, layer.in_features + 1)
    if isinstance(layer, Conv2d):
        return (layer.out_channels, layer.in_channels * layer.kernel * layer.kernel + 1)
    return None


def output_shape(layers: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Propagate a per-sample shape through ``layers``; raises on mismatch."""
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ShapeMismatch(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ShapeMismatch(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
            h, w = shape[1] + 2 * layer.pad, shape[2] + 2 * layer.pad
            if h < layer.kernel or w < layer.kernel:
                raise KernelLargerThanInput(f"layer {i}: kernel {layer.kernel} > input {h}x{w}")
            shape = (layer.out_channels,
                     (h - layer.kernel) // layer.stride + 1,
                     (w - layer.kernel) // layer.stride + 1)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                raise ShapeMismatch(f"layer {i}: maxpool({layer.k}) on {shape}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
    return shape


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[np.ndarray]
    input_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        shapes = [param_shape(l) for l in self.layers if isinstance(l, PARAM_LAYERS)]
        if len(shapes) != len(self.params):
            raise ShapeMismatch("one parameter matrix is required per dense/conv layer")
        for s, p in zip(shapes, self.params):
            if p.shape != s:
                raise ShapeMismatch(f"parameter shape {p.shape} != expected {s}")
        if self.input_shape:
            output_shape(self.layers, self.input_shape)

    @property
    def num_classes(self) -> int:
        last = [l for l in self.layers if isinstance(l, PARAM_LAYERS)][-1]
        return last.out_features if isinstance(last, Dense) else last.out_channels

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Network":
        return Network(list(self.layers), [p.copy() for p in self.params], self.input_shape)

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        return Network(list(self.layers), [np.array(p, dtype=np.float64) for p in params],
                       self.input_shape)


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> list[np.ndarray]:
    """He-normal weights, zero bias."""
    params = []
    for layer in layers:
        shape = param_shape(layer)
        if shape is None:
            continue
        fan_in = shape[1] - 1
        w = np.zeros(shape)
        w[:, :-1] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(shape[0], fan_in))
        params.append(w)
    return params


def build_mlp(sizes: Sequence[int], rng: np.random.Generator) -> Network:
    """Dense/ReLU stack, e.g. ``sizes=[32, 64, 10]``."""
    layers: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Network(layers, init_params(layers, rng), (sizes[0],))


def build_cnn(input_shape: tuple[int, int, int], num_classes: int, rng: np.random.Generator,
              channels: tuple[int, int] = (16, 32), hidden: tuple[int, ...] = (32, 256),
              kernel: int = 3, pad: int = 0) -> Network:
    """conv-pool-conv followed by dense layers; the defaults give the 16/32 filter,
    3x3 kernel, 32/256 hidden-unit image classifier."""
    c, _, _ = input_shape
    layers: list[LayerSpec] = [
        Conv2d(c, channels[0], kernel, 1, pad), ReLU(), MaxPool(2),
        Conv2d(channels[0], channels[1], kernel, 1, pad), ReLU(), Flatten(),
    ]
    flat = output_shape(layers, input_shape)[0]
    width = flat
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers.append(Dense(width, num_classes))
    return Network(layers, init_params(layers, rng), tuple(input_shape))


def unfold(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """im2col: ``[B, C, H, W] -> [(C*k*k), (B*H'*W')]``.

    Row index is ``c*k*k + di*k + dj``; column index is ``b*H'*W' + i*W' + j``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatch(f"unfold expects a 4-D tensor, got {x.shape}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = x.shape
    if h < k or w < k:
        raise KernelLargerThanInput(f"kernel {k} larger than padded input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # [B, C, Ho, Wo, k, k] -> [C, k, k, B, Ho, Wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo)


def fold(cols: np.ndarray, x_shape: tuple[int, int, int, int], k: int,
         stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`unfold` (overlapping patches are summed)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((b, c, hp, wp))
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += \
                cols[:, di, dj].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


@dataclass
class LayerCapture:
    """Kronecker-factor inputs for one parameterized layer.

    ``a`` is ``(d_in+1) x B_eff`` (homogeneous inputs or unfolded patches) and
    ``g`` is ``d_out x B_eff`` holding per-sample gradients of the loss with
    respect to the pre-activations. ``B_eff`` is the batch size for dense layers
    and batch size times output positions for conv layers.
    """

    a: np.ndarray
    g: np.ndarray
    batch_size: int

    @property
    def n_eff(self) -> int:
        return self.a.shape[1]


def _homogeneous(a: np.ndarray) -> np.ndarray:
    return np.vstack([a, np.ones((1, a.shape[1]))])


def _check_batch(net: Network, x, y=None):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataset("batch is empty")
    if net.input_shape and x.shape[1:] != tuple(net.input_shape):
        raise ShapeMismatch(f"input shape {x.shape[1:]} != network input {net.input_shape}")
    if y is None:
        return x, None
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ShapeMismatch(f"labels shape {y.shape} does not match batch {x.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= net.num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {net.num_classes})")
    return x, y.astype(np.int64)


def _forward(net: Network, x: np.ndarray, keep: bool):
    caches = []
    h = x
    pi = 0
    for layer in net.layers:
        if isinstance(layer, Dense):
            if h.ndim != 2 or h.shape[1] != layer.in_features:
                raise ShapeMismatch(f"dense layer expects {layer.in_features} features, got {h.shape}")
            a = _homogeneous(h.T)
            out = (net.params[pi] @ a).T
            caches.append(a if keep else None)
            pi += 1
        elif isinstance(layer, Conv2d):
            if h.ndim != 4 or h.shape[1] != layer.in_channels:
                raise ShapeMismatch(f"conv layer expects {layer.in_channels} channels, got {h.shape}")
            cols = _homogeneous(unfold(h, layer.kernel, layer.stride, layer.pad))
            b = h.shape[0]
            hp, wp = h.shape[2] + 2 * layer.pad, h.shape[3] + 2 * layer.pad
            ho = (hp - layer.kernel) // layer.stride + 1
            wo = (wp - layer.kernel) // layer.stride + 1
            z = net.params[pi] @ cols
            out = z.reshape(layer.out_channels, b, ho, wo).transpose(1, 0, 2, 3)
            caches.append((cols, h.shape) if keep else None)
            pi += 1
        elif isinstance(layer, ReLU):
            out = np.maximum(h, 0.0)
            caches.append(h > 0 if keep else None)
        elif isinstance(layer, MaxPool):
            k = layer.k
            b, c, hh, ww = h.shape
            ho, wo = hh // k, ww // k
            win = h[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
            arg = np.argmax(win, axis=-1)
            out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
            caches.append((arg, h.shape) if keep else None)
        elif isinstance(layer, Flatten):
            out = h.reshape(h.shape[0], -1)
            caches.append(h.shape if keep else None)
        else:  # pragma: no cover
            raise TypeError(f"unknown layer {layer!r}")
        h = out
    return h, caches


def predict_logits(net: Network, x, chunk: int = 2048) -> np.ndarray:
    x, _ = _check_batch(net, x)
    parts = [_forward(net, x[i:i + chunk], keep=False)[0] for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(net: Network, x, y) -> float:
    """Mean softmax cross-entropy."""
    x, y = _check_batch(net, x, y)
    logp = _log_softmax(predict_logits(net, x))
    return float(-logp[np.arange(len(y)), y].mean())


def forward_backward(net: Network, x, y):
    """Mean cross-entropy loss, exact gradients, and per-layer (A, G) capture.

    Returns ``(loss, grads, capture)`` where ``grads[i]`` has the shape of
    ``net.params[i]`` and ``capture[i]`` is a :class:`LayerCapture`.
    """
    x, y = _check_batch(net, x, y)
    batch = x.shape[0]
    logits, caches = _forward(net, x, keep=True)
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(batch), y].mean())

    per_sample = np.exp(logp)
    per_sample[np.arange(batch), y] -= 1.0
    delta = per_sample / batch

    n_param = len(net.params)
    grads: list[np.ndarray] = [None] * n_param  # type: ignore[list-item]
    capture: list[LayerCapture] = [None] * n_param  # type: ignore[list-item]
    pi = n_param
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        if isinstance(layer, Dense):
            pi -= 1
            a = cache
            dz = delta.T
            grads[pi] = dz @ a.T
            capture[pi] = LayerCapture(a=a, g=dz * batch, batch_size=batch)
            delta = (net.params[pi][:, :-1].T @ dz).T
        elif isinstance(layer, Conv2d):
            pi -= 1
            cols, in_shape = cache
            dz = delta.transpose(1, 0, 2, 3).reshape(layer.out_channels, -1)
            grads[pi] = dz @ cols.T
            capture[pi] = LayerCapture(a=cols, g=dz * batch, batch_size=batch)
            dcols = net.params[pi][:, :-1].T @ dz
            delta = fold(dcols, in_shape, layer.kernel, layer.stride, layer.pad)
        elif isinstance(layer, ReLU):
            delta = delta * cache
        elif isinstance(layer, MaxPool):
            arg, in_shape = cache
            k = layer.k
            b, c, hh, ww = in_shape
            ho, wo = arg.shape[2], arg.shape[3]
            win = np.zeros((b, c, ho, wo, k * k))
            np.put_along_axis(win, arg[..., None], delta[..., None], axis=-1)
            win = win.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
            full = np.zeros(in_shape)
            full[:, :, :ho * k, :wo * k] = win.reshape(b, c, ho * k, wo * k)
            delta = full
        elif isinstance(layer, Flatten):
            delta = delta.reshape(cache)
    return value, grads, capture


def evaluate_accuracy(net: Network, x, y) -> float:
    """Fraction of samples whose argmax logit equals the label (ties -> lowest index)."""
    x, y = _check_batch(net, x, y)
    pred = np.argmax(predict_logits(net, x), axis=1)
    return float(np.mean(pred == y))


def flatten_params(params: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def unflatten_params(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, i = [], 0
    for p in like:
        out.append(vec[i:i + p.size].reshape(p.shape).copy())
        i += p.size
    return out
