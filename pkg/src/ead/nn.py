"""Minimal feedforward network engine.

Forward inference, reverse-mode gradients with respect to inputs and
parameters, temperature softmax, and the two optimizers (ADAM, SGD) used
by training and by the change-of-variable attack.

Parameters are stored float32; all arithmetic runs in float64 so
finite-difference checks hold tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Input or parameter shape does not match what the network expects."""


# ---------------------------------------------------------------------------
# layers
#
# Layers are stateless descriptors; parameters live in the Network so the
# same layer list can seed many models. Each layer knows its output shape,
# how to initialise parameters, and its forward/backward rules. Activations
# are always batched: x has shape (N, *in_shape) and dtype float64.


class Dense:
    """Affine map to `units` outputs: y = x @ W + b."""

    def __init__(self, units: int):
        if units < 1:
            raise ValueError(f"units must be positive, got {units}")
        self.units = units

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer needs a flat input, got {in_shape}")
        return (self.units,)

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0]
        limit = math.sqrt(6.0 / (fan_in + self.units))
        w = rng.uniform(-limit, limit, size=(fan_in, self.units))
        return {
            "W": w.astype(np.float32),
            "b": np.zeros(self.units, dtype=np.float32),
        }

    def forward(self, x, params):
        w = params["W"].astype(np.float64)
        b = params["b"].astype(np.float64)
        return x @ w + b, x

    def backward(self, dy, cache, params):
        x = cache
        w = params["W"].astype(np.float64)
        dx = dy @ w.T
        return dx, {"W": x.T @ dy, "b": dy.sum(axis=0)}

    def descriptor(self):
        return ("dense", self.units)


class Conv2D:
    """Valid 2-d convolution, stride 1, channels-last: (H,W,C) -> (H-k+1,W-k+1,F)."""

    def __init__(self, filters: int, kernel_size: int = 3):
        if filters < 1 or kernel_size < 1:
            raise ValueError("filters and kernel_size must be positive")
        self.filters = filters
        self.kernel_size = kernel_size

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv layer needs (H, W, C) input, got {in_shape}")
        h, w, _ = in_shape
        k = self.kernel_size
        if h < k or w < k:
            raise ShapeError(f"kernel {k} does not fit input {in_shape}")
        return (h - k + 1, w - k + 1, self.filters)

    def init_params(self, in_shape, rng):
        k, c = self.kernel_size, in_shape[2]
        fan_in = k * k * c
        fan_out = k * k * self.filters
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(k, k, c, self.filters))
        return {
            "W": w.astype(np.float32),
            "b": np.zeros(self.filters, dtype=np.float32),
        }

    def _columns(self, x):
        # (N, OH, OW, C, k, k) view, no copy; reorder to match W's (k, k, C) axes.
        k = self.kernel_size
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        n, oh, ow = win.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, -1)
        return cols, (n, oh, ow)

    def forward(self, x, params):
        w = params["W"].astype(np.float64)
        b = params["b"].astype(np.float64)
        k = self.kernel_size
        cols, (n, oh, ow) = self._columns(x)
        y = cols @ w.reshape(-1, self.filters) + b
        return y.reshape(n, oh, ow, self.filters), x

    def backward(self, dy, cache, params):
        x = cache
        w = params["W"].astype(np.float64)
        k = self.kernel_size
        n, oh, ow, f = dy.shape
        cols, _ = self._columns(x)
        dy2 = dy.reshape(-1, f)
        dw = (cols.T @ dy2).reshape(k, k, x.shape[3], f)
        db = dy2.sum(axis=0)
        dx = np.zeros_like(x)
        for di in range(k):
            for dj in range(k):
                dx[:, di : di + oh, dj : dj + ow, :] += dy @ w[di, dj].T
        return dx, {"W": dw, "b": db}

    def descriptor(self):
        return ("conv", self.filters, self.kernel_size)


class MaxPool2D:
    """Non-overlapping max pool; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, size: int = 2):
        if size < 1:
            raise ValueError("pool size must be positive")
        self.size = size

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"pool layer needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(f"pool {self.size} does not fit input {in_shape}")
        return (h // self.size, w // self.size, c)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, x, params):
        s = self.size
        n, h, w, c = x.shape
        oh, ow = h // s, w // s
        xc = x[:, : oh * s, : ow * s, :]
        windows = (
            xc.reshape(n, oh, s, ow, s, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, oh, ow, c, s * s)
        )
        # argmax picks the first maximum, which makes tie routing deterministic
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache, params):
        idx, in_shape = cache
        s = self.size
        n, oh, ow, c = dy.shape
        dwin = np.zeros((n, oh, ow, c, s * s), dtype=np.float64)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dxc = (
            dwin.reshape(n, oh, ow, c, s, s)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, oh * s, ow * s, c)
        )
        dx = np.zeros(in_shape, dtype=np.float64)
        dx[:, : oh * s, : ow * s, :] = dxc
        return dx, {}

    def descriptor(self):
        return ("maxpool", self.size)


class ReLU:
    """Elementwise max(x, 0); subgradient 0 at the kink."""

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, x, params):
        return np.maximum(x, 0.0), x

    def backward(self, dy, cache, params):
        return dy * (cache > 0.0), {}

    def descriptor(self):
        return ("relu",)


class Flatten:
    """Collapse all non-batch axes, row-major."""

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params):
        return dy.reshape(cache), {}

    def descriptor(self):
        return ("flatten",)


LAYER_KINDS = {
    "dense": lambda args: Dense(args[0]),
    "conv": lambda args: Conv2D(args[0], args[1]),
    "maxpool": lambda args: MaxPool2D(args[0]),
    "relu": lambda args: ReLU(),
    "flatten": lambda args: Flatten(),
}


def layer_from_descriptor(desc) -> object:
    kind, *args = desc
    try:
        return LAYER_KINDS[kind](args)
    except KeyError:
        raise ShapeError(f"unknown layer kind {kind!r}") from None


# ---------------------------------------------------------------------------
# network


class Network:
    """A layer stack plus its parameters.

    `input_shape` is the per-example shape ((H, W, C) for image nets, (d,)
    for dense stacks); callers pass flattened pixel vectors and the network
    reshapes internally. Construction validates that consecutive layer
    shapes compose and that the final output is a logit vector with at
    least two classes.
    """

    def __init__(self, input_shape, layers, params):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.params = params
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1 or shape[0] < 2:
            raise ShapeError(f"final layer must emit >=2 logits, got {shape}")
        self.num_classes = shape[0]
        self.input_size = int(np.prod(self.input_shape))
        if len(params) != len(self.layers):
            raise ShapeError("one parameter dict per layer required")

    @classmethod
    def build(cls, layers, input_shape, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        params = []
        for layer in layers:
            next_shape = layer.out_shape(shape)
            params.append(layer.init_params(shape, rng))
            shape = next_shape
        return cls(input_shape, layers, params)

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            if x.shape[0] != self.input_size:
                raise ShapeError(
                    f"expected {self.input_size} pixels, got {x.shape[0]}"
                )
            return x.reshape((1,) + self.input_shape), True
        if x.ndim == 2:
            if x.shape[1] != self.input_size:
                raise ShapeError(
                    f"expected rows of {self.input_size} pixels, got {x.shape[1]}"
                )
            return x.reshape((x.shape[0],) + self.input_shape), False
        raise ShapeError(f"expected a pixel vector or batch, got ndim={x.ndim}")

    def _forward_cached(self, xb):
        caches = []
        h = xb
        for layer, params in zip(self.layers, self.params):
            h, cache = layer.forward(h, params)
            caches.append(cache)
        return h, caches

    def _backward_input(self, dlogits, caches):
        dh = dlogits
        for layer, params, cache in zip(
            reversed(self.layers), reversed(self.params), reversed(caches)
        ):
            dh, _ = layer.backward(dh, cache, params)
        return dh

    def descriptors(self):
        return [layer.descriptor() for layer in self.layers]


def forward(net: Network, x) -> np.ndarray:
    """Logits for a pixel vector (p,) or batch (N, p); never mutates the net."""
    xb, single = net._as_batch(x)
    logits, _ = net._forward_cached(xb)
    return logits[0] if single else logits


def predict(net: Network, x) -> np.ndarray | int:
    """Hard argmax class; ties go to the lowest index."""
    logits = forward(net, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def input_gradient_batch(net: Network, objective, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-row objective values and gradients with respect to pixels.

    `objective` maps a logit batch (N, K) to (values (N,), dlogits (N, K));
    each row carries its own scalar objective, so one backward pass yields
    every row's gradient.
    """
    xb, single = net._as_batch(x)
    logits, caches = net._forward_cached(xb)
    values, dlogits = objective(logits)
    dx = net._backward_input(np.asarray(dlogits, dtype=np.float64), caches)
    dx = dx.reshape(xb.shape[0], -1)
    if single:
        return values[0], dx[0]
    return values, dx


def input_gradient(net: Network, objective, x) -> np.ndarray:
    """Gradient of a scalar logit objective with respect to the input pixels."""
    _, dx = input_gradient_batch(net, objective, x)
    return dx


def cross_entropy_objective(labels, temperature: float = 1.0):
    """Batched objective: softmax cross-entropy at a temperature against hard labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))

    def objective(logits):
        probs = temperature_softmax(logits, temperature)
        rows = np.arange(logits.shape[0])
        values = -np.log(np.maximum(probs[rows, labels], 1e-300))
        dlogits = probs.copy()
        dlogits[rows, labels] -= 1.0
        return values, dlogits / temperature

    return objective


def parameter_gradients(net: Network, x, targets, temperature: float = 1.0):
    """Mean cross-entropy-at-temperature gradients for every parameter.

    `targets` is either integer labels (N,) or soft label rows (N, K).
    Returns one dict per layer mirroring net.params.
    """
    xb, _ = net._as_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    n = xb.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    targets = np.asarray(targets)
    if targets.ndim == 1:
        onehot = np.zeros((n, net.num_classes))
        onehot[np.arange(n), targets.astype(np.int64)] = 1.0
        targets = onehot
    if targets.shape != (n, net.num_classes):
        raise ShapeError(f"targets shape {targets.shape} does not match batch")
    logits, caches = net._forward_cached(xb)
    probs = temperature_softmax(logits, temperature)
    dlogits = (probs - targets) / (temperature * n)
    grads: list[dict] = []
    dh = dlogits
    for layer, params, cache in zip(
        reversed(net.layers), reversed(net.params), reversed(caches)
    ):
        dh, g = layer.backward(dh, cache, params)
        grads.append(g)
    grads.reverse()
    return grads


def temperature_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Rowwise softmax of logits/T with max-subtraction for stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizers
#
# Both optimizers work on flat lists of arrays and return fresh arrays in
# the dtype each parameter came in with (training keeps float32 weights,
# the change-of-variable attack keeps its float64 iterate).


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros(p.shape, dtype=np.float64) for p in params],
            v=[np.zeros(p.shape, dtype=np.float64) for p in params],
            t=0,
        )


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected ADAM update; returns (new_state, new_params)."""
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_p.append((p.astype(np.float64) - step).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return AdamState(m=new_m, v=new_v, t=t), new_p


def sgd_step(params, grads, lr: float):
    """Plain gradient step; returns new parameter arrays."""
    return [
        (p.astype(np.float64) - lr * np.asarray(g, dtype=np.float64)).astype(p.dtype)
        for p, g in zip(params, grads)
    ]
