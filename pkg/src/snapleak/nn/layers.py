"""Minimal feed-forward layers with hand-written backprop.

Everything runs in float64 on NHWC arrays. Each layer caches what its
backward pass needs during ``forward``; ``backward`` consumes the cache,
accumulates parameter gradients into ``grads`` and returns the gradient
with respect to its input. The stack is deliberately small: dense and
convolution layers, a couple of activations, dropout, nearest-neighbour
upsampling and the reshape glue needed to build the networks in this
package.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


class Layer:
    """Base layer: parameter-free unless a subclass registers arrays."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.params["W"] = he_normal(rng, (n_in, n_out), fan_in=n_in)
        self.params["b"] = np.zeros(n_out, dtype=DTYPE)
        self.zero_grads()
        self._x: np.ndarray | None = None

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads["W"] += self._x.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["W"].T


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N,H,W,C) -> (N,Ho,Wo,k*k*C) patch matrix, column order (ky,kx,c)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    v = sliding_window_view(x, (k, k), axis=(1, 2))  # (N,H',W',C,k,k)
    v = v[:, ::stride, ::stride]
    n, ho, wo = v.shape[:3]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho, wo, -1)


class Conv2d(Layer):
    """Same-style convolution; requires (H + 2*pad - k) divisible by stride."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None):
        super().__init__()
        if pad is None:
            pad = (k - 1) // 2
        self.k, self.stride, self.pad = k, stride, pad
        self.c_in, self.c_out = c_in, c_out
        self.params["W"] = he_normal(rng, (k, k, c_in, c_out), fan_in=k * k * c_in)
        self.params["b"] = np.zeros(c_out, dtype=DTYPE)
        self.zero_grads()
        self._cols: np.ndarray | None = None
        self._x_shape: tuple[int, ...] | None = None

    def forward(self, x, train=False, rng=None):
        n, h, w, c = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        if (h + 2 * self.pad - self.k) % self.stride or (w + 2 * self.pad - self.k) % self.stride:
            raise ValueError(f"conv geometry k={self.k} stride={self.stride} pad={self.pad} "
                             f"does not tile an {h}x{w} input")
        self._x_shape = x.shape
        cols = _im2col(x, self.k, self.stride, self.pad)
        self._cols = cols
        w_mat = self.params["W"].reshape(-1, self.c_out)
        return cols @ w_mat + self.params["b"]

    def backward(self, grad):
        n, ho, wo, _ = grad.shape
        cols2d = self._cols.reshape(-1, self.k * self.k * self.c_in)
        grad2d = grad.reshape(-1, self.c_out)
        self.grads["W"] += (cols2d.T @ grad2d).reshape(self.params["W"].shape)
        self.grads["b"] += grad2d.sum(axis=0)

        # Input gradient as a convolution: dilate by stride, pad by k-1-pad,
        # correlate with the spatially flipped, channel-transposed kernel.
        if self.stride > 1:
            dil = np.zeros((n, (ho - 1) * self.stride + 1, (wo - 1) * self.stride + 1, self.c_out), dtype=DTYPE)
            dil[:, ::self.stride, ::self.stride] = grad
        else:
            dil = grad
        w_rot = self.params["W"][::-1, ::-1].transpose(0, 1, 3, 2)  # (k,k,c_out,c_in)
        cols = _im2col(dil, self.k, 1, self.k - 1 - self.pad)
        gx = cols @ w_rot.reshape(-1, self.c_in)
        assert gx.shape == self._x_shape, (gx.shape, self._x_shape)
        return gx


class Relu(Layer):
    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class LeakyRelu(Layer):
    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, grad):
        return np.where(self._mask, grad, self.slope * grad)


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        # numerically safe in both tails
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        return grad * self._out * (1.0 - self._out)


class Tanh(Layer):
    def forward(self, x, train=False, rng=None):
        self._out = np.tanh(x)
        return self._out

    def backward(self, grad):
        return grad * (1.0 - self._out ** 2)


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Reshape(Layer):
    """Reshape the per-sample trailing dimensions to ``shape``."""

    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = shape

    def forward(self, x, train=False, rng=None):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class Upsample2x(Layer):
    """Nearest-neighbour 2x spatial upsampling."""

    def forward(self, x, train=False, rng=None):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        n, h2, w2, c = grad.shape
        return grad.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


class Dropout(Layer):
    """Inverted dropout; identity when ``train`` is False or rate is 0."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self._mask: np.ndarray | None = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("Dropout in training mode needs an rng")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask


class Sequential:
    """Ordered layer stack with a flat, bit-exact serializable state."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def param_items(self):
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"{i}.{key}", layer, key

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: layer.params[key].copy() for name, layer, key in self.param_items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: (layer, key) for name, layer, key in self.param_items()}
        if set(own) != set(state):
            raise ValueError(f"state keys {sorted(state)} do not match model keys {sorted(own)}")
        for name, (layer, key) in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != layer.params[key].shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {layer.params[key].shape}")
            layer.params[key] = arr.copy()

    def num_params(self) -> int:
        return sum(layer.params[key].size for _, layer, key in self.param_items())
