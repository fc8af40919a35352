"""Minimal float64 neural-network layers with hand-written backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Only the operators used by the VAE are provided.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, gain=math.sqrt(6.0)):
        super().__init__()
        self.params["weight"] = _uniform(rng, gain / math.sqrt(n_in), (n_out, n_in))
        self.params["bias"] = np.zeros(n_out)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self._accumulate("weight", grad.T @ self._x)
        self._accumulate("bias", grad.sum(axis=0))
        return grad @ self.params["weight"]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


def conv_out_len(n_in, kernel, stride, pad):
    return (n_in + 2 * pad - kernel) // stride + 1


class Conv1d(Layer):
    """Strided 1-D convolution, input (B, C_in, L), weight (C_out, C_in, K)."""

    def __init__(self, c_in, c_out, kernel, stride, pad, rng, gain=math.sqrt(6.0)):
        super().__init__()
        self.stride, self.pad, self.kernel = stride, pad, kernel
        self.params["weight"] = _uniform(rng, gain / math.sqrt(c_in * kernel), (c_out, c_in, kernel))
        self.params["bias"] = np.zeros(c_out)

    def forward(self, x):
        B, C, L = x.shape
        K, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        n_out = conv_out_len(L, K, s, p)
        win = sliding_window_view(xp, K, axis=2)[:, :, : s * (n_out - 1) + 1 : s, :]
        cols = win.transpose(0, 2, 1, 3).reshape(B * n_out, C * K)
        W = self.params["weight"]
        out = cols @ W.reshape(W.shape[0], -1).T + self.params["bias"]
        self._cols, self._shape = cols, (B, C, L, n_out)
        return out.reshape(B, n_out, -1).transpose(0, 2, 1)

    def backward(self, grad):
        B, C, L, n_out = self._shape
        K, s, p = self.kernel, self.stride, self.pad
        W = self.params["weight"]
        g2 = grad.transpose(0, 2, 1).reshape(B * n_out, -1)
        self._accumulate("weight", (g2.T @ self._cols).reshape(W.shape))
        self._accumulate("bias", grad.sum(axis=(0, 2)))
        dcols = (g2 @ W.reshape(W.shape[0], -1)).reshape(B, n_out, C, K)
        dxp = np.zeros((B, C, L + 2 * p))
        for k in range(K):
            dxp[:, :, k : k + s * (n_out - 1) + 1 : s] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dxp[:, :, p : p + L]


class ConvTranspose1d(Layer):
    """Transposed 1-D convolution, input (B, C_in, L), weight (C_in, C_out, K).

    Output length is ``(L - 1) * stride - 2 * pad + K + output_padding``.
    """

    def __init__(self, c_in, c_out, kernel, stride, pad, output_padding, rng, gain=math.sqrt(6.0)):
        super().__init__()
        if output_padding > pad:
            raise ValueError("output_padding larger than pad is not supported")
        self.stride, self.pad, self.kernel, self.output_padding = stride, pad, kernel, output_padding
        # fan-in of each output position is about C_in * K / stride
        bound = gain / math.sqrt(c_in * kernel / stride)
        self.params["weight"] = _uniform(rng, bound, (c_in, c_out, kernel))
        self.params["bias"] = np.zeros(c_out)

    def out_len(self, n_in):
        return (n_in - 1) * self.stride - 2 * self.pad + self.kernel + self.output_padding

    def forward(self, x):
        B, C, L = x.shape
        K, s, p = self.kernel, self.stride, self.pad
        W = self.params["weight"]
        c_out = W.shape[1]
        x2 = x.transpose(0, 2, 1).reshape(B * L, C)
        cols = (x2 @ W.reshape(C, -1)).reshape(B, L, c_out, K)
        n_full = (L - 1) * s + K
        full = np.zeros((B, c_out, n_full))
        for k in range(K):
            full[:, :, k : k + s * (L - 1) + 1 : s] += cols[:, :, :, k].transpose(0, 2, 1)
        n_out = self.out_len(L)
        self._x2, self._shape = x2, (B, C, L, n_full, n_out)
        return full[:, :, p : p + n_out] + self.params["bias"][:, None]

    def backward(self, grad):
        B, C, L, n_full, n_out = self._shape
        K, s, p = self.kernel, self.stride, self.pad
        W = self.params["weight"]
        c_out = W.shape[1]
        gfull = np.zeros((B, c_out, n_full))
        gfull[:, :, p : p + n_out] = grad
        win = sliding_window_view(gfull, K, axis=2)[:, :, : s * (L - 1) + 1 : s, :]
        gcols = win.transpose(0, 2, 1, 3).reshape(B * L, c_out * K)
        self._accumulate("weight", (self._x2.T @ gcols).reshape(W.shape))
        self._accumulate("bias", grad.sum(axis=(0, 2)))
        dx = gcols @ W.reshape(C, -1).T
        return dx.reshape(B, L, C).transpose(0, 2, 1)


class BatchNorm(Layer):
    """Batch normalization over all axes but the channel axis 1.

    Training mode normalizes with batch statistics and updates running
    estimates (unbiased variance, momentum 0.1) unless ``update_running`` is
    False; inference mode uses the running estimates.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.update_running = True
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    @staticmethod
    def _flat(x):
        if x.ndim == 2:
            return x
        return x.transpose(0, 2, 1).reshape(-1, x.shape[1])

    @staticmethod
    def _unflat(x2, shape):
        if len(shape) == 2:
            return x2
        return x2.reshape(shape[0], shape[2], shape[1]).transpose(0, 2, 1)

    def forward(self, x):
        x2 = self._flat(x)
        if self.training:
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            if self.update_running:
                n = x2.shape[0]
                m = self.momentum
                unbiased = var * n / max(n - 1, 1)
                self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
                self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x2 - mean) * inv_std
        self._cache = (xhat, inv_std, x.shape, self.training)
        return self._unflat(xhat * self.params["gamma"] + self.params["beta"], x.shape)

    def backward(self, grad):
        xhat, inv_std, shape, training = self._cache
        g2 = self._flat(grad)
        self._accumulate("gamma", np.sum(g2 * xhat, axis=0))
        self._accumulate("beta", g2.sum(axis=0))
        dxhat = g2 * self.params["gamma"]
        if training:
            n = g2.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dx = dxhat * inv_std
        return self._unflat(dx, shape)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}", layer


class Adam:
    """Adam over a flat dict of named parameter arrays, updated in place."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
