"""Differentiable layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Call :meth:`Module.zero_grad` between optimisation steps.

Tensor layouts (batch first):

* ``Linear``          (..., n_in)        -> (..., n_out)
* ``Conv1d``          (B, L, C_in)       -> (B, L - k + 1, C_out)
* ``FullWidthConv2d`` (B, T, D)          -> (B, T - k + 1, C)
* ``LSTM``            (B, T, D)          -> (B, T, H)
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Module:
    """Container for named parameters and child modules."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {p.shape}")
            p[...] = src

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return int(sum(p.size for _, p, _ in self.named_parameters()))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.add_param("W", xavier_uniform(rng, (n_in, n_out), n_in, n_out, dtype))
        self.add_param("b", np.zeros(n_out, dtype=dtype))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear: input shape {x.shape} incompatible with weight shape {self.params['W'].shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.grads["W"] += x2.T @ dy2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"].T


class Conv1d(Module):
    """Valid 1-D cross-correlation along the length axis.

    Weight layout is ``(k, C_in, C_out)``; no kernel flip.
    """

    def __init__(self, n_in: int, n_out: int, k: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out, self.k = n_in, n_out, k
        self.add_param("W", xavier_uniform(rng, (k, n_in, n_out), k * n_in, k * n_out, dtype))
        self.add_param("b", np.zeros(n_out, dtype=dtype))
        self._x: np.ndarray | None = None

    def out_length(self, length: int) -> int:
        return length - self.k + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ShapeError(f"{type(self).__name__}: input shape {x.shape}, expected (B, L, {self.n_in})")
        if x.shape[1] < self.k:
            raise ShapeError(f"{type(self).__name__}: length {x.shape[1]} shorter than kernel {self.k}")
        self._x = x
        # windows: (B, L', C_in, k)
        win = sliding_window_view(x, self.k, axis=1)
        return np.einsum("blck,kco->blo", win, self.params["W"], optimize=True) + self.params["b"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        W = self.params["W"]
        win = sliding_window_view(x, self.k, axis=1)
        self.grads["W"] += np.einsum("blck,blo->kco", win, dy, optimize=True)
        self.grads["b"] += dy.sum(axis=(0, 1))
        dx = np.zeros_like(x)
        n_out = dy.shape[1]
        for j in range(self.k):
            dx[:, j:j + n_out, :] += dy @ W[j].T
        return dx


class FullWidthConv2d(Conv1d):
    """(k, D) kernels that span the whole feature axis of a T x D input.

    Sliding a (k, D) kernel over a T x D map with valid padding only moves
    along T, so this is a 1-D convolution with D input channels.
    """

    def __init__(self, k: int, width: int, channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__(width, channels, k, rng, dtype)

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return (self.k, self.n_in)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |z| and no masking
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LSTM(Module):
    """Single LSTM layer, zero initial state, gate order (i, f, g, o).

    Backward is full backpropagation through time over the cached sequence.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64,
                 forget_bias: float = 1.0):
        super().__init__()
        self.n_in, self.hidden = n_in, hidden
        s = 1.0 / np.sqrt(hidden)
        self.add_param("Wx", rng.uniform(-s, s, size=(n_in, 4 * hidden)).astype(dtype))
        self.add_param("Wh", rng.uniform(-s, s, size=(hidden, 4 * hidden)).astype(dtype))
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = forget_bias
        self.add_param("b", b)
        self._cache: dict | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ShapeError(f"LSTM: input shape {x.shape}, expected (B, T, {self.n_in})")
        B, T, _ = x.shape
        if T == 0:
            raise ValueError("LSTM: empty sequence (T = 0)")
        H = self.hidden
        Wh = self.params["Wh"]
        # time-major internally so every step touches contiguous memory
        xp = np.ascontiguousarray((x @ self.params["Wx"] + self.params["b"]).transpose(1, 0, 2))
        gates = np.empty((T, B, 4 * H), dtype=xp.dtype)
        c = np.empty((T, B, H), dtype=xp.dtype)
        tanh_c = np.empty_like(c)
        h = np.empty((T, B, H), dtype=xp.dtype)
        h_prev = np.zeros((B, H), dtype=xp.dtype)
        c_prev = np.zeros((B, H), dtype=xp.dtype)
        for t in range(T):
            z = xp[t] + h_prev @ Wh
            g = gates[t]
            g[...] = sigmoid(z)
            g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
            np.multiply(g[:, H:2 * H], c_prev, out=c[t])
            c[t] += g[:, :H] * g[:, 2 * H:3 * H]
            np.tanh(c[t], out=tanh_c[t])
            np.multiply(g[:, 3 * H:], tanh_c[t], out=h[t])
            h_prev, c_prev = h[t], c[t]
        self._cache = {"x": x, "gates": gates, "c": c, "tanh_c": tanh_c, "h": h}
        return h.transpose(1, 0, 2)

    def backward(self, dh: np.ndarray) -> np.ndarray:
        cache = self._cache
        x, gates, c, tanh_c, h = (cache[k] for k in ("x", "gates", "c", "tanh_c", "h"))
        B, T, _ = x.shape
        H = self.hidden
        Wh = self.params["Wh"]
        dh = np.ascontiguousarray(dh.transpose(1, 0, 2))
        dz = np.empty_like(gates)
        dh_next = np.zeros((B, H), dtype=h.dtype)
        dc_next = np.zeros((B, H), dtype=h.dtype)
        zeros = np.zeros((B, H), dtype=h.dtype)
        for t in reversed(range(T)):
            g = gates[t]
            i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            dht = dh[t] + dh_next
            dc = dc_next + dht * o * (1.0 - tanh_c[t] ** 2)
            c_prev = c[t - 1] if t > 0 else zeros
            d = dz[t]
            d[:, :H] = dc * gg * i * (1.0 - i)
            d[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            d[:, 2 * H:3 * H] = dc * i * (1.0 - gg ** 2)
            d[:, 3 * H:] = dht * tanh_c[t] * o * (1.0 - o)
            dh_next = d @ Wh.T
            dc_next = dc * f
        dz_flat = dz.reshape(-1, 4 * H)
        x_tm = x.transpose(1, 0, 2).reshape(-1, self.n_in)
        self.grads["Wx"] += x_tm.T @ dz_flat
        self.grads["Wh"] += h[:-1].reshape(-1, H).T @ dz[1:].reshape(-1, 4 * H)
        self.grads["b"] += dz_flat.sum(axis=0)
        return (dz @ self.params["Wx"].T).transpose(1, 0, 2)


class StackedLSTM(Module):
    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.hidden, self.n_layers = hidden, layers
        self.layers = [
            self.add_child(f"l{i}", LSTM(n_in if i == 0 else hidden, hidden, rng, dtype))
            for i in range(layers)
        ]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dh: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return dh


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


class Dropout:
    """Inverted dropout: kept units scaled by 1/(1-rate) while training."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._mask is None else dy * self._mask


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


class LogSoftmax:
    def forward(self, z: np.ndarray) -> np.ndarray:
        self._out = log_softmax(z)
        return self._out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        p = np.exp(self._out)
        return dy - p * dy.sum(axis=-1, keepdims=True)


def weighted_nll(log_probs: np.ndarray, labels: np.ndarray,
                 class_weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``-w[y] * log_probs[y]``.

    Returns the loss and its gradient with respect to ``log_probs``.
    """
    log_probs = np.asarray(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = log_probs.shape
    w = np.ones(K) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError(f"class weights must be positive, got {w}")
    wy = w[labels]
    rows = np.arange(B)
    loss = float(-(wy * log_probs[rows, labels]).sum() / B)
    grad = np.zeros_like(log_probs)
    grad[rows, labels] = -wy / B
    return loss, grad
