"""Layers with explicit forward/backward passes over (batch, time, features) arrays."""
from __future__ import annotations

import numpy as np

GATES = ("c", "u", "f", "o")  # candidate, update, forget, output


def sigmoid(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    # tanh form never overflows
    out = np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def lstm_cell_forward(params: dict[str, np.ndarray], z_t: np.ndarray, a_prev: np.ndarray,
                      c_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """One LSTM step.

    ``params`` holds ``W_c, W_u, W_f, W_o`` of shape (hidden, hidden + input)
    acting on ``[a_prev, z_t]`` and biases ``b_*`` of shape (hidden,).
    Works on single vectors or on batches in rows.
    """
    h = params["b_c"].shape[0]
    if a_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise ValueError("state size does not match the cell")
    if params["W_c"].shape[1] != h + z_t.shape[-1]:
        raise ValueError(f"cell expects input size {params['W_c'].shape[1] - h}, got {z_t.shape[-1]}")
    x = np.concatenate([a_prev, z_t], axis=-1)
    cand = np.tanh(x @ params["W_c"].T + params["b_c"])
    u = sigmoid(x @ params["W_u"].T + params["b_u"])
    f = sigmoid(x @ params["W_f"].T + params["b_f"])
    o = sigmoid(x @ params["W_o"].T + params["b_o"])
    c = u * cand + f * c_prev
    tc = np.tanh(c)
    a = o * tc
    cache = {"x": x, "cand": cand, "u": u, "f": f, "o": o, "c": c, "tc": tc, "c_prev": c_prev}
    return a, c, cache


class Layer:
    name: str
    param_names: tuple[str, ...] = ()

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def forward(self, params: dict, X: np.ndarray, train: bool, rng: np.random.Generator | None):
        raise NotImplementedError

    def backward(self, params: dict, dY: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def key(self, p: str) -> str:
        return f"{self.name}.{p}"


class LSTMLayer(Layer):
    """Stateless LSTM over the whole sequence, returning every activation."""

    def __init__(self, name: str, n_in: int, n_hidden: int, forget_bias: float = 1.0):
        self.name, self.n_in, self.h, self.forget_bias = name, n_in, n_hidden, forget_bias
        self.param_names = tuple(f"W_{g}" for g in GATES) + tuple(f"b_{g}" for g in GATES)

    def param_shapes(self):
        shapes = {self.key(f"W_{g}"): (self.h, self.h + self.n_in) for g in GATES}
        shapes.update({self.key(f"b_{g}"): (self.h,) for g in GATES})
        return shapes

    def init_params(self, rng):
        p = {self.key(f"W_{g}"): glorot(rng, self.h, self.h + self.n_in) for g in GATES}
        for g in GATES:
            p[self.key(f"b_{g}")] = np.full(self.h, self.forget_bias if g == "f" else 0.0)
        return p

    def _stacked(self, params, halve_gates: bool = False):
        W = np.concatenate([params[self.key(f"W_{g}")] for g in GATES], axis=0)  # (4h, h+in)
        b = np.concatenate([params[self.key(f"b_{g}")] for g in GATES])
        if halve_gates:
            # sigmoid(x) = (tanh(x / 2) + 1) / 2, so the gate rows take the halving
            # and one tanh covers all four gates
            W[self.h:] *= 0.5
            b[self.h:] *= 0.5
        return W[:, :self.h], W[:, self.h:], b

    def forward(self, params, X, train, rng):
        B, T, _ = X.shape
        h = self.h
        Wa, Wx, b = self._stacked(params, halve_gates=True)
        # time-major buffers keep each step's slice contiguous
        Xt = np.ascontiguousarray(X.transpose(1, 0, 2))
        G = (Xt.reshape(T * B, -1) @ Wx.T + b).reshape(T, B, 4 * h)
        dt = G.dtype
        A = np.empty((T, B, h), dtype=dt)
        C = np.empty((T, B, h), dtype=dt)
        TC = np.empty((T, B, h), dtype=dt)
        a = np.zeros((B, h), dtype=dt)
        c = np.zeros((B, h), dtype=dt)
        for t in range(T):
            g = G[t]  # overwritten in place with the activations: cand, u, f, o
            g += a @ Wa.T
            np.tanh(g, out=g)
            gates = g[:, h:]
            gates *= 0.5
            gates += 0.5
            c = g[:, h:2 * h] * g[:, :h] + g[:, 2 * h:3 * h] * c
            C[t] = c
            np.tanh(c, out=TC[t])
            a = A[t]
            np.multiply(g[:, 3 * h:], TC[t], out=a)
        return A.transpose(1, 0, 2), (Xt, A, C, G, TC)

    def backward(self, params, dA, cache):
        Xt, A, C, acts, TC = cache
        T, B, _ = Xt.shape
        h = self.h
        Wa, Wx, _ = self._stacked(params)
        dAt = dA.transpose(1, 0, 2)
        dG = np.empty((T, B, 4 * h), dtype=acts.dtype)
        da = np.zeros((B, h), dtype=acts.dtype)
        dc_next = np.zeros((B, h), dtype=acts.dtype)
        zeros = np.zeros((B, h), dtype=acts.dtype)
        for t in reversed(range(T)):
            g = acts[t]
            cand, u, f, o = g[:, :h], g[:, h:2 * h], g[:, 2 * h:3 * h], g[:, 3 * h:]
            c_prev = C[t - 1] if t > 0 else zeros
            da = da + dAt[t]
            tc = TC[t]
            dc = da * o * (1.0 - tc * tc) + dc_next
            dg = dG[t]
            dg[:, :h] = dc * u * (1.0 - cand * cand)
            dg[:, h:2 * h] = dc * cand * u * (1.0 - u)
            dg[:, 2 * h:3 * h] = dc * c_prev * f * (1.0 - f)
            dg[:, 3 * h:] = da * tc * o * (1.0 - o)
            dc_next = dc * f
            da = dg @ Wa
        flatG = dG.reshape(T * B, 4 * h)
        # a_prev at step t is A[t - 1]; the first step sees zeros
        dWa = flatG[B:].T @ A[:-1].reshape(-1, h) if T > 1 else np.zeros_like(Wa)
        dWx = flatG.T @ Xt.reshape(T * B, -1)
        db = flatG.sum(axis=0)
        dX = (dG @ Wx).transpose(1, 0, 2)
        dW = np.concatenate([dWa, dWx], axis=1)
        grads = {}
        for k, g in enumerate(GATES):
            grads[self.key(f"W_{g}")] = dW[k * h:(k + 1) * h]
            grads[self.key(f"b_{g}")] = db[k * h:(k + 1) * h]
        return dX, grads


class DenseLayer(Layer):
    """Time-distributed affine map with optional tanh."""

    def __init__(self, name: str, n_in: int, n_out: int, activation: str = "tanh"):
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.name, self.n_in, self.n_out, self.activation = name, n_in, n_out, activation
        self.param_names = ("W", "b")

    def param_shapes(self):
        return {self.key("W"): (self.n_out, self.n_in), self.key("b"): (self.n_out,)}

    def init_params(self, rng):
        return {self.key("W"): glorot(rng, self.n_out, self.n_in), self.key("b"): np.zeros(self.n_out)}

    def forward(self, params, X, train, rng):
        Y = X @ params[self.key("W")].T + params[self.key("b")]
        if self.activation == "tanh":
            Y = np.tanh(Y)
        return Y, (X, Y)

    def backward(self, params, dY, cache):
        X, Y = cache
        if self.activation == "tanh":
            dY = dY * (1.0 - Y * Y)
        flat = dY.reshape(-1, self.n_out)
        grads = {self.key("W"): flat.T @ X.reshape(-1, self.n_in), self.key("b"): flat.sum(axis=0)}
        return dY @ params[self.key("W")], grads


class Dropout(Layer):
    """Inverted dropout on hidden activations; identity outside training."""

    def __init__(self, name: str, rate: float):
        self.name, self.rate = name, rate

    def forward(self, params, X, train, rng):
        if not train or self.rate <= 0:
            return X, None
        keep = (rng.random(X.shape) >= self.rate) / (1.0 - self.rate)
        return X * keep, keep

    def backward(self, params, dY, cache):
        return (dY if cache is None else dY * cache), {}


class RepeatLast(Layer):
    """Repeat the final time step across the window (repeat-vector decoder input)."""

    def __init__(self, name: str):
        self.name = name

    def forward(self, params, X, train, rng):
        return np.repeat(X[:, -1:, :], X.shape[1], axis=1), X.shape

    def backward(self, params, dY, cache):
        dX = np.zeros(cache)
        dX[:, -1] = dY.sum(axis=1)
        return dX, {}
