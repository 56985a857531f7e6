"""A small neural-network kit with hand-written backward passes.

Layers keep what they need from ``forward`` and return the input gradient
from ``backward(grad_out)``, accumulating parameter gradients into
``layer.grads``.  Arrays keep whatever float dtype they are given, so the
same code trains in float32 and is gradient-checked in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch

PROB_CLAMP = 1e-7


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    """Stride-1, 'same'-padded 2-D cross-correlation over ``(B, C, T, F)`` input."""

    def __init__(self, in_channels: int, out_channels: int, kernel=(3, 3), rng=None, dtype=np.float64):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * kh * kw, out_channels * kh * kw
        self.params["W"] = _glorot(rng, fan_in, fan_out, (out_channels, in_channels, kh, kw), dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()
        # the first layer of a network has no use for its input gradient
        self.needs_input_grad = True

    @staticmethod
    def _im2col(x, kh, kw):
        B, C, T, F = x.shape
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        # (B, T, F, C, kh, kw) -> one row per output position
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
        return cols.reshape(B * T * F, C * kh * kw)

    def forward(self, x):
        W = self.params["W"]
        co, ci, kh, kw = W.shape
        if x.ndim != 4 or x.shape[1] != ci:
            raise ShapeMismatch(f"Conv2D expects (B, {ci}, T, F), got {x.shape}")
        B, _, T, F = x.shape
        cols = self._im2col(x, kh, kw)
        out = cols @ W.reshape(co, -1).T + self.params["b"]
        self._cache = (cols, x.shape)
        return out.reshape(B, T, F, co).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, (B, ci, T, F) = self._cache
        W = self.params["W"]
        co, _, kh, kw = W.shape
        g = grad.transpose(0, 2, 3, 1).reshape(B * T * F, co)
        self.grads["W"] += (g.T @ cols).reshape(W.shape)
        self.grads["b"] += g.sum(axis=0)
        if not self.needs_input_grad:
            return None
        # input gradient: 'same' correlation of grad with the flipped, channel-swapped kernel
        w_flip = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
        dx = self._im2col(grad, kh, kw) @ w_flip.T
        return dx.reshape(B, T, F, ci).transpose(0, 3, 1, 2)


class MaxPoolFreq(Layer):
    """Non-overlapping max-pool along the last (frequency) axis; trailing odd bins drop."""

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x):
        *lead, F = x.shape
        k = self.size
        Fo = F // k
        if Fo == 0:
            raise ShapeMismatch(f"cannot pool {F} bins by {k}")
        if k == 2:
            a, b = x[..., 0 : 2 * Fo : 2], x[..., 1 : 2 * Fo : 2]
            first = a >= b
            self._cache = (x.shape, first)
            return np.where(first, a, b)
        blocks = x[..., : Fo * k].reshape(*lead, Fo, k)
        idx = np.argmax(blocks, axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, sel = self._cache
        k = self.size
        Fo = grad.shape[-1]
        dx = np.zeros(shape, dtype=grad.dtype)
        if k == 2:
            dx[..., 0 : 2 * Fo : 2] = grad * sel
            dx[..., 1 : 2 * Fo : 2] = grad * ~sel
            return dx
        blocks = np.zeros((*shape[:-1], Fo, k), dtype=grad.dtype)
        np.put_along_axis(blocks, sel[..., None], grad[..., None], axis=-1)
        dx[..., : Fo * k] = blocks.reshape(*shape[:-1], Fo * k)
        return dx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        y = self._y
        return grad * y * (1.0 - y)


class ToSequence(Layer):
    """``(B, C, T, F)`` feature maps to a ``(B, T, C*F)`` sequence."""

    def forward(self, x):
        self._shape = x.shape
        B, C, T, F = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, C * F)

    def backward(self, grad):
        B, C, T, F = self._shape
        return grad.reshape(B, T, C, F).transpose(0, 2, 1, 3)


class LastStep(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x[:, -1, :]

    def backward(self, grad):
        dx = np.zeros(self._shape, dtype=grad.dtype)
        dx[:, -1, :] = grad
        return dx


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = _glorot(rng, in_features, out_features, (in_features, out_features), dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.params["W"].shape[0]:
            raise ShapeMismatch(f"Dense expects {self.params['W'].shape[0]} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._x
        self.grads["W"] += x.reshape(-1, x.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        self.grads["b"] += grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return grad @ self.params["W"].T


class GRU(Layer):
    """Single-layer GRU over ``(B, T, D)`` returning all hidden states ``(B, T, H)``.

    Gate order in the stacked weights is update (z), reset (r), candidate (n)::

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        n = tanh(x Wn + (r * h) Un + bn)
        h' = (1 - z) * n + z * h
    """

    def __init__(self, input_size: int, hidden_size: int, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden_size
        self.hidden_size = H
        self.params["W"] = _glorot(rng, input_size, H, (input_size, 3 * H), dtype)
        # orthogonal recurrent blocks
        U = [np.linalg.qr(rng.standard_normal((H, H)))[0] for _ in range(3)]
        self.params["U"] = np.concatenate(U, axis=1).astype(dtype)
        self.params["b"] = np.zeros(3 * H, dtype=dtype)
        self.zero_grad()

    def forward(self, x, h0=None):
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        if x.ndim != 3 or x.shape[2] != W.shape[0]:
            raise ShapeMismatch(f"GRU expects (B, T, {W.shape[0]}), got {x.shape}")
        B, T, _ = x.shape
        H = self.hidden_size
        xw = x @ W + b
        h = np.zeros((B, H), dtype=x.dtype) if h0 is None else h0
        hs = np.empty((B, T, H), dtype=x.dtype)
        zs, rs, ns, hprev = (np.empty((B, T, H), dtype=x.dtype) for _ in range(4))
        Uzr, Un = U[:, : 2 * H], U[:, 2 * H :]
        for t in range(T):
            zr = sigmoid(xw[:, t, : 2 * H] + h @ Uzr)
            z, r = zr[:, :H], zr[:, H:]
            n = np.tanh(xw[:, t, 2 * H :] + (r * h) @ Un)
            hprev[:, t] = h
            h = (1.0 - z) * n + z * h
            zs[:, t], rs[:, t], ns[:, t], hs[:, t] = z, r, n, h
        self._cache = (x, zs, rs, ns, hprev)
        return hs

    def backward(self, grad):
        x, zs, rs, ns, hprev = self._cache
        W, U = self.params["W"], self.params["U"]
        B, T, _ = x.shape
        H = self.hidden_size
        Uzr, Un = U[:, : 2 * H], U[:, 2 * H :]
        da = np.empty((B, T, 3 * H), dtype=grad.dtype)
        dU = np.zeros_like(U)
        dh = np.zeros((B, H), dtype=grad.dtype)
        for t in range(T - 1, -1, -1):
            z, r, n, hp = zs[:, t], rs[:, t], ns[:, t], hprev[:, t]
            dh = dh + grad[:, t]
            dn = dh * (1.0 - z)
            dz = dh * (hp - n)
            dh_prev = dh * z
            dan = dn * (1.0 - n * n)
            drh = dan @ Un.T
            dr = drh * hp
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dzr = np.concatenate([daz, dar], axis=1)
            dh_prev += dzr @ Uzr.T
            dU[:, : 2 * H] += hp.T @ dzr
            dU[:, 2 * H :] += (r * hp).T @ dan
            da[:, t, : 2 * H] = dzr
            da[:, t, 2 * H :] = dan
            dh = dh_prev
        self._dh0 = dh
        flat = da.reshape(B * T, 3 * H)
        self.grads["W"] += x.reshape(B * T, -1).T @ flat
        self.grads["U"] += dU
        self.grads["b"] += flat.sum(axis=0)
        return da @ W.T


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_bce_shapes(p, y, w):
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeMismatch(f"posteriors {p.shape} and labels {y.shape} must be equal (B, C) arrays")
    if w.shape != (p.shape[1], 2):
        raise ShapeMismatch(f"class weights must be ({p.shape[1]}, 2), got {w.shape}")


def weighted_bce(posteriors, labels, class_weights):
    """Mean over the batch of the class-weighted binary cross-entropy summed over categories.

    ``class_weights[c, y]`` scales category ``c``'s term when its label is ``y``.
    Returns ``(loss, d loss / d posteriors)``; posteriors are clamped to
    ``[1e-7, 1 - 1e-7]`` and the gradient is zero where the clamp is active.
    """
    p = np.asarray(posteriors)
    y = np.asarray(labels).astype(p.dtype)
    w = np.asarray(class_weights, dtype=p.dtype)
    _check_bce_shapes(p, y, w)
    B = p.shape[0]
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    wy = np.where(y > 0.5, w[:, 1], w[:, 0])
    terms = -wy * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = terms.sum() / B
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
    grad = wy * (-y / pc + (1.0 - y) / (1.0 - pc)) / B * inside
    return float(loss), grad


def weighted_bce_with_logits(logits, labels, class_weights):
    """:func:`weighted_bce` applied to ``sigmoid(logits)``, fused for training.

    The gradient ``w * (sigmoid(z) - y) / B`` does not vanish when the
    posterior saturates, so a confidently wrong output still gets corrected.
    The loss value uses the same clamp as :func:`weighted_bce`.
    """
    z = np.asarray(logits)
    y = np.asarray(labels).astype(z.dtype)
    w = np.asarray(class_weights, dtype=z.dtype)
    _check_bce_shapes(z, y, w)
    p = sigmoid(z)
    loss, _ = weighted_bce(p, y, w)
    wy = np.where(y > 0.5, w[:, 1], w[:, 0])
    return loss, wy * (p - y) / z.shape[0]


def balanced_class_weights(labels) -> np.ndarray:
    """``w[c, y] = N / (2 * count(label_c == y))``; zero where a count is zero."""
    y = np.asarray(labels)
    n = y.shape[0]
    pos = y.sum(axis=0).astype(np.float64)
    neg = n - pos
    w = np.zeros((y.shape[1], 2))
    with np.errstate(divide="ignore"):
        w[:, 0] = np.where(neg > 0, n / (2.0 * neg), 0.0)
        w[:, 1] = np.where(pos > 0, n / (2.0 * pos), 0.0)
    return w


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` in place."""
    if params.keys() != grads.keys():
        raise ShapeMismatch("parameter and gradient names differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
