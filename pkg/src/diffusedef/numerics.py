"""Hand-written forward/backward kernels on plain numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Arrays are float64 in gradient checks and usually
float32 during training. Broadcasting is limited to bias addition.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    pass


class Rng:
    """Seeded random stream.

    Uniform draws come from numpy's PCG64 bit generator (53-bit doubles in
    [0, 1)); Gaussian draws are produced from those uniforms with the
    Box-Muller transform so a given seed replays the same normals.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def gaussian(self, size=None, dtype=np.float64) -> np.ndarray:
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._gen.random((2, pairs))
        # 1 - u lies in (0, 1], so the log is finite
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * math.pi * u[1]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, index: int) -> "Rng":
        return Rng(self.seed ^ int(index))


def _check_last(x, n, what):
    if x.shape[-1] != n:
        raise ShapeError(f"{what}: expected last dimension {n}, got shape {x.shape}")


# ---------------------------------------------------------------- linear


def linear_forward(x, W, b):
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: weight {W.shape} and bias {b.shape} disagree")
    _check_last(x, W.shape[0], "linear input")
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- layernorm


def layernorm_forward(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    _check_last(x, gain.shape[0], "layernorm input")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_backward(dy, cache):
    xhat, inv, gain = cache
    D = xhat.shape[-1]
    dgain = (dy * xhat).reshape(-1, D).sum(axis=0)
    dbias = dy.reshape(-1, D).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------- activations

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(dy, cache):
    x, th = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dropout_forward(x, p, rng: Rng | None):
    """Inverted dropout. ``rng=None`` or ``p=0`` is the identity."""
    if rng is None or p <= 0.0:
        return x, None
    keep = (rng.uniform(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


# ---------------------------------------------------------------- embedding


def embedding_forward(ids, table):
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise IndexError(f"token id outside [0, {table.shape[0]})")
    return table[ids], (ids, table.shape)


def embedding_backward(dy, cache):
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dy.dtype)
    np.add.at(dtable, ids.reshape(-1), dy.reshape(-1, shape[1]))
    return dtable


# ---------------------------------------------------------------- attention

ATTN_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def multihead_attention_forward(x, params, mask, n_heads):
    """Scaled dot-product self-attention over ``x`` of shape [B, L, D].

    ``params`` maps the names in ``ATTN_KEYS`` to arrays. ``mask`` is [B, L]
    with 1 for real tokens; padded keys get exactly zero weight.
    """
    if x.ndim == 2:
        out, cache = multihead_attention_forward(x[None], params, mask[None], n_heads)
        return out[0], (True, cache)
    B, L, D = x.shape
    if D % n_heads:
        raise ValueError(f"width {D} is not divisible by {n_heads} heads")
    if mask.shape != (B, L):
        raise ShapeError(f"attention mask {mask.shape} does not match input {x.shape}")
    valid = mask.astype(bool)
    if not valid.any(axis=1).all():
        raise ValueError("attention over a sequence with no valid positions")
    dh = D // n_heads

    def split(t):
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    q, cq = linear_forward(x, params["Wq"], params["bq"])
    k, ck = linear_forward(x, params["Wk"], params["bk"])
    v, cv = linear_forward(x, params["Wv"], params["bv"])
    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / math.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(valid[:, None, None, :], scores, -np.inf)
    probs = softmax(scores)
    ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, L, D)
    out, co = linear_forward(ctx, params["Wo"], params["bo"])
    return out, (False, (cq, ck, cv, co, qh, kh, vh, probs, scale))


def multihead_attention_backward(dout, cache):
    """Returns ``(dx, grads)`` with ``grads`` keyed like ``ATTN_KEYS``."""
    squeezed, cache = cache
    if squeezed:
        dx, grads = multihead_attention_backward(dout[None], cache)
        return dx[0], grads
    cq, ck, cv, co, qh, kh, vh, probs, scale = cache
    B, H, L, dh = qh.shape
    D = H * dh
    grads = {}
    dctx, grads["Wo"], grads["bo"] = linear_backward(dout, co)
    dctx = dctx.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    dprobs = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, D)

    dxq, grads["Wq"], grads["bq"] = linear_backward(merge(dqh), cq)
    dxk, grads["Wk"], grads["bk"] = linear_backward(merge(dkh), ck)
    dxv, grads["Wv"], grads["bv"] = linear_backward(merge(dvh), cv)
    return dxq + dxk + dxv, grads


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = np.arange(B)
    loss = -logp[idx, labels].mean()
    dlogits = np.exp(logp)
    dlogits[idx, labels] -= 1.0
    return float(loss), dlogits / B


def mse(a, b):
    """Mean squared difference and the gradient w.r.t. ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a - b
    return float((diff * diff).mean()), 2.0 * diff / diff.size


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction and optional decoupled weight decay."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        """Update ``params`` in place for every name present in ``grads``."""
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
