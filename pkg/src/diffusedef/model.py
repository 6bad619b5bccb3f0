"""Transformer encoder + mean-pooled linear classifier, trained from scratch.

Clean training and FreeLB-style adversarial training share one loop; the
adversarial variant perturbs the token-embedding output with a per-example
L2-bounded ``delta`` and averages parameter gradients over the ascent steps.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .text import TokenSequence, batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int
    width: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    max_len: int = 32
    dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by {self.heads} heads")


@dataclass
class AdvTrainConfig:
    enabled: bool = True
    inner_steps: int = 5
    step_size: float = 0.01
    norm_bound: float = 0.3

    def __post_init__(self):
        if self.norm_bound <= 0:
            raise ValueError("norm_bound must be positive")
        if self.enabled and self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1 when adversarial training is enabled")


def mean_pool_forward(h, mask):
    m = mask.astype(h.dtype)[..., None]
    count = m.sum(axis=-2)
    if (count == 0).any():
        raise ValueError("cannot pool a sequence with no valid positions")
    return (h * m).sum(axis=-2) / count, (m, count)


def mean_pool_backward(dpooled, cache):
    m, count = cache
    return (dpooled / count)[..., None, :] * m


class EncoderClassifier:
    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        if params is None:
            params = self._init(nx.Rng(seed))
        self.params = params

    def _init(self, rng):
        c, dt = self.cfg, self.dtype
        p = {
            "tok_emb": (rng.gaussian((c.vocab_size, c.width)) * 0.02).astype(dt),
            "pos_emb": (rng.gaussian((c.max_len, c.width)) * 0.02).astype(dt),
            "emb_ln.g": np.ones(c.width, dtype=dt),
            "emb_ln.b": np.zeros(c.width, dtype=dt),
        }
        for i in range(c.layers):
            tf.init_layer(p, f"layer{i}", c.width, c.ffn, rng, dt)
        p["head.W"] = (rng.gaussian((c.width, c.n_classes)) * 0.02).astype(dt)
        p["head.b"] = np.zeros(c.n_classes, dtype=dt)
        return p

    @property
    def width(self):
        return self.cfg.width

    # ------------------------------------------------------------ forward

    def embed(self, ids):
        tok, cache = nx.embedding_forward(ids, self.params["tok_emb"])
        return tok, cache

    def encode_from_embeddings(self, tok, mask, rng=None):
        """Positional sum, embedding norm and the encoder stack. Dropout iff ``rng``."""
        L = tok.shape[-2]
        x = tok + self.params["pos_emb"][:L]
        x, c_ln = nx.layernorm_forward(x, self.params["emb_ln.g"], self.params["emb_ln.b"])
        x, keep = nx.dropout_forward(x, self.cfg.dropout, rng)
        caches = []
        for i in range(self.cfg.layers):
            x, c = tf.layer_forward(x, mask, self.params, f"layer{i}", self.cfg.heads, self.cfg.dropout, rng)
            caches.append(c)
        return x, (c_ln, keep, caches, L)

    def encode_backward(self, dh, cache, grads):
        """Backprop from hidden states to the token-embedding output."""
        c_ln, keep, caches, L = cache
        for c in reversed(caches):
            dh = tf.layer_backward(dh, c, grads)
        dx = nx.dropout_backward(dh, keep)
        dx, dg, db = nx.layernorm_backward(dx, c_ln)
        tf._acc(grads, "emb_ln.g", dg)
        tf._acc(grads, "emb_ln.b", db)
        dpos = np.zeros_like(self.params["pos_emb"])
        dpos[:L] = dx.reshape(-1, L, dx.shape[-1]).sum(axis=0)
        tf._acc(grads, "pos_emb", dpos)
        return dx

    def encode(self, ids, mask):
        """Hidden states [.., L, D] at inference (no dropout)."""
        ids = np.asarray(ids)
        mask = np.asarray(mask)
        if ids.ndim == 1:
            return self.encode(ids[None], mask[None])[0]
        tok, _ = self.embed(ids)
        h, _ = self.encode_from_embeddings(tok, mask)
        return h

    def head_forward(self, h, mask):
        pooled, c_pool = mean_pool_forward(h, mask)
        logits, c_lin = nx.linear_forward(pooled, self.params["head.W"], self.params["head.b"])
        return logits, (c_pool, c_lin)

    def head_backward(self, dlogits, cache, grads):
        c_pool, c_lin = cache
        dpooled, dW, db = nx.linear_backward(dlogits, c_lin)
        tf._acc(grads, "head.W", dW)
        tf._acc(grads, "head.b", db)
        return mean_pool_backward(dpooled, c_pool)

    def classify(self, h, mask):
        """Mean-pool ``h`` over valid positions and apply the linear head."""
        if not np.isfinite(h).all():
            raise ValueError("hidden state contains non-finite values")
        logits, _ = self.head_forward(h, np.asarray(mask))
        return logits

    def logits(self, ids, mask):
        return self.classify(self.encode(ids, mask), mask)

    def predict_proba(self, ids, mask, chunk=256):
        out = [nx.softmax(self.logits(ids[i : i + chunk], mask[i : i + chunk])) for i in range(0, len(ids), chunk)]
        return np.concatenate(out)

    # ------------------------------------------------------------ training

    def loss_and_grads(self, ids, mask, labels, rng=None, delta=None):
        """Cross-entropy, parameter grads and the grad w.r.t. the token-embedding output."""
        grads: dict = {}
        tok, c_emb = self.embed(ids)
        if delta is not None:
            tok = tok + delta
        h, c_enc = self.encode_from_embeddings(tok, mask, rng)
        logits, c_head = self.head_forward(h, mask)
        loss, dlogits = nx.softmax_cross_entropy(logits, labels)
        dh = self.head_backward(dlogits.astype(self.dtype), c_head, grads)
        dtok = self.encode_backward(dh, c_enc, grads)
        grads["tok_emb"] = nx.embedding_backward(dtok, c_emb)
        return loss, grads, dtok

    def copy(self) -> "EncoderClassifier":
        return EncoderClassifier(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def config_dict(self):
        return asdict(self.cfg)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    max_delta_norm: float = 0.0


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _fit(model, data, epochs, lr, rng, batch_size, adv: AdvTrainConfig | None, check_projection=False):
    if not data:
        raise ValueError("training set is empty")
    ids, mask, labels = batch(data)
    if labels.min() < 0 or labels.max() >= model.cfg.n_classes:
        raise ValueError("label outside the model's class range")
    opt = nx.Adam(lr=lr)
    tlog = TrainLog()
    for epoch in range(epochs):
        losses = []
        for idx in _minibatches(len(data), batch_size, rng):
            L = int(mask[idx].sum(axis=1).max())
            b_ids, b_mask, b_lab = ids[idx, :L], mask[idx, :L], labels[idx]
            if adv is None or not adv.enabled:
                loss, grads, _ = model.loss_and_grads(b_ids, b_mask, b_lab, rng)
            else:
                loss, grads = _freelb_step(model, b_ids, b_mask, b_lab, adv, rng, tlog, check_projection)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            opt.step(model.params, grads)
            losses.append(loss)
        tlog.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, tlog.epoch_loss[-1])
    return tlog


def _freelb_step(model, ids, mask, labels, adv, rng, tlog, check_projection):
    B, L = ids.shape
    valid = mask.astype(model.dtype)[..., None]
    delta = np.zeros((B, L, model.width), dtype=model.dtype)
    total: dict = {}
    losses = []
    for _ in range(adv.inner_steps):
        loss, grads, dtok = model.loss_and_grads(ids, mask, labels, rng, delta)
        losses.append(loss)
        for k, g in grads.items():
            g = g / adv.inner_steps
            total[k] = total[k] + g if k in total else g
        g = dtok * valid
        gnorm = np.sqrt((g * g).sum(axis=(1, 2), keepdims=True))
        delta = delta + adv.step_size * g / np.maximum(gnorm, 1e-12)
        dnorm = np.sqrt((delta * delta).sum(axis=(1, 2), keepdims=True))
        delta = delta * np.minimum(1.0, adv.norm_bound / np.maximum(dnorm, 1e-12))
        worst = float(np.sqrt((delta * delta).sum(axis=(1, 2))).max())
        tlog.max_delta_norm = max(tlog.max_delta_norm, worst)
        if check_projection:
            assert worst <= adv.norm_bound * (1 + 1e-5), worst
    return float(np.mean(losses)), total


def train_clean(model, data: list[TokenSequence], epochs=10, lr=1e-3, rng=None, batch_size=32) -> TrainLog:
    return _fit(model, data, epochs, lr, rng or nx.Rng(0), batch_size, None)


def train_adversarial(
    model, data: list[TokenSequence], cfg: AdvTrainConfig, epochs=10, lr=1e-3, rng=None, batch_size=32, check_projection=False
) -> TrainLog:
    if not cfg.enabled:
        raise ValueError("adversarial training requested with cfg.enabled = False")
    return _fit(model, data, epochs, lr, rng or nx.Rng(0), batch_size, cfg, check_projection)


def accuracy(model: EncoderClassifier, data: list[TokenSequence]) -> float:
    ids, mask, labels = batch(data)
    return float((model.predict_proba(ids, mask).argmax(axis=1) == labels).mean())
