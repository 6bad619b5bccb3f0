"""Diffusion layer over encoder hidden states.

Timesteps are 1-based throughout: ``t`` in ``1..T`` reads index ``t - 1`` of
the schedule arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .model import EncoderClassifier, TrainLog
from .text import TokenSequence, batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def linear_schedule(T: int = 30, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta1 <= betaT < 1:
        raise ValueError(f"need 0 < beta1 <= betaT < 1, got {beta1}, {betaT}")
    if T == 1:
        beta = np.array([beta1])
    else:
        beta = beta1 + np.arange(T) * (betaT - beta1) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc *= alpha[i]
        alpha_bar[i] = acc
    return NoiseSchedule(beta, alpha, alpha_bar, np.sqrt(beta))


def add_noise(h, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward diffusion: sqrt(abar_t) h + sqrt(1 - abar_t) eps."""
    sched.check_t(t)
    if np.shape(eps) != np.shape(h):
        raise nx.ShapeError(f"noise {np.shape(eps)} does not match hidden state {np.shape(h)}")
    ab = sched.alpha_bar[t - 1]
    return math.sqrt(ab) * h + math.sqrt(1.0 - ab) * eps


def reverse_step(h_t, t: int, eps_hat, sched: NoiseSchedule, z=None, use_sigma=True):
    """One ancestral step from h_t to h_{t-1} given the predicted noise."""
    sched.check_t(t)
    a, ab = sched.alpha[t - 1], sched.alpha_bar[t - 1]
    out = (h_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if use_sigma and z is not None:
        out = out + sched.sigma[t - 1] * z
    return out


def sinusoidal(t, width: int) -> np.ndarray:
    """Fixed sinusoidal code of integer timesteps, shape [..., width]."""
    t = np.asarray(t, dtype=np.float64)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    code = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if width % 2:
        code = np.concatenate([code, np.zeros(code.shape[:-1] + (1,))], axis=-1)
    return code


@dataclass
class DenoiserConfig:
    width: int = 64
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1
    dtype: str = "float32"


class DiffusionDenoiser:
    """Time embedding (sinusoid -> affine) plus one transformer layer predicting noise."""

    def __init__(self, cfg: DenoiserConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        if params is None:
            rng = nx.Rng(seed)
            params = {
                "time.W": (rng.gaussian((cfg.width, cfg.width)) / math.sqrt(cfg.width)).astype(self.dtype),
                "time.b": np.zeros(cfg.width, dtype=self.dtype),
            }
            tf.init_layer(params, "layer", cfg.width, cfg.ffn, rng, self.dtype)
        self.params = params

    @property
    def width(self):
        return self.cfg.width

    def time_embedding(self, t):
        code = sinusoidal(t, self.width).astype(self.dtype)
        return nx.linear_forward(code, self.params["time.W"], self.params["time.b"])

    def forward(self, h_t, t, mask, rng=None):
        """``t`` is an int or one timestep per batch row. Dropout iff ``rng``."""
        e, c_time = self.time_embedding(t)
        if e.ndim == 2:
            e = e[:, None, :]
        x = h_t + e
        out, c_layer = tf.layer_forward(x, mask, self.params, "layer", self.cfg.heads, self.cfg.dropout, rng)
        return out, (c_time, c_layer, np.ndim(t))

    def backward(self, dout, cache, grads):
        c_time, c_layer, t_ndim = cache
        dx = tf.layer_backward(dout, c_layer, grads)
        de = dx.sum(axis=-2) if t_ndim == 1 else dx.reshape(-1, dx.shape[-1]).sum(axis=0)
        _, dW, db = nx.linear_backward(de, c_time)
        tf._acc(grads, "time.W", dW)
        tf._acc(grads, "time.b", db)
        return dx


def predict_noise(den: DiffusionDenoiser, h_t, t, mask, sched: NoiseSchedule | None = None):
    if sched is not None:
        for step in np.atleast_1d(t):
            sched.check_t(int(step))
    h_t = np.asarray(h_t)
    if h_t.ndim == 2:
        return predict_noise(den, h_t[None], t, np.asarray(mask)[None], sched)[0]
    out, _ = den.forward(h_t, t, mask)
    return out


def check_widths(model: EncoderClassifier, den: DiffusionDenoiser):
    if model.width != den.width:
        raise ValueError(f"denoiser width {den.width} does not match encoder width {model.width}")


def diffusion_train(
    den: DiffusionDenoiser,
    model: EncoderClassifier,
    data: list[TokenSequence],
    sched: NoiseSchedule,
    epochs: int = 100,
    lr: float = 1e-3,
    rng: nx.Rng | None = None,
    batch_size: int = 64,
) -> TrainLog:
    """Fit the denoiser to predict injected noise; ``model`` is only read."""
    check_widths(model, den)
    if not data:
        raise ValueError("training set is empty")
    rng = rng or nx.Rng(0)
    ids, mask, _ = batch(data)
    # the encoder is frozen and dropout-free here, so clean states are fixed
    hidden = np.concatenate([model.encode(ids[i : i + 256], mask[i : i + 256]) for i in range(0, len(ids), 256)])
    hidden = hidden.astype(den.dtype)
    opt = nx.Adam(lr=lr)
    tlog = TrainLog()
    n = len(data)
    for epoch in range(epochs):
        losses = []
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            L = int(mask[idx].sum(axis=1).max())
            h, m = hidden[idx, :L], mask[idx, :L]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.gaussian(h.shape, dtype=den.dtype)
            ab = sched.alpha_bar[t - 1].astype(den.dtype)[:, None, None]
            h_t = np.sqrt(ab) * h + np.sqrt(1.0 - ab) * eps
            pred, cache = den.forward(h_t, t, m, rng)
            loss, dpred = nx.mse(pred, eps)
            grads: dict = {}
            den.backward(dpred.astype(den.dtype), cache, grads)
            opt.step(den.params, grads)
            losses.append(loss)
        if not np.isfinite(losses).all():
            raise RuntimeError(f"diffusion loss diverged in epoch {epoch}")
        tlog.epoch_loss.append(float(np.mean(losses)))
        log.info("diffusion epoch %d loss %.4f", epoch, tlog.epoch_loss[-1])
    return tlog


@dataclass
class InferenceConfig:
    t_prime: int = 5
    k: int = 10
    zero_final_z: bool = True
    noise_at_t_prime: bool = False  # experimental: noise with abar_{t'} instead of abar_1

    def validate(self, sched: NoiseSchedule):
        if not 1 <= self.t_prime <= sched.T:
            raise ValueError(f"t_prime {self.t_prime} outside 1..{sched.T}")
        if self.k < 1:
            raise ValueError("ensemble size k must be >= 1")

    def to_dict(self):
        return asdict(self)


def draw_inference_noise(cfg: InferenceConfig, shape, rng: nx.Rng, dtype=np.float32):
    """Noise for one example: ``E`` [k, *shape] then ``Z`` [t', k, *shape]."""
    E = rng.gaussian((cfg.k, *shape), dtype=dtype)
    Z = rng.gaussian((cfg.t_prime, cfg.k, *shape), dtype=dtype)
    return E, Z


def denoise_batch(h, mask, E, Z, cfg: InferenceConfig, den, sched: NoiseSchedule):
    """Noise -> t' reverse steps -> ensemble mean, for a batch.

    ``h`` [N, L, D]; ``E`` [N or 1, k, L, D]; ``Z`` [N or 1, t', k, L, D].
    Returns [N, L, D].
    """
    cfg.validate(sched)
    N, L, D = h.shape
    k = cfg.k
    t0 = cfg.t_prime if cfg.noise_at_t_prime else 1
    ab = sched.alpha_bar[t0 - 1]
    H = math.sqrt(ab) * h[:, None] + math.sqrt(1.0 - ab) * E[..., :L, :]
    H = H.reshape(N * k, L, D).astype(den.dtype)
    m = np.repeat(mask, k, axis=0)
    for i in range(cfg.t_prime):
        t = cfg.t_prime - i
        eps_hat, _ = den.forward(H, t, m)
        last = t == 1
        if last and cfg.zero_final_z:
            H = reverse_step(H, t, eps_hat, sched, use_sigma=False)
        else:
            z = np.broadcast_to(Z[:, i, :, :L, :], (N, k, L, D)).reshape(N * k, L, D)
            H = reverse_step(H, t, eps_hat, sched, z=z)
        H = H.astype(den.dtype, copy=False)
    return H.reshape(N, k, L, D).mean(axis=1)


def denoise_ensemble(h, mask, cfg: InferenceConfig, den, sched: NoiseSchedule, rng: nx.Rng):
    """Algorithm path for a single hidden state ``h`` [L, D]."""
    cfg.validate(sched)
    E, Z = draw_inference_noise(cfg, h.shape, rng, dtype=den.dtype)
    return denoise_batch(h[None], np.asarray(mask)[None], E[None], Z[None], cfg, den, sched)[0]


def infer(seq: TokenSequence, model: EncoderClassifier, den, cfg: InferenceConfig, sched, rng: nx.Rng) -> int:
    h = model.encode(seq.ids, seq.mask)
    h_avg = denoise_ensemble(h, seq.mask, cfg, den, sched, rng)
    return int(np.argmax(model.classify(h_avg, seq.mask)))
