"""Black-box victims exposing class probabilities to an attacker.

``victim.bind(seed)`` returns the query function an attacker sees for one
example. DiffuseDef victims draw their inference noise once per bound seed,
so repeated queries face the same function; ``resample=True`` draws fresh
noise for every query instead.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .diffusion import DiffusionDenoiser, InferenceConfig, NoiseSchedule, denoise_batch, draw_inference_noise
from .model import EncoderClassifier


def _trim(ids, mask):
    L = int(mask.sum(axis=1).max())
    return ids[:, :L], mask[:, :L]


class BaseVictim:
    """The encoder-classifier with no inference-time defense."""

    name = "base"

    def __init__(self, model: EncoderClassifier):
        self.model = model

    def representation(self, ids, mask, seed=0):
        ids, mask = _trim(np.atleast_2d(ids), np.atleast_2d(mask))
        return self.model.encode(ids, mask), mask

    def pooled(self, ids, mask, seed=0):
        h, mask = self.representation(ids, mask, seed)
        return (h * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)

    def bind(self, seed: int):
        def query(ids, mask):
            h, m = self.representation(ids, mask)
            return nx.softmax(self.model.classify(h, m).astype(np.float64))

        return query

    def predict(self, ids, mask, seed: int) -> int:
        return int(self.bind(seed)(ids[None], mask[None])[0].argmax())


class DiffuseDefVictim(BaseVictim):
    """Encoder -> one-step noising -> t' denoising steps -> k-way mean -> classifier."""

    name = "diffusedef"

    def __init__(
        self,
        model: EncoderClassifier,
        den: DiffusionDenoiser,
        sched: NoiseSchedule,
        cfg: InferenceConfig,
        resample: bool = False,
        chunk: int = 32,
    ):
        super().__init__(model)
        if den.width != model.width:
            raise ValueError("denoiser and encoder widths differ")
        cfg.validate(sched)
        self.den, self.sched, self.cfg = den, sched, cfg
        self.resample = resample
        self.chunk = chunk
        self._shape = (model.cfg.max_len, model.width)

    def _noise(self, rng, n):
        E, Z = zip(*(draw_inference_noise(self.cfg, self._shape, rng, self.den.dtype) for _ in range(n)))
        return np.stack(E), np.stack(Z)

    def _denoise(self, ids, mask, E, Z):
        h = self.model.encode(ids, mask)
        out = []
        for i in range(0, len(ids), self.chunk):
            e = E if len(E) == 1 else E[i : i + self.chunk]
            z = Z if len(Z) == 1 else Z[i : i + self.chunk]
            out.append(denoise_batch(h[i : i + self.chunk], mask[i : i + self.chunk], e, z, self.cfg, self.den, self.sched))
        return np.concatenate(out)

    def representation(self, ids, mask, seed=0):
        ids, mask = _trim(np.atleast_2d(ids), np.atleast_2d(mask))
        E, Z = self._noise(nx.Rng(seed), 1)
        return self._denoise(ids, mask, E, Z), mask

    def bind(self, seed: int):
        rng = nx.Rng(seed)
        fixed = None if self.resample else self._noise(rng, 1)

        def query(ids, mask):
            ids, mask = _trim(ids, mask)
            E, Z = fixed if fixed is not None else self._noise(rng, len(ids))
            h = self._denoise(ids, mask, E, Z)
            return nx.softmax(self.model.classify(h, mask).astype(np.float64))

        return query
