"""
Forward noising, reverse steps and the exact-recovery identity
==============================================================

A tour of the diffusion arithmetic on random hidden states: the linear
beta schedule, closed-form noising, and one reverse step given the true
noise. No training is involved.
"""

import numpy as np

from diffusedef import diffusion as D
from diffusedef.numerics import Rng

# the default schedule: T=30 betas spaced linearly from 1e-4 to 0.02
sched = D.linear_schedule(30, 1e-4, 0.02)
for t in (1, 5, 10, 30):
    print(f"t={t:2d}  beta={sched.beta[t - 1]:.5f}  alpha_bar={sched.alpha_bar[t - 1]:.5f}")

# noising scales the state by sqrt(abar_t) and adds sqrt(1 - abar_t) noise
rng = Rng(0)
h = rng.gaussian((4, 8))
eps = rng.gaussian((4, 8))
for t in (1, 5, 30):
    ht = D.add_noise(h, t, eps, sched)
    print(f"t={t:2d}  relative distance to the clean state: {np.linalg.norm(ht - h) / np.linalg.norm(h):.4f}")

# at t=1 a reverse step that knows the true noise lands exactly on h
back = D.reverse_step(D.add_noise(h, 1, eps, sched), 1, eps, sched, use_sigma=False)
print("max |recovered - h| at t=1:", np.abs(back - h).max())

# inference noises once with abar_1 and then runs t' reverse steps. With a
# perfect noise predictor and no z-term, one step recovers h exactly:
cfg = D.InferenceConfig(t_prime=1, k=4, zero_final_z=True)
E, Z = D.draw_inference_noise(cfg, h.shape, Rng(1))


class Oracle:
    """Returns the noise that was injected; stands in for a trained denoiser."""

    dtype = np.float64

    def forward(self, H, t, mask):
        return (H - np.sqrt(sched.alpha_bar[0]) * h) / np.sqrt(1 - sched.alpha_bar[0]), None


out = D.denoise_batch(h[None], np.ones((1, 4)), E[None], Z[None], cfg, Oracle(), sched)[0]
print("ensemble of 4 with the oracle, max error:", np.abs(out - h).max())
