"""Large-step forward diffusion and the perfect-generator reverse chain.

Run: python demos/diffusion_steps.py
"""

import numpy as np
import torch

from irfuse.translate import (
    NoiseSchedule,
    adversarial_reverse_step,
    forward_diffuse_marginal,
    large_step_forward,
)

s = NoiseSchedule.linear()
print(f"T={s.T}, k={s.k}, large steps: {list(s.large_steps())}")
for t in s.large_steps():
    print(f"  t={t:4d}  alpha_bar={s.alpha_bar[t]:.5f}  gamma={s.gamma_big[t]:.5f}")

# Four large steps reach the same marginal as the closed form.
g = torch.Generator().manual_seed(0)
n, x0 = 20_000, 0.5
x = torch.full((n,), x0, dtype=torch.float64)
for t in range(s.k, s.T + 1, s.k):
    x = large_step_forward(x, t, s, torch.randn(n, generator=g, dtype=torch.float64))
    want_mean = np.sqrt(s.alpha_bar[t]) * x0
    want_std = np.sqrt(1 - s.alpha_bar[t])
    print(f"t={t:4d}  mean {x.mean():+.4f} (closed form {want_mean:+.4f})  "
          f"std {x.std():.4f} (closed form {want_std:.4f})")

# A generator that always predicts the true clean image undoes the chain exactly.
img = torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
x = forward_diffuse_marginal(img, s.T, s, torch.randn(img.shape, generator=g, dtype=torch.float64))
for t in s.large_steps():
    x = adversarial_reverse_step(x, t, None, lambda xt, y, tt: img, s,
                                 torch.randn(img.shape, generator=g, dtype=torch.float64))
    print(f"after reverse step at t={t:4d}: max |x - x0| = {(x - img).abs().max():.2e}")
