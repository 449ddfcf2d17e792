"""Shared-noise construction: what "correlated across views and frames" means.

The composite noise for a multi-view clip is built from three independent
fields: residual (per view and frame), motion (shared along frames), and
panoramic (shared across views). Summed and rescaled to unit variance, the
result correlates slices that share a view or a frame at exactly 1/3 and
leaves everything else independent. This script draws a big field and
prints the measured correlation table next to the theory.
"""

import numpy as np

from mvdiff.rng import RngStream
from mvdiff.schedule import make_linear_schedule, q_sample, sample_shared_noise

rng = RngStream(2024).fork("demo")
noise = sample_shared_noise(V=2, N=2, C=1, H=317, W=317, rng=rng, dtype=np.float64)
c = noise.composite

def corr(a, b):
    return np.corrcoef(a.ravel(), b.ravel())[0, 1]

print("composite moments: mean %.4f  var %.4f" % (c.mean(), c.var()))
print("correlation table (measured vs theory):")
print("  same view, other frame : %.3f  (1/3)" % corr(c[0, 0], c[0, 1]))
print("  other view, same frame : %.3f  (1/3)" % corr(c[0, 0], c[1, 0]))
print("  both differ            : %.3f  (0)" % corr(c[0, 0], c[1, 1]))

# switching the sharing off reduces the field to the residual term alone
plain = sample_shared_noise(2, 2, 1, 317, 317, RngStream(2024).fork("demo"), enabled=False, dtype=np.float64)
print("sharing disabled, cross-frame corr: %.3f" % corr(plain.composite[0, 0], plain.composite[0, 1]))

# the forward process mixes signal and composite noise per timestep
sched = make_linear_schedule(1000)
x = np.full_like(c, 0.7)
for t in (0, 500, 999):
    z = q_sample(x, t, c, sched)
    print(f"t={t:4d}  alpha_hat={sched.alpha_hat[t]:.5f}  E[z]={z.mean():+.4f}  Var[z]={z.var():.4f}")
