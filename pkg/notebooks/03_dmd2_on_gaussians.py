"""
Distribution matching on a Gaussian testbed
===========================================

DMD2 pushes generator samples along the difference between the score of
the real data (teacher) and the score of the generator's own outputs (fake
critic), averaged over diffusion levels.  With p_real = N(0, 1) and the
generator N(m, 1) every score is closed form, so the estimator can be
checked against the exact KL gradient d/dm (m^2 / 2) = m.
"""

# %%
from ulfbridge.oracles import kl_grad_estimate
from ulfbridge.synth_data import analytic_kl_grad_shift

for m in (0.25, 0.5, 1.0):
    est = kl_grad_estimate(m)
    print(f"m={m}: estimate {est:.4f}  exact {analytic_kl_grad_shift(m):.4f}")

# %%
# Gradient descent on the single shift parameter, driven only by the
# normalized DMD2 gradient, walks m back to zero.
from ulfbridge.trainer import train_shift_testbed

path = train_shift_testbed(m0=1.0, steps=600)
print("m at steps 0, 100, 300, 600:", [round(float(path[i]), 4) for i in (0, 100, 300, 600)])
