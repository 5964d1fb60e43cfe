"""
Teacher fidelity and evaluation metrics
=======================================

The teacher is a denoising score matching model of the target domain.  On a
2-D Gaussian its diffused score is known in closed form, which gives a direct
check of the training recipe.  The second half shows the distribution
distances used for unpaired evaluation.
"""

# %%
from ulfbridge.oracles import teacher_fidelity_2d

aggregate, per_level = teacher_fidelity_2d(steps=1500)
print(f"relative L2 error over levels >= 8: {aggregate:.3f}")
for tau, err in per_level.items():
    print(f"  tau={tau:2d}  {err:.3f}")

# %%
# FID compares Gaussian fits of two feature sets; KID is an unbiased kernel
# MMD and stays near zero for samples of one distribution.
import numpy as np

from ulfbridge.metrics import feature_stats, fid, kid

rng = np.random.default_rng(0)
a, b = rng.standard_normal((400, 8)), rng.standard_normal((400, 8))
c = rng.standard_normal((400, 8)) + 1.0
print("FID same / shifted:", round(fid(feature_stats(a), feature_stats(b)), 3), round(fid(feature_stats(a), feature_stats(c)), 3))
print("KID same / shifted:", round(kid(a, b), 4), round(kid(a, c), 4))
