"""
Anatomy-preserving losses: ASP and PatchNCE
===========================================

ASP derives a soft foreground mask from the source slice, splits it into a
confident core, a confident background and an uncertain band, and asks the
translated slice to keep the core and background and to keep its boundary
close to the source boundary.  PatchNCE asks corresponding patches of input
and output to stay more similar to each other than to other patches.
"""

# %%
import numpy as np
import torch

from ulfbridge.asp import asp_loss, asp_targets, distance_transform

yy, xx = np.mgrid[:48, :48]


def disk(shift=0):
    img = np.where((yy - 23.5) ** 2 + (xx - 23.5 - shift) ** 2 <= 81, 0.6, -1.0)
    return torch.tensor(np.stack([img] * 3)[None], dtype=torch.float64)


x = disk()
t = asp_targets(x)
print("core pixels", int(t.trimap.m_core.sum()), " background pixels", int(t.trimap.m_bg.sum()))

# %%
# Moving the output's foreground away from the source boundary raises the
# boundary term; an inverted output breaks the trimap.
for shift in (0, 1, 2, 4, 8):
    print(f"shift {shift}px  boundary term {asp_loss(x, disk(shift))[1]['boundary'].item():.4f}")
_, parts = asp_loss(x, -x)
print("inverted output: core + background BCE =", round(parts["core_bce"].item() + parts["bg_bce"].item(), 2))

# %%
# The boundary distance field is an exact Euclidean distance transform.
b = np.zeros((7, 7), bool)
b[3, 3] = True
print(distance_transform(b).round(2))

# %%
from ulfbridge.patchnce import patchnce_loss

gen = torch.Generator().manual_seed(0)
src = [torch.randn(64, 32, generator=gen)]
print("PatchNCE, output = input  :", round(patchnce_loss(src, src, 0.07).item(), 4))
print("PatchNCE, unrelated output:", round(patchnce_loss(src, [torch.randn(64, 32, generator=gen)], 0.07).item(), 4))
