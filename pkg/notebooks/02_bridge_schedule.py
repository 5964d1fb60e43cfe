"""
The discretized Schrödinger bridge
==================================

A K-step bridge moves a source slice toward the generator's predicted
endpoint.  Step k mixes the current state with the endpoint by
alpha_k = (t_{k+1} - t_k) / (1 - t_k) and adds a little Brownian noise during
training; the last step has alpha = 1 and lands exactly on the prediction.
"""

# %%
import torch

from ulfbridge.bridge import INFER_DETERMINISTIC, TRAIN_STOCHASTIC, make_schedule, rollout

s = make_schedule(K=3, noise_scale=0.05)
print("t     ", s.t)
print("alpha ", s.alpha)
print("sigma ", s.sigma)

# %%
# A generator that always predicts a fixed target image.  The deterministic
# rollout reaches it exactly; the stochastic one wanders on the way.
target = torch.zeros(1, 3, 32, 32)
x0 = torch.rand(1, 3, 32, 32) * 2 - 1


def to_target(x, t):
    return target.expand_as(x)


for mode in (INFER_DETERMINISTIC, TRAIN_STOCHASTIC):
    traj, y = rollout(to_target, x0, s, mode)
    gaps = [round(float((st.x - target).abs().mean()), 4) for st in traj]
    print(mode, "mean |x_k - target| along the path:", gaps, "final", float((y - target).abs().max()))

# %%
# The identity generator leaves every state unchanged.
traj, y = rollout(lambda x, t: x, x0, s)
print("identity fixed point:", torch.equal(y, x0))
