"""Discretized Schrödinger-bridge trajectory: time grid, endpoint prediction,
stochastic interpolation and the deterministic inference rollout."""
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidSchedule, ShapeError, StepPastEnd

__all__ = [
    "BridgeSchedule",
    "BridgeState",
    "make_schedule",
    "predict_endpoint",
    "bridge_step",
    "rollout",
    "TRAIN_STOCHASTIC",
    "INFER_DETERMINISTIC",
]

TRAIN_STOCHASTIC = "train_stochastic"
INFER_DETERMINISTIC = "infer_deterministic"


@dataclass(frozen=True)
class BridgeSchedule:
    K: int
    t: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if len(self.t) != self.K + 1 or len(self.alpha) != self.K or len(self.sigma) != self.K:
            raise InvalidSchedule("schedule arrays do not match K")


@dataclass
class BridgeState:
    x: torch.Tensor
    k: int
    t_k: float


def make_schedule(K=3, noise_scale=0.05, grid="uniform"):
    """Build the K-step bridge grid.

    ``grid`` is ``"uniform"`` or an explicit array of K+1 increasing times from
    0 to 1.  ``alpha[k] = (t[k+1] - t[k]) / (1 - t[k])``; the noise scale
    ``noise_scale * sqrt(alpha (1 - alpha))`` is zeroed at the final step.
    """
    if int(K) != K or K < 1:
        raise InvalidSchedule(f"K must be a positive integer, got {K!r}")
    K = int(K)
    if noise_scale < 0 or not np.isfinite(noise_scale):
        raise InvalidSchedule(f"noise_scale must be finite and >= 0, got {noise_scale}")
    if isinstance(grid, str):
        if grid != "uniform":
            raise InvalidSchedule(f"unknown grid {grid!r}")
        t = np.linspace(0.0, 1.0, K + 1)
    else:
        t = np.asarray(grid, dtype=np.float64).copy()
        if t.shape != (K + 1,):
            raise InvalidSchedule(f"grid must have K+1={K + 1} points, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidSchedule("grid contains non-finite values")
    if t[0] != 0.0 or t[-1] != 1.0:
        raise InvalidSchedule("grid must start at 0 and end at 1")
    if np.any(np.diff(t) <= 0):
        raise InvalidSchedule("grid must be strictly increasing")

    alpha = (t[1:] - t[:-1]) / (1.0 - t[:-1])
    alpha[-1] = 1.0
    sigma = noise_scale * np.sqrt(alpha * (1.0 - alpha))
    sigma[-1] = 0.0
    return BridgeSchedule(K=K, t=t, alpha=alpha, sigma=sigma)


def predict_endpoint(generator, state):
    """Target-domain prediction ``G(x_{t_k}, t_k)`` from the current state."""
    out = generator(state.x, state.t_k)
    if out.shape != state.x.shape:
        raise ShapeError(
            f"generator returned shape {tuple(out.shape)} for input {tuple(state.x.shape)}"
        )
    return out


def bridge_step(state, endpoint, schedule, noise=None):
    """Interpolate towards ``endpoint``; the result is not clipped."""
    k = state.k
    if k >= schedule.K:
        raise StepPastEnd(f"state is already at the final step k={k}")
    if endpoint.shape != state.x.shape:
        raise ShapeError("endpoint and state shapes differ")
    alpha = float(schedule.alpha[k])
    sigma = float(schedule.sigma[k])
    if alpha == 1.0:
        # exact endpoint at the last step
        x_next = endpoint
    else:
        x_next = state.x + alpha * (endpoint - state.x)
    if noise is not None and sigma != 0.0:
        if noise.shape != state.x.shape:
            raise ShapeError("noise and state shapes differ")
        x_next = x_next + sigma * noise
    return BridgeState(x=x_next, k=k + 1, t_k=float(schedule.t[k + 1]))


def rollout(generator, x0, schedule, mode=INFER_DETERMINISTIC, rng_seed=0):
    """Run all K refinement steps from ``x0``.

    Returns ``(trajectory, y_hat)`` where the trajectory holds K+1 states and
    ``y_hat`` is the last endpoint prediction.  Deterministic mode injects no
    noise at all.
    """
    if mode not in (TRAIN_STOCHASTIC, INFER_DETERMINISTIC):
        raise ValueError(f"unknown rollout mode {mode!r}")
    rng = torch.Generator().manual_seed(int(rng_seed))
    state = BridgeState(x=x0, k=0, t_k=float(schedule.t[0]))
    trajectory = [state]
    y_hat = None
    for _ in range(schedule.K):
        y_hat = predict_endpoint(generator, state)
        noise = None
        if mode == TRAIN_STOCHASTIC:
            noise = torch.randn(x0.shape, generator=rng, dtype=x0.dtype).to(x0.device)
        state = bridge_step(state, y_hat, schedule, noise)
        trajectory.append(state)
    return trajectory, y_hat
