"""Variance-preserving forward diffusion, epsilon-parameterized score models and
denoising score matching."""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import (
    ContaminatedTeacherData,
    CorruptCheckpoint,
    EmptyBatch,
    FrozenModelError,
    InvalidLevel,
    UndefinedScore,
)

__all__ = [
    "NoiseSchedule",
    "make_noise_schedule",
    "level_range",
    "sample_levels",
    "forward_diffuse",
    "ScoreModel",
    "score",
    "dsm_loss",
    "fit_score_model",
    "TeacherConfig",
    "train_teacher",
    "save_score_model",
    "load_score_model",
]

log = logging.getLogger(__name__)

TEACHER_REAL = "teacher_real"
CRITIC_FAKE = "critic_fake"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    gamma: np.ndarray
    varsigma: np.ndarray

    def same_as(self, other):
        return (
            self.T == other.T
            and np.array_equal(self.gamma, other.gamma)
            and np.array_equal(self.varsigma, other.varsigma)
        )


def make_noise_schedule(T=64, shrink=0.98):
    """Cosine VP schedule ``gamma = cos(pi/2 * shrink * tau/T)``, ``varsigma = sin(.)``."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    angle = 0.5 * math.pi * shrink * np.arange(T + 1, dtype=np.float64) / T
    return NoiseSchedule(T=int(T), gamma=np.cos(angle), varsigma=np.sin(angle))


def level_range(schedule):
    """Inclusive range of noise levels used for training and guidance."""
    lo = max(1, math.ceil(0.02 * schedule.T))
    hi = math.floor(0.98 * schedule.T)
    return lo, hi


def sample_levels(n, schedule, generator=None):
    lo, hi = level_range(schedule)
    return torch.randint(lo, hi + 1, (n,), generator=generator)


def _levels(tau, n, schedule):
    tau = torch.as_tensor(tau, dtype=torch.long)
    if tau.ndim == 0:
        tau = tau.expand(n)
    if torch.any(tau < 0) or torch.any(tau > schedule.T):
        raise InvalidLevel(f"noise level outside [0, {schedule.T}]")
    return tau


def _coef(values, tau, like):
    c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[tau]
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_diffuse(x, tau, noise, schedule):
    """``u = gamma[tau] * x + varsigma[tau] * noise`` with per-sample levels."""
    if noise.shape != x.shape:
        raise ValueError("noise must have the shape of x")
    tau = _levels(tau, x.shape[0], schedule)
    return _coef(schedule.gamma, tau, x) * x + _coef(schedule.varsigma, tau, x) * noise


class ScoreModel:
    """Epsilon-prediction network plus its role, schedule and frozen flag."""

    def __init__(self, net, schedule, role=CRITIC_FAKE, frozen=False):
        if role not in (TEACHER_REAL, CRITIC_FAKE):
            raise ValueError(f"unknown role {role!r}")
        self.net = net
        self.schedule = schedule
        self.role = role
        self.frozen = False
        self.optimizer = None
        self.log = []
        if frozen:
            self.freeze()

    def eps(self, u, tau):
        tau = _levels(tau, u.shape[0], self.schedule)
        return self.net(u, tau)

    def features(self, u, tau):
        tau = _levels(tau, u.shape[0], self.schedule)
        return self.net.features(u, tau)

    def parameters(self):
        return self.net.parameters()

    def freeze(self):
        self.frozen = True
        self.optimizer = None
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        return self

    def configure_optimizer(self, lr, extra_params=(), betas=(0.5, 0.999)):
        if self.frozen:
            raise FrozenModelError(f"{self.role} model is frozen")
        params = list(self.net.parameters()) + list(extra_params)
        self.optimizer = torch.optim.Adam(params, lr=lr, betas=betas)
        return self.optimizer

    def apply_update(self, loss):
        """One optimizer step on ``loss``; refused for frozen models."""
        if self.frozen:
            raise FrozenModelError(f"refusing to update frozen {self.role} model")
        if self.optimizer is None:
            self.configure_optimizer(2e-4)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()


def score(model, u, tau):
    """Score estimate ``-eps_hat(u, tau) / varsigma[tau]``; undefined at tau = 0."""
    tau = _levels(tau, u.shape[0], model.schedule)
    if torch.any(tau == 0):
        raise UndefinedScore("score is undefined at noise level 0")
    return -model.eps(u, tau) / _coef(model.schedule.varsigma, tau, u)


def dsm_loss(model, batch, rng_seed=0, generator=None):
    """Mean squared epsilon error over a batch with uniformly sampled levels."""
    if batch is None or len(batch) == 0:
        raise EmptyBatch("dsm_loss needs a nonempty batch")
    if generator is None:
        generator = torch.Generator().manual_seed(int(rng_seed))
    tau = sample_levels(batch.shape[0], model.schedule, generator)
    noise = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
    u = forward_diffuse(batch, tau, noise, model.schedule)
    return ((model.eps(u, tau) - noise) ** 2).mean()


def fit_score_model(model, data, steps, batch_size=16, lr=1e-3, seed=0, cosine_decay=False):
    """Plain DSM training on a fixed data tensor; returns the per-step losses.

    ``cosine_decay`` anneals the learning rate to zero over ``steps``.
    """
    data = torch.as_tensor(data)
    if len(data) == 0:
        raise EmptyBatch("no training data")
    if model.optimizer is None:
        model.configure_optimizer(lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(model.optimizer, steps) if cosine_decay else None
    model.net.train()
    gen = torch.Generator().manual_seed(int(seed))
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, len(data), (min(batch_size, len(data)),), generator=gen)
        loss = dsm_loss(model, data[idx], generator=gen)
        model.apply_update(loss)
        if sched is not None:
            sched.step()
        losses.append(loss.item())
    return losses


@dataclass
class TeacherConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    base: int = 16
    T: int = 64
    seed: int = 0
    augment: bool = True


def _augment(batch, gen):
    flip = torch.rand(batch.shape[0], generator=gen) < 0.5
    return torch.where(flip[:, None, None, None], batch.flip(-1), batch)


def train_teacher(target, config=None):
    """Fit the frozen target-domain teacher by DSM on target-pool slices only.

    ``target`` is a :class:`~ulfbridge.synth_data.SliceSet` (or a manifest, from
    which only the target pool is read).  The returned model carries a per-epoch
    loss log in ``model.log``.
    """
    from .networks import ScoreNet

    config = config or TeacherConfig()
    if hasattr(target, "slices") and not hasattr(target, "images"):
        target = target.slices("target_pool")
    bad = sorted({c for c in target.cohort if c != "target_pool"})
    if bad:
        raise ContaminatedTeacherData(f"teacher data contains cohorts {bad}")
    images = torch.as_tensor(target.images, dtype=torch.float32)
    if len(images) == 0:
        raise EmptyBatch("target pool is empty")

    torch.manual_seed(config.seed)
    schedule = make_noise_schedule(config.T)
    model = ScoreModel(ScoreNet(channels=images.shape[1], base=config.base), schedule, TEACHER_REAL)
    model.configure_optimizer(config.lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = max(1, math.ceil(len(images) / config.batch_size))
    epoch_losses = []
    for step in range(config.steps):
        idx = torch.randint(0, len(images), (config.batch_size,), generator=gen)
        batch = images[idx]
        if config.augment:
            batch = _augment(batch, gen)
        loss = dsm_loss(model, batch, generator=gen)
        model.apply_update(loss)
        epoch_losses.append(loss.item())
        if len(epoch_losses) == steps_per_epoch or step == config.steps - 1:
            model.log.append({"epoch": len(model.log), "dsm_loss": float(np.mean(epoch_losses))})
            log.debug("teacher epoch %d dsm %.4f", len(model.log) - 1, model.log[-1]["dsm_loss"])
            epoch_losses = []
    return model.freeze()


def save_score_model(path, model, extra=None):
    """Write a score model (weights, schedule, role) to a checkpoint file."""
    arrays = ckpt.module_arrays("net", model.net)
    arrays["schedule/gamma"] = model.schedule.gamma
    arrays["schedule/varsigma"] = model.schedule.varsigma
    meta = {
        "kind": "score_model",
        "role": model.role,
        "frozen": model.frozen,
        "channels": model.net.channels,
        "base": model.net.stem.out_channels,
        "T": model.schedule.T,
        "log": model.log,
    }
    meta.update(extra or {})
    return ckpt.save_checkpoint(path, arrays, meta)


def load_score_model(path):
    from .networks import ScoreNet

    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "score_model":
        raise CorruptCheckpoint(f"{path} is not a score-model checkpoint")
    net = ScoreNet(channels=meta["channels"], base=meta["base"])
    ckpt.load_module_arrays(net, arrays, "net")
    schedule = NoiseSchedule(T=meta["T"], gamma=arrays["schedule/gamma"], varsigma=arrays["schedule/varsigma"])
    model = ScoreModel(net, schedule, meta["role"], frozen=meta["frozen"])
    model.log = meta.get("log", [])
    return model
