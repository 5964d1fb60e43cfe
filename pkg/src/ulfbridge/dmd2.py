"""Diffusion-guided distribution matching: the score-difference generator
gradient, the fake-critic update, the auxiliary GAN classifier and TTUR."""
from enum import Enum

import torch
import torch.nn.functional as F

from .diffusion import _coef, dsm_loss, forward_diffuse, sample_levels, score
from .errors import FrozenModelError, InvalidConfig, LevelMismatch, ScheduleMismatch

__all__ = [
    "dmd2_generator_gradient",
    "dmd2_surrogate",
    "update_critic",
    "aux_gan_loss",
    "CriticClassifier",
    "Plan",
    "ttur_plan",
]


def _check_schedules(teacher, critic):
    if teacher.schedule is critic.schedule:
        return
    if not teacher.schedule.same_as(critic.schedule):
        raise ScheduleMismatch("teacher and critic use different noise schedules")


def dmd2_generator_gradient(teacher, critic, y_hat, rng_seed=0, normalize=True, generator=None, tau=None):
    """Gradient signal w.r.t. ``y_hat`` from the real/fake score difference.

    ``g = -w * (s_real(u) - s_fake(u)) * gamma[tau]`` with ``u = F(y_hat, tau)``;
    ``w`` is the per-sample inverse mean absolute score difference (disabled
    with ``normalize=False``, which leaves the raw KL-gradient estimator).
    """
    _check_schedules(teacher, critic)
    schedule = teacher.schedule
    if generator is None:
        generator = torch.Generator().manual_seed(int(rng_seed))
    with torch.no_grad():
        y = y_hat.detach()
        if tau is None:
            tau = sample_levels(y.shape[0], schedule, generator)
        noise = torch.randn(y.shape, generator=generator, dtype=y.dtype).to(y.device)
        u = forward_diffuse(y, tau, noise, schedule)
        diff = score(teacher, u, tau) - score(critic, u, tau)
        g = -diff * _coef(schedule.gamma, torch.as_tensor(tau).expand(y.shape[0]), y)
        if normalize:
            scale = diff.abs().reshape(y.shape[0], -1).mean(dim=1) + 1e-8
            g = g / scale.reshape((-1,) + (1,) * (y.ndim - 1))
    return g


def dmd2_surrogate(y_hat, g):
    """Scalar whose gradient w.r.t. ``y_hat`` is ``g / y_hat.numel()``."""
    return (g.detach() * y_hat).mean()


def update_critic(critic, generated_batch, rng_seed=0, extra_loss=None, generator=None):
    """One DSM step of the fake critic on detached generator outputs.

    ``extra_loss`` (e.g. the auxiliary discriminator loss) is added before the
    step.  Returns the DSM loss value.
    """
    if critic.frozen:
        raise FrozenModelError("critic is frozen")
    loss = dsm_loss(critic, generated_batch.detach(), rng_seed, generator=generator)
    total = loss if extra_loss is None else loss + extra_loss
    critic.apply_update(total)
    return loss.item()


class CriticClassifier:
    """Auxiliary classifier: critic trunk features followed by a small head."""

    def __init__(self, critic, head):
        self.critic = critic
        self.head = head

    def __call__(self, u, tau):
        return self.head(self.critic.features(u, tau))


def aux_gan_loss(classifier, real_u, fake_u, real_tau=None, fake_tau=None):
    """Non-saturating logistic losses of the auxiliary classifier.

    Returns ``(discriminator_loss, generator_loss)``; the discriminator loss
    sees ``fake_u`` detached.
    """
    if real_tau is not None or fake_tau is not None:
        if real_tau is None or fake_tau is None or not torch.equal(
            torch.as_tensor(real_tau), torch.as_tensor(fake_tau)
        ):
            raise LevelMismatch("real and fake batches must share noise levels")

    def logits(u):
        return classifier(u, real_tau) if real_tau is not None else classifier(u)

    d_loss = 0.5 * (F.softplus(-logits(real_u)).mean() + F.softplus(logits(fake_u.detach())).mean())
    g_loss = F.softplus(-logits(fake_u)).mean()
    return d_loss, g_loss


class Plan(str, Enum):
    UPDATE_CRITIC_ONLY = "update_critic_only"
    UPDATE_ALL = "update_all"


def ttur_plan(global_step, n_critic):
    if n_critic < 1:
        raise InvalidConfig(f"n_critic must be >= 1, got {n_critic}")
    return Plan.UPDATE_ALL if global_step % n_critic == 0 else Plan.UPDATE_CRITIC_ONLY
