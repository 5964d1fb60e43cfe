import copy
import math

import numpy as np
import pytest
import torch
from torch import nn

from ulfbridge.diffusion import CRITIC_FAKE, TEACHER_REAL, ScoreModel, make_noise_schedule
from ulfbridge.dmd2 import (
    CriticClassifier,
    Plan,
    aux_gan_loss,
    dmd2_generator_gradient,
    dmd2_surrogate,
    ttur_plan,
    update_critic,
)
from ulfbridge.errors import FrozenModelError, InvalidConfig, LevelMismatch, ScheduleMismatch
from ulfbridge.networks import AuxHead, Generator, ScoreNet
from ulfbridge.oracles import kl_grad_estimate, mean_gamma_sq
from ulfbridge.synth_data import AnalyticScoreModel, GaussianMixture
from ulfbridge.trainer import train_shift_testbed


def _pair(seed=0):
    torch.manual_seed(seed)
    s = make_noise_schedule(64)
    teacher = ScoreModel(ScoreNet(), s, TEACHER_REAL, frozen=True)
    critic = ScoreModel(copy.deepcopy(teacher.net), s, CRITIC_FAKE)
    for p in critic.parameters():
        p.requires_grad_(True)
    return teacher, critic


def test_zero_difference_exact():
    teacher, critic = _pair()
    gen = torch.Generator().manual_seed(0)
    for i in range(10):
        y = torch.rand(4, 3, 32, 32, generator=gen) * 2 - 1
        for normalize in (True, False):
            g = dmd2_generator_gradient(teacher, critic, y, rng_seed=i, normalize=normalize)
            assert torch.count_nonzero(g) == 0


@pytest.mark.parametrize("m", [0.25, 0.5, 1.0])
def test_kl_gradient_oracle(m):
    assert kl_grad_estimate(m) == pytest.approx(m, rel=0.05)


def test_raw_estimator_per_level_is_diffused_kl_gradient():
    """At a fixed level the estimator equals gamma^2 m (gradient of KL after diffusion)."""
    s = make_noise_schedule(64)
    teacher = AnalyticScoreModel(GaussianMixture.gaussian([0.0], [[1.0]]), s)
    m = 0.7
    critic = AnalyticScoreModel(GaussianMixture.gaussian([m], [[1.0]]), s, "critic_fake", frozen=False)
    y = torch.randn(1000, 1, dtype=torch.float64) + m
    for tau in (2, 30, 62):
        g = dmd2_generator_gradient(teacher, critic, y, tau=tau, normalize=False)
        np.testing.assert_allclose(g.numpy(), s.gamma[tau] ** 2 * m, rtol=1e-10)


def test_mean_gamma_sq_matches_schedule():
    s = make_noise_schedule(64)
    assert mean_gamma_sq(s) == pytest.approx(np.mean(s.gamma[2:63] ** 2))


def test_sign_descends():
    m = 1.0
    g = kl_grad_estimate(m, n_samples=10_000)
    assert abs(m - 0.1 * g) < abs(m)
    assert kl_grad_estimate(-0.5, n_samples=10_000) < 0


def test_normalized_direction_invariant_to_score_scaling():
    s = make_noise_schedule(64)
    teacher = AnalyticScoreModel(GaussianMixture.gaussian([0.0, 0.0], np.eye(2)), s)
    near = AnalyticScoreModel(GaussianMixture.gaussian([0.3, -0.1], np.eye(2)), s, "critic_fake", frozen=False)

    class Scaled:
        """Critic whose score difference to the teacher is multiplied by c."""

        def __init__(self, c):
            self.c, self.schedule, self.frozen = c, s, False

        def eps(self, u, tau):
            e_t, e_f = teacher.eps(u, tau), near.eps(u, tau)
            return e_t + self.c * (e_f - e_t)

    y = torch.randn(16, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    a = dmd2_generator_gradient(teacher, Scaled(1.0), y, rng_seed=5)
    b = dmd2_generator_gradient(teacher, Scaled(7.5), y, rng_seed=5)
    cos = torch.nn.functional.cosine_similarity(a.flatten(), b.flatten(), dim=0)
    assert cos.item() == pytest.approx(1.0, abs=1e-6)
    # magnitude is normalized away per sample
    torch.testing.assert_close(a, b)
    raw_a = dmd2_generator_gradient(teacher, Scaled(1.0), y, rng_seed=5, normalize=False)
    raw_b = dmd2_generator_gradient(teacher, Scaled(7.5), y, rng_seed=5, normalize=False)
    torch.testing.assert_close(raw_b, 7.5 * raw_a)


def test_schedule_mismatch():
    teacher, _ = _pair()
    critic = ScoreModel(ScoreNet(), make_noise_schedule(32), CRITIC_FAKE)
    with pytest.raises(ScheduleMismatch):
        dmd2_generator_gradient(teacher, critic, torch.zeros(1, 3, 32, 32))


def test_surrogate_gradient_equals_signal():
    y = torch.randn(3, 3, 8, 8, requires_grad=True)
    g = torch.randn(3, 3, 8, 8)
    dmd2_surrogate(y, g).backward()
    torch.testing.assert_close(y.grad, g / y.numel())


def test_shift_testbed_converges():
    path = train_shift_testbed(m0=1.0, steps=2000)
    assert abs(path[-1]) < 0.05
    assert path[0] == 1.0


def test_update_critic_isolated_from_generator():
    _, critic = _pair()
    critic.configure_optimizer(2e-4)
    gen = Generator()
    before = [p.detach().clone() for p in gen.parameters()]
    critic_before = [p.detach().clone() for p in critic.parameters()]
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    y = gen(x, 0.0)
    loss = update_critic(critic, y, rng_seed=0)
    assert math.isfinite(loss)
    assert all(p.grad is None for p in gen.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, gen.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(critic_before, critic.parameters()))


def test_update_critic_frozen():
    teacher, _ = _pair()
    with pytest.raises(FrozenModelError):
        update_critic(teacher, torch.zeros(1, 3, 32, 32))


def test_critic_dsm_decreases_on_fixed_pool():
    torch.manual_seed(0)
    critic = ScoreModel(ScoreNet(base=8), make_noise_schedule(64), CRITIC_FAKE)
    critic.configure_optimizer(2e-3)
    pool = torch.rand(32, 3, 32, 32, generator=torch.Generator().manual_seed(1)) * 2 - 1
    gen = torch.Generator().manual_seed(2)
    losses = []
    for step in range(200):
        idx = torch.randint(0, 32, (8,), generator=gen)
        losses.append(update_critic(critic, pool[idx], generator=gen))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


class ConstHead(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, feats):
        return torch.full((feats.shape[0], 1), float(self.value))


def test_aux_gan_balanced_and_saturated():
    u = torch.zeros(4, 3)
    d, g = aux_gan_loss(lambda x: torch.zeros(x.shape[0], 1), u, u)
    assert d.item() == pytest.approx(math.log(2), abs=1e-7)
    assert g.item() == pytest.approx(math.log(2), abs=1e-7)
    real, fake = torch.ones(4, 1), -torch.ones(4, 1)
    d, _ = aux_gan_loss(lambda x: 20 * x, real, fake)
    assert d.item() < 1e-8


def test_aux_gan_level_mismatch():
    teacher, critic = _pair()
    clf = CriticClassifier(critic, AuxHead(critic.net.feature_channels))
    u = torch.randn(2, 3, 32, 32)
    with pytest.raises(LevelMismatch):
        aux_gan_loss(clf, u, u, torch.tensor([3, 4]), torch.tensor([3, 5]))
    with pytest.raises(LevelMismatch):
        aux_gan_loss(clf, u, u, torch.tensor([3, 4]), None)
    d, g = aux_gan_loss(clf, u, u, torch.tensor([3, 4]), torch.tensor([3, 4]))
    assert d.shape == () and g.shape == ()


def test_aux_generator_loss_finite_differences():
    torch.manual_seed(0)
    head = nn.Sequential(nn.Flatten(), nn.Linear(12, 8), nn.Tanh(), nn.Linear(8, 1)).double()
    clf = lambda u: head(u)  # noqa: E731
    real = torch.randn(3, 12, dtype=torch.float64)
    fake = torch.randn(3, 12, dtype=torch.float64, requires_grad=True)
    _, g = aux_gan_loss(clf, real, fake)
    (analytic,) = torch.autograd.grad(g, fake)
    eps = 1e-6
    i, j = 1, 5
    with torch.no_grad():
        f = fake.detach().clone()
        f[i, j] += eps
        hi = aux_gan_loss(clf, real, f)[1].item()
        f[i, j] -= 2 * eps
        lo = aux_gan_loss(clf, real, f)[1].item()
    numeric = (hi - lo) / (2 * eps)
    assert abs(analytic[i, j].item() - numeric) / abs(numeric) <= 1e-4


def test_aux_discriminator_loss_does_not_reach_generator():
    _, critic = _pair()
    clf = CriticClassifier(critic, AuxHead(critic.net.feature_channels))
    gen = Generator()
    fake = gen(torch.rand(2, 3, 32, 32) * 2 - 1, 0.0)
    d, _ = aux_gan_loss(clf, torch.randn(2, 3, 32, 32), fake, torch.tensor([5, 9]), torch.tensor([5, 9]))
    d.backward()
    assert all(p.grad is None for p in gen.parameters())


def test_ttur_plan():
    plans = [ttur_plan(s, 5) for s in range(10)]
    assert [i for i, p in enumerate(plans) if p is Plan.UPDATE_ALL] == [0, 5]
    assert all(ttur_plan(s, 1) is Plan.UPDATE_ALL for s in range(7))
    counts = [ttur_plan(s, 5) for s in range(1000)]
    assert counts.count(Plan.UPDATE_ALL) == 200
    with pytest.raises(InvalidConfig):
        ttur_plan(0, 0)
