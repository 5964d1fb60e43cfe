import math

import numpy as np
import pytest
import torch
from torch import nn

from ulfbridge.diffusion import (
    CRITIC_FAKE,
    TEACHER_REAL,
    ScoreModel,
    TeacherConfig,
    dsm_loss,
    fit_score_model,
    forward_diffuse,
    level_range,
    load_score_model,
    make_noise_schedule,
    sample_levels,
    save_score_model,
    score,
    train_teacher,
)
from ulfbridge.errors import (
    ContaminatedTeacherData,
    EmptyBatch,
    FrozenModelError,
    InvalidLevel,
    UndefinedScore,
)
from ulfbridge.networks import ScoreMLP, ScoreNet
from ulfbridge.synth_data import AnalyticScoreModel, GaussianMixture, SliceSet, gmm_score


class ConstEps(nn.Module):
    """eps_hat = c everywhere."""

    def __init__(self, c=0.0):
        super().__init__()
        self.c = c
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, u, tau):
        return torch.full_like(u, self.c) + 0 * self.dummy


def test_schedule_properties():
    s = make_noise_schedule(64)
    assert s.gamma[0] == 1.0 and s.varsigma[0] == 0.0
    np.testing.assert_allclose(s.gamma ** 2 + s.varsigma ** 2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.gamma) < 0)
    assert s.gamma[-1] > 0
    np.testing.assert_allclose(s.gamma[32], math.cos(0.5 * math.pi * 0.98 * 0.5))
    assert level_range(s) == (2, 62)


def test_sample_levels_range():
    s = make_noise_schedule(64)
    tau = sample_levels(10_000, s, torch.Generator().manual_seed(0))
    assert tau.min() == 2 and tau.max() == 62


def test_forward_diffuse_examples():
    s = make_noise_schedule(64)
    x = torch.randn(2, 3, 4, 4)
    n = torch.randn(2, 3, 4, 4)
    assert torch.equal(forward_diffuse(x, 0, n, s), x)
    u = forward_diffuse(x, 64, n, s)
    # honest bound: |u - noise| <= gamma_T |x| + (1 - varsigma_T) |noise|
    bound = s.gamma[64] * x.abs() + (1 - s.varsigma[64]) * n.abs()
    assert torch.all((u - n).abs() <= bound * (1 + 1e-5) + 1e-6)

    hand = type(s)(T=2, gamma=np.array([1.0, 0.8, 0.1]), varsigma=np.array([0.0, 0.6, math.sqrt(0.99)]))
    u = forward_diffuse(torch.ones(1, 3, 2, 2), 1, torch.ones(1, 3, 2, 2), hand)
    torch.testing.assert_close(u, torch.full((1, 3, 2, 2), 1.4))


def test_forward_diffuse_per_sample_levels():
    s = make_noise_schedule(64)
    x, n = torch.ones(3, 1), torch.zeros(3, 1)
    u = forward_diffuse(x, torch.tensor([0, 10, 64]), n, s)
    np.testing.assert_allclose(u[:, 0].numpy(), s.gamma[[0, 10, 64]], rtol=1e-6)


@pytest.mark.parametrize("tau", [-1, 65])
def test_forward_diffuse_bad_level(tau):
    s = make_noise_schedule(64)
    with pytest.raises(InvalidLevel):
        forward_diffuse(torch.zeros(1, 1), tau, torch.zeros(1, 1), s)


def test_score_analytic_unit_gaussian():
    s = make_noise_schedule(64)
    model = AnalyticScoreModel(GaussianMixture.gaussian([0.0], [[1.0]]), s)
    for tau in (1, 20, 64):
        out = score(model, torch.ones(1, 1, dtype=torch.float64), tau)
        assert out.item() == pytest.approx(-1.0, abs=1e-12)


def test_score_parameterization():
    s = make_noise_schedule(64)
    model = ScoreModel(ConstEps(0.0), s)
    assert torch.all(score(model, torch.randn(2, 3), 5) == 0)
    model = ScoreModel(ConstEps(0.3), s)
    torch.testing.assert_close(score(model, torch.randn(2, 3), 7) * s.varsigma[7], torch.full((2, 3), -0.3))
    with pytest.raises(UndefinedScore):
        score(model, torch.randn(2, 3), 0)


def test_dsm_loss_examples():
    s = make_noise_schedule(64)
    model = ScoreModel(ConstEps(0.0), s)
    x = torch.randn(10_000, 1, generator=torch.Generator().manual_seed(0))
    assert dsm_loss(model, x, rng_seed=3).item() == pytest.approx(1.0, abs=0.05)
    assert dsm_loss(model, x, rng_seed=3).item() == dsm_loss(model, x, rng_seed=3).item()
    with pytest.raises(EmptyBatch):
        dsm_loss(model, torch.zeros(0, 1))


def test_dsm_loss_oracle_denoiser():
    """A model that recovers eps exactly from (u, tau) when x is known to be 0."""
    s = make_noise_schedule(64)

    class Oracle(nn.Module):
        def forward(self, u, tau):
            return u / torch.as_tensor(s.varsigma, dtype=u.dtype)[tau][:, None]

    assert dsm_loss(ScoreModel(Oracle(), s), torch.zeros(64, 4)).item() == pytest.approx(0.0, abs=1e-10)


def test_dsm_loss_finite_differences():
    s = make_noise_schedule(64)

    class Toy(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.tensor([0.3, -0.2, 0.5, 0.1], dtype=torch.float64))

        def forward(self, u, tau):
            t = tau.to(u.dtype)[:, None] / 64
            return self.w[0] * u + self.w[1] * t + self.w[2] * u * t + self.w[3] * u ** 2

    net = Toy()
    model = ScoreModel(net, s)
    x = torch.randn(32, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    loss = dsm_loss(model, x, rng_seed=1)
    (analytic,) = torch.autograd.grad(loss, net.w)
    numeric = torch.zeros(4, dtype=torch.float64)
    eps = 1e-6
    with torch.no_grad():
        for i in range(4):
            net.w[i] += eps
            hi = dsm_loss(model, x, rng_seed=1).item()
            net.w[i] -= 2 * eps
            lo = dsm_loss(model, x, rng_seed=1).item()
            net.w[i] += eps
            numeric[i] = (hi - lo) / (2 * eps)
    assert ((analytic - numeric).norm() / numeric.norm()).item() <= 1e-4


def test_frozen_model_refuses_updates():
    s = make_noise_schedule(64)
    model = ScoreModel(ScoreMLP(1), s, TEACHER_REAL, frozen=True)
    with pytest.raises(FrozenModelError):
        model.configure_optimizer(1e-3)
    with pytest.raises(FrozenModelError):
        model.apply_update(torch.zeros(()))
    assert all(not p.requires_grad for p in model.parameters())
    with pytest.raises(ValueError):
        ScoreModel(ScoreMLP(1), s, "someone_else")


def test_one_d_teacher_matches_marginal_score():
    torch.manual_seed(0)
    s = make_noise_schedule(64)
    data = torch.randn(20_000, 1, generator=torch.Generator().manual_seed(1))
    model = ScoreModel(ScoreMLP(1, hidden=64), s, TEACHER_REAL)
    fit_score_model(model, data, 1500, batch_size=256, lr=2e-3, cosine_decay=True)
    model.freeze()
    with torch.no_grad():
        est = score(model, torch.tensor([[0.5]]), 32).item()
    # N(0,1) stays N(0,1) under the VP process, so the marginal score is -u
    assert est == pytest.approx(-0.5, rel=0.10)


def test_critic_tracks_gaussian_generator_output():
    torch.manual_seed(0)
    s = make_noise_schedule(64)
    gmm = GaussianMixture.gaussian([0.7, -0.4], [[0.5, 0.1], [0.1, 0.3]])
    data = torch.tensor(gmm.sample(20_000, np.random.default_rng(0)), dtype=torch.float32)
    critic = ScoreModel(ScoreMLP(2), s, CRITIC_FAKE)
    fit_score_model(critic, data, 2000, batch_size=256, lr=2e-3, cosine_decay=True)
    grid = np.stack(np.meshgrid(np.linspace(0, 1.4, 9), np.linspace(-1, 0.2, 9)), -1).reshape(-1, 2)
    with torch.no_grad():
        est = score(critic, torch.tensor(grid, dtype=torch.float32), 32).double().numpy()
    ref = gmm_score(gmm, grid, 32, s)
    assert np.linalg.norm(est - ref) / np.linalg.norm(ref) <= 0.10


def _target_set(n=48, size=32):
    gen = torch.Generator().manual_seed(0)
    imgs = (torch.rand(n, 3, size, size, generator=gen) * 2 - 1).numpy()
    return SliceSet(imgs, [f"sub-{i // 8:03d}" for i in range(n)], ["target_pool"] * n)


def test_train_teacher_contract(tmp_path):
    data = _target_set()
    teacher = train_teacher(data, TeacherConfig(steps=30, batch_size=8))
    assert teacher.frozen and teacher.role == TEACHER_REAL
    assert teacher.log[-1]["dsm_loss"] < teacher.log[0]["dsm_loss"]
    with pytest.raises(FrozenModelError):
        teacher.apply_update(torch.zeros(()))

    path = save_score_model(tmp_path / "t.safetensors", teacher)
    again = load_score_model(path)
    assert again.role == TEACHER_REAL and again.frozen
    assert again.schedule.same_as(teacher.schedule)
    u = torch.randn(2, 3, 32, 32)
    assert torch.equal(again.eps(u, 10), teacher.eps(u, 10))


def test_train_teacher_rejects_source_data():
    data = _target_set(16)
    data.cohort[3] = "source_pool"
    with pytest.raises(ContaminatedTeacherData):
        train_teacher(data, TeacherConfig(steps=1))


def test_train_teacher_deterministic():
    data = _target_set(16)
    a = train_teacher(data, TeacherConfig(steps=5, batch_size=4))
    b = train_teacher(data, TeacherConfig(steps=5, batch_size=4))
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_scorenet_shapes():
    net = ScoreNet()
    u = torch.randn(2, 3, 32, 32)
    assert net(u, torch.tensor([3, 40])).shape == u.shape
    assert net.features(u, torch.tensor([3, 40])).shape[1] == net.feature_channels
