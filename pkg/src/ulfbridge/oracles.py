"""Analytic oracle suites behind ``ulfbridge oracle-check``.

Each suite returns a list of :class:`Check` records (name, measured delta,
tolerance, pass flag).  The same functions back the acceptance tests.
"""
import itertools
import time
from dataclasses import dataclass

import numpy as np
import torch

from .asp import ASPConfig, asp_loss, distance_transform
from .bridge import INFER_DETERMINISTIC, make_schedule, rollout
from .diffusion import level_range, make_noise_schedule
from .dmd2 import dmd2_generator_gradient
from .networks import Discriminator, Generator, generator_adv_loss
from .patchnce import patchnce_loss
from .synth_data import AnalyticScoreModel, GaussianMixture, analytic_kl_grad_shift

__all__ = ["Check", "SUITES", "run_suite", "brute_force_distance", "central_difference", "gradcheck_cases"]


@dataclass
class Check:
    name: str
    delta: float
    tol: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: delta={self.delta:.3e} tol={self.tol:.1e}"


def _check(name, delta, tol):
    delta = float(delta)
    return Check(name, delta, tol, bool(np.isfinite(delta) and delta <= tol))


# --- DMD2 estimator on the Gaussian shift testbed -------------------------------


def mean_gamma_sq(schedule):
    lo, hi = level_range(schedule)
    return float(np.mean(schedule.gamma[lo:hi + 1] ** 2))


def kl_grad_estimate(m, n_samples=200_000, seed=0, T=64):
    """Monte-Carlo DMD2 estimate of d KL / dm, level weighting removed.

    At level tau the raw estimator averages to ``gamma_tau^2 * m``, the gradient
    of the diffused KL; dividing by the exact ``E[gamma^2]`` over the sampled
    level range recovers the clean-data gradient ``m``.
    """
    schedule = make_noise_schedule(T)
    teacher = AnalyticScoreModel(GaussianMixture.gaussian([0.0], [[1.0]]), schedule, "teacher_real")
    critic = AnalyticScoreModel(GaussianMixture.gaussian([m], [[1.0]]), schedule, "critic_fake", frozen=False)
    gen = torch.Generator().manual_seed(seed)
    y = torch.randn((n_samples, 1), generator=gen, dtype=torch.float64) + m
    g = dmd2_generator_gradient(teacher, critic, y, generator=gen, normalize=False)
    return float(g.mean()) / mean_gamma_sq(schedule)


def suite_kl_grad():
    checks = []
    start = time.perf_counter()
    for m in (0.25, 0.5, 1.0):
        est = kl_grad_estimate(m)
        truth = analytic_kl_grad_shift(m)
        checks.append(_check(f"kl_grad m={m} (estimate {est:.4f})", abs(est - truth) / truth, 0.05))
    # descending along the estimate must shrink m
    m, step = 1.0, 0.1
    m_next = m - step * kl_grad_estimate(m, n_samples=20_000)
    checks.append(_check("kl_grad sign (m decreases)", max(0.0, abs(m_next) - abs(m) + 1e-12), 0.0))
    checks.append(_check("kl_grad runtime seconds", time.perf_counter() - start, 60.0))
    return checks


# --- distance transform ------------------------------------------------------------


def brute_force_distance(boundary):
    """O(n^2) reference: distance from each pixel to every boundary pixel."""
    boundary = np.asarray(boundary, dtype=bool)
    pts = np.argwhere(boundary)
    h, w = boundary.shape
    grid = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), axis=-1).reshape(-1, 2)
    d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1).min(axis=1)
    return np.sqrt(d2.astype(np.float64)).reshape(h, w)


def suite_edt(n_cases=100, size=16, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    mismatched = 0
    for i in range(n_cases):
        density = rng.uniform(0.005, 0.3)
        b = rng.random((size, size)) < density
        if not b.any():
            b[rng.integers(size), rng.integers(size)] = True
        diff = np.abs(distance_transform(b) - brute_force_distance(b)).max()
        worst = max(worst, diff)
        mismatched += diff != 0
    empty = distance_transform(np.zeros((size, size), bool))
    return [
        _check(f"edt exact on {n_cases} random {size}x{size} sets ({mismatched} mismatched)", worst, 0.0),
        _check("edt empty boundary -> 1e6", np.abs(empty - 1e6).max(), 0.0),
    ]


# --- bridge schedule invariants ---------------------------------------------------


def suite_schedule(seed=0):
    rng = np.random.default_rng(seed)
    worst_alpha = worst_sigma = worst_recon = 0.0
    for K, noise in itertools.product(range(1, 17), (0.0, 0.05, 1.0)):
        grids = ["uniform", np.concatenate([[0.0], np.sort(rng.uniform(0.01, 0.99, K - 1)), [1.0]])]
        for grid in grids:
            if not isinstance(grid, str) and np.any(np.diff(grid) <= 0):
                continue
            s = make_schedule(K, noise, grid=grid)
            worst_alpha = max(worst_alpha, abs(s.alpha[-1] - 1.0))
            worst_sigma = max(worst_sigma, abs(s.sigma[-1]))
            recon = (s.t[1:] - s.t[:-1]) / (1.0 - s.t[:-1])
            worst_recon = max(worst_recon, np.abs(recon - s.alpha).max())

    torch.manual_seed(seed)
    gen = Generator()
    x0 = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    sched = make_schedule(3, 0.05)
    with torch.no_grad():
        _, a = rollout(gen, x0, sched, INFER_DETERMINISTIC)
        _, b = rollout(gen, x0, sched, INFER_DETERMINISTIC)
    traj, y = rollout(lambda x, t: x, x0, sched, INFER_DETERMINISTIC)
    fixed = max(float((st.x - x0).abs().max()) for st in traj)
    return [
        _check("schedule alpha[K-1] == 1", worst_alpha, 0.0),
        _check("schedule sigma[K-1] == 0", worst_sigma, 0.0),
        _check("schedule alpha recomputed from grid", worst_recon, 1e-12),
        _check("deterministic rollout bit-identical", float((a - b).abs().max()), 0.0),
        _check("identity generator is a fixed point", max(fixed, float((y - x0).abs().max())), 0.0),
    ]


# --- finite-difference gradient checks ------------------------------------------


def central_difference(fn, x, eps=1e-6):
    """Numerical gradient of the scalar ``fn`` at ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def _relative_error(fn, x, eps=1e-6):
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = central_difference(fn, x, eps)
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-12))


def gradcheck_cases(seed=0):
    """(name, fn, input) triples on 8x8 double-precision inputs."""
    gen = torch.Generator().manual_seed(seed)
    dt = torch.float64

    # a smooth phantom keeps the soft masks away from their clamps
    yy, xx = torch.meshgrid(torch.arange(8, dtype=dt), torch.arange(8, dtype=dt), indexing="ij")
    blob = torch.exp(-((yy - 3.5) ** 2 + (xx - 3.5) ** 2) / 6.0) * 1.6 - 0.8
    x_src = blob.expand(1, 3, 8, 8).clone()
    y_asp = (x_src + 0.3 * torch.randn(1, 3, 8, 8, generator=gen, dtype=dt)).clamp(-0.95, 0.95)
    cfg = ASPConfig(s_m=0.2)

    feat_src = [torch.randn(2, 8, 8, generator=gen, dtype=dt)]
    feat_out = torch.randn(2, 8, 8, generator=gen, dtype=dt)

    x_tk = torch.randn(2, 3, 8, 8, generator=gen, dtype=dt)
    endpoint = torch.randn(2, 3, 8, 8, generator=gen, dtype=dt)

    torch.manual_seed(seed)
    disc = Discriminator(base=8).double()
    fake = torch.randn(2, 3, 8, 8, generator=gen, dtype=dt)

    from .trainer import sb_loss

    return [
        ("asp_loss", lambda y: asp_loss(x_src, y, cfg)[0], y_asp),
        ("patchnce_loss", lambda f: patchnce_loss(feat_src, [f], 0.07), feat_out),
        ("sb_loss", lambda e: sb_loss(x_tk, e), endpoint),
        ("adversarial g_loss", lambda f: generator_adv_loss(disc, f, 0.5), fake),
    ]


def suite_gradcheck(seed=0, tol=1e-4):
    return [_check(f"gradcheck {name}", _relative_error(fn, x), tol) for name, fn, x in gradcheck_cases(seed)]


SUITES = {
    "kl_grad": suite_kl_grad,
    "edt": suite_edt,
    "schedule": suite_schedule,
    "gradcheck": suite_gradcheck,
}


def run_suite(name):
    if name == "all":
        return [c for fn in SUITES.values() for c in fn()]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()


# --- teacher fidelity on the 2-D Gaussian testbed ----------------------------------

TESTBED_2D = GaussianMixture.gaussian([0.5, -0.3], [[1.0, 0.4], [0.4, 0.5]])
# levels with varsigma >= 0.19; below that the eps-parameterized score error is
# amplified by 1 / varsigma and those levels are reported separately
FIDELITY_LEVELS = (8, 16, 24, 32, 40, 48, 56, 62)
LOW_NOISE_LEVELS = (2, 4)


def teacher_fidelity_2d(steps=3000, n_data=20_000, batch_size=256, lr=2e-3, seed=0, T=64):
    """Fit a DSM teacher on 2-D Gaussian samples and compare with the closed form.

    Returns ``(aggregate relative L2 over FIDELITY_LEVELS, {level: relative L2})``
    on a held-out 21x21 grid covering two standard deviations around the mean;
    the per-level map also lists LOW_NOISE_LEVELS.
    """
    from .diffusion import ScoreModel, fit_score_model, score
    from .networks import ScoreMLP
    from .synth_data import gmm_score

    torch.manual_seed(seed)
    schedule = make_noise_schedule(T)
    data = torch.tensor(TESTBED_2D.sample(n_data, np.random.default_rng(seed)), dtype=torch.float32)
    model = ScoreModel(ScoreMLP(2), schedule, "teacher_real")
    fit_score_model(model, data, steps, batch_size=batch_size, lr=lr, seed=seed, cosine_decay=True)
    model.freeze()

    sd = np.sqrt(np.diag(TESTBED_2D.covariances[0]))
    mu = TESTBED_2D.means[0]
    axes = [np.linspace(m - 2 * s, m + 2 * s, 21) for m, s in zip(mu, sd)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
    per_level, num, den = {}, 0.0, 0.0
    u = torch.tensor(grid, dtype=torch.float32)
    for tau in LOW_NOISE_LEVELS + FIDELITY_LEVELS:
        with torch.no_grad():
            est = score(model, u, tau).double().numpy()
        ref = gmm_score(TESTBED_2D, grid, tau, schedule)
        err = np.linalg.norm(est - ref)
        per_level[tau] = float(err / np.linalg.norm(ref))
        if tau in FIDELITY_LEVELS:
            num += err ** 2
            den += np.linalg.norm(ref) ** 2
    return float(np.sqrt(num / den)), per_level
