import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ulfbridge.bridge import (
    INFER_DETERMINISTIC,
    TRAIN_STOCHASTIC,
    BridgeState,
    bridge_step,
    make_schedule,
    predict_endpoint,
    rollout,
)
from ulfbridge.errors import InvalidSchedule, ShapeError, StepPastEnd
from ulfbridge.networks import Generator


def identity(x, t):
    return x


@pytest.mark.parametrize(
    "K, t, alpha",
    [
        (1, [0.0, 1.0], [1.0]),
        (2, [0.0, 0.5, 1.0], [0.5, 1.0]),
        (4, [0.0, 0.25, 0.5, 0.75, 1.0], [0.25, 1 / 3, 0.5, 1.0]),
    ],
)
def test_uniform_schedule_values(K, t, alpha):
    s = make_schedule(K, noise_scale=0.05)
    np.testing.assert_allclose(s.t, t, atol=1e-15)
    np.testing.assert_allclose(s.alpha, alpha, rtol=1e-15)
    assert s.sigma[-1] == 0.0
    if K == 1:
        assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0


def test_sigma_form():
    s = make_schedule(4, noise_scale=0.3)
    a = s.alpha[:-1]
    np.testing.assert_allclose(s.sigma[:-1], 0.3 * np.sqrt(a * (1 - a)), rtol=1e-15)


def test_custom_grid():
    s = make_schedule(3, grid=[0.0, 0.1, 0.6, 1.0])
    np.testing.assert_allclose(s.alpha, [0.1, 0.5 / 0.9, 1.0])


@pytest.mark.parametrize("grid", [[0.0, 0.5, 0.4, 1.0], [0.1, 0.5, 0.7, 1.0], [0.0, 0.5, 0.5, 1.0], [0.0, 0.5, 1.0]])
def test_bad_grid(grid):
    with pytest.raises(InvalidSchedule):
        make_schedule(3, grid=grid)


def test_k_zero():
    with pytest.raises(InvalidSchedule):
        make_schedule(0)


@settings(max_examples=60, deadline=None)
@given(
    K=st.integers(1, 12),
    noise=st.floats(0, 2),
    cuts=st.lists(st.floats(0.001, 0.999), min_size=0, max_size=11, unique=True),
)
def test_schedule_invariants(K, noise, cuts):
    uniform = make_schedule(K, noise)
    pts = sorted(cuts)[: K - 1]
    if len(pts) == K - 1 and all(b - a > 1e-6 for a, b in zip([0.0] + pts, pts + [1.0])):
        schedules = [uniform, make_schedule(K, noise, grid=[0.0] + pts + [1.0])]
    else:
        schedules = [uniform]
    for s in schedules:
        assert s.alpha[-1] == 1.0 and s.sigma[-1] == 0.0
        assert np.all((s.alpha > 0) & (s.alpha <= 1))
        assert np.all(np.diff(s.t) > 0) and np.all(np.isfinite(s.t))
        recomputed = (s.t[1:] - s.t[:-1]) / (1 - s.t[:-1])
        np.testing.assert_allclose(recomputed, s.alpha, atol=1e-12, rtol=0)
        assert np.all(s.sigma >= 0)


def test_bridge_step_examples():
    s = make_schedule(2, noise_scale=0.0)
    x = torch.zeros(1, 3, 4, 4)
    out = bridge_step(BridgeState(x, 0, 0.0), torch.ones_like(x), s)
    assert torch.all(out.x == 0.5) and out.k == 1 and out.t_k == 0.5

    s = make_schedule(2, noise_scale=0.0)
    s.sigma[0] = 0.1  # hand-set noise scale for the substitution check
    out = bridge_step(BridgeState(x, 0, 0.0), torch.zeros_like(x), s, noise=torch.ones_like(x))
    torch.testing.assert_close(out.x, torch.full_like(x, 0.1))


def test_last_step_returns_endpoint_exactly():
    s = make_schedule(3, noise_scale=0.5)
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 8, 8, generator=gen)
    e = torch.rand(2, 3, 8, 8, generator=gen)
    out = bridge_step(BridgeState(x, 2, s.t[2]), e, s, noise=torch.randn(2, 3, 8, 8, generator=gen))
    assert torch.equal(out.x, e)


def test_step_past_end():
    s = make_schedule(2)
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(StepPastEnd):
        bridge_step(BridgeState(x, 2, 1.0), x, s)


def test_interpolation_bounded_without_noise():
    s = make_schedule(5, noise_scale=0.0)
    gen = torch.Generator().manual_seed(1)
    state = BridgeState(torch.rand(4, 3, 8, 8, generator=gen) * 2 - 1, 0, 0.0)
    for _ in range(s.K):
        e = torch.rand(4, 3, 8, 8, generator=gen) * 2 - 1
        state = bridge_step(state, e, s)
        assert state.x.abs().max() <= 1.0


def test_predict_endpoint_identity_and_shape_error():
    x = torch.rand(2, 3, 8, 8)
    state = BridgeState(x, 0, 0.0)
    assert torch.equal(predict_endpoint(identity, state), x)
    with pytest.raises(ShapeError):
        predict_endpoint(lambda x, t: x[:, :1], state)


def test_predict_endpoint_time_conditioning_is_live():
    torch.manual_seed(0)
    gen = Generator()
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    a = predict_endpoint(gen, BridgeState(x, 0, 0.0))
    b = predict_endpoint(gen, BridgeState(x, 0, 0.5))
    assert torch.equal(a, predict_endpoint(gen, BridgeState(x, 0, 0.0)))
    assert not torch.equal(a, b)


def test_rollout_identity_fixed_point():
    s = make_schedule(3)
    x0 = torch.rand(2, 3, 8, 8) * 2 - 1
    traj, y_hat = rollout(identity, x0, s, INFER_DETERMINISTIC)
    assert len(traj) == 4
    assert torch.equal(y_hat, x0)
    assert all(torch.equal(st.x, x0) for st in traj)
    assert [st.k for st in traj] == [0, 1, 2, 3]


def test_rollout_reproducible_and_single_step():
    torch.manual_seed(0)
    gen = Generator()
    x0 = torch.rand(2, 3, 16, 16) * 2 - 1
    s = make_schedule(3, noise_scale=0.5)
    with torch.no_grad():
        t1, y1 = rollout(gen, x0, s, TRAIN_STOCHASTIC, rng_seed=7)
        t2, y2 = rollout(gen, x0, s, TRAIN_STOCHASTIC, rng_seed=7)
        t3, _ = rollout(gen, x0, s, TRAIN_STOCHASTIC, rng_seed=8)
    assert all(torch.equal(a.x, b.x) for a, b in zip(t1, t2))
    assert torch.equal(y1, y2)
    assert not torch.equal(t1[1].x, t3[1].x)

    calls = []

    def counting(x, t):
        calls.append(t)
        return gen(x, t)

    with torch.no_grad():
        _, y = rollout(counting, x0, make_schedule(1), INFER_DETERMINISTIC)
        assert torch.equal(y, gen(x0, 0.0))
    assert calls == [0.0]


def test_deterministic_rollout_ignores_seed():
    torch.manual_seed(0)
    gen = Generator()
    x0 = torch.rand(2, 3, 16, 16) * 2 - 1
    s = make_schedule(3, noise_scale=0.5)
    with torch.no_grad():
        _, a = rollout(gen, x0, s, INFER_DETERMINISTIC, rng_seed=1)
        _, b = rollout(gen, x0, s, INFER_DETERMINISTIC, rng_seed=2)
    assert torch.equal(a, b)
