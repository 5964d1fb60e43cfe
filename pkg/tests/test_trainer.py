import json

import numpy as np
import pytest
import torch

from ulfbridge.checkpoint import load_checkpoint, save_checkpoint
from ulfbridge.diffusion import TEACHER_REAL, ScoreModel, make_noise_schedule
from ulfbridge.dmd2 import Plan, ttur_plan
from ulfbridge.errors import IncompatibleCheckpoint, CorruptCheckpoint, InvalidConfig, NaNDetected, ShapeError
from ulfbridge.networks import ScoreNet
from ulfbridge.oracles import central_difference
from ulfbridge.synth_data import DatasetManifest, build_cohorts
from ulfbridge.trainer import (
    LOSS_FIELDS,
    LossBreakdown,
    TrainConfig,
    build_models,
    config_from_dict,
    config_schema,
    load_train_state,
    load_translator,
    save_train_state,
    sb_loss,
    total_step_loss,
    train,
    train_shift_testbed,
)


def tiny_config(**over):
    base = dict(batch_size=4, generator_base=8, critic_base=8, total_steps=10, checkpoint_every=0)
    return TrainConfig(**{**base, **over})


def tiny_teacher():
    torch.manual_seed(123)
    return ScoreModel(ScoreNet(base=8), make_noise_schedule(), TEACHER_REAL).freeze()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohorts")
    build_cohorts(root, n_subjects=7, slices_per_subject=2, size=32, split={"paired_test_count": 1}, seed=0)
    return DatasetManifest.load(root / "manifest.json")


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# --- sb_loss -------------------------------------------------------------------------


def test_sb_loss_examples():
    x = torch.randn(2, 3, 8, 8)
    assert sb_loss(x, x).item() == 0.0
    assert sb_loss(x, x + 0.5).item() == pytest.approx(0.25)
    with pytest.raises(ShapeError):
        sb_loss(x, x[:, :2])


def test_sb_loss_gradient():
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    e = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(sb_loss(x, e), e)
    num = central_difference(lambda v: sb_loss(x, v), e)
    assert ((g - num).norm() / num.norm()).item() < 1e-4


# --- total_step_loss ---------------------------------------------------------------


def step_batch(seed=0, n=2):
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.rand(n, 3, 32, 32, generator=gen) * 2 - 1
    x_tk = x0 + 0.1 * torch.randn(x0.shape, generator=gen)
    return x0, x_tk


def eval_step_loss(cfg, seed=0):
    models = build_models(cfg, tiny_teacher())
    x0, x_tk = step_batch(seed)
    endpoint = models.generator(x_tk, torch.full((len(x0),), 1 / 3))
    batch = {"x0": x0, "x_tk": x_tk, "endpoint": endpoint, "t_k": 1 / 3}
    return total_step_loss(models, batch, 1, cfg, generator=torch.Generator().manual_seed(seed)), (x_tk, endpoint)


def test_only_sb_weight_gives_sb_term():
    cfg = tiny_config(lambda_DM=0.0, lambda_Reg=0.0, lambda_SB=1.0)
    (total, br), (x_tk, endpoint) = eval_step_loss(cfg)
    assert total.item() == pytest.approx(sb_loss(x_tk, endpoint).item(), abs=1e-7)
    assert br.total == pytest.approx(br.sb, abs=1e-7)


def test_zero_reg_weight_excludes_terms():
    for flag in (True, False):
        cfg = tiny_config(lambda_Reg=0.0, compute_disabled_terms=flag)
        (total, br), _ = eval_step_loss(cfg)
        if flag:
            assert br.patchnce > 0
        else:
            assert br.patchnce == 0.0 and br.asp_core == 0.0
        assert br.total == pytest.approx(br.weighted_total(cfg), abs=1e-6)


def test_breakdown_identity_random_weights():
    rng = np.random.default_rng(0)
    teacher = tiny_teacher()
    for i in range(100):
        lam = rng.uniform(0, 2, size=4)
        cfg = tiny_config(lambda_DM=lam[0], lambda_SB=lam[1], lambda_Reg=lam[2], lambda_DMD2=lam[3])
        if i == 0:
            models = build_models(cfg, teacher)
        x0, x_tk = step_batch(i, n=1)
        with torch.no_grad():
            endpoint = models.generator(x_tk, torch.full((1,), 0.0))
        batch = {"x0": x0, "x_tk": x_tk, "endpoint": endpoint, "t_k": 0.0}
        _, br = total_step_loss(models, batch, 0, cfg, generator=torch.Generator().manual_seed(i))
        assert abs(br.total - br.weighted_total(cfg)) <= 1e-6 * max(1.0, abs(br.total))


# --- config ------------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lambda_DM, cfg.lambda_DMD2, cfg.lambda_SB, cfg.lambda_Reg) == (1.0, 1.0, 1.0, 1.0)
    assert (cfg.lr_generator, cfg.lr_critic, cfg.batch_size, cfg.total_steps) == (1e-4, 2e-4, 16, 5000)
    with pytest.raises(InvalidConfig):
        TrainConfig(lambda_SB=-1.0)
    with pytest.raises(InvalidConfig):
        TrainConfig(batch_size=0)


def test_config_schema_roundtrip():
    schema = config_schema()
    assert "lambda_DMD2" in schema["properties"]
    cfg = config_from_dict({"K": 2, "asp": {"s_m": 0.3}})
    assert cfg.K == 2 and cfg.asp.s_m == 0.3
    with pytest.raises(InvalidConfig):
        config_from_dict({"K": "three"})
    with pytest.raises(InvalidConfig):
        config_from_dict({"no_such_field": 1})


# --- training loop -----------------------------------------------------------------


def test_ttur_counters_and_frozen_teacher(data):
    teacher = tiny_teacher()
    before = {k: v.clone() for k, v in teacher.net.state_dict().items()}
    state, records = train(tiny_config(total_steps=100, n_critic=5), data, teacher)
    assert state.critic_updates == 100
    assert state.generator_updates == 20
    assert sum(r["plan"] == Plan.UPDATE_ALL.value for r in records) == 20
    for k, v in teacher.net.state_dict().items():
        assert torch.equal(v, before[k])


def test_generator_changes_only_on_update_all(data):
    cfg = tiny_config(total_steps=6, n_critic=3)
    snapshots = []

    def grab(record):
        snapshots.append((record["plan"], [p.detach().clone() for p in state_ref[0].models.generator.parameters()]))

    # grab the live generator through the first record callback
    state_ref = []
    from ulfbridge import trainer as tr

    orig = tr._train_step

    def spy(state, *a):
        if not state_ref:
            state_ref.append(state)
            snapshots.append(("init", [p.detach().clone() for p in state.models.generator.parameters()]))
        return orig(state, *a)

    tr._train_step = spy
    try:
        train(cfg, data, tiny_teacher(), on_record=grab)
    finally:
        tr._train_step = orig
    for (_, prev), (plan, cur) in zip(snapshots, snapshots[1:]):
        changed = any(not torch.equal(a, b) for a, b in zip(prev, cur))
        assert changed == (plan == Plan.UPDATE_ALL.value)


def test_loss_logs_identical_for_same_seed(tmp_path, data):
    cfg = tiny_config(total_steps=50)
    train(cfg, data, tiny_teacher(), out_dir=tmp_path / "a")
    train(cfg, data, tiny_teacher(), out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "loss_log.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.safetensors").read_bytes() == (tmp_path / "b" / "final.safetensors").read_bytes()
    first = read_log(tmp_path / "a" / "loss_log.jsonl")[0]
    assert set(LOSS_FIELDS) <= set(first)


def test_resume_reproduces_unbroken_log(tmp_path, data):
    cfg = tiny_config(total_steps=100, checkpoint_every=50)
    train(cfg, data, tiny_teacher(), out_dir=tmp_path / "full")
    train(cfg, data, tiny_teacher(), out_dir=tmp_path / "half", stop_at=50)
    train(None, data, tiny_teacher(), out_dir=tmp_path / "half",
          resume_from=tmp_path / "half" / "checkpoints" / "step_000050.safetensors")
    full = (tmp_path / "full" / "loss_log.jsonl").read_bytes()
    assert full == (tmp_path / "half" / "loss_log.jsonl").read_bytes()
    assert (tmp_path / "full" / "final.safetensors").read_bytes() == (tmp_path / "half" / "final.safetensors").read_bytes()


def test_nan_aborts_with_last_checkpoint(tmp_path, data):
    cfg = tiny_config(total_steps=20, checkpoint_every=5, lr_generator=1e30, lr_discriminator=1e30)
    with pytest.raises(NaNDetected) as info:
        train(cfg, data, tiny_teacher(), out_dir=tmp_path)
    last = info.value.last_checkpoint
    assert last is None or load_checkpoint(last)[1]["global_step"] <= info.value.step


def test_unfrozen_teacher_rejected(data):
    teacher = ScoreModel(ScoreNet(base=8), make_noise_schedule(), TEACHER_REAL)
    with pytest.raises(InvalidConfig):
        train(tiny_config(), data, teacher)


# --- checkpoints ------------------------------------------------------------------


def test_checkpoint_save_load_save_byte_identical(tmp_path, data):
    state, _ = train(tiny_config(total_steps=6), data, tiny_teacher())
    p1 = save_train_state(tmp_path / "a.safetensors", state)
    p2 = save_train_state(tmp_path / "b.safetensors", load_train_state(p1, tiny_teacher()))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_version_and_corruption(tmp_path):
    path = save_checkpoint(tmp_path / "x.safetensors", {"w": np.ones(3, np.float32)}, {"kind": "test"})
    arrays, meta = load_checkpoint(path)
    np.testing.assert_array_equal(arrays["w"], np.ones(3))
    save_checkpoint(path, {"w": np.ones(3, np.float32)}, {"kind": "test", "version": 99})
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path)
    path.write_bytes(b"\x00" * 4)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_translator_is_deterministic(tmp_path, data):
    train(tiny_config(total_steps=5), data, tiny_teacher(), out_dir=tmp_path)
    tr = load_translator(tmp_path / "final.safetensors")
    x = data.slices("paired_test").images
    out = tr(x)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out, tr(x))


# --- 1-D shift testbed --------------------------------------------------------------


def test_shift_testbed_converges():
    path = train_shift_testbed(m0=1.0, steps=2000)
    assert abs(path[-1]) < 0.05
    assert path[1] < path[0]


def test_ttur_plan_matches_counters():
    plans = [ttur_plan(s, 5) for s in range(100)]
    assert plans.count(Plan.UPDATE_ALL) == 20
