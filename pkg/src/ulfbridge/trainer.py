"""Total objective, the TTUR training loop, checkpoints and loss logs."""
import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .asp import ASPConfig, asp_loss, asp_targets
from .bridge import BridgeState, bridge_step, make_schedule, predict_endpoint, rollout
from .diffusion import (
    CRITIC_FAKE,
    ScoreModel,
    forward_diffuse,
    make_noise_schedule,
    sample_levels,
)
from .dmd2 import (
    CriticClassifier,
    Plan,
    aux_gan_loss,
    dmd2_generator_gradient,
    dmd2_surrogate,
    ttur_plan,
    update_critic,
)
from .errors import EmptyBatch, InvalidConfig, NaNDetected, ShapeError
from .networks import AuxHead, Discriminator, Generator, ScoreNet, discriminator_loss, generator_adv_loss
from .patchnce import PatchNCEConfig, PatchProjector, patchnce_loss, sample_patch_features

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "Models",
    "TrainState",
    "build_models",
    "sb_loss",
    "total_step_loss",
    "train",
    "state_arrays",
    "save_train_state",
    "load_train_state",
    "make_translator",
    "load_translator",
    "train_shift_testbed",
    "config_from_dict",
    "config_schema",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_DM: float = 1.0
    lambda_SB: float = 1.0
    lambda_Reg: float = 1.0
    lambda_DMD2: float = 1.0
    aux_gan: bool = True
    compute_disabled_terms: bool = True
    K: int = 3
    noise_scale: float = 0.05
    n_critic: int = 5
    lr_generator: float = 1e-4
    lr_discriminator: float = 2e-4
    lr_critic: float = 2e-4
    lr_aux: float = 2e-4
    batch_size: int = 16
    total_steps: int = 5000
    checkpoint_every: int = 500
    seed: int = 0
    generator_base: int = 16
    critic_base: int = 16
    asp: ASPConfig = field(default_factory=ASPConfig)
    patchnce: PatchNCEConfig = field(default_factory=PatchNCEConfig)
    noise_T: int = 64

    def __post_init__(self):
        if isinstance(self.asp, dict):
            self.asp = ASPConfig(**self.asp)
        if isinstance(self.patchnce, dict):
            self.patchnce = PatchNCEConfig(**self.patchnce)
        for name in ("lambda_DM", "lambda_SB", "lambda_Reg", "lambda_DMD2"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be nonnegative")
        if self.batch_size < 1 or self.total_steps < 0 or self.K < 1 or self.n_critic < 1:
            raise InvalidConfig("batch_size, K and n_critic must be >= 1")

    @property
    def uses_critic(self):
        return self.lambda_DM > 0 and (self.lambda_DMD2 > 0 or self.aux_gan)


_SCHEMA_TYPES = {bool: "boolean", int: "integer", float: "number"}


def config_schema():
    """JSON schema of the training configuration document."""
    props = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "asp":
            sub = {g.name: {"type": "number"} for g in dataclasses.fields(ASPConfig)}
            props[f.name] = {"type": "object", "properties": sub, "additionalProperties": False}
        elif f.name == "patchnce":
            sub = {g.name: {"type": _SCHEMA_TYPES[type(g.default)]} for g in dataclasses.fields(PatchNCEConfig)}
            props[f.name] = {"type": "object", "properties": sub, "additionalProperties": False}
        else:
            props[f.name] = {"type": _SCHEMA_TYPES[type(f.default)]}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "ulfbridge training configuration",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }


def config_from_dict(doc):
    import jsonschema

    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        raise InvalidConfig(f"invalid training config: {exc.message}") from exc
    return TrainConfig(**doc)


LOSS_FIELDS = (
    "adv_g", "adv_d", "dmd2", "aux_gan_g", "aux_gan_d", "sb",
    "patchnce", "asp_core", "asp_bg", "asp_boundary", "total",
)


@dataclass
class LossBreakdown:
    adv_g: float = 0.0
    adv_d: float = 0.0
    dmd2: float = 0.0
    aux_gan_g: float = 0.0
    aux_gan_d: float = 0.0
    sb: float = 0.0
    patchnce: float = 0.0
    asp_core: float = 0.0
    asp_bg: float = 0.0
    asp_boundary: float = 0.0
    total: float = 0.0

    def weighted_total(self, config):
        return (
            config.lambda_DM * (self.adv_g + config.lambda_DMD2 * self.dmd2 + self.aux_gan_g)
            + config.lambda_SB * self.sb
            + config.lambda_Reg * (self.patchnce + self.asp_core + self.asp_bg + self.asp_boundary)
        )


@dataclass
class Models:
    generator: Generator
    discriminator: Discriminator
    critic: ScoreModel
    aux_head: AuxHead
    projector: PatchProjector
    teacher: object = None

    @property
    def classifier(self):
        return CriticClassifier(self.critic, self.aux_head)


@dataclass
class TrainState:
    config: TrainConfig
    models: Models
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    global_step: int = 0
    critic_updates: int = 0
    generator_updates: int = 0


def _same_shapes(a, b):
    if not isinstance(a, ScoreNet):
        return False
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(sa[k].shape == sb[k].shape for k in sa)


def build_models(config, teacher=None, channels=3):
    torch.manual_seed(config.seed)
    schedule = teacher.schedule if teacher is not None else make_noise_schedule(config.noise_T)
    generator = Generator(channels=channels, base=config.generator_base)
    discriminator = Discriminator(channels=channels)
    critic = ScoreModel(ScoreNet(channels=channels, base=config.critic_base), schedule, CRITIC_FAKE)
    if teacher is not None and _same_shapes(getattr(teacher, "net", None), critic.net):
        critic.net.load_state_dict(teacher.net.state_dict())
        for p in critic.net.parameters():
            p.requires_grad_(True)
    aux_head = AuxHead(critic.net.feature_channels)
    projector = PatchProjector(generator.tap_channels, config.patchnce.proj_dim)
    return Models(generator, discriminator, critic, aux_head, projector, teacher)


def _make_state(config, models):
    betas = (0.5, 0.999)
    opt_g = torch.optim.Adam(
        list(models.generator.parameters()) + list(models.projector.parameters()),
        lr=config.lr_generator, betas=betas,
    )
    opt_d = torch.optim.Adam(models.discriminator.parameters(), lr=config.lr_discriminator, betas=betas)
    models.critic.optimizer = torch.optim.Adam(
        [
            {"params": list(models.critic.net.parameters())},
            {"params": list(models.aux_head.parameters()), "lr": config.lr_aux},
        ],
        lr=config.lr_critic, betas=betas,
    )
    return TrainState(config=config, models=models, opt_g=opt_g, opt_d=opt_d)


def sb_loss(x_tk, endpoint):
    """Per-element mean squared transport cost between a state and its endpoint."""
    if x_tk.shape != endpoint.shape:
        raise ShapeError(f"sb_loss shapes differ: {tuple(x_tk.shape)} vs {tuple(endpoint.shape)}")
    return ((endpoint - x_tk) ** 2).mean()


def _wants(weight, config):
    return weight > 0 or config.compute_disabled_terms


def total_step_loss(models, batch, k, config, generator=None):
    """Generator objective at refinement step ``k``.

    ``batch`` maps ``x0`` (source slices), ``x_tk`` (current state), ``endpoint``
    (prediction ``G(x_tk, t_k)`` carrying gradients) and optionally
    ``src_feats`` / ``asp_targets`` precomputed from ``x0`` and ``t_k``.
    Returns ``(loss, LossBreakdown)``.
    """
    x0, x_tk, endpoint = batch["x0"], batch["x_tk"], batch["endpoint"]
    t_k = batch["t_k"]
    gen = generator if generator is not None else torch.Generator().manual_seed(config.seed + k)
    zero = endpoint.new_zeros(())
    terms = {name: zero for name in ("adv_g", "dmd2", "aux_gan_g", "sb", "patchnce", "asp_core", "asp_bg", "asp_boundary")}
    n = endpoint.shape[0]
    t_vec = torch.full((n,), float(t_k), dtype=endpoint.dtype)

    if _wants(config.lambda_DM, config):
        terms["adv_g"] = generator_adv_loss(models.discriminator, endpoint, t_vec)
        if models.teacher is not None and (config.lambda_DMD2 > 0 or (config.compute_disabled_terms and config.uses_critic)):
            g = dmd2_generator_gradient(models.teacher, models.critic, endpoint, generator=gen)
            terms["dmd2"] = dmd2_surrogate(endpoint, g)
        if config.aux_gan:
            tau = sample_levels(n, models.critic.schedule, gen)
            noise = torch.randn(endpoint.shape, generator=gen, dtype=endpoint.dtype)
            fake_u = forward_diffuse(endpoint, tau, noise, models.critic.schedule)
            logits = models.classifier(fake_u, tau)
            terms["aux_gan_g"] = F.softplus(-logits).mean()
    if _wants(config.lambda_SB, config):
        terms["sb"] = sb_loss(x_tk, endpoint)
    if _wants(config.lambda_Reg, config):
        src_feats = batch.get("src_feats")
        ids = batch.get("patch_ids")
        if src_feats is None:
            with torch.no_grad():
                src_feats, ids = sample_patch_features(
                    models.generator.encode(x0, 0.0), None, config.patchnce.num_patches,
                    models.projector, gen,
                )
        out_feats, _ = sample_patch_features(
            models.generator.encode(endpoint, 0.0), ids, config.patchnce.num_patches, models.projector
        )
        terms["patchnce"] = patchnce_loss(src_feats, out_feats, config.patchnce.temperature)
        _, parts = asp_loss(x0, endpoint, config.asp, targets=batch.get("asp_targets"))
        terms["asp_core"], terms["asp_bg"], terms["asp_boundary"] = parts["core_bce"], parts["bg_bce"], parts["boundary"]

    total = (
        config.lambda_DM * (terms["adv_g"] + config.lambda_DMD2 * terms["dmd2"] + terms["aux_gan_g"])
        + config.lambda_SB * terms["sb"]
        + config.lambda_Reg * (terms["patchnce"] + terms["asp_core"] + terms["asp_bg"] + terms["asp_boundary"])
    )
    breakdown = LossBreakdown(**{k_: float(v.detach()) for k_, v in terms.items()}, total=float(total.detach()))
    return total, breakdown


def _step_seed(seed, step):
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _augment(batch, gen):
    flip = torch.rand(batch.shape[0], generator=gen) < 0.5
    return torch.where(flip[:, None, None, None], batch.flip(-1), batch)


def _train_step(state, source, target, schedule):
    cfg = state.config
    m = state.models
    step = state.global_step
    gen = torch.Generator().manual_seed(_step_seed(cfg.seed, step))
    plan = ttur_plan(step, cfg.n_critic)
    update_g = plan == Plan.UPDATE_ALL

    x0 = _augment(source[torch.randint(0, len(source), (cfg.batch_size,), generator=gen)], gen)
    y = _augment(target[torch.randint(0, len(target), (cfg.batch_size,), generator=gen)], gen)
    B = x0.shape[0]

    # stochastic rollout; states are detached, endpoints keep their graph on generator steps
    states, endpoints = [], []
    st = BridgeState(x=x0, k=0, t_k=float(schedule.t[0]))
    with torch.set_grad_enabled(update_g):
        for k in range(schedule.K):
            states.append(st)
            endpoint = predict_endpoint(m.generator, st)
            endpoints.append(endpoint)
            noise = torch.randn(x0.shape, generator=gen)
            st = bridge_step(BridgeState(st.x.detach(), st.k, st.t_k), endpoint.detach(), schedule, noise)

    record = {"step": step, "plan": plan.value}
    fakes = torch.cat([e.detach() for e in endpoints])
    t_fake = torch.cat([torch.full((B,), float(schedule.t[k])) for k in range(schedule.K)])

    # discriminator
    if cfg.lambda_DM > 0 or cfg.compute_disabled_terms:
        d_loss = discriminator_loss(m.discriminator, y.repeat(schedule.K, 1, 1, 1), fakes, t_fake)
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()
        record["adv_d"] = d_loss.item()

    # fake critic (+ auxiliary classifier)
    if cfg.uses_critic:
        pick = torch.randperm(len(fakes), generator=gen)[:B]
        fake_batch = fakes[pick]
        aux_d = None
        if cfg.aux_gan:
            tau = sample_levels(B, m.critic.schedule, gen)
            real_u = forward_diffuse(y, tau, torch.randn(y.shape, generator=gen), m.critic.schedule)
            fake_u = forward_diffuse(fake_batch, tau, torch.randn(y.shape, generator=gen), m.critic.schedule)
            aux_d = _aux_d_loss(m.classifier, real_u, fake_u, tau)
            record["aux_gan_d"] = aux_d.item()
        record["critic_dsm"] = update_critic(m.critic, fake_batch, extra_loss=aux_d, generator=gen)
        state.critic_updates += 1

    if update_g:
        with torch.no_grad():
            src_feats, ids = sample_patch_features(
                m.generator.encode(x0, 0.0), None, cfg.patchnce.num_patches, m.projector, gen
            )
        targets = asp_targets(x0, cfg.asp) if _wants(cfg.lambda_Reg, cfg) else None
        total = 0.0
        parts = []
        for k in range(schedule.K):
            batch = {
                "x0": x0, "x_tk": states[k].x.detach(), "endpoint": endpoints[k], "t_k": schedule.t[k],
                "src_feats": src_feats, "patch_ids": ids, "asp_targets": targets,
            }
            loss_k, br = total_step_loss(m, batch, k, cfg, generator=gen)
            total = total + loss_k / schedule.K
            parts.append(br)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        state.generator_updates += 1
        for name in LOSS_FIELDS:
            if name in ("adv_d", "aux_gan_d"):
                continue
            record[name] = float(np.mean([getattr(p, name) for p in parts]))
    state.global_step += 1
    return record


def _aux_d_loss(classifier, real_u, fake_u, tau):
    # discriminator half of aux_gan_loss without the extra generator-side forward
    d_real = F.softplus(-classifier(real_u, tau)).mean()
    d_fake = F.softplus(classifier(fake_u.detach(), tau)).mean()
    return 0.5 * (d_real + d_fake)


def _finite(record):
    return all(math.isfinite(v) for k, v in record.items() if isinstance(v, float))


# --- checkpoints -------------------------------------------------------------------


def state_arrays(state):
    m = state.models
    arrays = {}
    arrays.update(ckpt.module_arrays("generator", m.generator))
    arrays.update(ckpt.module_arrays("discriminator", m.discriminator))
    arrays.update(ckpt.module_arrays("critic", m.critic.net))
    arrays.update(ckpt.module_arrays("aux_head", m.aux_head))
    arrays.update(ckpt.module_arrays("projector", m.projector))
    opt_meta = {}
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d), ("opt_critic", m.critic.optimizer)):
        a, meta = ckpt.optimizer_arrays(name, opt)
        arrays.update(a)
        opt_meta[name] = meta
    return arrays, opt_meta


def _config_dict(config):
    return json.loads(json.dumps(asdict(config)))


def save_train_state(path, state):
    arrays, opt_meta = state_arrays(state)
    meta = {
        "kind": "train_state",
        "global_step": state.global_step,
        "counters": {"critic": state.critic_updates, "generator": state.generator_updates},
        "config": _config_dict(state.config),
        "optimizers": opt_meta,
        "rng": {"scheme": "per-step SeedSequence([seed, step])", "seed": state.config.seed},
    }
    return ckpt.save_checkpoint(path, arrays, meta)


def load_train_state(path, teacher=None):
    arrays, meta = ckpt.load_checkpoint(path)
    config = TrainConfig(**meta["config"])
    models = build_models(config, teacher)
    ckpt.load_module_arrays(models.generator, arrays, "generator")
    ckpt.load_module_arrays(models.discriminator, arrays, "discriminator")
    ckpt.load_module_arrays(models.critic.net, arrays, "critic")
    ckpt.load_module_arrays(models.aux_head, arrays, "aux_head")
    ckpt.load_module_arrays(models.projector, arrays, "projector")
    state = _make_state(config, models)
    ckpt.load_optimizer_arrays(state.opt_g, arrays, "opt_g", meta["optimizers"]["opt_g"])
    ckpt.load_optimizer_arrays(state.opt_d, arrays, "opt_d", meta["optimizers"]["opt_d"])
    ckpt.load_optimizer_arrays(models.critic.optimizer, arrays, "opt_critic", meta["optimizers"]["opt_critic"])
    state.global_step = meta["global_step"]
    state.critic_updates = meta["counters"]["critic"]
    state.generator_updates = meta["counters"]["generator"]
    return state


def train(config, data, teacher, out_dir=None, resume_from=None, on_record=None, stop_at=None, total_steps=None):
    """Run the TTUR loop; returns ``(state, records)``.

    ``data`` is a manifest; the source pool feeds the generator and the target
    pool the discriminator and auxiliary classifier.  With ``out_dir`` the loss
    log (JSON lines) and periodic checkpoints are written there.  ``stop_at``
    ends the run early at that global step (used for resume tests);
    ``total_steps`` overrides the configured length, also when resuming.
    """
    if teacher is not None and not teacher.frozen:
        raise InvalidConfig("teacher must be frozen")
    source = torch.as_tensor(data.slices("source_pool").images, dtype=torch.float32)
    target = torch.as_tensor(data.slices("target_pool").images, dtype=torch.float32)
    if len(source) == 0 or len(target) == 0:
        raise EmptyBatch("source and target pools must be nonempty")

    if resume_from is not None:
        state = load_train_state(resume_from, teacher)
        config = state.config
    else:
        state = _make_state(config, build_models(config, teacher, source.shape[1]))
    if total_steps is not None:
        config = state.config = dataclasses.replace(config, total_steps=int(total_steps))
    schedule = make_schedule(config.K, config.noise_scale)
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    last_good = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(_config_dict(config), indent=2, sort_keys=True) + "\n")
        log_fh = open(out_dir / "loss_log.jsonl", "a" if resume_from is not None else "w")
        last_good = resume_from
    records = []
    try:
        while state.global_step < end:
            record = _train_step(state, source, target, schedule)
            if not _finite(record):
                raise NaNDetected(
                    f"non-finite loss at step {record['step']}", last_checkpoint=last_good, step=record["step"]
                )
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if on_record is not None:
                on_record(record)
            if out_dir is not None and config.checkpoint_every and state.global_step % config.checkpoint_every == 0:
                last_good = save_train_state(out_dir / f"checkpoints/step_{state.global_step:06d}.safetensors", state)
            if record["step"] % 100 == 0:
                log.info("step %d %s", record["step"], {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_train_state(out_dir / "final.safetensors", state)
    return state, records


# --- inference ------------------------------------------------------------------------


def make_translator(generator, schedule, batch_size=64):
    """Deterministic rollout as a numpy (N, 3, H, W) -> (N, 3, H, W) function."""
    generator.eval()

    def translate(images):
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        outs = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                _, y_hat = rollout(generator, x[i:i + batch_size], schedule)
                outs.append(y_hat.numpy())
        return np.concatenate(outs, axis=0)

    return translate


def load_translator(path):
    arrays, meta = ckpt.load_checkpoint(path)
    config = TrainConfig(**meta["config"])
    generator = Generator(base=config.generator_base)
    ckpt.load_module_arrays(generator, arrays, "generator")
    return make_translator(generator, make_schedule(config.K, 0.0))


def identity_translator(images):
    return np.asarray(images, dtype=np.float32).copy()


# --- analytic 1-D testbed ----------------------------------------------------------------


def train_shift_testbed(m0=1.0, steps=2000, lr=0.01, batch_size=256, seed=0, normalize=True, T=64):
    """Generator ``y = z + m`` driven only by the DMD2 gradient.

    Real data is N(0, 1); the fake critic is the exact score of the current
    generator distribution N(m, 1).  Returns the trajectory of ``m``.
    """
    from .synth_data import AnalyticScoreModel, GaussianMixture

    schedule = make_noise_schedule(T)
    teacher = AnalyticScoreModel(GaussianMixture.gaussian([0.0], [[1.0]]), schedule, "teacher_real")
    m = torch.tensor([float(m0)], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([m], lr=lr)
    gen = torch.Generator().manual_seed(seed)
    path = [m.item()]
    for _ in range(steps):
        critic = AnalyticScoreModel(GaussianMixture.gaussian([m.item()], [[1.0]]), schedule, "critic_fake", frozen=False)
        z = torch.randn((batch_size, 1), generator=gen, dtype=torch.float64)
        y = z + m
        g = dmd2_generator_gradient(teacher, critic, y, generator=gen, normalize=normalize)
        loss = dmd2_surrogate(y, g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        path.append(m.item())
    return np.asarray(path)
