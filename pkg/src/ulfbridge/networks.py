"""Small time-conditioned networks sized for desk-scale (32x32, CPU) training.

All modules are plain ``torch.nn.Module`` subclasses; parameters serialize as
named arrays through :mod:`ulfbridge.checkpoint`.
"""
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyBatch, ShapeError

__all__ = [
    "timestep_embedding",
    "Generator",
    "Discriminator",
    "ScoreNet",
    "ScoreMLP",
    "AuxHead",
    "generator_forward",
    "discriminator_forward",
    "adversarial_losses",
    "discriminator_loss",
    "generator_adv_loss",
    "count_parameters",
]


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of a batch of scalar times, shape (B,) -> (B, dim)."""
    t = torch.as_tensor(t).reshape(-1)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def _groups(ch):
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, h, emb):
        r = self.conv1(F.silu(self.norm1(h)))
        r = r + self.emb(emb)[:, :, None, None]
        r = self.conv2(F.silu(self.norm2(r)))
        return h + r


class _TimeMLP(nn.Module):
    def __init__(self, emb_dim, out_dim, scale):
        super().__init__()
        self.emb_dim = emb_dim
        self.scale = scale
        self.net = nn.Sequential(
            nn.Linear(emb_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t, batch, like):
        t = torch.as_tensor(t, device=like.device)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ShapeError(f"time input has shape {tuple(t.shape)}, expected ({batch},)")
        emb = timestep_embedding(t * self.scale, self.emb_dim).to(like.dtype)
        return self.net(emb)


def _check_image(x, channels):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"expected (B, {channels}, H, W) input, got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise EmptyBatch("empty batch")


class Generator(nn.Module):
    """3-level residual encoder-decoder ``G(x, t)`` with sinusoidal time conditioning.

    The output is ``tanh(atanh(x) + residual)``, so the prediction stays in
    (-1, 1) while an all-zero residual reproduces the (clamped) input.  ``taps`` are the
    three encoder activations used by PatchNCE.
    """

    def __init__(self, channels=3, base=16, emb_dim=64, time_scale=1000.0):
        super().__init__()
        c0, c1, c2 = base, base * 2, base * 4
        self.channels = channels
        self.emb_dim = emb_dim
        hidden = 2 * emb_dim
        self.time = _TimeMLP(emb_dim, hidden, time_scale)
        self.stem = nn.Conv2d(channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, hidden)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, hidden)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, hidden)
        self.mid = ResBlock(c2, hidden)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(c1, hidden)
        self.up1 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(c0, hidden)
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out = nn.Conv2d(c0, channels, 3, padding=1)
        with torch.no_grad():
            self.out.weight.mul_(0.1)
            self.out.bias.zero_()
        self.tap_channels = (c0, c1, c2)

    def forward(self, x, t, return_taps=False):
        _check_image(x, self.channels)
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"spatial size must be divisible by 4, got {tuple(x.shape[-2:])}")
        emb = self.time(t, x.shape[0], x)
        h0 = self.enc0(self.stem(x), emb)
        h1 = self.enc1(self.down1(F.silu(h0)), emb)
        h2 = self.enc2(self.down2(F.silu(h1)), emb)
        h = self.mid(h2, emb)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest")) + h1
        h = self.dec1(h, emb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest")) + h0
        h = self.dec0(h, emb)
        residual = self.out(F.silu(self.out_norm(h)))
        base = torch.atanh(x.clamp(-0.999, 0.999))
        y = torch.tanh(base + residual)
        if return_taps:
            return y, [h0, h1, h2]
        return y

    def encode(self, x, t):
        """Encoder activations at three depths (PatchNCE feature taps)."""
        _check_image(x, self.channels)
        emb = self.time(t, x.shape[0], x)
        h0 = self.enc0(self.stem(x), emb)
        h1 = self.enc1(self.down1(F.silu(h0)), emb)
        h2 = self.enc2(self.down2(F.silu(h1)), emb)
        return [h0, h1, h2]


class Discriminator(nn.Module):
    """Time-conditioned 4-layer strided patch discriminator (logit map at 1/8 size)."""

    def __init__(self, channels=3, base=32, emb_dim=64, time_scale=1000.0):
        super().__init__()
        self.channels = channels
        self.time = _TimeMLP(emb_dim, 2 * emb_dim, time_scale)
        self.conv1 = nn.Conv2d(channels, base, 4, stride=2, padding=1)
        self.emb1 = nn.Linear(2 * emb_dim, base)
        self.conv2 = nn.Conv2d(base, base * 2, 4, stride=2, padding=1)
        self.emb2 = nn.Linear(2 * emb_dim, base * 2)
        self.conv3 = nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1)
        self.conv4 = nn.Conv2d(base * 4, 1, 3, padding=1)

    def forward(self, x, t):
        _check_image(x, self.channels)
        emb = self.time(t, x.shape[0], x)
        h = F.leaky_relu(self.conv1(x), 0.2) + self.emb1(emb)[:, :, None, None]
        h = F.leaky_relu(self.conv2(h), 0.2) + self.emb2(emb)[:, :, None, None]
        h = F.leaky_relu(self.conv3(h), 0.2)
        return self.conv4(h)


class ScoreNet(nn.Module):
    """Noise-level-conditioned epsilon predictor shared by the teacher and the critic."""

    def __init__(self, channels=3, base=16, emb_dim=64):
        super().__init__()
        c0, c1 = base, base * 2
        self.channels = channels
        hidden = 2 * emb_dim
        self.feature_channels = c1
        self.time = _TimeMLP(emb_dim, hidden, 1.0)
        self.stem = nn.Conv2d(channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, hidden)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, hidden)
        self.mid = ResBlock(c1, hidden)
        self.up = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(c0, hidden)
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out = nn.Conv2d(c0, channels, 3, padding=1)

    def features(self, u, tau):
        """Bottleneck activations only (input of the auxiliary classifier)."""
        _check_image(u, self.channels)
        emb = self.time(torch.as_tensor(tau, device=u.device).to(u.dtype), u.shape[0], u)
        h0 = self.enc0(self.stem(u), emb)
        return self.mid(self.enc1(self.down(F.silu(h0)), emb), emb)

    def forward(self, u, tau, return_features=False):
        _check_image(u, self.channels)
        emb = self.time(torch.as_tensor(tau, device=u.device).to(u.dtype), u.shape[0], u)
        h0 = self.enc0(self.stem(u), emb)
        h1 = self.mid(self.enc1(self.down(F.silu(h0)), emb), emb)
        h = self.up(F.interpolate(h1, scale_factor=2, mode="nearest")) + h0
        h = self.dec0(h, emb)
        eps = self.out(F.silu(self.out_norm(h)))
        if return_features:
            return eps, h1
        return eps


class ScoreMLP(nn.Module):
    """Epsilon predictor for low-dimensional vector testbeds, input (B, dim)."""

    def __init__(self, dim, hidden=128, emb_dim=32):
        super().__init__()
        self.dim = dim
        self.emb_dim = emb_dim
        self.net = nn.Sequential(
            nn.Linear(dim + emb_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, u, tau):
        if u.ndim != 2 or u.shape[1] != self.dim:
            raise ShapeError(f"expected (B, {self.dim}) input, got {tuple(u.shape)}")
        tau = torch.as_tensor(tau, device=u.device)
        if tau.ndim == 0:
            tau = tau.expand(u.shape[0])
        emb = timestep_embedding(tau.to(torch.float64), self.emb_dim).to(u.dtype)
        return self.net(torch.cat([u, emb], dim=1))


class AuxHead(nn.Module):
    """Auxiliary GAN classifier on top of the critic's bottleneck features."""

    def __init__(self, in_channels, hidden=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, features):
        return self.net(features)


def generator_forward(gen, x, t):
    return gen(x, t)


def discriminator_forward(disc, x, t):
    return disc(x, t)


def discriminator_loss(disc, real_batch, fake_batch, t):
    real_logits = disc(real_batch, t)
    fake_logits = disc(fake_batch.detach(), t)
    return 0.5 * (F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean())


def generator_adv_loss(disc, fake_batch, t):
    return F.softplus(-disc(fake_batch, t)).mean()


def adversarial_losses(disc, real_batch, fake_batch, t):
    """Non-saturating logistic GAN losses averaged over the logit map.

    ``d_loss`` sees detached fakes; ``g_loss`` keeps the graph to the generator.
    """
    if real_batch.shape[0] == 0 or fake_batch.shape[0] == 0:
        raise EmptyBatch("adversarial losses need nonempty real and fake batches")
    d_loss = discriminator_loss(disc, real_batch, fake_batch, t)
    g_loss = generator_adv_loss(disc, fake_batch, t)
    return d_loss, g_loss


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
