"""Patch-level contrastive loss between source and translated slices."""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NeedNegatives, TooManyPatches

__all__ = ["PatchNCEConfig", "PatchProjector", "sample_patch_features", "patchnce_loss"]


@dataclass(frozen=True)
class PatchNCEConfig:
    num_patches: int = 64
    temperature: float = 0.07
    proj_dim: int = 64


class PatchProjector(nn.Module):
    """One two-layer MLP per encoder tap."""

    def __init__(self, in_channels, proj_dim=64):
        super().__init__()
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Linear(c, proj_dim), nn.ReLU(), nn.Linear(proj_dim, proj_dim))
            for c in in_channels
        )

    def __getitem__(self, i):
        return self.heads[i]

    def __len__(self):
        return len(self.heads)


def sample_patch_features(encoder_features, patch_ids=None, num_patches=64, projector=None, generator=None):
    """Gather ``num_patches`` spatial locations per layer, project and L2-normalize.

    ``encoder_features`` are (B, C, H, W) maps.  Pass the returned ``patch_ids``
    back in to sample the same locations from another image.  Returns
    ``(features, patch_ids)`` with per-layer (B, N, D) unit-norm rows.
    """
    if num_patches < 2:
        raise NeedNegatives("num_patches must be at least 2")
    if not encoder_features:
        raise ValueError("no feature layers given")
    feats, ids_out = [], []
    for i, fmap in enumerate(encoder_features):
        b, c, h, w = fmap.shape
        flat = fmap.flatten(2).transpose(1, 2)  # (B, HW, C)
        if patch_ids is None:
            if num_patches > h * w:
                raise TooManyPatches(f"{num_patches} patches requested from a {h}x{w} map")
            ids = torch.randperm(h * w, generator=generator)[:num_patches].to(fmap.device)
        else:
            ids = patch_ids[i]
        picked = flat[:, ids, :]
        if projector is not None:
            picked = projector[i](picked)
        feats.append(F.normalize(picked, dim=-1, eps=1e-12))
        ids_out.append(ids)
    return feats, ids_out


def patchnce_loss(feat_src, feat_out, temperature=0.07):
    """InfoNCE over same-slice patches; the positive is the same location.

    Queries come from ``feat_out`` and keys from (detached) ``feat_src``; rows are
    re-normalized, so the loss ignores feature scale.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    losses = []
    for src, out in zip(feat_src, feat_out, strict=True):
        if src.shape != out.shape:
            raise ValueError(f"feature shapes differ: {tuple(src.shape)} vs {tuple(out.shape)}")
        if src.shape[-2] < 2:
            raise NeedNegatives("PatchNCE needs at least two patches per slice")
        q = F.normalize(out, dim=-1, eps=1e-12)
        k = F.normalize(src.detach(), dim=-1, eps=1e-12)
        if q.ndim == 2:
            q, k = q[None], k[None]
        logits = q @ k.transpose(-1, -2) / temperature  # (B, N, N)
        n = logits.shape[-1]
        target = torch.arange(n, device=logits.device).expand(logits.shape[0], n)
        losses.append(F.cross_entropy(logits.reshape(-1, n), target.reshape(-1)))
    return torch.stack(losses).mean()
