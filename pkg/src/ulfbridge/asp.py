"""Anatomical structure preservation: soft foreground masks, trimap-weighted
BCE and a soft NSD-style boundary penalty on an exact distance transform."""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidConfig, ShapeError, TooSmall

__all__ = [
    "ASPConfig",
    "Trimap",
    "EMPTY_DISTANCE",
    "normalize01",
    "soft_mask",
    "make_trimap",
    "masked_bce",
    "boundary_map",
    "distance_transform",
    "nsd_penalty",
    "ASPTargets",
    "asp_targets",
    "asp_loss",
]

# distance reported everywhere when the reference boundary is empty
EMPTY_DISTANCE = 1.0e6


@dataclass(frozen=True)
class ASPConfig:
    tau_m: float = 0.15
    s_m: float = 0.05
    tau_fg: float = 0.7
    tau_bg: float = 0.3
    t_tol: float = 2.0
    gamma_soft: float = 0.5
    log_clamp: float = 1e-6

    def __post_init__(self):
        for name in ("tau_m", "tau_fg", "tau_bg"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1)")
        if self.tau_bg >= self.tau_fg:
            raise InvalidConfig("tau_bg must be below tau_fg")
        if self.s_m <= 0 or self.gamma_soft <= 0 or self.log_clamp <= 0:
            raise InvalidConfig("s_m, gamma_soft and log_clamp must be positive")
        if self.t_tol < 0:
            raise InvalidConfig("t_tol must be nonnegative")


@dataclass
class Trimap:
    m_core: torch.Tensor
    m_bg: torch.Tensor

    @property
    def unknown(self):
        return 1.0 - self.m_core - self.m_bg


def normalize01(x):
    return (torch.clamp(torch.as_tensor(x), -1.0, 1.0) + 1.0) / 2.0


def soft_mask(x01, tau_m=0.15, s_m=0.05):
    """``sigmoid((x01 - tau_m) / s_m)``.

    Inputs with a channel axis, (C, H, W) or (B, C, H, W), are averaged over
    channels first so one mask is produced per slice.
    """
    if s_m <= 0:
        raise InvalidConfig(f"s_m must be positive, got {s_m}")
    x01 = torch.as_tensor(x01)
    if x01.ndim >= 3:
        x01 = x01.mean(dim=-3)
    return torch.sigmoid((x01 - tau_m) / s_m)


def make_trimap(m_in, tau_fg=0.7, tau_bg=0.3):
    if not tau_bg < tau_fg:
        raise InvalidConfig("trimap thresholds need tau_bg < tau_fg")
    m_in = torch.as_tensor(m_in)
    return Trimap(m_core=(m_in > tau_fg).to(m_in.dtype), m_bg=(m_in < tau_bg).to(m_in.dtype))


def masked_bce(pred, target, weight, log_clamp=1e-6):
    """Weighted BCE normalized by the weight mass; 0 for an empty region.

    Leading batch dimensions (anything before the last two axes) are reduced
    separately and averaged.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype).expand_as(pred)
    weight = torch.as_tensor(weight, dtype=pred.dtype)
    if weight.shape != pred.shape:
        raise ShapeError(f"weight shape {tuple(weight.shape)} != pred shape {tuple(pred.shape)}")
    p = pred.clamp(log_clamp, 1.0 - log_clamp)
    ce = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    dims = tuple(range(max(pred.ndim - 2, 0), pred.ndim))
    num = (weight * ce).sum(dim=dims)
    den = weight.sum(dim=dims).clamp(min=1.0)
    return (num / den).mean()


def _as_maps(mask):
    mask = torch.as_tensor(mask)
    if mask.ndim < 2:
        raise ShapeError("mask must be at least 2-D")
    if mask.shape[-1] < 3 or mask.shape[-2] < 3:
        raise TooSmall(f"boundary extraction needs at least 3x3, got {tuple(mask.shape[-2:])}")
    return mask


def boundary_map(mask):
    """Soft inner morphological gradient ``|mask - minpool3x3(mask)|``.

    Pixels outside the image are ignored by the min-pool.
    """
    mask = _as_maps(mask)
    lead = mask.shape[:-2]
    flat = mask.reshape((-1, 1) + mask.shape[-2:])
    eroded = -F.max_pool2d(-flat, kernel_size=3, stride=1, padding=1)
    return (flat - eroded).abs().reshape(lead + mask.shape[-2:])


def _edt_1d_columns(boundary):
    """Distance along axis 0 to the nearest True entry in each column (inf if none)."""
    h, w = boundary.shape
    inf = np.inf
    d = np.full((h, w), inf)
    run = np.full(w, inf)
    for i in range(h):
        run = np.where(boundary[i], 0.0, run + 1.0)
        d[i] = run
    run = np.full(w, inf)
    for i in range(h - 1, -1, -1):
        run = np.where(boundary[i], 0.0, run + 1.0)
        d[i] = np.minimum(d[i], run)
    return d


def _lower_envelope_row(f):
    """Squared-distance transform of one row of sampled costs ``f``.

    Minimizes ``(q - p)^2 + f[p]`` over p with the parabola lower-envelope
    sweep; exact for integer inputs.
    """
    n = len(f)
    out = np.empty(n)
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        out.fill(np.inf)
        return out
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    v[0] = finite[0]
    z[0] = -np.inf
    z[1] = np.inf
    for q in finite[1:]:
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def distance_transform(boundary_binary):
    """Exact Euclidean distance from every pixel to the nearest boundary pixel.

    Separable two-pass algorithm: column distances, then a per-row
    lower-envelope pass over squared distances.  An empty boundary yields
    ``EMPTY_DISTANCE`` everywhere.
    """
    b = np.asarray(boundary_binary, dtype=bool)
    if b.ndim != 2:
        raise ShapeError("distance_transform expects a 2-D array")
    if not b.any():
        return np.full(b.shape, EMPTY_DISTANCE)
    col = _edt_1d_columns(b)
    g2 = col * col
    sq = np.stack([_lower_envelope_row(row) for row in g2])
    return np.sqrt(sq)


def nsd_penalty(b_out, d, t_tol=2.0, gamma_soft=0.5):
    """``1 - sum(b * sigmoid((t - d) / gamma)) / sum(b)``; 0 when ``sum(b) == 0``.

    Leading batch dimensions are reduced per slice and averaged.
    """
    if gamma_soft <= 0:
        raise InvalidConfig("gamma_soft must be positive")
    b_out = torch.as_tensor(b_out)
    d = torch.as_tensor(d, dtype=b_out.dtype, device=b_out.device)
    if d.shape != b_out.shape:
        raise ShapeError(f"distance shape {tuple(d.shape)} != boundary shape {tuple(b_out.shape)}")
    gate = torch.sigmoid((t_tol - d) / gamma_soft)
    dims = tuple(range(max(b_out.ndim - 2, 0), b_out.ndim))
    mass = b_out.sum(dim=dims)
    inlier = (b_out * gate).sum(dim=dims)
    ratio = torch.where(mass > 0, inlier / torch.where(mass > 0, mass, torch.ones_like(mass)), torch.ones_like(mass))
    return (1.0 - ratio).mean()


@dataclass
class ASPTargets:
    """Quantities that depend only on the source slice."""

    trimap: Trimap
    distance: torch.Tensor


def asp_targets(x, config=ASPConfig()):
    """Trimap and boundary distance field of the source slice(s) (no gradient)."""
    with torch.no_grad():
        x = torch.as_tensor(x)
        m_in = soft_mask(normalize01(x), config.tau_m, config.s_m)
        trimap = make_trimap(m_in, config.tau_fg, config.tau_bg)
        hard = (m_in > 0.5).to(m_in.dtype)
        edges = (boundary_map(hard) > 0).cpu().numpy()
        lead = edges.shape[:-2]
        flat = edges.reshape((-1,) + edges.shape[-2:])
        dist = np.stack([distance_transform(e) for e in flat]).reshape(lead + edges.shape[-2:])
    return ASPTargets(trimap=trimap, distance=torch.as_tensor(dist, dtype=m_in.dtype))


def asp_loss(x, y_hat, config=ASPConfig(), targets=None):
    """ASP regularizer between source ``x`` and prediction ``y_hat``.

    Returns ``(total, {"core_bce", "bg_bce", "boundary"})``; differentiable in
    ``y_hat``.  ``targets`` may carry precomputed :func:`asp_targets` of ``x``.
    """
    y_hat = torch.as_tensor(y_hat)
    if x is not None and torch.as_tensor(x).shape != y_hat.shape:
        raise ShapeError("x and y_hat shapes differ")
    if targets is None:
        targets = asp_targets(x, config)
    m_out = soft_mask(normalize01(y_hat), config.tau_m, config.s_m)
    trimap = targets.trimap
    core = masked_bce(m_out, 1.0, trimap.m_core.to(m_out.dtype), config.log_clamp)
    bg = masked_bce(m_out, 0.0, trimap.m_bg.to(m_out.dtype), config.log_clamp)
    boundary = nsd_penalty(boundary_map(m_out), targets.distance.to(m_out.dtype), config.t_tol, config.gamma_soft)
    total = core + bg + boundary
    return total, {"core_bce": core, "bg_bce": bg, "boundary": boundary}
