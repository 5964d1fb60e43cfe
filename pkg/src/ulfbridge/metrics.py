"""Evaluation: PSNR / MS-SSIM with subject-wise aggregation, and FID / KID in the
feature space of a frozen target-domain autoencoder."""
import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d
from torch import nn

from . import checkpoint as ckpt
from .errors import ContaminatedTeacherData, CorruptCheckpoint, IncompleteCohort, NeedSamples, NumericalError, ShapeError, TooSmall

__all__ = [
    "psnr",
    "ms_ssim",
    "MS_SSIM_WEIGHTS",
    "FeatureEncoder",
    "EncoderConfig",
    "train_feature_encoder",
    "feature_stats",
    "fid",
    "kid",
    "aggregate_subjectwise",
    "evaluate_paired",
    "evaluate_unpaired",
    "save_encoder",
    "load_encoder",
]

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def psnr(a, b, max_val=2.0, cap_db=100.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float(cap_db)
    return float(min(20.0 * np.log10(max_val) - 10.0 * np.log10(mse), cap_db))


def _gaussian_window(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_terms(a, b, window, c1, c2):
    def filt(img):
        return convolve2d(img, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a ** 2
    s_bb = filt(b * b) - mu_b ** 2
    s_ab = filt(a * b) - mu_a * mu_b
    cs_map = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(lum * cs_map)), float(np.mean(cs_map))


def _pool2(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _default_pyramid(size):
    for scales in (5, 4, 3):
        if size >= 2 ** (scales - 1) * 11:
            return scales, 11
    window = int(size // 4)
    window -= 1 - window % 2
    if window < 3:
        raise TooSmall(f"image of size {size} too small for a 3-scale pyramid")
    return 3, window


def ms_ssim(a, b, scales=None, weights=None, window=None, sigma=1.5, k1=0.01, k2=0.03):
    """Multi-scale SSIM of images in [-1, 1] (remapped to [0, 1] internally).

    Accepts (H, W) or (C, H, W); channels are averaged.  By default the
    standard 5-scale / 11-tap configuration is used when the image allows it,
    otherwise the pyramid is cut to 3 scales with a narrower window and the
    leading weights renormalized.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ms_ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ms_ssim(x, y, scales, weights, window, sigma, k1, k2) for x, y in zip(a, b)]))
    if a.ndim != 2:
        raise ShapeError("ms_ssim expects (H, W) or (C, H, W)")
    size = min(a.shape)
    if scales is None and window is None:
        scales, window = _default_pyramid(size)
    scales = scales or 3
    window = window or 11
    if size < 2 ** (scales - 1) * window:
        raise TooSmall(f"{scales}-scale pyramid with a {window}-tap window needs >= {2 ** (scales - 1) * window} px")
    if weights is None:
        weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != scales:
        raise ValueError("need one weight per scale")
    weights = weights / weights.sum()
    win = _gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    x, y = (a + 1.0) / 2.0, (b + 1.0) / 2.0
    value = 1.0
    for j in range(scales):
        ssim_j, cs_j = _ssim_terms(x, y, win, c1, c2)
        term = ssim_j if j == scales - 1 else cs_j
        value *= max(term, 0.0) ** weights[j]
        x, y = _pool2(x), _pool2(y)
    return float(value)


# --- frozen target-domain feature encoder ------------------------------------


class FeatureEncoder(nn.Module):
    """Convolutional autoencoder whose 64-d bottleneck is the evaluation feature space."""

    def __init__(self, channels=3, size=32, feature_dim=64, width=16):
        super().__init__()
        if size % 8:
            raise ShapeError("encoder input size must be divisible by 8")
        self.size = size
        self.feature_dim = feature_dim
        self.width = width
        r = size // 8
        self.enc = nn.Sequential(
            nn.Conv2d(channels, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(), nn.Linear(4 * width * r * r, feature_dim),
        )
        self.dec = nn.Sequential(
            nn.Linear(feature_dim, 4 * width * r * r), nn.Unflatten(1, (4 * width, r, r)), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(4 * width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(2 * width, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(width, channels, 4, 2, 1), nn.Tanh(),
        )
        self.frozen = False

    def forward(self, x):
        return self.dec(self.enc(x))

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def features(self, images, batch_size=256):
        """(N, 3, H, W) array -> (N, feature_dim) float64 features."""
        images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.enc(images[i:i + batch_size]).double().numpy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.feature_dim))


@dataclass
class EncoderConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    feature_dim: int = 64
    seed: int = 0


def train_feature_encoder(target_pool, config=None):
    """Train the reconstruction autoencoder on target-pool slices only, then freeze."""
    config = config or EncoderConfig()
    if hasattr(target_pool, "slices") and not hasattr(target_pool, "images"):
        target_pool = target_pool.slices("target_pool")
    bad = sorted({c for c in target_pool.cohort if c != "target_pool"})
    if bad:
        raise ContaminatedTeacherData(f"encoder data contains cohorts {bad}")
    images = torch.as_tensor(target_pool.images, dtype=torch.float32)
    if len(images) < 2:
        raise NeedSamples("need at least two target slices")
    torch.manual_seed(config.seed)
    enc = FeatureEncoder(images.shape[1], images.shape[-1], config.feature_dim)
    opt = torch.optim.Adam(enc.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    enc.log = []
    for step in range(config.steps):
        idx = torch.randint(0, len(images), (config.batch_size,), generator=gen)
        batch = images[idx]
        loss = F.mse_loss(enc(batch), batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        enc.log.append(loss.item())
    return enc.freeze()


# --- distribution distances ---------------------------------------------------


def feature_stats(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise NeedSamples("feature statistics need at least two samples")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def _psd_sqrt(mat, what):
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max()) if vals.size else 1.0)
    if vals.min() < -tol:
        raise NumericalError(f"{what} has a negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a, stats_b):
    """Fréchet distance between Gaussians given as ``(mean, covariance)`` pairs."""
    mu_a, cov_a = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in stats_a)
    mu_b, cov_b = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in stats_b)
    d = mu_a.shape[0]
    cov_a = cov_a.reshape(d, -1) if cov_a.size == d * d else cov_a
    cov_b = cov_b.reshape(mu_b.shape[0], -1) if cov_b.size == mu_b.shape[0] ** 2 else cov_b
    if mu_b.shape != (d,) or cov_a.shape != (d, d) or cov_b.shape != (d, d):
        raise ShapeError("FID statistics have mismatched dimensions")
    root_a = _psd_sqrt(cov_a, "covariance A")
    _psd_sqrt(cov_b, "covariance B")
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    vals = np.linalg.eigvalsh(middle)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max()))
    if vals.min() < -tol:
        raise NumericalError(f"product covariance has a negative eigenvalue {vals.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def kid(features_a, features_b):
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y / dim + 1)^3``."""
    x = np.asarray(features_a, dtype=np.float64)
    y = np.asarray(features_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError("KID features must be (n, d) arrays of equal width")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise NeedSamples("KID needs at least two samples per set")
    dim = x.shape[1]
    k_xx = (x @ x.T / dim + 1.0) ** 3
    k_yy = (y @ y.T / dim + 1.0) ** 3
    k_xy = (x @ y.T / dim + 1.0) ** 3
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


# --- protocol -------------------------------------------------------------------


def aggregate_subjectwise(per_slice):
    """``{subject: [slice values]}`` -> (per-subject means, mean over subjects)."""
    per_subject = {sid: float(np.mean(v)) for sid, v in per_slice.items()}
    if not per_subject:
        raise IncompleteCohort("no subjects to aggregate")
    return per_subject, float(np.mean(list(per_subject.values())))


def _translate(translator, images, batch_size=64):
    out = [np.asarray(translator(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def _t1(x):
    return 0.5 * (x[0] + x[2])


def evaluate_paired(translator, manifest, use_clean_inputs=False, cohort="paired_test"):
    """Per-contrast PSNR and MS-SSIM against clean references, slice-mean per
    subject then mean over subjects.

    ``translator`` maps a (N, 3, H, W) float32 array to translated slices.  The
    translated T1 is the mean of output channels 0 and 2.
    """
    refs = manifest.slices(cohort, clean=True)
    inputs = refs if use_clean_inputs else manifest.slices(cohort, clean=False)
    if len(refs) == 0:
        raise IncompleteCohort(f"{cohort} is empty")
    outputs = _translate(translator, inputs.images)
    per_slice = defaultdict(lambda: defaultdict(list))
    for sid, out, ref in zip(refs.subject_ids, outputs, refs.images):
        per_slice["psnr_t1"][sid].append(psnr(_t1(out), ref[0]))
        per_slice["psnr_t2"][sid].append(psnr(out[1], ref[1]))
        per_slice["ms_ssim_t1"][sid].append(ms_ssim(_t1(out), ref[0]))
        per_slice["ms_ssim_t2"][sid].append(ms_ssim(out[1], ref[1]))
    report = {}
    for metric in ("psnr_t1", "ms_ssim_t1", "psnr_t2", "ms_ssim_t2"):
        per_subject, aggregate = aggregate_subjectwise(per_slice[metric])
        report[metric] = {"per_subject": per_subject, "aggregate": aggregate}
    return report


def evaluate_unpaired(translator, source_images, target_images, encoder):
    """FID and KID of translated source slices against the target pool."""
    if not getattr(encoder, "frozen", False):
        raise ValueError("evaluation encoder must be frozen")
    source_images = getattr(source_images, "images", source_images)
    target_images = getattr(target_images, "images", target_images)
    outputs = _translate(translator, np.asarray(source_images)) if translator is not None else source_images
    fa = encoder.features(outputs)
    fb = encoder.features(target_images)
    return {
        "fid": {"per_subject": {}, "aggregate": fid(feature_stats(fa), feature_stats(fb))},
        "kid": {"per_subject": {}, "aggregate": kid(fa, fb)},
    }


def save_encoder(path, encoder):
    meta = {
        "kind": "feature_encoder",
        "channels": encoder.enc[0].in_channels,
        "size": encoder.size,
        "feature_dim": encoder.feature_dim,
        "width": encoder.width,
        "frozen": encoder.frozen,
    }
    return ckpt.save_checkpoint(path, ckpt.module_arrays("encoder", encoder), meta)


def load_encoder(path):
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "feature_encoder":
        raise CorruptCheckpoint(f"{path} is not a feature-encoder checkpoint")
    enc = FeatureEncoder(meta["channels"], meta["size"], meta["feature_dim"], meta["width"])
    ckpt.load_module_arrays(enc, arrays, "encoder")
    return enc.freeze() if meta["frozen"] else enc
