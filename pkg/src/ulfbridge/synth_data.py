"""Synthetic two-cohort phantom data and the Gaussian-mixture analytic testbed.

Slices are stored as raw little-endian float32 stacks (one file per subject and
contrast) described by a JSON manifest.
"""
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import IncompleteCohort, InvalidModel, ShapeError, SplitLeakage, TooSmall

__all__ = [
    "DegradationConfig",
    "make_phantom",
    "degrade",
    "compose_channels",
    "decompose_channels",
    "SliceSet",
    "DatasetManifest",
    "build_cohorts",
    "check_disjoint",
    "GaussianMixture",
    "gmm_logpdf",
    "gmm_score",
    "AnalyticScoreModel",
    "analytic_kl_grad_shift",
]

MANIFEST_VERSION = 1
COHORTS = ("source_pool", "target_pool", "paired_test")

# (T1, T2) intensities per tissue class
_TISSUES = {
    "rim": (0.0, 0.35),
    "white": (0.6, -0.35),
    "deep": (0.2, 0.05),
    "csf": (-0.6, 0.8),
}


@dataclass
class DegradationConfig:
    blur_sigma: float = 1.2
    noise_sigma: float = 0.08
    down_up_factor: int = 2
    bias_field_amp: float = 0.15
    contrast_scale: float = 0.7

    def __post_init__(self):
        for name in ("blur_sigma", "noise_sigma", "bias_field_amp", "contrast_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if int(self.down_up_factor) != self.down_up_factor or self.down_up_factor < 1:
            raise ValueError("down_up_factor must be an integer >= 1")

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 1, 0.0, 0.0)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _draw_geometry(rng):
    return {
        "center": rng.uniform(-0.03, 0.03, size=2),
        "radii": (rng.uniform(0.36, 0.44), rng.uniform(0.28, 0.36)),
        "theta": rng.uniform(-0.25, 0.25),
        "rim": rng.uniform(0.72, 0.82),
        "deep_offset": rng.uniform(0.28, 0.40),
        "deep_radii": (rng.uniform(0.08, 0.12), rng.uniform(0.06, 0.09)),
        "vent_offset": rng.uniform(0.06, 0.10),
        "vent_radii": (rng.uniform(0.12, 0.18), rng.uniform(0.03, 0.05)),
        "jitter": rng.uniform(-0.05, 0.05, size=(len(_TISSUES), 2)),
    }


def _render(geom, size, z):
    coords = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    shrink = np.sqrt(max(1.0 - 0.6 * z * z, 0.2))
    cy, cx = geom["center"]
    ry, rx = (r * shrink for r in geom["radii"])
    theta = geom["theta"]
    t1 = np.full((size, size), -1.0)
    t2 = np.full((size, size), -1.0)
    inten = {k: np.clip(np.add(v, geom["jitter"][i]), -1, 1) for i, (k, v) in enumerate(_TISSUES.items())}

    def paint(mask, tissue):
        t1[mask] = inten[tissue][0]
        t2[mask] = inten[tissue][1]

    paint(_ellipse(yy, xx, cy, cx, ry, rx, theta), "rim")
    rim = geom["rim"]
    paint(_ellipse(yy, xx, cy, cx, ry * rim, rx * rim, theta), "white")
    c, s = np.cos(theta), np.sin(theta)
    dry, drx = (r * shrink for r in geom["deep_radii"])
    for side in (-1, 1):
        off = side * geom["deep_offset"] * rx
        paint(_ellipse(yy, xx, cy + s * off, cx + c * off, dry, drx, theta), "deep")
    vry, vrx = geom["vent_radii"]
    vry, vrx = vry * shrink, vrx * shrink
    for side in (-1, 1):
        off = side * geom["vent_offset"] * rx
        paint(_ellipse(yy, xx, cy + s * off, cx + c * off, vry, vrx, theta), "csf")
    return t1.astype(np.float32), t2.astype(np.float32)


def make_phantom(seed, size=32, z=0.0):
    """Clean (T1, T2) slice pair of nested random ellipses.

    ``z`` in [-1, 1] is the axial position; the anatomy shrinks away from 0.
    Background is exactly -1.
    """
    if size < 32:
        raise TooSmall(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    return _render(_draw_geometry(rng), size, z)


def _bias_field(rng, size):
    coords = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    field = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(np.pi * (fy * yy + fx * xx) + phase)
    field -= field.mean()
    return field / max(np.abs(field).max(), 1e-12)


def _down_up(img, factor):
    h, w = img.shape
    if h % factor or w % factor:
        raise ShapeError(f"image size {img.shape} not divisible by {factor}")
    small = img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return ndimage.zoom(small, factor, order=1, mode="nearest", grid_mode=True)


def degrade(clean_pair, config=None, seed=0):
    """Source-domain degradation of a clean (T1, T2) pair.

    blur -> down/up-sampling -> smooth multiplicative bias -> contrast
    compression (foreground contrast divided by ``1 + contrast_scale``) ->
    additive Gaussian noise -> clip to [-1, 1].  Disabled steps
    are skipped entirely, so the identity configuration is exact.
    """
    config = config or DegradationConfig()
    rng = np.random.default_rng(seed)
    t1, t2 = (np.asarray(c, dtype=np.float64) for c in clean_pair)
    if t1.shape != t2.shape:
        raise ShapeError("T1 and T2 shapes differ")
    bias = 1.0 + config.bias_field_amp * _bias_field(rng, t1.shape[0]) if config.bias_field_amp else None
    out = []
    for img in (t1, t2):
        x = img.copy()
        if config.blur_sigma > 0:
            x = ndimage.gaussian_filter(x + 1.0, config.blur_sigma, mode="constant") - 1.0
        if config.down_up_factor > 1:
            x = _down_up(x, int(config.down_up_factor))
        if bias is not None:
            x = (x + 1.0) * bias - 1.0
        if config.contrast_scale > 0:
            x01 = (x + 1.0) / 2.0
            w = np.clip(x01 / 0.25, 0.0, 1.0)
            mean = (w * x01).sum() / max(w.sum(), 1e-12)
            shrink = config.contrast_scale / (1.0 + config.contrast_scale)
            x = x + 2.0 * shrink * w * (mean - x01)
        out.append(x)
    if config.noise_sigma > 0:
        out = [x + config.noise_sigma * rng.standard_normal(x.shape) for x in out]
    return tuple(np.clip(x, -1.0, 1.0).astype(np.float32) for x in out)


def compose_channels(t1, t2):
    """Stack into the 3-channel layout ``[T1, T2, T1]`` along axis -3."""
    t1 = np.asarray(t1) if not torch.is_tensor(t1) else t1
    t2 = np.asarray(t2) if not torch.is_tensor(t2) else t2
    if t1.shape != t2.shape:
        raise ShapeError(f"T1 shape {tuple(t1.shape)} != T2 shape {tuple(t2.shape)}")
    if torch.is_tensor(t1):
        return torch.stack([t1, t2, t1], dim=-3)
    return np.stack([t1, t2, t1], axis=-3)


def decompose_channels(x):
    """Inverse of :func:`compose_channels`: returns (T1, T2)."""
    if x.shape[-3] != 3:
        raise ShapeError("expected 3 channels on axis -3")
    return x[..., 0, :, :], x[..., 1, :, :]


@dataclass
class SliceSet:
    images: np.ndarray  # (N, 3, H, W)
    subject_ids: list
    cohort: list

    def __len__(self):
        return len(self.images)


def _read_stack(path, shape):
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ShapeError(f"{path}: expected {int(np.prod(shape))} floats, found {arr.size}")
    return arr.reshape(shape)


def _write_stack(path, arr):
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


@dataclass
class DatasetManifest:
    """In-memory view of a cohort manifest; file paths are relative to ``root``."""

    root: Path
    data: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            data = json.load(fh)
        check_disjoint(data)
        return cls(root=path.parent, data=data)

    @property
    def path(self):
        return self.root / "manifest.json"

    @property
    def cohorts(self):
        return self.data["cohorts"]

    def slices(self, cohort, clean=False):
        """Load one cohort as a :class:`SliceSet` of composed slices."""
        if cohort not in self.cohorts:
            raise IncompleteCohort(f"manifest has no cohort {cohort!r}")
        keys = ("t1_clean", "t2_clean") if clean else ("t1", "t2")
        images, subjects = [], []
        for entry in self.cohorts[cohort]:
            if not all(k in entry["files"] for k in keys):
                raise IncompleteCohort(f"{entry['subject_id']} lacks {keys} files")
            shape = tuple(entry["shape"])
            t1, t2 = (_read_stack(self.root / entry["files"][k], shape) for k in keys)
            images.append(compose_channels(t1, t2))
            subjects.extend([entry["subject_id"]] * shape[0])
        if images:
            images = np.concatenate(images, axis=0)
        else:
            images = np.zeros((0, 3, self.data["resolution"], self.data["resolution"]), np.float32)
        return SliceSet(images=images, subject_ids=subjects, cohort=[cohort] * len(subjects))


def check_disjoint(data):
    seen = {}
    for name, entries in data["cohorts"].items():
        for entry in entries:
            sid = entry["subject_id"]
            if sid in seen:
                raise SplitLeakage(f"subject {sid} appears in {seen[sid]!r} and {name!r}")
            seen[sid] = name


def build_cohorts(
    out_dir,
    n_subjects=85,
    slices_per_subject=8,
    size=32,
    split=None,
    seed=0,
    degradation=None,
):
    """Generate subject-disjoint source/target/paired-test cohorts on disk.

    ``split`` holds ``source_frac``, ``target_frac`` (fractions of the
    non-test subjects) and ``paired_test_count``.
    """
    split = {"source_frac": 0.5, "target_frac": 0.5, "paired_test_count": 5, **(split or {})}
    degradation = degradation or DegradationConfig()
    n_test = int(split["paired_test_count"])
    if n_subjects < 1 or slices_per_subject < 1:
        raise ValueError("need at least one subject and one slice per subject")
    if n_test < 0 or n_test > n_subjects:
        raise ValueError("paired_test_count inconsistent with n_subjects")
    if split["source_frac"] < 0 or split["target_frac"] < 0 or split["source_frac"] + split["target_frac"] > 1 + 1e-12:
        raise ValueError("source_frac + target_frac must lie in [0, 1]")
    n_train = n_subjects - n_test
    n_source = int(round(split["source_frac"] * n_train))
    n_target = min(int(round(split["target_frac"] * n_train)), n_train - n_source)

    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_subjects)
    assignment = (
        [("paired_test", i) for i in order[:n_test]]
        + [("source_pool", i) for i in order[n_test:n_test + n_source]]
        + [("target_pool", i) for i in order[n_test + n_source:n_test + n_source + n_target]]
    )
    subject_seeds = np.random.SeedSequence(seed).spawn(n_subjects)
    z = np.linspace(-0.6, 0.6, slices_per_subject) if slices_per_subject > 1 else np.zeros(1)

    cohorts = {name: [] for name in COHORTS}
    for cohort, i in sorted(assignment, key=lambda a: (COHORTS.index(a[0]), a[1])):
        sid = f"sub-{i:03d}"
        sub_seed = int(subject_seeds[i].generate_state(1)[0])
        geom = _draw_geometry(np.random.default_rng(sub_seed))
        clean = [_render(geom, size, zi) for zi in z]
        files = {}
        stacks = {}
        if cohort in ("source_pool", "paired_test"):
            deg = [degrade(pair, degradation, seed=[sub_seed, j]) for j, pair in enumerate(clean)]
            stacks["t1"] = np.stack([d[0] for d in deg])
            stacks["t2"] = np.stack([d[1] for d in deg])
        if cohort == "target_pool":
            stacks["t1"] = np.stack([c[0] for c in clean])
            stacks["t2"] = np.stack([c[1] for c in clean])
        if cohort == "paired_test":
            stacks["t1_clean"] = np.stack([c[0] for c in clean])
            stacks["t2_clean"] = np.stack([c[1] for c in clean])
        os.makedirs(out_dir / cohort, exist_ok=True)
        for key, arr in stacks.items():
            rel = f"{cohort}/{sid}_{key}.f32"
            _write_stack(out_dir / rel, arr)
            files[key] = rel
        cohorts[cohort].append(
            {"subject_id": sid, "shape": [slices_per_subject, size, size], "files": files}
        )

    data = {
        "version": MANIFEST_VERSION,
        "resolution": size,
        "dtype": "<f4",
        "cohorts": cohorts,
        "seeds": {"base": int(seed)},
        "degradation": asdict(degradation),
        "split": split,
    }
    check_disjoint(data)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return DatasetManifest(root=out_dir, data=data)


# --- analytic Gaussian-mixture testbed ---------------------------------------


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64)
        k, d = self.means.shape
        self.covariances = cov.reshape(k, d, d)
        if self.weights.shape != (k,) or np.any(self.weights < 0):
            raise InvalidModel("weights must be nonnegative with one entry per component")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidModel("weights must sum to 1")
        for c in self.covariances:
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise InvalidModel("covariances must be symmetric positive-definite")

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64).reshape(len(mean), len(mean))
        return cls(np.ones(1), mean[None], cov[None])

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k in range(len(self.weights)):
            sel = comp == k
            out[sel] = rng.multivariate_normal(self.means[k], self.covariances[k], size=sel.sum())
        return out


def _diffused_components(gmm, tau, schedule):
    g = schedule.gamma[tau]
    s = schedule.varsigma[tau]
    means = g * gmm.means
    covs = g * g * gmm.covariances + s * s * np.eye(gmm.dim)
    return means, covs


def _component_terms(gmm, u, tau, schedule):
    means, covs = _diffused_components(gmm, tau, schedule)
    log_terms, grads = [], []
    for w, mu, cov in zip(gmm.weights, means, covs):
        prec = np.linalg.inv(cov)
        diff = u - mu
        maha = np.einsum("...i,ij,...j->...", diff, prec, diff)
        _, logdet = np.linalg.slogdet(2 * np.pi * cov)
        log_terms.append(np.log(w) - 0.5 * (maha + logdet) if w > 0 else np.full(maha.shape, -np.inf))
        grads.append(-diff @ prec)
    return np.stack(log_terms, axis=-1), np.stack(grads, axis=-2)


def gmm_logpdf(gmm, u, tau, schedule):
    """Log-density of the mixture after VP diffusion to level ``tau``."""
    u = np.asarray(u, dtype=np.float64)
    log_terms, _ = _component_terms(gmm, u, int(tau), schedule)
    top = log_terms.max(axis=-1, keepdims=True)
    return (top + np.log(np.exp(log_terms - top).sum(axis=-1, keepdims=True)))[..., 0]


def gmm_score(gmm, u, tau, schedule):
    """Closed-form score of the VP-diffused mixture at points ``u`` (..., d)."""
    if int(tau) < 0 or int(tau) > schedule.T:
        raise ValueError(f"level {tau} out of range")
    u = np.asarray(u, dtype=np.float64)
    log_terms, grads = _component_terms(gmm, u, int(tau), schedule)
    resp = np.exp(log_terms - log_terms.max(axis=-1, keepdims=True))
    resp /= resp.sum(axis=-1, keepdims=True)
    return np.einsum("...k,...kd->...d", resp, grads)


class AnalyticScoreModel:
    """Drop-in for :class:`~ulfbridge.diffusion.ScoreModel` backed by closed-form
    mixture scores; inputs are (B, d) tensors."""

    def __init__(self, gmm, schedule, role="teacher_real", frozen=True):
        self.gmm = gmm
        self.schedule = schedule
        self.role = role
        self.frozen = frozen

    def score_np(self, u, tau):
        u = np.asarray(u, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau), u.shape[:1])
        out = np.empty_like(u)
        for level in np.unique(tau):
            sel = tau == level
            out[sel] = gmm_score(self.gmm, u[sel], int(level), self.schedule)
        return out

    def eps(self, u, tau):
        tau_np = np.broadcast_to(torch.as_tensor(tau).cpu().numpy(), (u.shape[0],))
        s = self.score_np(u.detach().cpu().numpy(), tau_np)
        eps = -self.schedule.varsigma[tau_np][:, None] * s
        return torch.as_tensor(eps, dtype=u.dtype, device=u.device)

    def parameters(self):
        return iter(())


def analytic_kl_grad_shift(m):
    """d/dm KL(N(m, 1) || N(0, 1)) = m."""
    return m
