"""Desk-scale synthetic lesion datasets.

Images are smoothed-noise backgrounds with additive bright ellipsoidal
blobs.  Labeled samples come from a narrow acquisition setting; unlabeled
and test samples each draw a shift level ``s ~ U(0, domain_shift)`` that
lowers lesion contrast, blurs, raises noise and changes the background
texture scale, so the labeled set is far less diverse than the rest.
"""
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .data import DatasetPool, Mask, Provenance, Sample, Volume, normalize_intensity
from .errors import ConfigError

_SPLIT_CODES = {"labeled": 0, "unlabeled": 1, "test": 2}


@dataclass(frozen=True)
class SynthConfig:
    n_labeled: int = 5
    n_unlabeled: int = 100
    n_test: int = 20
    image_size: tuple = (64, 64)
    lesion_count: tuple = (1, 4)
    lesion_radius: tuple = (3.0, 7.0)
    domain_shift: float = 1.0
    noise: float = 0.15

    def validate(self):
        for name in ("n_labeled", "n_unlabeled", "n_test"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(f"synth.{name} must be a non-negative integer, got {v!r}")
        if len(self.image_size) not in (2, 3) or any(int(n) < 16 for n in self.image_size):
            raise ConfigError(f"synth.image_size must be 2 or 3 axes of at least 16, got {self.image_size!r}")
        lo, hi = self.lesion_count
        if not 1 <= lo <= hi:
            raise ConfigError(f"synth.lesion_count must satisfy 1 <= low <= high, got {self.lesion_count!r}")
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi or 2 * rhi >= min(self.image_size):
            raise ConfigError(f"synth.lesion_radius out of range: {self.lesion_radius!r}")
        if self.domain_shift < 0 or self.noise < 0:
            raise ConfigError("synth.domain_shift and synth.noise must be non-negative")
        return self

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class SynthResult(NamedTuple):
    pool: DatasetPool
    test: list
    hidden_truth: dict  # unlabeled id -> Mask, evaluation only


def _lesion_mask(rng, shape, cfg):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    mask = np.zeros(shape, dtype=bool)
    rlo, rhi = cfg.lesion_radius
    count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    for _ in range(count):
        radii = rng.uniform(rlo, rhi, size=len(shape))
        margin = float(rhi) + 1.0
        center = [rng.uniform(margin, n - 1 - margin) for n in shape]
        if len(shape) == 2:
            theta = rng.uniform(0.0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
            dy, dx = grids[0] - center[0], grids[1] - center[1]
            u, v = c * dy + s * dx, -s * dy + c * dx
            r2 = (u / radii[0]) ** 2 + (v / radii[1]) ** 2
        else:
            r2 = sum(((g - c0) / r) ** 2 for g, c0, r in zip(grids, center, radii))
        mask |= r2 <= 1.0
    return mask


def render_sample(rng, cfg, shift):
    """One (image, mask) pair at domain-shift level ``shift`` (0 = labeled setting)."""
    shape = tuple(int(n) for n in cfg.image_size)
    mask = _lesion_mask(rng, shape, cfg)
    bg_sigma = 6.0 / (1.0 + 2.0 * shift)
    bg = ndimage.gaussian_filter(rng.standard_normal(shape), bg_sigma, mode="reflect")
    bg /= bg.std() + 1e-12
    bg *= 0.25 * (1.0 + 0.8 * shift)
    contrast = rng.uniform(0.9, 1.1) * (1.0 - 0.5 * shift)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.7, mode="constant")
    img = bg + contrast * soft
    blur = 1.2 * shift * rng.uniform(0.5, 1.0)
    if blur > 0:
        img = ndimage.gaussian_filter(img, blur, mode="reflect")
    img = img + rng.normal(0.0, cfg.noise * (1.0 + shift), size=shape)
    gain = 1.0 + shift * rng.uniform(-0.5, 0.5)
    img = img * gain
    return normalize_intensity(img).astype(np.float32), mask.astype(np.uint8)


def synthesize_dataset(cfg, seed):
    """Deterministic synthetic pool, test set and hidden unlabeled truth."""
    cfg.validate()
    labeled, unlabeled, test, hidden = [], [], [], {}

    def draw(split, k):
        rng = np.random.default_rng([int(seed), _SPLIT_CODES[split], k])
        shift = 0.0 if split == "labeled" else float(rng.uniform(0.0, cfg.domain_shift))
        return render_sample(rng, cfg, shift)

    for k in range(cfg.n_labeled):
        img, m = draw("labeled", k)
        labeled.append(Sample(f"lab{k:04d}", Volume(img), Mask(m), Provenance.LABELED))
    for k in range(cfg.n_unlabeled):
        img, m = draw("unlabeled", k)
        sid = f"unl{k:04d}"
        unlabeled.append(Sample(sid, Volume(img)))
        hidden[sid] = Mask(m)
    for k in range(cfg.n_test):
        img, m = draw("test", k)
        test.append(Sample(f"test{k:04d}", Volume(img), Mask(m), Provenance.LABELED))
    return SynthResult(DatasetPool(labeled, unlabeled), test, hidden)
