"""Training-pair sampling and intensity-only augmentation."""
import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import PatchSpec
from .errors import ConfigError, DataError
from .losses import PairItem, PairKind
from .model import tile_starts

BLUR_TRUNCATE = 3.0
SHARPEN_SIGMA = 1.0


class AugOp(str, enum.Enum):
    BLUR = "blur"
    SHARPEN = "sharpen"
    SCALE = "scale"
    NOISE = "noise"


class Positioning(str, enum.Enum):
    RANDOM = "random"
    GRID = "grid"


_ORDER = (AugOp.BLUR, AugOp.SHARPEN, AugOp.SCALE, AugOp.NOISE)


@dataclass(frozen=True)
class AugmentConfig:
    blur_sigma_range: tuple = (0.0, 1.0)
    sharpen_strength_range: tuple = (0.0, 1.0)
    intensity_scale_range: tuple = (0.8, 1.2)
    noise_std_range: tuple = (0.0, 0.1)
    enabled_ops: tuple = ("blur", "sharpen", "scale", "noise")

    def __post_init__(self):
        object.__setattr__(self, "enabled_ops", tuple(AugOp(op).value for op in self.enabled_ops))
        for name in ("blur_sigma_range", "sharpen_strength_range", "intensity_scale_range", "noise_std_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self):
        for name in ("blur_sigma_range", "sharpen_strength_range", "intensity_scale_range", "noise_std_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"augment.{name} must be [low, high] with low <= high, got {rng!r}")
        if self.blur_sigma_range[0] < 0 or self.noise_std_range[0] < 0:
            raise ConfigError("augment blur sigma and noise std must be non-negative")
        return self

    def to_dict(self):
        return {
            "blur_sigma_range": list(self.blur_sigma_range),
            "sharpen_strength_range": list(self.sharpen_strength_range),
            "intensity_scale_range": list(self.intensity_scale_range),
            "noise_std_range": list(self.noise_std_range),
            "enabled_ops": list(self.enabled_ops),
        }


@dataclass(frozen=True)
class PairPolicy:
    aug_same_fraction: float = 0.5
    patch_positioning: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "patch_positioning", Positioning(self.patch_positioning).value)

    def validate(self):
        if not 0.0 <= self.aug_same_fraction <= 1.0:
            raise ConfigError(f"pairs.aug_same_fraction must lie in [0, 1], got {self.aug_same_fraction}")
        return self

    def to_dict(self):
        return {"aug_same_fraction": self.aug_same_fraction, "patch_positioning": self.patch_positioning}


def gaussian_blur(x, sigma):
    if sigma <= 0:
        return np.array(x, copy=True)
    return ndimage.gaussian_filter(x, sigma, mode="reflect", truncate=BLUR_TRUNCATE)


def augment(patch, config, rng):
    """Apply the enabled image-quality perturbations in a fixed order.

    Accepts a Volume or an array and returns the same kind.  Only
    intensities change; voxel positions never move.
    """
    config.validate()
    vol = patch if hasattr(patch, "voxels") else None
    x = vol.voxels if vol is not None else np.asarray(patch)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    out = x.astype(np.float64)
    ops = set(config.enabled_ops)
    for op in _ORDER:
        if op.value not in ops:
            continue
        if op is AugOp.BLUR:
            out = gaussian_blur(out, rng.uniform(*config.blur_sigma_range))
        elif op is AugOp.SHARPEN:
            s = rng.uniform(*config.sharpen_strength_range)
            if s != 0:
                out = out + s * (out - gaussian_blur(out, SHARPEN_SIGMA))
        elif op is AugOp.SCALE:
            out = out * rng.uniform(*config.intensity_scale_range)
        else:
            out = out + rng.normal(0.0, rng.uniform(*config.noise_std_range), size=out.shape)
    out = out.astype(dtype, copy=False)
    if not ops:
        out = x.copy()
    if vol is not None:
        return type(vol)(out, vol.spacing)
    return out


def draw_patch_spec(shape, patch_size, positioning, rng):
    if any(n < p for n, p in zip(shape, patch_size)):
        raise DataError(f"volume shape {shape} is smaller than patch size {patch_size}")
    if Positioning(positioning) is Positioning.GRID:
        origin = []
        for n, p in zip(shape, patch_size):
            starts = tile_starts(n, p, p)
            origin.append(starts[int(rng.integers(len(starts)))])
    else:
        origin = [int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch_size)]
    return PatchSpec(tuple(int(o) for o in origin), tuple(int(p) for p in patch_size))


def sample_pair(pool, policy, aug, patch_size, rng):
    """One training pair: two augmentations of one patch, or one region in two images."""
    train = pool.training
    if not train:
        raise DataError("cannot sample pairs from an empty training set")
    same = rng.random() < policy.aug_same_fraction or len(train) < 2
    if same:
        s = train[int(rng.integers(len(train)))]
        spec = draw_patch_spec(s.volume.shape, patch_size, policy.patch_positioning, rng)
        x = s.volume.voxels[spec.slices()]
        y = s.mask.voxels[spec.slices()]
        return PairItem(augment(x, aug, rng), y, augment(x, aug, rng), y, PairKind.AUG_SAME, spec, spec)
    i, j = (int(k) for k in rng.choice(len(train), size=2, replace=False))
    a, b = train[i], train[j]
    common = tuple(min(m, n) for m, n in zip(a.volume.shape, b.volume.shape))
    spec = draw_patch_spec(common, patch_size, policy.patch_positioning, rng)
    sl = spec.slices()
    return PairItem(
        augment(a.volume.voxels[sl], aug, rng), a.mask.voxels[sl],
        augment(b.volume.voxels[sl], aug, rng), b.mask.voxels[sl],
        PairKind.CROSS_IMAGE, spec, spec,
    )


def sample_single(pool, policy, aug, patch_size, rng):
    """(augmented patch, mask crop) from one training sample."""
    train = pool.training
    if not train:
        raise DataError("cannot sample from an empty training set")
    s = train[int(rng.integers(len(train)))]
    spec = draw_patch_spec(s.volume.shape, patch_size, policy.patch_positioning, rng)
    return augment(s.volume.voxels[spec.slices()], aug, rng), s.mask.voxels[spec.slices()]
