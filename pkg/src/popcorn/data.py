"""Samples, dataset pools and patch extraction."""
import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DataError, ShapeError


class Provenance(str, enum.Enum):
    LABELED = "labeled"
    PSEUDO = "pseudo"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim not in (2, 3):
            raise ShapeError(f"volumes are 2D or 3D, got rank {vox.ndim}")
        if min(vox.shape) < 1:
            raise ShapeError(f"empty axis in shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise DataError("volume contains non-finite voxels")
        object.__setattr__(self, "voxels", vox)
        spacing = self.spacing if self.spacing is not None else (1.0,) * vox.ndim
        if len(spacing) != vox.ndim:
            raise ShapeError("spacing rank does not match volume rank")
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def ndim(self):
        return self.voxels.ndim


@dataclass(frozen=True)
class Mask:
    voxels: np.ndarray

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.dtype != np.uint8:
            if not np.all((vox == 0) | (vox == 1)):
                raise DataError("mask values must be 0 or 1")
            vox = vox.astype(np.uint8)
        elif vox.max(initial=0) > 1:
            raise DataError("mask values must be 0 or 1")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class Sample:
    id: str
    volume: Volume
    mask: Optional[Mask] = None
    provenance: Provenance = Provenance.UNLABELED
    pseudo_cycle: Optional[int] = None

    def __post_init__(self):
        prov = Provenance(self.provenance)
        object.__setattr__(self, "provenance", prov)
        if prov is Provenance.UNLABELED:
            if self.mask is not None:
                raise DataError(f"{self.id}: unlabeled sample carries a mask")
        elif self.mask is None:
            raise DataError(f"{self.id}: {prov.value} sample needs a mask")
        if self.mask is not None and self.mask.shape != self.volume.shape:
            raise ShapeError(f"{self.id}: mask shape {self.mask.shape} != volume shape {self.volume.shape}")
        if (self.pseudo_cycle is not None) != (prov is Provenance.PSEUDO):
            raise DataError(f"{self.id}: pseudo_cycle is set iff provenance is pseudo")
        if self.pseudo_cycle is not None and self.pseudo_cycle < 0:
            raise DataError(f"{self.id}: negative pseudo_cycle")


@dataclass
class DatasetPool:
    """Training set T (labeled + pseudo-labeled) and unlabeled set U."""

    training: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)

    def __post_init__(self):
        self.training = list(self.training)
        self.unlabeled = list(self.unlabeled)
        for s in self.training:
            if s.provenance is Provenance.UNLABELED:
                raise DataError(f"{s.id}: unlabeled sample in training set")
        for s in self.unlabeled:
            if s.provenance is not Provenance.UNLABELED:
                raise DataError(f"{s.id}: {s.provenance.value} sample in unlabeled set")
        t_ids = [s.id for s in self.training]
        u_ids = [s.id for s in self.unlabeled]
        if len(set(t_ids)) != len(t_ids) or len(set(u_ids)) != len(u_ids):
            raise DataError("duplicate sample ids in pool")
        if set(t_ids) & set(u_ids):
            raise DataError("training and unlabeled id sets overlap")

    def __len__(self):
        return len(self.training) + len(self.unlabeled)

    @property
    def sizes(self):
        return len(self.training), len(self.unlabeled)

    def training_ids(self):
        return [s.id for s in self.training]

    def unlabeled_ids(self):
        return [s.id for s in self.unlabeled]


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple
    size: tuple
    orientation: str = "canonical"

    def check(self, shape):
        if len(self.origin) != len(shape) or len(self.size) != len(shape):
            raise ShapeError(f"patch rank {len(self.origin)} does not match volume rank {len(shape)}")
        for o, s, n in zip(self.origin, self.size, shape):
            if o < 0 or s < 1 or o + s > n:
                raise ShapeError(f"patch origin={self.origin} size={self.size} out of bounds for shape {shape}")

    def slices(self):
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def translated(self, offset, size):
        return PatchSpec(tuple(o + d for o, d in zip(self.origin, offset)), tuple(size), self.orientation)


def extract_patch(volume, spec):
    spec.check(volume.shape)
    return Volume(volume.voxels[spec.slices()].copy(), volume.spacing)


def crop_mask(mask, spec):
    spec.check(mask.shape)
    return Mask(mask.voxels[spec.slices()])


def promote(pool, ids, masks, cycle):
    """Move unlabeled samples into the training set with pseudo-label masks.

    Returns a new pool; ``pool`` itself is left untouched.
    """
    ids = list(ids)
    masks = list(masks)
    if len(ids) != len(masks):
        raise DataError(f"{len(ids)} ids but {len(masks)} masks")
    if cycle < 0:
        raise DataError("cycle must be non-negative")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids in promotion")
    index = {s.id: k for k, s in enumerate(pool.unlabeled)}
    train_ids = set(pool.training_ids())
    for sid in ids:
        if sid in train_ids:
            raise DataError(f"{sid} is already in the training set")
        if sid not in index:
            raise DataError(f"unknown unlabeled id {sid!r}")
    promoted = []
    for sid, m in zip(ids, masks):
        s = pool.unlabeled[index[sid]]
        m = m if isinstance(m, Mask) else Mask(m)
        if m.shape != s.volume.shape:
            raise ShapeError(f"{sid}: pseudo-label shape {m.shape} != volume shape {s.volume.shape}")
        promoted.append(replace(s, mask=m, provenance=Provenance.PSEUDO, pseudo_cycle=int(cycle)))
    moved = set(ids)
    return DatasetPool(
        training=pool.training + promoted,
        unlabeled=[s for s in pool.unlabeled if s.id not in moved],
    )


def id_hash(sample_id):
    return hashlib.sha256(sample_id.encode("utf-8")).hexdigest()


def split_validation(pool, fraction=0.2):
    """Carve a validation set out of the labeled training samples.

    Samples are ordered by the SHA-256 of their id and the first
    ``round(fraction * n)`` go to validation (at least one when n >= 2 and
    fraction > 0, never all of them).
    """
    labeled = [s for s in pool.training if s.provenance is Provenance.LABELED]
    n = len(labeled)
    n_val = int(round(fraction * n))
    if fraction > 0 and n >= 2:
        n_val = max(n_val, 1)
    n_val = min(n_val, max(n - 1, 0))
    chosen = {s.id for s in sorted(labeled, key=lambda s: id_hash(s.id))[:n_val]}
    validation = [s for s in labeled if s.id in chosen]
    rest = DatasetPool([s for s in pool.training if s.id not in chosen], pool.unlabeled)
    return rest, validation


def normalize_intensity(voxels):
    """Zero mean, unit variance; constant volumes map to zeros."""
    v = np.asarray(voxels, dtype=np.float64)
    sd = v.std()
    out = v - v.mean()
    if sd > 0:
        out /= sd
    return out
