"""Volume file formats and the on-disk dataset layout.

RAW_TENSOR layout (all integers little-endian)::

    b"RAWT"  version:u8  dtype:u8 (32 | 64)  rank:u8  shape:u64 * rank  payload

The payload is the row-major float array.  NIfTI-1 support covers single
file ``.nii`` images with the standard 348-byte header.
"""
import enum
import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import DatasetPool, Mask, Provenance, Sample, Volume, normalize_intensity
from .errors import DataError, FormatError

RAW_MAGIC = b"RAWT"
RAW_VERSION = 1
_RAW_DTYPES = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


class VolumeFormat(str, enum.Enum):
    NIFTI1 = "nifti1"
    RAW_TENSOR = "raw_tensor"


def encode_raw(array):
    arr = np.asarray(array)
    code = 64 if arr.dtype == np.float64 else 32
    arr = np.ascontiguousarray(arr, dtype=_RAW_DTYPES[code])
    if arr.ndim > 255:
        raise FormatError("rank too large for RAW_TENSOR")
    head = RAW_MAGIC + struct.pack("<BBB", RAW_VERSION, code, arr.ndim)
    head += struct.pack("<%dQ" % arr.ndim, *arr.shape)
    return head + arr.tobytes()


def decode_raw(buf, offset=0):
    """Parse one RAW_TENSOR record from ``buf``; returns (array, end offset)."""
    if len(buf) - offset < 7 or buf[offset:offset + 4] != RAW_MAGIC:
        raise FormatError("bad RAW_TENSOR magic")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != RAW_VERSION:
        raise FormatError(f"unsupported RAW_TENSOR version {version}")
    if code not in _RAW_DTYPES:
        raise FormatError(f"unknown RAW_TENSOR dtype code {code}")
    pos = offset + 7
    if len(buf) - pos < 8 * rank:
        raise FormatError("truncated RAW_TENSOR shape")
    shape = struct.unpack_from("<%dQ" % rank, buf, pos)
    pos += 8 * rank
    dtype = _RAW_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"RAW_TENSOR payload holds {(len(buf) - pos) // dtype.itemsize} values, header declares {nbytes // dtype.itemsize}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_raw(path, array):
    data = encode_raw(array)
    with open(path, "wb") as fh:
        fh.write(data)


def read_raw(path):
    buf = _read_bytes(path)
    arr, end = decode_raw(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after RAW_TENSOR payload")
    return arr


# ---------------------------------------------------------------------------
# NIfTI-1

_NII_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def write_nifti(path, volume):
    vox = np.asarray(volume.voxels, dtype=np.float32)
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    hdr[38:39] = b"r"
    dims = [vox.ndim] + list(vox.shape) + [1] * (7 - vox.ndim)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    pixdim = [1.0] + list(volume.spacing) + [1.0] * (7 - vox.ndim)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123:124] = bytes([2])  # spatial units: mm
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(vox.astype("<f4").ravel(order="F").tobytes())


def read_nifti(path):
    buf = _read_bytes(path)
    if len(buf) < 348:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", buf, 0)[0] == 348:
        end = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == 348:
        end = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    if buf[344:347] not in (b"n+1", b"ni1"):
        raise FormatError(f"{path}: missing NIfTI-1 magic")
    dims = struct.unpack_from(end + "8h", buf, 40)
    ndim = dims[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: bad dim[0]={ndim}")
    shape = tuple(int(d) for d in dims[1:ndim + 1])
    while len(shape) > 2 and shape[-1] == 1:
        shape = shape[:-1]
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")
    datatype = struct.unpack_from(end + "h", buf, 70)[0]
    if datatype not in _NII_DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from(end + "8f", buf, 76)
    offset = int(struct.unpack_from(end + "f", buf, 108)[0])
    slope, inter = struct.unpack_from(end + "ff", buf, 112)
    dtype = np.dtype(_NII_DTYPES[datatype]).newbyteorder(end)
    count = int(np.prod(shape))
    if offset < 348 or len(buf) < offset + count * dtype.itemsize:
        raise FormatError(f"{path}: truncated NIfTI payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float32 if dtype.kind != "f" or dtype.itemsize == 4 else np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:len(shape) + 1])
    return data, spacing


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None


def load_volume(path, fmt=None):
    """Read a volume; ``fmt`` is inferred from the suffix when omitted."""
    fmt = VolumeFormat(fmt) if fmt is not None else _guess_format(path)
    if fmt is VolumeFormat.RAW_TENSOR:
        vox, spacing = read_raw(path), None
    else:
        vox, spacing = read_nifti(path)
    if vox.ndim not in (2, 3):
        raise FormatError(f"{path}: expected a 2D or 3D volume, got shape {vox.shape}")
    if not np.all(np.isfinite(vox)):
        raise DataError(f"{path}: non-finite voxel values")
    return Volume(vox, spacing)


def save_volume(path, volume, fmt=None):
    fmt = VolumeFormat(fmt) if fmt is not None else _guess_format(path)
    if fmt is VolumeFormat.RAW_TENSOR:
        write_raw(path, volume.voxels)
    else:
        write_nifti(path, volume)


def _guess_format(path):
    name = str(path)
    if name.endswith(".nii"):
        return VolumeFormat.NIFTI1
    return VolumeFormat.RAW_TENSOR


def save_mask(path, mask):
    write_raw(path, mask.voxels.astype(np.float32))


def load_mask(path):
    return Mask(np.rint(read_raw(path)).astype(np.uint8))


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(root, pool, test, hidden, meta=None):
    """Write ``labeled/``, ``unlabeled/``, ``test/`` and ``hidden/`` plus a manifest.

    ``hidden`` maps unlabeled ids to their ground truth; it lands in
    ``hidden/`` which the training commands never read.
    """
    root = Path(root)
    for sub in ("labeled", "unlabeled", "test", "hidden"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []

    def put(sample, split, with_mask):
        rec = {"id": sample.id, "split": split, "volume": f"{split}/{sample.id}.img.rt"}
        write_raw(root / rec["volume"], sample.volume.voxels)
        if with_mask:
            rec["mask"] = f"{split}/{sample.id}.mask.rt"
            save_mask(root / rec["mask"], sample.mask)
        return rec

    for s in pool.training:
        entries.append(put(s, "labeled", True))
    for s in pool.unlabeled:
        rec = put(s, "unlabeled", False)
        if s.id in hidden:
            rec["hidden"] = f"hidden/{s.id}.mask.rt"
            save_mask(root / rec["hidden"], hidden[s.id])
        entries.append(rec)
    for s in test:
        entries.append(put(s, "test", True))
    manifest = {"format": "popcorn-dataset", "version": 1, "normalized": True, "samples": entries}
    if meta:
        manifest.update(meta)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


def read_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DataError(f"no dataset manifest at {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_dataset(root):
    """Load the training pool and the test samples (hidden truth excluded)."""
    root = Path(root)
    manifest = read_manifest(root)
    normalized = bool(manifest.get("normalized", False))
    training, unlabeled, test = [], [], []
    for rec in manifest["samples"]:
        vol = load_volume(root / rec["volume"])
        if not normalized:
            vol = Volume(normalize_intensity(vol.voxels).astype(np.float32), vol.spacing)
        split = rec["split"]
        if split == "unlabeled":
            unlabeled.append(Sample(rec["id"], vol))
            continue
        mask = load_mask(root / rec["mask"])
        sample = Sample(rec["id"], vol, mask, Provenance.LABELED)
        (training if split == "labeled" else test).append(sample)
    return DatasetPool(training, unlabeled), test


def load_hidden_truth(root):
    """Evaluation-only ground truth of the unlabeled samples."""
    root = Path(root)
    manifest = read_manifest(root)
    return {rec["id"]: load_mask(root / rec["hidden"]) for rec in manifest["samples"] if "hidden" in rec}


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
