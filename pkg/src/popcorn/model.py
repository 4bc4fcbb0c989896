"""Encoder-decoder segmentation network with explicit backpropagation.

The network is a small U-Net: ``depth`` encoder stages (two 3x3 conv +
ReLU, then 2x max-pool), a bottleneck stage, and a mirrored decoder that
upsamples by nearest-neighbour repetition and concatenates the skip
connection.  A 1x1 conv and a sigmoid give the voxel probabilities.  The
latent vector is the spatial mean of the bottleneck activation, taken after
its last ReLU.

Everything runs in numpy (convolutions go through :mod:`popcorn.kernels`),
in either float32 for training or float64 for gradient checks.
"""
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .data import Mask
from .errors import ConfigError, FormatError, ShapeError
from .io import decode_raw, encode_raw


@dataclass(frozen=True)
class ModelConfig:
    dims: int = 2
    in_channels: int = 1
    base_filters: int = 8
    depth: int = 2
    patch_size: tuple = (32, 32)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))

    def validate(self):
        if self.dims not in (2, 3):
            raise ConfigError(f"model.dims must be 2 or 3, got {self.dims}")
        if self.in_channels < 1:
            raise ConfigError("model.in_channels must be >= 1")
        if self.base_filters < 4:
            raise ConfigError("model.base_filters must be >= 4")
        if self.depth < 2:
            raise ConfigError("model.depth must be >= 2")
        if len(self.patch_size) != self.dims:
            raise ConfigError(f"model.patch_size has {len(self.patch_size)} axes for dims={self.dims}")
        step = 2 ** self.depth
        for p in self.patch_size:
            if p < step or p % step:
                raise ConfigError(f"model.patch_size {self.patch_size} is not divisible by 2**depth = {step}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        return self

    @property
    def latent_dim(self):
        return self.base_filters * 2 ** self.depth

    @property
    def bottleneck_shape(self):
        return tuple(p // 2 ** self.depth for p in self.patch_size)

    def to_dict(self):
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d


def _layer_specs(cfg):
    """(name, in_channels, out_channels, kernel) in parameter order."""
    specs = []
    cin = cfg.in_channels
    for s in range(cfg.depth):
        c = cfg.base_filters * 2 ** s
        specs += [(f"enc{s}.conv1", cin, c, 3), (f"enc{s}.conv2", c, c, 3)]
        cin = c
    cb = cfg.latent_dim
    specs += [("bottleneck.conv1", cin, cb, 3), ("bottleneck.conv2", cb, cb, 3)]
    cup = cb
    for s in reversed(range(cfg.depth)):
        c = cfg.base_filters * 2 ** s
        specs += [(f"dec{s}.conv1", cup + c, c, 3), (f"dec{s}.conv2", c, c, 3)]
        cup = c
    specs.append(("head", cup, 1, 1))
    return specs


class UNet:
    def __init__(self, config, params):
        self.config = config.validate()
        self.dtype = np.dtype(config.dtype)
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}
        expected = self.param_shapes()
        if list(self.params) != list(expected):
            raise ShapeError("parameter names do not match the configuration")
        for k, shp in expected.items():
            if self.params[k].shape != shp:
                raise ShapeError(f"parameter {k} has shape {self.params[k].shape}, expected {shp}")

    def param_shapes(self):
        nd = self.config.dims
        out = {}
        for name, cin, cout, k in _layer_specs(self.config):
            out[name + ".w"] = (cout, cin) + (k,) * nd
            out[name + ".b"] = (cout,)
        return out

    def copy(self):
        return UNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def flat_params(self):
        return np.concatenate([v.ravel() for v in self.params.values()])

    def state_hash(self):
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    # -- layers ------------------------------------------------------------

    def _conv(self, x, name, cache, relu=True):
        z = kernels.conv_forward(x, self.params[name + ".w"], self.params[name + ".b"])
        if relu:
            a = np.maximum(z, 0)
            cache.append((name, x, z > 0))
            return a
        cache.append((name, x, None))
        return z

    def _conv_back(self, g, cache_item, grads):
        name, x, active = cache_item
        if active is not None:
            g = g * active
        gx, gw, gb = kernels.conv_backward(x, self.params[name + ".w"], g)
        grads[name + ".w"] = gw
        grads[name + ".b"] = gb
        return gx

    @staticmethod
    def _pool(x):
        nd = x.ndim - 2
        shp = x.shape[:2]
        for n in x.shape[2:]:
            shp += (n // 2, 2)
        xr = x.reshape(shp)
        axes = tuple(3 + 2 * k for k in range(nd))
        m = xr.max(axis=axes, keepdims=True)
        hit = xr == m
        hit = hit / hit.sum(axis=axes, keepdims=True)
        return m.reshape(x.shape[:2] + tuple(n // 2 for n in x.shape[2:])), hit.astype(x.dtype)

    @staticmethod
    def _pool_back(g, hit):
        nd = g.ndim - 2
        shp = g.shape[:2]
        for n in g.shape[2:]:
            shp += (n, 1)
        gx = hit * g.reshape(shp)
        return gx.reshape(g.shape[:2] + tuple(2 * n for n in g.shape[2:]))

    @staticmethod
    def _upsample(x):
        for ax in range(2, x.ndim):
            x = np.repeat(x, 2, axis=ax)
        return x

    @staticmethod
    def _upsample_back(g):
        shp = g.shape[:2]
        for n in g.shape[2:]:
            shp += (n // 2, 2)
        axes = tuple(3 + 2 * k for k in range(g.ndim - 2))
        return g.reshape(shp).sum(axis=axes)

    # -- forward / backward --------------------------------------------------

    def forward(self, x):
        """Batched forward pass.

        ``x`` has shape (B, C, *patch_size).  Returns voxel probabilities
        (B, *patch_size), latent vectors (B, latent_dim) and a cache for
        :meth:`backward`.
        """
        cfg = self.config
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != cfg.dims + 2 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.patch_size:
            raise ShapeError(f"input shape {x.shape} does not match (B, {cfg.in_channels}, *{cfg.patch_size})")
        convs, pools, skips = [], [], []
        a = x
        for s in range(cfg.depth):
            a = self._conv(a, f"enc{s}.conv1", convs)
            a = self._conv(a, f"enc{s}.conv2", convs)
            skips.append(a)
            a, hit = self._pool(a)
            pools.append(hit)
        a = self._conv(a, "bottleneck.conv1", convs)
        a = self._conv(a, "bottleneck.conv2", convs)
        bott_shape = a.shape
        latent = a.mean(axis=tuple(range(2, a.ndim)))
        splits = []
        for s in reversed(range(cfg.depth)):
            up = self._upsample(a)
            splits.append(up.shape[1])
            a = np.concatenate([up, skips[s]], axis=1)
            a = self._conv(a, f"dec{s}.conv1", convs)
            a = self._conv(a, f"dec{s}.conv2", convs)
        logits = self._conv(a, "head", convs, relu=False)[:, 0]
        probs = expit(logits)
        cache = {"convs": convs, "pools": pools, "splits": splits, "bott_shape": bott_shape, "probs": probs}
        return probs, latent, cache

    def backward(self, cache, dprobs, dlatent=None):
        """Parameter gradients given upstream gradients of probs and latent."""
        cfg = self.config
        convs = list(cache["convs"])
        grads = {}
        p = cache["probs"]
        g = (np.asarray(dprobs, dtype=self.dtype) * p * (1 - p))[:, None]
        g = self._conv_back(g, convs.pop(), grads)
        skip_grads = []
        for s in range(cfg.depth):
            g = self._conv_back(g, convs.pop(), grads)
            g = self._conv_back(g, convs.pop(), grads)
            n_up = cache["splits"][cfg.depth - 1 - s]
            skip_grads.append(g[:, n_up:])
            g = self._upsample_back(g[:, :n_up])
        if dlatent is not None:
            shp = cache["bott_shape"]
            scale = 1.0 / math.prod(shp[2:])
            dl = np.asarray(dlatent, dtype=self.dtype) * self.dtype.type(scale)
            g = g + dl.reshape(dl.shape + (1,) * cfg.dims)
        g = self._conv_back(g, convs.pop(), grads)
        g = self._conv_back(g, convs.pop(), grads)
        for s in reversed(range(cfg.depth)):
            g = self._pool_back(g, cache["pools"][s])
            g = g + skip_grads[s]
            g = self._conv_back(g, convs.pop(), grads)
            g = self._conv_back(g, convs.pop(), grads)
        return {k: grads[k] for k in self.params}


def init_model(config, seed):
    """He-normal weights, zero biases; deterministic in ``seed``."""
    config = config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, cin, cout, k in _layer_specs(config):
        fan_in = cin * k ** config.dims
        gain = 2.0 if name != "head" else 1.0
        w = rng.normal(0.0, math.sqrt(gain / fan_in), size=(cout, cin) + (k,) * config.dims)
        params[name + ".w"] = w.astype(dtype)
        params[name + ".b"] = np.zeros(cout, dtype=dtype)
    return UNet(config, params)


def _as_batch(model, arrays):
    x = np.stack([np.asarray(a, dtype=model.dtype) for a in arrays])
    if model.config.in_channels == 1 and x.ndim == model.config.dims + 1:
        x = x[:, None]
    return x


def forward(model, patch):
    """Probabilities and latent vector for one patch (Volume or array)."""
    vox = patch.voxels if hasattr(patch, "voxels") else np.asarray(patch)
    if tuple(vox.shape[-model.config.dims:]) != model.config.patch_size:
        raise ShapeError(f"patch shape {vox.shape} != model patch_size {model.config.patch_size}")
    probs, latent, _ = model.forward(_as_batch(model, [vox]))
    return probs[0], latent[0]


def tile_starts(n, size, stride):
    """Window starts covering [0, n); the last window is shifted inward."""
    if n < size:
        raise ShapeError(f"axis of length {n} is smaller than patch size {size}")
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def _tiles(shape, patch, strides):
    grids = [tile_starts(n, p, s) for n, p, s in zip(shape, patch, strides)]
    return [tuple(o) for o in np.array(np.meshgrid(*grids, indexing="ij")).reshape(len(shape), -1).T]


def _check_volume(model, vox):
    ps = model.config.patch_size
    if vox.ndim != model.config.dims:
        raise ShapeError(f"volume rank {vox.ndim} != model dims {model.config.dims}")
    if any(n < p for n, p in zip(vox.shape, ps)):
        raise ShapeError(f"volume shape {vox.shape} is smaller than patch_size {ps}")


def predict_probs(model, volume, batch=16):
    """Full-volume probabilities from 50%-overlap tiles, averaged where they overlap."""
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    _check_volume(model, vox)
    ps = model.config.patch_size
    origins = _tiles(vox.shape, ps, [max(p // 2, 1) for p in ps])
    acc = np.zeros(vox.shape, dtype=np.float64)
    cnt = np.zeros(vox.shape, dtype=np.float64)
    for k in range(0, len(origins), batch):
        chunk = origins[k:k + batch]
        sl = [tuple(slice(o, o + p) for o, p in zip(org, ps)) for org in chunk]
        probs, _, _ = model.forward(_as_batch(model, [vox[s] for s in sl]))
        for s, pr in zip(sl, probs):
            acc[s] += pr
            cnt[s] += 1.0
    return acc / cnt


def threshold_mask(probs, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return Mask((np.asarray(probs) > threshold).astype(np.uint8))


def predict_mask(model, volume, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return threshold_mask(predict_probs(model, volume), threshold)


def embed_sample(model, sample, batch=16):
    """Mean bottleneck latent over a non-overlapping tiling of the sample."""
    vol = sample.volume if hasattr(sample, "volume") else sample
    vox = vol.voxels if hasattr(vol, "voxels") else np.asarray(vol)
    _check_volume(model, vox)
    ps = model.config.patch_size
    origins = _tiles(vox.shape, ps, ps)
    total = np.zeros(model.config.latent_dim, dtype=np.float64)
    for k in range(0, len(origins), batch):
        chunk = origins[k:k + batch]
        patches = [vox[tuple(slice(o, o + p) for o, p in zip(org, ps))] for org in chunk]
        _, latent, _ = model.forward(_as_batch(model, patches))
        for row in latent:
            total += row
    return total / len(origins)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model, **hyper):
        opt = cls(**hyper)
        opt.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        opt.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return opt

    def copy(self):
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                              {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def apply_gradients(model, grads, opt):
    """One Adam step, in place; returns ``(model, opt)``."""
    if set(grads) != set(model.params):
        raise ShapeError("gradient names do not match model parameters")
    for k, g in grads.items():
        if g.shape != model.params[k].shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, expected {model.params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    if not opt.m:
        opt.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        opt.v = {k: np.zeros_like(p) for k, p in model.params.items()}
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for k, p in model.params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        m, v = opt.m[k], opt.v[k]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype, copy=False)
    return model, opt


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"POPCKPT1"


def save_checkpoint(path, model, opt, rng_state=None, extra=None):
    """Write model, optimizer and RNG state to a single binary file."""
    names = list(model.params)
    tensors = [("param/" + k, model.params[k]) for k in names]
    tensors += [("adam.m/" + k, opt.m[k]) for k in names if k in opt.m]
    tensors += [("adam.v/" + k, opt.v[k]) for k in names if k in opt.v]
    manifest = {
        "model_config": model.config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(encode_raw(arr))


def load_checkpoint(path):
    """Returns ``(model, opt, rng_state, extra)``."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise FormatError(f"no checkpoint at {path}") from None
    if buf[:8] != CKPT_MAGIC or len(buf) < 16:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", buf, 8)
    try:
        manifest = json.loads(buf[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt checkpoint manifest") from None
    pos = 16 + n
    arrays = {}
    for entry in manifest["tensors"]:
        arr, pos = decode_raw(buf, pos)
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{path}: tensor {entry['name']} shape mismatch")
        arrays[entry["name"]] = arr
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    mc = manifest["model_config"]
    cfg = ModelConfig(**{**mc, "patch_size": tuple(mc["patch_size"])})
    params = {k[len("param/"):]: a for k, a in arrays.items() if k.startswith("param/")}
    model = UNet(cfg, params)
    o = manifest["optimizer"]
    opt = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"])
    opt.m = {k[len("adam.m/"):]: a.astype(model.dtype) for k, a in arrays.items() if k.startswith("adam.m/")}
    opt.v = {k[len("adam.v/"):]: a.astype(model.dtype) for k, a in arrays.items() if k.startswith("adam.v/")}
    return model, opt, manifest["rng_state"], manifest["extra"]
