"""Compare the numba and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is timed on both backends with identical inputs; outputs are
checked for agreement before timing.  Compilation happens in a warm-up
call that is not timed.
"""
import argparse
import time

import numpy as np

from popcorn import _accel, kernels
from popcorn.model import ModelConfig, init_model
from popcorn.stats import wilcoxon_signed_rank


def _cases(rng):
    x2 = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    w2 = rng.standard_normal((16, 16, 3, 3)).astype(np.float32)
    b2 = np.zeros(16, np.float32)
    gy2 = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    x3 = rng.standard_normal((2, 8, 16, 16, 16)).astype(np.float32)
    w3 = rng.standard_normal((8, 8, 3, 3, 3)).astype(np.float32)
    b3 = np.zeros(8, np.float32)
    u = rng.standard_normal((2000, 32))
    t = rng.standard_normal((200, 32))
    dist = kernels.pairwise_sq_dist(u, t)
    d14 = rng.standard_normal(14) + 0.3
    model = init_model(ModelConfig(base_filters=8, depth=2, patch_size=(32, 32)), 0)
    batch = rng.standard_normal((16, 1, 32, 32)).astype(np.float32)
    return {
        "conv2d forward (8x16x32x32, 16 filters)": lambda: kernels.conv_forward(x2, w2, b2),
        "conv2d backward": lambda: kernels.conv_backward(x2, w2, gy2),
        "conv3d forward (2x8x16^3, 8 filters)": lambda: kernels.conv_forward(x3, w3, b3),
        "pairwise sq. distances (2000x200, d=32)": lambda: kernels.pairwise_sq_dist(u, t),
        "p smallest sums (2000x200, p=5)": lambda: kernels.smallest_sums(dist, 5),
        "exact Wilcoxon (n=14)": lambda: wilcoxon_signed_rank(d14, np.zeros(14)).p_value,
        "U-Net forward+backward (16x32x32)": lambda: _train_step(model, batch),
    }


def _train_step(model, batch):
    probs, latent, cache = model.forward(batch)
    return model.backward(cache, np.ones(probs.shape), np.zeros(latent.shape))["head.w"]


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    cases = _cases(np.random.default_rng(0))
    prev = _accel.numba_enabled()
    print(f"{'kernel':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    try:
        for name, fn in cases.items():
            _accel.use_numba(False)
            ref = np.asarray(_first(fn()), dtype=np.float64)
            t_np = _time(fn, args.repeat)
            _accel.use_numba(True)
            got = np.asarray(_first(fn()), dtype=np.float64)
            t_nb = _time(fn, args.repeat)
            diff = float(np.max(np.abs(ref - got))) if ref.size else 0.0
            print(f"{name:42s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.2f}x {diff:11.2e}")
    finally:
        _accel.use_numba(prev)


if __name__ == "__main__":
    main()
