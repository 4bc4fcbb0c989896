"""Latent-space proximity graph and easiest-first sample selection.

Each unlabeled sample is scored by the sum of its ``p`` smallest squared
distances to the training set; the ``K`` lowest scores are picked.  Ids are
sorted lexicographically before anything else so results never depend on
the caller's ordering, and score ties are broken by id.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError, ShapeError


@dataclass
class ProximityGraph:
    matrix: np.ndarray  # |U| x |T| squared euclidean distances
    u_ids: list
    t_ids: list


@dataclass
class SelectionResult:
    selected_ids: list
    scores: list


def _stack(feats):
    ids = sorted(feats)
    mat = np.array([np.asarray(feats[i], dtype=np.float64).ravel() for i in ids])
    return ids, mat


def build_graph(u_feats, t_feats):
    if not u_feats or not t_feats:
        raise DataError("proximity graph needs non-empty unlabeled and training feature maps")
    u_ids, u = _stack(u_feats)
    t_ids, t = _stack(t_feats)
    if u.ndim != 2 or t.ndim != 2 or u.shape[1] != t.shape[1]:
        raise ShapeError("all latent vectors must have the same length")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(t))):
        raise DataError("non-finite latent features")
    return ProximityGraph(kernels.pairwise_sq_dist(u, t), u_ids, t_ids)


def proximity_score(row, p):
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    row = np.asarray(row, dtype=np.float64).ravel()
    if row.size == 0:
        raise ValueError("empty row")
    return float(kernels.smallest_sums(row[None, :], p)[0])


def select(graph, K, p):
    if K < 1 or p < 1:
        raise ValueError(f"K and p must be >= 1 (K={K}, p={p})")
    if graph.matrix.size == 0 or not graph.u_ids:
        raise DataError("empty proximity graph")
    scores = kernels.smallest_sums(graph.matrix, p)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(len(graph.u_ids)), scores))
    # u_ids are already sorted, so position order is id order
    take = order[: min(K, len(graph.u_ids))]
    return SelectionResult([graph.u_ids[k] for k in take], [float(scores[k]) for k in take])


def random_select(u_ids, K, rng):
    """Uniform selection without replacement, returned in draw order."""
    ids = sorted(u_ids)
    k = min(K, len(ids))
    picks = rng.choice(len(ids), size=k, replace=False)
    return SelectionResult([ids[int(i)] for i in picks], [float("nan")] * k)
