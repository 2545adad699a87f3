"""Patch extraction: farthest point sampling, k-nearest neighbors, padding.

All randomness is driven by explicit seeds and all distance ties break by
ascending original index, so every operation here is exactly reproducible
and directly comparable against brute-force oracles. The kd-tree path is a
performance feature only: it returns bit-identical indices to brute force.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from pstpcqa.pointcloud import IoFailure, PointCloud

PATCH_MAGIC = b"PSTP"

# Below this many points a distance matrix beats building a kd-tree.
_TREE_THRESHOLD = 20_000


class CountExceedsPoints(ValueError):
    """Requested more samples than the cloud holds (without-replacement op)."""


class KExceedsPoints(ValueError):
    """Requested more neighbors than the cloud holds."""


@dataclass(frozen=True)
class PatchConfig:
    """Patch extraction knobs; defaults match the trained metric."""

    K: int = 16
    Np: int = 14900
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.Np < 1:
            raise ValueError(f"K and Np must be positive, got K={self.K}, Np={self.Np}")


@dataclass
class PatchSet:
    """K patches of Np points each, plus provenance.

    data[k, 0, :] is always the point nearest the k-th center (the center
    itself, since centers are cloud points). source_indices maps patch rows
    back to cloud rows, with repetition allowed when the cloud was padded;
    it is None for patch sets reloaded from disk.
    """

    data: np.ndarray  # (K, Np, 6) float32
    centers: np.ndarray  # (K, 3) float32
    source_indices: Optional[np.ndarray] = None  # (K, Np) int64

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def Np(self) -> int:
        return self.data.shape[1]


def _rng(*entropy) -> np.random.Generator:
    words = [int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def farthest_point_sampling(coords: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Greedy max-min subsampling; returns `count` distinct indices.

    The first index is drawn uniformly from the seed; each later pick
    maximizes the minimum squared distance to everything already selected,
    ties broken by lowest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if count > n:
        raise CountExceedsPoints(f"count={count} exceeds {n} points")
    selected = np.empty(count, dtype=np.int64)
    rng = _rng(seed)
    current = int(rng.integers(0, n))
    selected[0] = current
    min_d2 = np.full(n, np.inf)
    for i in range(1, count):
        diff = coords - coords[current]
        np.minimum(min_d2, (diff * diff).sum(axis=1), out=min_d2)
        min_d2[current] = -1.0  # never re-pick
        current = int(np.argmax(min_d2))  # argmax takes the lowest tied index
        selected[i] = current
    return selected


def knn(coords: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to `query`, ascending distance.

    Ties break by ascending index. This is the semantics-defining brute
    force path; KnnIndex provides the accelerated equivalent.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k > n:
        raise KExceedsPoints(f"k={k} exceeds {n} points")
    diff = coords - np.asarray(query, dtype=np.float64)
    d2 = (diff * diff).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k].astype(np.int64)


class KnnIndex:
    """kd-tree-backed nearest neighbor queries, bit-identical to knn().

    The tree finds the k-th neighbor distance; candidates within that radius
    are then re-ranked by exact squared distance with index tie-breaking, so
    boundary ties resolve exactly as in the brute-force path.
    """

    def __init__(self, coords: np.ndarray):
        self.coords = np.asarray(coords, dtype=np.float64)
        self.tree = cKDTree(self.coords)

    def query(self, query: np.ndarray, k: int, workers: int = 1) -> np.ndarray:
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        n = self.coords.shape[0]
        if k > n:
            raise KExceedsPoints(f"k={k} exceeds {n} points")
        dist, _ = self.tree.query(query, k=k, workers=workers)
        dist = np.asarray(dist).reshape(query.shape[0], k)
        out = np.empty((query.shape[0], k), dtype=np.int64)
        for i, q in enumerate(query):
            # Inflate the k-th distance a hair so exact ties at the boundary
            # are all captured, then re-rank exactly.
            radius = float(dist[i, -1]) * (1.0 + 1e-9) + 1e-300
            cand = np.asarray(self.tree.query_ball_point(q, radius, workers=workers), dtype=np.int64)
            cand.sort()
            diff = self.coords[cand] - q
            d2 = (diff * diff).sum(axis=1)
            order = np.argsort(d2, kind="stable")[:k]
            out[i] = cand[order]
        return out


def random_sample(n_points: int, count: int, seed: int) -> np.ndarray:
    """Seeded uniform sample of row indices.

    Without replacement while count <= n_points; beyond that, every index
    appears once and the remainder is drawn uniformly with replacement.
    """
    rng = _rng(seed)
    if count <= n_points:
        return rng.permutation(n_points)[:count].astype(np.int64)
    extra = rng.integers(0, n_points, size=count - n_points)
    return np.concatenate([np.arange(n_points), extra]).astype(np.int64)


def extract_patches(cloud: PointCloud, config: PatchConfig, workers: int = 1) -> PatchSet:
    """Cut K patches of Np points around farthest-point-sampled centers.

    Each patch holds the Np nearest points to its center in ascending
    distance order; clouds smaller than Np are padded by seeded resampling
    with replacement, so extraction is total for any N >= 1. Patches may
    overlap. Expects a normalized cloud (coordinates in [1, 2001]).
    """
    coords = cloud.coords
    n = cloud.n_points
    k_eff = min(config.K, n)
    center_idx = farthest_point_sampling(coords, k_eff, config.seed)
    if k_eff < config.K:
        # Fewer points than requested patches: reuse centers round-robin.
        reps = -(-config.K // k_eff)
        center_idx = np.tile(center_idx, reps)[:config.K]

    n_near = min(config.Np, n)
    centers = coords[center_idx]
    if n > _TREE_THRESHOLD:
        index = KnnIndex(coords)
        near = index.query(centers, n_near, workers=workers)
    else:
        near = np.vstack([knn(coords, c, n_near) for c in centers])

    source = np.empty((config.K, config.Np), dtype=np.int64)
    source[:, :n_near] = near
    if n_near < config.Np:
        for k in range(config.K):
            rng = _rng(config.seed, 0x9E3779B9, k)
            source[k, n_near:] = rng.integers(0, n, size=config.Np - n_near)

    data = cloud.points[source.reshape(-1)].reshape(config.K, config.Np, 6).astype(np.float32)
    return PatchSet(data=data, centers=data[:, 0, :3].copy(), source_indices=source)


def save_patches(patches: PatchSet, path) -> None:
    """Write the PSTP binary format: magic, u32 K, u32 Np, float32 LE body."""
    try:
        with open(path, "wb") as fh:
            fh.write(PATCH_MAGIC)
            fh.write(struct.pack("<II", patches.K, patches.Np))
            fh.write(np.ascontiguousarray(patches.data, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_patches(path) -> PatchSet:
    """Read a PSTP file; source indices are not stored and come back None."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != PATCH_MAGIC:
                raise IoFailure(f"{path}: not a PSTP patch file")
            k, np_ = struct.unpack("<II", fh.read(8))
            body = fh.read(k * np_ * 6 * 4)
            if len(body) < k * np_ * 6 * 4:
                raise IoFailure(f"{path}: truncated patch data")
            data = np.frombuffer(body, dtype="<f4").reshape(k, np_, 6).copy()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return PatchSet(data=data, centers=data[:, 0, :3].copy(), source_indices=None)
