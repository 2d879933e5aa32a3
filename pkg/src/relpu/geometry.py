"""Deterministic point set operations.

All neighbor and sampling routines break distance ties by lowest point
index so that repeated runs on identical inputs produce identical index
tables. Distances are squared Euclidean internally; ordering is the same
either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgument
from .validation import as_points, check_positive_int, check_scalar_field


@dataclass
class PointCloud:
    """A point set with an optional per-point scalar channel.

    points: (n, 3) float64, finite.
    scalar: optional (n,) float64 channel (e.g. saliency scores).
    id: free-form identifier used in manifests and CSV rows.
    """

    points: np.ndarray
    scalar: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.points = as_points(self.points, name="points")
        if self.scalar is not None:
            self.scalar = check_scalar_field(self.scalar, len(self.points))

    def __len__(self) -> int:
        return self.points.shape[0]


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between rows of a (na,3) and b (nb,3)."""
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def knn(points, k: int) -> np.ndarray:
    """Index table of the k nearest neighbors of every point, self excluded.

    Returns an (n, k) int array; row i is sorted by (distance to point i,
    index). Requires 1 <= k <= n - 1.
    """
    pts = as_points(points, min_points=2)
    n = pts.shape[0]
    k = check_positive_int(k, "k")
    if k >= n:
        raise InvalidArgument(f"k: must be < n={n} (self excluded), got {k}")
    out = np.empty((n, k), dtype=np.int64)
    # Row blocks bound peak memory to block * n doubles.
    block = max(1, min(n, (1 << 22) // n))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d = _pairwise_sq(pts[lo:hi], pts)
        d[np.arange(lo, hi) - lo, np.arange(lo, hi)] = np.inf
        # stable sort keeps equal distances in index order
        out[lo:hi] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def farthest_point_sample(points, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Picks `start` first, then repeatedly the point maximizing the distance
    to the already selected set (ties to the lowest index). Returns the m
    chosen indices in selection order.
    """
    pts = as_points(points)
    n = pts.shape[0]
    m = check_positive_int(m, "m")
    if m > n:
        raise InvalidArgument(f"m: must be <= n={n}, got {m}")
    if not 0 <= start < n:
        raise InvalidArgument(f"start: must be in [0, {n}), got {start}")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    best = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    for i in range(1, m):
        nxt = int(np.argmax(best))  # first occurrence on ties
        selected[i] = nxt
        d = np.einsum("ij,ij->i", pts - pts[nxt], pts - pts[nxt])
        np.minimum(best, d, out=best)
    return selected


def extract_patches(points, num_patches: int, patch_size: int) -> np.ndarray:
    """Overlapping local patches around farthest-point-sampled seeds.

    Patch k consists of seed k followed by its (patch_size - 1) nearest
    neighbors ordered by (distance, index). Returns (num_patches,
    patch_size) indices into the input cloud.
    """
    pts = as_points(points, min_points=1)
    n = pts.shape[0]
    num_patches = check_positive_int(num_patches, "num_patches")
    patch_size = check_positive_int(patch_size, "patch_size")
    if patch_size > n:
        raise InvalidArgument(f"patch_size: must be <= n={n}, got {patch_size}")
    if num_patches > n:
        raise InvalidArgument(f"num_patches: must be <= n={n}, got {num_patches}")
    seeds = farthest_point_sample(pts, num_patches)
    patches = np.empty((num_patches, patch_size), dtype=np.int64)
    for k, s in enumerate(seeds):
        d = np.einsum("ij,ij->i", pts - pts[s], pts - pts[s])
        d[s] = -np.inf  # seed always first
        patches[k] = np.argsort(d, kind="stable")[:patch_size]
    return patches


def partition_patches(points, num_patches: int) -> np.ndarray:
    """Equal-size spatial partition around farthest-point-sampled seeds.

    Unlike :func:`extract_patches`, every point lands in exactly one
    patch, so the patches jointly cover the cloud: (point, seed) pairs
    are scanned in order of increasing distance and each point takes
    the nearest seed with remaining capacity n / num_patches. Returns
    (num_patches, n // num_patches) indices, each row ascending.
    """
    pts = as_points(points, min_points=1)
    n = pts.shape[0]
    num_patches = check_positive_int(num_patches, "num_patches")
    if n % num_patches != 0:
        raise InvalidArgument(
            f"num_patches: {num_patches} does not divide cloud size {n}")
    cap = n // num_patches
    seeds = farthest_point_sample(pts, num_patches)
    diff = pts[:, None, :] - pts[seeds][None, :, :]
    dists = np.einsum("ipj,ipj->ip", diff, diff)
    assigned = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(num_patches, dtype=np.int64)
    filled = 0
    for flat in np.argsort(dists, axis=None, kind="stable"):
        i, k = divmod(int(flat), num_patches)
        if assigned[i] >= 0 or counts[k] == cap:
            continue
        assigned[i] = k
        counts[k] += 1
        filled += 1
        if filled == n:
            break
    patches = np.empty((num_patches, cap), dtype=np.int64)
    for k in range(num_patches):
        patches[k] = np.flatnonzero(assigned == k)
    return patches


def average_segments(points, num_segments: int, seed: int = 0,
                     order: str = "random") -> np.ndarray:
    """Partition a cloud into equal contiguous blocks of a point ordering.

    The cloud is reordered, then sliced into `num_segments` consecutive
    blocks of n / num_segments points each. Orderings:

    - "random": seeded uniform random permutation (default),
    - "identity": the input order as-is,
    - "strided_fps": farthest-point order interleaved so each block is
      itself a spread-out cover of the shape.

    Returns (num_segments, n // num_segments) indices. n must be divisible
    by num_segments.
    """
    pts = as_points(points)
    n = pts.shape[0]
    num_segments = check_positive_int(num_segments, "num_segments")
    if n % num_segments != 0:
        raise InvalidArgument(
            f"num_segments: {num_segments} does not divide cloud size {n}"
        )
    if order == "random":
        perm = np.random.default_rng(seed).permutation(n)
    elif order == "identity":
        perm = np.arange(n)
    elif order == "strided_fps":
        fps_order = farthest_point_sample(pts, n)
        # block k takes every num_segments-th pick starting at k
        perm = np.concatenate([fps_order[k::num_segments]
                               for k in range(num_segments)])
    else:
        raise InvalidArgument(f"order: unknown mode {order!r}")
    return perm.reshape(num_segments, n // num_segments).astype(np.int64)


def normalize_unit_sphere(points):
    """Center a cloud on its centroid and scale the max radius to 1.

    Returns (normalized_points, centroid, scale). A degenerate cloud
    (all points coincident) gets scale 1.0.
    """
    pts = as_points(points)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt(np.einsum("ij,ij->i", centered, centered).max()))
    if scale == 0.0:
        scale = 1.0
    return centered / scale, centroid, scale


def denormalize(points, centroid, scale: float) -> np.ndarray:
    """Inverse of :func:`normalize_unit_sphere`."""
    return as_points(points) * float(scale) + np.asarray(centroid, dtype=np.float64)


@dataclass
class SphericalView:
    """Spherical coordinates of a cloud about a reference centroid.

    r: distance to centroid; phi: azimuth in (-pi, pi]; psi: polar angle
    in [0, pi]. Points at the centroid get r = 0 and zero angles.
    """

    r: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_cartesian(self) -> np.ndarray:
        sin_psi = np.sin(self.psi)
        xyz = np.stack(
            [
                self.r * sin_psi * np.cos(self.phi),
                self.r * sin_psi * np.sin(self.phi),
                self.r * np.cos(self.psi),
            ],
            axis=1,
        )
        return xyz + self.centroid


def to_spherical(points, centroid=None) -> SphericalView:
    """Express a cloud in spherical coordinates about `centroid`.

    The centroid defaults to the cloud mean. Exact round trip through
    :meth:`SphericalView.to_cartesian` up to floating point rounding.
    """
    pts = as_points(points)
    c = pts.mean(axis=0) if centroid is None else np.asarray(centroid, dtype=np.float64)
    rel = pts - c
    r = np.sqrt(np.einsum("ij,ij->i", rel, rel))
    nonzero = r > 0
    phi = np.zeros(len(pts))
    psi = np.zeros(len(pts))
    phi[nonzero] = np.arctan2(rel[nonzero, 1], rel[nonzero, 0])
    psi[nonzero] = np.arccos(np.clip(rel[nonzero, 2] / r[nonzero], -1.0, 1.0))
    return SphericalView(r=r, phi=phi, psi=psi, centroid=c)


def add_gaussian_noise(points, beta: float, seed: int = 0) -> np.ndarray:
    """Add N(0, 1) noise scaled by `beta` to every coordinate.

    Meant for clouds already normalized to the unit sphere, so `beta` is a
    fraction of the shape radius. beta = 0 returns the input unchanged.
    """
    pts = as_points(points)
    if not np.isfinite(beta) or beta < 0:
        raise InvalidArgument(f"beta: must be >= 0, got {beta!r}")
    if beta == 0:
        return pts.copy()
    rng = np.random.default_rng(seed)
    return pts + beta * rng.standard_normal(pts.shape)
