"""Evaluation metrics and the training loss.

Chamfer distance uses the squared-distance form with both direction terms
averaged over their own set sizes; Hausdorff is the plain (non-squared)
symmetric max. Point-to-surface distance is exact for the analytic shapes
and brute-force point-to-triangle for meshes. The uniformity score follows
the disk imbalance x clutter construction with hex-lattice spacing as the
reference nearest-neighbor distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import DiffBuffer, _accum
from .exceptions import InvalidArgument
from .geometry import farthest_point_sample
from .validation import as_points

# Above this many pair entries the nearest-index search switches from the
# dense distance matrix (ties to the lowest reference index) to a KD-tree
# (deterministic, tie order unspecified). Values are unaffected: squared
# distances are recomputed from coordinates either way.
_DENSE_PAIR_LIMIT = 1 << 16


def _nearest_indices(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    if query.shape[0] * ref.shape[0] <= _DENSE_PAIR_LIMIT:
        d = query[:, None, :] - ref[None, :, :]
        return np.einsum("ijk,ijk->ij", d, d).argmin(axis=1)
    _, idx = cKDTree(ref).query(query, k=1)
    return np.asarray(idx, dtype=np.int64)


def chamfer_distance(pred, gt) -> float:
    """Squared-distance Chamfer between two clouds.

    (1/M) sum_i min_j ||p_i - q_j||^2 + (1/N) sum_j min_i ||q_j - p_i||^2.
    """
    value, _ = _chamfer_terms(as_points(pred, "pred"), as_points(gt, "gt"),
                              want_grad=False)
    return value


def chamfer_with_grad(pred, gt):
    """Chamfer value and its analytic gradient wrt the predicted cloud."""
    p = as_points(pred, "pred")
    q = as_points(gt, "gt")
    return _chamfer_terms(p, q, want_grad=True)


def _chamfer_terms(p: np.ndarray, q: np.ndarray, want_grad: bool):
    m, n = p.shape[0], q.shape[0]
    ip = _nearest_indices(p, q)  # nearest gt point per prediction
    iq = _nearest_indices(q, p)  # nearest prediction per gt point
    dp = p - q[ip]
    dq = q - p[iq]
    value = float(np.einsum("ij,ij->", dp, dp) / m
                  + np.einsum("ij,ij->", dq, dq) / n)
    if not want_grad:
        return value, None
    grad = (2.0 / m) * dp
    # second term: d/dp_i ||q_j - p_i||^2 = 2 (p_i - q_j) for i = iq[j]
    np.add.at(grad, iq, (-2.0 / n) * dq)
    return value, grad


def chamfer_loss(pred: DiffBuffer, gt) -> DiffBuffer:
    """Chamfer distance as a differentiation graph node.

    `pred` is an (m, 3) buffer or a batched (B, m, 3) buffer; `gt` an
    array of matching leading shape. The loss is the mean Chamfer over
    the batch; gradients flow to `pred` only.
    """
    gt_arr = np.asarray(gt, dtype=np.float64)
    if pred.value.ndim == 2:
        value, grad = _chamfer_terms(pred.value, gt_arr, want_grad=True)

        def rule(g):
            _accum(pred, g[0, 0] * grad, own=True)

        return DiffBuffer(np.array([[value]]), (pred,), rule)
    if gt_arr.ndim != 3 or gt_arr.shape[0] != pred.value.shape[0]:
        raise InvalidArgument("chamfer_loss: gt batch does not match pred")
    b, m, _ = pred.value.shape
    n = gt_arr.shape[1]
    p_flat = pred.value.reshape(-1, 3)
    q_flat = gt_arr.reshape(-1, 3)
    # One nearest-neighbor pass covers the whole batch: samples are shifted
    # far apart along x so a query can never match another sample's points,
    # and distances are recomputed from the unshifted coordinates.
    spread = 8.0 * (max(np.abs(p_flat).max(), np.abs(q_flat).max()) + 1.0)
    shift = np.arange(b) * spread
    p_shift = p_flat.copy()
    p_shift[:, 0] += np.repeat(shift, m)
    q_shift = q_flat.copy()
    q_shift[:, 0] += np.repeat(shift, n)
    ip = _nearest_indices(p_shift, q_shift)
    iq = _nearest_indices(q_shift, p_shift)
    dp = (p_flat - q_flat[ip]).reshape(b, m, 3)
    dq = (q_flat - p_flat[iq]).reshape(b, n, 3)
    per_sample = (np.einsum("bij,bij->b", dp, dp) / m
                  + np.einsum("bij,bij->b", dq, dq) / n)
    total = 0.0
    for v in per_sample:
        total += float(v)
    grads = (2.0 / m) * dp
    np.add.at(grads.reshape(-1, 3), iq, (-2.0 / n) * dq.reshape(-1, 3))

    def rule_batched(g):
        _accum(pred, (g[0, 0] / b) * grads, own=True)

    return DiffBuffer(np.array([[total / b]]), (pred,), rule_batched)


def hausdorff_distance(a, b) -> float:
    """Symmetric Hausdorff distance (non-squared)."""
    pa = as_points(a, "a")
    pb = as_points(b, "b")
    da = pa - pb[_nearest_indices(pa, pb)]
    db = pb - pa[_nearest_indices(pb, pa)]
    return float(np.sqrt(max(np.einsum("ij,ij->i", da, da).max(),
                             np.einsum("ij,ij->i", db, db).max())))


# ---------------------------------------------------------------------------
# point-to-surface


def point_surface_distances(points, surface) -> np.ndarray:
    """Unsigned distance from each point to a surface.

    `surface` is either an object exposing ``surface_distance(points)``
    (analytic shape specs) or a ``(vertices, faces)`` triangle mesh tuple.
    """
    pts = as_points(points)
    if hasattr(surface, "surface_distance"):
        return np.asarray(surface.surface_distance(pts), dtype=np.float64)
    if isinstance(surface, tuple) and len(surface) == 2:
        return _mesh_distances(pts, surface[0], surface[1])
    raise InvalidArgument("surface: expected a shape spec or (vertices, faces)")


def point_to_surface(points, surface) -> float:
    """Mean unsigned point-to-surface distance."""
    return float(point_surface_distances(points, surface).mean())


def _mesh_distances(pts: np.ndarray, vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
        raise InvalidArgument("mesh: vertices must be (nv,3), faces (nf,3)")
    out = np.empty(len(pts))
    tri = v[f]  # (nf, 3, 3)
    for i, p in enumerate(pts):
        out[i] = np.sqrt(_point_triangles_sq(p, tri).min())
    return out


def _point_triangles_sq(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distance from p to each triangle (vectorized region test)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    nearest = np.empty_like(tri[:, 0])
    done = np.zeros(len(tri), dtype=bool)

    def settle(mask, value_rows):
        todo = mask & ~done
        nearest[todo] = value_rows[todo]
        done[todo] = True

    settle((d1 <= 0) & (d2 <= 0), a)  # vertex a
    settle((d3 >= 0) & (d4 <= d3), b)  # vertex b
    settle((d6 >= 0) & (d5 <= d6), c)  # vertex c

    vc = d1 * d4 - d3 * d2
    with np.errstate(invalid="ignore", divide="ignore"):
        w_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + w_ab[:, None] * ab)

    vb = d5 * d2 - d1 * d6
    with np.errstate(invalid="ignore", divide="ignore"):
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)

    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    with np.errstate(invalid="ignore", divide="ignore"):
        w_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           b + w_bc[:, None] * (c - b))

    # interior region: barycentric projection onto the triangle plane
    denom = va + vb + vc
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
    settle(~done, a + u[:, None] * ab + w[:, None] * ac)

    diff = p - nearest
    return np.einsum("ij,ij->i", diff, diff)


# ---------------------------------------------------------------------------
# uniformity


def _disk_clutter(nn_dists: np.ndarray, d_hat: float) -> float:
    """Deviation of in-disk nearest-neighbor spacings from the hex ideal."""
    return float(((nn_dists - d_hat) ** 2 / d_hat).sum())


def uniformity(points, p: float, seeds: int = 30) -> float:
    """Disk-based uniformity score; lower is more uniform.

    For `seeds` farthest-point disk centers, each disk collects the points
    within a ball of radius sqrt(p). A disk's imbalance is
    (n_i - n_hat)^2 / n_hat against the expected count n_hat = p * |P|;
    its clutter sums (d_j - d_hat)^2 / d_hat over in-disk nearest-neighbor
    distances with the hex-packing spacing d_hat = sqrt(2 pi p / (sqrt(3)
    n_i)). The score is the mean over disks of imbalance * clutter; disks
    with n_i <= 1 have undefined clutter and contribute their imbalance
    alone. Expects a cloud normalized to the unit sphere.
    """
    pts = as_points(points, min_points=2)
    if not 0 < p < 1:
        raise InvalidArgument(f"p: must be in (0, 1), got {p}")
    seeds = int(seeds)
    if seeds < 1 or seeds > len(pts):
        raise InvalidArgument(f"seeds: must be in [1, {len(pts)}], got {seeds}")
    n_total = len(pts)
    n_hat = p * n_total
    radius = np.sqrt(p)
    centers = pts[farthest_point_sample(pts, seeds)]
    tree = cKDTree(pts)
    contributions = np.empty(seeds)
    for s, center in enumerate(centers):
        idx = tree.query_ball_point(center, radius)
        n_i = len(idx)
        imbalance = (n_i - n_hat) ** 2 / n_hat
        if n_i <= 1:
            contributions[s] = imbalance
            continue
        disk = pts[idx]
        diff = disk[:, None, :] - disk[None, :, :]
        dmat = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(dmat, np.inf)
        nn = np.sqrt(dmat.min(axis=1))
        d_hat = np.sqrt(2.0 * np.pi * p / (np.sqrt(3.0) * n_i))
        contributions[s] = imbalance * _disk_clutter(nn, d_hat)
    return float(contributions.mean())


def uniformity_sweep(points, ps, seeds: int = 30) -> list[float]:
    """Uniformity at each disk-area fraction in `ps`."""
    return [uniformity(points, p, seeds) for p in ps]


DEFAULT_UNIFORMITY_PS = (0.004, 0.006, 0.008, 0.010, 0.012)


@dataclass
class MetricsRow:
    """One evaluation row; metric fields are in 1e-3 units.

    p2f is None when no reference surface is available for the shape
    (serialized as a flagged column).
    """

    shape_id: str
    cd: float
    hd: float
    p2f: float | None
    uniformity: tuple[float, ...]

    @classmethod
    def from_raw(cls, shape_id: str, cd: float, hd: float,
                 p2f: float | None, uniformity_vals) -> "MetricsRow":
        return cls(
            shape_id=shape_id,
            cd=cd * 1e3,
            hd=hd * 1e3,
            p2f=None if p2f is None else p2f * 1e3,
            uniformity=tuple(u * 1e3 for u in uniformity_vals),
        )

    @staticmethod
    def header(ps=DEFAULT_UNIFORMITY_PS) -> list[str]:
        return ["shape_id", "cd", "hd", "p2f"] + [
            f"u@{100 * p:g}" for p in ps
        ]

    def to_fields(self) -> list[str]:
        vals = ["%.9g" % self.cd, "%.9g" % self.hd,
                "n/a" if self.p2f is None else "%.9g" % self.p2f]
        return [self.shape_id] + vals + ["%.9g" % u for u in self.uniformity]


def mean_row(rows: list[MetricsRow], shape_id: str = "mean") -> MetricsRow:
    """Column-wise mean of metric rows; p2f averages the available entries."""
    if not rows:
        raise InvalidArgument("mean_row: no rows")
    p2fs = [r.p2f for r in rows if r.p2f is not None]
    return MetricsRow(
        shape_id=shape_id,
        cd=float(np.mean([r.cd for r in rows])),
        hd=float(np.mean([r.hd for r in rows])),
        p2f=float(np.mean(p2fs)) if p2fs else None,
        uniformity=tuple(
            float(np.mean([r.uniformity[i] for r in rows]))
            for i in range(len(rows[0].uniformity))
        ),
    )
