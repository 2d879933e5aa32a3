"""Synthetic shape corpus: analytic surfaces, sampling, dataset layout.

Shapes are sampled area-uniformly in a canonical frame, thinned to a
blue-noise subset, then posed rigidly. Every sampled point lies exactly
on the analytic surface, so ground-truth-on-surface checks hold to
floating point rounding through the rigid pose and the dataset's
normalization frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import pointio
from .exceptions import InvalidArgument, ParseError
from .geometry import (
    average_segments,
    extract_patches,
    farthest_point_sample,
    normalize_unit_sphere,
)
from .validation import as_points

KINDS = ("sphere", "torus", "cube", "cylinder")

_REQUIRED_PARAMS = {
    "sphere": ("radius",),
    "torus": ("major_radius", "minor_radius"),
    "cube": ("edge_x", "edge_y", "edge_z"),
    "cylinder": ("radius", "height"),
}


@dataclass
class ShapeSpec:
    """An analytic surface with a rigid pose.

    kind: one of sphere / torus / cube / cylinder.
    params: size parameters, all strictly positive (see _REQUIRED_PARAMS).
    rotation: proper orthonormal 3x3 (checked to 1e-9).
    translation: 3-vector.
    """

    kind: str
    params: dict
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"kind: unknown shape {self.kind!r}")
        for key in _REQUIRED_PARAMS[self.kind]:
            if key not in self.params:
                raise InvalidArgument(f"params: {self.kind} requires {key!r}")
            if not (float(self.params[key]) > 0):
                raise InvalidArgument(f"params: {key} must be > 0")
        self.params = {k: float(v) for k, v in self.params.items()}
        if self.kind == "torus" and (
            self.params["minor_radius"] >= self.params["major_radius"]
        ):
            raise InvalidArgument("params: torus needs minor_radius < major_radius")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidArgument("pose: rotation must be 3x3, translation 3")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or np.linalg.det(self.rotation) < 0:
            raise InvalidArgument("pose: rotation is not proper orthonormal")

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def to_canonical(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation) @ self.rotation

    def surface_distance(self, points) -> np.ndarray:
        """Exact unsigned distance from each point to the posed surface."""
        y = self.to_canonical(as_points(points))
        p = self.params
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(y, axis=1) - p["radius"])
        if self.kind == "torus":
            ring = np.sqrt(y[:, 0] ** 2 + y[:, 1] ** 2) - p["major_radius"]
            return np.abs(np.sqrt(ring**2 + y[:, 2] ** 2) - p["minor_radius"])
        if self.kind == "cube":
            half = 0.5 * np.array([p["edge_x"], p["edge_y"], p["edge_z"]])
            q = np.abs(y) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return np.abs(outside + inside)
        # cylinder with caps
        dr = np.sqrt(y[:, 0] ** 2 + y[:, 1] ** 2) - p["radius"]
        dz = np.abs(y[:, 2]) - 0.5 * p["height"]
        d = np.stack([dr, dz], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return np.abs(outside + inside)


def _raw_surface_points(spec: ShapeSpec, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points in the canonical frame, exactly on the surface."""
    p = spec.params
    if spec.kind == "sphere":
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs * p["radius"]
    if spec.kind == "torus":
        big_r, small_r = p["major_radius"], p["minor_radius"]
        u = rng.uniform(0.0, 2 * np.pi, n)
        # poloidal angle by rejection: area element goes as R + r cos(theta)
        theta = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0.0, 2 * np.pi, 2 * (n - filled))
            accept = rng.uniform(0.0, 1.0, cand.size) <= (
                (big_r + small_r * np.cos(cand)) / (big_r + small_r)
            )
            good = cand[accept][: n - filled]
            theta[filled : filled + good.size] = good
            filled += good.size
        ring = big_r + small_r * np.cos(theta)
        return np.stack(
            [ring * np.cos(u), ring * np.sin(u), small_r * np.sin(theta)], axis=1
        )
    if spec.kind == "cube":
        ex, ey, ez = p["edge_x"], p["edge_y"], p["edge_z"]
        areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-0.5, 0.5, (n, 2))
        out = np.empty((n, 3))
        half = np.array([ex, ey, ez]) / 2
        for f in range(6):
            m = face == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            out[m, axis] = sign * half[axis]
            out[m, others[0]] = uv[m, 0] * (2 * half[others[0]])
            out[m, others[1]] = uv[m, 1] * (2 * half[others[1]])
        return out
    # cylinder: lateral wall plus both caps, chosen by area
    radius, height = p["radius"], p["height"]
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    comp = rng.choice(3, size=n, p=np.array([lateral, cap, cap])
                      / (lateral + 2 * cap))
    phi = rng.uniform(0.0, 2 * np.pi, n)
    out = np.empty((n, 3))
    wall = comp == 0
    out[wall, 0] = radius * np.cos(phi[wall])
    out[wall, 1] = radius * np.sin(phi[wall])
    out[wall, 2] = rng.uniform(-height / 2, height / 2, int(wall.sum()))
    for c, z in ((1, height / 2), (2, -height / 2)):
        m = comp == c
        rad = radius * np.sqrt(rng.uniform(0.0, 1.0, int(m.sum())))
        out[m, 0] = rad * np.cos(phi[m])
        out[m, 1] = rad * np.sin(phi[m])
        out[m, 2] = z
    return out


def _greedy_keep(n: int, pairs: np.ndarray, sq_dists: np.ndarray,
                 radius: float) -> np.ndarray:
    """Greedy scan keeping points farther than `radius` from all kept ones.

    pairs rows are (i, j) with i < j; point j survives iff none of its
    already-kept lower-index neighbors lies within `radius`.
    """
    if len(pairs) == 0:
        return np.arange(n)
    within = pairs[sq_dists <= radius * radius]
    if len(within) == 0:
        return np.arange(n)
    order = np.argsort(within[:, 1], kind="stable")
    lower = within[order, 0]
    counts = np.bincount(within[:, 1], minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)])
    kept = np.zeros(n, dtype=bool)
    for j in range(n):
        a, b = starts[j], starts[j + 1]
        if a == b or not kept[lower[a:b]].any():
            kept[j] = True
    return np.flatnonzero(kept)


def sample_surface(spec: ShapeSpec, n: int, seed: int = 0,
                   oversample: int = 4) -> np.ndarray:
    """Blue-noise surface sample of exactly n points, posed to world frame.

    Draws oversample*n area-uniform candidates, then greedily keeps
    candidates whose distance to all kept points exceeds a radius found by
    binary search. Greedy cascades make the kept count non-monotonic in
    the radius, so an exact-n radius may not exist; the largest radius
    keeping at least n survivors is used and the scan-order surplus is
    dropped.
    """
    if n < 1:
        raise InvalidArgument(f"n: must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    cand = _raw_surface_points(spec, oversample * n, rng)
    tree = cKDTree(cand)
    d_nn, _ = tree.query(cand[: min(len(cand), 512)], k=2)
    hi = max(float(np.median(d_nn[:, 1])), 1e-12)
    diam = float(np.linalg.norm(cand.max(axis=0) - cand.min(axis=0))) + 1e-9
    cache = {"r": -1.0, "pairs": None, "sq": None}

    def count_at(r):
        if r > cache["r"]:
            got = tree.query_pairs(r, output_type="ndarray")
            diff = cand[got[:, 0]] - cand[got[:, 1]]
            cache.update(r=r, pairs=got,
                         sq=np.einsum("ij,ij->i", diff, diff))
        return len(_greedy_keep(len(cand), cache["pairs"], cache["sq"], r))

    # double from the median candidate spacing until fewer than n survive;
    # tiny n may never drop below (point 0 always survives), so cap at the
    # bounding-box diameter where spacing is maximal anyway
    capped = False
    while count_at(hi) >= n:
        if hi >= diam:
            capped = True
            break
        hi *= 2.0
    if capped:
        lo = hi
    else:
        lo = 0.0
        for _ in range(34):
            mid = 0.5 * (lo + hi)
            if count_at(mid) >= n:
                lo = mid
            else:
                hi = mid
    if lo > 0:
        kept = _greedy_keep(len(cand), cache["pairs"], cache["sq"], lo)
    else:
        kept = np.arange(len(cand))
    assert len(kept) >= n
    return spec.to_world(cand[kept[:n]])


def random_corpus(num_shapes: int, seed: int = 0) -> list[ShapeSpec]:
    """Shape specs cycling through the four kinds with seeded params/poses."""
    rng = np.random.default_rng(seed)
    shapes = []
    for i in range(num_shapes):
        kind = KINDS[i % len(KINDS)]
        if kind == "sphere":
            params = {"radius": rng.uniform(0.6, 1.2)}
        elif kind == "torus":
            big_r = rng.uniform(0.7, 1.1)
            params = {"major_radius": big_r,
                      "minor_radius": big_r * rng.uniform(0.25, 0.45)}
        elif kind == "cube":
            params = {"edge_x": rng.uniform(0.8, 1.6),
                      "edge_y": rng.uniform(0.8, 1.6),
                      "edge_z": rng.uniform(0.8, 1.6)}
        else:
            params = {"radius": rng.uniform(0.4, 0.9),
                      "height": rng.uniform(0.8, 2.0)}
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        shapes.append(ShapeSpec(
            kind=kind,
            params=params,
            rotation=q,
            translation=rng.uniform(-0.3, 0.3, 3),
            id=f"shape_{i:03d}",
        ))
    return shapes


@dataclass
class TrainingSample:
    """One paired training example in the shape's normalized frame."""

    local_in: np.ndarray   # (m, 3) sparse patch
    global_in: np.ndarray  # (m, 3) sparse whole-shape segment
    gt: np.ndarray         # (m * ratio, 3) dense patch
    shape_id: str = ""
    patch_index: int = 0


@dataclass
class DatasetShape:
    """Loaded per-shape data plus its normalization frame."""

    spec: ShapeSpec | None
    shape_id: str
    split: str
    dense: np.ndarray
    samples: list[TrainingSample]
    centroid: np.ndarray
    scale: float


def make_samples(dense_normalized: np.ndarray, num_patches: int, ratio: int,
                 seed: int = 0, subsample: str = "fps",
                 segment_order: str = "random", shape_id: str = "",
                 ) -> list[TrainingSample]:
    """Cut one normalized dense cloud into paired patch/segment samples.

    Dense patches of size M / num_patches become the ground truth; their
    FPS (or seeded random) subsets of size patch / ratio are the local
    inputs; equally sized subsets of the average segments are the global
    inputs, paired by index.
    """
    dense = as_points(dense_normalized)
    m_total = len(dense)
    if m_total % num_patches != 0:
        raise InvalidArgument("model size must be divisible by num_patches")
    patch_points = m_total // num_patches
    if patch_points % ratio != 0:
        raise InvalidArgument("patch size must be divisible by ratio")
    input_points = patch_points // ratio
    patches = extract_patches(dense, num_patches, patch_points)
    segments = average_segments(dense, num_patches, seed=seed,
                                order=segment_order)
    rng = np.random.default_rng(seed + 1)
    samples = []
    for k in range(num_patches):
        gt = dense[patches[k]]
        seg = dense[segments[k]]
        if subsample == "fps":
            local = gt[farthest_point_sample(gt, input_points)]
            glob = seg[farthest_point_sample(seg, input_points)]
        elif subsample == "random":
            local = gt[rng.choice(patch_points, input_points, replace=False)]
            glob = seg[rng.choice(patch_points, input_points, replace=False)]
        else:
            raise InvalidArgument(f"subsample: unknown mode {subsample!r}")
        samples.append(TrainingSample(local_in=local, global_in=glob, gt=gt,
                                      shape_id=shape_id, patch_index=k))
    return samples


def build_dataset(out_dir, shapes: list[ShapeSpec], model_points: int = 8192,
                  num_patches: int = 8, ratio: int = 4, seed: int = 0,
                  subsample: str = "fps", segment_order: str = "random",
                  test_fraction: float = 0.2) -> dict:
    """Generate and write the on-disk dataset; returns the manifest dict.

    Layout: <out_dir>/manifest, and per shape <out_dir>/<id>/dense.xyz,
    patch_{k}_in.xyz, patch_{k}_gt.xyz, seg_{k}_in.xyz. Clouds are stored
    in the shape's normalized frame; the manifest records each frame.
    Shapes are split train/test by id with every round(1/test_fraction)-th
    shape held out.
    """
    os.makedirs(out_dir, exist_ok=True)
    if model_points % num_patches != 0:
        raise InvalidArgument("model_points must be divisible by num_patches")
    if (model_points // num_patches) % ratio != 0:
        raise InvalidArgument("patch size must be divisible by ratio")
    if not (0.0 <= test_fraction < 1.0):
        raise InvalidArgument("test_fraction must be in [0, 1)")
    if test_fraction > 0:
        stride = max(2, int(round(1.0 / test_fraction)))
    else:
        stride = len(shapes) + 1
    manifest: dict = {
        "dataset": {
            "num_shapes": len(shapes),
            "model_points": model_points,
            "num_patches": num_patches,
            "patch_points": model_points // num_patches,
            "input_points": model_points // num_patches // ratio,
            "ratio": ratio,
            "seed": seed,
            "subsample": subsample,
            "segment_order": segment_order,
            "test_stride": stride,
        },
        "shapes": {},
    }
    for i, spec in enumerate(shapes):
        shape_id = spec.id or f"shape_{i:03d}"
        sample_seed = seed * 100003 + i
        dense_world = sample_surface(spec, model_points, seed=sample_seed)
        dense, centroid, scale = normalize_unit_sphere(dense_world)
        split = "test" if i % stride == stride - 1 else "train"
        shape_dir = os.path.join(out_dir, shape_id)
        os.makedirs(shape_dir, exist_ok=True)
        pointio.write_xyz(os.path.join(shape_dir, "dense.xyz"), dense)
        samples = make_samples(dense, num_patches, ratio, seed=sample_seed,
                               subsample=subsample,
                               segment_order=segment_order,
                               shape_id=shape_id)
        for s in samples:
            k = s.patch_index
            pointio.write_xyz(os.path.join(shape_dir, f"patch_{k}_in.xyz"),
                              s.local_in)
            pointio.write_xyz(os.path.join(shape_dir, f"patch_{k}_gt.xyz"),
                              s.gt)
            pointio.write_xyz(os.path.join(shape_dir, f"seg_{k}_in.xyz"),
                              s.global_in)
        manifest["shapes"][shape_id] = {
            "kind": spec.kind,
            "split": split,
            "sample_seed": sample_seed,
            "centroid": centroid,
            "scale": scale,
            "params": dict(spec.params),
            "rotation": spec.rotation,
            "translation": spec.translation,
        }
    _write_manifest(os.path.join(out_dir, "manifest"), manifest)
    return manifest


def _write_manifest(path, manifest: dict) -> None:
    lines = ["[dataset]"]
    for key, value in manifest["dataset"].items():
        lines.append(f"{key} = {value}")
    for shape_id, info in manifest["shapes"].items():
        lines.append("")
        lines.append(f"[shape {shape_id}]")
        lines.append(f"kind = {info['kind']}")
        lines.append(f"split = {info['split']}")
        lines.append(f"sample_seed = {info['sample_seed']}")
        lines.append("centroid = " + " ".join(repr(float(c))
                                              for c in info["centroid"]))
        lines.append(f"scale = {float(info['scale'])!r}")
        for k in sorted(info["params"]):
            lines.append(f"param_{k} = {float(info['params'][k])!r}")
        lines.append("rotation = " + " ".join(repr(float(c))
                                              for c in info["rotation"].ravel()))
        lines.append("translation = " + " ".join(
            repr(float(c)) for c in info["translation"]))
    text = "\n".join(lines) + "\n"
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_manifest(path) -> dict:
    manifest = {"dataset": {}, "shapes": {}}
    section = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ParseError("unterminated section header", line=lineno)
                name = line[1:-1]
                if name == "dataset":
                    section = manifest["dataset"]
                elif name.startswith("shape "):
                    section = {}
                    manifest["shapes"][name[len("shape "):]] = section
                else:
                    raise ParseError(f"unknown section {name!r}", line=lineno)
                continue
            if "=" not in line or section is None:
                raise ParseError("expected 'key = value'", line=lineno)
            key, _, value = line.partition("=")
            section[key.strip()] = value.strip()
    return manifest


def spec_from_manifest(shape_id: str, info: dict) -> ShapeSpec:
    params = {k[len("param_"):]: float(v) for k, v in info.items()
              if k.startswith("param_")}
    rotation = np.array([float(t) for t in info["rotation"].split()]).reshape(3, 3)
    translation = np.array([float(t) for t in info["translation"].split()])
    return ShapeSpec(kind=info["kind"], params=params, rotation=rotation,
                     translation=translation, id=shape_id)


def load_dataset(root) -> tuple[dict, list[DatasetShape]]:
    """Load a dataset directory back into memory.

    Returns (dataset_info, shapes). dataset_info carries the [dataset]
    manifest section with numeric fields converted.
    """
    manifest_path = os.path.join(root, "manifest")
    if not os.path.exists(manifest_path):
        raise ParseError(f"no manifest found under {root!r}")
    manifest = _parse_manifest(manifest_path)
    info = manifest["dataset"]
    for key in ("num_shapes", "model_points", "num_patches", "patch_points",
                "input_points", "ratio", "seed", "test_stride"):
        info[key] = int(info[key])
    shapes = []
    for shape_id, shape_info in manifest["shapes"].items():
        shape_dir = os.path.join(root, shape_id)
        dense = pointio.read_xyz(os.path.join(shape_dir, "dense.xyz"))
        samples = []
        for k in range(info["num_patches"]):
            samples.append(TrainingSample(
                local_in=pointio.read_xyz(
                    os.path.join(shape_dir, f"patch_{k}_in.xyz")),
                global_in=pointio.read_xyz(
                    os.path.join(shape_dir, f"seg_{k}_in.xyz")),
                gt=pointio.read_xyz(
                    os.path.join(shape_dir, f"patch_{k}_gt.xyz")),
                shape_id=shape_id,
                patch_index=k,
            ))
        shapes.append(DatasetShape(
            spec=spec_from_manifest(shape_id, shape_info),
            shape_id=shape_id,
            split=shape_info["split"],
            dense=dense,
            samples=samples,
            centroid=np.array([float(t) for t in
                               shape_info["centroid"].split()]),
            scale=float(shape_info["scale"]),
        ))
    return info, shapes
