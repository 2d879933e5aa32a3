"""Dual-input upsampling models.

Three variants share one decoder architecture and differ in where the
pooled shape context comes from:

* ``baseline``   encodes the local patch only; the context is the pool
  of the patch's own per-point features.
* ``relpu_minus`` runs one shared encoder over both the local patch and
  a whole-shape segment, pooling the latter for context.
* ``relpu``      same wiring but with an independently trained second
  encoder for the segment.

A variant built as ``relpu`` whose segment encoder is the same object as
its patch encoder computes exactly what ``relpu_minus`` computes; tests
rely on that identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Adam,
    DiffBuffer,
    LayerParams,
    add,
    concat_tile,
    edge_aggregate,
    he_uniform_layer,
    linear,
    maxpool_rows,
    relu,
    repeat_rows,
    upsample_linear,
)
from .exceptions import InvalidArgument
from .geometry import (
    average_segments,
    denormalize,
    farthest_point_sample,
    knn,
    normalize_unit_sphere,
    partition_patches,
)
from .metrics import chamfer_loss
from .validation import as_points, check_positive_int

VARIANTS = ("baseline", "relpu_minus", "relpu")

# per-component init stream tags: variants sharing a component draw the
# same initial weights, which pairs runs across variants under one seed
_STREAM_TAGS = {"enc_local": 0, "enc_global": 1, "decoder": 2}


@dataclass
class EncoderParams:
    """Per-point MLP, edge aggregation, then a post-aggregation layer."""

    lin1: LayerParams
    lin2: LayerParams
    lin3: LayerParams

    def layers(self):
        return [("lin1", self.lin1), ("lin2", self.lin2), ("lin3", self.lin3)]


@dataclass
class DecoderParams:
    """Two-layer MLP from fused features (plus a 2D replica code) to offsets."""

    hidden: LayerParams
    out: LayerParams

    def layers(self):
        return [("hidden", self.hidden), ("out", self.out)]


@dataclass
class ModelVariant:
    kind: str
    enc_local: EncoderParams
    enc_global: EncoderParams | None
    decoder: DecoderParams
    k_neighbors: int
    ratio: int
    width1: int
    width2: int
    dec_hidden: int
    seed: int

    def components(self):
        items = [("enc_local", self.enc_local)]
        if self.enc_global is not None:
            items.append(("enc_global", self.enc_global))
        items.append(("decoder", self.decoder))
        return items

    def named_parameters(self) -> list[tuple[str, DiffBuffer]]:
        """(name, buffer) pairs; shared buffers are listed once."""
        seen: set[int] = set()
        out = []
        for comp_name, comp in self.components():
            for layer_name, layer in comp.layers():
                for field in ("weight", "bias"):
                    buf = getattr(layer, field)
                    if id(buf) in seen:
                        continue
                    seen.add(id(buf))
                    out.append((f"{comp_name}.{layer_name}.{field}", buf))
        return out

    def parameters(self) -> list[DiffBuffer]:
        return [buf for _, buf in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(buf.value.size for buf in self.parameters())

    @property
    def segment_encoder(self) -> EncoderParams | None:
        """Encoder applied to the whole-shape segment, if the variant has one."""
        if self.kind == "baseline":
            return None
        if self.kind == "relpu_minus":
            return self.enc_local
        return self.enc_global

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "k_neighbors": self.k_neighbors,
            "ratio": self.ratio,
            "width1": self.width1,
            "width2": self.width2,
            "dec_hidden": self.dec_hidden,
            "seed": self.seed,
        }


def _component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _STREAM_TAGS[component]])
    )


def _init_encoder(seed: int, component: str, width1: int,
                  width2: int) -> EncoderParams:
    rng = _component_rng(seed, component)
    return EncoderParams(
        lin1=he_uniform_layer(rng, 3, width1),
        lin2=he_uniform_layer(rng, width1, width2),
        lin3=he_uniform_layer(rng, width2, width2),
    )


def build_variant(kind: str, seed: int = 0, k_neighbors: int = 4,
                  ratio: int = 4, width1: int = 64, width2: int = 128,
                  dec_hidden: int = 32) -> ModelVariant:
    """Construct a freshly initialized model.

    The final decoder layer starts at zero, so an untrained model emits
    pure input replicas (zero offsets). Components are seeded on separate
    streams keyed by (seed, component), so e.g. the patch encoders of all
    three variants start from identical weights under one seed. The
    k_neighbors and dec_hidden defaults are sized for single-core CPU
    training; both are plain config knobs.
    """
    if kind not in VARIANTS:
        raise InvalidArgument(f"kind: expected one of {VARIANTS}, got {kind!r}")
    check_positive_int(k_neighbors, "k_neighbors")
    check_positive_int(width1, "width1")
    check_positive_int(width2, "width2")
    check_positive_int(dec_hidden, "dec_hidden")
    if int(ratio) < 2:
        raise InvalidArgument(f"ratio: must be >= 2, got {ratio}")
    enc_local = _init_encoder(seed, "enc_local", width1, width2)
    enc_global = (_init_encoder(seed, "enc_global", width1, width2)
                  if kind == "relpu" else None)
    dec_rng = _component_rng(seed, "decoder")
    decoder = DecoderParams(
        hidden=he_uniform_layer(dec_rng, 2 * width2 + 2, dec_hidden),
        out=he_uniform_layer(dec_rng, dec_hidden, 3, zero=True),
    )
    return ModelVariant(kind=kind, enc_local=enc_local, enc_global=enc_global,
                        decoder=decoder, k_neighbors=int(k_neighbors),
                        ratio=int(ratio), width1=int(width1),
                        width2=int(width2), dec_hidden=int(dec_hidden),
                        seed=int(seed))


def replica_codes(ratio: int) -> np.ndarray:
    """The fixed 2D codes distinguishing the r replicas of each point.

    Codes are the first `ratio` nodes, in row-major order, of the
    ceil(sqrt(ratio))-per-side square grid spanning [-0.2, 0.2]^2.
    A single replica gets (0, 0).
    """
    r = int(ratio)
    if r < 1:
        raise InvalidArgument(f"ratio: must be >= 1, got {ratio}")
    side = int(np.ceil(np.sqrt(r)))
    axis = np.linspace(-0.2, 0.2, side) if side > 1 else np.zeros(1)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 2)[:r]


def knn_batch(points: np.ndarray, k: int) -> np.ndarray:
    """Neighbor tables for a stack of clouds, (B, n, 3) -> (B, n, k)."""
    return np.stack([knn(points[b], k) for b in range(points.shape[0])])


def _encode(enc: EncoderParams, x: DiffBuffer,
            neighbors: np.ndarray) -> tuple[DiffBuffer, DiffBuffer]:
    h = relu(linear(x, enc.lin1.weight, enc.lin1.bias))
    h = relu(linear(h, enc.lin2.weight, enc.lin2.bias))
    e = edge_aggregate(h, neighbors)
    f = relu(linear(e, enc.lin3.weight, enc.lin3.bias))
    return f, maxpool_rows(f)


def upsample_decode(decoder: DecoderParams, fused: DiffBuffer,
                    local_pts: DiffBuffer, ratio: int) -> DiffBuffer:
    """Expand fused per-point features into ratio points per input point.

    Each feature row is repeated, tagged with its replica code, and mapped
    to a 3D offset added onto the repeated input coordinate.
    """
    if int(ratio) < 2:
        raise InvalidArgument(f"ratio: must be >= 2, got {ratio}")
    h = relu(upsample_linear(fused, replica_codes(ratio),
                             decoder.hidden.weight, decoder.hidden.bias))
    offsets = linear(h, decoder.out.weight, decoder.out.bias)
    return add(offsets, repeat_rows(local_pts, ratio))


@dataclass
class ForwardLeaves:
    """Input buffers of one forward pass, for gradient readout."""

    local: DiffBuffer
    global_: DiffBuffer | None


def _neighbor_table(arr: np.ndarray, k: int, batched: bool) -> np.ndarray:
    """KNN table for a cloud, clamped to the neighbors that exist.

    Clouds with fewer than k + 1 points fall back to all other points;
    a single-point cloud gets an empty table (no edge signal).
    """
    eff = min(int(k), arr.shape[-2] - 1)
    if eff < 1:
        return np.zeros(arr.shape[:-1] + (0,), dtype=np.int64)
    return knn_batch(arr, eff) if batched else knn(arr, eff)


def model_forward(model: ModelVariant, local_pts, global_pts=None,
                  neighbors_local=None, neighbors_global=None,
                  ) -> tuple[DiffBuffer, ForwardLeaves]:
    """Differentiable upsampling pass.

    Accepts one sample ((m, 3) arrays) or a stack ((B, m, 3)); the stack
    must pair local and segment clouds row-for-row. Neighbor tables are
    computed from the inputs unless supplied. Returns the predicted
    points, (..., m * ratio, 3), plus the input leaves.
    """
    local_arr = np.asarray(local_pts, dtype=np.float64)
    batched = local_arr.ndim == 3
    needs_global = model.kind != "baseline"
    if needs_global and global_pts is None:
        raise InvalidArgument(f"{model.kind} forward requires a segment cloud")
    if neighbors_local is None:
        neighbors_local = _neighbor_table(local_arr, model.k_neighbors,
                                          batched)
    local_in = DiffBuffer(local_arr)
    f_local, g_local = _encode(model.enc_local, local_in, neighbors_local)
    global_in = None
    if needs_global:
        global_arr = np.asarray(global_pts, dtype=np.float64)
        if global_arr.ndim != local_arr.ndim:
            raise InvalidArgument("local and segment clouds must both be "
                                  "single samples or both be stacks")
        if neighbors_global is None:
            neighbors_global = _neighbor_table(global_arr, model.k_neighbors,
                                               batched)
        global_in = DiffBuffer(global_arr)
        _, context = _encode(model.segment_encoder, global_in,
                             neighbors_global)
    else:
        context = g_local
    fused = concat_tile(f_local, context)
    pred = upsample_decode(model.decoder, fused, local_in, model.ratio)
    return pred, ForwardLeaves(local=local_in, global_=global_in)


def train_step(model: ModelVariant, optimizer: Adam, local_batch,
               global_batch, gt_batch, neighbors_local=None,
               neighbors_global=None) -> float:
    """One optimization step on a stacked batch; returns the batch loss."""
    pred, _ = model_forward(model, local_batch, global_batch,
                            neighbors_local=neighbors_local,
                            neighbors_global=neighbors_global)
    loss = chamfer_loss(pred, np.asarray(gt_batch, dtype=np.float64))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.value.item())


def upsample_normalized(model: ModelVariant, normed, num_patches: int = 8,
                        seed: int = 0, segment_order: str = "random",
                        ) -> np.ndarray:
    """Upsample an already unit-frame cloud by `model.ratio`.

    The cloud is partitioned into num_patches equal spatial cells
    paired with equally many whole-shape segments, pushed through the
    model as one stack, and the union of predictions is thinned back to
    exactly ratio * n points by farthest point sampling. Partitioned
    (not overlapping) patches plus skipping the thinning when the union
    is already the right size keep an offset-free model an exact
    pass-through.
    """
    pts = as_points(normed, min_points=2)
    check_positive_int(num_patches, "num_patches")
    n = len(pts)
    if n % num_patches != 0:
        raise InvalidArgument(
            f"num_patches: {num_patches} does not divide cloud size {n}")
    patch_size = n // num_patches
    if patch_size <= model.k_neighbors:
        raise InvalidArgument(
            f"num_patches: patch size {patch_size} must exceed k_neighbors "
            f"{model.k_neighbors}")
    patch_idx = partition_patches(pts, num_patches)
    seg_idx = average_segments(pts, num_patches, seed=seed,
                               order=segment_order)
    pred, _ = model_forward(model, pts[patch_idx], pts[seg_idx])
    union = pred.value.reshape(-1, 3)
    target = model.ratio * n
    if len(union) == target:
        return union
    return union[farthest_point_sample(union, target)]


def upsample_cloud(model: ModelVariant, points, num_patches: int = 8,
                   seed: int = 0, segment_order: str = "random") -> np.ndarray:
    """Upsample a full cloud by `model.ratio` via patch/segment tiling.

    Normalizes to the unit sphere, runs the patch/segment pipeline, and
    maps the prediction back to the input frame.
    """
    pts = as_points(points, min_points=2)
    normed, centroid, scale = normalize_unit_sphere(pts)
    up = upsample_normalized(model, normed, num_patches=num_patches,
                             seed=seed, segment_order=segment_order)
    return denormalize(up, centroid, scale)
