"""Minimal reverse-mode differentiation core and network building blocks.

A :class:`DiffBuffer` wraps a float64 array together with its gradient and
a backward rule; calling ``backward()`` on a scalar loss buffer walks the
recorded graph in reverse topological order and accumulates gradients into
every upstream buffer, including network inputs.

Values are matrices (rows x cols). Every op also accepts one leading batch
axis and applies to the trailing two axes; gradients of batched uses are
the sums over the batch for shared parameters. Selection ops (relu masks,
row max pooling, edge aggregation) route gradient to the selected entries
only, breaking ties toward the lowest index / earliest neighbor slot.
"""

from __future__ import annotations

import ctypes
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgument, TrainingDiverged


def _keep_large_allocations_on_heap() -> None:
    """Ask glibc to recycle multi-megabyte buffers instead of unmapping them.

    Training steps churn through dozens of MB-scale temporaries; with the
    default mmap threshold each one is returned to the kernel on free and
    re-faulted page by page on the next step, which costs more than the
    arithmetic. Raising the thresholds keeps those blocks on the heap.
    Failure is harmless (non-glibc platforms keep their defaults).
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_keep_large_allocations_on_heap()


class DiffBuffer:
    """A value in the computation graph with its gradient slot.

    Leaves are created directly from arrays; ops return buffers wired to
    their parents. ``grad`` is allocated on first use and accumulates
    across backward passes until cleared.
    """

    __slots__ = ("value", "_grad", "_parents", "_rule", "_backward_done")

    def __init__(self, value, _parents=(), _rule=None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim not in (2, 3):
            raise InvalidArgument(
                f"DiffBuffer: expected a matrix or batch of matrices, "
                f"got shape {self.value.shape}"
            )
        self._grad = None
        self._parents = _parents
        self._rule = _rule
        self._backward_done = False

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def backward(self):
        """Accumulate d(self)/d(upstream) into every upstream buffer.

        Only defined for scalar-valued buffers (a 1x1 matrix). Calling it
        twice on the same buffer without rebuilding the graph is an error:
        the graph records one evaluation.
        """
        if self.value.size != 1:
            raise InvalidArgument(
                f"backward: loss must be scalar, got shape {self.value.shape}"
            )
        if self._backward_done:
            raise InvalidArgument("backward: already called on this buffer")
        self._backward_done = True
        order = self._toposort()
        self.grad[...] = 1.0
        for node in order:
            # a node no gradient reached has an all-zero contribution;
            # skipping it keeps dead subgraphs (e.g. unused inputs) cheap
            if node._rule is not None and node._grad is not None:
                node._rule(node._grad)

    def _toposort(self):
        """Reverse topological order starting at self, iteratively."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return list(reversed(order))


def _nd(x: DiffBuffer) -> int:
    return x.value.ndim


def _accum(buf: DiffBuffer, arr: np.ndarray, own: bool = False) -> None:
    """Add `arr` into buf's gradient.

    First contribution installs the array directly when the caller owns it
    (freshly computed, float64, full shape); views and borrowed arrays are
    copied. Avoids the zero-fill-then-add double pass on hot paths.
    """
    if buf._grad is None:
        if own and arr.shape == buf.value.shape:
            buf._grad = arr
        else:
            buf._grad = np.array(arr, dtype=np.float64)
            if buf._grad.shape != buf.value.shape:
                buf._grad = np.broadcast_to(
                    buf._grad, buf.value.shape).copy()
    else:
        buf._grad += arr


def linear(x: DiffBuffer, weight: DiffBuffer, bias: DiffBuffer) -> DiffBuffer:
    """Affine map on rows: x @ weight + bias."""
    if weight.value.ndim != 2 or bias.value.shape != (1, weight.value.shape[1]):
        raise InvalidArgument("linear: weight must be (din, dout), bias (1, dout)")
    if x.value.shape[-1] != weight.value.shape[0]:
        raise InvalidArgument(
            f"linear: input cols {x.value.shape[-1]} != weight rows "
            f"{weight.value.shape[0]}"
        )
    out_value = x.value @ weight.value + bias.value

    def rule(g):
        _accum(x, g @ weight.value.T, own=True)
        if _nd(x) == 3:
            # flatten batch and row axes so the contraction hits BLAS
            din = x.value.shape[-1]
            dout = g.shape[-1]
            _accum(weight,
                   x.value.reshape(-1, din).T @ g.reshape(-1, dout),
                   own=True)
        else:
            _accum(weight, x.value.T @ g, own=True)
        _accum(bias, g.reshape(-1, g.shape[-1]).sum(axis=0)[None, :],
               own=True)

    return DiffBuffer(out_value, (x, weight, bias), rule)


def upsample_linear(x: DiffBuffer, codes, weight: DiffBuffer,
                    bias: DiffBuffer) -> DiffBuffer:
    """Affine map of [x_i || codes_j] over all (row i, code row j) pairs.

    Equivalent to repeating every row of x len(codes) times, appending the
    code block cyclically, and applying one affine layer, but computed as
    two small products (x once per row, codes once per slot) instead of a
    full-size one. Output row i * len(codes) + j pairs x row i with code
    row j. No gradient flows to `codes`.
    """
    cd = np.asarray(codes, dtype=np.float64)
    if cd.ndim != 2 or cd.shape[0] < 1:
        raise InvalidArgument("upsample_linear: codes must be (r, d_c), r >= 1")
    din = x.value.shape[-1]
    if weight.value.ndim != 2 or weight.value.shape[0] != din + cd.shape[1]:
        raise InvalidArgument(
            "upsample_linear: weight rows != x cols + code cols")
    if bias.value.shape != (1, weight.value.shape[1]):
        raise InvalidArgument("upsample_linear: bias must be (1, dout)")
    r, m = cd.shape[0], x.value.shape[-2]
    dout = weight.value.shape[1]
    w_main = weight.value[:din]
    w_code = weight.value[din:]
    base = x.value @ w_main
    code_term = cd @ w_code + bias.value  # (r, dout)
    if x.value.ndim == 3:
        b = x.value.shape[0]
        out_value = (base[:, :, None, :] + code_term).reshape(b, m * r, dout)
    else:
        out_value = (base[:, None, :] + code_term).reshape(m * r, dout)

    def rule(g):
        # replicas of one input row share its x contribution: collapse them
        gsum = g.reshape(g.shape[:-2] + (m, r, dout)).sum(axis=-2)
        _accum(x, gsum @ w_main.T, own=True)
        top = x.value.reshape(-1, din).T @ gsum.reshape(-1, dout)
        gcode = g.reshape(-1, r, dout).sum(axis=0)  # (r, dout)
        _accum(weight, np.concatenate([top, cd.T @ gcode], axis=0),
               own=True)
        _accum(bias, gcode.sum(axis=0)[None, :], own=True)

    return DiffBuffer(out_value, (x, weight, bias), rule)


def relu(x: DiffBuffer) -> DiffBuffer:
    """Elementwise max(0, x); gradient flows only through positive entries."""
    mask = x.value > 0

    def rule(g):
        # g is this node's own finished gradient; masking it in place and
        # handing it over avoids an allocation on the hottest path
        np.multiply(g, mask, out=g)
        _accum(x, g, own=True)

    return DiffBuffer(x.value * mask, (x,), rule)


def maxpool_rows(x: DiffBuffer) -> DiffBuffer:
    """Column-wise max over rows, keeping a single-row result.

    Gradient routes to the first (lowest-index) maximizing row per column.
    """
    idx = x.value.argmax(axis=-2)  # first occurrence on ties
    out_value = np.take_along_axis(x.value, idx[..., None, :], axis=-2)

    def rule(g):
        routed = np.zeros_like(x.value)
        np.put_along_axis(routed, idx[..., None, :], g, axis=-2)
        _accum(x, routed, own=True)

    return DiffBuffer(out_value, (x,), rule)


def _bit_dtype(k: int):
    for dt in (np.uint8, np.uint16, np.uint32, np.uint64):
        if k <= 8 * np.dtype(dt).itemsize:
            return dt
    raise InvalidArgument(f"edge_aggregate: at most 64 neighbors, got {k}")


def edge_aggregate(x: DiffBuffer, neighbors: np.ndarray) -> DiffBuffer:
    """Max over graph neighbors of the feature differences (x_j - x_i).

    `neighbors` is an (n, k) index table (optionally batched (B, n, k))
    over the rows of x, fixed during differentiation. Per output entry the
    gradient routes to the maximizing neighbor (+1) and the center point
    (-1); value ties keep the earliest neighbor slot, i.e. the nearest /
    lowest-index neighbor under the knn ordering.
    """
    nbr = np.asarray(neighbors)
    batched = _nd(x) == 3
    if nbr.ndim != x.value.ndim:
        raise InvalidArgument("edge_aggregate: neighbors rank must match input")
    n, d = x.value.shape[-2], x.value.shape[-1]
    k = nbr.shape[-1]
    if k == 0:
        # no neighbors (single-point cloud): the aggregate over an empty
        # difference set is zero, and contributes no gradient
        return DiffBuffer(np.zeros_like(x.value), (x,), lambda g: None)
    bit_dt = _bit_dtype(k)
    x2 = x.value.reshape(-1, d)
    if batched:
        b = x.value.shape[0]
        flat_nbr = nbr + (np.arange(b) * n)[:, None, None]
    else:
        flat_nbr = nbr
    # two passes in place of masked writes: running maximum, then a match
    # bitmask whose lowest set bit is the earliest maximizing slot
    cands = [np.take(x2, flat_nbr[..., kk].ravel(), axis=0)
             .reshape(x.value.shape) for kk in range(k)]
    best = cands[0].copy()
    for cand in cands[1:]:
        np.maximum(best, cand, out=best)
    bits = np.zeros(best.shape, dtype=bit_dt)
    for kk, cand in enumerate(cands):
        bits |= (cand == best).astype(bit_dt) << bit_dt(kk)
    del cands
    lowest = bits & (~bits + bit_dt(1))  # isolate lowest set bit
    slot = np.bitwise_count(lowest - bit_dt(1))
    out_value = best - x.value

    def rule(g):
        winner = np.take_along_axis(nbr, slot, axis=-1)  # (..., n, d) row ids
        flat_rows = winner.reshape(-1, d)
        if batched:
            offs = (np.arange(b) * n).repeat(n)[:, None]
            flat_rows = flat_rows + offs
        lin = flat_rows * d + np.arange(d)[None, :]
        scattered = np.bincount(
            lin.ravel(), weights=g.reshape(-1, d).ravel(),
            minlength=x.value.size,
        )
        _accum(x, scattered.reshape(x.value.shape) - g, own=True)

    return DiffBuffer(out_value, (x,), rule)


def concat_tile(local: DiffBuffer, global_: DiffBuffer) -> DiffBuffer:
    """Append a single global feature row to every local feature row.

    local is (m, d), global is (1, d); output row i is
    [local_i || global]. Batched inputs pair row-wise along the batch.
    """
    if local.value.shape[:-2] != global_.value.shape[:-2]:
        raise InvalidArgument("concat_tile: batch shapes differ")
    if global_.value.shape[-2] != 1:
        raise InvalidArgument("concat_tile: global feature must have one row")
    m = local.value.shape[-2]
    d = local.value.shape[-1]
    tiled = np.broadcast_to(
        global_.value, local.value.shape[:-1] + (global_.value.shape[-1],)
    )
    out_value = np.concatenate([local.value, tiled], axis=-1)

    def rule(g):
        _accum(local, g[..., :d])
        _accum(global_, g[..., d:].sum(axis=-2, keepdims=True), own=True)

    return DiffBuffer(out_value, (local, global_), rule)


def repeat_rows(x: DiffBuffer, r: int) -> DiffBuffer:
    """Repeat every row r times consecutively; gradient sums the replicas."""
    r = int(r)
    if r < 1:
        raise InvalidArgument(f"repeat_rows: r must be >= 1, got {r}")
    out_value = np.repeat(x.value, r, axis=-2)
    m, d = x.value.shape[-2], x.value.shape[-1]

    def rule(g):
        _accum(x, g.reshape(g.shape[:-2] + (m, r, d)).sum(axis=-2), own=True)

    return DiffBuffer(out_value, (x,), rule)


def concat_cols(a: DiffBuffer, b: DiffBuffer) -> DiffBuffer:
    """Column-wise concatenation of two row-aligned buffers."""
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise InvalidArgument("concat_cols: row shapes differ")
    da = a.value.shape[-1]
    out_value = np.concatenate([a.value, b.value], axis=-1)

    def rule(g):
        _accum(a, g[..., :da])
        _accum(b, g[..., da:])

    return DiffBuffer(out_value, (a, b), rule)


def add(a: DiffBuffer, b: DiffBuffer) -> DiffBuffer:
    """Elementwise sum of two same-shape buffers."""
    if a.value.shape != b.value.shape:
        raise InvalidArgument("add: shapes differ")

    def rule(g):
        _accum(a, g)
        _accum(b, g)

    return DiffBuffer(a.value + b.value, (a, b), rule)


def weighted_sum(x: DiffBuffer, weights) -> DiffBuffer:
    """Scalar contraction sum(x * weights) with fixed weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.value.shape:
        raise InvalidArgument("weighted_sum: weights shape differs from value")
    out_value = np.array([[float((x.value * w).sum())]])

    def rule(g):
        _accum(x, g[0, 0] * w, own=True)

    return DiffBuffer(out_value, (x,), rule)


@dataclass
class LayerParams:
    """Weight/bias pair of one affine layer."""

    weight: DiffBuffer
    bias: DiffBuffer

    def buffers(self) -> list[DiffBuffer]:
        return [self.weight, self.bias]


def he_uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int,
                     zero: bool = False) -> LayerParams:
    """Fan-in scaled uniform init; `zero` makes an all-zero layer."""
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return LayerParams(DiffBuffer(w), DiffBuffer(np.zeros((1, fan_out))))


class Adam:
    """Adam over a fixed ordered list of parameter buffers.

    beta1 = 0.9, beta2 = 0.999, eps = 1e-8. The learning rate is mutable
    so a schedule can adjust it between epochs. Non-finite gradients raise
    TrainingDiverged before any parameter is touched.
    """

    def __init__(self, params: list[DiffBuffer], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise TrainingDiverged("non-finite gradient in optimizer step")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        out = {"step_count": np.int64(self.step_count), "lr": np.float64(self.lr)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        for i in range(len(self.params)):
            if state[f"m{i}"].shape != self.params[i].value.shape:
                raise InvalidArgument("optimizer state shape mismatch")
            self.m[i] = np.array(state[f"m{i}"], dtype=np.float64)
            self.v[i] = np.array(state[f"v{i}"], dtype=np.float64)


def scheduled_lr(base_lr: float, epoch: int, decay: float = 0.95,
                 every: int = 20) -> float:
    """Multiplicative step decay: base_lr * decay ** (epoch // every)."""
    return base_lr * decay ** (epoch // every)
