"""Per-point contribution analysis for upsampling models.

Scores each input point by how strongly it influences the loss: the
Chamfer loss is backpropagated to the input coordinates, reduced to a
scalar per point, negated, and rescaled by a power of the point's distance
from the cloud centroid so that far-from-center structure is surfaced.
An exact leave-one-out oracle and a score-versus-radius line fit support
validating and summarizing the maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateFit, InvalidArgument, NumericalError
from .metrics import chamfer_distance, chamfer_loss
from .network import ModelVariant, model_forward
from .validation import as_points

SALIENCY_MODES = ("radial", "algorithm1")


def input_gradient(model: ModelVariant, local_pts, global_pts, gt
                   ) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradient of the Chamfer loss at every input coordinate.

    Runs one differentiable forward pass on a single sample and returns
    (d loss / d local point, d loss / d segment point); the second entry
    is None for models without a segment input. Parameter values are not
    modified and parameter gradient slots are left cleared.
    """
    gt_arr = as_points(gt, "gt")
    pred, leaves = model_forward(model, local_pts, global_pts)
    loss = chamfer_loss(pred, gt_arr)
    loss.backward()
    local_grad = np.array(leaves.local.grad)
    global_grad = (None if leaves.global_ is None
                   else np.array(leaves.global_.grad))
    for p in model.parameters():
        p.zero_grad()
    if not np.isfinite(local_grad).all() or (
            global_grad is not None
            and not np.isfinite(global_grad).all()):
        raise NumericalError("input_gradient: non-finite gradient")
    return local_grad, global_grad


@dataclass
class SaliencyReport:
    """Per-point contribution scores with the quantities they derive from.

    ``scores`` is the signed contribution; ``normalized`` rescales it
    min-max to [0, 1] (all zeros when the scores are constant), matching
    the rank color-coding used for visualization.
    """

    gradients: np.ndarray           # (n, 3) loss gradient per point
    radii: np.ndarray               # (n,) distance to the cloud centroid
    radial_derivative: np.ndarray   # (n,) outward slope of the loss
    scores: np.ndarray              # (n,) contribution scores
    normalized: np.ndarray          # (n,) scores min-max mapped to [0, 1]
    alpha: float
    mode: str


def spherical_saliency(gradients, cloud, alpha: float = 0.0,
                       mode: str = "radial") -> SaliencyReport:
    """Score each point's contribution, rescaled by radial distance.

    The per-point signal is the loss gradient reduced to a scalar: its
    projection onto the outward ray from the cloud centroid (mode
    "radial", signed) or its norm (mode "algorithm1", the magnitude
    convention). The score is the negated signal times r^(1 + alpha);
    points sitting exactly on the centroid score zero. The integer part
    of the exponent is applied by repeated multiplication, so raising
    alpha by one rescales every score by exactly its r.
    """
    pts = as_points(cloud, "cloud", min_points=2)
    grads = np.array(gradients, dtype=np.float64)
    if grads.shape != pts.shape:
        raise InvalidArgument(
            f"gradients: shape {grads.shape} does not match cloud "
            f"{pts.shape}")
    if not np.isfinite(grads).all():
        raise InvalidArgument("gradients: non-finite values")
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha < 0:
        raise InvalidArgument(f"alpha: must be >= 0, got {alpha}")
    if mode not in SALIENCY_MODES:
        raise InvalidArgument(
            f"mode: expected one of {SALIENCY_MODES}, got {mode!r}")
    centroid = pts.mean(axis=0)
    offsets = pts - centroid
    radii = np.linalg.norm(offsets, axis=1)
    safe = np.where(radii > 0, radii, 1.0)
    radial_derivative = np.einsum("ij,ij->i", grads, offsets) / safe
    radial_derivative[radii == 0] = 0.0
    signal = (np.linalg.norm(grads, axis=1) if mode == "algorithm1"
              else radial_derivative)
    scores = -signal * radii
    frac, whole = np.modf(alpha)
    if frac:
        scores = scores * radii**frac
    for _ in range(int(whole)):
        scores = scores * radii
    span = scores.max() - scores.min()
    normalized = (np.zeros_like(scores) if span == 0
                  else (scores - scores.min()) / span)
    return SaliencyReport(gradients=grads, radii=radii,
                          radial_derivative=radial_derivative,
                          scores=scores, normalized=normalized,
                          alpha=alpha, mode=mode)


def drop_point_oracle(model: ModelVariant, local_pts, global_pts, gt,
                      index: int) -> float:
    """Exact loss change from deleting one local input point.

    Returns CD(forward(full), gt) - CD(forward(local minus the point),
    gt): negative values mean the point was helping. The segment input,
    when present, stays intact; only the local cloud loses the point.
    """
    pts = as_points(local_pts, "local_pts", min_points=2)
    gt_arr = as_points(gt, "gt")
    index = int(index)
    if not 0 <= index < len(pts):
        raise InvalidArgument(
            f"index: must be in [0, {len(pts)}), got {index}")
    full_pred, _ = model_forward(model, pts, global_pts)
    reduced_pred, _ = model_forward(model, np.delete(pts, index, axis=0),
                                    global_pts)
    return float(chamfer_distance(full_pred.value, gt_arr)
                 - chamfer_distance(reduced_pred.value, gt_arr))


@dataclass
class RadialFit:
    """Line fit of contribution scores against radial distance.

    ``slope`` and ``r_squared`` describe the primary through-origin fit
    (uncentered R^2, the no-intercept convention); the ordinary fit with
    an intercept is reported alongside.
    """

    slope: float
    r_squared: float
    ols_slope: float
    ols_intercept: float


def saliency_regression(report: SaliencyReport) -> RadialFit:
    """Least-squares fit of scores against radii.

    The primary fit is constrained through the origin (score = slope * r);
    an ordinary slope and intercept are included as a secondary summary.
    Raises DegenerateFit when every radius is identical, since the
    ordinary slope is then undefined.
    """
    r = report.radii
    s = report.scores
    if len(r) < 2 or (r == r[0]).all():
        raise DegenerateFit(
            "saliency_regression: needs at least two distinct radii")
    slope = float((s * r).sum() / (r * r).sum())
    residual = s - slope * r
    total = float((s * s).sum())
    r_squared = (1.0 if total == 0.0
                 else 1.0 - float((residual * residual).sum()) / total)
    r_mean = r.mean()
    s_mean = s.mean()
    dr = r - r_mean
    ols_slope = float((dr * (s - s_mean)).sum() / (dr * dr).sum())
    ols_intercept = float(s_mean - ols_slope * r_mean)
    return RadialFit(slope=slope, r_squared=r_squared,
                     ols_slope=ols_slope, ols_intercept=ols_intercept)
