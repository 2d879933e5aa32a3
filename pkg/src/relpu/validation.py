"""Input validation helpers.

Every public entry point funnels array-like inputs through these so that
shape and finiteness errors surface with a consistent exception type
(:class:`~relpu.exceptions.InvalidArgument`) and a message naming the
offending argument.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidArgument


def as_points(x, name: str = "points", min_points: int = 1) -> np.ndarray:
    """Coerce ``x`` to a float64 (n, 3) array.

    Accepts anything ``np.asarray`` understands plus objects exposing a
    ``.points`` attribute (e.g. :class:`~relpu.geometry.PointCloud`).
    """
    if hasattr(x, "points"):
        x = x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(
            f"{name}: expected an (n, 3) array, got shape {arr.shape}"
        )
    if arr.shape[0] < min_points:
        raise InvalidArgument(
            f"{name}: need at least {min_points} point(s), got {arr.shape[0]}"
        )
    if not np.isfinite(arr).all():
        raise InvalidArgument(f"{name}: contains non-finite coordinates")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise InvalidArgument(f"{name}: expected an integer, got {value!r}")
    if value < minimum:
        raise InvalidArgument(f"{name}: must be >= {minimum}, got {value}")
    return int(value)


def check_nonnegative_float(value, name: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise InvalidArgument(f"{name}: expected a number, got {value!r}") from None
    if not np.isfinite(v) or v < 0:
        raise InvalidArgument(f"{name}: must be a finite value >= 0, got {value!r}")
    return v


def check_scalar_field(scalar, n: int, name: str = "scalar") -> np.ndarray:
    arr = np.asarray(scalar, dtype=np.float64)
    if arr.shape != (n,):
        raise InvalidArgument(f"{name}: expected shape ({n},), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidArgument(f"{name}: contains non-finite values")
    return arr
