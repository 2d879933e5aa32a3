"""Point cloud and table file formats.

XYZ: one "x y z" line per point, plain decimal text, exact round trip
(floats are written with repr precision). PLY: ASCII 1.0 with x/y/z
properties, plus a saliency scalar and rank-colormapped RGB when scores
are attached. CSV: comma separated with a mandatory header row; all
writers emit deterministic bytes for identical inputs.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .exceptions import ParseError
from .validation import as_points, check_scalar_field

# five-stop blue -> cyan -> green -> yellow -> red ramp, interpolated
# linearly on the per-point rank u in [0, 1]
_COLOR_STOPS = np.array(
    [
        [0.00, 0, 0, 255],
        [0.25, 0, 255, 255],
        [0.50, 0, 255, 0],
        [0.75, 255, 255, 0],
        [1.00, 255, 0, 0],
    ],
    dtype=np.float64,
)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_xyz(path, points) -> None:
    pts = as_points(points)
    lines = [" ".join(_fmt(c) for c in row) for row in pts]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            tokens = stripped.split()
            if len(tokens) != 3:
                raise ParseError(
                    f"expected 3 coordinates, got {len(tokens)}", line=lineno
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise ParseError(
                    f"non-numeric coordinate in {tokens!r}", line=lineno
                ) from None
    if not rows:
        raise ParseError("file contains no points")
    return np.array(rows, dtype=np.float64)


def colormap_by_rank(scores) -> np.ndarray:
    """Map scores to RGB uint8 by rank through the five-stop ramp.

    Equal scores keep input order in the ranking (stable sort). A single
    point maps to the low end of the ramp.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    order = np.argsort(s, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    u = rank / (n - 1) if n > 1 else np.zeros(n)
    stops = _COLOR_STOPS[:, 0]
    rgb = np.empty((n, 3))
    for c in range(3):
        rgb[:, c] = np.interp(u, stops, _COLOR_STOPS[:, c + 1])
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def write_ply(path, points, saliency=None) -> None:
    pts = as_points(points)
    n = len(pts)
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if saliency is not None:
        saliency = check_scalar_field(saliency, n, "saliency")
        header += ["property float saliency", "property uchar red",
                   "property uchar green", "property uchar blue"]
        rgb = colormap_by_rank(saliency)
    header.append("end_header")
    lines = list(header)
    for i in range(n):
        fields = [_fmt(c) for c in pts[i]]
        if saliency is not None:
            fields.append(_fmt(saliency[i]))
            fields += [str(int(v)) for v in rgb[i]]
        lines.append(" ".join(fields))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_ply(path):
    """Read the ASCII PLY dialect written by :func:`write_ply`.

    Returns (points, saliency or None). Color columns are derived data
    and are not returned.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError("not a ply file (missing 'ply' magic)", line=1)
    if len(lines) < 2 or lines[1] != "format ascii 1.0":
        raise ParseError("unsupported ply format line", line=2)
    n = None
    props = []
    body_at = None
    for i, line in enumerate(lines[2:], start=3):
        if line == "end_header":
            body_at = i
            break
        if line.startswith("element vertex "):
            try:
                n = int(line.split()[-1])
            except ValueError:
                raise ParseError("bad vertex count", line=i) from None
        elif line.startswith("element "):
            raise ParseError("only vertex elements are supported", line=i)
        elif line.startswith("property "):
            props.append(line.split()[-1])
    if body_at is None or n is None:
        raise ParseError("missing end_header or vertex element")
    if props[:3] != ["x", "y", "z"]:
        raise ParseError("first three properties must be x, y, z")
    has_saliency = "saliency" in props
    rows = lines[body_at:]
    if len(rows) < n:
        raise ParseError(f"expected {n} vertex rows, found {len(rows)}")
    pts = np.empty((n, 3))
    sal = np.empty(n) if has_saliency else None
    sal_col = props.index("saliency") if has_saliency else -1
    for r in range(n):
        tokens = rows[r].split()
        if len(tokens) != len(props):
            raise ParseError(
                f"expected {len(props)} fields, got {len(tokens)}",
                line=body_at + r + 1,
            )
        try:
            pts[r] = [float(tokens[0]), float(tokens[1]), float(tokens[2])]
            if has_saliency:
                sal[r] = float(tokens[sal_col])
        except ValueError:
            raise ParseError("non-numeric vertex field",
                             line=body_at + r + 1) from None
    return pts, sal


def write_csv(path, header: list[str], rows: list[list[str]]) -> None:
    for row in rows:
        if len(row) != len(header):
            raise ParseError(
                f"row width {len(row)} does not match header {len(header)}"
            )
    buf = []
    writer_target = _ListWriter(buf)
    w = csv.writer(writer_target, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _atomic_write(path, "".join(buf))


class _ListWriter:
    def __init__(self, sink):
        self.sink = sink

    def write(self, data):
        self.sink.append(data)


def read_csv(path):
    """Returns (header, rows) with all fields as strings."""
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        table = list(reader)
    if not table:
        raise ParseError("empty csv file")
    return table[0], table[1:]


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
