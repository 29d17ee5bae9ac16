"""Field dump formats.

Binary IAF1: magic ``IAF1``, then nx, ny as 8-byte little-endian unsigned,
x0, y0, h as 8-byte little-endian IEEE-754, then nx*ny float64 values
row-major with y fastest. CSV alternative: header ``x,y,value``, one node per
row, 17 significant digits so round trips are bit exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .fields import GridSpec, ScalarField

MAGIC = b"IAF1"
_HEADER = struct.Struct("<4sQQddd")


def write_field(field: ScalarField, path: str | Path) -> None:
    g = field.grid
    header = _HEADER.pack(MAGIC, g.nx, g.ny, g.x0, g.y0, g.h)
    data = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    Path(path).write_bytes(header + data)


def read_field(path: str | Path) -> ScalarField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    magic, nx, ny, x0, y0, h = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * nx * ny
    if len(raw) != expected:
        raise InputError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(nx, ny)
    grid = GridSpec(x0, y0, int(nx), int(ny), h)
    return ScalarField(grid, values)


def write_field_csv(field: ScalarField, path: str | Path) -> None:
    g = field.grid
    lines = ["x,y,value"]
    xs, ys = g.xs, g.ys
    for i in range(g.nx):
        for j in range(g.ny):
            lines.append(f"{xs[i]:.17g},{ys[j]:.17g},{field.values[i, j]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_csv(path: str | Path) -> ScalarField:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != "x,y,value":
        raise InputError(f"{path}: expected 'x,y,value' header")
    rows = np.array(
        [[float(t) for t in line.split(",")] for line in text[1:]], dtype=np.float64
    )
    if rows.ndim != 2 or rows.shape[1] != 3:
        raise InputError(f"{path}: malformed rows")
    xs = np.unique(rows[:, 0])
    ys = np.unique(rows[:, 1])
    nx, ny = len(xs), len(ys)
    if nx * ny != rows.shape[0]:
        raise InputError(f"{path}: nodes do not form a full grid")
    hx = np.diff(xs)
    hy = np.diff(ys)
    h = hx[0] if nx > 1 else (hy[0] if ny > 1 else None)
    if h is None:
        raise InputError(f"{path}: cannot infer spacing from a single node")
    tol = 1e-9 * abs(h)
    if (nx > 1 and np.max(np.abs(hx - h)) > tol) or (ny > 1 and np.max(np.abs(hy - h)) > tol):
        raise InputError(f"{path}: nodes are not uniformly spaced with one shared h")
    grid = GridSpec(float(xs[0]), float(ys[0]), nx, ny, float(h))
    values = np.empty((nx, ny))
    ix = np.searchsorted(xs, rows[:, 0])
    iy = np.searchsorted(ys, rows[:, 1])
    values[ix, iy] = rows[:, 2]
    return ScalarField(grid, values)
