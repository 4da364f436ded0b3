"""Binary and CSV persistence for grid fields.

Binary layout (little-endian)::

    b"VLAB" | u32 version | u32 N | u32 count | count * N * N float64

Values are row-major with the first index along ``x1``.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .torus import ScalarGridField, TorusGrid

MAGIC = b"VLAB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed field container."""


def encode_fields(fields: Sequence[ScalarGridField]) -> bytes:
    if not fields:
        raise ValueError("at least one field is required")
    n = fields[0].grid.n_cells
    for f in fields:
        if f.grid.n_cells != n:
            raise ValueError("all fields in one container must share the grid")
    body = np.stack([np.asarray(f.values, dtype="<f8") for f in fields])
    return _HEADER.pack(MAGIC, FORMAT_VERSION, n, len(fields)) + body.tobytes(order="C")


def decode_fields(blob: bytes) -> list[ScalarGridField]:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, n, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _HEADER.size + 8 * count * n * n
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(blob)}")
    grid = TorusGrid(n)
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(count, n, n)
    return [ScalarGridField(grid, np.array(v, dtype=float)) for v in data]


def write_fields(path, fields: Sequence[ScalarGridField]) -> None:
    Path(path).write_bytes(encode_fields(fields))


def read_fields(path) -> list[ScalarGridField]:
    return decode_fields(Path(path).read_bytes())


def field_csv(field: ScalarGridField) -> str:
    """``i,j,x1,x2,value`` rows at cell centres, ``repr`` precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "x1", "x2", "value"])
    n = field.grid.n_cells
    ax = field.grid.axis
    v = field.values
    for i in range(n):
        for j in range(n):
            w.writerow([i, j, repr(float(ax[i])), repr(float(ax[j])), repr(float(v[i, j]))])
    return buf.getvalue()


def read_field_csv(text: str) -> ScalarGridField:
    rows = list(csv.DictReader(io.StringIO(text)))
    n = int(round(len(rows) ** 0.5))
    if n * n != len(rows) or n == 0:
        raise FormatError(f"{len(rows)} rows do not form a square grid")
    vals = np.empty((n, n))
    seen = np.zeros((n, n), dtype=bool)
    for r in rows:
        i, j = int(r["i"]), int(r["j"])
        vals[i, j] = float(r["value"])
        seen[i, j] = True
    if not seen.all():
        raise FormatError("missing cells")
    return ScalarGridField(TorusGrid(n), vals)


def table_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def trajectory_sidecar(traj) -> dict:
    """JSON-ready companion of a trajectory container: snapshot times, ledger
    arrays, solver and field echoes, post-hoc checks."""
    return {
        "direction": traj.direction,
        "times": [float(t) for t in traj.times],
        "ledger": traj.ledger.to_dict(),
        "config": traj.config,
        "field": traj.field,
        "checks": traj.checks,
    }
