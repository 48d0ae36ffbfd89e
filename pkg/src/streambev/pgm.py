"""Binary PGM (P5) read/write for sensor grids, field maps, and instance grids.

8-bit grids hold quantised sensor values; 16-bit grids (maxval 65535,
big-endian per the netpbm format) hold instance ids.
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_pgm", "read_pgm"]


def write_pgm(path, grid: np.ndarray, maxval: int = 255) -> None:
    if grid.ndim != 2:
        raise ValueError(f"PGM grids are 2-D, got shape {grid.shape}")
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    if grid.min() < 0 or grid.max() > maxval:
        raise ValueError(
            f"grid values [{grid.min()}, {grid.max()}] out of range for maxval {maxval}"
        )
    h, w = grid.shape
    dtype = ">u2" if maxval == 65535 else np.uint8
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.round(grid).astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Returns (integer grid, maxval)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    dtype = ">u2" if maxval > 255 else np.uint8
    grid = np.frombuffer(raw, dtype=dtype, count=h * w, offset=pos).reshape(h, w)
    return grid.astype(np.int64), maxval
