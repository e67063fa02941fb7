"""Portable text format for 2-D float grids (images, sinograms, recons).

    TOMOUQ-GRID 1
    dtype float64
    shape <rows> <cols>
    <one row of %.17g values per line>

%.17g round-trips float64 exactly, so save/load is lossless and files are
bitwise-reproducible for identical arrays.
"""

from __future__ import annotations

import numpy as np

MAGIC = "TOMOUQ-GRID"
VERSION = 1


class GridFormatError(ValueError):
    pass


def save_grid(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise GridFormatError(f"grids are 2-D, got shape {arr.shape}")
    with open(path, "w") as fh:
        fh.write(f"{MAGIC} {VERSION}\n")
        fh.write("dtype float64\n")
        fh.write(f"shape {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_grid(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != MAGIC:
            raise GridFormatError(f"not a grid file: {path}")
        if int(header[1]) != VERSION:
            raise GridFormatError(f"unsupported grid version {header[1]}: {path}")
        dtype_line = fh.readline().split()
        if dtype_line[:1] != ["dtype"] or dtype_line[1] != "float64":
            raise GridFormatError(f"unsupported dtype in {path}")
        shape_line = fh.readline().split()
        if shape_line[:1] != ["shape"] or len(shape_line) != 3:
            raise GridFormatError(f"malformed shape line in {path}")
        rows, cols = int(shape_line[1]), int(shape_line[2])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (rows, cols):
        raise GridFormatError(
            f"payload shape {data.shape} does not match header ({rows}, {cols}) in {path}")
    return data
