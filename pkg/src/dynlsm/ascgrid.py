"""ESRI ASCII grid (``.asc``) reading and writing."""

from __future__ import annotations

import numpy as np

from dynlsm.data_model import GridGeometry
from dynlsm.errors import DataError

NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def read_asc(path) -> tuple[GridGeometry, np.ndarray]:
    """Read an ASCII grid; nodata cells come back as NaN.

    Both ``xllcorner`` and ``xllcenter`` header styles are accepted.
    """
    header = {}
    with open(path) as fh:
        lines = fh.readlines()
    body_start = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key in _HEADER_KEYS or key in ("xllcenter", "yllcenter"):
            if len(parts) != 2:
                raise DataError(f"{path}: malformed header line {line.strip()!r}")
            header[key] = float(parts[1])
            body_start = i + 1
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise DataError(f"{path}: missing header key {key}")
    ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        xll = header["xllcorner"]
    elif "xllcenter" in header:
        xll = header["xllcenter"] - cs / 2.0
    else:
        raise DataError(f"{path}: missing xllcorner")
    if "yllcorner" in header:
        yll = header["yllcorner"]
    elif "yllcenter" in header:
        yll = header["yllcenter"] - cs / 2.0
    else:
        raise DataError(f"{path}: missing yllcorner")
    nodata = header.get("nodata_value", NODATA)

    try:
        values = np.array(" ".join(lines[body_start:]).split(), dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell value") from exc
    if values.size != nrows * ncols:
        raise DataError(f"{path}: expected {nrows * ncols} cells, found {values.size}")
    data = values.reshape(nrows, ncols)
    data[data == nodata] = np.nan
    return GridGeometry(xll, yll, cs, nrows, ncols), data


def write_asc(path, geometry: GridGeometry, data: np.ndarray, *, integer: bool = False, nodata: float = NODATA) -> None:
    data = np.asarray(data, dtype=np.float64).reshape(geometry.shape)
    nodata_token = str(int(nodata)) if float(nodata).is_integer() else repr(float(nodata))
    with open(path, "w") as fh:
        fh.write(f"ncols {geometry.ncols}\n")
        fh.write(f"nrows {geometry.nrows}\n")
        fh.write(f"xllcorner {geometry.xllcorner!r}\n")
        fh.write(f"yllcorner {geometry.yllcorner!r}\n")
        fh.write(f"cellsize {geometry.cellsize!r}\n")
        fh.write(f"NODATA_value {nodata_token}\n")
        for row in data:
            if integer:
                tokens = [nodata_token if np.isnan(v) else str(int(v)) for v in row]
            else:
                # repr keeps full precision so read-after-write is exact
                tokens = [nodata_token if np.isnan(v) else repr(float(v)) for v in row]
            fh.write(" ".join(tokens))
            fh.write("\n")
