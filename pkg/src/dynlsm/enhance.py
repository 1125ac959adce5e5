"""Enhancement of susceptibility maps with ground-deformation velocities.

Measurement points are screened by slope aspect and gradient, binned into
deformation levels D0-D4, spread onto the map grid by nearest neighbour and
fused with the initial susceptibility level through a fixed 5x5 matrix.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dynlsm import _kernels
from dynlsm.data_model import LEVEL_NAMES, DeformationPoint, GridGeometry, SusceptibilityRaster
from dynlsm.errors import DataError, InvalidInputError, NoDataError

log = logging.getLogger(__name__)

# rows: deformation level D0-D4, columns: initial susceptibility level L0-L4
ENHANCEMENT_MATRIX = np.array(
    [
        [0, 1, 2, 3, 4],
        [1, 1, 2, 3, 4],
        [2, 2, 3, 3, 4],
        [3, 3, 4, 4, 4],
        [4, 4, 4, 4, 4],
    ],
    dtype=np.int8,
)
ENHANCEMENT_MATRIX.setflags(write=False)

# north- and south-facing bands, degrees
ASPECT_BANDS = ((348.75, 11.25), (168.75, 191.25))
DEFAULT_SLOPE_MIN = 5.0

# upper (inclusive) velocity bound of levels 4, 3, 2, 1 in mm/year
VELOCITY_BREAKS = (-10.0, -8.0, -4.0, -2.0)


def in_excluded_aspect(aspect: float) -> bool:
    a = float(aspect) % 360.0
    north = a > ASPECT_BANDS[0][0] or a < ASPECT_BANDS[0][1]
    south = ASPECT_BANDS[1][0] < a < ASPECT_BANDS[1][1]
    return north or south


def screen_points(points: Sequence[DeformationPoint], slope_min: float = DEFAULT_SLOPE_MIN) -> list[DeformationPoint]:
    """Drop points on north/south-facing or gentle slopes."""
    return [p for p in points if not in_excluded_aspect(p.aspect) and p.slope >= slope_min]


def bin_velocity(v: float) -> int:
    """Deformation level of a line-of-sight velocity (mm/year).

    Interval bounds belong to the more severe level: -10 is level 4, -8 is
    level 3, -4 is level 2 and -2 is level 1.
    """
    v = float(v)
    if math.isnan(v):
        raise InvalidInputError("velocity is NaN")
    for level, bound in zip((4, 3, 2, 1), VELOCITY_BREAKS):
        if v <= bound:
            return level
    return 0


def bin_velocities(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.isnan(v)):
        raise InvalidInputError("velocity is NaN")
    return (4 - np.searchsorted(np.asarray(VELOCITY_BREAKS), v, side="left")).astype(np.int8)


@dataclass(frozen=True)
class DeformationLevelRaster:
    geometry: GridGeometry
    level: np.ndarray

    def __post_init__(self):
        level = np.array(self.level, dtype=np.int8).reshape(self.geometry.shape)
        level.setflags(write=False)
        object.__setattr__(self, "level", level)


def rasterize_levels(
    points: Sequence[DeformationPoint],
    geometry: GridGeometry,
    levels: Sequence[int] | None = None,
    max_distance: float | None = None,
) -> DeformationLevelRaster:
    """Give every cell the level of its nearest point.

    Distances are from cell centers; equidistant points resolve to the lowest
    point id. Cells farther than ``max_distance`` (when given) get level 0.
    """
    if not points:
        log.warning("no deformation points: returning an all-D0 level raster")
        return DeformationLevelRaster(geometry, np.zeros(geometry.shape, dtype=np.int8))
    if levels is None:
        levels = [bin_velocity(p.velocity) for p in points]
    order = sorted(range(len(points)), key=lambda i: (points[i].pid, i))
    px = np.array([points[i].easting for i in order])
    py = np.array([points[i].northing for i in order])
    lv = np.array([levels[i] for i in order], dtype=np.int8)
    cx, cy = geometry.cell_centers()
    idx, dist2 = _kernels.nearest_point(cx, cy, px, py)
    out = lv[idx]
    if max_distance is not None:
        out = np.where(dist2 > max_distance * max_distance, 0, out).astype(np.int8)
    return DeformationLevelRaster(geometry, out.reshape(geometry.shape))


def fuse(initial: SusceptibilityRaster, deform: DeformationLevelRaster) -> SusceptibilityRaster:
    """Enhanced susceptibility: ``matrix[D, L]`` per valid cell."""
    if initial.geometry != deform.geometry:
        raise DataError("susceptibility and deformation rasters have different geometries")
    L = initial.level
    valid = L >= 0
    D = np.clip(deform.level, 0, 4)
    enhanced = np.where(valid, ENHANCEMENT_MATRIX[D, np.where(valid, L, 0)], -1).astype(np.int8)
    return SusceptibilityRaster(initial.geometry, initial.probability, enhanced, initial.breaks, initial.year)


def level_proportions(raster) -> np.ndarray:
    """Fraction of valid cells at each level 0-4."""
    level = np.asarray(raster.level)
    valid = level[level >= 0]
    if valid.size == 0:
        raise NoDataError("raster has no valid cells")
    return np.bincount(valid.astype(np.int64), minlength=5)[:5] / valid.size


def read_deformation_csv(path) -> list[DeformationPoint]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"easting", "northing", "velocity", "aspect", "slope"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: deformation CSV needs columns easting,northing,velocity,aspect,slope")
        for i, row in enumerate(reader):
            try:
                out.append(
                    DeformationPoint(
                        float(row["easting"]),
                        float(row["northing"]),
                        float(row["velocity"]),
                        float(row["aspect"]) % 360.0,
                        float(row["slope"]),
                        pid=i,
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path} row {i + 2}: {exc}") from exc
    return out


def write_deformation_csv(path, points: Sequence[DeformationPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["easting", "northing", "velocity", "aspect", "slope"])
        for p in points:
            w.writerow([repr(p.easting), repr(p.northing), repr(p.velocity), repr(p.aspect), repr(p.slope)])


def write_proportions_csv(path, initial: np.ndarray, enhanced: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["level", "name", "initial"] + (["enhanced"] if enhanced is not None else [])
        w.writerow(header)
        for k in range(5):
            row = [k, LEVEL_NAMES[k], repr(float(initial[k]))]
            if enhanced is not None:
                row.append(repr(float(enhanced[k])))
            w.writerow(row)
