"""Feature extraction from thematic layers, imputation and negative sampling.

Raster factors are read from the containing cell, line factors are the
shortest distance to any segment of a layer, polygon factors (lithology,
land use) are scored 1-3 by the landslide frequency of their category, and
the yearly rainfall factors come from inverse-distance interpolation of
station records.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from dynlsm import _kernels
from dynlsm.ascgrid import read_asc
from dynlsm.data_model import (
    FEATURE_INDEX,
    FEATURES,
    N_FEATURES,
    FeatureVector,
    GridGeometry,
    LabeledSample,
)
from dynlsm.errors import ConfigError, DataError

log = logging.getLogger(__name__)

RASTER_LAYERS = ("elev", "slope", "curv", "aspect", "ndvi", "spi", "twi")
LINE_LAYERS = {"d_fault": "faults", "d_drain": "drainage", "d_road": "roads"}
POLYGON_LAYERS = ("litho", "landuse", "catchment")
SCORED_POLYGONS = ("litho", "landuse")


@dataclass(frozen=True)
class VectorFeature:
    """A polyline or polygon ring with a category label."""

    id: str
    category: str
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
            raise DataError(f"feature {self.id}: coords must be a list of at least two [x, y] pairs")
        object.__setattr__(self, "coords", coords)

    def segments(self, closed: bool = False) -> np.ndarray:
        c = self.coords
        if closed and not np.array_equal(c[0], c[-1]):
            c = np.vstack([c, c[:1]])
        return np.hstack([c[:-1], c[1:]])

    def area(self) -> float:
        x, y = self.coords[:, 0], self.coords[:, 1]
        return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


@dataclass(frozen=True)
class StationRecord:
    location: tuple[float, float]
    year: int
    ar: float
    aerd: float

    def __post_init__(self):
        if self.ar < 0 or self.aerd < 0:
            raise DataError(f"station record {self.location} {self.year}: negative rainfall")


@dataclass
class ThematicStack:
    geometry: GridGeometry
    rasters: dict[str, np.ndarray]
    lines: dict[str, list[VectorFeature]]
    polygons: dict[str, list[VectorFeature]]
    stations: list[StationRecord] = field(default_factory=list)

    def __post_init__(self):
        for name, arr in self.rasters.items():
            if arr.shape != self.geometry.shape:
                raise DataError(f"raster {name} does not match the stack grid")


# --- file formats ------------------------------------------------------------


def read_ndjson(path) -> list[VectorFeature]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(VectorFeature(str(rec["id"]), str(rec.get("category", "")), rec["coords"]))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path} line {i + 1}: {exc}") from exc
    return out


def write_ndjson(path, features: Iterable[VectorFeature]) -> None:
    with open(path, "w") as fh:
        for f in features:
            fh.write(json.dumps({"id": f.id, "category": f.category, "coords": f.coords.tolist()}))
            fh.write("\n")


def read_stations_csv(path) -> list[StationRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"year", "easting", "northing", "ar", "aerd"} <= set(reader.fieldnames):
            raise DataError(f"{path}: station CSV needs columns year,easting,northing,ar,aerd")
        for row in reader:
            out.append(
                StationRecord((float(row["easting"]), float(row["northing"])), int(row["year"]), float(row["ar"]), float(row["aerd"]))
            )
    return out


def write_stations_csv(path, stations: Iterable[StationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "easting", "northing", "ar", "aerd"])
        for s in stations:
            w.writerow([s.year, repr(s.location[0]), repr(s.location[1]), repr(s.ar), repr(s.aerd)])


def read_landslides_csv(path) -> list[tuple[int, float, float]]:
    """Landslide inventory rows ``year,easting,northing``."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"year", "easting", "northing"} <= set(reader.fieldnames):
            raise DataError(f"{path}: landslide CSV needs columns year,easting,northing")
        for row in reader:
            out.append((int(row["year"]), float(row["easting"]), float(row["northing"])))
    return out


def write_landslides_csv(path, records: Iterable[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "easting", "northing"])
        for year, e, n in records:
            w.writerow([year, repr(float(e)), repr(float(n))])


def load_stack(raster_paths: Mapping[str, str], line_paths: Mapping[str, str], polygon_paths: Mapping[str, str], stations_path) -> ThematicStack:
    """Assemble a stack from files; every layer must be present."""
    rasters, geometry = {}, None
    for name in RASTER_LAYERS:
        if name not in raster_paths:
            raise ConfigError(f"missing raster layer {name!r}")
        g, data = read_asc(raster_paths[name])
        if geometry is None:
            geometry = g
        elif g != geometry:
            raise DataError(f"raster {name} grid differs from {RASTER_LAYERS[0]}")
        rasters[name] = data
    lines = {}
    for key, name in LINE_LAYERS.items():
        if name not in line_paths:
            raise ConfigError(f"missing line layer {name!r}")
        lines[name] = read_ndjson(line_paths[name])
    polygons = {}
    for name in POLYGON_LAYERS:
        if name not in polygon_paths:
            raise ConfigError(f"missing polygon layer {name!r}")
        polygons[name] = read_ndjson(polygon_paths[name])
    return ThematicStack(geometry, rasters, lines, polygons, read_stations_csv(stations_path))


# --- single-factor operations -------------------------------------------------


def sample_raster(stack: ThematicStack, location) -> dict[str, float]:
    """Value of each raster layer at the cell containing ``location``."""
    return {k: float(v[0]) for k, v in sample_rasters(stack, np.atleast_2d(location)).items()}


def sample_rasters(stack: ThematicStack, xy: np.ndarray) -> dict[str, np.ndarray]:
    xy = np.asarray(xy, dtype=np.float64)
    row, col = stack.geometry.cell_index(xy[:, 0], xy[:, 1])
    inside = row >= 0
    out = {}
    for name, arr in stack.rasters.items():
        vals = np.full(xy.shape[0], np.nan)
        vals[inside] = arr[row[inside], col[inside]]
        out[name] = vals
    return out


def segments_of(features: Sequence[VectorFeature], closed: bool = False) -> np.ndarray:
    if not features:
        raise ConfigError("line layer has no segments")
    return np.vstack([f.segments(closed) for f in features])


def dist_to_lines(lines: Sequence[VectorFeature], location) -> float:
    """Shortest Euclidean distance from ``location`` to any segment."""
    seg = segments_of(lines)
    x, y = location
    return float(_kernels.segment_distance(np.array([x], float), np.array([y], float), seg)[0])


def polygon_category(polygons: Sequence[VectorFeature], xy: np.ndarray) -> list[str | None]:
    """Category of the first polygon containing each point."""
    xy = np.asarray(xy, dtype=np.float64)
    cat: list[str | None] = [None] * xy.shape[0]
    unassigned = np.ones(xy.shape[0], dtype=bool)
    for poly in polygons:
        if not unassigned.any():
            break
        idx = np.flatnonzero(unassigned)
        inside = _kernels.points_in_ring(xy[idx, 0], xy[idx, 1], poly.coords)
        for i in idx[inside]:
            cat[i] = poly.category
        unassigned[idx[inside]] = False
    return cat


def landslide_frequency(polygons: Sequence[VectorFeature], landslide_xy: np.ndarray) -> dict[str, float]:
    """Landslides per unit area for each polygon category."""
    areas: dict[str, float] = {}
    for p in polygons:
        areas[p.category] = areas.get(p.category, 0.0) + p.area()
    counts = dict.fromkeys(areas, 0)
    for c in polygon_category(polygons, landslide_xy):
        if c is not None:
            counts[c] += 1
    return {c: (counts[c] / areas[c] if areas[c] > 0 else 0.0) for c in sorted(areas)}


def tercile_scores(frequency_table: Mapping[str, float]) -> dict[str, int]:
    """Score categories 1 (rare landslides) to 3 (frequent) by frequency rank.

    Categories are ranked by frequency with ties broken by name; a category
    whose mid-rank quantile falls in the lower, middle or upper third of the
    ranking gets 1, 2 or 3.
    """
    cats = sorted(frequency_table, key=lambda c: (frequency_table[c], c))
    k = len(cats)
    scores = {}
    for r, c in enumerate(cats):
        q = (r + 0.5) / k
        scores[c] = 1 if q < 1 / 3 else (2 if q < 2 / 3 else 3)
    return scores


def polygon_score(polygons: Sequence[VectorFeature], location, frequency_table: Mapping[str, float]) -> float:
    """1-3 frequency score of the polygon containing ``location``; NaN if none."""
    cat = polygon_category(polygons, np.atleast_2d(np.asarray(location, dtype=np.float64)))[0]
    if cat is None:
        return math.nan
    return float(tercile_scores(frequency_table)[cat])


def idw_rainfall(stations: Sequence[StationRecord], geometry: GridGeometry, power: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Annual-rainfall and extreme-rainfall-day rasters from one year's stations."""
    if not stations:
        raise ConfigError("rainfall interpolation needs at least one station")
    cx, cy = geometry.cell_centers()
    out = idw_points(stations, cx, cy, power)
    return out[:, 0].reshape(geometry.shape), out[:, 1].reshape(geometry.shape)


def idw_points(stations: Sequence[StationRecord], x, y, power: float = 2.0) -> np.ndarray:
    sx = np.array([s.location[0] for s in stations])
    sy = np.array([s.location[1] for s in stations])
    vals = np.array([[s.ar, s.aerd] for s in stations])
    return _kernels.idw(np.asarray(x, float), np.asarray(y, float), sx, sy, vals, float(power))


def impute(vectors: Sequence[FeatureVector]) -> tuple[list[FeatureVector], np.ndarray]:
    """Replace missing slots by the mean of the valid values in that dimension.

    Returns the completed vectors and the per-dimension means used.
    """
    if not vectors:
        return [], np.full(N_FEATURES, np.nan)
    X = np.array([v.values for v in vectors], dtype=np.float64)
    filled, means = impute_matrix(X)
    return [FeatureVector(tuple(row)) for row in filled], means


def impute_matrix(X: np.ndarray, means: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    X = np.array(X, dtype=np.float64)
    missing = np.isnan(X)
    if means is None:
        all_missing = missing.all(axis=0)
        if all_missing.any():
            names = [FEATURES[j] for j in np.flatnonzero(all_missing)]
            raise DataError(f"no valid values to impute dimension(s): {', '.join(names)}")
        with np.errstate(invalid="ignore"):
            means = np.nanmean(X, axis=0)
    X[missing] = np.broadcast_to(means, X.shape)[missing]
    return X, np.asarray(means)


# --- featurization of locations -----------------------------------------------


class Featurizer:
    """Computes the 15 factors at arbitrary locations of a thematic stack.

    Polygon frequency scores are fixed at construction from the landslide
    inventory; yearly rainfall grids are interpolated on first use.
    """

    def __init__(self, stack: ThematicStack, landslide_xy: np.ndarray, idw_power: float = 2.0):
        self.stack = stack
        self.idw_power = idw_power
        landslide_xy = np.asarray(landslide_xy, dtype=np.float64).reshape(-1, 2)
        self.frequency = {name: landslide_frequency(stack.polygons[name], landslide_xy) for name in SCORED_POLYGONS}
        self.scores = {name: tercile_scores(self.frequency[name]) for name in SCORED_POLYGONS}
        self._segments = {key: segments_of(stack.lines[layer]) for key, layer in LINE_LAYERS.items()}
        self._segments["d_catch"] = segments_of(stack.polygons["catchment"], closed=True)
        self._stations_by_year: dict[int, list[StationRecord]] = {}
        for s in stack.stations:
            self._stations_by_year.setdefault(s.year, []).append(s)
        self._grid_static = None

    @property
    def years_with_rainfall(self) -> list[int]:
        return sorted(self._stations_by_year)

    def _rainfall(self, year: int, x, y) -> np.ndarray:
        stations = self._stations_by_year.get(year)
        if not stations:
            return np.full((np.size(x), 2), np.nan)
        return idw_points(stations, x, y, self.idw_power)

    def static_features(self, xy: np.ndarray) -> np.ndarray:
        """Raw factor matrix with the yearly rainfall columns left NaN."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        X = np.full((xy.shape[0], N_FEATURES), np.nan)
        for name, vals in sample_rasters(self.stack, xy).items():
            X[:, FEATURE_INDEX[name]] = vals
        for key, seg in self._segments.items():
            X[:, FEATURE_INDEX[key]] = _kernels.segment_distance(xy[:, 0], xy[:, 1], seg)
        for name in SCORED_POLYGONS:
            cats = polygon_category(self.stack.polygons[name], xy)
            X[:, FEATURE_INDEX[name]] = [np.nan if c is None else self.scores[name][c] for c in cats]
        return X

    def features(self, xy: np.ndarray, years: Sequence[int]) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        X = self.static_features(xy)
        years = np.asarray(years)
        for year in np.unique(years):
            rows = np.flatnonzero(years == year)
            rain = self._rainfall(int(year), xy[rows, 0], xy[rows, 1])
            X[rows, FEATURE_INDEX["ar"]] = rain[:, 0]
            X[rows, FEATURE_INDEX["aerd"]] = rain[:, 1]
        return X

    def grid_features(self, year: int) -> tuple[np.ndarray, np.ndarray]:
        """Raw factor matrix for every grid cell plus the study-area mask.

        Cells with no elevation value are outside the study area.
        """
        g = self.stack.geometry
        cx, cy = g.cell_centers()
        if self._grid_static is None:
            self._grid_static = self.static_features(np.column_stack([cx, cy]))
        X = self._grid_static.copy()
        rain = self._rainfall(year, cx, cy)
        X[:, FEATURE_INDEX["ar"]] = rain[:, 0]
        X[:, FEATURE_INDEX["aerd"]] = rain[:, 1]
        area = ~np.isnan(self.stack.rasters["elev"].ravel())
        return X, area


def generate_negatives(
    landslides: Sequence[LabeledSample],
    featurizer: Featurizer,
    seed=0,
    slope_threshold: float = 15.0,
    start_id: int | None = None,
) -> list[LabeledSample]:
    """As many non-landslide samples as there are landslides.

    Half are drawn uniformly from valid cells; the rest are taken first from
    gentle cells (slope below ``slope_threshold``) in low-frequency lithology
    or land-use categories, then from any gentle cell, then from the
    remaining cells. No cell holding a landslide is used. Negatives take the
    years of the landslides after a seeded shuffle, one to one.
    """
    n = len(landslides)
    if n == 0:
        return []
    stack = featurizer.stack
    g = stack.geometry
    cx, cy = g.cell_centers()
    slope = stack.rasters["slope"].ravel()
    valid = ~np.isnan(slope) & ~np.isnan(stack.rasters["elev"].ravel())
    locs = np.array([s.location for s in landslides])
    row, col = g.cell_index(locs[:, 0], locs[:, 1])
    occupied = row[row >= 0] * g.ncols + col[row >= 0]
    valid[occupied] = False
    cells = np.flatnonzero(valid)
    if cells.size < n:
        raise DataError(f"only {cells.size} free cells for {n} non-landslide samples")

    rng = np.random.default_rng(seed)
    n_random = n // 2
    chosen = rng.choice(cells, size=n_random, replace=False)
    remaining = np.setdiff1d(cells, chosen)

    static = featurizer.static_features(np.column_stack([cx[remaining], cy[remaining]]))
    gentle = slope[remaining] < slope_threshold
    low_freq = (static[:, FEATURE_INDEX["litho"]] == 1) | (static[:, FEATURE_INDEX["landuse"]] == 1)
    tier = np.where(gentle & low_freq, 0, np.where(gentle, 1, 2))
    prior = []
    need = n - n_random
    for t in (0, 1, 2):
        pool = remaining[tier == t]
        take = min(need - len(prior), pool.size)
        if take > 0:
            prior.extend(rng.choice(pool, size=take, replace=False).tolist())
        if len(prior) == need:
            break
    picked = np.concatenate([chosen, np.array(prior, dtype=np.int64)])

    years = np.array([s.year for s in landslides])[rng.permutation(n)]
    xy = np.column_stack([cx[picked], cy[picked]])
    X = featurizer.features(xy, years)
    base = (max(s.sid for s in landslides) + 1) if start_id is None else start_id
    return [
        LabeledSample(FeatureVector(tuple(X[i])), 0, int(years[i]), (float(xy[i, 0]), float(xy[i, 1])), sid=base + i)
        for i in range(n)
    ]


def featurize_inventory(
    records: Sequence[tuple[int, float, float]],
    stack: ThematicStack,
    seed=0,
    slope_threshold: float = 15.0,
    idw_power: float = 2.0,
) -> tuple[list[LabeledSample], dict, Featurizer]:
    """Landslide inventory to a balanced, imputed sample list.

    Returns the samples (landslides first, then the generated negatives), a
    manifest with the imputation means and per-year counts, and the
    featurizer for later grid mapping.
    """
    if not records:
        raise DataError("landslide inventory is empty")
    xy = np.array([(e, n) for _, e, n in records], dtype=np.float64)
    years = [int(y) for y, _, _ in records]
    feat = Featurizer(stack, xy, idw_power)
    X = feat.features(xy, years)
    positives = [
        LabeledSample(FeatureVector(tuple(X[i])), 1, years[i], (float(xy[i, 0]), float(xy[i, 1])), sid=i)
        for i in range(len(records))
    ]
    negatives = generate_negatives(positives, feat, seed=seed, slope_threshold=slope_threshold)
    samples = positives + negatives
    filled, means = impute([s.features for s in samples])
    samples = [s.with_features(f) for s, f in zip(samples, filled)]
    per_year: dict[int, list[int]] = {}
    for s in samples:
        per_year.setdefault(s.year, [0, 0])[s.label] += 1
    n_missing = {FEATURES[j]: int(np.isnan(X[:, j]).sum()) for j in range(N_FEATURES)}
    manifest = {
        "n_landslides": len(positives),
        "n_negatives": len(negatives),
        "imputation_means": {FEATURES[j]: float(means[j]) for j in range(N_FEATURES)},
        "missing_in_landslides": n_missing,
        "per_year": {str(y): {"positive": c[1], "negative": c[0]} for y, c in sorted(per_year.items())},
        "frequency_scores": feat.scores,
    }
    for y, c in sorted(per_year.items()):
        log.info("year %d: %d landslides, %d non-landslides", y, c[1], c[0])
    return samples, manifest, feat
