"""Core domain types shared by every stage of the pipeline.

The factor order in :data:`FEATURES` is part of the on-disk contract: model
weights, forest split indices and attribution tables all refer to factors by
position in this tuple.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dynlsm.errors import DataError, InvalidInputError

FEATURES: tuple[str, ...] = (
    "elev",
    "slope",
    "curv",
    "aspect",
    "litho",
    "landuse",
    "ndvi",
    "spi",
    "twi",
    "ar",
    "aerd",
    "d_fault",
    "d_drain",
    "d_catch",
    "d_road",
)
N_FEATURES = len(FEATURES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURES)}

FEATURE_LONG_NAMES = {
    "elev": "elevation (m)",
    "slope": "slope (deg)",
    "curv": "curvature",
    "aspect": "aspect (deg)",
    "litho": "lithology score",
    "landuse": "land-use score",
    "ndvi": "NDVI x 10000",
    "spi": "stream power index",
    "twi": "topographic wetness index",
    "ar": "annual rainfall (mm)",
    "aerd": "annual extreme-rainfall days",
    "d_fault": "distance to faults (m)",
    "d_drain": "distance to drainage (m)",
    "d_catch": "distance to catchment boundary (m)",
    "d_road": "distance to roads (m)",
}

ORDINAL_FEATURES = ("litho", "landuse")
NDVI_SCALE = 10000.0

SAMPLE_CSV_HEADER = ("year", "easting", "northing", "label") + FEATURES

LEVEL_NAMES = ("very low", "low", "moderate", "high", "very high")
EQUAL_INTERVAL_BREAKS = (0.2, 0.4, 0.6, 0.8)


def _fmt(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return ""
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


@dataclass(frozen=True)
class FeatureVector:
    """The 15 landslide-inducing factor values of one sample or grid cell.

    Missing slots are stored as NaN. NDVI is held in the amplified x10000 form
    of the thematic map; :meth:`model_input` rescales it to [-1, 1].
    """

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != N_FEATURES:
            raise InvalidInputError(f"expected {N_FEATURES} factor values, got {len(vals)}")
        for name in ORDINAL_FEATURES:
            v = vals[FEATURE_INDEX[name]]
            # imputed ordinals are means of {1,2,3} scores, hence the closed range
            if not math.isnan(v) and not 1.0 <= v <= 3.0:
                raise InvalidInputError(f"{name} score {v} outside [1, 3]")
        for v in vals:
            if math.isinf(v):
                raise InvalidInputError("infinite factor value")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_mapping(cls, mapping) -> "FeatureVector":
        return cls(tuple(float(mapping.get(name, math.nan)) for name in FEATURES))

    @classmethod
    def missing_all(cls) -> "FeatureVector":
        return cls((math.nan,) * N_FEATURES)

    def __getitem__(self, key):
        if isinstance(key, str):
            key = FEATURE_INDEX[key]
        return self.values[key]

    @property
    def missing(self) -> tuple[bool, ...]:
        return tuple(math.isnan(v) for v in self.values)

    @property
    def complete(self) -> bool:
        return not any(self.missing)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def model_input(self) -> np.ndarray:
        return to_model_input(self.as_array()[None, :])[0]

    def to_dict(self) -> dict:
        return {name: v for name, v in zip(FEATURES, self.values)}


def to_model_input(raw: np.ndarray) -> np.ndarray:
    """Convert a raw ``(n, 15)`` factor matrix to the scale models consume."""
    out = np.array(raw, dtype=np.float64, copy=True)
    out[:, FEATURE_INDEX["ndvi"]] /= NDVI_SCALE
    return out


@dataclass(frozen=True)
class LabeledSample:
    features: FeatureVector
    label: int
    year: int
    location: tuple[float, float]
    sid: int = -1

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInputError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "year", int(self.year))
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))

    def with_features(self, features: FeatureVector) -> "LabeledSample":
        return LabeledSample(features, self.label, self.year, self.location, self.sid)

    def to_dict(self) -> dict:
        return {
            "sid": self.sid,
            "year": self.year,
            "easting": self.location[0],
            "northing": self.location[1],
            "label": self.label,
            **self.features.to_dict(),
        }


def feature_matrix(samples: Sequence[LabeledSample]) -> np.ndarray:
    """Raw ``(n, 15)`` factor matrix of a sample list."""
    if not samples:
        return np.empty((0, N_FEATURES))
    return np.array([s.features.values for s in samples], dtype=np.float64)


def model_matrix(samples: Sequence[LabeledSample]) -> np.ndarray:
    return to_model_input(feature_matrix(samples))


def label_vector(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def check_span(samples: Iterable[LabeledSample], span: tuple[int, int]) -> None:
    lo, hi = span
    for s in samples:
        if not lo <= s.year <= hi:
            raise DataError(f"sample {s.sid} year {s.year} outside study span {lo}-{hi}")


@dataclass(frozen=True)
class YearTask:
    """Labeled samples of one calendar year with a support/query split.

    A per-year mapping task keeps every sample in ``support``; meta-learning
    subtasks split their samples between the two.
    """

    year: int
    samples: tuple[LabeledSample, ...]
    support: tuple[int, ...] = None
    query: tuple[int, ...] = ()
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.support is None:
            object.__setattr__(self, "support", tuple(range(len(self.samples))))
        support, query = set(self.support), set(self.query)
        if support & query:
            raise InvalidInputError("support and query overlap")
        if support | query != set(range(len(self.samples))):
            raise InvalidInputError("support and query must cover every sample index")
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))

    @property
    def no_data(self) -> bool:
        return len(self.samples) == 0

    @property
    def n_positive(self) -> int:
        return sum(s.label for s in self.samples)

    @property
    def n_negative(self) -> int:
        return len(self.samples) - self.n_positive

    def X(self, which: str = "all") -> np.ndarray:
        return model_matrix(self._subset(which))

    def y(self, which: str = "all") -> np.ndarray:
        return label_vector(self._subset(which))

    def _subset(self, which: str) -> list[LabeledSample]:
        if which == "all":
            return list(self.samples)
        idx = {"support": self.support, "query": self.query}[which]
        return [self.samples[i] for i in idx]

    def to_dict(self) -> dict:
        return {
            "year": self.year,
            "sample_ids": [s.sid for s in self.samples],
            "support": list(self.support),
            "query": list(self.query),
            "loss_kind": self.loss_kind,
        }


@dataclass(frozen=True)
class TaskPool:
    train_tasks: tuple[YearTask, ...]
    test_tasks: tuple[YearTask, ...]
    split_ratio: tuple[int, int] = (3, 1)

    def __post_init__(self):
        object.__setattr__(self, "train_tasks", tuple(self.train_tasks))
        object.__setattr__(self, "test_tasks", tuple(self.test_tasks))

    def manifest(self) -> dict:
        return {
            "split_ratio": list(self.split_ratio),
            "train": [t.to_dict() for t in self.train_tasks],
            "test": [t.to_dict() for t in self.test_tasks],
        }


@dataclass(frozen=True)
class GridGeometry:
    """Regular north-up grid. Row 0 is the northernmost row."""

    xllcorner: float
    yllcorner: float
    cellsize: float
    nrows: int
    ncols: int

    def __post_init__(self):
        if self.nrows < 1 or self.ncols < 1:
            raise InvalidInputError("grid must have at least one row and column")
        if not self.cellsize > 0:
            raise InvalidInputError("cellsize must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def size(self) -> int:
        return self.nrows * self.ncols

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (row-major) easting/northing of every cell center."""
        cols = self.xllcorner + (np.arange(self.ncols) + 0.5) * self.cellsize
        rows = self.yllcorner + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize
        xx, yy = np.meshgrid(cols, rows)
        return xx.ravel(), yy.ravel()

    def cell_index(self, easting, northing):
        """Row/col of the containing cell; ``-1`` where outside the grid."""
        e = np.asarray(easting, dtype=np.float64)
        n = np.asarray(northing, dtype=np.float64)
        col = np.floor((e - self.xllcorner) / self.cellsize)
        row = np.floor((self.yllcorner + self.nrows * self.cellsize - n) / self.cellsize)
        inside = (col >= 0) & (col < self.ncols) & (row >= 0) & (row < self.nrows)
        col = np.where(inside, col, -1).astype(np.int64)
        row = np.where(inside, row, -1).astype(np.int64)
        return row, col

    def to_dict(self) -> dict:
        return {
            "xllcorner": self.xllcorner,
            "yllcorner": self.yllcorner,
            "cellsize": self.cellsize,
            "nrows": self.nrows,
            "ncols": self.ncols,
        }


def class_breaks(probability: float, breaks: Sequence[float] = EQUAL_INTERVAL_BREAKS) -> int:
    """Susceptibility level 0-4 of a probability using left-closed intervals."""
    p = float(probability)
    if math.isnan(p) or not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"probability {probability!r} outside [0, 1]")
    return int(np.searchsorted(np.asarray(breaks), p, side="right"))


def classify(probability: np.ndarray, breaks: Sequence[float] = EQUAL_INTERVAL_BREAKS) -> np.ndarray:
    """Vectorized :func:`class_breaks`; NaN cells map to ``-1`` (nodata)."""
    p = np.asarray(probability, dtype=np.float64)
    valid = ~np.isnan(p)
    if np.any((p[valid] < 0.0) | (p[valid] > 1.0)):
        raise InvalidInputError("probability outside [0, 1]")
    level = np.searchsorted(np.asarray(breaks), np.where(valid, p, 0.0), side="right")
    return np.where(valid, level, -1).astype(np.int8)


def quantile_breaks(probability: np.ndarray) -> tuple[float, ...]:
    """Breaks at the 20/40/60/80th percentiles of the valid probabilities."""
    p = np.asarray(probability, dtype=np.float64)
    p = p[~np.isnan(p)]
    if p.size == 0:
        raise InvalidInputError("no valid probabilities")
    return tuple(float(q) for q in np.quantile(p, [0.2, 0.4, 0.6, 0.8]))


@dataclass(frozen=True)
class SusceptibilityRaster:
    geometry: GridGeometry
    probability: np.ndarray
    level: np.ndarray = None
    breaks: tuple[float, ...] = EQUAL_INTERVAL_BREAKS
    year: int | None = None

    def __post_init__(self):
        prob = np.array(self.probability, dtype=np.float64).reshape(self.geometry.shape)
        level = classify(prob, self.breaks) if self.level is None else np.array(self.level, dtype=np.int8)
        if level.shape != self.geometry.shape:
            raise InvalidInputError("level raster shape does not match geometry")
        prob.setflags(write=False)
        level.setflags(write=False)
        object.__setattr__(self, "probability", prob)
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))

    @property
    def valid(self) -> np.ndarray:
        return self.level >= 0


@dataclass(frozen=True)
class DeformationPoint:
    easting: float
    northing: float
    velocity: float
    aspect: float
    slope: float
    pid: int = -1

    def __post_init__(self):
        if not math.isfinite(self.velocity):
            raise InvalidInputError(f"non-finite velocity at point {self.pid}")
        if not 0.0 <= self.aspect < 360.0:
            raise InvalidInputError(f"aspect {self.aspect} outside [0, 360)")

    @property
    def location(self) -> tuple[float, float]:
        return (self.easting, self.northing)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float = math.nan
    roc_curve: tuple[tuple[float, float], ...] = ()
    undefined: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": None if math.isnan(self.precision) else self.precision,
            "recall": None if math.isnan(self.recall) else self.recall,
            "f1": None if math.isnan(self.f1) else self.f1,
            "auroc": None if math.isnan(self.auroc) else self.auroc,
            "undefined": list(self.undefined),
        }


# --- sample CSV ------------------------------------------------------------


def write_samples_csv(samples: Sequence[LabeledSample], path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_CSV_HEADER)
        for s in samples:
            w.writerow(
                [s.year, _fmt(s.location[0]), _fmt(s.location[1]), s.label]
                + [_fmt(v) for v in s.features.values]
            )
    finally:
        if own:
            fh.close()


def read_samples_csv(path_or_buf) -> list[LabeledSample]:
    """Read the sample CSV; sample ids are assigned by row order."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SAMPLE_CSV_HEADER:
            raise DataError(f"sample CSV header must be {','.join(SAMPLE_CSV_HEADER)}")
        out = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(SAMPLE_CSV_HEADER):
                raise DataError(f"sample CSV row {i + 2}: expected {len(SAMPLE_CSV_HEADER)} fields")
            try:
                feats = tuple(float(v) if v.strip() else math.nan for v in row[4:])
                out.append(
                    LabeledSample(
                        FeatureVector(feats),
                        int(row[3]),
                        int(row[0]),
                        (float(row[1]), float(row[2])),
                        sid=i,
                    )
                )
            except ValueError as exc:
                raise DataError(f"sample CSV row {i + 2}: {exc}") from exc
        return out
    finally:
        if own:
            fh.close()


def samples_to_csv_text(samples: Sequence[LabeledSample]) -> str:
    buf = io.StringIO()
    write_samples_csv(samples, buf)
    return buf.getvalue()
