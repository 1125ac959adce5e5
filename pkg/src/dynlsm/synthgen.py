"""Seeded synthetic study areas for running and testing the pipeline.

Topography comes from smoothed noise, with slope and aspect taken from its
central-difference gradient. Landslides of each year are drawn from a
planted logistic rule in slope and extreme-rainfall days whose coefficients
vary from year to year, and ground-deformation velocities fall with the
planted probability.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from dynlsm.ascgrid import write_asc
from dynlsm.data_model import DeformationPoint, FeatureVector, GridGeometry, LabeledSample, write_samples_csv
from dynlsm.enhance import write_deformation_csv
from dynlsm.errors import ConfigError
from dynlsm.featurize import (
    LINE_LAYERS,
    Featurizer,
    StationRecord,
    ThematicStack,
    VectorFeature,
    idw_rainfall,
    write_landslides_csv,
    write_ndjson,
    write_stations_csv,
)

log = logging.getLogger(__name__)

DEFAULT_COUNTS = (120, 90, 8, 70, 30, 100, 6, 60)


@dataclass(frozen=True)
class SynthConfig:
    nrows: int = 100
    ncols: int = 100
    cellsize: float = 30.0
    years: tuple[int, int] = (2000, 2007)
    counts: tuple[int, ...] | None = None  # landslides per year; None cycles DEFAULT_COUNTS
    extreme_years: tuple[int, ...] | None = None  # None: every third year from the second
    n_stations: int = 12
    n_deformation: int = 2000
    slope_coef: float = 3.0
    aerd_coef: float = 1.5
    coef_jitter: float = 0.3
    intercept: float = -3.0
    velocity_k: float = 16.0
    velocity_noise: float = 1.5
    smooth: float = 6.0  # correlation length of the noise fields, in cells
    seed: int = 0

    @property
    def year_list(self) -> list[int]:
        return list(range(self.years[0], self.years[1] + 1))

    def year_counts(self) -> dict[int, int]:
        ys = self.year_list
        counts = self.counts if self.counts is not None else [DEFAULT_COUNTS[i % len(DEFAULT_COUNTS)] for i in range(len(ys))]
        if len(counts) != len(ys):
            raise ConfigError(f"{len(counts)} landslide counts for {len(ys)} years")
        return dict(zip(ys, (int(c) for c in counts)))

    def extreme(self) -> set[int]:
        if self.extreme_years is not None:
            return set(self.extreme_years)
        return set(self.year_list[1::3])

    def validate(self) -> None:
        if self.nrows < 8 or self.ncols < 8:
            raise ConfigError("synthetic grid needs at least 8 rows and 8 columns")
        if not self.cellsize > 0:
            raise ConfigError("cellsize must be positive")
        if self.years[1] < self.years[0]:
            raise ConfigError("empty year span")
        counts = self.year_counts()
        if any(c < 0 for c in counts.values()):
            raise ConfigError("landslide counts must be non-negative")
        if not any(c > 50 for c in counts.values()) or not any(0 < c < 10 for c in counts.values()):
            raise ConfigError("need at least one year with more than 50 and one with fewer than 10 landslides")
        if 2 * sum(counts.values()) > self.nrows * self.ncols:
            raise ConfigError("grid too small for the requested landslide counts")
        if self.n_stations < 1:
            raise ConfigError("need at least one rainfall station")


@dataclass
class SynthWorld:
    config: SynthConfig
    stack: ThematicStack
    samples: list[LabeledSample]
    deformation: list[DeformationPoint]
    landslides: list[tuple[int, float, float]]
    probability: dict[int, np.ndarray]  # planted probability per year, flat
    coefficients: dict[int, tuple[float, float, float]]  # (intercept, slope, aerd)
    featurizer: Featurizer = field(repr=False)
    used_cells: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.stack, self.samples, self.deformation))


# --- fields -----------------------------------------------------------------------


def smooth_noise(rng: np.random.Generator, shape, length: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian-filtered white noise (periodic)."""
    white = rng.standard_normal(shape)
    ky = np.fft.fftfreq(shape[0])[:, None]
    kx = np.fft.fftfreq(shape[1])[None, :]
    kernel = np.exp(-2.0 * (math.pi * length) ** 2 * (kx**2 + ky**2))
    out = np.real(np.fft.ifft2(np.fft.fft2(white) * kernel))
    out -= out.mean()
    return out / out.std()


def terrain(elev: np.ndarray, cellsize: float):
    """Slope (degrees), aspect (degrees clockwise from north, downslope) and curvature.

    Derivatives are central differences, one-sided at the border. Row 0 is
    north, so northing decreases with the row index.
    """
    d_row, d_col = np.gradient(elev, cellsize)
    dz_dx = d_col
    dz_dy = -d_row
    slope = np.degrees(np.arctan(np.hypot(dz_dx, dz_dy)))
    aspect = np.mod(np.degrees(np.arctan2(-dz_dx, -dz_dy)), 360.0)
    aspect = np.where(aspect >= 360.0, 0.0, aspect)
    lap = (
        np.roll(elev, 1, 0) + np.roll(elev, -1, 0) + np.roll(elev, 1, 1) + np.roll(elev, -1, 1) - 4 * elev
    ) / cellsize**2
    lap[0, :] = lap[-1, :] = lap[:, 0] = lap[:, -1] = 0.0
    return slope, aspect, -100.0 * lap


def _strips(n_strips: int, extent: float, cellsize: float, along_x: bool, other: float, names, rng, prefix: str):
    n_cells = int(round(extent / cellsize))
    cuts = np.unique(np.r_[0, np.sort(rng.choice(np.arange(1, n_cells), size=min(n_strips - 1, n_cells - 1), replace=False)), n_cells])
    out = []
    for i, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
        a, b = a * cellsize, b * cellsize
        if along_x:
            ring = [[a, 0], [b, 0], [b, other], [a, other], [a, 0]]
        else:
            ring = [[0, a], [other, a], [other, b], [0, b], [0, a]]
        out.append(VectorFeature(f"{prefix}{i}", names[int(rng.integers(len(names)))], ring))
    return out


def _blocks(nx: int, ny: int, W: float, H: float, cellsize: float):
    xs = np.round(np.linspace(0, W / cellsize, nx + 1)) * cellsize
    ys = np.round(np.linspace(0, H / cellsize, ny + 1)) * cellsize
    out = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = xs[i], xs[i + 1], ys[j], ys[j + 1]
            out.append(VectorFeature(f"c{i}_{j}", f"catchment{i}_{j}", [[a, c], [b, c], [b, d], [a, d], [a, c]]))
    return out


def _polyline(rng, W, H, n_vertices=6, prefix="l", i=0):
    if rng.random() < 0.5:
        xs = np.linspace(0, W, n_vertices)
        ys = np.clip(rng.uniform(0.1, 0.9) * H + np.cumsum(rng.normal(0, 0.08 * H, n_vertices)), 0, H)
    else:
        ys = np.linspace(0, H, n_vertices)
        xs = np.clip(rng.uniform(0.1, 0.9) * W + np.cumsum(rng.normal(0, 0.08 * W, n_vertices)), 0, W)
    return VectorFeature(f"{prefix}{i}", "", np.column_stack([xs, ys]))


def _stations(cfg: SynthConfig, rng, W, H):
    extreme = cfg.extreme()
    sx = rng.uniform(0, W, cfg.n_stations)
    sy = rng.uniform(0, H, cfg.n_stations)

    def trend():
        # station values of a linear trend in a random direction, scaled to [0, 1]
        theta = rng.uniform(0, 2 * math.pi)
        proj = math.cos(theta) * sx / W + math.sin(theta) * sy / H
        span = proj.max() - proj.min()
        f = (proj - proj.min()) / span if span > 0 else np.full_like(proj, 0.5)
        return np.clip(f + rng.normal(0, 0.1, f.size), 0, 1)

    out = []
    for year in cfg.year_list:
        # annual totals and extreme days follow unrelated spatial patterns
        f_aerd, f_ar = trend(), trend()
        hot = year in extreme
        aerd_base = 16.0 if hot else 8.0
        ar_base = 3200.0 if hot else 2400.0
        aerd = np.maximum(0.0, np.round(aerd_base * (0.5 + f_aerd) + rng.normal(0, 0.5, sx.size)))
        ar = np.round(ar_base + 600.0 * f_ar + rng.normal(0, 50.0, sx.size), 1)
        out.extend(StationRecord((float(x), float(y)), year, float(a), float(e)) for x, y, a, e in zip(sx, sy, ar, aerd))
    return out


def _zscore(a: np.ndarray) -> np.ndarray:
    s = a.std()
    return (a - a.mean()) / (s if s > 0 else 1.0)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# --- world ------------------------------------------------------------------------


def generate(config: SynthConfig = SynthConfig()) -> SynthWorld:
    """Build a synthetic study area with a planted susceptibility rule."""
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    r_terrain, r_vec, r_rain, r_label, r_def = (np.random.default_rng(s) for s in ss.spawn(5))
    g = GridGeometry(0.0, 0.0, float(config.cellsize), config.nrows, config.ncols)
    shape = g.shape
    W, H = config.ncols * config.cellsize, config.nrows * config.cellsize

    base = smooth_noise(r_terrain, shape, config.smooth) + 0.5 * smooth_noise(r_terrain, shape, config.smooth / 3)
    d_row, d_col = np.gradient(base, config.cellsize)
    g95 = np.quantile(np.hypot(d_row, d_col), 0.95)
    relief = math.tan(math.radians(40.0)) / g95 if g95 > 0 else 1.0
    elev = relief * base
    elev = elev - elev.min() + 20.0
    slope, aspect, curv = terrain(elev, config.cellsize)
    area = np.exp(1.2 * smooth_noise(r_terrain, shape, config.smooth / 2))
    tan_s = np.tan(np.radians(slope))
    rasters = {
        "elev": elev,
        "slope": slope,
        "curv": curv,
        "aspect": aspect,
        "ndvi": np.round(3500.0 + 2000.0 * smooth_noise(r_terrain, shape, config.smooth)),
        "spi": area * 10.0 * (1.0 + 0.3 * tan_s),
        "twi": np.log(area * 50.0) - 0.3 * np.log(tan_s + 0.1) + 0.2 * r_terrain.standard_normal(shape),
    }

    litho = _strips(6, W, config.cellsize, True, H, ("granite", "volcanic", "sedimentary", "metamorphic"), r_vec, "g")
    landuse = _strips(5, H, config.cellsize, False, W, ("forest", "shrub", "grass", "urban"), r_vec, "u")
    polygons = {"litho": litho, "landuse": landuse, "catchment": _blocks(3, 3, W, H, config.cellsize)}
    lines = {
        "faults": [_polyline(r_vec, W, H, 3, "f", i) for i in range(3)],
        "drainage": [_polyline(r_vec, W, H, 8, "d", i) for i in range(5)],
        "roads": [_polyline(r_vec, W, H, 5, "r", i) for i in range(3)],
    }
    stations = _stations(config, r_rain, W, H)
    stack = ThematicStack(g, rasters, lines, polygons, stations)

    # planted rule and landslide inventory
    counts = config.year_counts()
    z_slope = _zscore(slope).ravel()
    cx, cy = g.cell_centers()
    used = np.zeros(g.size, dtype=bool)
    prob, coefs, pos_cells, landslides = {}, {}, {}, []
    for year in config.year_list:
        _, aerd = idw_rainfall([s for s in stations if s.year == year], g)
        j = config.coef_jitter
        a = config.intercept
        b_s = config.slope_coef * (1.0 + r_label.uniform(-j, j))
        b_a = config.aerd_coef * (1.0 + r_label.uniform(-j, j))
        p = _sigmoid(a + b_s * z_slope + b_a * _zscore(aerd).ravel())
        prob[year], coefs[year] = p, (a, float(b_s), float(b_a))
        free = np.flatnonzero(~used)
        n = counts[year]
        cells = np.sort(r_label.choice(free, size=n, replace=False, p=p[free] / p[free].sum())) if n else np.array([], int)
        used[cells] = True
        pos_cells[year] = cells
        jitter = r_label.uniform(-0.4, 0.4, (n, 2)) * config.cellsize
        landslides.extend((year, float(cx[c] + dx), float(cy[c] + dy)) for c, (dx, dy) in zip(cells, jitter))

    feat = Featurizer(stack, np.array([(e, n) for _, e, n in landslides]).reshape(-1, 2))
    samples = [
        LabeledSample(FeatureVector.missing_all(), 1, y, (e, n), sid=i) for i, (y, e, n) in enumerate(landslides)
    ]
    neg_cells = {}
    for year in config.year_list:
        free = np.flatnonzero(~used)
        q = 1.0 - prob[year][free]
        cells = np.sort(r_label.choice(free, size=counts[year], replace=False, p=q / q.sum()))
        used[cells] = True
        neg_cells[year] = cells
        samples.extend(
            LabeledSample(FeatureVector.missing_all(), 0, year, (float(cx[c]), float(cy[c])), sid=len(samples) + k)
            for k, c in enumerate(cells)
        )
    X = feat.features(np.array([s.location for s in samples]), [s.year for s in samples])
    samples = [s.with_features(FeatureVector(tuple(row))) for s, row in zip(samples, X)]

    # deformation points
    mean_p = np.mean([prob[y] for y in config.year_list], axis=0)
    px = r_def.uniform(0, W, config.n_deformation)
    py = r_def.uniform(0, H, config.n_deformation)
    row, col = g.cell_index(px, py)
    flat = row * g.ncols + col
    vel = -config.velocity_k * mean_p[flat] + r_def.normal(0, config.velocity_noise, px.size)
    deformation = [
        DeformationPoint(float(px[i]), float(py[i]), float(vel[i]), float(aspect.ravel()[flat[i]]), float(slope.ravel()[flat[i]]), pid=i)
        for i in range(px.size)
    ]
    log.info("synthetic world: %dx%d cells, %d landslides over %d years", config.nrows, config.ncols, len(landslides), len(counts))
    return SynthWorld(config, stack, samples, deformation, landslides, prob, coefs, feat, used)


def draw_year_samples(world: SynthWorld, year: int, n_positive: int, n_negative: int, seed=0) -> list[LabeledSample]:
    """Fresh labeled samples of ``year`` from cells the world has not used.

    Positives are drawn in proportion to the planted probability and
    negatives in proportion to its complement, as for the world itself.
    """
    if year not in world.probability:
        raise ConfigError(f"year {year} is outside the synthetic span")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(year), 0xD5]))
    p = world.probability[year]
    free = np.flatnonzero(~world.used_cells)
    if free.size < n_positive + n_negative:
        raise ConfigError("not enough unused cells for the requested samples")
    pos = rng.choice(free, size=n_positive, replace=False, p=p[free] / p[free].sum())
    rest = np.setdiff1d(free, pos)
    q = 1.0 - p[rest]
    neg = rng.choice(rest, size=n_negative, replace=False, p=q / q.sum())
    cx, cy = world.stack.geometry.cell_centers()
    cells = np.r_[pos, neg]
    xy = np.column_stack([cx[cells], cy[cells]])
    X = world.featurizer.features(xy, [year] * cells.size)
    labels = [1] * n_positive + [0] * n_negative
    return [
        LabeledSample(FeatureVector(tuple(X[i])), labels[i], year, (float(xy[i, 0]), float(xy[i, 1])), sid=i)
        for i in range(cells.size)
    ]


def write_world(world: SynthWorld, outdir) -> dict[str, str]:
    """Write every layer in the formats the pipeline reads; returns the paths."""
    paths = {}
    for sub in ("rasters", "vectors"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    g = world.stack.geometry
    for name, data in world.stack.rasters.items():
        p = os.path.join(outdir, "rasters", f"{name}.asc")
        write_asc(p, g, data)
        paths[f"raster_{name}"] = p
    for layer in LINE_LAYERS.values():
        p = os.path.join(outdir, "vectors", f"{layer}.ndjson")
        write_ndjson(p, world.stack.lines[layer])
        paths[f"lines_{layer}"] = p
    for layer, feats in world.stack.polygons.items():
        p = os.path.join(outdir, "vectors", f"{layer}.ndjson")
        write_ndjson(p, feats)
        paths[f"polygons_{layer}"] = p
    paths["stations"] = os.path.join(outdir, "stations.csv")
    write_stations_csv(paths["stations"], world.stack.stations)
    paths["landslides"] = os.path.join(outdir, "landslides.csv")
    write_landslides_csv(paths["landslides"], world.landslides)
    paths["deformation"] = os.path.join(outdir, "deformation.csv")
    write_deformation_csv(paths["deformation"], world.deformation)
    paths["truth_samples"] = os.path.join(outdir, "truth_samples.csv")
    write_samples_csv(world.samples, paths["truth_samples"])
    return paths
