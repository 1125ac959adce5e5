"""Command-line interface: ``dynlsm <command> [--config FILE] [--key value ...]``.

Every run is driven by one flat TOML configuration. Each configuration key
has a matching ``--key-name`` flag that overrides the file. Relative paths
in a config file are resolved against the file's directory. Each command
writes a ``manifest.json`` with the config hash, versions and seeds next to
its outputs; reruns with the same config produce byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from dynlsm import __version__
from dynlsm._kernels import BACKEND
from dynlsm.ascgrid import read_asc, write_asc
from dynlsm.data_model import (
    FEATURES,
    SusceptibilityRaster,
    model_matrix,
    label_vector,
    read_samples_csv,
    to_model_input,
    write_samples_csv,
)
from dynlsm.enhance import (
    fuse,
    level_proportions,
    rasterize_levels,
    read_deformation_csv,
    screen_points,
    write_proportions_csv,
)
from dynlsm.errors import ConfigError, DataError, DynLSMError
from dynlsm.evaluation import EvalReport, adaptation_study, shuffled_eval
from dynlsm.featurize import (
    LINE_LAYERS,
    POLYGON_LAYERS,
    RASTER_LAYERS,
    Featurizer,
    featurize_inventory,
    impute_matrix,
    load_stack,
    read_landslides_csv,
)
from dynlsm.forest import ForestConfig, ForestModel, fit_arrays, train_forest
from dynlsm.meta_mlp import AdaptedModel, MetaConfig, MetaState, adapt, meta_train, train_from_scratch
from dynlsm.shapley import subsample_rows, write_attributions_csv, write_rankings_csv, write_trajectory_csv, yearly_rankings
from dynlsm.synthgen import SynthConfig, generate, write_world
from dynlsm.tasks import FEWSHOT, FOREST, build_meta_pool, build_year_tasks, pool_manifest, route_model

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("dynlsm")

CONFIG_ENV = "DYNLSM_CONFIG"
PATH_FIELDS = ("rasters_dir", "vectors_dir", "stations", "landslides", "samples", "deformation", "out_dir")


def _opt(default, help_text):
    return field(default=default, metadata={"help": help_text})


@dataclass
class RunConfig:
    # inputs and outputs
    rasters_dir: str = _opt("rasters", "directory holding <factor>.asc rasters")
    vectors_dir: str = _opt("vectors", "directory holding line and polygon .ndjson layers")
    stations: str = _opt("stations.csv", "rain-gauge CSV (year,easting,northing,ar,aerd)")
    landslides: str = _opt("landslides.csv", "landslide inventory CSV (year,easting,northing)")
    samples: str = _opt("", "labeled sample CSV; empty means <out_dir>/featurize/samples.csv")
    deformation: str = _opt("deformation.csv", "deformation-point CSV (easting,northing,velocity,aspect,slope)")
    out_dir: str = _opt("run", "output directory")
    # data preparation
    span_start: int = _opt(0, "first year of the study span; 0 takes it from the data")
    span_end: int = _opt(0, "last year of the study span; 0 takes it from the data")
    neg_slope_max: float = _opt(15.0, "slope (degrees) below which cells are preferred as non-landslide samples")
    idw_power: float = _opt(2.0, "inverse-distance power for rainfall interpolation")
    # routing and meta pool
    rich_threshold: int = _opt(50, "landslide count routing a year to the forest")
    shot_size: int = _opt(16, "samples per class in a meta-learning subtask")
    include_scarce: bool = _opt(False, "let sample-scarce years contribute training subtasks")
    # forest
    n_trees: int = _opt(100, "trees per forest")
    max_depth: int = _opt(12, "maximum tree depth")
    min_leaf: int = _opt(2, "minimum samples per leaf")
    max_features: int = _opt(0, "features tried per split; 0 means ceil(sqrt(15))")
    # meta-learning
    hidden: tuple = _opt((32, 32), "hidden layer widths")
    iterations: int = _opt(3000, "meta-training iterations")
    inner_steps: int = _opt(5, "inner-loop updates per subtask")
    inner_batch: int = _opt(16, "inner-loop batch size")
    meta_batch: int = _opt(16, "subtasks per meta-training iteration")
    inner_lr: float = _opt(0.01, "initial inner learning rate")
    outer_lr: float = _opt(0.001, "outer (meta) learning rate")
    learn_inner_lr: bool = _opt(True, "train the inner learning rate")
    first_order: bool = _opt(False, "drop second-order terms of the meta-gradient")
    optimizer: str = _opt("sgd", "outer optimizer: sgd or adam")
    adapt_steps: int = _opt(5, "update passes when adapting to a sample-scarce year")
    adapt_batch: int = _opt(8, "mini-batch size when adapting")
    # mapping and enhancement
    breaks: tuple = _opt((0.2, 0.4, 0.6, 0.8), "probability breaks between the five susceptibility levels")
    slope_min: float = _opt(5.0, "minimum slope (degrees) of usable deformation points")
    max_distance: float = _opt(0.0, "deformation levels reach at most this far from a point; 0 means unlimited")
    # attribution
    shap_mode: str = _opt("auto", "Shapley computation: auto, exact or mc")
    n_permutations: int = _opt(200, "sampled orderings per instance in mc mode")
    shap_instances: int = _opt(30, "explained instances per year")
    shap_background: int = _opt(30, "background rows per year")
    top_k: int = _opt(6, "factors listed in the trajectory table")
    # evaluation
    n_repeats: int = _opt(5, "shuffled train/test repeats")
    adapt_L: tuple = _opt((0, 1, 2, 3, 4, 5), "update counts of the adaptation study")
    adapt_repeats: int = _opt(5, "repeats per year in the adaptation study")
    mlp_epochs: int = _opt(100, "epochs of the baseline MLP")
    mlp_lr: float = _opt(0.05, "learning rate of the baseline MLP")
    mlp_batch: int = _opt(16, "batch size of the baseline MLP")
    # synthetic world
    synth_nrows: int = _opt(100, "synthetic grid rows")
    synth_ncols: int = _opt(100, "synthetic grid columns")
    synth_cellsize: float = _opt(30.0, "synthetic cell size")
    synth_years: tuple = _opt((2000, 2007), "first and last synthetic year")
    synth_counts: tuple = _opt((), "landslides per synthetic year; empty uses the built-in pattern")
    synth_deformation: int = _opt(2000, "synthetic deformation points")
    # execution
    seed: int = _opt(0, "master random seed")
    threads: int = _opt(1, "worker threads; results do not depend on it")

    base_dir: str = field(default=".", metadata={"internal": True}, compare=False)

    # --- helpers ---

    def path(self, name: str) -> str:
        value = getattr(self, name)
        return value if os.path.isabs(value) else os.path.normpath(os.path.join(self.base_dir, value))

    def out(self, *parts) -> str:
        return os.path.join(self.path("out_dir"), *parts)

    def samples_path(self) -> str:
        return self.path("samples") if self.samples else self.out("featurize", "samples.csv")

    def span(self):
        if self.span_start and self.span_end:
            return (self.span_start, self.span_end)
        return None

    def public(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in config_fields()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.public(), sort_keys=True).encode()).hexdigest()

    def forest(self) -> ForestConfig:
        return ForestConfig(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            min_leaf=self.min_leaf,
            max_features=self.max_features or None,
            seed=self.seed,
            n_jobs=self.threads,
        )

    def meta(self) -> MetaConfig:
        return MetaConfig(
            hidden=tuple(self.hidden),
            iterations=self.iterations,
            inner_steps=self.inner_steps,
            inner_batch=self.inner_batch,
            meta_batch=self.meta_batch,
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            learn_inner_lr=self.learn_inner_lr,
            first_order=self.first_order,
            optimizer=self.optimizer,
            seed=self.seed,
        )

    def synth(self) -> SynthConfig:
        return SynthConfig(
            nrows=self.synth_nrows,
            ncols=self.synth_ncols,
            cellsize=self.synth_cellsize,
            years=(int(self.synth_years[0]), int(self.synth_years[-1])),
            counts=tuple(self.synth_counts) or None,
            n_deformation=self.synth_deformation,
            seed=self.seed,
        )

    def validate(self) -> None:
        checks = [
            (self.rich_threshold >= 1, "rich_threshold must be at least 1"),
            (self.shot_size >= 2, "shot_size must be at least 2"),
            (self.n_trees >= 1, "n_trees must be at least 1"),
            (self.iterations >= 0, "iterations must be non-negative"),
            (self.threads >= 1, "threads must be at least 1"),
            (self.shap_mode in ("auto", "exact", "mc"), "shap_mode must be auto, exact or mc"),
            (self.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam"),
            (len(self.breaks) == 4 and all(0 < a < b < 1 for a, b in zip(self.breaks, self.breaks[1:])) and 0 < self.breaks[0], "breaks must be four increasing values in (0, 1)"),
            (len(self.synth_years) == 2, "synth_years needs a first and last year"),
            (self.inner_lr > 0 and self.outer_lr > 0, "learning rates must be positive"),
            (self.n_repeats >= 1 and self.adapt_repeats >= 1, "repeat counts must be at least 1"),
            ((self.span_start == 0) == (self.span_end == 0), "set both span_start and span_end, or neither"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def config_fields():
    return [f for f in fields(RunConfig) if not f.metadata.get("internal")]


def _coerce(name: str, default, value):
    """Convert a TOML or command-line value to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("true", "1", "yes"):
                return True
            if str(value).lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
            kind = float if name == "breaks" else int
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {name}: {value!r}") from None


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    values = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                values = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        cfg.base_dir = os.path.dirname(os.path.abspath(path))
    known = {f.name: f for f in config_fields()}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    for key, value in values.items():
        setattr(cfg, key, _coerce(key, known[key].default, value))
    for key, value in (overrides or {}).items():
        value = _coerce(key, known[key].default, value)
        if key in PATH_FIELDS and value and not os.path.isabs(value):
            # command-line paths are relative to the working directory
            value = os.path.relpath(os.path.abspath(value), cfg.base_dir)
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def dump_toml(cfg: RunConfig, **replace) -> str:
    """Flat TOML text of a config, with selected keys replaced."""
    lines = []
    for f in config_fields():
        v = replace.get(f.name, getattr(cfg, f.name))
        lines.append(f"{f.name} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return json.dumps(str(v))


# --- shared plumbing -----------------------------------------------------------


def require(*paths) -> None:
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"required input not found: {p}")


def write_manifest(cfg: RunConfig, outdir: str, command: str, details: dict | None = None) -> None:
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.public(),
        "config_hash": cfg.hash(),
        "seeds": {"seed": cfg.seed},
        "versions": {"dynlsm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "backend": BACKEND,
        "details": details or {},
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def stack_paths(cfg: RunConfig):
    rdir, vdir = cfg.path("rasters_dir"), cfg.path("vectors_dir")
    rasters = {n: os.path.join(rdir, f"{n}.asc") for n in RASTER_LAYERS}
    lines = {n: os.path.join(vdir, f"{n}.ndjson") for n in LINE_LAYERS.values()}
    polygons = {n: os.path.join(vdir, f"{n}.ndjson") for n in POLYGON_LAYERS}
    for kind, group in (("raster", rasters), ("line", lines), ("polygon", polygons)):
        for name, p in group.items():
            if not os.path.exists(p):
                raise ConfigError(f"missing {kind} layer {name!r}: {p}")
    return rasters, lines, polygons


def open_stack(cfg: RunConfig):
    rasters, lines, polygons = stack_paths(cfg)
    require(cfg.path("stations"))
    return load_stack(rasters, lines, polygons, cfg.path("stations"))


def read_inventory(cfg: RunConfig):
    require(cfg.path("landslides"))
    records = read_landslides_csv(cfg.path("landslides"))
    if not records:
        raise DataError(f"{cfg.path('landslides')}: landslide inventory is empty")
    return records


def load_samples(cfg: RunConfig):
    path = cfg.samples_path()
    require(path)
    samples = read_samples_csv(path)
    if not samples:
        raise DataError(f"{path}: no samples")
    return samples


def load_model(path: str):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("kind") == "forest":
        return ForestModel.from_dict(d)
    if d.get("kind") == "adapted":
        return AdaptedModel.from_dict(d)
    raise DataError(f"{path}: not a model file")


def load_routing(cfg: RunConfig) -> dict:
    path = cfg.out("models", "routing.json")
    require(path)
    with open(path) as fh:
        return {int(k): v for k, v in json.load(fh)["years"].items()}


def select_years(routing: dict, year: str) -> list[int]:
    if year == "all":
        return sorted(y for y, r in routing.items() if r["model"])
    try:
        y = int(year)
    except ValueError:
        raise ConfigError(f"year must be an integer or 'all', got {year!r}") from None
    if y not in routing or not routing[y]["model"]:
        raise ConfigError(f"no model for year {y}; run train first")
    return [y]


def _parallel(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# --- commands ------------------------------------------------------------------


def cmd_featurize(cfg: RunConfig, args=None) -> dict:
    """Factor extraction for the landslide inventory plus generated non-landslides."""
    stack = open_stack(cfg)
    records = read_inventory(cfg)
    samples, manifest, _ = featurize_inventory(records, stack, seed=cfg.seed, slope_threshold=cfg.neg_slope_max, idw_power=cfg.idw_power)
    outdir = cfg.out("featurize")
    os.makedirs(outdir, exist_ok=True)
    write_samples_csv(samples, os.path.join(outdir, "samples.csv"))
    write_manifest(cfg, outdir, "featurize", manifest)
    return manifest


def cmd_train(cfg: RunConfig, args=None) -> dict:
    """Route each year to a forest or to few-shot adaptation and persist the models."""
    samples = load_samples(cfg)
    tasks = build_year_tasks(samples, cfg.span(), seed=cfg.seed)
    outdir = cfg.out("models")
    os.makedirs(outdir, exist_ok=True)
    routing = {}
    for t in tasks:
        if t.no_data:
            routing[t.year] = {"route": "no-data", "n_positive": 0, "n_negative": 0, "model": ""}
        else:
            routing[t.year] = {"route": route_model(t, cfg.rich_threshold), "n_positive": t.n_positive, "n_negative": t.n_negative, "model": ""}
    if all(r["route"] == "no-data" for r in routing.values()):
        raise DataError("no year has samples to train on")

    forest_years = [t for t in tasks if routing[t.year]["route"] == FOREST]

    def fit(task):
        return train_forest(task, dataclasses.replace(cfg.forest(), seed=cfg.seed + task.year, n_jobs=1))

    for task, model in zip(forest_years, _parallel(fit, forest_years, cfg.threads)):
        name = f"forest_{task.year}.json"
        with open(os.path.join(outdir, name), "w") as fh:
            fh.write(model.to_json())
        routing[task.year]["model"] = name

    few = [t for t in tasks if routing[t.year]["route"] == FEWSHOT]
    meta_info = None
    if few:
        pool = build_meta_pool(tasks, cfg.rich_threshold, cfg.shot_size, cfg.seed, cfg.include_scarce)
        t0 = time.perf_counter()
        state = meta_train(pool, cfg.meta())
        log.info("meta-training: %d subtasks, %d iterations, %.1f s", len(pool.train_tasks), cfg.iterations, time.perf_counter() - t0)
        with open(os.path.join(outdir, "meta_state.json"), "w") as fh:
            fh.write(state.to_json())
        with open(os.path.join(outdir, "pool.json"), "w") as fh:
            fh.write(pool_manifest(pool) + "\n")
        meta_info = {"train_subtasks": len(pool.train_tasks), "test_subtasks": len(pool.test_tasks), "inner_lr": state.inner_lr}
        for t in few:
            model = adapt(state, t, steps=cfg.adapt_steps, batch_size=cfg.adapt_batch, seed=[cfg.seed, t.year])
            name = f"fewshot_{t.year}.json"
            with open(os.path.join(outdir, name), "w") as fh:
                fh.write(model.to_json())
            routing[t.year]["model"] = name
    for y, r in sorted(routing.items()):
        log.info("year %d: %s (%d landslides)", y, r["route"], r["n_positive"])
    _write_json(os.path.join(outdir, "routing.json"), {"years": {str(y): r for y, r in sorted(routing.items())}})
    details = {
        "forest_years": [t.year for t in forest_years],
        "fewshot_years": [t.year for t in few],
        "meta": meta_info,
    }
    write_manifest(cfg, outdir, "train", details)
    return details


def _imputation_means(cfg: RunConfig) -> np.ndarray:
    path = cfg.out("featurize", "manifest.json")
    if os.path.exists(path):
        with open(path) as fh:
            means = json.load(fh)["details"]["imputation_means"]
        return np.array([means[f] for f in FEATURES])
    X = np.array([s.features.values for s in load_samples(cfg)])
    return np.nanmean(X, axis=0)


def _featurizer(cfg: RunConfig) -> Featurizer:
    stack = open_stack(cfg)
    records = read_inventory(cfg)
    return Featurizer(stack, np.array([(e, n) for _, e, n in records]), cfg.idw_power)


def cmd_map(cfg: RunConfig, args=None) -> dict:
    """Per-cell probability and level rasters for the selected years."""
    routing = load_routing(cfg)
    years = select_years(routing, getattr(args, "year", "all"))
    feat = _featurizer(cfg)
    means = _imputation_means(cfg)
    g = feat.stack.geometry
    feat.grid_features(years[0])  # fills the static cache before any threads start
    outdir = cfg.out("maps")
    os.makedirs(outdir, exist_ok=True)

    def one(year):
        t0 = time.perf_counter()
        model = load_model(cfg.out("models", routing[year]["model"]))
        X, area = feat.grid_features(year)
        Xf, _ = impute_matrix(X[area], means)
        prob = np.full(g.size, np.nan)
        prob[area] = model.predict_proba(to_model_input(Xf))
        raster = SusceptibilityRaster(g, prob, breaks=cfg.breaks, year=year)
        write_asc(os.path.join(outdir, f"prob_{year}.asc"), g, raster.probability)
        write_asc(os.path.join(outdir, f"level_{year}.asc"), g, np.where(raster.valid, raster.level, np.nan), integer=True)
        log.info("map %d: %d cells in %.2f s", year, int(area.sum()), time.perf_counter() - t0)
        return {
            "year": year,
            "valid_cells": int(area.sum()),
            "proportions": level_proportions(raster).tolist(),
            "route": routing[year]["route"],
        }

    details = {"years": _parallel(one, years, cfg.threads)}
    write_manifest(cfg, outdir, "map", details)
    return details


def cmd_explain(cfg: RunConfig, args=None) -> dict:
    """Shapley rankings of the factors for each modelled year."""
    routing = load_routing(cfg)
    years = select_years(routing, getattr(args, "year", "all"))
    tasks = {t.year: t for t in build_year_tasks(load_samples(cfg), cfg.span(), seed=cfg.seed)}
    models, instances, backgrounds = {}, {}, {}
    for y in years:
        X = tasks[y].X() if y in tasks else np.empty((0, len(FEATURES)))
        if X.shape[0] == 0:
            continue
        models[y] = load_model(cfg.out("models", routing[y]["model"]))
        instances[y] = subsample_rows(X, cfg.shap_instances, [cfg.seed, y, 0])
        backgrounds[y] = subsample_rows(X, cfg.shap_background, [cfg.seed, y, 1])
    span_years = sorted(routing) if getattr(args, "year", "all") == "all" else years
    counts = {y: r["n_positive"] for y, r in routing.items()}
    rankings, rows = yearly_rankings(
        models, instances, backgrounds, span_years, counts, cfg.top_k, cfg.shap_mode, cfg.n_permutations, cfg.seed, threads=cfg.threads
    )
    outdir = cfg.out("explain")
    os.makedirs(outdir, exist_ok=True)
    write_attributions_csv(os.path.join(outdir, "attributions.csv"), rankings)
    write_rankings_csv(os.path.join(outdir, "rankings.csv"), rankings)
    write_trajectory_csv(os.path.join(outdir, "trajectory.csv"), rows, cfg.top_k)
    details = {"years": [r.year for r in rankings], "top": {str(r.year): list(r.top(cfg.top_k)) for r in rankings}}
    write_manifest(cfg, outdir, "explain", details)
    return details


def cmd_enhance(cfg: RunConfig, args=None) -> dict:
    """Fuse the mapped levels with binned deformation velocities."""
    routing = load_routing(cfg)
    years = select_years(routing, getattr(args, "year", "all"))
    require(cfg.path("deformation"))
    points = screen_points(read_deformation_csv(cfg.path("deformation")), cfg.slope_min)
    outdir = cfg.out("enhance")
    os.makedirs(outdir, exist_ok=True)
    deform = None
    details = {"points_used": len(points), "years": []}
    for y in years:
        prob_path = cfg.out("maps", f"prob_{y}.asc")
        if not os.path.exists(prob_path):
            raise ConfigError(f"no map for year {y}; run map first")
        g, prob = read_asc(prob_path)
        initial = SusceptibilityRaster(g, prob, breaks=cfg.breaks, year=y)
        if deform is None:
            deform = rasterize_levels(points, g, max_distance=cfg.max_distance or None)
            write_asc(os.path.join(outdir, "deformation_level.asc"), g, deform.level, integer=True)
        enhanced = fuse(initial, deform)
        write_asc(os.path.join(outdir, f"enhanced_{y}.asc"), g, np.where(enhanced.valid, enhanced.level, np.nan), integer=True)
        p0, p1 = level_proportions(initial), level_proportions(enhanced)
        write_proportions_csv(os.path.join(outdir, f"proportions_{y}.csv"), p0, p1)
        details["years"].append(
            {"year": y, "initial": p0.tolist(), "enhanced": p1.tolist(), "high_initial": float(p0[3:].sum()), "high_enhanced": float(p1[3:].sum())}
        )
    write_manifest(cfg, outdir, "enhance", details)
    return details


def _mlp_factory(cfg: RunConfig):
    sizes = (len(FEATURES), *cfg.hidden, 2)

    def factory(X, y, seed):
        return train_from_scratch(X, y, sizes, cfg.mlp_epochs, cfg.mlp_batch, cfg.mlp_lr, seed)

    return factory


def _forest_factory(cfg: RunConfig):
    def factory(X, y, seed):
        return fit_arrays(X, y, dataclasses.replace(cfg.forest(), seed=seed))

    return factory


def cmd_eval(cfg: RunConfig, args=None) -> dict:
    """Shuffled-repeat metrics overall and per year, plus the adaptation study."""
    samples = load_samples(cfg)
    factories = {"forest": _forest_factory(cfg), "mlp": _mlp_factory(cfg)}
    X, y = model_matrix(samples), label_vector(samples)
    report = shuffled_eval(factories, X, y, cfg.n_repeats, cfg.seed)
    outdir = cfg.out("eval")
    report.write(os.path.join(outdir, "overall"))

    # per-year regime: one model per year, scored within that year
    periodic = {}
    for t in build_year_tasks(samples, cfg.span(), seed=cfg.seed):
        if min(t.n_positive, t.n_negative) < 4:
            continue
        r = shuffled_eval(factories, t.X(), t.y(), cfg.n_repeats, [cfg.seed, t.year])
        periodic[t.year] = r
        r.write(os.path.join(outdir, "periodic", str(t.year)))

    meta_path = cfg.out("models", "meta_state.json")
    adaptation = []
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            state = MetaState.from_dict(json.load(fh))
        scarce = [
            t
            for t in build_year_tasks(samples, cfg.span(), seed=cfg.seed)
            if not t.no_data and t.n_positive < cfg.rich_threshold and min(t.n_positive, t.n_negative) >= 2
        ]
        for learner in ("meta", "scratch"):
            adaptation.extend(
                adaptation_study(state, scarce, cfg.adapt_L, cfg.adapt_repeats, cfg.seed, cfg.adapt_batch, learner)
            )
        EvalReport(cfg.adapt_repeats, adaptation=adaptation).write(os.path.join(outdir, "adaptation"))

    table = {"overall": {m: report.summary(m) for m in factories}}
    table["periodic"] = {}
    for m in factories:
        vals = {k: [r.summary(m)[k]["mean"] for r in periodic.values()] for k in ("accuracy", "precision", "recall", "f1", "auroc")}
        table["periodic"][m] = {k: (float(np.mean([v for v in vs if v is not None])) if any(v is not None for v in vs) else None) for k, vs in vals.items()}
    _write_json(os.path.join(outdir, "table.json"), table)
    _write_table_csv(os.path.join(outdir, "table.csv"), table)
    details = {"n_samples": len(samples), "periodic_years": sorted(periodic), "adaptation_rows": len(adaptation)}
    write_manifest(cfg, outdir, "eval", details)
    return table


def _write_table_csv(path, table) -> None:
    keys = ("accuracy", "precision", "recall", "f1", "auroc")
    with open(path, "w") as fh:
        fh.write("regime,model," + ",".join(keys) + "\n")
        for m, s in table["overall"].items():
            fh.write("overall," + m + "," + ",".join("" if s[k]["mean"] is None else repr(s[k]["mean"]) for k in keys) + "\n")
        for m, s in table["periodic"].items():
            fh.write("periodic," + m + "," + ",".join("" if s[k] is None else repr(s[k]) for k in keys) + "\n")


def cmd_synth(cfg: RunConfig, args=None) -> dict:
    """Write a synthetic study area and a config that runs the pipeline on it."""
    world = generate(cfg.synth())
    outdir = cfg.path("out_dir")
    paths = write_world(world, outdir)
    rel = {
        "rasters_dir": "rasters",
        "vectors_dir": "vectors",
        "stations": "stations.csv",
        "landslides": "landslides.csv",
        "deformation": "deformation.csv",
        "samples": "",
        "out_dir": "run",
    }
    with open(os.path.join(outdir, "config.toml"), "w") as fh:
        fh.write(dump_toml(cfg, **rel))
    details = {
        "files": sorted(os.path.relpath(p, outdir) for p in paths.values()),
        "coefficients": {str(y): list(c) for y, c in world.coefficients.items()},
        "counts": {str(y): c for y, c in world.config.year_counts().items()},
    }
    # record the written config so the manifest does not depend on where the world lives
    write_manifest(dataclasses.replace(cfg, **rel), outdir, "synth", details)
    return details


COMMANDS = {
    "featurize": cmd_featurize,
    "train": cmd_train,
    "map": cmd_map,
    "explain": cmd_explain,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "synth": cmd_synth,
}
YEAR_COMMANDS = ("map", "explain", "enhance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynlsm", description="Dynamic landslide susceptibility mapping.")
    parser.add_argument("--version", action="version", version=f"dynlsm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", default=os.environ.get(CONFIG_ENV), help=f"TOML config file (default: ${CONFIG_ENV})")
        p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
        if name in YEAR_COMMANDS:
            p.add_argument("--year", default="all", help="a single year or 'all'")
        group = p.add_argument_group("config overrides")
        for f in config_fields():
            flag = "--" + f.name.replace("_", "-").lower()
            if isinstance(f.default, bool):
                group.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction, help=f.metadata["help"])
            else:
                group.add_argument(flag, dest=f.name, default=None, metavar=type(f.default).__name__.upper(), help=f.metadata["help"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {f.name: getattr(args, f.name) for f in config_fields() if getattr(args, f.name) is not None}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except DynLSMError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
