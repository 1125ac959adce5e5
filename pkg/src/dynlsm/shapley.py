"""Shapley-value attribution of model predictions to input factors.

Absent features take their values from background rows (interventional
expectation), so the value of a coalition ``S`` for instance ``x`` is the
mean model output over the background with the ``S`` columns replaced by
``x``. Any callable mapping an ``(m, n)`` array to ``m`` probabilities can be
explained.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from dynlsm.data_model import FEATURES
from dynlsm.errors import ConfigError, DataError

Model = Callable[[np.ndarray], np.ndarray]

EXACT_MAX_FEATURES = 20
AUTO_EXACT_MAX = 13


@dataclass(frozen=True)
class Attribution:
    phi: np.ndarray
    base_value: float
    prediction: float
    method: str = "exact"

    @property
    def efficiency_gap(self) -> float:
        return float(self.phi.sum() - (self.prediction - self.base_value))


@dataclass(frozen=True)
class Ranking:
    """Factors in descending order of mean absolute Shapley value."""

    features: tuple[str, ...]
    mean_abs: tuple[float, ...]
    year: int | None = None
    phi: np.ndarray | None = None  # (instances, n) in the original factor order
    base_value: float | None = None

    def rank_of(self, name: str) -> int:
        """1-based rank of a factor."""
        return self.features.index(name) + 1

    def top(self, k: int) -> tuple[str, ...]:
        return self.features[:k]


def _predict(model: Model, X: np.ndarray) -> np.ndarray:
    return np.asarray(model(np.ascontiguousarray(X)), dtype=np.float64).reshape(-1)


def _row_mean(vals: np.ndarray, axis: int = -1) -> np.ndarray:
    # shifted mean: exact when all values along the axis are equal
    first = np.take(vals, [0], axis=axis)
    return np.squeeze(first, axis=axis) + (vals - first).mean(axis=axis)


def _mask_of(S, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if S is None:
        return mask
    S = np.asarray(S)
    if S.dtype == bool:
        return S.copy()
    mask[S.astype(np.int64)] = True
    return mask


def coalition_value(model: Model, x, S, background) -> float:
    """Mean model output over background rows with ``S`` columns set from ``x``."""
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise DataError("background must be a non-empty (k, n) array")
    x = np.asarray(x, dtype=np.float64)
    mask = _mask_of(S, x.size)
    composite = background.copy()
    composite[:, mask] = x[mask]
    return float(_row_mean(_predict(model, composite)))


def _all_coalition_values(model, x, background, chunk_rows=1 << 16):
    n = x.size
    k = background.shape[0]
    n_masks = 1 << n
    bits = ((np.arange(n_masks)[:, None] >> np.arange(n)) & 1).astype(bool)
    values = np.empty(n_masks)
    per_chunk = max(1, chunk_rows // k)
    for s in range(0, n_masks, per_chunk):
        m = bits[s : s + per_chunk]
        comp = np.where(m[:, None, :], x[None, None, :], background[None, :, :])
        out = _predict(model, comp.reshape(-1, n)).reshape(m.shape[0], k)
        values[s : s + m.shape[0]] = _row_mean(out, axis=1)
    return values


def shapley_exact(model: Model, x, background) -> Attribution:
    """Shapley values by enumerating every coalition.

    Cost is ``2**n * len(background)`` model evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    n = x.size
    if n > EXACT_MAX_FEATURES:
        raise ConfigError(f"exact Shapley enumeration is limited to {EXACT_MAX_FEATURES} features; use shapley_mc")
    if background.ndim != 2 or background.shape[0] == 0:
        raise DataError("background must be a non-empty (k, n) array")
    v = _all_coalition_values(model, x, background)
    masks = np.arange(1 << n)
    sizes = _popcount(masks)
    fact = [math.factorial(i) for i in range(n + 1)]
    weight_by_size = np.array([fact[s] * fact[n - s - 1] / fact[n] if s < n else 0.0 for s in range(n + 1)])
    phi = np.empty(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weight_by_size[sizes[without]] * (v[without | bit] - v[without]))
    return Attribution(phi, float(v[0]), float(v[-1]), "exact")


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    count = np.zeros_like(a)
    while np.any(a):
        count += a & 1
        a >>= 1
    return count


def shapley_mc(model: Model, x, background, n_permutations: int = 1000, seed=0, chunk_rows=1 << 16) -> Attribution:
    """Permutation-sampling estimate of the Shapley values.

    Each sampled ordering adds features one at a time; the marginal
    contributions along one ordering telescope to ``f(x) - E[f]``, so the
    estimate satisfies efficiency for any number of permutations.
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise DataError("background must be a non-empty (k, n) array")
    n, k = x.size, background.shape[0]
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_permutations, n)), axis=1)
    total = np.zeros(n)
    v_empty = float(_row_mean(_predict(model, background)))
    v_full = float(_predict(model, x[None, :])[0])
    per_chunk = max(1, chunk_rows // (k * (n - 1))) if n > 1 else n_permutations
    for s in range(0, n_permutations, per_chunk):
        P = perms[s : s + per_chunk]
        p = P.shape[0]
        # position of each feature within its permutation
        pos = np.empty_like(P)
        pos[np.arange(p)[:, None], P] = np.arange(n)[None, :]
        # coalition j (1..n-1) holds features whose position is < j
        steps = np.arange(1, n)
        masks = pos[:, None, :] < steps[None, :, None]  # (p, n-1, n)
        comp = np.where(masks[:, :, None, :], x[None, None, None, :], background[None, None, :, :])
        vals = _predict(model, comp.reshape(-1, n)).reshape(p, n - 1, k)
        vals = _row_mean(vals, axis=2)
        chain = np.concatenate([np.full((p, 1), v_empty), vals, np.full((p, 1), v_full)], axis=1)
        inc = np.diff(chain, axis=1)  # inc[:, j] belongs to feature P[:, j]
        np.add.at(total, P.ravel(), inc.ravel())
    phi = total / n_permutations
    return Attribution(phi, v_empty, v_full, "mc")


def explain(model: Model, x, background, mode: str = "auto", n_permutations: int = 1000, seed=0) -> Attribution:
    n = np.asarray(x).size
    if mode == "auto":
        mode = "exact" if n <= AUTO_EXACT_MAX else "mc"
    if mode == "exact":
        return shapley_exact(model, x, background)
    if mode == "mc":
        return shapley_mc(model, x, background, n_permutations, seed)
    raise ConfigError(f"unknown Shapley mode {mode!r}")


def rank_features(
    model: Model,
    instances,
    background,
    mode: str = "auto",
    n_permutations: int = 1000,
    seed=0,
    year: int | None = None,
    feature_names: Sequence[str] = FEATURES,
) -> Ranking:
    """Sort factors by their mean absolute Shapley value over ``instances``.

    Ties keep factor-index order.
    """
    X = np.asarray(instances, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("rank_features needs at least one instance")
    seeds = np.random.SeedSequence(seed).generate_state(X.shape[0])
    attrs = [explain(model, x, background, mode, n_permutations, int(s)) for x, s in zip(X, seeds)]
    phi = np.stack([a.phi for a in attrs])
    mean_abs = np.abs(phi).mean(axis=0)
    order = np.lexsort((np.arange(mean_abs.size), -mean_abs))
    names = tuple(feature_names[i] for i in order)
    return Ranking(names, tuple(float(mean_abs[i]) for i in order), year, phi, attrs[0].base_value)


def subsample_rows(X, cap: int, seed=0) -> np.ndarray:
    """At most ``cap`` rows of ``X``, chosen without replacement, in original order."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] <= cap:
        return X
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(X.shape[0], size=cap, replace=False))]


def confidence_tag(n_positive: int | None) -> str:
    """Sample-count class of a year: >50, 10-50, <10 or none."""
    if not n_positive:
        return "none"
    if n_positive > 50:
        return ">50"
    if n_positive >= 10:
        return "10-50"
    return "<10"


def yearly_rankings(
    models: Mapping[int, Model | None],
    instances: Mapping[int, np.ndarray],
    backgrounds: Mapping[int, np.ndarray],
    years: Sequence[int] | None = None,
    counts: Mapping[int, int] | None = None,
    top_k: int = 6,
    mode: str = "auto",
    n_permutations: int = 1000,
    seed=0,
    feature_names: Sequence[str] = FEATURES,
    threads: int = 1,
):
    """One ranking per modelled year plus a top-``k`` trajectory table.

    Years listed in ``years`` without a model produce a no-data trajectory
    row. Years are explained on up to ``threads`` workers; results do not
    depend on the worker count. Returns ``(rankings, trajectory_rows)``.
    """
    years = sorted(models) if years is None else list(years)
    counts = counts or {}

    def has_data(year):
        return models.get(year) is not None and year in instances and len(instances[year]) > 0

    def run(year):
        return rank_features(
            models[year], instances[year], backgrounds[year], mode, n_permutations, [seed, year], year, feature_names
        )

    todo = [y for y in years if has_data(y)]
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(threads) as pool:
            done = dict(zip(todo, pool.map(run, todo)))
    else:
        done = {y: run(y) for y in todo}
    rankings, rows = [], []
    for year in years:
        row = {"year": year, "n_positive": counts.get(year, 0), "confidence": confidence_tag(counts.get(year, 0))}
        if year not in done:
            row["status"] = "no-data"
            row.update({f"rank_{j + 1}": "" for j in range(top_k)})
            rows.append(row)
            continue
        r = done[year]
        rankings.append(r)
        row["status"] = "ok"
        row.update({f"rank_{j + 1}": name for j, name in enumerate(r.top(top_k))})
        rows.append(row)
    return rankings, rows


# --- CSV output --------------------------------------------------------------


def write_attributions_csv(path, rankings: Sequence[Ranking], feature_names: Sequence[str] = FEATURES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "instance_id", "feature", "phi"])
        for r in rankings:
            for i, row in enumerate(r.phi):
                for name, value in zip(feature_names, row):
                    w.writerow([r.year, i, name, repr(float(value))])


def write_rankings_csv(path, rankings: Sequence[Ranking]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "rank", "feature", "mean_abs_phi"])
        for r in rankings:
            for j, (name, value) in enumerate(zip(r.features, r.mean_abs)):
                w.writerow([r.year, j + 1, name, repr(value)])


def write_trajectory_csv(path, rows: Sequence[dict], top_k: int = 6) -> None:
    cols = ["year", "n_positive", "confidence", "status"] + [f"rank_{j + 1}" for j in range(top_k)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: row.get(c, "") for c in cols})
