"""Per-year mapping tasks, the meta-learning subtask pool and model routing."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from dynlsm.data_model import LabeledSample, TaskPool, YearTask
from dynlsm.errors import ConfigError, NoDataError

FOREST = "forest"
FEWSHOT = "fewshot"
RICH_THRESHOLD = 50
SHOT_SIZE = 16


def _rng(seed, year: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(year)]))


def balance(samples: Sequence[LabeledSample], rng: np.random.Generator) -> list[LabeledSample]:
    """Drop a random surplus of the majority class; original order is kept."""
    pos = [i for i, s in enumerate(samples) if s.label == 1]
    neg = [i for i, s in enumerate(samples) if s.label == 0]
    k = min(len(pos), len(neg))
    keep = set(pos) | set(neg)
    for group in (pos, neg):
        if len(group) > k:
            keep -= set(rng.choice(group, size=len(group) - k, replace=False).tolist())
    return [samples[i] for i in sorted(keep)]


def build_year_tasks(samples: Sequence[LabeledSample], span: tuple[int, int] | None = None, seed=0) -> list[YearTask]:
    """One balanced task per calendar year of ``span`` (inclusive).

    Years without samples give empty tasks. When ``span`` is None it runs
    from the first to the last sample year.
    """
    by_year: dict[int, list[LabeledSample]] = {}
    for s in samples:
        by_year.setdefault(s.year, []).append(s)
    if span is None:
        if not by_year:
            return []
        span = (min(by_year), max(by_year))
    lo, hi = int(span[0]), int(span[1])
    if hi < lo:
        raise ConfigError(f"year span {lo}-{hi} is empty")
    return [YearTask(y, balance(by_year.get(y, []), _rng(seed, y))) for y in range(lo, hi + 1)]


def split_subtasks(task: YearTask, shot_size: int, rng: np.random.Generator) -> list[YearTask]:
    """Disjoint balanced subtasks of ``2 * shot_size`` samples.

    Each subtask holds ``shot_size`` samples per class; half of each class
    goes to the support set and half to the query set. Leftover samples that
    cannot fill a whole subtask are dropped.
    """
    pos = [i for i, s in enumerate(task.samples) if s.label == 1]
    neg = [i for i, s in enumerate(task.samples) if s.label == 0]
    pos = list(rng.permutation(pos))
    neg = list(rng.permutation(neg))
    n_sub = min(len(pos), len(neg)) // shot_size
    h1 = shot_size // 2
    out = []
    for k in range(n_sub):
        p = pos[k * shot_size : (k + 1) * shot_size]
        q = neg[k * shot_size : (k + 1) * shot_size]
        # support gets h1 of each class, query the rest (the larger half for odd shots)
        picked = [task.samples[i] for i in p[:h1] + q[:h1] + p[h1:] + q[h1:]]
        n_sup = 2 * h1
        out.append(YearTask(task.year, picked, tuple(range(n_sup)), tuple(range(n_sup, len(picked)))))
    return out


def n_train_split(n: int, ratio: tuple[int, int] = (3, 1)) -> int:
    """Train share of ``n`` subtasks, rounded half up, at least one."""
    if n == 0:
        return 0
    frac = ratio[0] / float(ratio[0] + ratio[1])
    return max(1, int(np.floor(frac * n + 0.5)))


def build_meta_pool(
    year_tasks: Sequence[YearTask],
    rich_threshold: int = RICH_THRESHOLD,
    shot_size: int = SHOT_SIZE,
    seed=0,
    include_scarce: bool = False,
    split_ratio: tuple[int, int] = (3, 1),
) -> TaskPool:
    """Partition sample-rich years into subtasks and split them train/test.

    Years with more than ``rich_threshold`` landslides are cut into
    subtasks. With ``include_scarce`` the remaining years that can fill at
    least one subtask contribute too, to the training pool only.
    """
    if shot_size < 2:
        raise ConfigError("shot_size must be at least 2")
    rich, scarce = [], []
    for t in year_tasks:
        if t.no_data:
            continue
        subs = split_subtasks(t, shot_size, _rng(seed, t.year))
        (rich if t.n_positive > rich_threshold else scarce).extend(subs)
    if not rich:
        raise NoDataError(f"no year has more than {rich_threshold} landslides; meta-learning is impossible")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B]))
    order = rng.permutation(len(rich))
    k = n_train_split(len(rich), split_ratio)
    train = [rich[i] for i in order[:k]]
    test = [rich[i] for i in order[k:]]
    if include_scarce:
        train.extend(scarce)
    return TaskPool(tuple(train), tuple(test), tuple(split_ratio))


def route_model(task: YearTask, rich_threshold: int = RICH_THRESHOLD) -> str:
    """``"forest"`` for years with at least ``rich_threshold`` landslides, else ``"fewshot"``."""
    if task.no_data:
        raise NoDataError(f"year {task.year}: no samples")
    return FOREST if task.n_positive >= rich_threshold else FEWSHOT


def pool_manifest(pool: TaskPool, indent: int | None = 1) -> str:
    """JSON listing subtask membership by sample id."""
    return json.dumps(pool.manifest(), indent=indent, sort_keys=True)
