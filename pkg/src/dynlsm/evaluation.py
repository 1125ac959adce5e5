"""Classification metrics, ROC analysis and evaluation harnesses."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from dynlsm.data_model import Metrics, YearTask
from dynlsm.errors import DataError, InvalidInputError
from dynlsm.meta_mlp import MetaState, adapt, train_from_scratch

THRESHOLD = 0.5
FPR_LATTICE = np.linspace(0.0, 1.0, 101)

ModelFactory = Callable[[np.ndarray, np.ndarray, int], Callable[[np.ndarray], np.ndarray]]


def _check_pair(labels, other):
    labels = np.asarray(labels)
    other = np.asarray(other)
    if labels.shape != other.shape or labels.ndim != 1:
        raise InvalidInputError(f"length mismatch: {labels.shape} vs {other.shape}")
    if labels.size == 0:
        raise InvalidInputError("metrics need at least one sample")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidInputError("labels must be 0 or 1")
    return labels.astype(np.int64), other


def confusion_counts(labels, predicted) -> tuple[int, int, int, int]:
    """``(tp, tn, fp, fn)`` of binary predictions."""
    y, p = _check_pair(labels, predicted)
    p = p.astype(np.int64)
    tp = int(np.sum((y == 1) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    return tp, tn, fp, fn


def _ratio(num, den):
    return num / den if den else math.nan


def confusion_metrics(labels, predicted) -> Metrics:
    """Accuracy, precision, recall and F1 of 0/1 predictions.

    A ratio with a zero denominator is NaN and its name is listed in
    ``Metrics.undefined``.
    """
    tp, tn, fp, fn = confusion_counts(labels, predicted)
    accuracy = (tp + tn) / (tp + tn + fp + fn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        f1 = math.nan
    else:
        f1 = 2 * precision * recall / (precision + recall)
    undefined = tuple(name for name, v in (("precision", precision), ("recall", recall), ("f1", f1)) if math.isnan(v))
    return Metrics(accuracy, precision, recall, f1, undefined=undefined)


def roc_auroc(labels, scores) -> tuple[tuple[tuple[float, float], ...], float]:
    """ROC points ``(fpr, tpr)`` over descending unique scores and the trapezoid AUROC.

    Samples with equal scores enter the curve together, so ties contribute
    a diagonal segment.
    """
    y, s = _check_pair(labels, scores)
    s = s.astype(np.float64)
    if np.any(np.isnan(s)):
        raise InvalidInputError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), y.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return tuple(zip(fpr.tolist(), tpr.tolist())), auc


def score_metrics(labels, scores, threshold: float = THRESHOLD) -> Metrics:
    """Confusion metrics at ``threshold`` plus ROC curve and AUROC."""
    scores = np.asarray(scores, dtype=np.float64)
    m = confusion_metrics(labels, (scores >= threshold).astype(np.int64))
    curve, auc = roc_auroc(labels, scores)
    return Metrics(m.accuracy, m.precision, m.recall, m.f1, auc, curve, m.undefined)


def tpr_at(curve, lattice=FPR_LATTICE) -> np.ndarray:
    """Vertical sample of a piecewise-linear ROC curve.

    At an FPR where the curve rises vertically, the top of the rise is used.
    """
    pts = np.asarray(curve, dtype=np.float64)
    fpr, tpr = pts[:, 0], pts[:, 1]
    lattice = np.asarray(lattice, dtype=np.float64)
    i = np.searchsorted(fpr, lattice, side="right") - 1
    i = np.clip(i, 0, fpr.size - 1)
    j = np.minimum(i + 1, fpr.size - 1)
    span = fpr[j] - fpr[i]
    w = np.where(span > 0, (lattice - fpr[i]) / np.where(span > 0, span, 1.0), 0.0)
    return tpr[i] + w * (tpr[j] - tpr[i])


# --- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-model run metrics, averaged ROC curves and adaptation curves."""

    n_repeats: int
    runs: dict[str, list[Metrics]] = field(default_factory=dict)
    mean_tpr: dict[str, np.ndarray] = field(default_factory=dict)
    adaptation: list[dict] = field(default_factory=list)
    seed: int = 0

    def summary(self, model: str) -> dict:
        runs = self.runs[model]
        out = {}
        for key in ("accuracy", "precision", "recall", "f1", "auroc"):
            vals = np.array([getattr(m, key) for m in runs], dtype=np.float64)
            ok = vals[~np.isnan(vals)]
            out[key] = {
                "mean": float(ok.mean()) if ok.size else None,
                "min": float(ok.min()) if ok.size else None,
                "max": float(ok.max()) if ok.size else None,
                "n_defined": int(ok.size),
            }
        return out

    def mean_auroc(self, model: str) -> float:
        return float(np.mean([m.auroc for m in self.runs[model]]))

    def to_dict(self) -> dict:
        return {
            "n_repeats": self.n_repeats,
            "seed": self.seed,
            "threshold": THRESHOLD,
            "models": {
                name: {"summary": self.summary(name), "runs": [m.to_dict() for m in runs]}
                for name, runs in self.runs.items()
            },
            "adaptation": self.adaptation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, outdir) -> list[str]:
        """Write ``report.json``, ``metrics.csv``, ``roc.csv`` and ``adaptation.csv``."""
        os.makedirs(outdir, exist_ok=True)
        written = []
        path = os.path.join(outdir, "report.json")
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")
        written.append(path)

        path = os.path.join(outdir, "metrics.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "run", "accuracy", "precision", "recall", "f1", "auroc"])
            for name, runs in self.runs.items():
                for r, m in enumerate(runs):
                    w.writerow([name, r] + [repr(float(v)) for v in (m.accuracy, m.precision, m.recall, m.f1, m.auroc)])
        written.append(path)

        path = os.path.join(outdir, "roc.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "run", "fpr", "tpr"])
            for name, runs in self.runs.items():
                for r, m in enumerate(runs):
                    for f, t in m.roc_curve:
                        w.writerow([name, r, repr(f), repr(t)])
                for f, t in zip(FPR_LATTICE, self.mean_tpr[name]):
                    w.writerow([name, "mean", repr(float(f)), repr(float(t))])
        written.append(path)

        if self.adaptation:
            path = os.path.join(outdir, "adaptation.csv")
            write_adaptation_csv(path, self.adaptation)
            written.append(path)
        return written


def stratified_split(y, rng: np.random.Generator, ratio=(3, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle each class and cut it at ``ratio``; both parts keep both classes."""
    y = np.asarray(y)
    frac = ratio[0] / float(sum(ratio))
    train, test = [], []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == c))
        if idx.size < 2:
            raise DataError(f"class {c} needs at least two samples to split")
        k = min(max(1, int(np.floor(frac * idx.size + 0.5))), idx.size - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def shuffled_eval(
    factories: Mapping[str, ModelFactory],
    X,
    y,
    n_repeats: int = 5,
    seed=0,
    split_ratio=(3, 1),
    threshold: float = THRESHOLD,
) -> EvalReport:
    """Repeated shuffled train/test evaluation of several model factories.

    Each factory is called as ``factory(X_train, y_train, seed)`` and must
    return a callable giving class-1 probabilities. Every repeat uses one
    split shared by all factories.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if n_repeats < 1:
        raise InvalidInputError("n_repeats must be at least 1")
    report = EvalReport(n_repeats, {name: [] for name in factories}, seed=int(seed) if np.isscalar(seed) else 0)
    seeds = np.random.SeedSequence(seed).spawn(n_repeats)
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        tr, te = stratified_split(y, rng, split_ratio)
        model_seed = int(rng.integers(2**31))
        for name, factory in factories.items():
            model = factory(X[tr], y[tr], model_seed)
            scores = np.asarray(model(X[te]), dtype=np.float64)
            report.runs[name].append(score_metrics(y[te], scores, threshold))
    for name, runs in report.runs.items():
        report.mean_tpr[name] = np.mean([tpr_at(m.roc_curve) for m in runs], axis=0)
    return report


# --- adaptation study --------------------------------------------------------


def population_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    return {
        "mean": mean,
        "std": float(np.sqrt(np.mean((v - mean) ** 2))),
        "min": float(v.min()),
        "max": float(v.max()),
        "n": int(v.size),
    }


def split_task(task: YearTask, rng: np.random.Generator, support_fraction: float = 0.5) -> YearTask:
    """Stratified support/query split of a year's samples."""
    y = np.array([s.label for s in task.samples])
    sup, qry = [], []
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == c))
        if idx.size < 2:
            raise DataError(f"year {task.year}: class {c} needs at least two samples")
        k = min(max(1, int(round(support_fraction * idx.size))), idx.size - 1)
        sup.extend(idx[:k].tolist())
        qry.extend(idx[k:].tolist())
    return YearTask(task.year, task.samples, tuple(sorted(sup)), tuple(sorted(qry)))


def adaptation_study(
    state: MetaState,
    tasks: Sequence[YearTask],
    L_values: Sequence[int] = (0, 1, 2, 3, 4, 5),
    repeats: int = 5,
    seed=0,
    batch_size: int | None = 8,
    learner: str = "meta",
) -> list[dict]:
    """Query accuracy after ``L`` update passes, per year and ``L``.

    Each repeat draws a fresh stratified half/half split of the year's
    samples; the model is adapted on the support half and scored on the
    query half. ``learner="scratch"`` trains a freshly initialized network
    with the same schedule and learning rate instead of starting from the
    meta state. Statistics use the population standard deviation.
    """
    if learner not in ("meta", "scratch"):
        raise InvalidInputError(f"unknown learner {learner!r}")
    rows = []
    for task in tasks:
        if task.no_data:
            continue
        acc = {L: [] for L in L_values}
        for r in range(repeats):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), task.year, r]))
            t = split_task(task, rng)
            fit_seed = int(rng.integers(2**31))
            Xq, yq = t.X("query"), t.y("query")
            for L in L_values:
                if learner == "meta":
                    model = adapt(state, t, steps=L, batch_size=batch_size, seed=fit_seed, which="support")
                else:
                    model = train_from_scratch(
                        t.X("support"), t.y("support"), state.sizes, L, batch_size, state.inner_lr, fit_seed
                    )
                pred = (model.predict_proba(Xq) >= THRESHOLD).astype(np.int64)
                acc[L].append(float(np.mean(pred == yq)))
        for L in L_values:
            rows.append({"year": task.year, "n_positive": task.n_positive, "learner": learner, "L": int(L), **population_stats(acc[L])})
    return rows


def write_adaptation_csv(path, rows: Sequence[dict]) -> None:
    cols = ["learner", "year", "n_positive", "L", "mean", "std", "min", "max", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
