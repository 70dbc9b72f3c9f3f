"""Confusion matrices, one-vs-rest metrics and repeated train/test evaluation.

All metrics are percentages. A metric whose denominator is zero is reported
as 0 and flagged in ``RunMetrics.undefined`` instead of becoming NaN.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .net import NetworkSpec, TrainConfig, predict_proba, stack_dataset, train
from .signal_prep import ClassLabel

log = logging.getLogger(__name__)

N_CLASSES = len(ClassLabel)
METRICS = ("precision", "recall", "specificity", "f1")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self):
        """(TP, FN, FP, TN) arrays indexed by class."""
        tp = np.diag(self.counts).copy()
        fn = self.counts.sum(axis=1) - tp
        fp = self.counts.sum(axis=0) - tp
        tn = self.total - tp - fn - fp
        return tp, fn, fp, tn


def confusion(pairs) -> ConfusionMatrix:
    """Tally ``(true, predicted)`` pairs; labels may be ``ClassLabel``, names or ints."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("confusion needs at least one (true, predicted) pair")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in pairs:
        counts[int(ClassLabel.parse(t)), int(ClassLabel.parse(p))] += 1
    return ConfusionMatrix(counts)


@dataclass
class RunMetrics:
    """Per-class metrics (percent) for one confusion matrix."""
    precision: np.ndarray
    recall: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    accuracy: float
    undefined: dict = field(default_factory=dict)  # metric -> bool array by class
    confusion: Optional[ConfusionMatrix] = None

    def macro(self, name: str) -> float:
        return float(np.mean(getattr(self, name)))

    def to_dict(self) -> dict:
        out = {m: [float(v) for v in getattr(self, m)] for m in METRICS}
        out["accuracy"] = float(self.accuracy)
        out["macro"] = {m: self.macro(m) for m in METRICS}
        out["undefined"] = {m: [bool(v) for v in self.undefined.get(m, ())] for m in METRICS}
        if self.confusion is not None:
            out["confusion"] = self.confusion.counts.tolist()
        return out


def _ratio(num, den):
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    bad = den == 0
    return np.where(bad, 0.0, 100.0 * num / np.where(bad, 1.0, den)), bad


def metrics(cm: ConfusionMatrix) -> RunMetrics:
    if cm.total <= 0:
        raise ValueError("metrics need a non-empty confusion matrix")
    tp, fn, fp, tn = cm.one_vs_rest()
    prec, u_p = _ratio(tp, tp + fp)
    rec, u_r = _ratio(tp, tp + fn)
    spec, u_s = _ratio(tn, tn + fp)
    f1, u_f = _ratio(2 * tp, 2 * tp + fp + fn)
    acc = 100.0 * np.trace(cm.counts) / cm.total
    return RunMetrics(prec, rec, spec, f1, float(acc),
                      {"precision": u_p, "recall": u_r, "specificity": u_s, "f1": u_f}, cm)


# ----------------------------------------------------------------- reports

@dataclass
class EvalReport:
    """Per-run metrics plus across-run mean and (population) standard deviation."""
    runs: list
    splits: list = field(default_factory=list)  # (train_idx, test_idx) per run
    seed: Optional[int] = None

    def _stack(self, name):
        return np.array([getattr(r, name) for r in self.runs], dtype=np.float64)

    def mean(self, name: str):
        return self._stack(name).mean(axis=0)

    def std(self, name: str):
        return self._stack(name).std(axis=0)

    def macro_mean(self, name: str) -> float:
        return float(np.mean([r.macro(name) for r in self.runs]))

    def macro_std(self, name: str) -> float:
        return float(np.std([r.macro(name) for r in self.runs]))

    def to_dict(self) -> dict:
        summary = {m: {"mean": self.mean(m).tolist(), "std": self.std(m).tolist(),
                       "macro_mean": self.macro_mean(m), "macro_std": self.macro_std(m)} for m in METRICS}
        summary["accuracy"] = {"mean": float(self.mean("accuracy")), "std": float(self.std("accuracy"))}
        return {"classes": [c.name for c in ClassLabel], "n_runs": len(self.runs), "seed": self.seed,
                "summary": summary, "runs": [r.to_dict() for r in self.runs]}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def per_class_csv(self, path, header_lines=()) -> None:
        """One row per class plus a macro row; mean and std for each metric."""
        cols = ["class"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in ClassLabel:
                w.writerow([c.name] + [f"{getattr(self, s)(m)[c]:.4f}" for m in METRICS for s in ("mean", "std")])
            w.writerow(["MACRO"] + [f"{getattr(self, 'macro_' + s)(m):.4f}" for m in METRICS for s in ("mean", "std")])
            w.writerow(["ACCURACY", f"{self.mean('accuracy'):.4f}", f"{self.std('accuracy'):.4f}"]
                       + [""] * (len(cols) - 3))

    def per_run_csv(self, path, header_lines=()) -> None:
        cols = ["run", "accuracy"] + [f"{m}_{c.name}" for m in METRICS for c in ClassLabel]
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, r in enumerate(self.runs):
                w.writerow([i, repr(float(r.accuracy))] + [repr(float(v)) for m in METRICS for v in getattr(r, m)])


# ---------------------------------------------------------- repeated runs

def split_indices(labels, train_fraction: float, rng: np.random.Generator, stratified: bool = True):
    """Disjoint, exhaustive (train, test) index arrays, both sorted."""
    labels = np.asarray(labels)
    n = len(labels)
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if stratified:
        train_idx = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            if len(idx) < 2:
                raise ValueError(f"class {c} has {len(idx)} example(s); stratified split needs at least 2")
            k = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
            train_idx.append(rng.permutation(idx)[:k])
        train_idx = np.sort(np.concatenate(train_idx))
    else:
        k = int(round(train_fraction * n))
        if not 0 < k < n:
            raise ValueError(f"split of {n} examples at {train_fraction} leaves an empty side")
        train_idx = np.sort(rng.permutation(n)[:k])
    test_idx = np.setdiff1d(np.arange(n), train_idx)
    return train_idx, test_idx


def run_seed(seed: int, run: int) -> int:
    """Per-run seed derived from the root seed and the run index."""
    return int(np.random.SeedSequence([int(seed), int(run)]).generate_state(1)[0])


def _one_run(args):
    X, y, spec, cfg, train_fraction, seed, run, stratified = args
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(run)]))
    tr, te = split_indices(y, train_fraction, rng, stratified)
    run_cfg = replace(cfg, seed=run_seed(seed, run))
    weights, _, _ = train(list(zip(X[tr], y[tr])), spec, run_cfg)
    pred = np.argmax(predict_proba(spec, weights, X[te]), axis=1)
    log.info("run %d: test accuracy %.2f%%", run, 100.0 * np.mean(pred == y[te]))
    return metrics(confusion(zip(y[te], pred))), (tr, te)


def repeated_eval(dataset, spec: NetworkSpec, cfg: TrainConfig, n_runs: int, train_fraction: float,
                  seed: int, stratified: bool = True, workers: int = 1) -> EvalReport:
    """Train and test on ``n_runs`` independent seeded splits of ``dataset``.

    ``dataset`` is ``[(FeatureMatrix, label), ...]``. Run ``r`` draws its split
    from ``SeedSequence([seed, r])`` and initializes the network from
    ``run_seed(seed, r)``, so any single run can be reproduced on its own.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    X, y = stack_dataset(spec, dataset)
    tasks = [(X, y, spec, cfg, train_fraction, seed, r, stratified) for r in range(n_runs)]
    # fail fast on an impossible split before any training
    split_indices(y, train_fraction, np.random.default_rng(0), stratified)
    if workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_one_run, tasks))
    else:
        out = [_one_run(t) for t in tasks]
    return EvalReport([m for m, _ in out], [s for _, s in out], seed)


# ----------------------------------------------------------- accuracy grid

CURVE_COLUMNS = ("j", "beta", "alpha", "architecture", "optimizer", "n_runs", "accuracy_mean", "accuracy_std")


def write_accuracy_curve(path, cells: Sequence, header_lines=()) -> None:
    """``cells`` holds ``(j, alpha, architecture, optimizer, EvalReport)`` tuples."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for j, alpha, arch, opt, rep in sorted(cells, key=lambda c: (c[2], c[3], c[1], c[0])):
            w.writerow([j, 2 ** j, repr(float(alpha)), arch, opt, len(rep.runs),
                        f"{float(rep.mean('accuracy')):.4f}", f"{float(rep.std('accuracy')):.4f}"])
