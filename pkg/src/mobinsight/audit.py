"""Model auditing: permutation feature importance, the per-neighborhood
importance-variance statistic, and Pearson correlation with a
t-distribution p-value.

The p-value uses the regularized incomplete beta function evaluated with
the standard continued-fraction recipe (modified Lentz), so no statistics
package is required at runtime.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (FeatureStats, LoocvResult, MlpModel, forward, kl_divergence,
                    standardize)


@dataclass(frozen=True)
class FeatureImportance:
    name: str
    mean_pct: float
    std_pct: float
    repeats: int


@dataclass(frozen=True)
class ImportanceReport:
    neighborhood_id: str  # or "global"
    features: tuple[FeatureImportance, ...]
    variance: float
    disclaimer: str = "correlational"


def permutation_importance(model: MlpModel, stats: FeatureStats,
                           features: np.ndarray, targets: np.ndarray,
                           feature_index: int, repeats: int, seed: int,
                           self_indices: np.ndarray | None = None) -> FeatureImportance:
    """Permute one raw feature column across the evaluation rows, recompute
    the mean KL, and report the relative degradation percentage
    (KL_perm - KL_base) / KL_base * 100 averaged over seeded repeats.
    """
    if features.shape[0] < 2:
        raise ValueError("permutation importance needs at least 2 evaluation rows")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")

    def mean_kl(x: np.ndarray) -> float:
        total = 0.0
        for r in range(x.shape[0]):
            sidx = None if self_indices is None else int(self_indices[r])
            pred = forward(model, standardize(x[r], stats), self_index=sidx).values
            total += kl_divergence(pred, targets[r])
        return total / x.shape[0]

    base = mean_kl(features)
    rng = np.random.default_rng(seed)
    pcts = []
    for _ in range(repeats):
        shuffled = features.copy()
        shuffled[:, feature_index] = features[rng.permutation(features.shape[0]), feature_index]
        pcts.append((mean_kl(shuffled) - base) / base * 100.0)
    arr = np.array(pcts)
    return FeatureImportance(name=str(feature_index), mean_pct=float(arr.mean()),
                             std_pct=float(arr.std()), repeats=repeats)


def global_importance(model: MlpModel, stats: FeatureStats, features: np.ndarray,
                      targets: np.ndarray, feature_names: tuple[str, ...],
                      repeats: int = 10, seed: int = 0,
                      self_indices: np.ndarray | None = None) -> ImportanceReport:
    entries = []
    for f, name in enumerate(feature_names):
        imp = permutation_importance(model, stats, features, targets, f, repeats,
                                     seed=_derived_seed(seed, 0, f),
                                     self_indices=self_indices)
        entries.append(FeatureImportance(name, imp.mean_pct, imp.std_pct, repeats))
    return ImportanceReport("global", tuple(entries),
                            importance_variance(entries))


def per_neighborhood_importance(result: LoocvResult, features: np.ndarray,
                                targets: np.ndarray, feature_names: tuple[str, ...],
                                repeats: int = 10, seed: int = 0) -> list[ImportanceReport]:
    """Per-neighborhood realization: score each fold's model on its held-out
    row, replacing the row's feature value with values resampled (seeded)
    from the other neighborhoods' values for that feature.
    """
    reports = []
    for i, fold in enumerate(result.folds):
        others = np.delete(features, i, axis=0)
        x_held = features[i]
        base = kl_divergence(
            forward(fold.model, standardize(x_held, fold.stats), self_index=i).values,
            targets[i])
        entries = []
        for f, name in enumerate(feature_names):
            rng = np.random.default_rng(_derived_seed(seed, i + 1, f))
            pcts = []
            for _ in range(repeats):
                edited = x_held.copy()
                edited[f] = others[rng.integers(others.shape[0]), f]
                kl = kl_divergence(
                    forward(fold.model, standardize(edited, fold.stats), self_index=i).values,
                    targets[i])
                pcts.append((kl - base) / base * 100.0)
            arr = np.array(pcts)
            entries.append(FeatureImportance(name, float(arr.mean()), float(arr.std()), repeats))
        reports.append(ImportanceReport(fold.neighborhood_id, tuple(entries),
                                        importance_variance(entries)))
    return reports


def importance_variance(features: list[FeatureImportance] | tuple[FeatureImportance, ...]) -> float:
    """Population variance of one neighborhood's per-feature importances."""
    vals = np.array([f.mean_pct for f in features])
    return float(vals.var())


def _derived_seed(seed: int, block: int, feature: int) -> int:
    return int(np.random.SeedSequence([seed, block, feature]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Pearson correlation with two-sided t-test p-value

def pearson(x: np.ndarray | list, y: np.ndarray | list) -> tuple[float, float]:
    """Sample Pearson r plus the two-sided p-value from the t-distribution
    with n - 2 degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("need two equal-length series of at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc ** 2).sum()), np.sqrt((yc ** 2).sum())
    if sx == 0 or sy == 0:
        raise ValueError("zero variance in input series")
    r = float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))
    df = x.size - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    p = _betai(df / 2.0, 0.5, df / (df + t2))
    return r, float(p)


def _betai(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log(1.0 - x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def _betacf(a: float, b: float, x: float, max_iter: int = 200,
            eps: float = 3e-14, fpmin: float = 1e-300) -> float:
    """Continued fraction for the incomplete beta (modified Lentz method)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


# ---------------------------------------------------------------------------
# Report persistence (consumed by the service and UI)

def report_to_dict(report: ImportanceReport) -> dict:
    return {
        "neighborhood_id": report.neighborhood_id,
        "features": [{"name": f.name, "mean_pct": f.mean_pct,
                      "std_pct": f.std_pct, "repeats": f.repeats}
                     for f in report.features],
        "variance": report.variance,
        "disclaimer": report.disclaimer,
    }


def save_reports(reports: list[ImportanceReport], path: str | Path):
    Path(path).write_text(json.dumps([report_to_dict(r) for r in reports], indent=1))


def load_reports(path: str | Path) -> list[ImportanceReport]:
    out = []
    for d in json.loads(Path(path).read_text()):
        feats = tuple(FeatureImportance(f["name"], f["mean_pct"], f["std_pct"], f["repeats"])
                      for f in d["features"])
        out.append(ImportanceReport(d["neighborhood_id"], feats, d["variance"],
                                    d.get("disclaimer", "correlational")))
    return out
