"""Semantic aggregation: place term matrix, LSA embedding, k-means category
induction, cluster-to-category mapping, and neighborhood feature profiles.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import GeoPoint, NeighborhoodGeometry, haversine_distance_m, point_in_polygon
from .places import CanonicalPlace, normalize_name

_CONFIG_DIR = Path(__file__).parent / "config"

PROFILE_FALLBACK_MAX_M = 1_000.0
SILHOUETTE_EXACT_LIMIT = 5_000
KMEANS_MAX_ITER = 300


# ---------------------------------------------------------------------------
# Lemmatization: deterministic ordered suffix rules, loaded from config.

@dataclass(frozen=True)
class LemmaRule:
    suffix: str
    replacement: str
    min_stem: int


def load_lemma_rules(path: str | Path | None = None) -> tuple[LemmaRule, ...]:
    p = Path(path) if path else _CONFIG_DIR / "lemma_rules.json"
    data = json.loads(p.read_text())
    return tuple(LemmaRule(r["suffix"], r["replacement"], r["min_stem"]) for r in data["rules"])


_DEFAULT_RULES: tuple[LemmaRule, ...] | None = None


def lemmatize(token: str, rules: tuple[LemmaRule, ...] | None = None) -> str:
    """Rule-based normal form: lowercase, then cascade the suffix rules to a
    fixpoint (first matching rule per pass). Running to a fixpoint makes the
    function idempotent regardless of how the configured rules interact.
    """
    global _DEFAULT_RULES
    if rules is None:
        if _DEFAULT_RULES is None:
            _DEFAULT_RULES = load_lemma_rules()
        rules = _DEFAULT_RULES
    token = token.lower()
    while True:
        rewritten = token
        for rule in rules:
            if token.endswith(rule.suffix) and len(token) - len(rule.suffix) >= rule.min_stem:
                rewritten = token[: len(token) - len(rule.suffix)] + rule.replacement
                break
        if rewritten == token:
            return token
        token = rewritten


# ---------------------------------------------------------------------------
# Term matrix

@dataclass(frozen=True)
class TermVocabulary:
    entries: dict[str, int]  # n-gram -> dense column index

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class PlaceTermMatrix:
    matrix: np.ndarray           # places x n-grams, binary
    empty_rows: tuple[int, ...]  # places with no usable metadata


def tag_ngrams(tag: str, rules: tuple[LemmaRule, ...] | None = None) -> set[str]:
    """All contiguous n-grams of a tag's lemmatized tokens, n = 1..token count."""
    tokens = [lemmatize(t, rules) for t in normalize_name(tag)]
    grams = set()
    for n in range(1, len(tokens) + 1):
        for i in range(len(tokens) - n + 1):
            grams.add(" ".join(tokens[i:i + n]))
    return grams


def build_term_matrix(places: list[CanonicalPlace],
                      rules: tuple[LemmaRule, ...] | None = None,
                      ) -> tuple[TermVocabulary, PlaceTermMatrix]:
    if not places:
        raise ValueError("no places to index")
    per_place = [set().union(*(tag_ngrams(t, rules) for t in p.tags)) if p.tags else set()
                 for p in places]
    vocab = {g: i for i, g in enumerate(sorted(set().union(*per_place)))} if any(per_place) else {}
    m = np.zeros((len(places), len(vocab)), dtype=np.float64)
    for r, grams in enumerate(per_place):
        for g in grams:
            m[r, vocab[g]] = 1.0
    empty = tuple(int(i) for i in np.flatnonzero(m.sum(axis=1) == 0))
    return TermVocabulary(vocab), PlaceTermMatrix(m, empty)


# ---------------------------------------------------------------------------
# LSA

@dataclass(frozen=True)
class Embedding:
    matrix: np.ndarray  # places x d
    d: int
    explained_variance_ratio: float


def lsa_reduce(m: PlaceTermMatrix, d: int) -> Embedding:
    """Rank-d truncated SVD; rows are projected onto the top-d right singular
    vectors and scaled by the singular values (classic LSA document space).

    The sign of each right singular vector is fixed so its leading nonzero
    component is positive, making embeddings reproducible across BLAS builds.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    a = m.matrix
    if d > min(a.shape):
        raise ValueError(f"d={d} exceeds matrix dimensions {a.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    tol = max(a.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    if d > rank:
        warnings.warn(f"requested d={d} exceeds matrix rank {rank}; clamping")
        d = max(rank, 1)
    for i in range(d):
        lead = np.flatnonzero(np.abs(vt[i]) > 1e-12)
        if lead.size and vt[i, lead[0]] < 0:
            vt[i] = -vt[i]
            u[:, i] = -u[:, i]
    total = float((s ** 2).sum())
    ratio = float((s[:d] ** 2).sum() / total) if total > 0 else 1.0
    return Embedding(matrix=u[:, :d] * s[:d], d=d, explained_variance_ratio=ratio)


# ---------------------------------------------------------------------------
# K-means with silhouette-driven model selection

def kmeans(e: Embedding, k: int, seed: int) -> np.ndarray:
    """Lloyd iterations from k-means++ seeding until the assignment reaches a
    fixpoint or 300 iterations. Empty clusters are reseeded to the point
    farthest from its current center. Deterministic given seed.
    """
    x = e.matrix
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)

    assignment = np.full(n, -1, dtype=np.int64)
    prev_inertia = np.inf
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignment = d2.argmin(axis=1)
        # reseed empty clusters to the point currently farthest from its center
        for c in range(k):
            if not (new_assignment == c).any():
                far = d2[np.arange(n), new_assignment].argmax()
                new_assignment[far] = c
                centers[c] = x[far]
        inertia = float(((x - centers[new_assignment]) ** 2).sum())
        assert inertia <= prev_inertia + 1e-9, "inertia increased during Lloyd iteration"
        prev_inertia = inertia
        if (new_assignment == assignment).all():
            break
        assignment = new_assignment
        for c in range(k):
            centers[c] = x[assignment == c].mean(axis=0)
    return assignment


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[c] = x[rng.integers(n)]
        else:
            centers[c] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def silhouette(e: Embedding, assignment: np.ndarray, seed: int = 0) -> float:
    """Mean silhouette (b - a) / max(a, b) with Euclidean distances in the
    embedding space. Above 5 000 points a seeded uniform subsample keeps the
    pairwise-distance cost bounded.
    """
    x = e.matrix
    labels = np.asarray(assignment)
    if x.shape[0] < 2:
        raise ValueError("silhouette needs at least 2 points")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    if x.shape[0] > SILHOUETTE_EXACT_LIMIT:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(x.shape[0], SILHOUETTE_EXACT_LIMIT, replace=False))
        x, labels = x[keep], labels[keep]
        uniq = np.unique(labels)
        if uniq.size < 2:
            raise ValueError("subsample collapsed to a single cluster")

    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2), 0.0))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        a = d[i, own].sum() / (n_own - 1) if n_own > 1 else 0.0
        b = min(d[i, labels == c].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def pick_plateau_k(ks: list[int], scores: list[float], plateau_tolerance: float = 0.01) -> int:
    """Smallest k whose score is within tolerance of the maximum (knee of the
    silhouette plateau)."""
    best = max(scores)
    for k, s in zip(ks, scores):
        if s >= best - plateau_tolerance:
            return k
    return ks[-1]


def select_k(e: Embedding, k_range: list[int], plateau_tolerance: float = 0.01,
             seed: int = 0) -> int:
    if not k_range:
        raise ValueError("k_range is empty")
    scores = [silhouette(e, kmeans(e, k, seed), seed=seed) for k in k_range]
    return pick_plateau_k(list(k_range), scores, plateau_tolerance)


# ---------------------------------------------------------------------------
# Category scheme and neighborhood profiles

@dataclass(frozen=True)
class CategoryScheme:
    k: int
    cluster_to_category: dict[int, str]
    categories: tuple[str, ...]

    def __post_init__(self):
        if not self.categories:
            raise ValueError("category list is empty")
        missing = [c for c in range(self.k) if c not in self.cluster_to_category]
        if missing:
            raise ValueError(f"unmapped cluster indices: {missing}")
        unknown = set(self.cluster_to_category.values()) - set(self.categories)
        if unknown:
            raise ValueError(f"mapping targets outside category list: {sorted(unknown)}")


def load_category_scheme(path: str | Path | None = None) -> CategoryScheme:
    """Config JSON: {"categories": [...], "cluster_to_category": {"0": "Bar", ...}}."""
    p = Path(path) if path else _CONFIG_DIR / "default_categories.json"
    data = json.loads(p.read_text())
    mapping = {int(k): v for k, v in data["cluster_to_category"].items()}
    return CategoryScheme(
        k=max(mapping) + 1 if mapping else 0,
        cluster_to_category=mapping,
        categories=tuple(data["categories"]),
    )


@dataclass(frozen=True)
class NeighborhoodProfile:
    neighborhood_id: str
    feature_counts: dict[str, int]  # one count per category, plus "total"
    centroid: GeoPoint

    def vector(self, categories: tuple[str, ...]) -> np.ndarray:
        vals = [self.feature_counts[c] for c in categories] + [self.feature_counts["total"]]
        return np.array(vals, dtype=np.float64)


def profile_neighborhoods(places: list[CanonicalPlace], assignment: np.ndarray,
                          scheme: CategoryScheme,
                          geoms: list[NeighborhoodGeometry]) -> list[NeighborhoodProfile]:
    """Count places per category per neighborhood, plus the total place count.

    A place outside every polygon falls back to the nearest centroid; farther
    than 1 km from any centroid it is excluded with a warning.
    """
    counts = {g.id: {c: 0 for c in scheme.categories} for g in geoms}
    totals = {g.id: 0 for g in geoms}
    excluded = 0
    for place, cluster in zip(places, assignment):
        category = scheme.cluster_to_category[int(cluster)]
        nb = _locate(place.location, geoms)
        if nb is None:
            excluded += 1
            continue
        counts[nb][category] += 1
        totals[nb] += 1
    if excluded:
        warnings.warn(f"{excluded} places beyond every polygon and 1 km of any centroid; excluded")
    out = []
    for g in geoms:
        fc = dict(counts[g.id])
        fc["total"] = totals[g.id]
        out.append(NeighborhoodProfile(neighborhood_id=g.id, feature_counts=fc,
                                       centroid=g.centroid))
    return out


def _locate(p: GeoPoint, geoms: list[NeighborhoodGeometry]) -> str | None:
    for g in geoms:
        min_lat, min_lon, max_lat, max_lon = g.boundary.bbox()
        if min_lat <= p.lat <= max_lat and min_lon <= p.lon <= max_lon:
            if point_in_polygon(p, g.boundary):
                return g.id
    best, best_d = None, PROFILE_FALLBACK_MAX_M
    for g in geoms:
        d = haversine_distance_m(p, g.centroid)
        if d <= best_d:
            best, best_d = g.id, d
    return best


def write_profiles_csv(profiles: list[NeighborhoodProfile], categories: tuple[str, ...],
                       path: str | Path):
    """CSV layout: neighborhood_id,<category...>,total,lat,lon."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neighborhood_id", *categories, "total", "lat", "lon"])
        for p in profiles:
            w.writerow([p.neighborhood_id,
                        *(p.feature_counts[c] for c in categories),
                        p.feature_counts["total"], p.centroid.lat, p.centroid.lon])


def read_profiles_csv(path: str | Path) -> tuple[list[NeighborhoodProfile], tuple[str, ...]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "neighborhood_id" or header[-3:] != ["total", "lat", "lon"]:
            raise ValueError(f"{path}: unexpected profile header {header}")
        categories = tuple(header[1:-3])
        out = []
        for row in reader:
            fc = {c: int(v) for c, v in zip(categories, row[1:-3])}
            fc["total"] = int(row[-3])
            out.append(NeighborhoodProfile(
                neighborhood_id=row[0], feature_counts=fc,
                centroid=GeoPoint(float(row[-2]), float(row[-1])),
            ))
    return out, categories
