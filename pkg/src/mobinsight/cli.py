"""Pipeline orchestration: one subcommand per stage plus a full-experiment
runner. Stage artifacts are written atomically (temp file + rename) and each
stage emits one machine-readable JSON log line on stderr with input hashes.

Usage: mobinsight <stage> --manifest <path> [--seed N] [--depth 1..4]
       [--task to|from]
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import baselines, mobility, model as model_mod, places as places_mod
from . import semantics, synth
from .geo import load_geometries

STAGES = ("synth", "ingest", "dedup", "semantics", "profile", "odmatrix",
          "train", "evaluate", "audit", "report")

ROSTER = ("Random", "Average", "Gravity", "VecDist", "Pairwise",
          "NF_woPub_Dist", "NF_Dist")


class StageError(Exception):
    """Raised for missing artifacts or schema violations; maps to exit 2."""


@dataclass
class PipelineManifest:
    workdir: str
    data_dir: str = "data"
    geometries: str = "data/geometries.geojson"
    sources_dir: str = "data/places"
    bts: str = "data/bts.csv"
    cdr: list[str] = field(default_factory=lambda: ["data/cdr.csv"])
    cdr_meta: str | None = "data/cdr_meta.json"
    distances: str | None = "data/distances.csv"
    synth: dict = field(default_factory=dict)
    lsa_dim: int = 20
    k_range: list[int] = field(default_factory=lambda: [4, 6, 8, 10, 12, 16])
    plateau_tolerance: float = 0.01
    scheme: str | None = None          # path to a scheme config; None derives one
    categories: list[str] = field(default_factory=list)  # used when deriving
    depths: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    tasks: list[str] = field(default_factory=lambda: ["to", "from"])
    train: dict = field(default_factory=dict)
    seed: int = 0
    ablation_exclude_source: str | None = None
    audit_depth: int = 1
    audit_task: str = "to"
    audit_repeats: int = 10
    kl_direction: str = "as_printed"   # or "reversed"

    @classmethod
    def load(cls, path: str | Path) -> "PipelineManifest":
        path = Path(path)
        if not path.exists():
            raise StageError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise StageError(f"unknown manifest fields: {sorted(unknown)}")
        m = cls(**data)
        base = path.parent
        for attr in ("workdir", "data_dir", "geometries", "sources_dir", "bts",
                     "cdr_meta", "distances", "scheme"):
            v = getattr(m, attr)
            if v is not None:
                setattr(m, attr, str((base / v).resolve()))
        m.cdr = [str((base / c).resolve()) for c in m.cdr]
        return m

    def train_config(self, seed: int | None = None) -> model_mod.TrainConfig:
        cfg = dict(self.train)
        cfg.setdefault("seed", self.seed)
        if seed is not None:
            cfg["seed"] = seed
        return model_mod.TrainConfig(**cfg)

    def out(self, name: str) -> Path:
        return Path(self.workdir) / name


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise StageError(f"missing {what}: {p}")
    return p


def _sha(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_json(path: Path, obj):
    _atomic_write_text(path, json.dumps(obj, sort_keys=True))


def _log(stage: str, inputs: dict[str, Path], outputs: list[Path], t0: float):
    line = {
        "stage": stage,
        "inputs": {k: _sha(Path(v)) for k, v in inputs.items() if Path(v).exists()},
        "outputs": [str(o) for o in outputs],
        "elapsed_s": round(time.time() - t0, 3),
    }
    print(json.dumps(line, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# Stages

def stage_synth(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    cfg = synth.SynthConfig(**{**m.synth, "seed": m.synth.get("seed", m.seed)})
    synth.generate_all(cfg, m.data_dir)
    outs = [Path(m.data_dir) / "ground_truth.json"]
    _log("synth", {}, outs, t0)
    return outs


def stage_ingest(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    src_dir = _require(m.sources_dir, "source directory")
    files = sorted(src_dir.glob("*.csv"))
    if not files:
        raise StageError(f"missing source CSVs under {src_dir}")
    raw = []
    for f in files:
        raw.extend(places_mod.load_source_csv(f))
    out = m.out("raw_places.jsonl")
    lines = []
    for p in raw:
        lines.append(json.dumps({
            "source": p.source, "source_place_id": p.source_place_id,
            "name": p.name, "lat": p.location.lat, "lon": p.location.lon,
            "tags": list(p.tags), "taxonomy": list(p.taxonomy_path),
        }, sort_keys=True))
    _atomic_write_text(out, "\n".join(lines) + "\n")
    _log("ingest", {f.name: f for f in files}, [out], t0)
    return [out]


def _load_raw(m: PipelineManifest, exclude_source: str | None = None) -> list[places_mod.RawPlace]:
    path = _require(m.out("raw_places.jsonl"), "ingest artifact")
    raw = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        try:
            d = json.loads(line)
            if exclude_source is not None and d["source"] == exclude_source:
                continue
            raw.append(places_mod.RawPlace(
                source=d["source"], source_place_id=d["source_place_id"],
                name=d["name"],
                location=places_mod.GeoPoint(d["lat"], d["lon"]),
                tags=tuple(d["tags"]), taxonomy_path=tuple(d["taxonomy"]),
            ))
        except (KeyError, ValueError) as exc:
            raise StageError(f"{path}: bad row {line_no}: {exc}") from exc
    return raw


def stage_dedup(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    raw = _load_raw(m)
    canon = places_mod.resolve_duplicates(raw)
    out = m.out("canonical_places.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    places_mod.write_canonical_jsonl(canon, tmp)
    os.replace(tmp, out)
    _log("dedup", {"raw_places": m.out("raw_places.jsonl")}, [out], t0)
    return [out]


def derive_scheme(canon: list[places_mod.CanonicalPlace], assignment: np.ndarray,
                  k: int, categories: list[str]) -> semantics.CategoryScheme:
    """Map each cluster to the most frequent known category token among its
    members' lemmatized tag terms (mechanical stand-in for a manual merge).
    """
    known = set(categories)
    mapping = {}
    for c in range(k):
        counter: Counter[str] = Counter()
        for place, cl in zip(canon, assignment):
            if int(cl) != c:
                continue
            for tag in place.tags:
                for gram in semantics.tag_ngrams(tag):
                    if gram in known:
                        counter[gram] += 1
        mapping[c] = counter.most_common(1)[0][0] if counter else categories[0]
    return semantics.CategoryScheme(k=k, cluster_to_category=mapping,
                                    categories=tuple(categories))


def _run_semantics(m: PipelineManifest, canon: list[places_mod.CanonicalPlace]):
    vocab, matrix = semantics.build_term_matrix(canon)
    d = min(m.lsa_dim, min(matrix.matrix.shape))
    emb = semantics.lsa_reduce(matrix, d)
    ks = [k for k in m.k_range if k <= matrix.matrix.shape[0]]
    if not ks:
        raise StageError("k_range has no feasible entries for this corpus")
    scores = [semantics.silhouette(emb, semantics.kmeans(emb, k, m.seed), seed=m.seed)
              for k in ks]
    k = semantics.pick_plateau_k(ks, scores, m.plateau_tolerance)
    assignment = semantics.kmeans(emb, k, m.seed)
    if m.scheme is not None:
        scheme = semantics.load_category_scheme(_require(m.scheme, "scheme config"))
    else:
        if not m.categories:
            raise StageError("deriving a scheme requires manifest `categories`")
        scheme = derive_scheme(canon, assignment, k, m.categories)
    return vocab, emb, ks, scores, k, assignment, scheme


def stage_semantics(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    canon_path = _require(m.out("canonical_places.jsonl"), "dedup artifact")
    canon = places_mod.read_canonical_jsonl(canon_path)
    vocab, emb, ks, scores, k, assignment, scheme = _run_semantics(m, canon)
    out = m.out("semantics.json")
    _atomic_write_json(out, {
        "vocabulary_size": len(vocab),
        "lsa_dim": emb.d,
        "explained_variance_ratio": emb.explained_variance_ratio,
        "k_range": ks,
        "silhouette_scores": scores,
        "k": k,
        "assignment": {p.canonical_id: int(a) for p, a in zip(canon, assignment)},
        "scheme": {"categories": list(scheme.categories),
                   "cluster_to_category": {str(c): lbl for c, lbl
                                           in scheme.cluster_to_category.items()}},
    })
    _log("semantics", {"canonical_places": canon_path}, [out], t0)
    return [out]


def stage_profile(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    canon_path = _require(m.out("canonical_places.jsonl"), "dedup artifact")
    sem_path = _require(m.out("semantics.json"), "semantics artifact")
    geo_path = _require(m.geometries, "geometries")
    canon = places_mod.read_canonical_jsonl(canon_path)
    sem = json.loads(sem_path.read_text())
    geoms = load_geometries(geo_path)
    scheme = semantics.CategoryScheme(
        k=sem["k"],
        cluster_to_category={int(c): lbl for c, lbl in sem["scheme"]["cluster_to_category"].items()},
        categories=tuple(sem["scheme"]["categories"]),
    )
    assignment = np.array([sem["assignment"][p.canonical_id] for p in canon])
    profiles = semantics.profile_neighborhoods(canon, assignment, scheme, geoms)
    out = m.out("profiles.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    semantics.write_profiles_csv(profiles, scheme.categories, tmp)
    os.replace(tmp, out)
    _log("profile", {"canonical_places": canon_path, "semantics": sem_path,
                     "geometries": geo_path}, [out], t0)
    return [out]


def stage_odmatrix(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    geo_path = _require(m.geometries, "geometries")
    bts_path = _require(m.bts, "bts sites")
    cdr_paths = [_require(c, "cdr chunk") for c in m.cdr]
    geoms = load_geometries(geo_path)
    sites = mobility.load_bts_sites(bts_path, geoms)
    records = mobility.load_cdr_csv(cdr_paths)
    tz = 0.0
    if m.cdr_meta and Path(m.cdr_meta).exists():
        tz = float(json.loads(Path(m.cdr_meta).read_text()).get("tz_offset_hours", 0.0))
    retained, discards = mobility.filter_users(records)
    homes = mobility.detect_homes(retained, sites, tz)
    od, rejected = mobility.build_od_matrix(retained, homes, sites, geoms, tz)

    out_to, out_from = m.out("od_to.json"), m.out("od_from.json")
    out_to.parent.mkdir(parents=True, exist_ok=True)
    for path, matrix in ((out_to, od), (out_from, od.transposed())):
        tmp = path.with_name(path.name + ".tmp")
        mobility.save_od_matrix(matrix, tmp)
        os.replace(tmp, path)
    summary = m.out("odmatrix_summary.json")
    reasons = Counter(h.reason for h in discards)
    reasons.update(h.reason for h in homes if not h.assigned)
    _atomic_write_json(summary, {
        "users_seen": len(discards) + len(homes),
        "users_assigned": sum(1 for h in homes if h.assigned),
        "discard_reasons": dict(reasons),
        "rejected_records": rejected,
        "population_pearson_r": mobility.population_correlation(homes, geoms),
        "homes": {h.user_id: h.neighborhood_id for h in homes if h.assigned},
    })
    _log("odmatrix", {"geometries": geo_path, "bts": bts_path,
                      **{f"cdr{i}": p for i, p in enumerate(cdr_paths)}},
         [out_to, out_from, summary], t0)
    return [out_to, out_from, summary]


def load_dataset(m: PipelineManifest):
    """Aligned (features, feature_names, neighborhood_ids, od, populations)."""
    prof_path = _require(m.out("profiles.csv"), "profile artifact")
    od_path = _require(m.out("od_to.json"), "odmatrix artifact")
    geo_path = _require(m.geometries, "geometries")
    profiles, categories = semantics.read_profiles_csv(prof_path)
    od = mobility.load_od_matrix(od_path)
    by_id = {p.neighborhood_id: p for p in profiles}
    feats = []
    for nid in od.neighborhood_ids:
        if nid not in by_id:
            raise StageError(f"profile missing for neighborhood {nid}")
        p = by_id[nid]
        feats.append([p.feature_counts[c] for c in categories]
                     + [p.feature_counts["total"], p.centroid.lat, p.centroid.lon])
    geoms = load_geometries(geo_path)
    pops = np.array([{g.id: g.population for g in geoms}[nid]
                     for nid in od.neighborhood_ids], dtype=np.float64)
    names = tuple([*categories, "total", "lat", "lon"])
    return np.array(feats, dtype=np.float64), names, od.neighborhood_ids, od, pops


def stage_train(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    features, names, ids, od, _ = load_dataset(m)
    reverse = m.kl_direction == "reversed"
    artifact = {"feature_names": list(names), "tasks": {}}
    for task in m.tasks:
        artifact["tasks"][task] = {}
        for depth in m.depths:
            res = model_mod.loocv(features, ids, od, task, m.train_config(), depth,
                                  reverse_kl=reverse)
            artifact["tasks"][task][str(depth)] = {
                "mean_kl": res.mean_kl,
                "folds": [{
                    "neighborhood_id": f.neighborhood_id,
                    "kl": f.kl,
                    **model_mod.model_to_dict(f.model, f.stats, m.train_config()),
                } for f in res.folds],
            }
    out = m.out("models.json")
    _atomic_write_json(out, artifact)
    _log("train", {"profiles": m.out("profiles.csv"), "od_to": m.out("od_to.json")},
         [out], t0)
    return [out]


def _load_distances(m: PipelineManifest, ids, geoms=None):
    if m.distances and Path(m.distances).exists():
        dm = baselines.load_distance_csv(m.distances)
        if dm.ids != tuple(ids):
            order = [dm.ids.index(i) for i in ids]
            v = dm.values[np.ix_(order, order)]
            dm = baselines.DistanceMatrix(ids=tuple(ids), values=v, units=dm.units)
        return dm
    geoms = geoms if geoms is not None else load_geometries(_require(m.geometries, "geometries"))
    cents = [{g.id: g.centroid for g in geoms}[nid] for nid in ids]
    return baselines.distances_from_centroids(tuple(ids), cents)


def _ablation_features(m: PipelineManifest, names):
    """Rebuild profiles from the place corpus minus the excluded source."""
    raw = _load_raw(m, exclude_source=m.ablation_exclude_source)
    canon = places_mod.resolve_duplicates(raw)
    _, _, _, _, k, assignment, scheme = _run_semantics(m, canon)
    geoms = load_geometries(_require(m.geometries, "geometries"))
    profiles = semantics.profile_neighborhoods(canon, assignment, scheme, geoms)
    by_id = {p.neighborhood_id: p for p in profiles}
    cats = list(names[:-3])
    feats = []
    for g in geoms:
        p = by_id[g.id]
        row = [p.feature_counts.get(c, 0) for c in cats]
        feats.append(row + [p.feature_counts["total"], p.centroid.lat, p.centroid.lon])
    return np.array(feats, dtype=np.float64), scheme


def stage_evaluate(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    features, names, ids, od, pops = load_dataset(m)
    models_path = _require(m.out("models.json"), "train artifact")
    trained = json.loads(models_path.read_text())
    distances = _load_distances(m, ids)
    reverse = m.kl_direction == "reversed"

    report: dict = {"neighborhoods": list(ids), "tasks": {}, "kl_direction": m.kl_direction}
    ablation_feats = None
    if m.ablation_exclude_source is not None:
        ablation_feats, _ = _ablation_features(m, names)

    for task in m.tasks:
        rows = baselines.normalize_rows(od if task == od.direction else od.transposed())
        entry: dict = {}
        entry["Random"] = _as_result(baselines.loocv_random(od, task, m.seed))
        entry["Average"] = _as_result(baselines.loocv_average(od, task))
        entry["Gravity"] = _as_result(baselines.loocv_gravity(od, task, pops, distances))
        entry["VecDist"] = _as_result(
            baselines.loocv_vecdist(od, task, features[:, :-2], distances))
        entry["Pairwise"] = _as_result(
            baselines.loocv_pairwise(features, od, task, m.train_config(), depth=1))
        nf = {}
        for depth in m.depths:
            d = trained["tasks"].get(task, {}).get(str(depth))
            if d is None:
                raise StageError(f"missing trained models for task {task} depth {depth}")
            nf[str(depth)] = {"mean_kl": d["mean_kl"],
                              "fold_kls": [f["kl"] for f in d["folds"]]}
        entry["NF_Dist"] = nf
        if ablation_feats is not None:
            res = baselines.ablation_without_source(ablation_feats, ids, od, task,
                                                    m.train_config(), depth=1)
            entry["NF_woPub_Dist"] = {"1": {"mean_kl": res.mean_kl, "fold_kls": res.kls}}
        report["tasks"][task] = entry
        del rows

    out = m.out("evaluation.json")
    _atomic_write_json(out, report)
    _log("evaluate", {"models": models_path, "profiles": m.out("profiles.csv")},
         [out], t0)
    return [out]


def _as_result(b: baselines.BaselineResult) -> dict:
    return {"mean_kl": b.mean_kl, "fold_kls": b.kls}


def stage_audit(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    features, names, ids, od, _ = load_dataset(m)
    models_path = _require(m.out("models.json"), "train artifact")
    trained = json.loads(models_path.read_text())
    task, depth = m.audit_task, m.audit_depth
    d = trained["tasks"].get(task, {}).get(str(depth))
    if d is None:
        raise StageError(f"missing trained models for task {task} depth {depth}")
    rows = baselines.normalize_rows(od if task == od.direction else od.transposed())

    folds = []
    for i, f in enumerate(d["folds"]):
        mdl, stats = model_mod.model_from_dict(f)
        folds.append(model_mod.FoldResult(neighborhood_id=f["neighborhood_id"],
                                          kl=f["kl"], model=mdl, stats=stats))
    result = model_mod.LoocvResult(task=task, depth=depth, folds=folds)
    reports = audit_mod.per_neighborhood_importance(
        result, features, rows, names, repeats=m.audit_repeats, seed=m.seed)

    mean_by_feature = {
        name: float(np.mean([r.features[fi].mean_pct for r in reports]))
        for fi, name in enumerate(names)
    }
    out = m.out("importance.json")
    _atomic_write_json(out, {
        "task": task, "depth": depth, "repeats": m.audit_repeats,
        "reports": [audit_mod.report_to_dict(r) for r in reports],
        "mean_importance": mean_by_feature,
    })
    _log("audit", {"models": models_path}, [out], t0)
    return [out]


def stage_report(m: PipelineManifest) -> list[Path]:
    t0 = time.time()
    eval_path = _require(m.out("evaluation.json"), "evaluate artifact")
    ev = json.loads(eval_path.read_text())
    tasks = list(ev["tasks"])

    lines = []
    header = ["model"] + [f"KL ({t})" for t in tasks]
    table: list[list[str]] = []
    for name in ROSTER:
        if name == "NF_Dist":
            depths = sorted(ev["tasks"][tasks[0]].get("NF_Dist", {}), key=int)
            for depth in depths:
                row = [f"NF_Dist ({depth} layer{'s' if depth != '1' else ''})"]
                for t in tasks:
                    row.append(f"{ev['tasks'][t]['NF_Dist'][depth]['mean_kl']:.4f}")
                table.append(row)
        elif name == "NF_woPub_Dist":
            if "NF_woPub_Dist" not in ev["tasks"][tasks[0]]:
                continue
            row = ["NF_woPub_Dist"]
            for t in tasks:
                row.append(f"{ev['tasks'][t]['NF_woPub_Dist']['1']['mean_kl']:.4f}")
            table.append(row)
        else:
            row = [name]
            for t in tasks:
                row.append(f"{ev['tasks'][t][name]['mean_kl']:.4f}")
            table.append(row)

    widths = [max(len(r[i]) for r in [header] + table) for i in range(len(header))]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in table:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    text = "\n".join(lines)

    out = m.out("report.json")
    _atomic_write_json(out, {"tasks": tasks, "table": table, "header": header})
    out_txt = m.out("report.txt")
    _atomic_write_text(out_txt, text + "\n")
    print(text)
    _log("report", {"evaluation": eval_path}, [out, out_txt], t0)
    return [out, out_txt]


_STAGE_FNS = {
    "synth": stage_synth, "ingest": stage_ingest, "dedup": stage_dedup,
    "semantics": stage_semantics, "profile": stage_profile,
    "odmatrix": stage_odmatrix, "train": stage_train,
    "evaluate": stage_evaluate, "audit": stage_audit, "report": stage_report,
}


def run_stage(name: str, manifest: PipelineManifest) -> list[Path]:
    if name not in _STAGE_FNS:
        raise StageError(f"unknown stage {name!r}; expected one of {STAGES}")
    Path(manifest.workdir).mkdir(parents=True, exist_ok=True)
    return _STAGE_FNS[name](manifest)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mobinsight", description=__doc__)
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--depth", type=int, choices=(1, 2, 3, 4), default=None)
    parser.add_argument("--task", choices=("to", "from"), default=None)
    args = parser.parse_args(argv)
    try:
        manifest = PipelineManifest.load(args.manifest)
        if args.seed is not None:
            manifest.seed = args.seed
        if args.depth is not None:
            manifest.depths = [args.depth]
            manifest.audit_depth = args.depth
        if args.task is not None:
            manifest.tasks = [args.task]
            manifest.audit_task = args.task
        run_stage(args.stage, manifest)
    except StageError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
