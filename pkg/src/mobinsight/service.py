"""Read-mostly HTTP JSON API over the pipeline's computed artifacts, plus
what-if inference for the exploration UI.

The artifact store is immutable after load; every response carries an
`X-Artifact-Version` hash so clients can detect artifact swaps.
"""
from __future__ import annotations

import argparse
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import model as model_mod
from .geo import load_geometries
from .mobility import load_od_matrix, normalize_rows
from .semantics import read_profiles_csv

REQUIRED = ("geometries.geojson", "profiles.csv", "od_to.json", "od_from.json",
            "models.json")


@dataclass
class ArtifactStore:
    version: str
    neighborhood_ids: tuple[str, ...]
    geoms: list
    profiles: dict
    categories: tuple[str, ...]
    feature_names: tuple[str, ...]
    features: np.ndarray
    rows: dict[str, np.ndarray]                  # direction -> normalized rows
    models: dict                                 # task -> depth -> fold models
    mean_kls: dict                               # task -> depth -> float
    importance: dict | None

    def index(self, nid: str) -> int:
        return self.neighborhood_ids.index(nid)


def load_store(artifacts_dir: str | Path) -> ArtifactStore:
    d = Path(artifacts_dir)
    for name in REQUIRED:
        if not (d / name).exists():
            raise FileNotFoundError(f"missing artifact: {d / name}")

    h = hashlib.sha256()
    for name in sorted(p.name for p in d.iterdir() if p.is_file()):
        h.update((d / name).read_bytes())
    version = h.hexdigest()[:16]

    geoms = load_geometries(d / "geometries.geojson")
    profiles, categories = read_profiles_csv(d / "profiles.csv")
    od_to = load_od_matrix(d / "od_to.json")
    od_from = load_od_matrix(d / "od_from.json")
    ids = od_to.neighborhood_ids
    prof_by_id = {p.neighborhood_id: p for p in profiles}

    feature_names = tuple([*categories, "total", "lat", "lon"])
    features = np.array([
        [prof_by_id[nid].feature_counts[c] for c in categories]
        + [prof_by_id[nid].feature_counts["total"],
           prof_by_id[nid].centroid.lat, prof_by_id[nid].centroid.lon]
        for nid in ids], dtype=np.float64)

    trained = json.loads((d / "models.json").read_text())
    models: dict = {}
    mean_kls: dict = {}
    for task, depths in trained["tasks"].items():
        models[task] = {}
        mean_kls[task] = {}
        for depth, entry in depths.items():
            folds = []
            for f in entry["folds"]:
                mdl, stats = model_mod.model_from_dict(f)
                folds.append({"neighborhood_id": f["neighborhood_id"], "kl": f["kl"],
                              "model": mdl, "stats": stats})
            models[task][depth] = folds
            mean_kls[task][depth] = entry["mean_kl"]

    importance = None
    if (d / "importance.json").exists():
        importance = json.loads((d / "importance.json").read_text())

    return ArtifactStore(
        version=version, neighborhood_ids=ids, geoms=geoms,
        profiles={p.neighborhood_id: p for p in profiles}, categories=categories,
        feature_names=feature_names, features=features,
        rows={"to": normalize_rows(od_to), "from": normalize_rows(od_from)},
        models=models, mean_kls=mean_kls, importance=importance,
    )


def create_app(artifacts_dir: str | Path) -> FastAPI:
    store = load_store(artifacts_dir)
    app = FastAPI(title="mobinsight", docs_url=None, redoc_url=None)

    def reply(payload, status: int = 200) -> JSONResponse:
        return JSONResponse(payload, status_code=status,
                            headers={"X-Artifact-Version": store.version})

    @app.get("/api/health")
    def health():
        return reply({"status": "ok", "neighborhoods": len(store.neighborhood_ids),
                      "version": store.version})

    @app.get("/api/neighborhoods")
    def neighborhoods():
        out = []
        for g in store.geoms:
            p = store.profiles[g.id]
            out.append({
                "id": g.id, "name": g.name, "population": g.population,
                "centroid": {"lat": g.centroid.lat, "lon": g.centroid.lon},
                "boundary": [[v.lat, v.lon] for v in g.boundary.vertices],
                "profile": p.feature_counts,
            })
        return reply(out)

    @app.get("/api/od")
    def od(direction: str = "to", id: str = ""):
        if direction not in store.rows:
            return reply({"error": f"unknown direction {direction!r}"}, 400)
        if id not in store.neighborhood_ids:
            return reply({"error": f"unknown id {id!r}", "id": id}, 404)
        row = store.rows[direction][store.index(id)]
        return reply({"id": id, "direction": direction,
                      "row": dict(zip(store.neighborhood_ids, row.tolist()))})

    @app.get("/api/estimate/{nid}")
    def estimate(nid: str, depth: int = 1, direction: str = "to"):
        if nid not in store.neighborhood_ids:
            return reply({"error": f"unknown id {nid!r}", "id": nid}, 404)
        folds = store.models.get(direction, {}).get(str(depth))
        if folds is None:
            return reply({"error": f"no model for direction={direction} depth={depth}"}, 404)
        i = store.index(nid)
        fold = folds[i]
        pred = model_mod.forward(fold["model"],
                                 model_mod.standardize(store.features[i], fold["stats"]),
                                 self_index=i).values
        return reply({
            "id": nid, "depth": depth, "direction": direction,
            "prediction": dict(zip(store.neighborhood_ids, pred.tolist())),
            "kl": fold["kl"],
            "mean_kl": store.mean_kls[direction][str(depth)],
            "fold_kls": {f["neighborhood_id"]: f["kl"] for f in folds},
        })

    @app.get("/api/importance/{nid}")
    def importance(nid: str):
        if store.importance is None:
            return reply({"error": "importance artifact not loaded"}, 404)
        for rep in store.importance["reports"]:
            if rep["neighborhood_id"] == nid:
                return reply(rep)
        return reply({"error": f"unknown id {nid!r}", "id": nid}, 404)

    @app.post("/api/whatif")
    async def whatif(request: Request, depth: int = 1, direction: str = "to"):
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            return reply({"error": "body is not valid JSON"}, 400)
        if not isinstance(body, dict) or "id" not in body:
            return reply({"error": "missing field", "field": "id"}, 400)
        if "feature_deltas" not in body or not isinstance(body["feature_deltas"], dict):
            return reply({"error": "missing or malformed field", "field": "feature_deltas"}, 400)
        nid = body["id"]
        if nid not in store.neighborhood_ids:
            return reply({"error": f"unknown id {nid!r}", "id": nid}, 404)
        folds = store.models.get(direction, {}).get(str(depth))
        if folds is None:
            return reply({"error": f"no model for direction={direction} depth={depth}"}, 404)

        name_to_idx = {n: i for i, n in enumerate(store.feature_names)}
        i = store.index(nid)
        edited = store.features[i].copy()
        count_delta = 0.0
        for name, delta in body["feature_deltas"].items():
            if name not in name_to_idx:
                return reply({"error": "unknown feature", "field": name}, 400)
            if not isinstance(delta, (int, float)):
                return reply({"error": "delta must be numeric", "field": name}, 400)
            edited[name_to_idx[name]] += delta
            if name in store.categories:
                count_delta += delta
        # keep the total consistent with category edits unless edited directly
        if "total" not in body["feature_deltas"]:
            edited[name_to_idx["total"]] += count_delta

        fold = folds[i]
        try:
            pred = model_mod.what_if(fold["model"], fold["stats"], edited,
                                     self_index=i).values
        except ValueError as exc:
            return reply({"error": str(exc)}, 422)
        base = model_mod.forward(fold["model"],
                                 model_mod.standardize(store.features[i], fold["stats"]),
                                 self_index=i).values
        return reply({
            "id": nid, "depth": depth, "direction": direction,
            "prediction": dict(zip(store.neighborhood_ids, pred.tolist())),
            "baseline": dict(zip(store.neighborhood_ids, base.tolist())),
            "delta": dict(zip(store.neighborhood_ids, (pred - base).tolist())),
        })

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mobinsight-serve")
    parser.add_argument("--artifacts-dir", required=True)
    parser.add_argument("--port", type=int, default=8510)
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    import uvicorn
    uvicorn.run(create_app(args.artifacts_dir), host=args.host, port=args.port,
                log_level="warning")
    return 0


if __name__ == "__main__":
    main()
