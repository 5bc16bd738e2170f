import numpy as np
import pytest

from mobinsight import synth


@pytest.fixture(scope="session")
def mini_city(tmp_path_factory):
    """Small deterministic city shared by unit tests: 9 neighborhoods,
    150 users, 14 days, planted duplicates."""
    cfg = synth.SynthConfig(n_neighborhoods=9, users=150, days=14, seed=7,
                            places_per_neighborhood=25.0)
    out = tmp_path_factory.mktemp("mini_city")
    truth = synth.generate_all(cfg, out)
    return cfg, out, truth


def collect_features(cfg, truth, geoms):
    """True profile feature matrix aligned to the ground-truth neighborhood
    order: category counts + total + centroid coordinates."""
    cats = list(cfg.categories)
    cent = {g.id: g.centroid for g in geoms}
    tal = truth["neighborhood_category_counts"]
    rows = [[tal[n][c] for c in cats] + [tal[n]["total"], cent[n].lat, cent[n].lon]
            for n in truth["neighborhoods"]]
    return np.array(rows, dtype=np.float64)
