import numpy as np
import pytest
import torch

from simplerec.ckg import build_ckg
from simplerec.experiment import text_table
from simplerec.features import assemble_initial_features, train_complex_on_graph


def small_graph(seed=0, n_users=6, n_items=5, n_entities=3, n_rel=2, p=0.5):
    """Random keyed graph: every user rates at least one item, every entity is linked."""
    rng = np.random.default_rng(seed)
    inter = []
    for u in range(n_users):
        picked = np.flatnonzero(rng.random(n_items) < p)
        if len(picked) == 0:
            picked = [rng.integers(n_items)]
        inter += [(f"u{u}", f"i{i}", 1.0) for i in picked]
    for i in range(n_items):  # every item seen
        inter.append((f"u{i % n_users}", f"i{i}", 1.0))
    triples = []
    for e in range(n_entities):
        triples.append((f"i{rng.integers(n_items)}", f"r{rng.integers(n_rel)}", f"e{e}"))
    return build_ckg(inter, triples)


def features_for(ckg, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    feats = {k: rng.normal(size=dim) for k in ckg.item_keys}
    return assemble_initial_features(ckg, text_table(ckg, feats), train_complex_on_graph(ckg, dim=2, epochs=5, seed=seed))


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)
