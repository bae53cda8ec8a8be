"""Synthetic block-data experiments shared by scripts, the CLI and the acceptance suite."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .baselines import toppop_recommend
from .ckg import NodeKind, block_ids, build_ckg, generate_synthetic, split_cold_start
from .features import FeatureTable, assemble_initial_features, train_complex_on_graph
from .metrics import evaluate_lists
from .model import ModelConfig
from .ranker import recommend_all
from .trainer import fit

# 200 warm + 40 cold users over 50 items and 30 entities in 4 blocks. Entities
# carry no text, items carry noisy text, and every item also links to six
# entities of one random foreign block via a separate decoy relation.
FIXTURE = dict(n_users=240, n_items=50, n_entities=30, n_blocks=4, links_per_item=2,
               decoy_links_per_item=6, feature_noise=3.0, entity_text_fraction=0.0)
COLD_USERS = 40
KGE = dict(dim=8, epochs=200)
CONFIG = ModelConfig(dim=16, layers=3, fanouts=(10, 10, 10), lr=1e-2, batch_size=256,
                     epochs=200, patience=40, eval_k=10)


def text_table(ckg, features):
    """FeatureTable from a ``key -> vector`` dict (unknown keys are skipped)."""
    index = {**ckg.key_index(NodeKind.ITEM), **ckg.key_index(NodeKind.ENTITY)}
    pairs = sorted((index[k], v) for k, v in features.items() if k in index)
    missing = tuple(k for k in ckg.entity_keys if k not in features)
    return FeatureTable(np.array([p[0] for p in pairs], dtype=np.int64),
                        np.stack([p[1] for p in pairs]), missing)


@dataclass
class SyntheticTask:
    ckg: object
    split: object
    features: object
    seed: int


def synthetic_task(seed, fixture=None, cold_users=COLD_USERS, kge=None):
    """Generate, split and featurize one synthetic instance.

    ComplEx runs on the training graph only, so cold users' revealed
    ratings never leak into entity features.
    """
    fixture = {**FIXTURE, **(fixture or {})}
    inter, triples, feats = generate_synthetic(seed=seed, **fixture)
    ckg = build_ckg(inter, triples)
    split = split_cold_start(ckg, cold_fraction=cold_users / ckg.n_users, seed=seed)
    graph = split.training_graph(ckg)
    params = train_complex_on_graph(graph, seed=seed, **{**KGE, **(kge or {})})
    return SyntheticTask(ckg, split, assemble_initial_features(graph, text_table(ckg, feats), params), seed)


def evaluate_model(model, task, k, mode="cold"):
    recs = recommend_all(model, task.ckg, task.split, task.features, k, mode)
    lists = {u: r.items for u, r in recs.lists.items()}
    policy = "catalog-minus-revealed" if mode == "cold" else "catalog-minus-seen"
    return evaluate_lists(lists, task.split.test, k, task.ckg.n_items, policy)


def evaluate_toppop(task, k, mode="cold"):
    lists = {u: r.items for u, r in toppop_recommend(task.split, task.ckg.n_items, k, mode).items()}
    return evaluate_lists(lists, task.split.test, k, task.ckg.n_items, "toppop")


def train_variant(task, variant="full", config=None, **overrides):
    """Fit one model variant on ``task`` and report cold-user metrics at ``eval_k``."""
    config = dataclasses.replace(config or CONFIG, variant=variant, seed=task.seed, **overrides)
    result = fit(task.ckg, task.split, task.features, config)
    return result, evaluate_model(result.model, task, config.eval_k)


def block_kg(n_entities=60, n_blocks=4, n_relations=3, n_triples=300, seed=0):
    """Distinct random triples where relation ``r`` links block ``b`` to block ``b + r``."""
    rng = np.random.default_rng(seed)
    blocks = block_ids(n_entities, n_blocks)
    members = [np.flatnonzero(blocks == b) for b in range(n_blocks)]
    if n_triples > n_relations * sum(len(m) * len(members[(b + 1) % n_blocks]) for b, m in enumerate(members)) // 2:
        raise ValueError("too many triples for the block structure")
    out = set()
    while len(out) < n_triples:
        h, r = int(rng.integers(n_entities)), int(rng.integers(n_relations))
        t = int(rng.choice(members[(blocks[h] + r) % n_blocks]))
        if h != t:
            out.add((h, r, t))
    return np.array(sorted(out), dtype=np.int64)
