"""TopPop: recommend the most interacted-with items."""
from __future__ import annotations

import numpy as np

from .ranker import RankedList


def toppop_fit(pairs, n_items):
    """Per-item interaction counts from (user, item) training pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("TopPop needs training interactions")
    return np.bincount(pairs[:, 1], minlength=n_items)


def popularity_order(popularity):
    """Item ids by descending count, ties by ascending id."""
    popularity = np.asarray(popularity)
    return np.lexsort((np.arange(len(popularity)), -popularity))


def toppop_rank(popularity, user, k, seen=(), exclude_seen=True):
    """Top-k popular items; the naive variant (``exclude_seen=False``) ignores ``seen``."""
    order = popularity_order(popularity)
    if exclude_seen:
        seen = set(seen)
        order = np.array([i for i in order if i not in seen], dtype=np.int64)
    if k > len(order):
        raise ValueError(f"k={k} exceeds {len(order)} available items")
    top = order[:k]
    return RankedList(user, top.tolist(), np.asarray(popularity)[top].astype(float).tolist(),
                      "catalog-minus-seen" if exclude_seen else "catalog")


def toppop_recommend(split, n_items, k, mode="cold", exclude_seen=True):
    """TopPop lists for the split's cold or warm users."""
    pop = toppop_fit(split.train_pairs(), n_items)
    if mode == "cold":
        seen = {u: split.revealed[u] for u in split.cold_users}
    else:
        seen = {u: split.train.get(u, set()) | split.validation.get(u, set()) for u in split.warm_users}
    return {u: toppop_rank(pop, u, k, seen[u], exclude_seen) for u in sorted(seen)}
