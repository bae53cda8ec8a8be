"""Inductive inference: embed users from revealed ratings and rank items."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass
class RankedList:
    user: int
    items: list
    scores: list
    candidates: str = "catalog"

    def lines(self, user_key, item_keys):
        return [f"{user_key}\t{r}\t{item_keys[i]}\t{s!r}"
                for r, (i, s) in enumerate(zip(self.items, self.scores), start=1)]


def rank_scores(scores, exclude, k, user=-1, candidates="catalog"):
    """Top-k of a score vector over item ids, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores))
    keep = np.ones(len(scores), dtype=bool)
    excl = np.fromiter((i for i in exclude if 0 <= i < len(scores)), dtype=np.int64)
    keep[excl] = False
    ids, cand = ids[keep], scores[keep]
    if k > len(ids):
        raise ValueError(f"k={k} exceeds {len(ids)} candidate items")
    order = np.lexsort((ids, -cand))[:k]
    return RankedList(user, ids[order].tolist(), cand[order].tolist(), candidates)


def rank_items(e_user, item_embeddings, exclude, k, user=-1):
    scores = torch.as_tensor(item_embeddings) @ torch.as_tensor(e_user)
    return rank_scores(scores.detach().numpy(), exclude, k, user)


def cold_start_view(train_graph, revealed):
    """Training graph plus the revealed edges, and a mask hiding their inverses.

    With the mask applied, existing nodes aggregate exactly as in the
    training graph while each new user sees its revealed items.
    """
    cold = set(revealed)
    have = train_graph.user_items()
    clash = [u for u in cold if u in have]
    if clash:
        raise ValueError(f"user {clash[0]} already has training interactions")
    for u in sorted(revealed):
        if not revealed[u]:
            raise ValueError(f"user {u} has no revealed interactions")
        if u < train_graph.user_offset or u >= train_graph.n_nodes:
            raise ValueError(f"node {u} is not a user")
    extra = np.asarray([(u, i) for u in sorted(revealed) for i in sorted(revealed[u])],
                       dtype=np.int64).reshape(-1, 2)
    if len(extra) and (extra[:, 1].min() < 0 or extra[:, 1].max() >= train_graph.n_items):
        raise ValueError("revealed item outside the catalog")
    view = train_graph.with_interactions(np.concatenate([train_graph.interactions(), extra]))
    cold_arr = np.fromiter(cold, dtype=np.int64)
    mask = ~((view.rel == 1) & np.isin(view.tail, cold_arr))
    return view, mask


def embed_cold_users(model, train_graph, features, revealed):
    """Final embeddings of all nodes with the ``revealed`` users attached.

    ``revealed`` maps existing edgeless user nodes to item sets. Parameters
    are only read.
    """
    view, mask = cold_start_view(train_graph, revealed)
    return model.full_embeddings(view, features, edge_mask=mask)


def embed_cold_user(model, train_graph, features, user, items):
    return embed_cold_users(model, train_graph, features, {user: set(items)})[user]


@dataclass
class Recommendations:
    lists: dict
    errors: dict = field(default_factory=dict)


def recommend_all(model, ckg, split, features, k, mode="cold"):
    """Ranked lists for every cold (or warm) user of ``split``.

    Cold users are embedded from their revealed items, which are then
    excluded; warm users exclude their training and validation items.
    """
    train_graph = split.training_graph(ckg)
    if mode == "cold":
        users = list(split.cold_users)
        emb = embed_cold_users(model, train_graph, features, {u: split.revealed[u] for u in users})
        exclude = {u: split.revealed[u] for u in users}
    elif mode == "warm":
        users = list(split.warm_users)
        emb = model.full_embeddings(train_graph, features)
        exclude = {u: split.train.get(u, set()) | split.validation.get(u, set()) for u in users}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n_items = ckg.n_items
    item_emb = emb[:n_items]
    out = Recommendations({})
    if not users:
        return out
    scores = (emb[users] @ item_emb.T).numpy()
    for row, u in enumerate(users):
        try:
            out.lists[u] = rank_scores(scores[row], exclude[u], k, u, f"catalog-minus-{mode}")
        except ValueError as exc:
            out.errors[u] = str(exc)
            log.warning("user %d: %s", u, exc)
    return out
