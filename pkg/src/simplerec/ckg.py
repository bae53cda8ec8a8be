"""Collaborative knowledge graph: loading, building, splitting, sampling.

Nodes are densely indexed items first, then entities, then users, so that
item ``i`` has NodeId ``i`` and item positions double as node indices.
Relations come in (forward, inverse) pairs with ``inverse(r) == r ^ 1``;
pair 0/1 is the user-item interaction relation.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

RATED = "rated"
RATED_BY = "rated_by"
INVERSE_SUFFIX = "_inv"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NodeKind(enum.IntEnum):
    ITEM = 0
    ENTITY = 1
    USER = 2


@dataclass(frozen=True)
class Relation:
    index: int
    name: str
    is_interaction: bool

    @property
    def inverse(self) -> int:
        return self.index ^ 1


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


def _data_lines(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_interactions(path, positive_threshold=None):
    """Read ``user<TAB>item<TAB>rating[<TAB>timestamp]`` records.

    With ``positive_threshold`` set, records rated below it are dropped.
    """
    records = []
    seen_any = False
    for lineno, fields in _data_lines(path):
        seen_any = True
        if len(fields) < 3 or not fields[0] or not fields[1]:
            raise DataError(f"{path}:{lineno}: expected user, item, rating")
        try:
            rating = float(fields[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad rating {fields[2]!r}") from None
        if positive_threshold is not None and rating < positive_threshold:
            continue
        records.append((fields[0], fields[1], rating))
    if not seen_any:
        raise DataError(f"{path}: no interaction records")
    return records


def load_triples(path):
    """Read ``head<TAB>relation<TAB>tail`` triples."""
    triples = []
    for lineno, fields in _data_lines(path):
        if len(fields) < 3 or not all(fields[:3]):
            raise DataError(f"{path}:{lineno}: expected head, relation, tail")
        triples.append((fields[0], fields[1], fields[2]))
    return triples


def relation_vocabulary(triples):
    """Relation names in first-seen order."""
    return list(dict.fromkeys(r for _, r, _ in triples))


@dataclass(frozen=True, eq=False)
class CollabKG:
    """Immutable CKG with a CSR index over outgoing edges.

    ``head``/``rel``/``tail`` are sorted by (head, rel, tail); the edges of
    node ``v`` are ``indptr[v]:indptr[v + 1]``.
    """

    item_keys: tuple
    entity_keys: tuple
    user_keys: tuple
    relations: tuple
    head: np.ndarray
    rel: np.ndarray
    tail: np.ndarray
    indptr: np.ndarray = field(repr=False)
    degree: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, item_keys, entity_keys, user_keys, relations, head, rel, tail):
        head = np.asarray(head, dtype=np.int64)
        rel = np.asarray(rel, dtype=np.int64)
        tail = np.asarray(tail, dtype=np.int64)
        # store each edge together with its inverse, deduplicated
        h = np.concatenate([head, tail])
        r = np.concatenate([rel, rel ^ 1])
        t = np.concatenate([tail, head])
        n = len(item_keys) + len(entity_keys) + len(user_keys)
        n_rel = len(relations)
        if len(h):
            if min(h.min(), t.min()) < 0 or max(h.max(), t.max()) >= n:
                raise DataError("edge endpoint out of range")
            key = np.unique((h * n_rel + r) * n + t)
            t = key % n
            hr = key // n
            r = hr % n_rel
            h = hr // n_rel
        degree = np.bincount(h, minlength=n).astype(np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(degree, out=indptr[1:])
        for a in (h, r, t, indptr, degree):
            a.setflags(write=False)
        return cls(tuple(item_keys), tuple(entity_keys), tuple(user_keys),
                   tuple(relations), h, r, t, indptr, degree)

    @property
    def n_items(self):
        return len(self.item_keys)

    @property
    def n_entities(self):
        return len(self.entity_keys)

    @property
    def n_users(self):
        return len(self.user_keys)

    @property
    def n_nodes(self):
        return self.n_items + self.n_entities + self.n_users

    @property
    def n_relations(self):
        return len(self.relations)

    @property
    def n_edges(self):
        return len(self.head)

    @property
    def user_offset(self):
        return self.n_items + self.n_entities

    def kind(self, node):
        if not 0 <= node < self.n_nodes:
            raise IndexError(node)
        if node < self.n_items:
            return NodeKind.ITEM
        if node < self.user_offset:
            return NodeKind.ENTITY
        return NodeKind.USER

    def node_kinds(self):
        kinds = np.full(self.n_nodes, NodeKind.USER, dtype=np.int64)
        kinds[: self.n_items] = NodeKind.ITEM
        kinds[self.n_items : self.user_offset] = NodeKind.ENTITY
        return kinds

    def node_key(self, node):
        kind = self.kind(node)
        if kind is NodeKind.ITEM:
            return self.item_keys[node]
        if kind is NodeKind.ENTITY:
            return self.entity_keys[node - self.n_items]
        return self.user_keys[node - self.user_offset]

    def key_index(self, kind):
        """Mapping key -> NodeId for one node kind."""
        if kind is NodeKind.ITEM:
            return {k: i for i, k in enumerate(self.item_keys)}
        if kind is NodeKind.ENTITY:
            return {k: self.n_items + i for i, k in enumerate(self.entity_keys)}
        return {k: self.user_offset + i for i, k in enumerate(self.user_keys)}

    def edges_of(self, node):
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return [Triple(node, int(r), int(t)) for r, t in zip(self.rel[lo:hi], self.tail[lo:hi])]

    def interactions(self):
        """(user, item) pairs of the forward interaction edges."""
        m = self.rel == 0
        return np.stack([self.head[m], self.tail[m]], axis=1)

    def kg_edges(self):
        """Forward KG edges (inverses omitted) as an (n, 3) array."""
        m = (self.rel >= 2) & (self.rel % 2 == 0)
        return np.stack([self.head[m], self.rel[m], self.tail[m]], axis=1)

    def user_items(self):
        """Mapping user NodeId -> sorted item array from the interaction edges."""
        pairs = self.interactions()
        out = {}
        if len(pairs):
            users, starts = np.unique(pairs[:, 0], return_index=True)
            for u, chunk in zip(users, np.split(pairs[:, 1], starts[1:])):
                out[int(u)] = chunk
        return out

    def _rebuild(self, pairs, kg, user_keys=None):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return CollabKG.from_edges(
            self.item_keys, self.entity_keys, self.user_keys if user_keys is None else user_keys,
            self.relations,
            np.concatenate([pairs[:, 0], kg[:, 0]]),
            np.concatenate([np.zeros(len(pairs), dtype=np.int64), kg[:, 1]]),
            np.concatenate([pairs[:, 1], kg[:, 2]]),
        )

    def with_interactions(self, pairs, include_kg=True):
        """A graph over the same nodes with the interaction edges replaced.

        ``include_kg=False`` drops every KG edge, leaving entities isolated.
        """
        kg = self.kg_edges() if include_kg else np.zeros((0, 3), dtype=np.int64)
        return self._rebuild(pairs, kg)

    def add_users(self, keys):
        """A copy with extra (edgeless) users appended after existing ones."""
        keys = tuple(keys)
        clash = set(keys) & set(self.user_keys)
        if clash:
            raise DataError(f"users already present: {sorted(clash)[:5]}")
        return self._rebuild(self.interactions(), self.kg_edges(), self.user_keys + keys)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "nodes.tsv", "w", encoding="utf-8") as fh:
            for v in range(self.n_nodes):
                fh.write(f"{v}\t{self.kind(v).name.lower()}\t{self.node_key(v)}\n")
        with open(directory / "relations.tsv", "w", encoding="utf-8") as fh:
            for r in self.relations:
                fh.write(f"{r.index}\t{r.name}\t{int(r.is_interaction)}\n")
        fwd = self.rel % 2 == 0
        np.savez(directory / "edges.npz", head=self.head[fwd], rel=self.rel[fwd], tail=self.tail[fwd])

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        keys = {NodeKind.ITEM: [], NodeKind.ENTITY: [], NodeKind.USER: []}
        try:
            for _, fields in _data_lines(directory / "nodes.tsv"):
                keys[NodeKind[fields[1].upper()]].append(fields[2])
            relations = tuple(
                Relation(int(f[0]), f[1], bool(int(f[2])))
                for _, f in _data_lines(directory / "relations.tsv")
            )
            with np.load(directory / "edges.npz") as z:
                head, rel, tail = z["head"], z["rel"], z["tail"]
        except (KeyError, IndexError, ValueError, OSError) as exc:
            raise DataError(f"{directory}: unreadable graph ({exc})") from None
        return cls.from_edges(keys[NodeKind.ITEM], keys[NodeKind.ENTITY], keys[NodeKind.USER],
                              relations, head, rel, tail)


@dataclass
class BuildOptions:
    dangling: str = "drop"  # or "error"


def _linked_to_items(triples, items):
    """KG keys connected (ignoring direction) to at least one item."""
    adj = {}
    for h, _, t in triples:
        adj.setdefault(h, []).append(t)
        adj.setdefault(t, []).append(h)
    seen = {k for k in adj if k in items}
    stack = list(seen)
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen


def build_ckg(interactions, triples, options=None):
    """Assemble a CollabKG from interaction records and KG triples.

    Items are the keys seen in ``interactions``; every other KG key is an
    entity. A triple whose endpoint is a user key is rejected. KG keys with
    no path to any item are dangling: their triples are dropped with a
    warning (``options.dangling == "drop"``) or raise.
    """
    options = options or BuildOptions()
    item_keys = list(dict.fromkeys(i for _, i, *_ in interactions))
    user_keys = list(dict.fromkeys(u for u, *_ in interactions))
    items = {k: n for n, k in enumerate(item_keys)}
    users = set(user_keys)

    for h, _, t in triples:
        for key in (h, t):
            if key in users and key not in items:
                raise DataError(f"KG triple references user key {key!r}")
    linked = _linked_to_items(triples, items)
    entity_keys = list(dict.fromkeys(k for h, _, t in triples for k in (h, t) if k in linked and k not in items))
    n_items = len(item_keys)
    ents = {k: n_items + n for n, k in enumerate(entity_keys)}
    user_offset = n_items + len(entity_keys)
    user_idx = {k: user_offset + n for n, k in enumerate(user_keys)}

    relations = [Relation(0, RATED, True), Relation(1, RATED_BY, True)]
    rel_idx = {}
    for name in relation_vocabulary(triples):
        rel_idx[name] = len(relations)
        relations.append(Relation(len(relations), name, False))
        relations.append(Relation(len(relations), name + INVERSE_SUFFIX, False))

    head = [user_idx[u] for u, *_ in interactions]
    tail = [items[i] for _, i, *_ in interactions]
    rel = [0] * len(head)

    dropped = 0
    for h, r, t in triples:
        hn = items.get(h, ents.get(h))
        tn = items.get(t, ents.get(t))
        if hn is None or tn is None:
            if options.dangling == "error":
                raise DataError(f"dangling KG key in ({h}, {r}, {t})")
            dropped += 1
            continue
        head.append(hn)
        rel.append(rel_idx[r])
        tail.append(tn)
    if dropped:
        log.warning("dropped %d dangling KG triples", dropped)
    return CollabKG.from_edges(item_keys, entity_keys, user_keys, relations, head, rel, tail)


@dataclass
class SplitSpec:
    """Warm/cold user partition with per-user item sets (item NodeIds)."""

    warm_users: list
    cold_users: list
    train: dict
    validation: dict
    test: dict
    revealed: dict
    excluded: list = field(default_factory=list)

    def train_pairs(self):
        pairs = [(u, i) for u in sorted(self.train) for i in sorted(self.train[u])]
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    def training_graph(self, ckg, include_kg=True):
        """The graph view used for training: warm users' train edges only."""
        return ckg.with_interactions(self.train_pairs(), include_kg=include_kg)

    def to_json(self):
        def enc(d):
            return {str(u): sorted(int(i) for i in v) for u, v in sorted(d.items())}

        return {
            "warm_users": [int(u) for u in self.warm_users],
            "cold_users": [int(u) for u in self.cold_users],
            "excluded": [int(u) for u in self.excluded],
            "train": enc(self.train),
            "validation": enc(self.validation),
            "test": enc(self.test),
            "revealed": enc(self.revealed),
        }

    @classmethod
    def from_json(cls, obj):
        def dec(d):
            return {int(u): set(v) for u, v in d.items()}

        return cls(obj["warm_users"], obj["cold_users"], dec(obj["train"]),
                   dec(obj["validation"]), dec(obj["test"]), dec(obj["revealed"]),
                   obj.get("excluded", []))


def split_cold_start(ckg, cold_fraction=0.1, reveal_fraction=0.5, min_interactions=2,
                     seed=0, val_fraction=0.1, test_fraction=0.1):
    """Partition users into warm and cold and split their interactions.

    Exactly ``round(cold_fraction * n_users)`` cold users are drawn from users
    with at least ``max(min_interactions, 2)`` interactions. Cold users reveal
    ``ceil(reveal_fraction * n)`` items (keeping at least one for test). Warm
    users with too few interactions to hold any out keep all of them for
    training and are listed in ``excluded``.
    """
    if not 0 < cold_fraction < 1 or not 0 < reveal_fraction < 1:
        raise ValueError("cold_fraction and reveal_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_user = ckg.user_items()
    users = [u for u in range(ckg.user_offset, ckg.n_nodes) if len(by_user.get(u, ())) > 0]
    n_cold = int(round(cold_fraction * len(users)))
    floor = max(min_interactions, 2)
    eligible = np.array([u for u in users if len(by_user[u]) >= floor], dtype=np.int64)
    if n_cold > len(eligible):
        raise DataError(f"need {n_cold} cold users, only {len(eligible)} have >= {floor} interactions")
    cold = sorted(rng.choice(eligible, size=n_cold, replace=False).tolist()) if n_cold else []
    cold_set = set(cold)

    train, val, test, revealed, excluded = {}, {}, {}, {}, []
    for u in users:
        items = rng.permutation(by_user[u])
        n = len(items)
        if u in cold_set:
            k = min(math.ceil(reveal_fraction * n), n - 1)
            revealed[u] = set(items[:k].tolist())
            test[u] = set(items[k:].tolist())
            continue
        if n < max(min_interactions, 3):
            train[u] = set(items.tolist())
            excluded.append(u)
            continue
        n_test = max(1, int(round(test_fraction * n)))
        n_val = max(1, int(round(val_fraction * n)))
        test[u] = set(items[:n_test].tolist())
        val[u] = set(items[n_test : n_test + n_val].tolist())
        train[u] = set(items[n_test + n_val :].tolist())
    if excluded:
        log.info("%d warm users too small to evaluate; train-only", len(excluded))
    return SplitSpec(sorted(train), cold, train, val, test, revealed, excluded)


def sample_neighbors(ckg, node, fanout, seed):
    """Uniform sample (without replacement) of at most ``fanout`` outgoing edges."""
    if fanout < 1:
        raise ValueError("fanout must be positive")
    lo, hi = int(ckg.indptr[node]), int(ckg.indptr[node + 1])
    idx = np.arange(lo, hi)
    if hi - lo > fanout:
        idx = np.sort(np.random.default_rng(seed).choice(idx, size=fanout, replace=False))
    return [Triple(node, int(ckg.rel[e]), int(ckg.tail[e])) for e in idx]


def sample_edges(ckg, fanout, rng, edge_mask=None):
    """Edge indices of a per-node uniform sample, for every node at once.

    Each node keeps at most ``fanout`` of its (unmasked) outgoing edges;
    ``fanout=None`` keeps them all. Indices are returned in CSR order.
    """
    idx = np.arange(ckg.n_edges)
    if edge_mask is not None:
        idx = idx[edge_mask]
    if fanout is None:
        return idx
    heads = ckg.head[idx]
    order = np.lexsort((rng.random(len(idx)), heads))
    sorted_heads = heads[order]
    rank = np.arange(len(order)) - np.searchsorted(sorted_heads, sorted_heads, side="left")
    return np.sort(idx[order[rank < fanout]])


def block_ids(count, n_blocks):
    """Balanced block label of each index (block sizes differ by at most one)."""
    return np.arange(count) * n_blocks // count


def generate_synthetic(n_users, n_items, n_entities, n_blocks, seed, interactions_per_user=10,
                       in_block=0.9, n_relations=2, links_per_item=3, feature_dim=16,
                       feature_noise=0.5, entity_text_fraction=0.5, popularity_skew=0.0,
                       decoy_links_per_item=0):
    """Block-structured desk-scale fixture.

    Users, items and entities are split into ``n_blocks`` contiguous,
    balanced blocks. Each user rates ``interactions_per_user`` distinct
    items, each from their own block with probability ``in_block``. Items
    link to entities of their own block through ``n_relations`` relation
    types. Features are noisy block prototypes; items always get one,
    entities with probability ``entity_text_fraction``. With
    ``popularity_skew > 0`` item ``j`` of a block is drawn with weight
    ``(j + 1) ** -popularity_skew`` instead of uniformly.
    ``decoy_links_per_item > 0`` adds a separate relation ``rel_decoy``
    linking each item to that many entities of one randomly chosen other
    block, a preference-irrelevant signal that does not average out.

    Returns ``(interactions, triples, features)``; ``features`` maps key to vector.
    """
    if n_blocks < 1 or n_blocks > min(n_users, n_items, n_entities):
        raise ValueError("n_blocks must be in [1, min(counts)]")
    rng = np.random.default_rng(seed)
    user_block = block_ids(n_users, n_blocks)
    item_block = block_ids(n_items, n_blocks)
    entity_block = block_ids(n_entities, n_blocks)
    per_user = min(interactions_per_user, n_items)
    weight = np.empty(n_items)
    for b in range(n_blocks):
        members = np.flatnonzero(item_block == b)
        weight[members] = (np.arange(len(members)) + 1.0) ** -popularity_skew

    def draw(pool, size):
        p = weight[pool] / weight[pool].sum()
        return rng.choice(pool, size=size, replace=False, p=p).tolist()

    interactions = []
    for u in range(n_users):
        own = np.flatnonzero(item_block == user_block[u])
        rest = np.flatnonzero(item_block != user_block[u])
        n_in = min(int(rng.binomial(per_user, in_block)), len(own))
        n_in = max(n_in, per_user - len(rest))
        picked = draw(own, n_in)
        if per_user > n_in:
            picked += draw(rest, per_user - n_in)
        interactions.extend((f"u{u}", f"i{i}", 1.0) for i in sorted(picked))

    triples = []
    for i in range(n_items):
        pool = np.flatnonzero(entity_block == item_block[i])
        links = max(1, min(len(pool), links_per_item))
        for j, e in enumerate(np.sort(rng.choice(pool, size=links, replace=False)).tolist()):
            triples.append((f"i{i}", f"rel{(i + j) % n_relations}", f"e{e}"))
        if decoy_links_per_item and n_blocks > 1:
            other = (item_block[i] + 1 + rng.integers(n_blocks - 1)) % n_blocks
            decoys = np.flatnonzero(entity_block == other)
            decoys = rng.choice(decoys, size=min(decoy_links_per_item, len(decoys)), replace=False)
            triples.extend((f"i{i}", "rel_decoy", f"e{e}") for e in np.sort(decoys).tolist())

    protos = rng.normal(size=(n_blocks, feature_dim))
    features = {}
    for i in range(n_items):
        features[f"i{i}"] = protos[item_block[i]] + feature_noise * rng.normal(size=feature_dim)
    for e in range(n_entities):
        vec = protos[entity_block[e]] + feature_noise * rng.normal(size=feature_dim)
        if rng.random() < entity_text_fraction:
            features[f"e{e}"] = vec
    return interactions, triples, features


def write_interactions(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in records:
            fh.write(f"{u}\t{i}\t{r:g}\n")


def write_triples(path, triples):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")
