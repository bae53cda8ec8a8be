"""Layer-0 node features: text embeddings, ComplEx KG embeddings, degree channel."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .ckg import DataError, NodeKind

log = logging.getLogger(__name__)


class Source(enum.IntEnum):
    TEXT = 0
    KGE = 1
    USER_ZERO = 2


@dataclass
class FeatureTable:
    """Vectors of one source, row ``n`` belonging to node ``node_ids[n]``."""

    node_ids: np.ndarray
    vectors: np.ndarray
    missing_entities: tuple = ()

    @property
    def dim(self):
        return self.vectors.shape[1]

    def as_dict(self):
        return {int(v): self.vectors[n] for n, v in enumerate(self.node_ids)}


def read_feature_file(path):
    """Parse ``key<TAB>f1,f2,...`` lines into an ordered dict of float vectors."""
    out = {}
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            key, sep, values = line.partition("\t")
            if not sep or not key:
                raise DataError(f"{path}:{lineno}: expected key<TAB>values")
            try:
                vec = np.array([float(x) for x in values.split(",")], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: NaN or Inf feature value")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}:{lineno}: dimension {len(vec)} != {dim}")
            out[key] = vec
    if dim is None:
        raise DataError(f"{path}: no feature rows")
    return out


def write_feature_file(path, features):
    """Write ``key -> vector`` rows; ``repr`` floats make the round trip exact."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in features.items():
            fh.write(key + "\t" + ",".join(repr(float(x)) for x in vec) + "\n")


def load_text_features(path, ckg):
    """Text features for the items and entities of ``ckg``.

    Every item must be present; entities without a row are reported in
    ``missing_entities`` for KGE coverage. Keys unknown to the graph are ignored.
    """
    raw = read_feature_file(path)
    items = ckg.key_index(NodeKind.ITEM)
    ents = ckg.key_index(NodeKind.ENTITY)
    missing_items = [k for k in ckg.item_keys if k not in raw]
    if missing_items:
        raise DataError(f"{path}: {len(missing_items)} items lack text features, e.g. {missing_items[0]!r}")
    ids, rows = [], []
    for key, vec in raw.items():
        node = items.get(key, ents.get(key))
        if node is None:
            continue
        ids.append(node)
        rows.append(vec)
    order = np.argsort(ids, kind="stable")
    missing = tuple(k for k in ckg.entity_keys if k not in raw)
    return FeatureTable(np.asarray(ids, dtype=np.int64)[order], np.asarray(rows)[order], missing)


def load_kge_features(path, ckg):
    """KGE feature file (entity rows only) as a FeatureTable."""
    raw = read_feature_file(path)
    ents = ckg.key_index(NodeKind.ENTITY)
    pairs = sorted((ents[k], v) for k, v in raw.items() if k in ents)
    if not pairs:
        raise DataError(f"{path}: no rows match graph entities")
    return FeatureTable(np.array([p[0] for p in pairs], dtype=np.int64), np.stack([p[1] for p in pairs]))


# --- ComplEx -----------------------------------------------------------------


@dataclass
class ComplexParams:
    """Complex embeddings: rows of ``node_re``/``node_im`` belong to ``node_ids``."""

    node_ids: np.ndarray
    node_re: np.ndarray
    node_im: np.ndarray
    rel_ids: np.ndarray
    rel_re: np.ndarray
    rel_im: np.ndarray

    def _lookup(self, ids, table, what):
        pos = np.searchsorted(table, ids)
        pos = np.clip(pos, 0, len(table) - 1)
        if not np.all(table[pos] == ids):
            bad = np.asarray(ids)[table[pos] != ids]
            raise KeyError(f"{what} {int(np.ravel(bad)[0])} not covered by ComplEx params")
        return pos

    def node_rows(self, ids):
        return self._lookup(np.asarray(ids), self.node_ids, "node")

    def rel_rows(self, ids):
        return self._lookup(np.asarray(ids), self.rel_ids, "relation")

    def restrict(self, node_ids):
        rows = self.node_rows(node_ids)
        return ComplexParams(np.asarray(node_ids), self.node_re[rows], self.node_im[rows],
                             self.rel_ids, self.rel_re, self.rel_im)

    def to_table(self):
        return FeatureTable(self.node_ids.copy(), np.concatenate([self.node_re, self.node_im], axis=1))


def _trilinear(hr, hi, rr, ri, tr, ti):
    return np.sum(rr * (hr * tr + hi * ti) + ri * (hr * ti - hi * tr), axis=-1)


def complex_score(h, r, t, params):
    """Re(<w_r, e_h, conj(e_t)>); accepts scalars or equal-length id arrays."""
    hn, tn, rn = params.node_rows(h), params.node_rows(t), params.rel_rows(r)
    return _trilinear(params.node_re[hn], params.node_im[hn], params.rel_re[rn],
                      params.rel_im[rn], params.node_re[tn], params.node_im[tn])


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def complex_loss_and_grad(params, positives, negatives, reg=0.0):
    """Logistic loss of positive vs. negative triples and its exact gradient.

    ``positives``/``negatives`` are (n, 3) NodeId/relation arrays. The loss is
    the mean of softplus(-s) over positives and softplus(s) over negatives,
    plus ``reg`` times the mean squared parameter. Returns (loss, grads) with
    grads keyed like the parameter arrays.
    """
    triples = np.concatenate([positives, negatives])
    sign = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
    hn = params.node_rows(triples[:, 0])
    rn = params.rel_rows(triples[:, 1])
    tn = params.node_rows(triples[:, 2])
    hr, hi = params.node_re[hn], params.node_im[hn]
    tr, ti = params.node_re[tn], params.node_im[tn]
    rr, ri = params.rel_re[rn], params.rel_im[rn]
    s = _trilinear(hr, hi, rr, ri, tr, ti)
    n = len(triples)
    loss = np.sum(_softplus(-sign * s)) / n
    ds = (-sign * _sigmoid(-sign * s) / n)[:, None]

    g_node_re = np.zeros_like(params.node_re)
    g_node_im = np.zeros_like(params.node_im)
    g_rel_re = np.zeros_like(params.rel_re)
    g_rel_im = np.zeros_like(params.rel_im)
    np.add.at(g_node_re, hn, ds * (rr * tr + ri * ti))
    np.add.at(g_node_im, hn, ds * (rr * ti - ri * tr))
    np.add.at(g_node_re, tn, ds * (rr * hr - ri * hi))
    np.add.at(g_node_im, tn, ds * (rr * hi + ri * hr))
    np.add.at(g_rel_re, rn, ds * (hr * tr + hi * ti))
    np.add.at(g_rel_im, rn, ds * (hr * ti - hi * tr))
    grads = {"node_re": g_node_re, "node_im": g_node_im, "rel_re": g_rel_re, "rel_im": g_rel_im}
    if reg:
        size = sum(getattr(params, k).size for k in grads)
        loss += reg * sum(np.sum(getattr(params, k) ** 2) for k in grads) / size
        for k in grads:
            grads[k] += 2.0 * reg * getattr(params, k) / size
    return loss, grads


def corrupt(triples, node_pool, rng):
    """One head-corrupted and one tail-corrupted copy of every triple."""
    heads = triples.copy()
    heads[:, 0] = rng.choice(node_pool, size=len(triples))
    tails = triples.copy()
    tails[:, 2] = rng.choice(node_pool, size=len(triples))
    return np.concatenate([heads, tails])


def init_complex(node_ids, rel_ids, dim, rng, scale=0.1):
    node_ids = np.asarray(node_ids, dtype=np.int64)
    rel_ids = np.asarray(rel_ids, dtype=np.int64)
    return ComplexParams(
        node_ids, scale * rng.standard_normal((len(node_ids), dim)),
        scale * rng.standard_normal((len(node_ids), dim)),
        rel_ids, scale * rng.standard_normal((len(rel_ids), dim)),
        scale * rng.standard_normal((len(rel_ids), dim)),
    )


def train_complex(triples, dim=16, epochs=200, lr=0.05, negatives_per_positive=1, seed=0,
                  reg=1e-3, entity_ids=None, history=None):
    """Fit ComplEx on ``(head, relation, tail)`` id triples.

    Full-batch: every epoch draws ``negatives_per_positive`` head and tail
    corruptions per triple and takes one Adam step on the logistic loss.
    The returned params cover ``entity_ids`` only when given (the KG's
    non-item entities), all KG nodes otherwise. Per-epoch losses are
    appended to ``history`` if provided.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise ValueError("ComplEx needs at least one triple")
    rng = np.random.default_rng(seed)
    nodes = np.unique(np.concatenate([triples[:, 0], triples[:, 2]]))
    params = init_complex(nodes, np.unique(triples[:, 1]), dim, rng)
    keys = ("node_re", "node_im", "rel_re", "rel_im")
    m = {k: np.zeros_like(getattr(params, k)) for k in keys}
    v = {k: np.zeros_like(getattr(params, k)) for k in keys}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, epochs + 1):
        negs = np.concatenate([corrupt(triples, nodes, rng) for _ in range(negatives_per_positive)])
        loss, grads = complex_loss_and_grad(params, triples, negs, reg)
        if history is not None:
            history.append(loss)
        for k in keys:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            mhat = m[k] / (1 - b1 ** step)
            vhat = v[k] / (1 - b2 ** step)
            getattr(params, k)[...] -= lr * mhat / (np.sqrt(vhat) + eps)
    if not all(np.all(np.isfinite(getattr(params, k))) for k in keys):
        raise FloatingPointError("ComplEx training diverged")
    if entity_ids is not None:
        entity_ids = np.intersect1d(np.asarray(entity_ids, dtype=np.int64), nodes)
        params = params.restrict(entity_ids)
    return params


def train_complex_on_graph(ckg, **kwargs):
    """ComplEx over the graph's KG triples, restricted to its entity nodes."""
    kg = ckg.kg_edges()
    if len(kg) == 0:
        raise DataError("graph has no KG triples")
    entity_ids = np.arange(ckg.n_items, ckg.user_offset)
    return train_complex(kg, entity_ids=entity_ids, **kwargs)


def tail_mrr(params, triples, known, n_candidates=10, seed=0):
    """Filtered MRR of the true tail against ``n_candidates - 1`` sampled tails.

    Candidates are drawn from the covered nodes, skipping any ``(h, r, t')``
    in ``known``.
    """
    rng = np.random.default_rng(seed)
    known = {tuple(map(int, t)) for t in known}
    pool = params.node_ids
    rr = []
    for h, r, t in np.asarray(triples).tolist():
        options = [c for c in pool.tolist() if c != t and (h, r, c) not in known]
        cands = rng.choice(options, size=min(n_candidates - 1, len(options)), replace=False)
        true = complex_score(h, r, t, params)
        others = complex_score(np.full(len(cands), h), np.full(len(cands), r), cands, params)
        rr.append(1.0 / (1 + int(np.sum(others >= true))))
    return float(np.mean(rr))


# --- assembly ----------------------------------------------------------------


@dataclass
class FeatureMatrix:
    """Per-source input rows; users carry no content and are tagged USER_ZERO."""

    source: np.ndarray  # per-node Source
    rows: dict  # Source -> (node_ids, matrix with degree channel appended)

    @property
    def n_nodes(self):
        return len(self.source)

    def dims(self):
        return {int(s): m.shape[1] for s, (_, m) in self.rows.items()}

    def extend_users(self, n_nodes):
        """A copy covering ``n_nodes`` nodes; the appended ones are content-free users."""
        if n_nodes < self.n_nodes:
            raise ValueError("cannot shrink a feature matrix")
        extra = np.full(n_nodes - self.n_nodes, Source.USER_ZERO, dtype=self.source.dtype)
        return FeatureMatrix(np.concatenate([self.source, extra]), self.rows)


def assemble_initial_features(ckg, text, kge=None):
    """Build the FeatureMatrix for ``ckg``.

    Items need a text row. Entities take text when available, else the KGE
    row (``kge`` is a FeatureTable or ComplexParams). Each vector gets one
    extra channel ``log(1 + degree)``.
    """
    if isinstance(kge, ComplexParams):
        kge = kge.to_table()
    kinds = ckg.node_kinds()
    source = np.full(ckg.n_nodes, -1, dtype=np.int64)
    source[kinds == NodeKind.USER] = Source.USER_ZERO
    text_map = text.as_dict()
    kge_map = kge.as_dict() if kge is not None else {}
    chosen = {Source.TEXT: [], Source.KGE: []}
    for v in range(ckg.user_offset):
        if v in text_map:
            chosen[Source.TEXT].append(v)
        elif kinds[v] == NodeKind.ITEM:
            raise DataError(f"item {ckg.node_key(v)!r} has no text feature")
        elif v in kge_map:
            chosen[Source.KGE].append(v)
        else:
            raise DataError(f"entity {ckg.node_key(v)!r} has neither text nor KGE feature")
    log_degree = np.log1p(ckg.degree.astype(np.float64))
    rows = {}
    for src, lookup in ((Source.TEXT, text_map), (Source.KGE, kge_map)):
        ids = np.asarray(chosen[src], dtype=np.int64)
        if len(ids) == 0:
            continue
        mat = np.stack([lookup[int(v)] for v in ids])
        mat = np.concatenate([mat, log_degree[ids, None]], axis=1)
        if not np.all(np.isfinite(mat)):
            raise DataError(f"non-finite {src.name} features")
        source[ids] = src
        rows[src] = (ids, mat)
    return FeatureMatrix(source, rows)
