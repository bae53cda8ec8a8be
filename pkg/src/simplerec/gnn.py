"""Relation-gated propagation over a CollabKG.

A layer aggregates, for every node ``h``, the mean over its (sampled)
outgoing edges ``(h, r, t)`` of ``gate(h, r, t) * e_t`` and combines the
result with ``e_h``. The gate is ``sigmoid(W1_r e_h + W2_r e_t)``, which is
``sigmoid(W_r [e_h || e_t])`` with ``W_r = [W1_r | W2_r]`` split in two so
that each factor is applied once per distinct (head, relation) or
(relation, tail) pair rather than once per edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .ckg import sample_edges
from .encoder import _xavier

AGGREGATORS = ("lightgcn", "gcn", "graphsage")
LEAKY_SLOPE = 0.01


@dataclass
class GateCounter:
    """Number of gate matrix-vector products performed."""

    products: int = 0
    per_layer: list = field(default_factory=list)


class GateParams(nn.Module):
    """Per-layer, per-relation gate factors of shape (L, R, d, d)."""

    def __init__(self, n_layers, n_relations, dim, generator=None):
        super().__init__()
        w = torch.stack([
            torch.stack([_xavier((dim, 2 * dim), generator) for _ in range(n_relations)])
            for _ in range(n_layers)
        ]) if n_layers and n_relations else torch.zeros(n_layers, n_relations, dim, 2 * dim,
                                                        dtype=torch.float64)
        self.w_head = nn.Parameter(w[..., :dim].contiguous())
        self.w_tail = nn.Parameter(w[..., dim:].contiguous())

    @property
    def n_relations(self):
        return self.w_head.shape[1]

    def full(self, layer, relation):
        """The unfactorized ``d x 2d`` matrix of one relation."""
        return torch.cat([self.w_head[layer, relation], self.w_tail[layer, relation]], dim=1)


def gate(e_h, e_t, relation, layer, params):
    """``sigmoid(W1 e_h + W2 e_t)`` for one edge."""
    if not 0 <= relation < params.n_relations:
        raise ValueError(f"unknown relation {relation}")
    return torch.sigmoid(params.w_head[layer, relation] @ e_h + params.w_tail[layer, relation] @ e_t)


def aggregate_ego(node, edges, embeddings, params, layer, gated=True):
    """Gated mean over one node's ego-network (a list of Triples)."""
    out = torch.zeros(embeddings.shape[1], dtype=embeddings.dtype)
    if not edges:
        return out
    for e in edges:
        if e.head != node:
            raise ValueError("edge does not start at the aggregated node")
        msg = embeddings[e.tail]
        if gated:
            msg = gate(embeddings[node], embeddings[e.tail], e.relation, layer, params) * msg
        out = out + msg
    return out / len(edges)


def combine(aggregator, e_h, e_ego, weight=None):
    """Merge a node's embedding with its aggregated ego-network embedding."""
    if aggregator == "lightgcn":
        return e_ego
    if aggregator == "gcn":
        return nn.functional.leaky_relu((e_h + e_ego) @ weight.T, LEAKY_SLOPE)
    if aggregator == "graphsage":
        return nn.functional.leaky_relu(torch.cat([e_h, e_ego], dim=-1) @ weight.T, LEAKY_SLOPE)
    raise ValueError(f"unknown aggregator {aggregator!r}")


@dataclass
class _Group:
    edge_pos: torch.Tensor
    relation: int
    heads: torch.Tensor
    head_inv: torch.Tensor
    tails: torch.Tensor
    tail_inv: torch.Tensor


@dataclass
class LayerPlan:
    """Frozen edge sample for one layer, pre-grouped for the gate transforms."""

    n_nodes: int
    head: torch.Tensor
    rel: np.ndarray
    tail: torch.Tensor
    inv_deg: torch.Tensor
    groups: list
    order: torch.Tensor  # maps grouped edge order back to CSR order

    @property
    def n_edges(self):
        return len(self.head)


def plan_layer(n_nodes, head, rel, tail, relational=True):
    head = np.asarray(head, dtype=np.int64)
    rel = np.asarray(rel, dtype=np.int64)
    tail = np.asarray(tail, dtype=np.int64)
    gate_rel = rel if relational else np.zeros_like(rel)
    groups, positions = [], []
    for r in np.unique(gate_rel):
        pos = np.flatnonzero(gate_rel == r)
        uh, hi = np.unique(head[pos], return_inverse=True)
        ut, ti = np.unique(tail[pos], return_inverse=True)
        groups.append(_Group(torch.as_tensor(pos), int(r), torch.as_tensor(uh), torch.as_tensor(hi),
                             torch.as_tensor(ut), torch.as_tensor(ti)))
        positions.append(pos)
    grouped = np.concatenate(positions) if positions else np.zeros(0, dtype=np.int64)
    order = np.empty_like(grouped)
    order[grouped] = np.arange(len(grouped))
    deg = np.bincount(head, minlength=n_nodes).astype(np.float64)
    inv_deg = torch.as_tensor(1.0 / np.maximum(deg, 1.0))[:, None]
    return LayerPlan(n_nodes, torch.as_tensor(head), rel, torch.as_tensor(tail), inv_deg,
                     groups, torch.as_tensor(order))


def build_plan(ckg, fanouts, seed=0, edge_mask=None, relational=True, bipartite=False):
    """One LayerPlan per layer; ``None`` fanouts keep full neighbourhoods.

    ``bipartite`` drops every KG edge so only user-item edges propagate.
    """
    mask = np.ones(ckg.n_edges, dtype=bool) if edge_mask is None else np.asarray(edge_mask, dtype=bool)
    if bipartite:
        mask = mask & (ckg.rel < 2)
    rng = np.random.default_rng(seed)
    plans = []
    for fanout in fanouts:
        idx = sample_edges(ckg, fanout, rng, mask)
        plans.append(plan_layer(ckg.n_nodes, ckg.head[idx], ckg.rel[idx], ckg.tail[idx], relational))
    return plans


def gate_preactivation(plan, h, params, layer, naive=False, counter=None):
    """``W1_r e_h + W2_r e_t`` for every planned edge, in CSR order."""
    parts = []
    products = 0
    for g in plan.groups:
        if naive:
            heads = g.heads[g.head_inv]
            tails = g.tails[g.tail_inv]
            x = torch.cat([h[heads], h[tails]], dim=1)
            parts.append(x @ params.full(layer, g.relation).T)
            products += 2 * len(g.edge_pos)
        else:
            ph = h[g.heads] @ params.w_head[layer, g.relation].T
            pt = h[g.tails] @ params.w_tail[layer, g.relation].T
            parts.append(ph[g.head_inv] + pt[g.tail_inv])
            products += len(g.heads) + len(g.tails)
    if counter is not None:
        counter.products += products
        counter.per_layer.append(products)
    if not parts:
        return h.new_zeros((0, h.shape[1]))
    return torch.cat(parts)[plan.order]


def propagate_layer(plan, h, layer, aggregator, gates=None, agg_weight=None, naive=False,
                    counter=None):
    """One convolution: gated ego-network mean, then the aggregator."""
    msg = h[plan.tail]
    if gates is not None and plan.n_edges:
        msg = torch.sigmoid(gate_preactivation(plan, h, gates, layer, naive, counter)) * msg
    ego = torch.zeros_like(h).index_add(0, plan.head, msg) * plan.inv_deg
    return combine(aggregator, h, ego, agg_weight)


def forward(ckg, h0, gates, n_layers, fanouts, aggregator="lightgcn", seed=0, agg_weights=None,
            gated=True, relational=True, bipartite=False, edge_mask=None, naive=False,
            counter=None, plans=None):
    """Layer embeddings ``[h0, h1, ..., hL]`` for every node of ``ckg``.

    ``gated=False`` replaces every gate by the all-ones vector; with
    ``relational=False`` all edges share relation 0's gate weights.
    """
    if len(fanouts) != n_layers:
        raise ValueError(f"{len(fanouts)} fanouts given for {n_layers} layers")
    if aggregator not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    if plans is None:
        plans = build_plan(ckg, fanouts, seed, edge_mask, relational, bipartite)
    layers = [h0]
    for layer, plan in enumerate(plans):
        weight = None if agg_weights is None else agg_weights[layer]
        layers.append(propagate_layer(plan, layers[-1], layer, aggregator,
                                      gates if gated else None, weight, naive, counter))
    return layers


def final_embedding(layers, node=None):
    """Concatenation of layers 1..L (layer 0 excluded) for one node or all."""
    stacked = torch.cat(layers[1:], dim=-1)
    return stacked if node is None else stacked[node]


def score(e_user, e_item):
    if e_user.shape[-1] != e_item.shape[-1]:
        raise ValueError("embedding lengths differ")
    return torch.sum(e_user * e_item, dim=-1)
