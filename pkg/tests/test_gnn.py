import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from simplerec import gnn
from simplerec.ckg import Triple, build_ckg
from simplerec.gnn import (GateCounter, GateParams, aggregate_ego, build_plan, combine, final_embedding,
                           forward, gate, score)

from conftest import small_graph

T = torch.float64


def params(n_layers, n_rel, d, seed=0):
    return GateParams(n_layers, n_rel, d, torch.Generator().manual_seed(seed))


def rand(shape, seed):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape))


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def loop_layer(g, h, gp, layer, gated=True):
    """Scalar-loop gated mean over each node's full edge list."""
    h = h.detach().numpy()
    d = h.shape[1]
    w1 = gp.w_head.detach().numpy()[layer] if gated else None
    w2 = gp.w_tail.detach().numpy()[layer] if gated else None
    out = np.zeros_like(h)
    for v in range(g.n_nodes):
        edges = g.edges_of(v)
        for e in edges:
            for k in range(d):
                gk = 1.0
                if gated:
                    gk = sig(sum(w1[e.relation, k, j] * h[v, j] + w2[e.relation, k, j] * h[e.tail, j] for j in range(d)))
                out[v, k] += gk * h[e.tail, k] / len(edges)
    return out


def test_zero_weights_gate_is_half():
    gp = params(1, 2, 3)
    with torch.no_grad():
        gp.w_head.zero_()
        gp.w_tail.zero_()
    assert torch.equal(gate(rand(3, 0), rand(3, 1), 1, 0, gp), torch.full((3,), 0.5, dtype=T))


def test_gate_matches_concatenation_and_zero_head():
    gp = params(2, 3, 4, seed=2)
    eh, et = rand(4, 0), rand(4, 1)
    naive = torch.sigmoid(gp.full(1, 2) @ torch.cat([eh, et]))
    assert torch.max(torch.abs(gate(eh, et, 2, 1, gp) - naive)) <= 1e-12
    zero = torch.zeros(4, dtype=T)
    assert torch.equal(gate(zero, et, 2, 1, gp), torch.sigmoid(gp.w_tail[1, 2] @ et))
    with pytest.raises(ValueError):
        gate(eh, et, 3, 0, gp)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gate_strictly_inside_unit_interval(seed):
    gp = params(1, 1, 5, seed)
    g = gate(rand(5, seed), rand(5, seed + 1), 0, 0, gp)
    assert torch.all(g > 0) and torch.all(g < 1)


def test_aggregate_ego_cases():
    gp = params(1, 1, 2)
    emb = torch.tensor([[0.0, 0.0], [1.0, -2.0], [3.0, 5.0]], dtype=T)
    with torch.no_grad():
        gp.w_head.zero_()
        gp.w_tail.fill_(1e3)  # saturate on positive tails only
    one = aggregate_ego(0, [Triple(0, 0, 2)], emb, gp, 0)
    assert torch.equal(one, emb[2])
    with torch.no_grad():
        gp.w_tail.zero_()
    two = aggregate_ego(0, [Triple(0, 0, 1), Triple(0, 0, 2)], emb, gp, 0)
    assert torch.allclose(two, 0.5 * (emb[1] + emb[2]) / 2, atol=0, rtol=1e-15)
    assert torch.equal(aggregate_ego(0, [], emb, gp, 0), torch.zeros(2, dtype=T))
    with pytest.raises(ValueError):
        aggregate_ego(0, [Triple(1, 0, 2)], emb, gp, 0)


def test_aggregate_ego_matches_loop_on_toy_graph():
    g = build_ckg([("u", "a", 1), ("u", "b", 1)], [])
    gp = params(1, g.n_relations, 3, seed=5)
    h = rand((g.n_nodes, 3), 3)
    oracle = loop_layer(g, h, gp, 0)
    for v in range(g.n_nodes):
        assert np.allclose(aggregate_ego(v, g.edges_of(v), h, gp, 0).detach().numpy(), oracle[v], atol=1e-14)


def test_combine_variants():
    eh, ee = rand(3, 0), rand(3, 1)
    assert torch.equal(combine("lightgcn", eh, ee), ee)
    a, b = eh.abs(), ee.abs()
    assert torch.allclose(combine("gcn", a, b, torch.eye(3, dtype=T)), a + b, atol=0)
    w = rand((3, 6), 2)
    x = np.concatenate([eh.numpy(), ee.numpy()])
    raw = [sum(w[i, j].item() * x[j] for j in range(6)) for i in range(3)]
    want = [r if r > 0 else 0.01 * r for r in raw]
    assert np.allclose(combine("graphsage", eh, ee, w).numpy(), want, atol=1e-14)
    with pytest.raises(ValueError):
        combine("gat", eh, ee)


def test_single_hop_user_gets_gated_item():
    g = build_ckg([("u", "a", 1)], [])
    gp = params(1, g.n_relations, 2, seed=1)
    h0 = torch.tensor([[0.3, -0.7], [0.0, 0.0]], dtype=T)
    layers = forward(g, h0, gp, 1, [None])
    want = torch.sigmoid(gp.w_tail[0, 0] @ h0[0]) * h0[0]
    assert torch.allclose(layers[1][1], want, atol=1e-15)


def test_sampled_forward_equals_full_when_fanout_covers_degree():
    g = small_graph(4, n_users=8)
    gp = params(2, g.n_relations, 3, seed=2)
    h0 = rand((g.n_nodes, 3), 4)
    big = int(g.degree.max())
    a = forward(g, h0, gp, 2, [None, None])
    b = forward(g, h0, gp, 2, [big, big], seed=9)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_two_layer_chain_matches_hand_unrolled():
    # u0 - i0 - e0 - i1 - u1
    g = build_ckg([("u0", "i0", 1), ("u1", "i1", 1)], [("i0", "has", "e0"), ("i1", "has", "e0")])
    assert g.n_nodes == 5
    d = 2
    gp = params(2, g.n_relations, d, seed=7)
    h0 = rand((5, d), 1)
    h0[3:] = 0.0
    layers = forward(g, h0, gp, 2, [None, None])
    h1 = loop_layer(g, h0, gp, 0)
    h2 = loop_layer(g, torch.as_tensor(h1), gp, 1)
    assert np.allclose(layers[1].detach().numpy(), h1, atol=1e-14)
    assert np.allclose(layers[2].detach().numpy(), h2, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_no_gates_lightgcn_is_plain_mean(seed):
    g = small_graph(seed, n_users=7)
    h = rand((g.n_nodes, 3), seed)
    layers = forward(g, h, None, 2, [None, None], gated=False)
    cur = h.numpy()
    for l in (1, 2):
        nxt = np.zeros_like(cur)
        for v in range(g.n_nodes):
            nbrs = [e.tail for e in g.edges_of(v)]
            if nbrs:
                nxt[v] = np.mean(cur[nbrs], axis=0)
        assert np.allclose(layers[l].numpy(), nxt, atol=1e-14)
        cur = nxt


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), agg=st.sampled_from(gnn.AGGREGATORS))
def test_factorized_equals_naive(seed, agg):
    g = small_graph(seed, n_users=6, n_rel=3)
    d = 3
    gp = params(2, g.n_relations, d, seed)
    aw = None
    if agg != "lightgcn":
        aw = rand((2, d, d if agg == "gcn" else 2 * d), seed)
    h0 = rand((g.n_nodes, d), seed + 1)
    a = forward(g, h0, gp, 2, [3, 3], agg, seed=seed, agg_weights=aw)
    b = forward(g, h0, gp, 2, [3, 3], agg, seed=seed, agg_weights=aw, naive=True)
    for x, y in zip(a, b):
        assert torch.max(torch.abs(x - y)) <= 1e-10


def test_gate_product_counts():
    g = small_graph(1, n_users=10, n_items=4, n_entities=2, n_rel=1, p=0.9)
    n_v, n_r, n_e = g.n_nodes, g.n_relations, g.n_edges
    assert n_e > n_v * n_r
    gp = params(2, n_r, 2)
    h0 = rand((n_v, 2), 0)
    fact, naive = GateCounter(), GateCounter()
    forward(g, h0, gp, 2, [None, None], counter=fact)
    forward(g, h0, gp, 2, [None, None], naive=True, counter=naive)
    assert naive.per_layer == [2 * n_e, 2 * n_e]
    for p in fact.per_layer:
        assert p <= 2 * n_v * n_r and p < 2 * n_e


def test_no_relations_shares_one_gate():
    g = small_graph(2)
    gp = params(1, 1, 3, seed=3)
    h0 = rand((g.n_nodes, 3), 1)
    shared = forward(g, h0, gp, 1, [None], relational=False)[1]
    many = params(1, g.n_relations, 3)
    with torch.no_grad():
        many.w_head.copy_(gp.w_head.expand_as(many.w_head))
        many.w_tail.copy_(gp.w_tail.expand_as(many.w_tail))
    assert torch.allclose(shared, forward(g, h0, many, 1, [None])[1], atol=1e-15)


def test_bipartite_drops_kg_edges():
    g = small_graph(3)
    plan = build_plan(g, [None], bipartite=True)[0]
    assert np.all(plan.rel < 2) and plan.n_edges == int(np.sum(g.rel < 2))


def test_forward_errors():
    g = small_graph()
    with pytest.raises(ValueError):
        forward(g, rand((g.n_nodes, 2), 0), None, 2, [None], gated=False)
    with pytest.raises(ValueError):
        forward(g, rand((g.n_nodes, 2), 0), None, 1, [None], "gat", gated=False)


def test_final_embedding_and_score():
    a, b, c = rand((4, 2), 0), rand((4, 2), 1), rand((4, 2), 2)
    assert torch.equal(final_embedding([a, b]), b)
    f = final_embedding([a, b, c])
    assert f.shape == (4, 4)
    assert torch.equal(f[:, :2], b) and torch.equal(f[:, 2:], c)
    assert torch.equal(final_embedding([a, b, c], 1), torch.cat([b[1], c[1]]))
    x = torch.tensor([1.0, 0.0], dtype=T)
    assert score(x, torch.tensor([0.0, 1.0], dtype=T)).item() == 0.0
    assert score(x, x).item() == 1.0
    u, v = rand(6, 3), rand(6, 4)
    assert score(u, v).item() == pytest.approx(sum(u[k].item() * v[k].item() for k in range(6)), rel=1e-14)
    with pytest.raises(ValueError):
        score(u, v[:5])
