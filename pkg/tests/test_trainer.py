import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from simplerec.ckg import NodeKind, SplitSpec, build_ckg, generate_synthetic, split_cold_start
from simplerec.experiment import text_table
from simplerec.features import FeatureTable, assemble_initial_features
from simplerec.model import ModelConfig, SimpleRec
from simplerec.trainer import (BprBatch, TrainingDiverged, bpr_loss, compute_gradients, fit,
                               l2_penalty, load_checkpoint, make_optimizer, sample_bpr_batch,
                               save_checkpoint, total_loss, warm_validation)


def six_node(seed=0):
    """3 items, 1 entity, 2 users; items carry text, the entity a KGE row."""
    g = build_ckg([("u0", "a", 1), ("u0", "b", 1), ("u1", "c", 1)], [("a", "has", "e"), ("c", "has", "e")])
    rng = np.random.default_rng(seed)
    text = FeatureTable(np.arange(3), rng.normal(size=(3, 3)))
    kge = FeatureTable(np.array([3]), rng.normal(size=(1, 2)))
    return g, assemble_initial_features(g, text, kge)


def model_for(g, fm, seed=0, **kw):
    cfg = ModelConfig(**{"dim": 2, "layers": 2, "fanouts": (None, None), "seed": seed, **kw})
    return SimpleRec(cfg, fm.dims(), g.n_relations)


def test_bpr_examples():
    assert bpr_loss([1.0], [1.0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bpr_loss([800.0], [0.0]).item() == 0.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=20), rng.normal(size=20)
    want = sum(-math.log(1 / (1 + math.exp(-(x - y)))) for x, y in zip(a, b)) / 20
    assert bpr_loss(a, b).item() == pytest.approx(want, rel=1e-13)
    with pytest.raises(ValueError):
        bpr_loss([], [])
    with pytest.raises(ValueError):
        bpr_loss([1.0], [1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(d1=st.floats(-20, 20), d2=st.floats(-20, 20))
def test_bpr_positive_and_decreasing(d1, d2):
    lo, hi = sorted([d1, d2])
    assert bpr_loss([lo], [0.0]).item() > 0
    if hi - lo > 1e-6:
        assert bpr_loss([hi], [0.0]).item() < bpr_loss([lo], [0.0]).item()


BATCH = BprBatch(np.array([4, 4, 5]), np.array([0, 1, 2]), np.array([2, 2, 0]))


def test_total_loss_composition():
    g, fm = six_node()
    m = model_for(g, fm)
    t = total_loss(BATCH, g, m, fm, 0.0, 0.0)
    assert t.total.item() == t.bpr.item()
    emb = m.embeddings(g, fm)
    pos = (emb[BATCH.users] * emb[BATCH.positives]).sum(1)
    neg = (emb[BATCH.users] * emb[BATCH.negatives]).sum(1)
    l2 = sum(float((p.detach() ** 2).sum()) for p in m.parameters())
    t2 = total_loss(BATCH, g, m, fm, 0.7, 0.3)
    assert t2.bpr.item() == pytest.approx(bpr_loss(pos, neg).item(), rel=1e-14)
    assert t2.l2.item() == pytest.approx(l2, rel=1e-14)
    assert t2.total.item() == pytest.approx(t2.bpr.item() + 0.7 * t2.ae.item() + 0.3 * l2, rel=1e-14)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    assert total_loss(BATCH, g, m, fm, 0.0, 1.0).total.item() == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(BATCH, g, m, fm, -1.0, 0.0)


@pytest.mark.parametrize("aggregator", ["lightgcn", "gcn", "graphsage"])
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(aggregator, seed):
    g, fm = six_node(seed)
    m = model_for(g, fm, seed, aggregator=aggregator)
    plans = m.plan(g, [None, None])

    def loss():
        return total_loss(BATCH, g, m, fm, 0.5, 0.01, plans).total

    grads = compute_gradients(loss(), m)
    eps = 1e-5
    families = set()
    with torch.no_grad():
        for name, p in m.named_parameters():
            flat, gflat = p.view(-1), grads[name].view(-1)
            for j in range(flat.numel()):
                old = flat[j].item()
                flat[j] = old + eps
                up = loss().item()
                flat[j] = old - eps
                down = loss().item()
                flat[j] = old
                fd = (up - down) / (2 * eps)
                an = gflat[j].item()
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an)) + 1e-9, (name, j, fd, an)
            families.add(name.split(".")[0])
    assert {"encoders", "gates"} <= families
    assert ("agg_weights" in families) == (aggregator != "lightgcn")


def test_constant_loss_gives_zero_gradients():
    g, fm = six_node()
    m = model_for(g, fm)
    grads = compute_gradients(torch.tensor(3.0, dtype=torch.float64), m)
    assert all(torch.count_nonzero(v) == 0 for v in grads.values())


def test_l2_gradient_closed_form():
    g, fm = six_node()
    m = model_for(g, fm)
    grads = compute_gradients(0.25 * l2_penalty(m), m)
    for name, p in m.named_parameters():
        assert torch.equal(grads[name], 2 * 0.25 * p.detach())


def test_nan_gradient_names_parameter():
    g, fm = six_node()
    m = model_for(g, fm)
    loss = m.gates.w_head.sum() * float("nan")
    with pytest.raises(FloatingPointError, match="gates.w_head"):
        compute_gradients(loss, m)


def test_adam_step_with_zero_gradients_is_identity():
    g, fm = six_node()
    m = model_for(g, fm)
    before = [p.detach().clone() for p in m.parameters()]
    opt = make_optimizer(m, 0.1)
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_checkpoint_round_trip(tmp_path):
    g, fm = six_node()
    m = model_for(g, fm, aggregator="graphsage")
    opt = make_optimizer(m, 0.01)
    for _ in range(3):
        opt.zero_grad()
        total_loss(BATCH, g, m, fm, 0.1, 0.01).total.backward()
        opt.step()
    save_checkpoint(tmp_path / "m.npz", m, opt, {"seed": 0, "best_epoch": 3})
    m2, opt2, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta == {"seed": 0, "best_epoch": 3}
    assert m2.config == m.config
    assert m2.checksum() == m.checksum()
    assert torch.equal(m2.full_embeddings(g, fm), m.full_embeddings(g, fm))
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for k in s1:
        assert torch.equal(s1[k]["exp_avg"], s2[k]["exp_avg"])
        assert torch.equal(s1[k]["exp_avg_sq"], s2[k]["exp_avg_sq"])
        assert float(s1[k]["step"]) == float(s2[k]["step"])
    # one more identical step from both states stays identical
    for mm, oo in ((m, opt), (m2, opt2)):
        oo.zero_grad()
        total_loss(BATCH, g, mm, fm, 0.1, 0.01).total.backward()
        oo.step()
    assert m2.checksum() == m.checksum()
    (tmp_path / "bad.npz").write_bytes(b"junk")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad.npz")


def test_toy_convergence():
    # every item needs a KG link: see test_pure_bipartite_scores_vanish
    g = build_ckg([("u0", "a", 1), ("u0", "b", 1), ("u1", "c", 1)],
                  [("a", "has", "e"), ("b", "has", "e"), ("c", "has", "f")])
    batch = BprBatch(np.array([5, 5, 6]), np.array([0, 1, 2]), np.array([2, 2, 0]))
    for seed in range(3):
        fm = assemble_initial_features(g, FeatureTable(np.arange(5), np.random.default_rng(seed).normal(size=(5, 6))))
        m = model_for(g, fm, seed, dim=4)
        opt = make_optimizer(m, 0.01)
        for _ in range(500):
            t = total_loss(batch, g, m, fm, 0.0, 0.0)
            if t.bpr.item() < 0.1:
                break
            opt.zero_grad()
            t.total.backward()
            opt.step()
        assert t.bpr.item() < 0.1


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_pure_bipartite_scores_vanish(layers):
    # zero user inputs + ego-only propagation: users are nonzero only at odd
    # layers and KG-less items only at even ones, so every dot product is 0
    g = build_ckg([("u0", "a", 1), ("u0", "b", 1), ("u1", "c", 1)], [])
    fm = assemble_initial_features(g, FeatureTable(np.arange(3), np.random.default_rng(0).normal(size=(3, 5))))
    m = model_for(g, fm, layers=layers, fanouts=(None,) * layers)
    emb = m.full_embeddings(g, fm)
    assert torch.count_nonzero(emb[3:] @ emb[:3].T) == 0


def tiny_split():
    g = build_ckg([("u", "a", 1), ("v", "a", 1), ("v", "b", 1)], [])
    s = SplitSpec([2, 3], [], {2: {0}, 3: {0}}, {}, {}, {})
    return g, s


def test_sampling_forced_negative_and_membership():
    g, s = tiny_split()
    b = sample_bpr_batch(s, g, 50, seed=0)
    assert set(b.users.tolist()) == {2, 3}
    assert np.all(b.negatives == 1)
    inter, triples, _ = generate_synthetic(20, 12, 6, 2, 0, interactions_per_user=4)
    g = build_ckg(inter, triples)
    s = split_cold_start(g, cold_fraction=0.2, seed=0)
    b = sample_bpr_batch(s, g, 500, seed=1)
    for u, i, j in zip(b.users, b.positives, b.negatives):
        assert i in s.train[u] and j not in s.train[u]
    b2 = sample_bpr_batch(s, g, 500, seed=1)
    assert np.array_equal(b.negatives, b2.negatives)


def test_negative_marginal_is_uniform():
    g = build_ckg([("u", f"i{j}", 1) for j in range(2)] + [("v", f"i{j}", 1) for j in range(10)], [])
    u = g.key_index(NodeKind.USER)["u"]
    s = SplitSpec([u], [], {u: {0, 1}}, {}, {}, {})
    b = sample_bpr_batch(s, g, 100_000, seed=3)
    freq = np.bincount(b.negatives, minlength=10)[2:] / 100_000
    assert np.all(np.abs(freq * 8 - 1) <= 0.02)  # within 2% of 1/8


def block_task(seed=0):
    inter, triples, feats = generate_synthetic(20, 10, 6, 2, seed, interactions_per_user=4, feature_noise=0.3)
    g = build_ckg(inter, triples)
    s = split_cold_start(g, cold_fraction=0.1, seed=seed)
    tg = s.training_graph(g)
    return g, s, assemble_initial_features(tg, text_table(g, feats), FeatureTable(np.arange(10, 16), np.eye(6)))


CFG = ModelConfig(dim=4, layers=2, fanouts=(5, 5), lr=0.05, batch_size=16, epochs=30, patience=5, eval_k=5)


def test_fit_improves_and_keeps_best_state():
    g, s, fm = block_task()
    untrained = SimpleRec(CFG, fm.dims(), g.n_relations)
    tg = s.training_graph(g)
    base = np.mean(list(warm_validation(untrained, tg, fm, s, 5).values()))
    res = fit(g, s, fm, CFG)
    vals = [e.val_ndcg for e in res.history]
    assert res.best_metric == max(vals) == vals[res.best_epoch - 1]
    assert np.mean(list(warm_validation(res.model, tg, fm, s, 5).values())) == res.best_metric
    assert res.best_metric > base
    again = fit(g, s, fm, CFG)
    assert again.model.checksum() == res.model.checksum()


def test_patience_zero_stops_at_first_non_improvement():
    g, s, fm = block_task()
    res = fit(g, s, fm, dataclasses.replace(CFG, patience=0))
    vals = [e.val_ndcg for e in res.history]
    assert res.stopped_early
    assert all(b > a for a, b in zip(vals[:-2], vals[1:-1]))
    assert vals[-1] <= max(vals[:-1])


def test_divergence_raises_with_model():
    g, s, fm = block_task()
    with pytest.raises(TrainingDiverged) as info:
        fit(g, s, fm, dataclasses.replace(CFG, lr=1e200, l2_gamma=1.0, epochs=3))
    assert info.value.model is not None


def test_fit_requires_validation():
    g, s = tiny_split()
    with pytest.raises(ValueError):
        fit(g, s, None, CFG)
