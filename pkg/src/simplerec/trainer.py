"""BPR training: batch sampling, the combined loss, Adam with early stopping, checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .encoder import ae_loss, feature_inputs
from .metrics import ndcg_at_k
from .model import ModelConfig, SimpleRec
from .ranker import rank_scores

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "simplerec-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``model`` holds the last finite parameters."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []


@dataclass
class BprBatch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.users)


def sample_negatives(users, train_sets, n_items, rng):
    """Uniform negatives outside each user's training items (rejection sampling)."""
    neg = rng.integers(n_items, size=len(users))
    todo = np.array([j for j, (u, i) in enumerate(zip(users, neg)) if i in train_sets[u]], dtype=np.int64)
    while len(todo):
        neg[todo] = rng.integers(n_items, size=len(todo))
        todo = todo[[neg[j] in train_sets[users[j]] for j in todo]]
    return neg


def sample_bpr_batch(split, ckg, batch_size, seed):
    """Uniformly drawn training interactions, each with one unrated negative.

    Users who rated the whole catalog have no negatives and are never drawn.
    """
    rng = np.random.default_rng(seed)
    n_items = ckg.n_items
    pairs = split.train_pairs()
    usable = np.array([len(split.train[u]) < n_items for u in pairs[:, 0]], dtype=bool)
    pairs = pairs[usable]
    if len(pairs) == 0:
        raise ValueError("no training interaction admits a negative item")
    idx = rng.integers(len(pairs), size=batch_size)
    users, pos = pairs[idx, 0], pairs[idx, 1]
    return BprBatch(users, pos, sample_negatives(users, split.train, n_items, rng))


def bpr_loss(pos_scores, neg_scores):
    """Mean of ``-ln sigmoid(pos - neg)``."""
    pos_scores = torch.as_tensor(pos_scores, dtype=torch.float64)
    neg_scores = torch.as_tensor(neg_scores, dtype=torch.float64)
    if pos_scores.shape != neg_scores.shape:
        raise ValueError("score lists differ in length")
    if pos_scores.numel() == 0:
        raise ValueError("empty batch")
    return F.softplus(neg_scores - pos_scores).mean()


def l2_penalty(model):
    return sum(torch.sum(p ** 2) for p in model.parameters())


@dataclass
class LossTerms:
    total: torch.Tensor
    bpr: torch.Tensor
    ae: torch.Tensor
    l2: torch.Tensor


def total_loss(batch, graph, model, features, ae_lambda, l2_gamma, plans=None, seed=0):
    """``L_BPR + ae_lambda * L_AE + l2_gamma * ||params||^2`` on one batch.

    ``plans`` freezes the neighbour sample; without it one is drawn from ``seed``.
    """
    if ae_lambda < 0 or l2_gamma < 0:
        raise ValueError("loss weights must be non-negative")
    emb = model.embeddings(graph, features, seed=seed, plans=plans)
    users = torch.as_tensor(batch.users)
    pos = torch.sum(emb[users] * emb[torch.as_tensor(batch.positives)], dim=1)
    neg = torch.sum(emb[users] * emb[torch.as_tensor(batch.negatives)], dim=1)
    bpr = bpr_loss(pos, neg)
    ae = ae_loss(feature_inputs(features), model.encoders)
    l2 = l2_penalty(model)
    return LossTerms(bpr + ae_lambda * ae + l2_gamma * l2, bpr, ae, l2)


def compute_gradients(loss, model):
    """d loss / d parameter for every named parameter (zeros where unused)."""
    named = list(model.named_parameters())
    if not loss.requires_grad:
        return OrderedDict((n, torch.zeros_like(p)) for n, p in named)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = OrderedDict()
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = g
    return out


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def warm_validation(model, graph, features, split, k):
    """Per-user NDCG@k on validation items, ranking all items but training ones."""
    users = [u for u in split.warm_users if split.validation.get(u)]
    if not users:
        return {}
    emb = model.full_embeddings(graph, features)
    scores = (emb[users] @ emb[: graph.n_items].T).numpy()
    out = {}
    for row, u in enumerate(users):
        ranked = rank_scores(scores[row], split.train.get(u, ()), min(k, graph.n_items - len(split.train[u])))
        out[u] = ndcg_at_k(ranked.items, split.validation[u], k)
    return out


@dataclass
class EpochLog:
    epoch: int
    bpr: float
    ae: float
    l2: float
    total: float
    val_ndcg: float


@dataclass
class FitResult:
    model: SimpleRec
    optimizer: torch.optim.Optimizer
    history: list
    best_epoch: int
    best_metric: float
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def fit(ckg, split, features, config=None, on_epoch=None):
    """Train on ``split``'s warm users; keep the state with the best validation NDCG.

    One epoch visits every training interaction once in shuffled batches of
    ``config.batch_size``; neighbour samples are drawn per batch from
    ``(seed, epoch, batch)``. Training stops after ``config.patience``
    consecutive epochs without a validation improvement or at
    ``config.epochs``.
    """
    config = config or ModelConfig()
    torch.manual_seed(config.seed)
    if not any(split.validation.get(u) for u in split.warm_users):
        raise ValueError("split has no validation interactions")
    graph = split.training_graph(ckg)
    model = SimpleRec(config, features.dims(), ckg.n_relations)
    opt = make_optimizer(model, config.lr)
    pairs = split.train_pairs()
    usable = np.array([len(split.train[u]) < ckg.n_items for u in pairs[:, 0]], dtype=bool)
    pairs = pairs[usable]
    n_batches = math.ceil(len(pairs) / config.batch_size)

    history = []
    best, best_epoch, best_state, bad = -math.inf, 0, None, 0
    stopped = False
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(len(pairs))
        sums = np.zeros(4)
        for b in range(n_batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            users, pos = pairs[idx, 0], pairs[idx, 1]
            batch = BprBatch(users, pos, sample_negatives(users, split.train, ckg.n_items, rng))
            plans = model.plan(graph, config.fanouts, seed=[config.seed, epoch, b])
            terms = total_loss(batch, graph, model, features, config.ae_lambda, config.l2_gamma, plans)
            if not torch.isfinite(terms.total):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", model, history)
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            sums += [terms.bpr.item(), terms.ae.item(), terms.l2.item(), terms.total.item()]
        val = warm_validation(model, graph, features, split, config.eval_k)
        metric = float(np.mean(list(val.values())))
        entry = EpochLog(epoch, *(sums / n_batches).tolist(), metric)
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        if metric > best:
            best, best_epoch, bad = metric, epoch, 0
            best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()))
        else:
            bad += 1
            if bad > config.patience:
                stopped = True
                break
    model.load_state_dict(best_state[0])
    opt.load_state_dict(best_state[1])
    return FitResult(model, opt, history, best_epoch, best, stopped)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model, optimizer=None, meta=None):
    """Write all parameters, Adam moments and a JSON header to an ``.npz`` file.

    Layout: ``param/<name>`` arrays, ``adam/<name>/exp_avg`` and
    ``adam/<name>/exp_avg_sq`` arrays, ``adam_step``, ``adam_lr``, and ``header`` holding
    JSON with the format tag, version, resolved config, source dims,
    relation count and caller metadata (seed, best epoch, input paths).
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "source_dims": model.source_dims,
        "n_relations": model.n_relations,
        "meta": meta or {},
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    names = [n for n, _ in model.named_parameters()]
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().numpy()
    step = 0
    if optimizer is not None:
        arrays["adam_lr"] = np.array(optimizer.param_groups[0]["lr"])
        state = optimizer.state_dict()["state"]
        for idx, name in enumerate(names):
            if idx in state:
                arrays[f"adam/{name}/exp_avg"] = state[idx]["exp_avg"].numpy()
                arrays[f"adam/{name}/exp_avg_sq"] = state[idx]["exp_avg_sq"].numpy()
                step = int(state[idx]["step"])
    arrays["adam_step"] = np.array(step)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild ``(model, optimizer, meta)`` from :func:`save_checkpoint` output."""
    from .features import Source

    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a SimpleRec checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files}
    config = ModelConfig.from_dict(header["config"])
    dims = {Source[name.upper()]: d for name, d in header["source_dims"].items()}
    model = SimpleRec(config, dims, header["n_relations"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"param/{name}"]))
    opt = make_optimizer(model, float(arrays["adam_lr"]) if "adam_lr" in arrays else config.lr)
    step = int(arrays["adam_step"])
    if step:
        state = opt.state_dict()
        for idx, (name, p) in enumerate(model.named_parameters()):
            if f"adam/{name}/exp_avg" in arrays:
                state["state"][idx] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.from_numpy(arrays[f"adam/{name}/exp_avg"]).clone(),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam/{name}/exp_avg_sq"]).clone(),
                }
        opt.load_state_dict(state)
    return model, opt, header["meta"]
