"""Model configuration and the parameter container tying encoder and GNN together."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import gnn
from .encoder import AutoEncoder, encode_nodes, source_name
from .encoder import _xavier

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-gates", "no-relations", "bipartite")


@dataclass
class ModelConfig:
    dim: int = 32
    layers: int = 3
    fanouts: tuple = (10, 10, 10)
    aggregator: str = "lightgcn"
    variant: str = "full"
    ae_lambda: float = 0.0
    l2_gamma: float = 1e-5
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1000
    patience: int = 50
    eval_k: int = 20
    seed: int = 0

    def __post_init__(self):
        self.fanouts = tuple(None if f in (None, 0, "full") else int(f) for f in self.fanouts)
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if len(self.fanouts) != self.layers:
            raise ValueError(f"{len(self.fanouts)} fanouts for {self.layers} layers")
        if self.aggregator not in gnn.AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.ae_lambda < 0 or self.l2_gamma < 0:
            raise ValueError("ae_lambda and l2_gamma must be non-negative")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fanouts"] = [0 if f is None else f for f in self.fanouts]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments) into typed ModelConfig fields."""
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in types:
            raise ValueError(f"config line {lineno}: unknown or malformed entry {raw.strip()!r}")
        out[key] = coerce(key, value)
    return out


def coerce(key, value):
    kind = {f.name: f.type for f in dataclasses.fields(ModelConfig)}[key]
    if key == "fanouts":
        if isinstance(value, (list, tuple)):
            return tuple(value)
        return tuple(0 if v.strip() in ("full", "none") else int(v) for v in str(value).split(","))
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


class SimpleRec(nn.Module):
    """All learnable parameters: one AE per feature source, gates, aggregator weights."""

    def __init__(self, config, source_dims, n_relations):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.dim
        self.source_dims = {source_name(s): int(v) for s, v in sorted(source_dims.items())}
        for name, in_dim in self.source_dims.items():
            if d >= in_dim:
                log.warning("%s encoder does not compress (%d -> %d)", name, in_dim, d)
        self.encoders = nn.ModuleDict({
            name: AutoEncoder(in_dim, d, gen) for name, in_dim in self.source_dims.items()
        })
        self.n_relations = n_relations
        gate_rels = 1 if config.variant == "no-relations" else n_relations
        self.gates = gnn.GateParams(config.layers, gate_rels, d, gen) if self.gated else None
        if config.aggregator == "gcn":
            self.agg_weights = nn.Parameter(torch.stack([_xavier((d, d), gen) for _ in range(config.layers)]))
        elif config.aggregator == "graphsage":
            self.agg_weights = nn.Parameter(torch.stack([_xavier((d, 2 * d), gen) for _ in range(config.layers)]))
        else:
            self.agg_weights = None

    @property
    def gated(self):
        return self.config.variant != "no-gates"

    @property
    def relational(self):
        return self.config.variant != "no-relations"

    @property
    def bipartite(self):
        return self.config.variant == "bipartite"

    def encode(self, features):
        return encode_nodes(features, self.encoders, self.config.dim)

    def plan(self, ckg, fanouts, seed=0, edge_mask=None):
        return gnn.build_plan(ckg, fanouts, seed, edge_mask, self.relational, self.bipartite)

    def layer_embeddings(self, ckg, features, fanouts=None, seed=0, edge_mask=None, plans=None):
        fanouts = self.config.fanouts if fanouts is None else fanouts
        if plans is None:
            plans = self.plan(ckg, fanouts, seed, edge_mask)
        return gnn.forward(ckg, self.encode(features), self.gates, self.config.layers, fanouts,
                           self.config.aggregator, agg_weights=self.agg_weights,
                           gated=self.gated, plans=plans)

    def embeddings(self, ckg, features, fanouts=None, seed=0, edge_mask=None, plans=None):
        """Final (L * d) embeddings of every node."""
        return gnn.final_embedding(self.layer_embeddings(ckg, features, fanouts, seed, edge_mask, plans))

    def full_embeddings(self, ckg, features, edge_mask=None):
        """Deterministic embeddings over complete neighbourhoods."""
        with torch.no_grad():
            return self.embeddings(ckg, features, [None] * self.config.layers, edge_mask=edge_mask)

    def checksum(self):
        """Bytes-level digest of every parameter, for inductive-invariance checks."""
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def item_scores(user_emb, item_emb):
    """Score matrix (users x items) as numpy."""
    return (user_emb @ item_emb.T).detach().cpu().numpy()


def as_numpy(t):
    return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
