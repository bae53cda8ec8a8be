"""Per-source autoencoders compressing layer-0 features into the shared GNN space."""
from __future__ import annotations

import math

import torch
from torch import nn

from .features import Source


def _xavier(shape, generator):
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound


class AutoEncoder(nn.Module):
    """``tanh`` encoder ``d -> d'`` with a linear decoder back to ``d``."""

    def __init__(self, in_dim, out_dim, generator=None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.enc_weight = nn.Parameter(_xavier((out_dim, in_dim), generator))
        self.enc_bias = nn.Parameter(torch.zeros(out_dim, dtype=torch.float64))
        self.dec_weight = nn.Parameter(_xavier((in_dim, out_dim), generator))
        self.dec_bias = nn.Parameter(torch.zeros(in_dim, dtype=torch.float64))

    def encode(self, x):
        return encode(x, self)

    def decode(self, z):
        return decode(z, self)


def encode(x, ae):
    if x.shape[-1] != ae.in_dim:
        raise ValueError(f"feature dimension {x.shape[-1]} != encoder input {ae.in_dim}")
    return torch.tanh(x @ ae.enc_weight.T + ae.enc_bias)


def decode(z, ae):
    if z.shape[-1] != ae.out_dim:
        raise ValueError(f"code dimension {z.shape[-1]} != decoder input {ae.out_dim}")
    return z @ ae.dec_weight.T + ae.dec_bias


def ae_loss(inputs, encoders):
    """Reconstruction MSE per source, averaged over sources.

    ``inputs`` maps source name to an (n, d) tensor; ``encoders`` maps the
    same names to AutoEncoders.
    """
    terms = []
    for name, x in inputs.items():
        if x.numel() == 0:
            continue
        recon = decode(encode(x, encoders[name]), encoders[name])
        terms.append(torch.mean((x - recon) ** 2))
    if not terms:
        raise ValueError("ae_loss needs at least one non-empty source")
    return torch.stack(terms).mean()


def source_name(src):
    return Source(src).name.lower()


def encode_nodes(features, encoders, dim):
    """Encoded layer-0 matrix for all nodes; USER_ZERO rows stay zero."""
    parts, index = [], []
    for src, (ids, mat) in sorted(features.rows.items()):
        parts.append(encode(torch.as_tensor(mat), encoders[source_name(src)]))
        index.append(torch.as_tensor(ids))
    h0 = torch.zeros(features.n_nodes, dim, dtype=torch.float64)
    if parts:
        h0 = h0.index_copy(0, torch.cat(index), torch.cat(parts))
    return h0


def feature_inputs(features):
    return {source_name(src): torch.as_tensor(mat) for src, (_, mat) in sorted(features.rows.items())}
