"""Latent feature aggregation: attention refinement and mixture-based losses."""
import math

import torch
from torch import nn

from .exceptions import EmptyFeatureSet


def attention_message(query, bank, w_q, w_k, w_v):
    """softmax((W_q q)(W_k F)^T / sqrt(C)) W_v F for one query or a batch of rows.

    ``w_*`` are ``C x C`` matrices applied as ``W @ f``.
    """
    single = query.dim() == 1
    q = query.unsqueeze(0) if single else query
    c = q.shape[-1]
    logits = (q @ w_q.T) @ (bank @ w_k.T).T / math.sqrt(c)
    # softmax subtracts the row max internally
    msg = torch.softmax(logits, dim=-1) @ (bank @ w_v.T)
    return msg[0] if single else msg


def _mlp(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))


class AttentionUnit(nn.Module):
    """Residual attention update f <- f + MLP([f | M]) with a single head."""

    def __init__(self, dim, kind="self"):
        super().__init__()
        if kind not in ("self", "cross"):
            raise ValueError(f"kind must be 'self' or 'cross', got {kind!r}")
        self.kind = kind
        self.dim = dim
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)
        self.mlp = _mlp(2 * dim, 2 * dim, dim)

    def message(self, x, bank):
        return attention_message(x, bank, self.w_q, self.w_k, self.w_v)

    def forward(self, x, bank):
        return x + self.mlp(torch.cat([x, self.message(x, bank)], dim=-1))


def attention_update(features_a, features_o, unit):
    """Apply ``unit`` to every row of ``features_a`` against the bank ``features_o``."""
    bank = features_a if unit.kind == "self" else features_o
    return unit(features_a, bank)


class LatentAggregator(nn.Module):
    """Entry MLP (D -> C), one self update and one cross update per image."""

    def __init__(self, in_dim, dim):
        super().__init__()
        self.entry = _mlp(in_dim, dim, dim)
        self.self_unit = AttentionUnit(dim, "self")
        self.cross_unit = AttentionUnit(dim, "cross")

    def forward(self, latent_a, latent_b):
        if latent_a.shape[0] == 0 or latent_b.shape[0] == 0:
            raise EmptyFeatureSet("latent feature sets must be non-empty")
        a = self.entry(latent_a)
        b = self.entry(latent_b)
        a = attention_update(a, a, self.self_unit)
        b = attention_update(b, b, self.self_unit)
        return attention_update(a, b, self.cross_unit), attention_update(b, a, self.cross_unit)


def refine_latent(latent_a, latent_b, aggregator):
    return aggregator(latent_a, latent_b)


def weighted_means(features, responsibilities):
    """Responsibility-weighted cluster means; responsibilities act as constants."""
    r = torch.as_tensor(responsibilities, dtype=features.dtype, device=features.device)
    return (r.T @ features) / r.sum(dim=0).clamp_min(1e-12)[:, None]


def loss_intra(features, model):
    """Sum over clusters of squared distances from members to their mean.

    Members are argmax-responsibility assignments; means are recomputed from
    ``features`` so gradients flow into them.
    """
    resp = model.responsibilities
    mu = weighted_means(features, resp)
    labels = torch.as_tensor(resp.argmax(axis=1), device=features.device)
    return ((features - mu[labels]) ** 2).sum()


def loss_inter(means):
    """sum_k sum_{j != k} ||mu_k - mu_j||^2 over ordered pairs."""
    if not torch.is_tensor(means):
        means = torch.as_tensor(getattr(means, "means", means))
    diff = means[:, None, :] - means[None, :, :]
    return (diff**2).sum()


def loss_lfa(intra, inter):
    return intra - inter
