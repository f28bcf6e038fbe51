"""Temporal and action attention, the Gaussian-mixture output, and the
end-to-end forward pass producing predictions with local explanations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import Mlp, PerCategoryMlp
from .domain import ActionSchema, TemporalSample
from .friendship import GraphEncoder
from .temporal import Tlstm

SD_FLOOR = 1e-4


@dataclass
class ModelConfig:
    d_prime: int = 32
    d_hidden: int = 32
    scorer_hidden: int = 32
    head_hidden: int = 32
    lstm_layers: int = 2
    use_edge_features: bool = True


@dataclass
class Batch:
    """Padded tensors for a set of samples; ego is node 0 in every graph."""

    node_features: torch.Tensor  # (B, T, N, D)
    adjacency: torch.Tensor      # (B, T, N, N)
    edge_features: torch.Tensor  # (B, T, F, E)
    friend_mask: torch.Tensor    # (B, T, F) bool
    labels: torch.Tensor         # (B,)

    @property
    def size(self) -> int:
        return self.node_features.shape[0]

    @property
    def T(self) -> int:
        return self.node_features.shape[1]

    def select(self, idx) -> "Batch":
        return Batch(
            node_features=self.node_features[idx],
            adjacency=self.adjacency[idx],
            edge_features=self.edge_features[idx],
            friend_mask=self.friend_mask[idx],
            labels=self.labels[idx],
        )


def collate(samples: Sequence[TemporalSample], schema: ActionSchema, dtype=torch.float32) -> Batch:
    """Pad variable friend counts to a common width."""
    B = len(samples)
    T = samples[0].T
    max_friends = max((len(g.friends) for s in samples for g in s.graphs), default=0)
    N = 1 + max_friends
    node = torch.zeros(B, T, N, schema.D, dtype=dtype)
    adj = torch.zeros(B, T, N, N, dtype=dtype)
    edge = torch.zeros(B, T, max_friends, schema.edge_dim, dtype=dtype)
    mask = torch.zeros(B, T, max_friends, dtype=torch.bool)
    labels = torch.tensor([s.label for s in samples], dtype=dtype)
    for b, s in enumerate(samples):
        for t, g in enumerate(s.graphs):
            n = g.n_nodes
            node[b, t, :n] = torch.as_tensor(np.asarray(g.node_features), dtype=dtype)
            adj[b, t, :n, :n] = torch.as_tensor(np.asarray(g.adjacency), dtype=dtype)
            nf = len(g.friends)
            if nf:
                edge[b, t, :nf] = torch.as_tensor(np.asarray(g.edge_features), dtype=dtype)
                mask[b, t, :nf] = True
    return Batch(node_features=node, adjacency=adj, edge_features=edge, friend_mask=mask, labels=labels)


@dataclass
class MixtureOutput:
    action_probs: torch.Tensor  # (B, K)
    mu: torch.Tensor            # (B, K)
    sd: torch.Tensor            # (B, K)

    @property
    def point_estimate(self) -> torch.Tensor:
        return (self.action_probs * self.mu).sum(dim=-1)


@dataclass
class Attention:
    alpha: torch.Tensor  # (B, T, F) friend weights
    beta: torch.Tensor   # (B, T, K) temporal weights
    friend_mask: torch.Tensor


@dataclass
class ImportanceVectors:
    """Local explanation for one user, all rows simplex-normalized."""

    A: np.ndarray   # (K,)
    Tm: np.ndarray  # (T, K), columns sum to 1
    F: np.ndarray   # (T, n_friends), rows sum to 1 where friends exist
    friends: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "Tm": self.Tm.tolist(),
            "F": self.F.tolist(),
            "friends": list(self.friends),
        }


class TemporalAttention(nn.Module):
    """Per-action linear scorer over hidden states, softmax across time."""

    def __init__(self, k: int, hidden_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(k, hidden_dim))
        self.bias = nn.Parameter(torch.zeros(k))
        # each row is an independent scalar scorer over d_h inputs
        nn.init.uniform_(
            self.weight, -math.sqrt(6.0 / (hidden_dim + 1)), math.sqrt(6.0 / (hidden_dim + 1))
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """h: (B, T, K, H) -> weights (B, T, K) summing to 1 over T."""
        scores = torch.einsum("btkh,kh->btk", h, self.weight) + self.bias
        return torch.softmax(scores, dim=1)


def summarize_action(beta: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Attention-weighted summary per action: (B, T, K) x (B, T, K, H) -> (B, K, H)."""
    return torch.einsum("btk,btkh->bkh", beta, h)


class ActionAttention(nn.Module):
    """Shared scorer over per-action summaries, softmax across actions."""

    def __init__(self, hidden_dim: int, scorer_hidden: int):
        super().__init__()
        self.scorer = Mlp(2 * hidden_dim, scorer_hidden, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z: (B, K, 2H) per-action summary ⊕ last hidden -> probs (B, K)."""
        scores = self.scorer(z).squeeze(-1)
        return torch.softmax(scores, dim=-1)


class GaussianHead(nn.Module):
    """Per-action nets emitting the component mean and a positive spread."""

    def __init__(self, k: int, hidden_dim: int, head_hidden: int):
        super().__init__()
        self.net = PerCategoryMlp(k, 2 * hidden_dim, head_hidden, 2)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(z)
        mu = out[..., 0]
        sd = F.softplus(out[..., 1]) + SD_FLOOR
        return mu, sd


def mixture_log_density(e: torch.Tensor, out: MixtureOutput) -> torch.Tensor:
    """log sum_k p_k N(e; mu_k, sd_k^2), per sample."""
    return torch.logsumexp(component_log_density(e, out) + torch.log(out.action_probs), dim=-1)


def component_log_density(e: torch.Tensor, out: MixtureOutput) -> torch.Tensor:
    """Per-component Gaussian log density, (B, K)."""
    z = (e.unsqueeze(-1) - out.mu) / out.sd
    return -0.5 * z**2 - torch.log(out.sd) - 0.5 * math.log(2 * math.pi)


class EngagementModel(nn.Module):
    """Graph encoder per step -> block LSTM -> mixture attention output."""

    variant = "full"
    uses_mixture = True

    def __init__(self, schema: ActionSchema, config: ModelConfig | None = None):
        super().__init__()
        self.schema = schema
        self.config = config or ModelConfig()
        c = self.config
        self.encoder = GraphEncoder(
            schema.dims,
            c.d_prime,
            scorer_hidden=c.scorer_hidden,
            edge_dim=schema.edge_dim,
            use_edge_features=c.use_edge_features,
        )
        self.tlstm = Tlstm([2 * c.d_prime] * schema.K, c.d_hidden, layers=c.lstm_layers)
        self.temporal_attention = TemporalAttention(schema.K, c.d_hidden)
        self.action_attention = ActionAttention(c.d_hidden, c.scorer_hidden)
        self.gaussian_head = GaussianHead(schema.K, c.d_hidden, c.head_hidden)
        # label standardization fitted by the training loop; identity by default
        self.register_buffer("label_mean", torch.zeros(()))
        self.register_buffer("label_std", torch.ones(()))

    def forward(self, batch: Batch) -> tuple[MixtureOutput, Attention]:
        B, T = batch.size, batch.T
        g, alpha = self.encoder(
            batch.node_features.flatten(0, 1),
            batch.adjacency.flatten(0, 1),
            batch.edge_features.flatten(0, 1),
            batch.friend_mask.flatten(0, 1),
        )
        g = g.reshape(B, T, self.schema.K, -1)
        alpha = alpha.reshape(B, T, -1)
        h = self.tlstm(g)
        beta = self.temporal_attention(h)
        a = summarize_action(beta, h)
        z = torch.cat([a, h[:, -1]], dim=-1)
        probs = self.action_attention(z)
        mu, sd = self.gaussian_head(z)
        out = MixtureOutput(action_probs=probs, mu=mu, sd=sd)
        return out, Attention(alpha=alpha, beta=beta, friend_mask=batch.friend_mask)

    @torch.no_grad()
    def predict_batch(self, batch: Batch) -> torch.Tensor:
        out, _ = self(batch)
        return out.point_estimate * self.label_std + self.label_mean


def local_importance(out: MixtureOutput, attn: Attention, samples: Sequence[TemporalSample]) -> list[ImportanceVectors]:
    """Read the three attentions back out as per-user explanation vectors."""
    probs = out.action_probs.detach().cpu().numpy()
    beta = attn.beta.detach().cpu().numpy()
    alpha = attn.alpha.detach().cpu().numpy()
    result = []
    for i, s in enumerate(samples):
        nf = max((len(g.friends) for g in s.graphs), default=0)
        result.append(
            ImportanceVectors(
                A=probs[i],
                Tm=beta[i],
                F=alpha[i, :, :nf],
                friends=list(s.graphs[0].friends) if s.graphs else [],
            )
        )
    return result
