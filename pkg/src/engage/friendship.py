"""Per-time-step graph encoder: two block-diagonal GCN layers, friendship
attention over neighbors, and the per-category graph embedding."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BlockLinear, Mlp

NEG_INF = -1e30


class TgcnLayer(nn.Module):
    """One graph convolution whose weight is block-diagonal across categories.

    Equivalent to running one vanilla GCN layer per category on that category's
    feature columns.
    """

    def __init__(self, in_dims: Sequence[int], out_dim: int):
        super().__init__()
        self.block = BlockLinear(in_dims, out_dim)

    def forward(self, x: torch.Tensor, adj: torch.Tensor, activation=F.elu) -> torch.Tensor:
        """x: (..., N, D_in) flat features; adj: (..., N, N). Returns (..., N, K, out)."""
        if adj.shape[-1] != adj.shape[-2] or adj.shape[-1] != x.shape[-2]:
            raise ValueError(f"adjacency {tuple(adj.shape)} does not match features {tuple(x.shape)}")
        agg = adj @ x
        out = self.block(agg)
        return activation(out) if activation is not None else out


class GraphEncoder(nn.Module):
    """Two stacked block GCN layers plus attention-weighted neighbor pooling."""

    def __init__(
        self,
        in_dims: Sequence[int],
        out_dim: int,
        scorer_hidden: int = 32,
        edge_dim: int = 3,
        use_edge_features: bool = True,
    ):
        super().__init__()
        self.K = len(in_dims)
        self.out_dim = out_dim
        self.use_edge_features = use_edge_features
        self.layer1 = TgcnLayer(in_dims, out_dim)
        self.layer2 = TgcnLayer([out_dim] * self.K, out_dim)
        scorer_in = self.K * out_dim + (edge_dim if use_edge_features else 0)
        self.scorer = Mlp(scorer_in, scorer_hidden, 1)

    def node_embeddings(self, node_features: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """(..., N, D) -> (..., N, K, out) through both conv layers."""
        h1 = self.layer1(node_features, adj)
        return self.layer2(h1.flatten(start_dim=-2), adj)

    def attention(
        self,
        embeddings: torch.Tensor,
        edge_features: torch.Tensor,
        friend_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Softmax weights over each graph's friends; all-zero row when no friends."""
        friend_emb = embeddings[..., 1:, :, :].flatten(start_dim=-2)
        if self.use_edge_features:
            scorer_in = torch.cat([friend_emb, edge_features], dim=-1)
        else:
            scorer_in = friend_emb
        scores = self.scorer(scorer_in).squeeze(-1)
        scores = torch.where(friend_mask, scores, torch.full_like(scores, NEG_INF))
        alpha = torch.softmax(scores, dim=-1)
        # graphs with zero friends: softmax over all-masked row is uniform garbage
        alpha = torch.where(friend_mask, alpha, torch.zeros_like(alpha))
        return alpha

    def forward(
        self,
        node_features: torch.Tensor,
        adj: torch.Tensor,
        edge_features: torch.Tensor,
        friend_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the graph embedding (..., K, 2*out) and friend weights (..., F)."""
        emb = self.node_embeddings(node_features, adj)
        alpha = self.attention(emb, edge_features, friend_mask)
        neighbor = torch.einsum("...f,...fkd->...kd", alpha, emb[..., 1:, :, :])
        ego = emb[..., 0, :, :]
        return torch.cat([ego, neighbor], dim=-1), alpha


def graph_embedding(embeddings: torch.Tensor, alpha: torch.Tensor, ego_index: int = 0) -> torch.Tensor:
    """Standalone form of the ego ⊕ attention-pooled-neighbors concatenation.

    ``embeddings``: (N, K, d); ``alpha``: (N-1,) weights over the non-ego rows.
    """
    friends = torch.cat([embeddings[:ego_index], embeddings[ego_index + 1 :]], dim=0)
    if alpha.numel() == 0:
        pooled = torch.zeros_like(embeddings[ego_index])
    else:
        pooled = torch.einsum("f,fkd->kd", alpha, friends)
    return torch.cat([embeddings[ego_index], pooled], dim=-1)
