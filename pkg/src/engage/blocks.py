"""Per-category (block-diagonal) linear maps shared by the graph and recurrent layers."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn


class BlockLinear(nn.Module):
    """K independent linear maps, one per feature category, with no bias.

    Input is the flat concatenation of the per-category blocks, shape
    ``(..., sum(in_dims))``; output stacks the per-category results as
    ``(..., K, out_dim)``. No cross-category parameters exist.
    """

    def __init__(self, in_dims: Sequence[int], out_dim: int):
        super().__init__()
        self.in_dims = tuple(int(d) for d in in_dims)
        self.out_dim = int(out_dim)
        self.uniform = len(set(self.in_dims)) == 1
        k = len(self.in_dims)
        if self.uniform:
            self.weight = nn.Parameter(torch.empty(k, self.in_dims[0], out_dim))
            # initialize each block as its own linear map; a whole-tensor init
            # would shrink every block by roughly sqrt(K)
            for block in self.weight:
                nn.init.xavier_uniform_(block)
        else:
            self.weights = nn.ParameterList()
            for d in self.in_dims:
                w = nn.Parameter(torch.empty(d, out_dim))
                nn.init.xavier_uniform_(w)
                self.weights.append(w)

    @property
    def K(self) -> int:
        return len(self.in_dims)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != sum(self.in_dims):
            raise ValueError(f"expected last dim {sum(self.in_dims)}, got {x.shape[-1]}")
        if self.uniform:
            blocks = x.reshape(*x.shape[:-1], self.K, self.in_dims[0])
            return torch.einsum("...kd,kde->...ke", blocks, self.weight)
        outs = []
        start = 0
        for d, w in zip(self.in_dims, self.weights):
            outs.append(x[..., start : start + d] @ w)
            start += d
        return torch.stack(outs, dim=-2)


class Mlp(nn.Module):
    """One-hidden-layer perceptron with ELU, used by the attention scorers and heads."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.elu(self.fc1(x)))


class PerCategoryMlp(nn.Module):
    """K separate one-hidden-layer nets evaluated in a single batched pass."""

    def __init__(self, k: int, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(k, in_dim, hidden))
        self.b1 = nn.Parameter(torch.zeros(k, hidden))
        self.w2 = nn.Parameter(torch.empty(k, hidden, out_dim))
        self.b2 = nn.Parameter(torch.zeros(k, out_dim))
        for w in (self.w1, self.w2):
            for block in w:
                nn.init.xavier_uniform_(block)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (..., K, in_dim) -> (..., K, out_dim)
        h = torch.nn.functional.elu(torch.einsum("...kd,kdh->...kh", x, self.w1) + self.b1)
        return torch.einsum("...kh,kho->...ko", h, self.w2) + self.b2


class VanillaLstmCell(nn.Module):
    """Dense reference cell with one bias vector per gate.

    Parameter count is exactly 4*(d_in*d_h + d_h^2 + d_h), matching the count
    used by the complexity analysis (unlike ``nn.LSTMCell``, which carries two
    bias vectors per gate).
    """

    def __init__(self, in_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w = nn.Parameter(torch.empty(in_dim, 4 * hidden_dim))
        self.u = nn.Parameter(torch.empty(hidden_dim, 4 * hidden_dim))
        self.b = nn.Parameter(torch.zeros(4 * hidden_dim))
        nn.init.xavier_uniform_(self.w)
        nn.init.xavier_uniform_(self.u)

    def forward(self, x, h, c):
        gates = x @ self.w + h @ self.u + self.b
        f, i, o, g = gates.chunk(4, dim=-1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, c_new
