"""Block-diagonal LSTM over the sequence of graph embeddings.

Each action category owns an exclusive slice of every gate, so the cell is
equivalent to K parallel vanilla LSTMs.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .blocks import BlockLinear

GATES = ("f", "i", "o", "c")


class TlstmCell(nn.Module):
    """One recurrent step with per-category gate blocks."""

    def __init__(self, in_dims: Sequence[int], hidden_dim: int):
        super().__init__()
        self.in_dims = tuple(in_dims)
        self.hidden_dim = hidden_dim
        self.K = len(self.in_dims)
        for g in GATES:
            setattr(self, f"u_{g}", BlockLinear(self.in_dims, hidden_dim))
            setattr(self, f"uh_{g}", BlockLinear([hidden_dim] * self.K, hidden_dim))
            setattr(self, f"b_{g}", nn.Parameter(torch.zeros(self.K, hidden_dim)))

    def _gate(self, name: str, x_flat: torch.Tensor, h_flat: torch.Tensor) -> torch.Tensor:
        u = getattr(self, f"u_{name}")
        uh = getattr(self, f"uh_{name}")
        b = getattr(self, f"b_{name}")
        return u(x_flat) + uh(h_flat) + b

    def forward(
        self, x: torch.Tensor, h: torch.Tensor, c: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """x: blocked (..., K, in_per_block) or flat (..., sum(in_dims)); h, c: (..., K, hidden)."""
        total = sum(self.in_dims)
        if x.ndim >= 2 and x.shape[-2] == self.K and x.shape[-1] == self.in_dims[0] and len(set(self.in_dims)) == 1:
            x_flat = x.flatten(start_dim=-2)
        elif x.shape[-1] == total:
            x_flat = x
        else:
            raise ValueError(
                f"cell expects input blocks ({self.K}, {self.in_dims[0]}) or flat width {total}, "
                f"got trailing shape {tuple(x.shape[-2:])}"
            )
        if h.shape[-1] != self.hidden_dim or h.shape[-2] != self.K:
            raise ValueError(f"hidden state must be (..., {self.K}, {self.hidden_dim})")
        h_flat = h.flatten(start_dim=-2)
        f = torch.sigmoid(self._gate("f", x_flat, h_flat))
        i = torch.sigmoid(self._gate("i", x_flat, h_flat))
        o = torch.sigmoid(self._gate("o", x_flat, h_flat))
        c_new = f * c + i * torch.tanh(self._gate("c", x_flat, h_flat))
        h_new = o * torch.tanh(c_new)
        return h_new, c_new


class Tlstm(nn.Module):
    """Stacked block LSTM; the second layer consumes first-layer hidden states."""

    def __init__(self, in_dims: Sequence[int], hidden_dim: int, layers: int = 2):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one layer")
        dims = tuple(in_dims)
        cells = []
        for _ in range(layers):
            cells.append(TlstmCell(dims, hidden_dim))
            dims = (hidden_dim,) * len(in_dims)
        self.cells = nn.ModuleList(cells)
        self.hidden_dim = hidden_dim
        self.K = len(in_dims)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """seq: (B, T, K, in_per_block) or (B, T, sum_in) -> hidden states (B, T, K, hidden)."""
        if seq.shape[1] < 1:
            raise ValueError("empty sequence")
        batch = seq.shape[0]
        states = [
            (
                seq.new_zeros(batch, self.K, self.hidden_dim),
                seq.new_zeros(batch, self.K, self.hidden_dim),
            )
            for _ in self.cells
        ]
        outputs = []
        for t in range(seq.shape[1]):
            x = seq[:, t]
            for layer, cell in enumerate(self.cells):
                h, c = cell(x, *states[layer])
                states[layer] = (h, c)
                x = h
            outputs.append(x)
        return torch.stack(outputs, dim=1)
