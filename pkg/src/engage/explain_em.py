"""Posterior responsibilities, the EM training objective, and closed-form
global importance updates."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .head import MixtureOutput, component_log_density

A_STAR_FLOOR = 1e-8


@dataclass
class GlobalImportance:
    """Dataset-level action and temporal importance maintained by EM."""

    A_star: np.ndarray  # (K,)
    T_star: np.ndarray  # (T, K), columns sum to 1
    epoch: int = 0

    def to_dict(self) -> dict:
        return {"A_star": self.A_star.tolist(), "T_star": self.T_star.tolist(), "epoch": self.epoch}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "GlobalImportance":
        with open(path) as f:
            d = json.load(f)
        return cls(A_star=np.array(d["A_star"]), T_star=np.array(d["T_star"]), epoch=int(d["epoch"]))

    @classmethod
    def uniform(cls, K: int, T: int) -> "GlobalImportance":
        return cls(A_star=np.full(K, 1.0 / K), T_star=np.full((T, K), 1.0 / T))


def posterior_q(e_obs: torch.Tensor, out: MixtureOutput) -> torch.Tensor:
    """Responsibility of each mixture component for the observed label.

    q_k ∝ N(e; mu_k, sd_k^2) * p_k, computed in log space; if every component
    underflows to zero density the prior is returned unchanged.
    """
    log_joint = component_log_density(e_obs, out) + torch.log(out.action_probs)
    q = torch.softmax(log_joint, dim=-1)
    bad = ~torch.isfinite(q).all(dim=-1, keepdim=True)
    return torch.where(bad, out.action_probs, q)


def em_loss(
    e_obs: torch.Tensor,
    out: MixtureOutput,
    q: torch.Tensor,
    a_star: torch.Tensor,
) -> torch.Tensor:
    """Expected complete-data NLL plus the global-importance cross-entropy term.

    ``q`` and ``a_star`` are treated as constants; gradients only flow to the
    network outputs.
    """
    q = q.detach()
    a_star = a_star.detach().clamp_min(A_STAR_FLOOR)
    log_n = component_log_density(e_obs, out)
    log_prior = torch.log(out.action_probs)
    per_sample = -(q * log_n).sum(-1) - (q * log_prior).sum(-1) - (q * torch.log(a_star)).sum(-1)
    return per_sample.mean()


def update_global_action(posteriors: np.ndarray) -> np.ndarray:
    """Closed-form refresh: the mean responsibility over the sample set."""
    posteriors = np.asarray(posteriors)
    if posteriors.size == 0:
        raise ValueError("empty sample set")
    return posteriors.mean(axis=0)


def update_global_temporal(betas: np.ndarray) -> np.ndarray:
    """Closed-form refresh of temporal importance: mean attention per (t, k)."""
    betas = np.asarray(betas)
    if betas.size == 0:
        raise ValueError("empty sample set")
    return betas.mean(axis=0)


def extract_local(model, samples, schema, dtype=torch.float32):
    """Local explanations at zero extra cost: one forward pass per batch."""
    from .head import collate, local_importance

    batch = collate(samples, schema, dtype=dtype)
    with torch.no_grad():
        out, attn = model(batch)
    return local_importance(out, attn, samples)
