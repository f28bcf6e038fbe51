"""Alternating EM + gradient training loop, evaluation metrics, ablation variants,
and checkpoint I/O."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .domain import ActionSchema, TemporalSample, ValidationError
from .explain_em import GlobalImportance, em_loss, posterior_q, update_global_action, update_global_temporal
from .friendship import GraphEncoder
from .head import Batch, EngagementModel, ModelConfig, collate
from .temporal import Tlstm

VARIANTS = ("full", "ts", "fnd", "tmp", "int")


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 10
    learning_rate: float = 0.001
    validation_fraction: float = 0.10
    patience: int = 2
    seed: int = 0
    variant: str = "full"
    grad_clip: float = 5.0
    dtype: str = "float32"

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValidationError("validation_fraction must be in (0, 1)")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class EvalReport:
    rmse: float
    mape: float | None
    mae: float
    mape_excluded: int
    n: int

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mape": self.mape,
            "mae": self.mae,
            "mape_excluded": self.mape_excluded,
            "n": self.n,
        }


@dataclass
class TrainResult:
    model: nn.Module
    global_importance: GlobalImportance | None
    history: list[dict]
    best_epoch: int
    config: TrainConfig


class RawSequenceModel(nn.Module):
    """Ablation without the graph encoder: block LSTM over raw ego features."""

    variant = "fnd"
    uses_mixture = True

    def __init__(self, schema: ActionSchema, config: ModelConfig | None = None):
        super().__init__()
        from .head import ActionAttention, GaussianHead, TemporalAttention

        self.schema = schema
        self.config = config or ModelConfig()
        c = self.config
        self.tlstm = Tlstm(schema.dims, c.d_hidden, layers=c.lstm_layers)
        self.temporal_attention = TemporalAttention(schema.K, c.d_hidden)
        self.action_attention = ActionAttention(c.d_hidden, c.scorer_hidden)
        self.gaussian_head = GaussianHead(schema.K, c.d_hidden, c.head_hidden)
        self.register_buffer("label_mean", torch.zeros(()))
        self.register_buffer("label_std", torch.ones(()))

    def forward(self, batch: Batch):
        from .head import Attention, MixtureOutput, summarize_action

        ego = batch.node_features[:, :, 0, :]  # (B, T, D)
        h = self.tlstm(ego)
        beta = self.temporal_attention(h)
        a = summarize_action(beta, h)
        z = torch.cat([a, h[:, -1]], dim=-1)
        probs = self.action_attention(z)
        mu, sd = self.gaussian_head(z)
        out = MixtureOutput(action_probs=probs, mu=mu, sd=sd)
        alpha = torch.zeros_like(batch.friend_mask, dtype=h.dtype)
        return out, Attention(alpha=alpha, beta=beta, friend_mask=batch.friend_mask)

    @torch.no_grad()
    def predict_batch(self, batch: Batch) -> torch.Tensor:
        out, _ = self(batch)
        return out.point_estimate * self.label_std + self.label_mean


class ConcatReadoutModel(nn.Module):
    """Ablation without the temporal module: concatenated per-step graph
    embeddings feed an affine readout."""

    variant = "tmp"
    uses_mixture = False

    def __init__(self, schema: ActionSchema, T: int, config: ModelConfig | None = None):
        super().__init__()
        self.schema = schema
        self.config = config or ModelConfig()
        self.T = T
        c = self.config
        self.encoder = GraphEncoder(
            schema.dims,
            c.d_prime,
            scorer_hidden=c.scorer_hidden,
            edge_dim=schema.edge_dim,
            use_edge_features=c.use_edge_features,
        )
        self.readout = nn.Linear(T * schema.K * 2 * c.d_prime, 1)
        self.register_buffer("label_mean", torch.zeros(()))
        self.register_buffer("label_std", torch.ones(()))

    def forward(self, batch: Batch) -> torch.Tensor:
        if batch.T != self.T:
            raise ValidationError(f"model built for T={self.T}, batch has T={batch.T}")
        B, T = batch.size, batch.T
        g, _ = self.encoder(
            batch.node_features.flatten(0, 1),
            batch.adjacency.flatten(0, 1),
            batch.edge_features.flatten(0, 1),
            batch.friend_mask.flatten(0, 1),
        )
        return self.readout(g.reshape(B, -1)).squeeze(-1)

    @torch.no_grad()
    def predict_batch(self, batch: Batch) -> torch.Tensor:
        return self(batch) * self.label_std + self.label_mean


def collapse_schema(schema: ActionSchema) -> ActionSchema:
    """Single-category view of a schema; removes all per-category blocking."""
    return ActionSchema(names=("all",), dims=(schema.D,), edge_dim=schema.edge_dim)


def build_model(
    variant: str,
    schema: ActionSchema,
    model_config: ModelConfig | None = None,
    T: int | None = None,
) -> nn.Module:
    """Wire the requested ablation. ``T`` is required for the tmp variant."""
    config = model_config or ModelConfig()
    if variant == "full":
        return EngagementModel(schema, config)
    if variant == "int":
        cfg = dataclasses.replace(config, use_edge_features=False)
        m = EngagementModel(schema, cfg)
        m.variant = "int"
        return m
    if variant == "ts":
        m = EngagementModel(collapse_schema(schema), config)
        m.variant = "ts"
        return m
    if variant == "fnd":
        return RawSequenceModel(schema, config)
    if variant == "tmp":
        if T is None:
            raise ValidationError("tmp variant needs the sequence length T")
        return ConcatReadoutModel(schema, T, config)
    raise ValidationError(f"unknown variant {variant!r}")


def _batched_indices(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def predict(model: nn.Module, batch: Batch) -> torch.Tensor:
    return model.predict_batch(batch)


def compute_metrics(preds: np.ndarray, truths: np.ndarray, zero_tol: float = 1e-6) -> EvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.size == 0:
        raise ValidationError("empty evaluation set")
    err = preds - truths
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    keep = np.abs(truths) >= zero_tol
    excluded = int((~keep).sum())
    mape = float(np.mean(np.abs(err[keep] / truths[keep]))) if keep.any() else None
    return EvalReport(rmse=rmse, mape=mape, mae=mae, mape_excluded=excluded, n=preds.size)


def evaluate(
    model: nn.Module,
    samples: Sequence[TemporalSample],
    schema: ActionSchema,
    batch_size: int = 512,
    dtype=torch.float32,
) -> EvalReport:
    if not samples:
        raise ValidationError("empty evaluation set")
    batch = collate(samples, schema, dtype=dtype)
    preds = []
    for idx in _batched_indices(np.arange(batch.size), batch_size):
        preds.append(predict(model, batch.select(torch.as_tensor(idx))).cpu().numpy())
    preds = np.concatenate(preds)
    truths = batch.labels.cpu().numpy()
    return compute_metrics(preds, truths)


def train(
    samples: Sequence[TemporalSample],
    schema: ActionSchema,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """EM-alternating gradient descent with per-epoch global-importance refresh
    and early stopping on validation RMSE."""
    if not samples:
        raise ValidationError("empty training set")
    dtype = config.torch_dtype
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    n = len(samples)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if train_idx.size == 0:
        raise ValidationError("validation split leaves no training samples")

    full_batch = collate(samples, schema, dtype=dtype)
    T = full_batch.T
    K = schema.K

    model = build_model(config.variant, schema, model_config, T=T).to(dtype)
    train_labels = full_batch.labels[torch.as_tensor(train_idx)]
    with torch.no_grad():
        model.label_mean.fill_(float(train_labels.mean()))
        model.label_std.fill_(max(float(train_labels.std()), 1e-8))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    uses_mixture = getattr(model, "uses_mixture", False)
    model_k = model.schema.K if hasattr(model, "schema") else K
    a_star = np.full(model_k, 1.0 / model_k)
    q_store = np.full((train_idx.size, model_k), 1.0 / model_k)
    beta_store = np.full((train_idx.size, T, model_k), 1.0 / T)
    pos_of = {int(s): i for i, s in enumerate(train_idx)}

    history: list[dict] = []
    best_rmse = np.inf
    best_state = copy.deepcopy(model.state_dict())
    best_gi: GlobalImportance | None = None
    best_epoch = -1
    bad_epochs = 0
    gi: GlobalImportance | None = None

    for epoch in range(config.max_epochs):
        model.train()
        order = rng.permutation(train_idx)
        epoch_loss, n_batches = 0.0, 0
        a_star_t = torch.as_tensor(a_star, dtype=dtype)
        for idx in _batched_indices(order, config.batch_size):
            batch = full_batch.select(torch.as_tensor(idx))
            labels_n = (batch.labels - model.label_mean) / model.label_std
            optimizer.zero_grad()
            if uses_mixture:
                out, attn = model(batch)
                with torch.no_grad():
                    q = posterior_q(labels_n, out)
                loss = em_loss(labels_n, out, q, a_star_t)
                rows = [pos_of[int(i)] for i in idx]
                q_store[rows] = q.detach().cpu().numpy()
                beta_store[rows] = attn.beta.detach().cpu().numpy()
            else:
                pred = model(batch)
                loss = torch.mean((pred - labels_n) ** 2)
            if not torch.isfinite(loss):
                norms = {name: float(p.norm()) for name, p in model.named_parameters()}
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch of {len(idx)} samples; "
                    f"parameter norms: {norms}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1

        if uses_mixture:
            a_star = update_global_action(q_store)
            t_star = update_global_temporal(beta_store)
            gi = GlobalImportance(A_star=a_star.copy(), T_star=t_star, epoch=epoch)

        model.eval()
        val_batch = full_batch.select(torch.as_tensor(val_idx))
        val_pred = predict(model, val_batch).cpu().numpy()
        val_rmse = float(np.sqrt(np.mean((val_pred - val_batch.labels.cpu().numpy()) ** 2)))
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / max(1, n_batches), "val_rmse": val_rmse}
        )

        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best_state = copy.deepcopy(model.state_dict())
            best_gi = copy.deepcopy(gi)
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        global_importance=best_gi,
        history=history,
        best_epoch=best_epoch,
        config=config,
    )


def constant_baseline_rmse(train_labels: Sequence[float], test_labels: Sequence[float]) -> float:
    """RMSE of always predicting the training-split mean label."""
    mean = float(np.mean(train_labels))
    t = np.asarray(test_labels, dtype=np.float64)
    return float(np.sqrt(np.mean((t - mean) ** 2)))


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_rmse"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Checkpoint: one file holding a JSON manifest line plus an fp32 LE payload.
# ---------------------------------------------------------------------------


def save_checkpoint(model: nn.Module, path, meta: dict | None = None) -> None:
    state = model.state_dict()
    tensors, chunks = [], []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += len(chunks[-1])
    header = {"format": "engage-checkpoint-v1", "tensors": tensors, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for chunk in chunks:
            f.write(chunk)


def load_checkpoint(path, model: nn.Module) -> dict:
    """Load weights into ``model``; raises with a shape diff list on mismatch."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        payload = f.read()
    state = model.state_dict()
    entries = {e["name"]: e for e in header["tensors"]}
    diffs = []
    for name, tensor in state.items():
        if name not in entries:
            diffs.append(f"missing tensor {name}")
            continue
        if list(tensor.shape) != entries[name]["shape"]:
            diffs.append(f"{name}: checkpoint {entries[name]['shape']} vs model {list(tensor.shape)}")
    for name in entries:
        if name not in state:
            diffs.append(f"unexpected tensor {name}")
    if diffs:
        raise ValidationError("incompatible checkpoint: " + "; ".join(diffs))
    new_state = {}
    for name, tensor in state.items():
        e = entries[name]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        new_state[name] = torch.as_tensor(arr.copy()).to(tensor.dtype)
    model.load_state_dict(new_state)
    return header.get("meta", {})
