"""Analytic parameter/FLOP counts for the block-diagonal layers and an
empirical tensor-vs-dense wall-clock comparison."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .blocks import VanillaLstmCell
from .friendship import TgcnLayer
from .temporal import TlstmCell


def gcn_param_counts(K: int, d_in: int, d_out: int) -> dict:
    """Dense layer vs K equal blocks; widths must divide evenly by K."""
    if d_in % K or d_out % K:
        raise ValueError(f"K={K} must divide d_in={d_in} and d_out={d_out}")
    vanilla = d_in * d_out
    tensor = d_in * d_out // K
    return {"vanilla": vanilla, "tensor": tensor, "reduction": vanilla - tensor}


def lstm_param_counts(K: int, d_in: int, d_out: int) -> dict:
    if d_in % K or d_out % K:
        raise ValueError(f"K={K} must divide d_in={d_in} and d_out={d_out}")
    vanilla = 4 * (d_in * d_out + d_out**2 + d_out)
    tensor = 4 * (d_in * d_out // K + d_out**2 // K + d_out)
    return {"vanilla": vanilla, "tensor": tensor, "reduction": vanilla - tensor}


def count_module_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def enumerate_gcn_params(K: int, d_in: int, d_out: int) -> dict:
    """Counts taken from actual parameter tensors, for cross-checking the formulas."""
    tensor_layer = TgcnLayer([d_in // K] * K, d_out // K)
    vanilla_layer = nn.Linear(d_in, d_out, bias=False)
    return {
        "vanilla": count_module_params(vanilla_layer),
        "tensor": count_module_params(tensor_layer),
    }


def enumerate_lstm_params(K: int, d_in: int, d_out: int) -> dict:
    tensor_cell = TlstmCell([d_in // K] * K, d_out // K)
    vanilla_cell = VanillaLstmCell(d_in, d_out)
    return {
        "vanilla": count_module_params(vanilla_cell),
        "tensor": count_module_params(tensor_cell),
    }


def tgcn_param_count(in_dims, out_per_block: int) -> int:
    """Exact count for unequal per-category widths: sum of d_k * d'."""
    return sum(int(d) * int(out_per_block) for d in in_dims)


def gcn_flops(K: int, d_in: int, d_out: int, n_nodes: int) -> dict:
    vanilla = n_nodes**2 * d_in + n_nodes * d_in * d_out
    tensor = n_nodes**2 * d_in + n_nodes * d_in * d_out // K
    return {"vanilla": vanilla, "tensor": tensor, "reduction": vanilla - tensor}


def lstm_flops(K: int, d_in: int, d_out: int) -> dict:
    vanilla = 4 * (d_in * d_out + d_out**2) + 3 * d_out
    tensor = 4 * (d_in * d_out // K + d_out**2 // K) + 3 * d_out
    return {"vanilla": vanilla, "tensor": tensor, "reduction": vanilla - tensor}


@dataclass
class TimingConfig:
    K: int = 13
    d_prime: int = 32
    batch: int = 256
    n_nodes: int = 21
    T: int = 14
    repetitions: int = 30
    warmup: int = 5
    seed: int = 0
    single_thread: bool = True
    min_median_s: float = 1e-3  # below this, batch doubles to beat timer noise


@dataclass
class ComplexityReport:
    config: TimingConfig
    params: dict
    flops: dict
    timing: dict
    environment: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config.__dict__,
            "params": self.params,
            "flops": self.flops,
            "timing": self.timing,
            "environment": self.environment,
        }

    def table(self) -> str:
        lines = [
            f"{'quantity':<34}{'vanilla':>14}{'tensor':>14}{'reduction':>14}",
            "-" * 76,
        ]
        for label, d in (
            ("gcn layer params", self.params["gcn"]),
            ("lstm layer params", self.params["lstm"]),
            ("gcn layer multiplications", self.flops["gcn"]),
            ("lstm step multiplications", self.flops["lstm"]),
        ):
            lines.append(f"{label:<34}{d['vanilla']:>14}{d['tensor']:>14}{d['reduction']:>14}")
        t = self.timing
        lines.append("-" * 76)
        lines.append(
            f"median fwd+bwd per batch: vanilla {t['vanilla_median_s']:.4f}s, "
            f"tensor {t['tensor_median_s']:.4f}s, speedup {t['speedup']:.3f}x"
        )
        return "\n".join(lines)


class _TensorStack(nn.Module):
    """Two block GCN layers plus an unrolled block LSTM."""

    def __init__(self, K: int, d_prime: int):
        super().__init__()
        self.gcn1 = TgcnLayer([1] * K, d_prime)
        self.gcn2 = TgcnLayer([d_prime] * K, d_prime)
        self.cell = TlstmCell([2 * d_prime] * K, d_prime)
        self.K = K
        self.d_prime = d_prime

    def forward(self, x, adj, seq):
        h1 = self.gcn1(x, adj)
        h2 = self.gcn2(h1.flatten(start_dim=-2), adj)
        B = seq.shape[0]
        h = seq.new_zeros(B, self.K, self.d_prime)
        c = seq.new_zeros(B, self.K, self.d_prime)
        for t in range(seq.shape[1]):
            h, c = self.cell(seq[:, t], h, c)
        return h2.sum() + h.sum()


class _VanillaStack(nn.Module):
    """Dense wiring at the same total widths as the tensor stack."""

    def __init__(self, K: int, d_prime: int):
        super().__init__()
        d_out = K * d_prime
        self.gcn1 = nn.Linear(K, d_out, bias=False)
        self.gcn2 = nn.Linear(d_out, d_out, bias=False)
        self.cell = VanillaLstmCell(2 * d_out, d_out)
        self.d_out = d_out

    def forward(self, x, adj, seq):
        act = torch.nn.functional.elu
        h1 = act(self.gcn1(adj @ x))
        h2 = act(self.gcn2(adj @ h1))
        B = seq.shape[0]
        h = seq.new_zeros(B, self.d_out)
        c = seq.new_zeros(B, self.d_out)
        for t in range(seq.shape[1]):
            h, c = self.cell(seq[:, t], h, c)
        return h2.sum() + h.sum()


def _time_once(fn) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def _run_timing(model, inputs, repetitions: int, warmup: int) -> list[float]:
    def step():
        model.zero_grad(set_to_none=True)
        loss = model(*inputs)
        loss.backward()

    for _ in range(warmup):
        step()
    return [_time_once(step) for _ in range(repetitions)]


def time_layers(config: TimingConfig | None = None) -> ComplexityReport:
    """Median forward+backward wall time of tensor vs dense wiring."""
    config = config or TimingConfig()
    if config.repetitions < 30:
        raise ValueError("need at least 30 repetitions")
    old_threads = torch.get_num_threads()
    if config.single_thread:
        torch.set_num_threads(1)
    try:
        torch.manual_seed(config.seed)
        K, dp = config.K, config.d_prime
        d_out = K * dp
        tensor_model = _TensorStack(K, dp)
        vanilla_model = _VanillaStack(K, dp)

        batch = config.batch
        adjusted = False
        while True:
            x = torch.randn(batch, config.n_nodes, K)
            adj = torch.rand(batch, config.n_nodes, config.n_nodes)
            adj = (adj + adj.transpose(-1, -2)) / (2 * config.n_nodes)
            seq_t = torch.randn(batch, config.T, K, 2 * dp)
            seq_v = torch.randn(batch, config.T, 2 * d_out)

            tensor_times = _run_timing(tensor_model, (x, adj, seq_t), config.repetitions, config.warmup)
            vanilla_times = _run_timing(vanilla_model, (x, adj, seq_v), config.repetitions, config.warmup)
            if min(statistics.median(tensor_times), statistics.median(vanilla_times)) >= config.min_median_s:
                break
            batch *= 2
            adjusted = True

        t_med = statistics.median(tensor_times)
        v_med = statistics.median(vanilla_times)
        timing = {
            "tensor_median_s": t_med,
            "vanilla_median_s": v_med,
            "speedup": v_med / t_med,
            "tensor_iqr_s": float(np.subtract(*np.percentile(tensor_times, [75, 25]))),
            "vanilla_iqr_s": float(np.subtract(*np.percentile(vanilla_times, [75, 25]))),
            "repetitions": config.repetitions,
            "batch_used": batch,
            "batch_adjusted": adjusted,
        }
    finally:
        torch.set_num_threads(old_threads)

    params = {
        "gcn": {**gcn_param_counts(K, d_out, d_out), "enumerated": enumerate_gcn_params(K, d_out, d_out)},
        "lstm": {**lstm_param_counts(K, 2 * d_out, d_out), "enumerated": enumerate_lstm_params(K, 2 * d_out, d_out)},
    }
    flops = {
        "gcn": gcn_flops(K, d_out, d_out, config.n_nodes),
        "lstm": lstm_flops(K, 2 * d_out, d_out),
    }
    environment = {
        "platform": platform.platform(),
        "processor": platform.processor(),
        "torch": torch.__version__,
        "threads": 1 if config.single_thread else old_threads,
    }
    return ComplexityReport(config=config, params=params, flops=flops, timing=timing, environment=environment)
