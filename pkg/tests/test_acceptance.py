"""End-to-end acceptance criteria for the engagement-prediction pipeline.

Each test exercises one numbered criterion at its stated tolerance and prints
exactly one ``[PASS]``/``[FAIL]`` line to the terminal, then asserts, so a
failing criterion is reported honestly instead of being silently skipped.

Criteria 5-7 share one 10-seed synthetic-recovery run (module-scoped fixture):
per seed, a dominant-action dataset trains the full model, and a recency
dataset trains the full model plus the no-temporal-module ablation.
"""

import time

import numpy as np
import pytest
import torch

from engage.bench import (
    TimingConfig,
    enumerate_gcn_params,
    enumerate_lstm_params,
    gcn_param_counts,
    lstm_param_counts,
    time_layers,
)
from engage.blocks import VanillaLstmCell
from engage.domain import (
    ActionSchema,
    TemporalSample,
    UserGraph,
    apply_preprocessing,
    fit_and_apply_preprocessing,
    normalize_adjacency,
)
from engage.explain_em import em_loss, posterior_q, update_global_action, update_global_temporal
from engage.friendship import TgcnLayer
from engage.head import Batch, EngagementModel, ModelConfig, collate
from engage.synthdata import GeneratorConfig, default_personas, generate
from engage.temporal import TlstmCell
from engage.train_eval import TrainConfig, constant_baseline_rmse, evaluate, train

N_SEEDS = 10


def _report(capsys, num: int, name: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    line = f"[{tag}] criterion {num}: {name}"
    if detail:
        line += f" ({detail})"
    with capsys.disabled():
        print(line)


def _block_weight(block_linear, k: int) -> torch.Tensor:
    if block_linear.uniform:
        return block_linear.weight[k]
    return block_linear.weights[k]


# ---------------------------------------------------------------------------
# Criterion 1: exact parameter counts and closed-form reductions
# ---------------------------------------------------------------------------


def test_criterion_1_parameter_counts(capsys):
    start = time.perf_counter()
    ok = True
    for K in (1, 2, 13):
        for d_factor in (4, 32):
            d = K * d_factor
            gcn = gcn_param_counts(K, d, d)
            gcn_enum = enumerate_gcn_params(K, d, d)
            lstm = lstm_param_counts(K, 2 * d, d)
            lstm_enum = enumerate_lstm_params(K, 2 * d, d)
            ok &= gcn_enum["vanilla"] == gcn["vanilla"]
            ok &= gcn_enum["tensor"] == gcn["tensor"]
            ok &= lstm_enum["vanilla"] == lstm["vanilla"]
            ok &= lstm_enum["tensor"] == lstm["tensor"]
            # closed-form reductions, zero tolerance (both are exact integers)
            ok &= gcn["reduction"] == round((1 - 1 / K) * d * d)
            ok &= lstm["reduction"] == round(4 * (1 - 1 / K) * (2 * d + d) * d)
            ok &= gcn_enum["vanilla"] - gcn_enum["tensor"] == gcn["reduction"]
            ok &= lstm_enum["vanilla"] - lstm_enum["tensor"] == lstm["reduction"]
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    _report(capsys, 1, "exact parameter counts on the K/d grid", ok, f"{elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# Criterion 2: block layers equal K independent vanilla layers
# ---------------------------------------------------------------------------


def _gcn_max_diff(rng, dtype) -> float:
    K = int(rng.integers(1, 5))
    dims = [int(rng.integers(1, 5)) for _ in range(K)]
    out = int(rng.integers(1, 5))
    n = int(rng.integers(2, 7))
    layer = TgcnLayer(dims, out).to(dtype)
    x = torch.tensor(rng.standard_normal((n, sum(dims))), dtype=dtype)
    adj = torch.tensor(rng.standard_normal((n, n)), dtype=dtype)
    worst = 0.0
    start = 0
    with torch.no_grad():
        got = layer(x, adj, activation=None)
        for k, d in enumerate(dims):
            w = _block_weight(layer.block, k)
            want = adj @ x[:, start : start + d] @ w
            worst = max(worst, float((got[:, k] - want).abs().max()))
            start += d
    return worst


def _lstm_max_diff(rng, dtype) -> float:
    K = int(rng.integers(1, 5))
    d_in = int(rng.integers(1, 5))
    d_h = int(rng.integers(1, 5))
    batch = int(rng.integers(1, 5))
    cell = TlstmCell([d_in] * K, d_h).to(dtype)
    x = torch.tensor(rng.standard_normal((batch, K, d_in)), dtype=dtype)
    h = torch.tensor(rng.standard_normal((batch, K, d_h)), dtype=dtype)
    c = torch.tensor(rng.standard_normal((batch, K, d_h)), dtype=dtype)
    with torch.no_grad():
        h_new, c_new = cell(x, h, c)
    worst = 0.0
    for k in range(K):
        ref = VanillaLstmCell(d_in, d_h).to(dtype)
        with torch.no_grad():
            ref.w.copy_(
                torch.cat([_block_weight(getattr(cell, f"u_{g}"), k) for g in ("f", "i", "o", "c")], dim=1)
            )
            ref.u.copy_(
                torch.cat([_block_weight(getattr(cell, f"uh_{g}"), k) for g in ("f", "i", "o", "c")], dim=1)
            )
            ref.b.copy_(torch.cat([getattr(cell, f"b_{g}")[k] for g in ("f", "i", "o", "c")]))
        # the reference cell orders gates (f, i, o, g) to match the block cell
        with torch.no_grad():
            hk, ck = ref(x[:, k], h[:, k], c[:, k])
        worst = max(worst, float((h_new[:, k] - hk).abs().max()))
        worst = max(worst, float((c_new[:, k] - ck).abs().max()))
    return worst


def test_criterion_2_block_equivalence(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    torch.manual_seed(7)
    worst32 = worst64 = 0.0
    for _ in range(50):
        worst32 = max(worst32, _gcn_max_diff(rng, torch.float32), _lstm_max_diff(rng, torch.float32))
        worst64 = max(worst64, _gcn_max_diff(rng, torch.float64), _lstm_max_diff(rng, torch.float64))
    elapsed = time.perf_counter() - start
    ok = worst32 < 1e-6 and worst64 < 1e-10 and elapsed < 30.0
    _report(
        capsys, 2, "block layers equal K parallel vanilla layers", ok,
        f"max diff fp32 {worst32:.1e}, fp64 {worst64:.1e}, {elapsed:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 3: analytic gradients of the training loss match finite differences
# ---------------------------------------------------------------------------


def _tiny_sample(schema: ActionSchema, rng) -> TemporalSample:
    T, n_friends = 3, 3
    n = 1 + n_friends
    graphs = []
    raw = np.ones((n, n)) - np.eye(n)
    adjacency = normalize_adjacency(raw)
    for _ in range(T):
        graphs.append(
            UserGraph(
                ego=0,
                friends=[1, 2, 3],
                adjacency=adjacency,
                node_features=rng.standard_normal((n, schema.D)),
                edge_features=rng.standard_normal((n_friends, schema.edge_dim)),
            )
        )
    return TemporalSample(user_id=0, graphs=graphs, label=float(rng.standard_normal()))


def test_criterion_3_gradient_check(capsys):
    start = time.perf_counter()
    torch.manual_seed(3)
    rng = np.random.default_rng(3)
    schema = ActionSchema(names=("a", "b"), dims=(2, 2), edge_dim=2)
    model = EngagementModel(
        schema, ModelConfig(d_prime=4, d_hidden=4, scorer_hidden=4, head_hidden=4, lstm_layers=1)
    ).double()
    batch = collate([_tiny_sample(schema, rng) for _ in range(2)], schema, dtype=torch.float64)
    a_star = torch.full((schema.K,), 1.0 / schema.K, dtype=torch.float64)

    with torch.no_grad():
        out0, _ = model(batch)
        q0 = posterior_q(batch.labels, out0)

    def loss_value() -> torch.Tensor:
        out, _ = model(batch)
        return em_loss(batch.labels, out, q0, a_star)

    model.zero_grad()
    loss_value().backward()

    eps = 1e-6
    worst = 0.0
    worst_name = ""
    ok = True
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        fd = torch.zeros_like(p)
        flat = p.data.view(-1)
        fd_flat = fd.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            with torch.no_grad():
                up = float(loss_value())
            flat[i] = orig - eps
            with torch.no_grad():
                down = float(loss_value())
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * eps)
        denom = max(float(analytic.norm()), float(fd.norm()), 1e-10)
        rel = float((analytic - fd).norm()) / denom
        if rel > worst:
            worst, worst_name = rel, name
        ok &= rel < 1e-4
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120.0
    _report(
        capsys, 3, "loss gradients match central finite differences", ok,
        f"worst rel err {worst:.1e} on {worst_name}, {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 4: per-epoch closed-form global-importance updates
# ---------------------------------------------------------------------------


def test_criterion_4_em_closed_form(capsys):
    start = time.perf_counter()
    schema = ActionSchema(names=("a", "b", "c"), dims=(1, 1, 1), edge_dim=3)
    cfg = GeneratorConfig(
        schema=schema, n_users=150, friends_min=2, friends_max=4, T=5, horizon=3,
        personas=default_personas(schema, dominant=0), noise_std=0.05, seed=4,
    )
    train_set, _, _ = generate(cfg)
    proc, _, _ = fit_and_apply_preprocessing(train_set, schema)
    batch = collate(proc, schema)

    torch.manual_seed(4)
    model = EngagementModel(
        schema, ModelConfig(d_prime=4, d_hidden=4, scorer_hidden=8, head_hidden=8, lstm_layers=1)
    )
    labels_n = (batch.labels - batch.labels.mean()) / batch.labels.std()
    optimizer = torch.optim.Adam(model.parameters(), lr=0.01)

    n, T, K = batch.size, batch.T, schema.K
    a_star = np.full(K, 1.0 / K)
    q_store = np.full((n, K), 1.0 / K)
    beta_store = np.full((n, T, K), 1.0 / T)
    rng = np.random.default_rng(4)
    ok = True
    detail = ""
    for epoch in range(3):
        order = rng.permutation(n)
        a_star_t = torch.as_tensor(a_star, dtype=torch.float32)
        for s in range(0, n, 32):
            idx = torch.as_tensor(order[s : s + 32])
            sub = batch.select(idx)
            sub_labels = labels_n[idx]
            optimizer.zero_grad()
            out, attn = model(sub)
            with torch.no_grad():
                q = posterior_q(sub_labels, out)
            loss = em_loss(sub_labels, out, q, a_star_t)
            loss.backward()
            optimizer.step()
            q_store[order[s : s + 32]] = q.numpy()
            beta_store[order[s : s + 32]] = attn.beta.detach().numpy()

        a_new = update_global_action(q_store)
        t_new = update_global_temporal(beta_store)
        # closed form equals the mean stored posterior
        ok &= bool(np.allclose(a_new, q_store.mean(axis=0), atol=1e-6))
        # every temporal-importance column is a simplex
        ok &= bool(np.allclose(t_new.sum(axis=0), 1.0, atol=1e-6)) and bool((t_new >= -1e-9).all())
        # swapping in the closed form never increases the loss (theta, q fixed)
        with torch.no_grad():
            out_full, _ = model(batch)
            q_t = torch.as_tensor(q_store, dtype=torch.float32)
            loss_old = float(em_loss(labels_n, out_full, q_t, torch.as_tensor(a_star, dtype=torch.float32)))
            loss_new = float(em_loss(labels_n, out_full, q_t, torch.as_tensor(a_new, dtype=torch.float32)))
        if loss_new > loss_old + 1e-8:
            ok = False
            detail = f"epoch {epoch}: closed form raised loss {loss_old:.6f} -> {loss_new:.6f}"
        a_star = a_new
    elapsed = time.perf_counter() - start
    _report(
        capsys, 4, "closed-form importance updates after each epoch", ok,
        detail or f"3 epochs checked, {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# Criteria 5-7: shared 10-seed synthetic-recovery run
# ---------------------------------------------------------------------------

RUN_MODEL = dict(d_prime=8, d_hidden=8, scorer_hidden=16, head_hidden=16, lstm_layers=1)
# the drifting-level recency task needs the extra recurrent layer to fit
# reliably within the 10-epoch budget
RECENCY_MODEL = dict(RUN_MODEL, lstm_layers=2)
RUN_TRAIN = dict(batch_size=32, learning_rate=0.02, max_epochs=10, patience=10)


@pytest.fixture(scope="module")
def synthetic_runs():
    schema = ActionSchema.default()
    results = {"dominant": [], "recency": [], "elapsed": 0.0}
    start = time.perf_counter()
    for seed in range(N_SEEDS):
        k_star = (seed * 5) % schema.K

        cfg = GeneratorConfig(
            schema=schema, n_users=2000, friends_min=5, friends_max=10, T=14, horizon=7,
            personas=default_personas(schema, dominant=k_star),
            label_rule="dominant_mean", noise_std=0.1, seed=seed,
        )
        train_set, test_set, _ = generate(cfg)
        proc_train, _, stats = fit_and_apply_preprocessing(train_set, schema)
        proc_test = apply_preprocessing(test_set, schema, stats)
        baseline = constant_baseline_rmse(
            [s.label for s in train_set], [s.label for s in test_set]
        )
        result = train(
            proc_train, schema, TrainConfig(seed=seed, **RUN_TRAIN), ModelConfig(**RUN_MODEL)
        )
        rmse = evaluate(result.model, proc_test, schema).rmse
        results["dominant"].append(
            {
                "seed": seed,
                "k_star": k_star,
                "argmax": int(np.argmax(result.global_importance.A_star)),
                "improvement": 1.0 - rmse / baseline,
            }
        )

        cfg = GeneratorConfig(
            schema=schema, n_users=2000, friends_min=2, friends_max=4, T=14, horizon=7,
            personas=default_personas(schema, dominant=k_star),
            label_rule="recency", recency_tau=2.0, drift_sigma=0.4,
            user_scale_sigma=0.2, activity_noise_sigma=0.4, noise_std=0.05, seed=seed,
        )
        train_set, test_set, _ = generate(cfg)
        proc_train, _, stats = fit_and_apply_preprocessing(train_set, schema)
        proc_test = apply_preprocessing(test_set, schema, stats)
        full = train(
            proc_train, schema, TrainConfig(seed=seed, **RUN_TRAIN), ModelConfig(**RECENCY_MODEL)
        )
        full_rmse = evaluate(full.model, proc_test, schema).rmse
        tmp = train(
            proc_train, schema, TrainConfig(seed=seed, variant="tmp", **RUN_TRAIN), ModelConfig(**RECENCY_MODEL)
        )
        tmp_rmse = evaluate(tmp.model, proc_test, schema).rmse
        column = full.global_importance.T_star[:, k_star]
        results["recency"].append(
            {
                "seed": seed,
                # the last third of T=14 steps, rounded up: the final 5 steps
                "last_third_mass": float(column[-5:].sum()),
                "margin": 1.0 - full_rmse / tmp_rmse,
                "full_improvement": 1.0
                - full_rmse
                / constant_baseline_rmse([s.label for s in train_set], [s.label for s in test_set]),
            }
        )
    results["elapsed"] = time.perf_counter() - start
    return results


def test_criterion_5_action_importance_recovery(capsys, synthetic_runs):
    runs = synthetic_runs["dominant"]
    hits = sum(r["argmax"] == r["k_star"] for r in runs)
    elapsed = synthetic_runs["elapsed"]
    ok = hits >= 9 and elapsed < 15 * 60
    _report(
        capsys, 5, "planted dominant action recovered by global importance", ok,
        f"{hits}/{N_SEEDS} seeds, shared run {elapsed:.0f}s",
    )
    assert ok


def test_criterion_6_temporal_importance_recovery(capsys, synthetic_runs):
    runs = synthetic_runs["recency"]
    masses = [r["last_third_mass"] for r in runs]
    hits = sum(m >= 0.60 for m in masses)
    ok = hits >= 8
    _report(
        capsys, 6, "temporal importance concentrates on recent steps", ok,
        f"{hits}/{N_SEEDS} seeds with >=60% late mass; masses "
        + ", ".join(f"{m:.2f}" for m in masses),
    )
    assert ok


def test_criterion_7_predictive_sanity(capsys, synthetic_runs):
    dominant = synthetic_runs["dominant"]
    recency = synthetic_runs["recency"]
    mean_improvement = float(np.mean([r["improvement"] for r in dominant]))
    margins = [r["margin"] for r in recency]
    margin_hits = sum(m >= 0.10 for m in margins)
    ok = mean_improvement >= 0.30 and margin_hits >= 8
    _report(
        capsys, 7, "beats the constant baseline and the no-temporal ablation", ok,
        f"mean improvement {mean_improvement:.0%}; margin >=10% in {margin_hits}/{N_SEEDS} seeds",
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 8: tensor wiring is at least as fast as the dense wiring
# ---------------------------------------------------------------------------


def test_criterion_8_runtime(capsys):
    start = time.perf_counter()
    report = time_layers(TimingConfig(K=13, d_prime=32, batch=256))
    speedup = report.timing["speedup"]
    elapsed = time.perf_counter() - start
    ok = speedup >= 1.0 and elapsed < 5 * 60
    _report(
        capsys, 8, "block wiring forward+backward speedup >= 1.0", ok,
        f"speedup {speedup:.2f}x, {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# Criterion 9: simplex invariants over random forwards, zero-friend handling
# ---------------------------------------------------------------------------


def _random_batch(rng, schema: ActionSchema, B: int, T: int, max_friends: int) -> Batch:
    N = 1 + max_friends
    node = torch.tensor(rng.standard_normal((B, T, N, schema.D)), dtype=torch.float32)
    raw = rng.random((B, T, N, N))
    raw = (raw + raw.transpose(0, 1, 3, 2)) / 2
    adj = torch.tensor(
        np.stack([
            np.stack([normalize_adjacency(raw[b, t]) for t in range(T)]) for b in range(B)
        ]),
        dtype=torch.float32,
    )
    edge = torch.tensor(rng.standard_normal((B, T, max_friends, schema.edge_dim)), dtype=torch.float32)
    counts = rng.integers(0, max_friends + 1, size=B)  # some samples have zero friends
    mask = torch.zeros(B, T, max_friends, dtype=torch.bool)
    for b, c in enumerate(counts):
        mask[b, :, : int(c)] = True
    labels = torch.tensor(rng.standard_normal(B), dtype=torch.float32)
    return Batch(node_features=node, adjacency=adj, edge_features=edge, friend_mask=mask, labels=labels)


def test_criterion_9_simplex_invariants(capsys):
    start = time.perf_counter()
    torch.manual_seed(9)
    rng = np.random.default_rng(9)
    schema = ActionSchema.default()
    model = EngagementModel(
        schema, ModelConfig(d_prime=4, d_hidden=4, scorer_hidden=8, head_hidden=8, lstm_layers=1)
    )
    model.eval()
    total = 0
    worst = 0.0
    ok = True
    with torch.no_grad():
        for _ in range(40):
            batch = _random_batch(rng, schema, B=250, T=3, max_friends=4)
            out, attn = model(batch)
            total += batch.size
            ok &= bool(torch.isfinite(out.mu).all()) and bool((out.sd > 0).all())
            worst = max(worst, float((out.action_probs.sum(-1) - 1).abs().max()))
            worst = max(worst, float((attn.beta.sum(1) - 1).abs().max()))
            alpha_sums = attn.alpha.sum(-1)
            has_friends = attn.friend_mask.any(-1)
            worst = max(worst, float((alpha_sums[has_friends] - 1).abs().max()))
            # zero-friend graphs: friend weights all zero
            worst = max(worst, float(alpha_sums[~has_friends].abs().max()) if (~has_friends).any() else 0.0)
            ok &= bool((out.action_probs >= -1e-9).all()) and bool((attn.beta >= -1e-9).all())

        # zero-friend samples: the pooled-neighbor half of the embedding is zero
        zb = _random_batch(rng, schema, B=8, T=3, max_friends=2)
        zb.friend_mask[:] = False
        g, alpha = model.encoder(
            zb.node_features.flatten(0, 1), zb.adjacency.flatten(0, 1),
            zb.edge_features.flatten(0, 1), zb.friend_mask.flatten(0, 1),
        )
        neighbor_half = g[..., model.config.d_prime :]
        ok &= bool((neighbor_half == 0).all()) and bool((alpha == 0).all())
        out, _ = model(zb)
        ok &= bool(torch.isfinite(out.point_estimate).all())
    elapsed = time.perf_counter() - start
    ok &= worst < 1e-6 and total >= 10_000 and elapsed < 120.0
    _report(
        capsys, 9, "simplex invariants over 10,000 random forwards", ok,
        f"worst simplex error {worst:.1e}, {elapsed:.0f}s",
    )
    assert ok
