"""Synthetic temporal ego-network generator with planted personas and known ground truth.

Activity follows a weekly-periodic rate with multiplicative lognormal noise;
labels are planted functions of the dominant action(s) so that explanation
recovery is testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import (
    ActionSchema,
    DatasetManifest,
    EngagementTask,
    TemporalSample,
    UserGraph,
    ValidationError,
    normalize_adjacency,
)

WEEK = 7.0

LABEL_RULES = ("dominant_mean", "recency")


@dataclass(frozen=True)
class PersonaSpec:
    name: str
    base_rates: tuple[float, ...]
    weekly_amplitude: tuple[float, ...]
    dominant_actions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "base_rates", tuple(float(x) for x in self.base_rates))
        object.__setattr__(self, "weekly_amplitude", tuple(float(x) for x in self.weekly_amplitude))
        object.__setattr__(self, "dominant_actions", tuple(int(x) for x in self.dominant_actions))
        if any(r < 0 for r in self.base_rates):
            raise ValidationError("base_rates must be nonnegative")
        if not self.dominant_actions:
            raise ValidationError("dominant_actions must be nonempty")


def default_personas(schema: ActionSchema, dominant: int = 0) -> list[PersonaSpec]:
    base = np.ones(schema.K)
    base[dominant] = 3.0
    amp = np.full(schema.K, 0.3)
    return [
        PersonaSpec(
            name=f"dominant_{schema.names[dominant]}",
            base_rates=tuple(base),
            weekly_amplitude=tuple(amp),
            dominant_actions=(dominant,),
        )
    ]


@dataclass
class GeneratorConfig:
    schema: ActionSchema
    n_users: int = 1000
    friends_min: int = 10
    friends_max: int = 20
    active_friend_fraction: float = 0.15
    T: int = 14
    horizon: int = 7
    personas: list[PersonaSpec] = field(default_factory=list)
    persona_weights: list[float] = field(default_factory=list)
    label_rule: str = "dominant_mean"
    noise_std: float = 0.1
    seed: int = 0
    test_fraction: float = 0.25
    user_scale_sigma: float = 0.5
    activity_noise_sigma: float = 0.2
    friend_edge_prob: float = 0.2
    friend_influence: float = 0.0
    dynamic_friends: bool = False
    recency_tau: float = 1.5
    drift_sigma: float = 0.0
    drift_rho: float = 1.0
    metric_id: str = "synthetic-activity"

    def __post_init__(self):
        if not self.personas:
            self.personas = default_personas(self.schema)
        if not self.persona_weights:
            self.persona_weights = [1.0 / len(self.personas)] * len(self.personas)
        if not (0.0 < self.active_friend_fraction <= 1.0):
            raise ValidationError("active_friend_fraction must be in (0, 1]")
        if self.friends_min < 0 or self.friends_max < self.friends_min:
            raise ValidationError("invalid friend-count range")
        if self.n_users <= self.friends_max:
            raise ValidationError("n_users must exceed the maximum friend count")
        if self.label_rule not in LABEL_RULES:
            raise ValidationError(f"unknown label_rule {self.label_rule!r}")
        if len(self.persona_weights) != len(self.personas):
            raise ValidationError("persona_weights must match personas")
        total = sum(self.persona_weights)
        self.persona_weights = [w / total for w in self.persona_weights]
        for p in self.personas:
            if len(p.base_rates) != self.schema.K or len(p.weekly_amplitude) != self.schema.K:
                raise ValidationError(f"persona {p.name!r} rate vectors must have length K")
            if any(a < 0 or a >= self.schema.K for a in p.dominant_actions):
                raise ValidationError(f"persona {p.name!r} dominant_actions out of range")

    @property
    def task(self) -> EngagementTask:
        return EngagementTask(metric_id=self.metric_id, horizon=self.horizon)


@dataclass
class GroundTruth:
    label_rule: str
    temporal_profile: list[float]
    action_importance: list[float]
    personas: list[dict]
    per_user: dict[int, dict]

    def dominant_actions(self) -> set[int]:
        return {a for p in self.personas for a in p["dominant_actions"]}


def _user_rng(seed: int, user_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(user_id,)))


def _simulate_activity(
    rng: np.random.Generator,
    base: np.ndarray,
    amp: np.ndarray,
    phase: float,
    scale: np.ndarray,
    length: int,
    noise_sigma: float,
    drift_sigma: float = 0.0,
    drift_rho: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Clean and observed activity matrices, each (length, K).

    The clean path is a periodic rate; with ``drift_sigma`` > 0 its log-level
    additionally drifts over time. With ``drift_rho`` = 1 the drift is a random
    walk with per-step innovation ``drift_sigma``; with ``drift_rho`` < 1 it is
    a mean-reverting AR(1) process with stationary standard deviation
    ``drift_sigma``, so the level decorrelates within a few steps and only
    recent steps are informative about the near future. The observed path
    multiplies the clean path by mean-1 lognormal measurement noise; labels
    are planted on the clean path, so a good predictor has to average the
    noise out of several recent observations.
    """
    t = np.arange(1, length + 1)[:, None]
    rate = base[None, :] * scale[None, :] * (1.0 + amp[None, :] * np.sin(2 * np.pi * t / WEEK + phase))
    rate = np.maximum(rate, 0.0)
    if drift_sigma > 0:
        rho = float(drift_rho)
        innov_sd = drift_sigma if rho >= 1.0 else drift_sigma * np.sqrt(1.0 - rho**2)
        steps = rng.normal(0.0, innov_sd, size=(length, rate.shape[1]))
        walk = np.empty_like(steps)
        level = rng.normal(0.0, drift_sigma, size=rate.shape[1]) if rho < 1.0 else np.zeros(rate.shape[1])
        for i in range(length):
            level = rho * level + steps[i]
            walk[i] = level
        rate = rate * np.exp(walk)
    if noise_sigma > 0:
        noise = rng.lognormal(mean=-0.5 * noise_sigma**2, sigma=noise_sigma, size=rate.shape)
    else:
        noise = np.ones_like(rate)
    return rate, rate * noise


def recency_weights(T: int, tau: float) -> np.ndarray:
    w = np.exp((np.arange(1, T + 1) - T) / tau)
    return w / w.sum()


def _expand_to_features(rng: np.random.Generator, activity_k: np.ndarray, schema: ActionSchema) -> np.ndarray:
    """Spread per-category activity (length, K) over the full feature width D."""
    if schema.D == schema.K:
        return activity_k
    out = np.empty((activity_k.shape[0], schema.D))
    for k, sl in enumerate(schema.slices()):
        width = sl.stop - sl.start
        jitter = rng.lognormal(mean=0.0, sigma=0.05, size=(activity_k.shape[0], width))
        out[:, sl] = activity_k[:, k : k + 1] * jitter
    return out


def _generate_user(config: GeneratorConfig, user_id: int) -> tuple[TemporalSample, dict]:
    rng = _user_rng(config.seed, user_id)
    schema = config.schema
    K = schema.K

    persona_idx = int(rng.choice(len(config.personas), p=config.persona_weights))
    persona = config.personas[persona_idx]
    base = np.asarray(persona.base_rates)
    amp = np.asarray(persona.weekly_amplitude)

    phase = float(rng.uniform(0, 2 * np.pi))
    scale = rng.lognormal(mean=0.0, sigma=config.user_scale_sigma, size=K)

    full_len = config.T + config.horizon
    ego_clean, ego_activity = _simulate_activity(
        rng, base, amp, phase, scale, full_len, config.activity_noise_sigma,
        config.drift_sigma, config.drift_rho,
    )

    n_friends = int(rng.integers(config.friends_min, config.friends_max + 1))
    pool = np.delete(np.arange(config.n_users), user_id)
    friends = rng.choice(pool, size=n_friends, replace=False).tolist() if n_friends else []
    n_active = max(1, int(round(config.active_friend_fraction * n_friends))) if n_friends else 0
    active = set(friends[:n_active])

    friend_activity = []
    for _ in friends:
        f_persona = config.personas[int(rng.choice(len(config.personas), p=config.persona_weights))]
        f_scale = rng.lognormal(mean=0.0, sigma=config.user_scale_sigma, size=K)
        f_phase = float(rng.uniform(0, 2 * np.pi))
        friend_activity.append(
            _simulate_activity(
                rng,
                np.asarray(f_persona.base_rates),
                np.asarray(f_persona.weekly_amplitude),
                f_phase,
                f_scale,
                config.T,
                config.activity_noise_sigma,
                config.drift_sigma,
                config.drift_rho,
            )[1]
        )

    n = 1 + n_friends
    raw_adj = np.zeros((n, n))
    raw_adj[0, 1:] = 1.0
    raw_adj[1:, 0] = 1.0
    for i in range(1, n):
        for j in range(i + 1, n):
            if rng.random() < config.friend_edge_prob:
                raw_adj[i, j] = raw_adj[j, i] = 1.0
    adjacency = normalize_adjacency(raw_adj).astype(np.float32)

    graphs = []
    for t in range(config.T):
        node_rows = [ego_activity[t]] + [fa[t] for fa in friend_activity]
        node_k = np.stack(node_rows, axis=0)
        node_features = _expand_to_features(rng, node_k, schema).astype(np.float32)
        edge_features = np.zeros((n_friends, schema.edge_dim), dtype=np.float32)
        for i, v in enumerate(friends):
            rate = 10.0 if v in active else 0.05
            edge_features[i] = rng.poisson(rate, size=schema.edge_dim)
        graphs.append(
            UserGraph(
                ego=user_id,
                friends=list(friends),
                adjacency=adjacency,
                node_features=node_features,
                edge_features=edge_features,
            )
        )

    dom_series = ego_clean[:, list(persona.dominant_actions)].mean(axis=1)
    if config.label_rule == "dominant_mean":
        label = float(dom_series[config.T :].mean())
    else:  # recency
        w = recency_weights(config.T, config.recency_tau)
        label = float(np.dot(w, dom_series[: config.T]))
    if config.friend_influence > 0 and active:
        active_rows = [fa for v, fa in zip(friends, friend_activity) if v in active]
        influences = [
            fa[:, list(persona.dominant_actions)].mean() for fa in active_rows
        ]
        label += config.friend_influence * float(np.mean(influences))
    if config.noise_std > 0:
        label += float(rng.normal(0.0, config.noise_std))

    sample = TemporalSample(user_id=user_id, graphs=graphs, label=label)
    truth = {
        "persona": persona.name,
        "dominant_actions": list(persona.dominant_actions),
        "active_friends": sorted(active),
    }
    return sample, truth


def generate(config: GeneratorConfig) -> tuple[list[TemporalSample], list[TemporalSample], GroundTruth]:
    """Build train/test splits plus the planted ground truth, deterministically."""
    samples, per_user = [], {}
    for uid in range(config.n_users):
        s, truth = _generate_user(config, uid)
        samples.append(s)
        per_user[uid] = truth

    split_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(2**31,)))
    order = split_rng.permutation(config.n_users)
    n_test = int(round(config.test_fraction * config.n_users))
    test_ids = set(order[:n_test].tolist())
    train = [s for s in samples if s.user_id not in test_ids]
    test = [s for s in samples if s.user_id in test_ids]

    if config.label_rule == "recency":
        profile = recency_weights(config.T, config.recency_tau).tolist()
    else:
        profile = [1.0 / config.T] * config.T

    action_importance = np.zeros(config.schema.K)
    persona_records = []
    for p, w in zip(config.personas, config.persona_weights):
        share = w / len(p.dominant_actions)
        for a in p.dominant_actions:
            action_importance[a] += share
        persona_records.append(
            {"name": p.name, "weight": w, "dominant_actions": list(p.dominant_actions)}
        )

    truth = GroundTruth(
        label_rule=config.label_rule,
        temporal_profile=profile,
        action_importance=action_importance.tolist(),
        personas=persona_records,
        per_user=per_user,
    )
    return train, test, truth


def ground_truth_report(truth: GroundTruth) -> dict:
    """JSON-ready summary used by acceptance checks and the CLI sidecar."""
    return {
        "label_rule": truth.label_rule,
        "action_importance": truth.action_importance,
        "temporal_profile": truth.temporal_profile,
        "personas": truth.personas,
        "per_user": {
            str(uid): {
                "persona": rec["persona"],
                "dominant_actions": rec["dominant_actions"],
                "active_friends": rec["active_friends"],
            }
            for uid, rec in truth.per_user.items()
        },
    }


def manifest_for(config: GeneratorConfig, split: str) -> DatasetManifest:
    return DatasetManifest(schema=config.schema, T=config.T, task=config.task, seed=config.seed, split=split)
