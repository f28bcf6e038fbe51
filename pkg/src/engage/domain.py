"""Core data types, dataset I/O, preprocessing, and the engagement-score definition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ACTION_NAMES = [
    "SnapSend",
    "SnapView",
    "SnapCreate",
    "SnapSave",
    "ChatSend",
    "ChatView",
    "StoryPost",
    "StoryView",
    "StoryViewTime",
    "FriendDiscoverView",
    "PublisherDiscoverView",
    "DiscoverViewTime",
    "SessionTime",
]

DEFAULT_EDGE_NAMES = ["chat", "snap", "story"]


class ValidationError(ValueError):
    """Raised when a structural precondition on input data is violated."""


@dataclass(frozen=True)
class ActionSchema:
    """Partition of node features into named action categories."""

    names: tuple[str, ...]
    dims: tuple[int, ...]
    edge_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.names) < 1:
            raise ValidationError("schema needs at least one action category")
        if len(self.names) != len(self.dims):
            raise ValidationError("names and dims must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("category names must be unique")
        if any(d < 1 for d in self.dims):
            raise ValidationError("every category width must be >= 1")
        if self.edge_dim < 0:
            raise ValidationError("edge_dim must be >= 0")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def D(self) -> int:
        return sum(self.dims)

    def slices(self) -> list[slice]:
        """Column slice of the node-feature matrix owned by each category."""
        out, start = [], 0
        for d in self.dims:
            out.append(slice(start, start + d))
            start += d
        return out

    @classmethod
    def default(cls) -> "ActionSchema":
        return cls(names=tuple(DEFAULT_ACTION_NAMES), dims=(1,) * len(DEFAULT_ACTION_NAMES), edge_dim=3)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "dims": list(self.dims), "edge_dim": self.edge_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSchema":
        return cls(names=tuple(d["names"]), dims=tuple(d["dims"]), edge_dim=int(d["edge_dim"]))


@dataclass
class UserGraph:
    """One ego-network snapshot: ego node first, then friends.

    ``adjacency`` is already symmetric-normalized with self-loops; ``node_features``
    has one row per node (ego row 0) and ``edge_features`` one row per friend
    (the ego-friend edge).
    """

    ego: int
    friends: list[int]
    adjacency: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return 1 + len(self.friends)


@dataclass
class TemporalSample:
    """A user's chronological sequence of graphs plus the engagement label."""

    user_id: int
    graphs: list[UserGraph]
    label: float

    @property
    def T(self) -> int:
        return len(self.graphs)


@dataclass(frozen=True)
class EngagementTask:
    """Which future metric is being predicted and over what horizon."""

    metric_id: str
    horizon: int
    aggregation: str = "mean"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.aggregation != "mean":
            raise ValidationError(f"unsupported aggregation {self.aggregation!r}")

    def to_dict(self) -> dict:
        return {"metric_id": self.metric_id, "horizon": self.horizon, "aggregation": self.aggregation}

    @classmethod
    def from_dict(cls, d: dict) -> "EngagementTask":
        return cls(metric_id=d["metric_id"], horizon=int(d["horizon"]), aggregation=d.get("aggregation", "mean"))


@dataclass
class FeatureStats:
    """Training-split winsorization caps and standardization moments, per feature."""

    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    cap_low: np.ndarray
    cap_high: np.ndarray
    degenerate: list[str] = field(default_factory=list)

    def transform(self, x: np.ndarray) -> np.ndarray:
        clipped = np.clip(x, self.cap_low, self.cap_high)
        return (clipped - self.mean) / self.std

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def save(self, path) -> None:
        rows = [
            {
                "name": n,
                "mean": float(m),
                "std": float(s),
                "cap_low": float(lo),
                "cap_high": float(hi),
            }
            for n, m, s, lo, hi in zip(self.names, self.mean, self.std, self.cap_low, self.cap_high)
        ]
        with open(path, "w") as f:
            json.dump({"features": rows, "degenerate": self.degenerate}, f, indent=2)

    @classmethod
    def load(cls, path) -> "FeatureStats":
        with open(path) as f:
            d = json.load(f)
        rows = d["features"]
        return cls(
            names=[r["name"] for r in rows],
            mean=np.array([r["mean"] for r in rows]),
            std=np.array([r["std"] for r in rows]),
            cap_low=np.array([r["cap_low"] for r in rows]),
            cap_high=np.array([r["cap_high"] for r in rows]),
            degenerate=d.get("degenerate", []),
        )


def normalize_adjacency(raw: np.ndarray) -> np.ndarray:
    """Self-loop renormalization: D^{-1/2} (A + I) D^{-1/2}."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {raw.shape}")
    if not np.array_equal(raw, raw.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(raw < 0):
        raise ValidationError("adjacency entries must be nonnegative")
    a = raw + np.eye(raw.shape[0])
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def engagement_score(future_metric_values: Sequence[float], task: EngagementTask) -> float:
    """Empirical expectation of the metric over the future window."""
    values = np.asarray(future_metric_values, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("empty future window")
    if values.size != task.horizon:
        raise ValidationError(f"window length {values.size} != task horizon {task.horizon}")
    return float(values.mean())


def _feature_matrix(samples: Iterable[TemporalSample]) -> np.ndarray:
    rows = [g.node_features for s in samples for g in s.graphs]
    return np.concatenate(rows, axis=0)


def _edge_matrix(samples: Iterable[TemporalSample]) -> np.ndarray | None:
    rows = [g.edge_features for s in samples for g in s.graphs if len(g.friends) > 0]
    if not rows:
        return None
    return np.concatenate(rows, axis=0)


def fit_feature_stats(
    train: Sequence[TemporalSample],
    schema: ActionSchema,
    winsor_percentile: float = 99.0,
    std_floor: float = 1e-8,
) -> FeatureStats:
    """Winsorization caps and moments from the training split only."""
    if not train:
        raise ValidationError("empty training split")
    node = _feature_matrix(train)
    edge = _edge_matrix(train)
    cols = [node[:, j] for j in range(node.shape[1])]
    names = _feature_names(schema)
    if edge is not None:
        cols += [edge[:, j] for j in range(edge.shape[1])]
    else:
        cols += [np.zeros(1) for _ in range(schema.edge_dim)]

    lo_p = 100.0 - winsor_percentile
    means, stds, caps_lo, caps_hi, degenerate = [], [], [], [], []
    for name, col in zip(names, cols):
        lo = float(np.percentile(col, lo_p))
        hi = float(np.percentile(col, winsor_percentile))
        clipped = np.clip(col, lo, hi)
        m = float(clipped.mean())
        s = float(clipped.std())
        if s < std_floor:
            s = std_floor
            degenerate.append(name)
        means.append(m)
        stds.append(s)
        caps_lo.append(lo)
        caps_hi.append(hi)
    return FeatureStats(
        names=names,
        mean=np.array(means),
        std=np.array(stds),
        cap_low=np.array(caps_lo),
        cap_high=np.array(caps_hi),
        degenerate=degenerate,
    )


def _feature_names(schema: ActionSchema) -> list[str]:
    names = []
    for cat, d in zip(schema.names, schema.dims):
        if d == 1:
            names.append(cat)
        else:
            names.extend(f"{cat}_{i}" for i in range(d))
    names.extend(f"edge_{i}" for i in range(schema.edge_dim))
    return names


def apply_preprocessing(samples: Sequence[TemporalSample], schema: ActionSchema, stats: FeatureStats) -> list[TemporalSample]:
    """Transform node and edge features in place-free copies using fixed stats."""
    D = schema.D
    node_stats = FeatureStats(
        names=stats.names[:D],
        mean=stats.mean[:D],
        std=stats.std[:D],
        cap_low=stats.cap_low[:D],
        cap_high=stats.cap_high[:D],
    )
    edge_stats = FeatureStats(
        names=stats.names[D:],
        mean=stats.mean[D:],
        std=stats.std[D:],
        cap_low=stats.cap_low[D:],
        cap_high=stats.cap_high[D:],
    )
    out = []
    for s in samples:
        graphs = []
        for g in s.graphs:
            ef = g.edge_features
            if ef.size:
                ef = edge_stats.transform(ef)
            graphs.append(
                UserGraph(
                    ego=g.ego,
                    friends=list(g.friends),
                    adjacency=g.adjacency,
                    node_features=node_stats.transform(g.node_features),
                    edge_features=ef,
                )
            )
        out.append(TemporalSample(user_id=s.user_id, graphs=graphs, label=s.label))
    return out


def fit_and_apply_preprocessing(
    train: Sequence[TemporalSample],
    schema: ActionSchema,
    test: Sequence[TemporalSample] | None = None,
    winsor_percentile: float = 99.0,
) -> tuple[list[TemporalSample], list[TemporalSample] | None, FeatureStats]:
    """Fit caps/moments on the training split and transform both splits with them."""
    stats = fit_feature_stats(train, schema, winsor_percentile=winsor_percentile)
    train_out = apply_preprocessing(train, schema, stats)
    test_out = apply_preprocessing(test, schema, stats) if test is not None else None
    return train_out, test_out, stats


def validate_sample(
    sample: TemporalSample,
    schema: ActionSchema,
    expected_T: int | None = None,
    atol: float = 1e-6,
) -> list[str]:
    """Collect every structural violation; an empty list means the sample is valid."""
    violations: list[str] = []
    if sample.T < 1:
        violations.append("sample has no graphs")
    if expected_T is not None and sample.T != expected_T:
        violations.append(f"expected {expected_T} graphs, found {sample.T}")
    for t, g in enumerate(sample.graphs):
        tag = f"graph[{t}]"
        n = g.n_nodes
        adj = np.asarray(g.adjacency)
        if adj.shape != (n, n):
            violations.append(f"{tag}: adjacency shape {adj.shape} != ({n}, {n})")
            continue
        if not np.allclose(adj, adj.T, atol=atol):
            violations.append(f"{tag}: adjacency not symmetric")
        if np.any(adj < -atol):
            violations.append(f"{tag}: adjacency has negative entries")
        if np.any(adj > 1.0 + atol):
            violations.append(f"{tag}: adjacency entries exceed 1")
        # symmetric normalization bounds row sums by sqrt(n), not by 1
        if np.any(adj.sum(axis=1) > np.sqrt(n) + 1e-3):
            violations.append(f"{tag}: adjacency row sums exceed the normalization bound")
        xf = np.asarray(g.node_features)
        if xf.shape != (n, schema.D):
            violations.append(f"{tag}: node_features shape {xf.shape} != ({n}, {schema.D})")
        ef = np.asarray(g.edge_features)
        if ef.shape != (len(g.friends), schema.edge_dim):
            violations.append(
                f"{tag}: edge_features shape {ef.shape} != ({len(g.friends)}, {schema.edge_dim})"
            )
    return violations


# ---------------------------------------------------------------------------
# Dataset file format: one manifest line followed by one JSON record per sample.
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    schema: ActionSchema
    T: int
    task: EngagementTask
    seed: int
    split: str

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "T": self.T,
            "task": self.task.to_dict(),
            "seed": self.seed,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            schema=ActionSchema.from_dict(d["schema"]),
            T=int(d["T"]),
            task=EngagementTask.from_dict(d["task"]),
            seed=int(d["seed"]),
            split=str(d["split"]),
        )


def _round_floats(arr: np.ndarray) -> list:
    return np.asarray(arr, dtype=np.float32).tolist()


def save_dataset(path, manifest: DatasetManifest, samples: Iterable[TemporalSample]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(manifest.to_dict(), sort_keys=True) + "\n")
        for s in samples:
            rec = {
                "user_id": s.user_id,
                "label": float(s.label),
                "graphs": [
                    {
                        "friends": list(map(int, g.friends)),
                        "adjacency": _round_floats(g.adjacency),
                        "node_features": _round_floats(g.node_features),
                        "edge_features": _round_floats(g.edge_features),
                    }
                    for g in s.graphs
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[DatasetManifest, list[TemporalSample]]:
    with open(path) as f:
        header = f.readline()
        if not header.strip():
            raise ValidationError(f"{path}: missing manifest line")
        manifest = DatasetManifest.from_dict(json.loads(header))
        edge_dim = manifest.schema.edge_dim
        samples = []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            graphs = []
            for g in rec["graphs"]:
                n_friends = len(g["friends"])
                ef = np.asarray(g["edge_features"], dtype=np.float32).reshape(n_friends, edge_dim)
                graphs.append(
                    UserGraph(
                        ego=0,
                        friends=list(g["friends"]),
                        adjacency=np.asarray(g["adjacency"], dtype=np.float32),
                        node_features=np.asarray(g["node_features"], dtype=np.float32),
                        edge_features=ef,
                    )
                )
            samples.append(TemporalSample(user_id=rec["user_id"], graphs=graphs, label=rec["label"]))
    return manifest, samples
