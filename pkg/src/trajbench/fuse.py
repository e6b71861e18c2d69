"""Query-to-trajectory retrieval with a fused geometric/semantic encoder.

Trajectories are described by a fixed geometric descriptor and the mean
embedding of the cells they visit.  A linear layer maps the
concatenation into the query space; it is trained with an InfoNCE
objective whose temperature is learned alongside the weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .errors import InvalidArgument, InvalidState, NumericFailure
from .geo import CellIndex, GeoPoint, HexConfig, project
from .providers import HashEmbedder
from .roadnet import RoadGraph
from .traj import Trajectory, compress, trajectory_points

N_RESAMPLE = 16
GEO_DIM = 2 * N_RESAMPLE + 1
DAY_S = 86400.0
TAU0 = 0.07


# -- encoders ---------------------------------------------------------------------

def _resample(xy: np.ndarray, n: int) -> np.ndarray:
    seg = np.hypot(*np.diff(xy, axis=0).T) if len(xy) > 1 else np.zeros(0)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] == 0:
        return np.repeat(xy[:1], n, axis=0)
    at = np.linspace(0.0, arc[-1], n)
    return np.column_stack([np.interp(at, arc, xy[:, 0]), np.interp(at, arc, xy[:, 1])])


def geo_descriptor(points: Sequence[GeoPoint], duration_s: float) -> np.ndarray:
    """Shape descriptor: 16 arc-length samples, centred and scaled by the trip diameter."""
    lat = sum(p.lat for p in points) / len(points)
    lon = sum(p.lon for p in points) / len(points)
    cfg = HexConfig(GeoPoint(lat, lon))
    xy = np.array([project(p, cfg) for p in points], dtype=float)
    pts = _resample(xy, N_RESAMPLE)
    pts -= pts.mean(axis=0)
    diff = pts[:, None, :] - pts[None, :, :]
    diameter = float(np.sqrt((diff ** 2).sum(-1)).max())
    if diameter > 0:
        pts /= diameter
    dur = math.log1p(max(duration_s, 0.0)) / math.log1p(DAY_S)
    return np.concatenate([pts.ravel(), [dur]])


def geo_encode(t: Trajectory, g: RoadGraph) -> np.ndarray:
    return geo_descriptor(trajectory_points(t, g), t.duration)


def sem_encode(t: Trajectory, g: RoadGraph, cells: CellIndex, embedder) -> np.ndarray:
    """Mean embedding of the visited cells' descriptions, unit length."""
    ps = compress(t, g, None, cells.cfg)
    vecs = embedder.embed([cells.description(c) for c in ps.cells])
    mean = vecs.mean(axis=0)
    n = np.linalg.norm(mean)
    if n == 0:
        return mean
    return mean / n


def encode_features(trajs: Sequence[Trajectory], g: RoadGraph, cells: CellIndex, embedder) -> np.ndarray:
    return np.array([np.concatenate([geo_encode(t, g), sem_encode(t, g, cells, embedder)]) for t in trajs])


# -- fusion and loss -----------------------------------------------------------------------

@dataclass
class FuseParams:
    W: np.ndarray
    b: np.ndarray
    log_tau: float

    @property
    def tau(self):
        return math.exp(self.log_tau)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "FuseParams":
        bound = 1.0 / math.sqrt(in_dim)
        return cls(rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim), math.log(TAU0))

    def copy(self):
        return FuseParams(self.W.copy(), self.b.copy(), float(self.log_tau))

    def to_dict(self):
        return {"W": self.W.tolist(), "b": self.b.tolist(), "log_tau": self.log_tau}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["W"], dtype=float), np.asarray(d["b"], dtype=float), float(d["log_tau"]))


def _normalize_rows(Z, batch_index=None):
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericFailure("fused vector has zero or non-finite norm", batch_index)
    return Z / norms, norms


def fuse_forward(p: FuseParams, geo: np.ndarray, sem: np.ndarray) -> np.ndarray:
    x = np.concatenate([geo, sem])
    if x.shape[0] != p.W.shape[1]:
        raise InvalidArgument(f"feature size {x.shape[0]} does not match W {p.W.shape}")
    return _normalize_rows((p.W @ x + p.b)[None, :])[0][0]


def fuse_batch(p: FuseParams, X: np.ndarray, batch_index=None) -> np.ndarray:
    return _normalize_rows(X @ p.W.T + p.b, batch_index)[0]


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def infonce_loss_and_grads(p: FuseParams, Q: np.ndarray, X: np.ndarray, batch_index=None):
    """InfoNCE loss over aligned rows of ``Q`` (unit queries) and ``X`` (features).

    Returns ``(loss, {"W": dW, "b": db, "log_tau": dlog_tau})``.
    """
    B = Q.shape[0]
    if B < 1 or X.shape[0] != B:
        raise InvalidArgument("batch needs B >= 1 aligned rows")
    Z = X @ p.W.T + p.b
    U, norms = _normalize_rows(Z, batch_index)
    tau = p.tau
    S = Q @ U.T
    logits = S / tau
    lse = _logsumexp(logits, axis=1)
    loss = float(np.mean(lse - np.diag(logits)))
    if not math.isfinite(loss):
        raise NumericFailure("non-finite InfoNCE loss", batch_index)

    soft = np.exp(logits - lse[:, None])
    A = (soft - np.eye(B)) / B  # dL/dlogits
    dlog_tau = float(np.sum(A * -logits))
    dS = A / tau
    dU = dS.T @ Q
    # back through row normalisation: (I - u u^T) / |z|
    dZ = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms
    grads = {"W": dZ.T @ X, "b": dZ.sum(axis=0), "log_tau": dlog_tau}
    if not (np.all(np.isfinite(grads["W"])) and math.isfinite(dlog_tau)):
        raise NumericFailure("non-finite gradient", batch_index)
    return loss, grads


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidArgument(f"invalid training config {self}")


@dataclass
class TrainResult:
    params: FuseParams
    losses: list = field(default_factory=list)


def train_features(Q: np.ndarray, X: np.ndarray, cfg: TrainConfig) -> TrainResult:
    n = Q.shape[0]
    if n < cfg.batch_size:
        raise InvalidArgument(f"need at least {cfg.batch_size} pairs, got {n}")
    rng = np.random.default_rng(cfg.seed)
    p = FuseParams.init(X.shape[1], Q.shape[1], rng)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = infonce_loss_and_grads(p, Q[idx], X[idx], bi)
            p.W -= cfg.lr * grads["W"]
            p.b -= cfg.lr * grads["b"]
            p.log_tau -= cfg.lr * grads["log_tau"]
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
    return TrainResult(p, losses)


def train(pairs: Sequence[tuple[str, Trajectory]], g: RoadGraph, cells: CellIndex,
          embedder=None, cfg: TrainConfig | None = None) -> TrainResult:
    embedder = embedder or HashEmbedder()
    cfg = cfg or TrainConfig()
    Q = embedder.embed([q for q, _ in pairs])
    X = encode_features([t for _, t in pairs], g, cells, embedder)
    return train_features(Q, X, cfg)


# -- retrieval database -------------------------------------------------------------------------

@dataclass
class FusedDB:
    ids: list
    vectors: np.ndarray

    def __len__(self):
        return len(self.ids)


def build_db(p: FuseParams, trajs: Sequence[Trajectory], g: RoadGraph, cells: CellIndex, embedder=None) -> FusedDB:
    embedder = embedder or HashEmbedder()
    X = encode_features(trajs, g, cells, embedder)
    return FusedDB([t.mm_id for t in trajs], fuse_batch(p, X))


def retrieve(query: str, db: FusedDB, embedder=None, k: int = 10) -> list:
    if len(db) == 0:
        raise InvalidState("fused database is empty")
    embedder = embedder or HashEmbedder()
    sims = db.vectors @ embedder.embed([query])[0]
    order = sorted(range(len(db)), key=lambda i: (-sims[i], db.ids[i]))
    return [db.ids[i] for i in order[:k]]


def save_db(db: FusedDB, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_schema": "fused", "version": 1, "dim": int(db.vectors.shape[1])}) + "\n")
        for tid, vec in zip(db.ids, db.vectors):
            fh.write(json.dumps({"traj_id": tid, "vector": [float(x) for x in vec]}) + "\n")


def load_db(path) -> FusedDB:
    ids, vecs = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "_schema" in rec:
                continue
            ids.append(rec["traj_id"])
            vecs.append(rec["vector"])
    return FusedDB(ids, np.array(vecs, dtype=float))


class FuseRetriever(BaseEstimator):
    """``fit`` on (query, trajectory) pairs; ``index`` a database; ``predict`` rankings."""

    def __init__(self, graph=None, cells=None, embedder=None, epochs=50, batch_size=32, lr=0.5, seed=0, k=50):
        self.graph = graph
        self.cells = cells
        self.embedder = embedder
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.k = k

    def _emb(self):
        return self.embedder or HashEmbedder()

    def fit(self, X, y=None):
        if self.graph is None or self.cells is None:
            raise InvalidArgument("FuseRetriever needs a road graph and a cell index")
        cfg = TrainConfig(self.epochs, self.batch_size, self.lr, self.seed)
        res = train(list(X), self.graph, self.cells, self._emb(), cfg)
        self.params_, self.losses_ = res.params, res.losses
        return self

    def transform(self, trajs):
        self._check()
        X = encode_features(list(trajs), self.graph, self.cells, self._emb())
        return fuse_batch(self.params_, X)

    def index(self, trajs):
        self._check()
        self.db_ = build_db(self.params_, list(trajs), self.graph, self.cells, self._emb())
        return self

    def predict(self, queries: Sequence[str]) -> list[list[Hashable]]:
        if not hasattr(self, "db_"):
            raise InvalidState("call index() before predict()")
        return [retrieve(q, self.db_, self._emb(), self.k) for q in queries]

    def _check(self):
        if not hasattr(self, "params_"):
            raise InvalidState("FuseRetriever is not fitted")
