"""Prototype contrastive training on unlabeled sequence embeddings.

Each epoch alternates two phases: density-cluster all current embeddings
(outliers discarded) and form one L2-normalized prototype per cluster,
then minimize a temperature-scaled cross entropy that pulls every
clustered instance toward its own prototype and away from the others.
Identity labels are never read here.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit as nk
from .relnet import ForwardContext, ModelParams, encode_sequence_node, sequence_graphs
from .skeldata import SkeletonSequence

OUTLIER = -1
_UNVISITED = -2


class NoClusters(RuntimeError):
    """Raised when an epoch produces no clusters at all."""


@dataclass
class SpcConfig:
    """Clustering and contrastive-training hyperparameters."""

    eps: float = 0.8
    a_min: int = 2
    tau: float = 0.08
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    lr: float = 0.00035
    center: bool = True
    checkpoint_every: int = 0
    max_empty_epochs: int = 5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.a_min < 1:
            raise ValueError(f"a_min must be >= 1, got {self.a_min}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class ClusterState:
    """One epoch's clustering: per-instance assignment (OUTLIER or
    0..z-1), cluster sizes, and optional normalized prototypes."""

    assignment: np.ndarray
    z: int
    sizes: np.ndarray
    prototypes: np.ndarray | None = None

    @property
    def n_outliers(self) -> int:
        return int(np.count_nonzero(self.assignment == OUTLIER))

    def clustered_indices(self) -> np.ndarray:
        return np.flatnonzero(self.assignment != OUTLIER)


def l2_normalize_rows(arr: np.ndarray) -> np.ndarray:
    """Rows scaled to unit Euclidean norm; zero rows are an error."""
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.sqrt((arr * arr).sum(axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot normalize zero-norm embedding at index {int(zero[0])}")
    return arr / norms[:, None]


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def dbscan(instances: np.ndarray, eps: float, a_min: int) -> ClusterState:
    """Standard density clustering with deterministic expansion order.

    A point is core when at least a_min points (itself included) lie
    within eps (Euclidean, inclusive). Clusters are connected components
    of core points plus reachable border points; everything else is an
    outlier. Points are processed in ascending index order, and a border
    point reachable from several clusters joins the one discovered first.
    """
    pts = np.asarray(instances, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("dbscan expects a non-empty (N, dim) array")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if a_min < 1:
        raise ValueError(f"a_min must be >= 1, got {a_min}")

    n = pts.shape[0]
    sq = (pts * pts).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    within = d2 <= eps * eps
    neighbor_lists = [np.flatnonzero(within[i]) for i in range(n)]
    core = np.array([len(lst) >= a_min for lst in neighbor_lists])

    labels = np.full(n, _UNVISITED, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != _UNVISITED:
            continue
        if not core[i]:
            labels[i] = OUTLIER
            continue
        labels[i] = cluster
        seeds = list(neighbor_lists[i])
        pos = 0
        while pos < len(seeds):
            j = seeds[pos]
            pos += 1
            if labels[j] == OUTLIER:
                labels[j] = cluster  # border point, claimed but not expanded
            elif labels[j] == _UNVISITED:
                labels[j] = cluster
                if core[j]:
                    seeds.extend(neighbor_lists[j])
        cluster += 1

    sizes = np.bincount(labels[labels != OUTLIER], minlength=cluster) if cluster else np.zeros(0, dtype=np.int64)
    return ClusterState(assignment=labels, z=cluster, sizes=sizes)


def make_prototypes(state: ClusterState, instances: np.ndarray) -> ClusterState:
    """Centroid of each cluster's instances, L2-normalized.

    instances must be the same (normalized) matrix that was clustered.
    """
    if state.z < 1:
        raise NoClusters("no clusters this epoch")
    pts = np.asarray(instances, dtype=np.float64)
    prototypes = np.empty((state.z, pts.shape[1]))
    for k in range(state.z):
        members = pts[state.assignment == k]
        prototypes[k] = members.mean(axis=0)
    prototypes = l2_normalize_rows(prototypes)
    return ClusterState(
        assignment=state.assignment, z=state.z, sizes=state.sizes, prototypes=prototypes
    )


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def spc_loss(
    instances: list,
    assignments,
    prototypes: np.ndarray,
    tau: float,
) -> nk.Tensor2:
    """Mean over the batch of -log p(own prototype | instance), where the
    prototype distribution is the softmax of dot-product similarities
    divided by tau.

    instances are 1 x dim normalized embeddings (Tensor2 nodes or plain
    arrays); prototypes are held constant, so no gradient reaches them.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if len(instances) == 0:
        raise ValueError("spc_loss: empty batch")
    if len(instances) != len(assignments):
        raise ValueError("spc_loss: one assignment per instance required")
    proto_t = nk.transpose(nk.constant(prototypes))
    z = proto_t.cols
    losses = []
    for emb, k in zip(instances, assignments):
        k = int(k)
        if not 0 <= k < z:
            raise ValueError(
                f"spc_loss: assignment {k} is not a cluster id in [0, {z}); "
                "outliers must be excluded from the batch"
            )
        node = emb if isinstance(emb, nk.Tensor2) else nk.constant(np.atleast_2d(emb))
        sims = nk.matmul(node, proto_t)
        losses.append(nk.cross_entropy_row(nk.scale(sims, 1.0 / tau), k))
    return nk.mean_stack(losses)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    z: int
    n_outliers: int
    mean_loss: float
    wall_time_ms: float


@dataclass
class TrainResult:
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def first_mean_loss(self) -> float:
        for row in self.epochs:
            if row.z > 0:
                return row.mean_loss
        return float("nan")

    @property
    def final_mean_loss(self) -> float:
        for row in reversed(self.epochs):
            if row.z > 0:
                return row.mean_loss
        return float("nan")


LOG_HEADER = ["epoch", "z", "n_outliers", "mean_loss", "wall_time_ms"]


def _append_log(path: Path, row: EpochLog, write_header: bool) -> None:
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(LOG_HEADER)
        writer.writerow(
            [row.epoch, row.z, row.n_outliers, repr(row.mean_loss), repr(row.wall_time_ms)]
        )


def encode_all(
    graphs_per_seq: list[list],
    model: ModelParams,
) -> np.ndarray:
    """Forward every sequence without recording; rows are flat embeddings."""
    out = np.empty((len(graphs_per_seq), model.embedding_dim))
    with nk.no_grad():
        ctx = ForwardContext(model)
        for i, graphs in enumerate(graphs_per_seq):
            out[i] = encode_sequence_node(graphs, model, ctx).array.ravel()
    return out


def _normalize_node(emb: nk.Tensor2) -> nk.Tensor2:
    norm = nk.sqrt(nk.sum_all(nk.mul(emb, emb)))
    return nk.div_scalar(emb, norm)


def train(
    train_set: list[SkeletonSequence],
    model: ModelParams,
    config: SpcConfig,
    *,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Alternate clustering and contrastive learning over the train set.

    Per epoch: encode every sequence, cluster the normalized embeddings
    and discard outliers, then walk shuffled mini-batches of clustered
    instances, re-encoding each batch through the encoder and stepping
    Adam on the contrastive loss against the epoch's fixed prototypes.
    An epoch with no clusters is logged and skipped; training aborts after
    max_empty_epochs consecutive empty epochs.
    """
    if not train_set:
        raise ValueError("train set is empty")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    adam = nk.AdamState(lr=config.lr)
    graphs_per_seq = [sequence_graphs(seq, model.scheme, center=config.center) for seq in train_set]

    log_path = Path(log_path) if log_path is not None else None
    if log_path is not None and log_path.exists():
        log_path.unlink()
    result = TrainResult()
    consecutive_empty = 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        embeddings = encode_all(graphs_per_seq, model)
        normalized = l2_normalize_rows(embeddings)
        state = dbscan(normalized, config.eps, config.a_min)

        if state.z == 0:
            row = EpochLog(
                epoch=epoch,
                z=0,
                n_outliers=state.n_outliers,
                mean_loss=float("nan"),
                wall_time_ms=(time.perf_counter() - t0) * 1000.0,
            )
            result.epochs.append(row)
            if log_path is not None:
                _append_log(log_path, row, write_header=epoch == 1)
            warnings.warn(f"epoch {epoch}: no clusters (all {len(train_set)} instances are outliers); skipped")
            consecutive_empty += 1
            if consecutive_empty >= config.max_empty_epochs:
                raise NoClusters(
                    f"no clusters for {consecutive_empty} consecutive epochs; "
                    "loosen eps or lower a_min"
                )
            continue
        consecutive_empty = 0
        state = make_prototypes(state, normalized)

        clustered = state.clustered_indices()
        order = rng.permutation(clustered)
        total_loss = 0.0
        total_count = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            ctx = ForwardContext(model)
            nodes = [
                _normalize_node(encode_sequence_node(graphs_per_seq[i], model, ctx))
                for i in batch
            ]
            loss = spc_loss(nodes, state.assignment[batch], state.prototypes, config.tau)
            model.tape.zero_grads()
            nk.backward(loss)
            nk.adam_step(model.tape, adam)
            total_loss += float(loss.array[0, 0]) * len(batch)
            total_count += len(batch)

        row = EpochLog(
            epoch=epoch,
            z=state.z,
            n_outliers=state.n_outliers,
            mean_loss=total_loss / total_count,
            wall_time_ms=(time.perf_counter() - t0) * 1000.0,
        )
        result.epochs.append(row)
        if log_path is not None:
            _append_log(log_path, row, write_header=epoch == 1)
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and epoch % config.checkpoint_every == 0
        ):
            model.save(Path(checkpoint_dir) / f"checkpoint_epoch{epoch:04d}.json")
    return result
