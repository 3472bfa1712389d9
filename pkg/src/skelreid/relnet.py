"""The skeleton encoder: masked multi-head attention over each body graph,
softmax inner-product relations across graph levels, residual feature
fusion, and mean pooling over frames into one sequence embedding.

All forward functions record onto the parameter tape (see numkit), so the
same code path serves inference and training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numkit as nk
from .skeldata import (
    MultiLevelGraph,
    PartitionScheme,
    SkeletonSequence,
    build_graphs,
    center_frame,
    scheme_from_dict,
    scheme_to_dict,
)

COORD_DIM = 3
LEAKY_SLOPE = 0.2

_ACTIVATIONS = {
    "tanh": nk.tanh,
    "relu": nk.relu,
    "identity": lambda t: t,
}

# level pairs (a, b), a <= b, 0-based; includes same-level and the
# non-adjacent (part, hyper-body) pair
LEVEL_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass(frozen=True)
class EncoderConfig:
    """Hyperparameters of the encoder."""

    feature_dim: int = 8      # per-node feature width after projection
    heads: int = 8            # attention heads per level
    fusion_coeff: float = 1.0 # weight of cross-level fused features
    activation: str = "tanh"  # nonlinearity applied to aggregated features

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.fusion_coeff < 0:
            raise ValueError(f"fusion_coeff must be >= 0, got {self.fusion_coeff}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}"
            )


def expected_param_count(config: EncoderConfig, n_levels: int = 3) -> int:
    """Closed-form weight count, asserted as a structural self-check."""
    dh = config.feature_dim
    per_head = COORD_DIM * dh + 2 * dh
    n_pairs = n_levels * (n_levels + 1) // 2
    return n_levels * config.heads * per_head + n_pairs * dh * dh


@dataclass
class NodeFeatures:
    """Per-level node feature matrices (n_l x feature_dim nodes)."""

    levels: tuple[nk.Tensor2, ...]


@dataclass
class SequenceEmbedding:
    """Flattened sequence-level representation of one skeleton sequence."""

    vector: np.ndarray
    identity: str | None = None
    view: str | None = None


class ModelParams:
    """All learnable encoder weights, registered on one ParamTape.

    Per level l and head s: a projection `l{l}.h{s}.wv` (3 x Dh) and a
    relation vector `l{l}.h{s}.wr` (2 Dh x 1). Per level pair a <= b: a
    fusion map `wc.{a}{b}` (Dh x Dh), stored in the orientation that maps
    column feature vectors.
    """

    def __init__(self, scheme: PartitionScheme, config: EncoderConfig, tape: nk.ParamTape):
        self.scheme = scheme
        self.config = config
        self.tape = tape

    @classmethod
    def init(cls, scheme: PartitionScheme, config: EncoderConfig, seed: int) -> "ModelParams":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        dh = config.feature_dim
        tape = nk.ParamTape()
        for level in range(1, 4):
            for head in range(config.heads):
                bound = 1.0 / np.sqrt(COORD_DIM)
                tape.parameter(
                    f"l{level}.h{head}.wv",
                    rng.uniform(-bound, bound, size=(COORD_DIM, dh)),
                )
                bound = 1.0 / np.sqrt(2 * dh)
                tape.parameter(
                    f"l{level}.h{head}.wr",
                    rng.uniform(-bound, bound, size=(2 * dh, 1)),
                )
        for a, b in LEVEL_PAIRS:
            bound = 1.0 / np.sqrt(dh)
            tape.parameter(
                f"wc.{a + 1}{b + 1}",
                rng.uniform(-bound, bound, size=(dh, dh)),
            )
        return cls(scheme, config, tape)

    @property
    def embedding_dim(self) -> int:
        return sum(self.scheme.node_counts) * self.config.feature_dim

    def param_count(self) -> int:
        return self.tape.size()

    # -- persistence ---------------------------------------------------

    def save(self, path: str | Path, extra_metadata: dict | None = None) -> None:
        metadata = {
            "encoder": {
                "feature_dim": self.config.feature_dim,
                "heads": self.config.heads,
                "fusion_coeff": self.config.fusion_coeff,
                "activation": self.config.activation,
            },
            "scheme": scheme_to_dict(self.scheme),
        }
        if extra_metadata:
            metadata["extra"] = extra_metadata
        payload = nk.checkpoint_payload(self.tape, metadata)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        doc = json.loads(Path(path).read_text())
        metadata, arrays = nk.load_checkpoint_payload(doc)
        enc = metadata["encoder"]
        config = EncoderConfig(
            feature_dim=int(enc["feature_dim"]),
            heads=int(enc["heads"]),
            fusion_coeff=float(enc["fusion_coeff"]),
            activation=str(enc["activation"]),
        )
        scheme = scheme_from_dict(metadata["scheme"])
        tape = nk.ParamTape()
        for name, arr in arrays.items():
            tape.parameter(name, arr)
        model = cls(scheme, config, tape)
        if model.param_count() != expected_param_count(config):
            raise ValueError(
                f"checkpoint holds {model.param_count()} weights, "
                f"expected {expected_param_count(config)}"
            )
        return model


@lru_cache(maxsize=8)
def neighbor_masks(scheme: PartitionScheme) -> tuple[np.ndarray, ...]:
    """Per level: boolean (n, n) mask of edge-adjacent nodes plus self."""
    masks = []
    for level in scheme.levels:
        n = level.node_count
        m = np.eye(n, dtype=bool)
        for i, j in level.edges:
            m[i, j] = True
            m[j, i] = True
        masks.append(m)
    return tuple(masks)


class ForwardContext:
    """Weight views shared by every frame of one recorded forward pass.

    Slices and transposes of parameters are tape nodes; they are valid for
    exactly one backward pass, so a fresh context must be created whenever
    parameter values may have changed.
    """

    def __init__(self, params: ModelParams):
        dh = params.config.feature_dim
        tape = params.tape
        self.params = params
        self.masks = neighbor_masks(params.scheme)
        self.act = _ACTIVATIONS[params.config.activation]
        self.wv = []
        self.attn_self = []
        self.attn_neigh = []
        self.wv_all = []
        self.attn_self_all = []
        self.attn_neigh_all = []
        for level in range(1, 4):
            wv_row = []
            a_row = []
            b_row = []
            for head in range(params.config.heads):
                wv_row.append(tape[f"l{level}.h{head}.wv"])
                wr = tape[f"l{level}.h{head}.wr"]
                a_row.append(nk.slice_rows(wr, 0, dh))
                b_row.append(nk.slice_rows(wr, dh, 2 * dh))
            self.wv.append(wv_row)
            self.attn_self.append(a_row)
            self.attn_neigh.append(b_row)
            self.wv_all.append(nk.concat_cols(wv_row))
            self.attn_self_all.append(nk.concat_rows(a_row))
            self.attn_neigh_all.append(nk.concat_rows(b_row))
        self.wc_t = {
            (a, b): nk.transpose(tape[f"wc.{a + 1}{b + 1}"]) for a, b in LEVEL_PAIRS
        }


def structural_heads(
    graph: MultiLevelGraph,
    level: int,
    params: ModelParams,
    ctx: ForwardContext | None = None,
) -> tuple[list[nk.Tensor2], list[nk.Tensor2]]:
    """Per-head masked attention over one graph level.

    For head s, relation logits between node i and neighbor j (neighbors
    include i itself) are LeakyReLU(wr . [wv v_i || wv v_j]); rows are
    softmax-normalized over the neighbor support and used to aggregate
    projected neighbor features through the nonlinearity.

    Returns (attention matrices, per-head node outputs).
    """
    if ctx is None:
        ctx = ForwardContext(params)
    nodes = nk.constant(graph.nodes[level])
    mask = ctx.masks[level]
    attn = []
    outs = []
    for head in range(params.config.heads):
        h = nk.matmul(nodes, ctx.wv[level][head])
        e_self = nk.matmul(h, ctx.attn_self[level][head])
        e_neigh = nk.matmul(h, ctx.attn_neigh[level][head])
        logits = nk.leaky_relu(nk.add_outer(e_self, e_neigh), LEAKY_SLOPE)
        a = nk.softmax_rows(logits, mask)
        attn.append(a)
        outs.append(ctx.act(nk.matmul(a, h)))
    return attn, outs


def msrl(
    graph: MultiLevelGraph,
    params: ModelParams,
    ctx: ForwardContext | None = None,
    capture: dict | None = None,
) -> NodeFeatures:
    """Multi-head structural relation layer: average the head outputs of
    every level into one feature matrix per level.

    Runs all heads of a level through one batched kernel; equal to the
    per-head structural_heads path.
    """
    if ctx is None:
        ctx = ForwardContext(params)
    heads = params.config.heads
    levels = []
    for level in range(3):
        h_all = nk.matmul(nk.constant(graph.nodes[level]), ctx.wv_all[level])
        stacked, attn = nk.graph_attention_heads(
            h_all,
            ctx.attn_self_all[level],
            ctx.attn_neigh_all[level],
            ctx.masks[level],
            heads,
            LEAKY_SLOPE,
            params.config.activation,
        )
        if capture is not None:
            capture.setdefault("structural", {})[level] = [attn[s].copy() for s in range(heads)]
        levels.append(nk.mean_row_blocks(stacked, heads))
    return NodeFeatures(levels=tuple(levels))


def fcrl(features: NodeFeatures) -> dict[tuple[int, int], nk.Tensor2]:
    """Full-level collaborative relation layer: softmax-normalized inner
    products between node features of every level pair a <= b."""
    relations = {}
    for a, b in LEVEL_PAIRS:
        scores = nk.matmul(features.levels[a], nk.transpose(features.levels[b]))
        relations[(a, b)] = nk.softmax_rows(scores)
    return relations


def fuse(
    features: NodeFeatures,
    relations: dict[tuple[int, int], nk.Tensor2],
    params: ModelParams,
    ctx: ForwardContext | None = None,
) -> NodeFeatures:
    """Residual cross-level feature fusion.

    Level a receives, for every b >= a, the relation-weighted fusion-mapped
    features of level b, scaled by the fusion coefficient. All right-hand
    sides read the pre-fusion features, so no update cascades into another.
    """
    if ctx is None:
        ctx = ForwardContext(params)
    lam = params.config.fusion_coeff
    fused = []
    for a in range(3):
        total = features.levels[a]
        for b in range(a, 3):
            mapped = nk.matmul(features.levels[b], ctx.wc_t[(a, b)])
            term = nk.matmul(relations[(a, b)], mapped)
            total = nk.add(total, nk.scale(term, lam))
        fused.append(total)
    return NodeFeatures(levels=tuple(fused))


def encode_frame(
    graph: MultiLevelGraph,
    params: ModelParams,
    ctx: ForwardContext | None = None,
    capture: dict | None = None,
) -> nk.Tensor2:
    """Encode one frame into the stacked (n1+n2+n3) x Dh representation,
    row blocks ordered part level, body level, hyper-body level."""
    if ctx is None:
        ctx = ForwardContext(params)
    features = msrl(graph, params, ctx, capture=capture)
    relations = fcrl(features)
    if capture is not None:
        capture["collaborative"] = {
            pair: rel.array.copy() for pair, rel in relations.items()
        }
    fused = fuse(features, relations, params, ctx)
    return nk.concat_rows(list(fused.levels))


def encode_sequence_node(
    graphs: list[MultiLevelGraph],
    params: ModelParams,
    ctx: ForwardContext | None = None,
) -> nk.Tensor2:
    """Mean of the frame representations, flattened row-major to 1 x dim.

    The mean is exactly invariant to frame order (compensated summation),
    and every frame contributes equally.
    """
    if not graphs:
        raise ValueError("cannot encode an empty sequence")
    if ctx is None:
        ctx = ForwardContext(params)
    reps = [encode_frame(g, params, ctx) for g in graphs]
    pooled = nk.mean_stack(reps)
    return nk.reshape(pooled, 1, pooled.rows * pooled.cols)


def sequence_graphs(
    sequence: SkeletonSequence, scheme: PartitionScheme, center: bool = True
) -> list[MultiLevelGraph]:
    """Build the per-frame multi-level graphs, optionally torso-centered."""
    frames = sequence.frames
    if center:
        frames = [center_frame(f, scheme) for f in frames]
    return [build_graphs(f, scheme) for f in frames]


def encode_sequence(
    sequence: SkeletonSequence,
    params: ModelParams,
    scheme: PartitionScheme | None = None,
    center: bool = True,
) -> SequenceEmbedding:
    """Convenience forward pass for one sequence; tags carried through."""
    if scheme is None:
        scheme = params.scheme
    elif scheme.node_counts != params.scheme.node_counts:
        raise ValueError(
            f"scheme {scheme.name!r} node counts {scheme.node_counts} do not match "
            f"the model's {params.scheme.node_counts}"
        )
    graphs = sequence_graphs(sequence, scheme, center=center)
    with nk.no_grad():
        node = encode_sequence_node(graphs, params)
    return SequenceEmbedding(
        vector=node.array.ravel().copy(),
        identity=sequence.identity,
        view=sequence.view,
    )
