"""Skeleton sequence ingestion and multi-level body graph construction.

A skeleton frame is a set of J body joints in 3D. Frames are grouped into
sequences (optionally labeled with an identity and a camera/view tag), and
each frame is condensed into three coarse-to-fine graphs whose nodes are
weighted averages of joints belonging to the same body partition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a skeleton file does not conform to the wire format."""


class SchemeError(ValueError):
    """Raised when a partition scheme is structurally invalid."""


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkeletonFrame:
    """One skeleton: J body joints as a (J, 3) float64 array, in meters."""

    joints: np.ndarray

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]


@dataclass
class SkeletonSequence:
    """Ordered frames sharing one joint layout, plus optional tags.

    The identity label is only ever consumed by evaluation code; training
    never reads it.
    """

    frames: list[SkeletonFrame]
    identity: str | None = None
    view: str | None = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def joint_count(self) -> int:
        return self.frames[0].joint_count


@dataclass(frozen=True)
class Partition:
    """Joint indices merged into one node, with weights summing to 1."""

    joints: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class GraphLevel:
    partitions: tuple[Partition, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def node_count(self) -> int:
        return len(self.partitions)


@dataclass(frozen=True)
class PartitionScheme:
    """Three-level body partitioning: which joints form each node, and
    which nodes are physically connected, per level (fine to coarse)."""

    name: str
    joint_count: int
    levels: tuple[GraphLevel, ...]
    center_node: int | None = None  # part-level node subtracted by center_frame

    @property
    def node_counts(self) -> tuple[int, ...]:
        return tuple(level.node_count for level in self.levels)


@dataclass(frozen=True)
class MultiLevelGraph:
    """Per-level node positions for one frame; edges shared via the scheme."""

    nodes: tuple[np.ndarray, ...]
    scheme: PartitionScheme


@dataclass(frozen=True)
class DatasetLayout:
    """Declares what a dataset's files must contain."""

    name: str
    joint_count: int


# ---------------------------------------------------------------------------
# partition schemes
# ---------------------------------------------------------------------------


def validate_scheme(scheme: PartitionScheme) -> None:
    """Check the structural invariants of a scheme; raise SchemeError."""
    if len(scheme.levels) != 3:
        raise SchemeError(f"scheme {scheme.name!r}: expected 3 levels, got {len(scheme.levels)}")
    if scheme.joint_count < 1:
        raise SchemeError(f"scheme {scheme.name!r}: joint_count must be >= 1")
    for li, level in enumerate(scheme.levels, start=1):
        n = level.node_count
        if n < 1:
            raise SchemeError(f"scheme {scheme.name!r}: level {li} has no partitions")
        for pi, part in enumerate(level.partitions):
            if len(part.joints) == 0:
                raise SchemeError(f"scheme {scheme.name!r}: level {li} partition {pi} is empty")
            if len(part.joints) != len(part.weights):
                raise SchemeError(
                    f"scheme {scheme.name!r}: level {li} partition {pi}: "
                    f"{len(part.joints)} joints vs {len(part.weights)} weights"
                )
            for j in part.joints:
                if not 0 <= j < scheme.joint_count:
                    raise SchemeError(
                        f"scheme {scheme.name!r}: level {li} partition {pi} references "
                        f"joint {j}, valid range is [0, {scheme.joint_count})"
                    )
            if any(w < 0 for w in part.weights):
                raise SchemeError(f"scheme {scheme.name!r}: level {li} partition {pi} has a negative weight")
            if abs(sum(part.weights) - 1.0) > 1e-9:
                raise SchemeError(
                    f"scheme {scheme.name!r}: level {li} partition {pi} weights sum to "
                    f"{sum(part.weights)!r}, expected 1"
                )
        seen = set()
        for i, j in level.edges:
            if i == j:
                raise SchemeError(f"scheme {scheme.name!r}: level {li} has self-loop edge ({i},{j})")
            if not (0 <= i < n and 0 <= j < n):
                raise SchemeError(f"scheme {scheme.name!r}: level {li} edge ({i},{j}) out of range [0,{n})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise SchemeError(f"scheme {scheme.name!r}: level {li} edge ({i},{j}) duplicated")
            seen.add(key)
    if scheme.center_node is not None:
        n0 = scheme.levels[0].node_count
        if not 0 <= scheme.center_node < n0:
            raise SchemeError(
                f"scheme {scheme.name!r}: center_node {scheme.center_node} out of range [0,{n0})"
            )


def _uniform(joints: tuple[int, ...]) -> Partition:
    w = 1.0 / len(joints)
    return Partition(joints=joints, weights=tuple(w for _ in joints))


# Canonical 20-joint layout (depth-sensor convention):
#   0 hip_center   1 spine         2 shoulder_center  3 head
#   4 shoulder_l   5 elbow_l       6 wrist_l          7 hand_l
#   8 shoulder_r   9 elbow_r      10 wrist_r         11 hand_r
#  12 hip_l       13 knee_l       14 ankle_l         15 foot_l
#  16 hip_r       17 knee_r       18 ankle_r         19 foot_r
BUILTIN20 = PartitionScheme(
    name="builtin20",
    joint_count=20,
    levels=(
        # part level: 10 nodes along the kinematic chain
        GraphLevel(
            partitions=(
                _uniform((3, 2)),     # 0 head + neck
                _uniform((0, 1)),     # 1 torso
                _uniform((4, 5)),     # 2 left upper arm
                _uniform((6, 7)),     # 3 left forearm + hand
                _uniform((8, 9)),     # 4 right upper arm
                _uniform((10, 11)),   # 5 right forearm + hand
                _uniform((12, 13)),   # 6 left thigh
                _uniform((14, 15)),   # 7 left shin + foot
                _uniform((16, 17)),   # 8 right thigh
                _uniform((18, 19)),   # 9 right shin + foot
            ),
            edges=((0, 1), (1, 2), (1, 4), (1, 6), (1, 8), (2, 3), (4, 5), (6, 7), (8, 9)),
        ),
        # body level: 5 nodes, star on the trunk
        GraphLevel(
            partitions=(
                _uniform((0, 1, 2, 3)),      # 0 head + torso
                _uniform((4, 5, 6, 7)),      # 1 left arm
                _uniform((8, 9, 10, 11)),    # 2 right arm
                _uniform((12, 13, 14, 15)),  # 3 left leg
                _uniform((16, 17, 18, 19)),  # 4 right leg
            ),
            edges=((0, 1), (0, 2), (0, 3), (0, 4)),
        ),
        # hyper-body level: 3 nodes, arms - trunk - legs path
        GraphLevel(
            partitions=(
                _uniform((0, 1, 2, 3)),
                _uniform((4, 5, 6, 7, 8, 9, 10, 11)),
                _uniform((12, 13, 14, 15, 16, 17, 18, 19)),
            ),
            edges=((0, 1), (0, 2)),
        ),
    ),
    center_node=1,
)
validate_scheme(BUILTIN20)


def load_scheme(source: str | Path) -> PartitionScheme:
    """Load a partition scheme from a JSON file, or return the built-in one
    when source is the literal string "builtin20"."""
    if str(source) == "builtin20":
        return BUILTIN20
    path = Path(source)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemeError(f"{path}: not valid JSON: {exc}") from exc
    try:
        levels = []
        for level_doc in doc["levels"]:
            partitions = []
            for part_doc in level_doc["partitions"]:
                joints = tuple(int(j) for j in part_doc["joints"])
                if "weights" in part_doc:
                    weights = tuple(float(w) for w in part_doc["weights"])
                    partitions.append(Partition(joints=joints, weights=weights))
                else:
                    partitions.append(_uniform(joints))
            edges = tuple((int(i), int(j)) for i, j in level_doc.get("edges", []))
            levels.append(GraphLevel(partitions=tuple(partitions), edges=edges))
        center = doc.get("center_node")
        scheme = PartitionScheme(
            name=str(doc.get("name", path.stem)),
            joint_count=int(doc["joint_count"]),
            levels=tuple(levels),
            center_node=None if center is None else int(center),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemeError(f"{path}: malformed scheme document: {exc}") from exc
    validate_scheme(scheme)
    return scheme


def scheme_to_dict(scheme: PartitionScheme) -> dict:
    """Plain-JSON representation, also embedded in checkpoints."""
    return {
        "name": scheme.name,
        "joint_count": scheme.joint_count,
        "center_node": scheme.center_node,
        "levels": [
            {
                "partitions": [
                    {"joints": list(p.joints), "weights": list(p.weights)}
                    for p in level.partitions
                ],
                "edges": [list(e) for e in level.edges],
            }
            for level in scheme.levels
        ],
    }


def scheme_from_dict(doc: dict) -> PartitionScheme:
    scheme = PartitionScheme(
        name=str(doc["name"]),
        joint_count=int(doc["joint_count"]),
        levels=tuple(
            GraphLevel(
                partitions=tuple(
                    Partition(joints=tuple(p["joints"]), weights=tuple(p["weights"]))
                    for p in level["partitions"]
                ),
                edges=tuple(tuple(e) for e in level["edges"]),
            )
            for level in doc["levels"]
        ),
        center_node=doc.get("center_node"),
    )
    validate_scheme(scheme)
    return scheme


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def build_graphs(frame: SkeletonFrame, scheme: PartitionScheme) -> MultiLevelGraph:
    """Condense one frame into the scheme's three node sets.

    Node i at level l is the weighted average of its partition's joints.
    """
    if frame.joint_count != scheme.joint_count:
        raise ValueError(
            f"frame has {frame.joint_count} joints, scheme {scheme.name!r} "
            f"expects {scheme.joint_count}"
        )
    nodes = []
    for level in scheme.levels:
        out = np.empty((level.node_count, 3), dtype=np.float64)
        for i, part in enumerate(level.partitions):
            idx = np.asarray(part.joints, dtype=np.intp)
            w = np.asarray(part.weights, dtype=np.float64)
            out[i] = w @ frame.joints[idx]
        nodes.append(out)
    return MultiLevelGraph(nodes=tuple(nodes), scheme=scheme)


def center_frame(frame: SkeletonFrame, scheme: PartitionScheme) -> SkeletonFrame:
    """Subtract the torso-node position (scheme.center_node at the part
    level) from every joint; falls back to the joint centroid when the
    scheme declares no center node."""
    if scheme.center_node is None:
        offset = frame.joints.mean(axis=0)
    else:
        part = scheme.levels[0].partitions[scheme.center_node]
        idx = np.asarray(part.joints, dtype=np.intp)
        w = np.asarray(part.weights, dtype=np.float64)
        offset = w @ frame.joints[idx]
    return SkeletonFrame(joints=frame.joints - offset)


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

_JSONL_SUFFIXES = {".jsonl", ".ndjson"}
_CSV_SUFFIXES = {".csv"}


def _validate_frames(
    raw: list, *, source: str, record: str, expected_joints: int
) -> list[SkeletonFrame]:
    if not raw:
        raise DatasetFormatError(f"{source}: {record}: field 'frames' is empty")
    frames = []
    for fi, frame_doc in enumerate(raw):
        arr = np.asarray(frame_doc, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DatasetFormatError(
                f"{source}: {record}: frame {fi} has shape {arr.shape}, expected (J, 3)"
            )
        if arr.shape[0] != expected_joints:
            raise DatasetFormatError(
                f"{source}: {record}: frame {fi} has {arr.shape[0]} joints, "
                f"expected {expected_joints}"
            )
        if not np.isfinite(arr).all():
            raise DatasetFormatError(
                f"{source}: {record}: frame {fi} contains a non-finite coordinate"
            )
        frames.append(SkeletonFrame(joints=arr))
    return frames


def _load_jsonl(path: Path, expected_joints: int) -> list[SkeletonSequence]:
    sequences = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: {where}: invalid JSON: {exc}") from exc
            if not isinstance(doc, dict) or "frames" not in doc:
                raise DatasetFormatError(f"{path}: {where}: field 'frames' missing")
            identity = doc.get("id")
            view = doc.get("view")
            if identity is not None and not isinstance(identity, str):
                identity = str(identity)
            if view is not None and not isinstance(view, str):
                view = str(view)
            try:
                frames = _validate_frames(
                    doc["frames"], source=str(path), record=where, expected_joints=expected_joints
                )
            except (TypeError, ValueError) as exc:
                if isinstance(exc, DatasetFormatError):
                    raise
                raise DatasetFormatError(f"{path}: {where}: field 'frames' malformed: {exc}") from exc
            sequences.append(SkeletonSequence(frames=frames, identity=identity, view=view))
    return sequences


def _load_csv(path: Path, expected_joints: int) -> list[SkeletonSequence]:
    """CSV variant: one frame per row as seq_id, frame_idx, then 3J floats.

    Rows are grouped by seq_id in first-appearance order and sorted by
    frame_idx within a sequence; this format carries no identity labels.
    """
    per_seq: dict[str, list[tuple[int, np.ndarray]]] = {}
    order: list[str] = []
    want = 2 + 3 * expected_joints
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip() == "seq_id":
                continue  # optional header
            where = f"line {lineno}"
            if len(row) != want:
                raise DatasetFormatError(
                    f"{path}: {where}: {len(row)} columns, expected {want} "
                    f"(seq_id, frame_idx, {3 * expected_joints} coordinates)"
                )
            seq_id = row[0].strip()
            try:
                frame_idx = int(row[1])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: {where}: field 'frame_idx' is not an integer") from exc
            try:
                coords = np.asarray([float(x) for x in row[2:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: {where}: non-numeric coordinate: {exc}") from exc
            if not np.isfinite(coords).all():
                raise DatasetFormatError(f"{path}: {where}: non-finite coordinate in frame {frame_idx}")
            if seq_id not in per_seq:
                per_seq[seq_id] = []
                order.append(seq_id)
            per_seq[seq_id].append((frame_idx, coords.reshape(expected_joints, 3)))
    sequences = []
    for seq_id in order:
        rows = per_seq[seq_id]
        seen = set()
        for frame_idx, _ in rows:
            if frame_idx in seen:
                raise DatasetFormatError(f"{path}: sequence {seq_id!r}: duplicate frame_idx {frame_idx}")
            seen.add(frame_idx)
        rows.sort(key=lambda item: item[0])
        frames = [SkeletonFrame(joints=arr) for _, arr in rows]
        sequences.append(SkeletonSequence(frames=frames, identity=None, view=None))
    return sequences


def load_dataset(path: str | Path, layout: DatasetLayout) -> list[SkeletonSequence]:
    """Load every skeleton sequence under path (a file or a directory).

    Files are read in lexicographic name order and records in file order,
    so the result ordering is deterministic.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir()
            if p.suffix.lower() in (_JSONL_SUFFIXES | _CSV_SUFFIXES) and p.is_file()
        )
    else:
        files = [path]
    sequences: list[SkeletonSequence] = []
    for file in files:
        if file.suffix.lower() in _CSV_SUFFIXES:
            sequences.extend(_load_csv(file, layout.joint_count))
        else:
            sequences.extend(_load_jsonl(file, layout.joint_count))
    return sequences


def write_jsonl(sequences: list[SkeletonSequence], path: str | Path) -> None:
    """Write sequences in the line-delimited wire format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for seq in sequences:
            doc = {
                "id": seq.identity,
                "view": seq.view,
                "frames": [frame.joints.tolist() for frame in seq.frames],
            }
            fh.write(json.dumps(doc) + "\n")


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def split_sequences(
    sequences: list[SkeletonSequence], window: int, stride: int
) -> list[SkeletonSequence]:
    """Cut each recording into fixed-length windows; recordings shorter
    than the window are dropped."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = []
    for seq in sequences:
        for start in range(0, len(seq) - window + 1, stride):
            out.append(
                SkeletonSequence(
                    frames=seq.frames[start : start + window],
                    identity=seq.identity,
                    view=seq.view,
                )
            )
    return out
