"""Probe/gallery matching and evaluation metrics.

Matching ranks gallery embeddings per probe by Euclidean distance (raw
embeddings by default; a flag switches to the normalized training space).
Quality metrics: CMC top-k hit rates, mean average precision, and two
cosine-geometry scores of the labeled representation space: per-class
intra-class tightness (global mean sample-to-centroid distance over the
class's own mean distance to its centroid) and inter-class looseness
(mean inter-centroid distance over the same global mean).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .relnet import ForwardContext, ModelParams, encode_frame, sequence_graphs, LEVEL_PAIRS
from .spc import l2_normalize_rows
from . import numkit as nk


@dataclass
class LabeledEmbeddings:
    """Embedding matrix plus per-row identity labels and view tags."""

    vectors: np.ndarray
    labels: list
    views: list | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be (N, dim)")
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError("one label per embedding required")
        if self.views is None:
            self.views = [None] * self.vectors.shape[0]
        elif len(self.views) != self.vectors.shape[0]:
            raise ValueError("one view tag per embedding required")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class RankedGallery:
    """Per probe: gallery indices by ascending Euclidean distance (ties
    broken by gallery index), with labels and view tags carried along."""

    order: np.ndarray       # (n_probe, n_gallery) gallery indices
    distances: np.ndarray   # (n_probe, n_gallery) non-decreasing per row
    probe_labels: list
    gallery_labels: list
    probe_views: list
    gallery_views: list


@dataclass
class MetricReport:
    top: dict[int, float]
    mean_ap: float
    mact: float
    mrcl: float
    act_per_class: dict = field(default_factory=dict)
    n_probe: int = 0
    n_gallery: int = 0


def rank(probe: LabeledEmbeddings, gallery: LabeledEmbeddings) -> RankedGallery:
    """Sort the gallery per probe by Euclidean distance, stably."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if probe.vectors.shape[1] != gallery.vectors.shape[1]:
        raise ValueError(
            f"embedding dimension mismatch: probe {probe.vectors.shape[1]} "
            f"vs gallery {gallery.vectors.shape[1]}"
        )
    p2 = (probe.vectors * probe.vectors).sum(axis=1)
    g2 = (gallery.vectors * gallery.vectors).sum(axis=1)
    d2 = p2[:, None] + g2[None, :] - 2.0 * (probe.vectors @ gallery.vectors.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    order = np.argsort(dist, axis=1, kind="stable")
    return RankedGallery(
        order=order,
        distances=np.take_along_axis(dist, order, axis=1),
        probe_labels=list(probe.labels),
        gallery_labels=list(gallery.labels),
        probe_views=list(probe.views),
        gallery_views=list(gallery.views),
    )


def _match_rows(ranked: RankedGallery, exclude_same_view: bool):
    """Yield (probe index, boolean match vector over kept ranked entries)."""
    g_labels = np.asarray(ranked.gallery_labels, dtype=object)
    g_views = np.asarray(ranked.gallery_views, dtype=object)
    for i, label in enumerate(ranked.probe_labels):
        row = ranked.order[i]
        keep = np.ones(len(row), dtype=bool)
        if exclude_same_view and ranked.probe_views[i] is not None:
            keep = g_views[row] != ranked.probe_views[i]
        matches = (g_labels[row] == label) & keep
        if not matches.any():
            warnings.warn(
                f"probe {i} (identity {label!r}) has no match in the gallery; excluded"
            )
            continue
        yield i, matches[keep]


def cmc(ranked: RankedGallery, ks=(1, 5, 10), exclude_same_view: bool = False) -> dict[int, float]:
    """Fraction of probes whose identity appears within the first k
    gallery entries; probes without any gallery match are excluded with
    a warning."""
    hits = {k: 0 for k in ks}
    valid = 0
    for _, matches in _match_rows(ranked, exclude_same_view):
        valid += 1
        first = int(np.argmax(matches))
        for k in ks:
            if first < k:
                hits[k] += 1
    if valid == 0:
        raise ValueError("no probe identity appears in the gallery")
    return {k: hits[k] / valid for k in ks}


def mean_ap(ranked: RankedGallery, exclude_same_view: bool = False) -> float:
    """Mean over probes of average precision over the ranked positions of
    the probe's gallery entries."""
    aps = []
    for _, matches in _match_rows(ranked, exclude_same_view):
        cum = np.cumsum(matches)
        precision_at_hits = cum[matches] / (np.flatnonzero(matches) + 1.0)
        aps.append(precision_at_hits.mean())
    if not aps:
        raise ValueError("no probe identity appears in the gallery")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# representation-space metrics (cosine geometry)
# ---------------------------------------------------------------------------


def _cosine_stats(vectors: np.ndarray, labels) -> tuple[list, np.ndarray, np.ndarray, dict]:
    """Shared pieces: class list, centroids, sample-to-centroid cosine
    distance matrix, and per-class row indices."""
    vectors = np.asarray(vectors, dtype=np.float64)
    classes = sorted(set(labels), key=str)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got {len(classes)}")
    idx_by_class = {c: np.flatnonzero([lab == c for lab in labels]) for c in classes}
    norms = np.sqrt((vectors * vectors).sum(axis=1))
    if (norms == 0.0).any():
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"zero-norm representation at index {bad}")
    centroids = np.stack([vectors[idx_by_class[c]].mean(axis=0) for c in classes])
    c_norms = np.sqrt((centroids * centroids).sum(axis=1))
    if (c_norms == 0.0).any():
        bad = classes[int(np.flatnonzero(c_norms == 0.0)[0])]
        raise ValueError(f"zero-norm centroid for class {bad!r}")
    # D[i, z] = 1 - cos(vector_i, centroid_z)
    dist = 1.0 - (vectors @ centroids.T) / (norms[:, None] * c_norms[None, :])
    return classes, centroids, dist, idx_by_class


def _global_average(classes, dist, idx_by_class) -> float:
    """Mean over classes of (mean over the class's samples of the mean
    distance to all centroids)."""
    c = len(classes)
    total = 0.0
    for cls in classes:
        rows = idx_by_class[cls]
        total += dist[rows].sum() / (len(rows) * c)
    return total / c


def act(vectors: np.ndarray, labels, cls) -> float:
    """Intra-class tightness of one class: global average sample-centroid
    distance divided by the class's own mean distance to its centroid.

    Degenerate classes (every sample collinear with the centroid) come out
    as +inf with a warning.
    """
    classes, _, dist, idx_by_class = _cosine_stats(vectors, labels)
    if cls not in idx_by_class:
        raise ValueError(f"unknown class {cls!r}")
    k = classes.index(cls)
    rows = idx_by_class[cls]
    intra = dist[rows, k].mean()
    global_avg = _global_average(classes, dist, idx_by_class)
    if intra == 0.0:
        warnings.warn(f"class {cls!r} has zero intra-class distance; tightness is +inf")
        return float("inf")
    return float(global_avg / intra)


def act_all(vectors: np.ndarray, labels) -> dict:
    """Tightness of every class, computed off one shared distance matrix."""
    classes, _, dist, idx_by_class = _cosine_stats(vectors, labels)
    global_avg = _global_average(classes, dist, idx_by_class)
    out = {}
    for k, cls in enumerate(classes):
        rows = idx_by_class[cls]
        intra = dist[rows, k].mean()
        if intra == 0.0:
            warnings.warn(f"class {cls!r} has zero intra-class distance; tightness is +inf")
            out[cls] = float("inf")
        else:
            out[cls] = float(global_avg / intra)
    return out


def mact(vectors: np.ndarray, labels) -> float:
    """Mean tightness over classes; +inf sentinels are excluded with an
    explicit warning."""
    values = act_all(vectors, labels)
    finite = [v for v in values.values() if v != float("inf")]
    if len(finite) < len(values):
        warnings.warn(
            f"excluding {len(values) - len(finite)} class(es) with infinite tightness from the mean"
        )
    if not finite:
        raise ValueError("every class has infinite tightness")
    return float(np.mean(finite))


def mrcl(vectors: np.ndarray, labels) -> float:
    """Inter-class looseness: the inter-centroid cosine-distance double sum
    (over all ordered pairs, i = j included) divided by the sample-centroid
    distance sum, both exactly as the ratio is defined."""
    classes, centroids, dist, idx_by_class = _cosine_stats(vectors, labels)
    c_norms = np.sqrt((centroids * centroids).sum(axis=1))
    centroid_dist = 1.0 - (centroids @ centroids.T) / (c_norms[:, None] * c_norms[None, :])
    numerator = float(centroid_dist.sum())
    denominator = 0.0
    for cls in classes:
        rows = idx_by_class[cls]
        denominator += dist[rows].sum() / len(rows)
    if denominator == 0.0:
        raise ValueError("degenerate representation set: zero global average distance")
    return numerator / denominator


# ---------------------------------------------------------------------------
# orchestration and exports
# ---------------------------------------------------------------------------


def evaluate(
    probe: LabeledEmbeddings,
    gallery: LabeledEmbeddings,
    ks=(1, 5, 10),
    *,
    exclude_same_view: bool = False,
    normalize: bool = False,
) -> MetricReport:
    """Full metric report for one probe/gallery split.

    The cosine-geometry metrics are computed once on the pooled probe and
    gallery embeddings with their ground-truth labels.
    """
    if normalize:
        probe = LabeledEmbeddings(
            l2_normalize_rows(probe.vectors), probe.labels, probe.views
        )
        gallery = LabeledEmbeddings(
            l2_normalize_rows(gallery.vectors), gallery.labels, gallery.views
        )
    ranked = rank(probe, gallery)
    top = cmc(ranked, ks, exclude_same_view=exclude_same_view)
    ap = mean_ap(ranked, exclude_same_view=exclude_same_view)
    pooled = np.concatenate([probe.vectors, gallery.vectors], axis=0)
    pooled_labels = list(probe.labels) + list(gallery.labels)
    return MetricReport(
        top=top,
        mean_ap=ap,
        mact=mact(pooled, pooled_labels),
        mrcl=mrcl(pooled, pooled_labels),
        act_per_class=act_all(pooled, pooled_labels),
        n_probe=len(probe),
        n_gallery=len(gallery),
    )


def export_embeddings(embeddings: LabeledEmbeddings, path: str | Path) -> None:
    """CSV: seq_index, id, view, then the flat embedding values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = embeddings.vectors.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq_index", "id", "view"] + [f"e{i}" for i in range(dim)])
        for i in range(len(embeddings)):
            writer.writerow(
                [i, embeddings.labels[i] or "", embeddings.views[i] or ""]
                + [repr(float(x)) for x in embeddings.vectors[i]]
            )


def mean_relations(
    model: ModelParams, sequences, center: bool = True
) -> dict[tuple[int, int], np.ndarray]:
    """Collaborative relation matrices averaged over every frame of the
    given sequences."""
    sums = {pair: None for pair in LEVEL_PAIRS}
    count = 0
    with nk.no_grad():
        ctx = ForwardContext(model)
        for seq in sequences:
            for graph in sequence_graphs(seq, model.scheme, center=center):
                capture: dict = {}
                encode_frame(graph, model, ctx, capture=capture)
                for pair, arr in capture["collaborative"].items():
                    sums[pair] = arr if sums[pair] is None else sums[pair] + arr
                count += 1
    if count == 0:
        raise ValueError("no frames to average relations over")
    return {pair: arr / count for pair, arr in sums.items()}


def export_relations(
    model: ModelParams, sequences, out_dir: str | Path, center: bool = True
) -> list[Path]:
    """One CSV per level pair with the frame-averaged relation matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (a, b), arr in mean_relations(model, sequences, center=center).items():
        path = out_dir / f"relations_l{a + 1}_l{b + 1}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            for row in arr:
                writer.writerow([repr(float(x)) for x in row])
        written.append(path)
    return written


def resample_split(
    probe: LabeledEmbeddings,
    gallery: LabeledEmbeddings,
    rng: np.random.Generator,
) -> tuple[LabeledEmbeddings, LabeledEmbeddings]:
    """Redraw the probe/gallery split from the pooled embeddings, keeping
    each identity's probe and gallery counts."""
    pooled = np.concatenate([probe.vectors, gallery.vectors], axis=0)
    labels = list(probe.labels) + list(gallery.labels)
    views = list(probe.views) + list(gallery.views)
    probe_counts: dict = {}
    for lab in probe.labels:
        probe_counts[lab] = probe_counts.get(lab, 0) + 1
    p_idx: list[int] = []
    g_idx: list[int] = []
    for lab in sorted(set(labels), key=str):
        rows = np.flatnonzero([l == lab for l in labels])
        rows = rng.permutation(rows)
        take = probe_counts.get(lab, 0)
        p_idx.extend(rows[:take].tolist())
        g_idx.extend(rows[take:].tolist())
    def pick(idx):
        return LabeledEmbeddings(
            pooled[idx], [labels[i] for i in idx], [views[i] for i in idx]
        )
    return pick(p_idx), pick(g_idx)


def format_report_table(reports: list[MetricReport], ks=(1, 5, 10)) -> str:
    """Human-readable summary; one row per repetition plus the mean."""
    header = ["rep"] + [f"top-{k}" for k in ks] + ["mAP", "mACT", "mRCL"]
    lines = ["  ".join(f"{h:>8}" for h in header)]
    def fmt(rep_name, r):
        cells = [f"{rep_name:>8}"]
        for k in ks:
            cells.append(f"{r.top[k]:8.4f}")
        cells.extend([f"{r.mean_ap:8.4f}", f"{r.mact:8.4f}", f"{r.mrcl:8.4f}"])
        return "  ".join(cells)
    for i, rep in enumerate(reports, start=1):
        lines.append(fmt(str(i), rep))
    mean = summarize_reports(reports, ks)
    lines.append(fmt("mean", mean))
    return "\n".join(lines)


def summarize_reports(reports: list[MetricReport], ks=(1, 5, 10)) -> MetricReport:
    """Plain mean over repetitions of every headline metric."""
    if not reports:
        raise ValueError("no reports to summarize")
    classes = reports[0].act_per_class.keys()
    return MetricReport(
        top={k: float(np.mean([r.top[k] for r in reports])) for k in ks},
        mean_ap=float(np.mean([r.mean_ap for r in reports])),
        mact=float(np.mean([r.mact for r in reports])),
        mrcl=float(np.mean([r.mrcl for r in reports])),
        act_per_class={
            c: float(np.mean([r.act_per_class[c] for r in reports])) for c in classes
        },
        n_probe=reports[0].n_probe,
        n_gallery=reports[0].n_gallery,
    )


def write_metrics_csv(reports: list[MetricReport], path: str | Path, ks=(1, 5, 10)) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mean = summarize_reports(reports, ks)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repetition"] + [f"top{k}" for k in ks] + ["map", "mact", "mrcl"])
        for i, rep in enumerate(reports, start=1):
            writer.writerow(
                [i]
                + [repr(rep.top[k]) for k in ks]
                + [repr(rep.mean_ap), repr(rep.mact), repr(rep.mrcl)]
            )
        writer.writerow(
            ["mean"]
            + [repr(mean.top[k]) for k in ks]
            + [repr(mean.mean_ap), repr(mean.mact), repr(mean.mrcl)]
        )


def write_act_csv(report: MetricReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "act"])
        for cls, value in report.act_per_class.items():
            writer.writerow([cls, repr(value)])
