"""Per-class clustering and budgeted support-set selection.

For every pseudo-class the projected features are clustered into K groups
(Lloyd iterations, k-means++ seeding, multiple restarts). Within each
cluster, the sample closest to the cluster center joins the support set, so
a class with at least K members contributes exactly K samples and the total
budget is K per class. Classes with fewer than K members contribute all of
them; empty classes contribute nothing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .domains import UnlabeledDataset, annotate, true_class_indices
from .errors import ParseError, ShapeError, ValidationError
from .nncore import Network

FLOAT_FMT = "%.17g"


@dataclass
class ClassFeatureBlock:
    """Projected features of all samples sharing one pseudo-class."""

    class_id: int
    indices: np.ndarray  # positions in the target dataset
    features: np.ndarray  # (len(indices), d)

    def __post_init__(self):
        if self.features.shape[0] != self.indices.shape[0]:
            raise ValidationError("feature rows must match index count")


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, d)
    assignment: np.ndarray  # (n,) cluster id per row
    inertia: float
    iterations_used: int
    deficient: bool = False  # fewer rows than requested clusters
    inertia_trace: list = field(default_factory=list)


@dataclass
class SupportEntry:
    target_index: int
    pseudo_class: int
    cluster_id: int
    distance_score: float
    true_label: int | None = None


@dataclass
class SupportSet:
    entries: list
    k: int
    num_classes: int
    seed: int
    selector: str = "cluster"
    mode: str = "ensemble"

    def indices(self):
        return np.array([e.target_index for e in self.entries], dtype=int)

    def __len__(self):
        return len(self.entries)

    def attach_labels(self, data: UnlabeledDataset):
        """Annotate exactly the selected indices; the only label reveal."""
        _, labels = annotate(data, self.indices())
        for entry, label in zip(self.entries, labels):
            entry.true_label = int(label)
        return self


def euclidean_distance(z, mu):
    """Plain L2 distance between two equal-width vectors."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if z.shape != mu.shape:
        raise ShapeError(f"width mismatch: {z.shape} vs {mu.shape}")
    return float(np.linalg.norm(z - mu))


def _pairwise_sq(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


def _plusplus_centers(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points, centers, max_iter):
    """Lloyd iterations from given centers; returns a KMeansResult.

    Empty clusters are repaired by relocating their center to the currently
    worst-fit point, which keeps the per-cluster selection budget intact.
    """
    k = centers.shape[0]
    centers = centers.copy()
    assignment = None
    trace = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        sq = _pairwise_sq(points, centers)
        new_assignment = sq.argmin(axis=1)
        # repair empty clusters with the highest-cost points
        costs = sq[np.arange(points.shape[0]), new_assignment]
        for j in range(k):
            if not np.any(new_assignment == j):
                worst = int(np.argmax(costs))
                new_assignment[worst] = j
                centers[j] = points[worst]
                costs[worst] = 0.0
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = points[assignment == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
        sq = _pairwise_sq(points, centers)
        trace.append(float(sq[np.arange(points.shape[0]), assignment].sum()))
    inertia = trace[-1] if trace else 0.0
    return KMeansResult(centers, assignment, inertia, iterations, inertia_trace=trace)


def kmeans(features, k, seed=0, n_restarts=10, max_iter=300, init="plusplus"):
    """Best-of-restarts Lloyd clustering.

    ``init='plusplus'`` runs ``n_restarts`` k-means++ seeded restarts;
    ``init='exhaustive'`` restarts from every size-k subset of the points
    (small instances only), which is what the optimality checks use. With
    fewer rows than k the result degrades to one singleton cluster per row
    and is flagged ``deficient``.
    """
    points = np.asarray(features, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValidationError("kmeans needs a non-empty 2-D feature array")
    if k < 1:
        raise ValidationError("k must be >= 1")
    n = points.shape[0]
    if n < k:
        centers = points.copy()
        assignment = np.arange(n)
        return KMeansResult(centers, assignment, 0.0, 0, deficient=True)

    best = None
    if init == "plusplus":
        rng = np.random.default_rng(seed)
        starts = (_plusplus_centers(points, k, rng) for _ in range(n_restarts))
    elif init == "exhaustive":
        starts = (points[list(combo)] for combo in itertools.combinations(range(n), k))
    else:
        raise ValidationError(f"unknown init {init!r}")
    for centers in starts:
        result = _lloyd(points, centers, max_iter)
        if best is None or result.inertia < best.inertia - 1e-15:
            best = result
    return best


def project_features(
    f_prime: Network, q: Network, data: UnlabeledDataset, table
) -> list:
    """One ClassFeatureBlock per non-empty pseudo-class, features = q(f'(x))."""
    feats = f_prime.forward(data.features, mode="eval")
    projected = q.forward(feats, mode="eval")
    blocks = []
    for c in sorted(table.per_class_indices):
        idx = np.asarray(table.per_class_indices[c], dtype=int)
        if idx.size == 0:
            continue
        blocks.append(ClassFeatureBlock(int(c), idx, projected[idx]))
    return blocks


def select_support(blocks, kmeans_results, k, seed=0, selector="cluster", mode="ensemble"):
    """Pick, per class and per cluster, the sample nearest its cluster center.

    ``blocks`` and ``kmeans_results`` must be aligned. Ties break toward the
    lower target index; labels are attached later by the caller.
    """
    if not blocks:
        raise ValidationError("no class blocks to select from")
    if len(blocks) != len(kmeans_results):
        raise ValidationError("one kmeans result per block required")
    entries = []
    num_classes = max(b.class_id for b in blocks) + 1
    for block, result in zip(blocks, kmeans_results):
        n_clusters = result.centers.shape[0]
        for j in range(n_clusters):
            members = np.flatnonzero(result.assignment == j)
            if members.size == 0:
                continue  # repaired away in practice; contribute nothing
            dists = np.array(
                [euclidean_distance(block.features[m], result.centers[j]) for m in members]
            )
            # ties toward the lower target index: indices ascend within a block
            pick = members[int(np.argmin(dists))]
            entries.append(
                SupportEntry(
                    target_index=int(block.indices[pick]),
                    pseudo_class=block.class_id,
                    cluster_id=int(j),
                    distance_score=float(dists.min()),
                )
            )
    entries.sort(key=lambda e: (e.pseudo_class, e.cluster_id))
    return SupportSet(entries, k, num_classes, seed, selector=selector, mode=mode)


def cluster_select(
    f_prime: Network,
    q: Network,
    data: UnlabeledDataset,
    table,
    k: int,
    seed: int = 0,
    mode: str = "ensemble",
) -> SupportSet:
    """The full selection stage: project, cluster per class, pick minima."""
    blocks = project_features(f_prime, q, data, table)
    results = [kmeans(b.features, k, seed=seed + b.class_id) for b in blocks]
    support = select_support(blocks, results, k, seed=seed, selector="cluster", mode=mode)
    support.num_classes = table.num_classes
    return support


def class_balanced_select(
    data: UnlabeledDataset,
    f_prime: Network,
    q: Network,
    k: int,
    seed: int = 0,
    ground_truth_ok: bool = False,
) -> SupportSet:
    """Ablation: group by true labels instead of pseudo-labels.

    Needs the explicit ground-truth flag; guarantees K per class whenever a
    class has at least K members.
    """
    groups = true_class_indices(data, ground_truth_ok=ground_truth_ok)
    feats = f_prime.forward(data.features, mode="eval")
    projected = q.forward(feats, mode="eval")
    blocks = [
        ClassFeatureBlock(c, np.asarray(idx, dtype=int), projected[idx])
        for c, idx in groups.items()
        if len(idx)
    ]
    results = [kmeans(b.features, k, seed=seed + b.class_id) for b in blocks]
    support = select_support(
        blocks, results, k, seed=seed, selector="cluster", mode="class_balanced"
    )
    support.num_classes = max(groups) + 1
    return support


# ------------------------------------------------------------------ manifest
#
#   supportselect-manifest v1
#   selector: cluster
#   mode: ensemble
#   k: 1
#   num_classes: 3
#   seed: 0
#   entries: 3
#   index,pseudo_class,cluster_id,distance_score,true_label
#   17,0,0,0.123...,2


def save_manifest(support: SupportSet, path):
    lines = [
        "supportselect-manifest v1",
        f"selector: {support.selector}",
        f"mode: {support.mode}",
        f"k: {support.k}",
        f"num_classes: {support.num_classes}",
        f"seed: {support.seed}",
        f"entries: {len(support.entries)}",
        "index,pseudo_class,cluster_id,distance_score,true_label",
    ]
    for e in support.entries:
        label = "-" if e.true_label is None else str(e.true_label)
        lines.append(
            f"{e.target_index},{e.pseudo_class},{e.cluster_id},"
            f"{FLOAT_FMT % e.distance_score},{label}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> SupportSet:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "supportselect-manifest v1":
        raise ParseError("not a support manifest", path=path, line=1)

    def header(i, key):
        if i >= len(lines) or not lines[i].startswith(key + ":"):
            raise ParseError(f"expected '{key}:'", path=path, line=i + 1)
        return lines[i].split(":", 1)[1].strip()

    selector = header(1, "selector")
    mode = header(2, "mode")
    k = int(header(3, "k"))
    num_classes = int(header(4, "num_classes"))
    seed = int(header(5, "seed"))
    count = int(header(6, "entries"))
    if len(lines) < 8 + count:
        raise ParseError("truncated manifest", path=path, line=len(lines))
    entries = []
    for i in range(count):
        cells = lines[8 + i].split(",")
        if len(cells) != 5:
            raise ParseError("expected 5 columns", path=path, line=9 + i)
        entries.append(
            SupportEntry(
                target_index=int(cells[0]),
                pseudo_class=int(cells[1]),
                cluster_id=int(cells[2]),
                distance_score=float(cells[3]),
                true_label=None if cells[4] == "-" else int(cells[4]),
            )
        )
    return SupportSet(entries, k, num_classes, seed, selector=selector, mode=mode)
