"""Feature embedding, k-means with k-means++ seeding, and elbow selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClusteringError
from .model_ir import split_model

MAX_ITERS = 100


@dataclass(frozen=True)
class FeatureMatrix:
    vectors: np.ndarray
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ClusteringError(f"feature matrix must be N x D with D >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ClusteringError("feature matrix has non-finite entries")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return len(self.vectors)


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    sse_trace: tuple
    seed: int
    converged: bool = True
    requested_k: int | None = None

    @property
    def sse(self):
        return self.sse_trace[-1]

    @property
    def fallback(self):
        return self.requested_k is not None and self.requested_k != self.k


def embed_features(net, images, batch_size=256):
    """Global-average-pooled output of the network's feature extractor (eval mode)."""
    if net is None or not getattr(net, "params", None):
        raise ClusteringError("embedding model is not initialized")
    split = split_model(net.spec)
    maps = net.predict_batches(images, batch_size=batch_size, stop=split.split_index)
    vectors = maps.mean(axis=(2, 3))
    return FeatureMatrix(vectors, source=f"{net.spec.name}:layers[0:{split.split_index}]+globalavgpool")


def _sq_distances(x, centroids):
    # (N, k) squared distances, computed directly for exactness over speed.
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plus_plus(x, k, rng):
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining points coincide with a chosen centroid.
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def kmeans(features, k, seed=0, max_iters=MAX_ITERS, init=None):
    """Lloyd's algorithm from k-means++ (or explicit ``init``) centroids.

    Runs until assignments stop changing or ``max_iters``. ``sse_trace[t]``
    is the SSE of the iteration-t assignment against the centroids it was
    assigned to. Empty clusters are reseeded at the point farthest from
    its own centroid. Computation is float64.
    """
    x = np.asarray(features.vectors if isinstance(features, FeatureMatrix) else features, dtype=np.float64)
    n = len(x)
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if k > n:
        raise ClusteringError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    if centroids.shape != (k, x.shape[1]):
        raise ClusteringError(f"initial centroids must have shape {(k, x.shape[1])}")
    assign = None
    trace = []
    converged = False
    for _ in range(max_iters):
        d2 = _sq_distances(x, centroids)
        new = d2.argmin(axis=1)  # lowest index wins ties
        trace.append(float(d2[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            converged = True
            break
        assign = new
        centroids = _update(x, assign, centroids, k)
    else:
        d2 = _sq_distances(x, centroids)
        assign = d2.argmin(axis=1)
    return ClusterModel(k, centroids.astype(np.float64), assign.astype(np.int64), tuple(trace), seed, converged)


def _update(x, assign, old, k):
    centroids = np.empty_like(old)
    empty = []
    for j in range(k):
        members = x[assign == j]
        if len(members):
            centroids[j] = members.mean(axis=0)
        else:
            empty.append(j)
    if empty:
        dist = ((x - centroids[assign]) ** 2).sum(axis=1)
        taken = set()
        for j in empty:
            order = np.argsort(-dist, kind="stable")
            idx = next(i for i in order if i not in taken)
            taken.add(idx)
            centroids[j] = x[idx]
    return centroids


@dataclass(frozen=True)
class ElbowResult:
    k: int
    ks: tuple
    sse: tuple
    degenerate: bool
    distances: tuple = field(default_factory=tuple)


def elbow_from_curve(ks, sse, tol=1e-12):
    """Pick the k whose (k, SSE) point lies farthest from the endpoint chord."""
    ks = np.asarray(ks, dtype=np.float64)
    sse = np.asarray(sse, dtype=np.float64)
    if len(ks) < 3 or len(ks) != len(sse):
        raise ClusteringError("elbow needs at least 3 (k, sse) points")
    if np.any(np.diff(ks) <= 0):
        raise ClusteringError("k range must be strictly increasing")
    dk, ds = ks[-1] - ks[0], sse[-1] - sse[0]
    cross = np.abs(dk * (sse - sse[0]) - ds * (ks - ks[0]))
    dist = cross / np.hypot(dk, ds)
    scale = max(np.abs(sse).max(), 1.0)
    if dist.max() <= tol * scale * max(abs(dk), 1.0):
        return ElbowResult(int(ks[0]), tuple(int(k) for k in ks), tuple(sse.tolist()), True, tuple(dist.tolist()))
    return ElbowResult(int(ks[int(dist.argmax())]), tuple(int(k) for k in ks), tuple(sse.tolist()), False,
                       tuple(dist.tolist()))


def elbow_select(features, k_range, seed=0, max_iters=MAX_ITERS):
    """Run k-means for each k and choose by maximum chord distance."""
    k_range = [int(k) for k in k_range]
    n = len(features)
    usable = [k for k in k_range if k <= n]
    if len(usable) < 3:
        raise ClusteringError(f"elbow needs >= 3 candidate k values not exceeding N={n}")
    sse = [kmeans(features, k, seed, max_iters).sse for k in usable]
    return elbow_from_curve(usable, sse)


@dataclass(frozen=True)
class ClassClusters:
    """Per-class k-means results over one labeled set."""

    models: dict
    labels: np.ndarray
    assignments: np.ndarray
    elbows: dict = field(default_factory=dict)

    @property
    def cells(self):
        return sorted({(int(c), int(k)) for c, k in zip(self.labels, self.assignments)})

    def flagged(self):
        return sorted(c for c, m in self.models.items() if m.fallback)


def cluster_all_classes(features, labels, k=3, mode="fixed", k_range=(1, 2, 3, 4, 5, 6), seed=0,
                        max_iters=MAX_ITERS, num_classes=None):
    """Cluster each class's feature vectors independently.

    ``mode="elbow"`` picks k per class from ``k_range``. A class with
    fewer images than k falls back to k = population and is flagged.
    """
    if mode not in ("fixed", "elbow"):
        raise ClusteringError(f"k mode must be 'fixed' or 'elbow', got {mode!r}")
    x = features.vectors if isinstance(features, FeatureMatrix) else np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    assignments = np.full(len(labels), -1, dtype=np.int64)
    models, elbows = {}, {}
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        xc = x[idx]
        want = k
        if mode == "elbow":
            candidates = [kk for kk in k_range if kk <= len(idx)]
            if len(candidates) >= 3:
                elbows[c] = elbow_select(xc, candidates, seed, max_iters)
                want = elbows[c].k
            else:
                want = max(candidates) if candidates else 1
        use = min(want, len(idx))
        model = kmeans(xc, use, seed, max_iters)
        if use != want:
            model = ClusterModel(model.k, model.centroids, model.assignments, model.sse_trace, model.seed,
                                 model.converged, requested_k=want)
        models[c] = model
        assignments[idx] = model.assignments
    return ClassClusters(models, labels, assignments, elbows)


def write_assignments_csv(clusters, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "class", "cluster"])
        for i, (c, k) in enumerate(zip(clusters.labels, clusters.assignments)):
            w.writerow([i, int(c), int(k)])


def read_assignments_csv(path):
    rows = list(csv.DictReader(open(path, newline="")))
    labels = np.array([int(r["class"]) for r in rows], dtype=np.int64)
    assign = np.array([int(r["cluster"]) for r in rows], dtype=np.int64)
    return labels, assign


def write_elbow_csv(ks, sse, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "sse"])
        for k, s in zip(ks, sse):
            w.writerow([int(k), repr(float(s))])


def read_elbow_csv(path):
    rows = list(csv.DictReader(open(Path(path), newline="")))
    return [int(r["k"]) for r in rows], [float(r["sse"]) for r in rows]
