"""Band-similarity graph construction and spectral clustering of bands.

Runs once per dataset on the difference image, before training; the
resulting normalized adjacency and cluster assignment are frozen inputs of
the network.  The eigensolver is a cyclic Jacobi rotation scheme and the
clustering a seeded k-means with k-means++ initialisation, so builds are
deterministic and dependency-free.
"""

from __future__ import annotations

import numpy as np

from .hsi import HsiCube


class NumericalError(RuntimeError):
    """An iterative numerical procedure failed to converge."""


class SimilarityMatrix:
    """Sparse nonnegative band affinities; each row sums to 1 over its k neighbors."""

    def __init__(self, values, k):
        self.values = np.asarray(values, dtype=np.float64)
        self.k = int(k)

    @property
    def bands(self):
        return self.values.shape[0]


class AssignmentMatrix:
    """Binary clusters x bands membership; every band in exactly one cluster."""

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"assignment must be 2-d, got shape {arr.shape}")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError("assignment entries must be 0 or 1")
        if not (arr.sum(axis=0) == 1).all():
            raise ValueError("every band must belong to exactly one cluster")
        if (arr.sum(axis=1) < 1).any():
            raise ValueError("empty cluster in assignment matrix")
        self.values = arr

    @property
    def clusters(self):
        return self.values.shape[0]

    @property
    def bands(self):
        return self.values.shape[1]

    def labels(self):
        return self.values.argmax(axis=0)


def band_distance_matrix(cube: HsiCube) -> np.ndarray:
    """Pairwise Euclidean distances between bands flattened to h*w vectors."""
    flat = cube.data.reshape(cube.bands, -1).astype(np.float64)
    sq = (flat**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def build_similarity(cube: HsiCube, k: int = 5) -> SimilarityMatrix:
    """k-nearest-neighbor band affinity with gap-to-(k+1)th-distance weighting.

    Row i holds (e_{i,k+1} - e_ij) / sum_m (e_{i,k+1} - e_{i,m}) over the k
    nearest other bands j of band i, zero elsewhere, so each row sums to 1.
    Distance ties break toward the lower band index.  When the weighting
    degenerates (duplicated bands, or k+1 exceeding the available
    neighbors) the row falls back to uniform 1/k over the neighbor set.
    """
    b = cube.bands
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k + 1 > b:
        raise ValueError(f"k={k} needs at least {k + 1} bands, cube has {b}")
    dist = band_distance_matrix(cube)
    a = np.zeros((b, b), dtype=np.float64)
    for i in range(b):
        others = np.delete(np.arange(b), i)
        order = np.lexsort((others, dist[i, others]))  # distance, then band index
        ranked = others[order]
        neighbors = ranked[:k]
        if k < ranked.size:
            ref = dist[i, ranked[k]]  # (k+1)th smallest distance
            gaps = ref - dist[i, neighbors]
            denom = gaps.sum()
            if denom > 0.0:
                a[i, neighbors] = gaps / denom
                continue
        a[i, neighbors] = 1.0 / k
    return SimilarityMatrix(a, k)


def normalize_adjacency(sim: SimilarityMatrix) -> np.ndarray:
    """Symmetric normalisation with self-loops: D^-1/2 (A + A^T + I) D^-1/2."""
    s = sim.values + sim.values.T + np.eye(sim.bands)
    d = s.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[:, None] * s * inv_sqrt[None, :]


def jacobi_eigh(matrix: np.ndarray, max_sweeps: int = 100, tol: float = 1e-12):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns).  Raises
    NumericalError if the off-diagonal mass has not vanished after
    max_sweeps sweeps.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigensolver needs a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("eigensolver needs a symmetric matrix")
    n = a.shape[0]
    a = (a + a.T) / 2.0
    q = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), q
    scale = max(float(np.abs(a).max()), 1.0)
    threshold = tol * scale
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(a.diagonal()))
        if off <= threshold * n:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= threshold / n:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = a[:, p].copy()
                rot_r = a[:, r].copy()
                a[:, p] = c * rot_p - s * rot_r
                a[:, r] = s * rot_p + c * rot_r
                row_p = a[p, :].copy()
                row_r = a[r, :].copy()
                a[p, :] = c * row_p - s * row_r
                a[r, :] = s * row_p + c * row_r
                qp = q[:, p].copy()
                q[:, p] = c * qp - s * q[:, r]
                q[:, r] = s * qp + c * q[:, r]
    else:
        raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    eigvals = a.diagonal().copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], q[:, order]


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(points, k, seed=0, max_iter=300, tol=1e-6):
    """Seeded Lloyd k-means with k-means++ init and empty-cluster repair.

    Returns (labels, centers, objective history).  The within-cluster
    sum-of-squares history is non-increasing across iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} invalid for {n} points")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6B3A]))
    centers = _kmeans_pp_init(points, k, rng)
    history = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        # repair empty clusters with the point farthest from its centroid
        moved = []
        for j in range(k):
            if (labels == j).any():
                continue
            assigned = d2[np.arange(n), labels].copy()
            assigned[moved] = -1.0  # a point repairs at most one cluster
            farthest = int(np.argmax(assigned))
            labels[farthest] = j
            moved.append(farthest)
        history.append(float(d2[np.arange(n), labels].sum()))
        new_centers = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if members.size:
                new_centers[j] = members.mean(axis=0)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    return labels, centers, history


def spectral_cluster(sim: SimilarityMatrix, b: int, seed=0) -> AssignmentMatrix:
    """Cluster bands via the symmetric normalized Laplacian of the affinity.

    Symmetrizes the affinity, takes the eigenvectors of the b smallest
    eigenvalues of L_sym = I - D^-1/2 S D^-1/2 (Jacobi solver), row
    normalizes the embedding and runs seeded k-means on it.
    """
    n = sim.bands
    if not 2 <= b < n:
        raise ValueError(f"cluster count {b} must satisfy 2 <= b < {n}")
    s = (sim.values + sim.values.T) / 2.0
    d = s.sum(axis=1)
    d[d <= 0] = 1.0
    inv_sqrt = 1.0 / np.sqrt(d)
    l_sym = np.eye(n) - inv_sqrt[:, None] * s * inv_sqrt[None, :]
    _, vecs = jacobi_eigh(l_sym)
    emb = vecs[:, :b]
    norms = np.sqrt((emb**2).sum(axis=1, keepdims=True))
    norms[norms == 0] = 1.0
    emb = emb / norms
    labels, _, _ = kmeans(emb, b, seed=seed)
    return assignment_matrix(labels, b)


def assignment_matrix(labels, b: int) -> AssignmentMatrix:
    """Binary b x B membership matrix from per-band cluster labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= b:
        raise ValueError(f"labels must lie in [0,{b}), got range "
                         f"[{labels.min()},{labels.max()}]")
    c = np.zeros((b, labels.size), dtype=np.float64)
    c[labels, np.arange(labels.size)] = 1.0
    return AssignmentMatrix(c)
