"""Per-point features, voxel-grid neighbor queries and network input prep.

Each point gets 13 feature columns:

    0..2   local XYZ, translated so the scene min corner is the origin (m)
    3..5   room-normalized XYZ in [0, 1] (local XYZ / scene extent)
    6..8   RGB scaled to [0, 1]
    9..11  unit surface normal from local PCA
    12     curvature lam0 / (lam0 + lam1 + lam2), in [0, 1/3]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

N_FEATURES = 13
COL_LOCAL = (0, 1, 2)
COL_ROOM = (3, 4, 5)
COL_RGB = (6, 7, 8)
COL_NORMAL = (9, 10, 11)
COL_CURVATURE = 12

DEFAULT_DELTA = 0.1   # neighbor radius in meters
DEFAULT_KNN = 16      # PCA neighborhood size

# Named feature subsets used by the ablation harness.
FEATURE_SUBSETS = {
    "full": tuple(range(N_FEATURES)),
    "xyz": (0, 1, 2, 3, 4, 5),
    "xyz-rgb": (0, 1, 2, 3, 4, 5, 6, 7, 8),
}


def compute_normals_curvature(cloud, k: int = DEFAULT_KNN):
    """PCA normals and curvature over each point's k-nearest neighborhood.

    The neighborhood of a point includes the point itself. The normal is the
    eigenvector of the smallest covariance eigenvalue, sign-flipped so that
    nz >= 0 (ties: nx >= 0, then ny >= 0). Degenerate neighborhoods (rank < 2)
    fall back to normal (0, 0, 1) with curvature 0.

    Returns:
        (normals (N, 3), curvature (N,)) float64 arrays.
    """
    pts = cloud.positions
    n = pts.shape[0]
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    if k == 1:
        idx = idx[:, None]
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    lam = np.clip(evals, 0.0, None)
    total = lam.sum(axis=1)
    normals = evecs[:, :, 0].copy()
    safe_total = np.where(total > 0, total, 1.0)
    curvature = np.where(total > 0, lam[:, 0] / safe_total, 0.0)

    # rank < 2: second eigenvalue vanishes relative to the largest
    degenerate = (total <= 0) | (lam[:, 1] <= 1e-9 * lam[:, 2])
    normals[degenerate] = (0.0, 0.0, 1.0)
    curvature[degenerate] = 0.0

    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= np.where(norms > 0, norms, 1.0)
    nx, ny, nz = normals[:, 0], normals[:, 1], normals[:, 2]
    flip = (nz < 0) | ((nz == 0) & (nx < 0)) | ((nz == 0) & (nx == 0) & (ny < 0))
    normals[flip] *= -1.0
    return normals, np.clip(curvature, 0.0, None)


def compute_features(cloud, k: int = DEFAULT_KNN) -> np.ndarray:
    """Full (N, 13) feature matrix for a scene."""
    lo, hi = cloud.bounds
    local = cloud.positions - lo
    extent = hi - lo
    room = np.where(extent > 0, local / np.where(extent > 0, extent, 1.0), 0.5)
    rgb = cloud.colors.astype(np.float64) / 255.0
    if cloud.n_points < 3:
        # PCA needs at least 3 points; use the degenerate fallback
        normals = np.tile([0.0, 0.0, 1.0], (cloud.n_points, 1))
        curvature = np.zeros(cloud.n_points)
    else:
        normals, curvature = compute_normals_curvature(cloud, k=min(k, cloud.n_points))
    feats = np.empty((cloud.n_points, N_FEATURES), dtype=np.float64)
    feats[:, 0:3] = local
    feats[:, 3:6] = room
    feats[:, 6:9] = rgb
    feats[:, 9:12] = normals
    feats[:, 12] = curvature
    return feats


class SpatialIndex:
    """Uniform voxel grid over the scene for strict-inequality radius queries."""

    def __init__(self, positions: np.ndarray, cell_size: float = DEFAULT_DELTA):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.cell_size = float(cell_size)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self._origin = self.positions.min(axis=0)
        keys = np.floor((self.positions - self._origin) / self.cell_size).astype(np.int64)
        self._keys = keys
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        self._cells: dict[tuple[int, int, int], np.ndarray] = {}
        if len(order):
            change = np.flatnonzero((np.diff(sorted_keys, axis=0) != 0).any(axis=1)) + 1
            for chunk in np.split(order, change):
                cell = tuple(int(v) for v in keys[chunk[0]])
                self._cells[cell] = np.sort(chunk)

    def query_point(self, center, radius: float | None = None) -> np.ndarray:
        """All point indices strictly within `radius` of `center` (sorted)."""
        radius = self.cell_size if radius is None else float(radius)
        center = np.asarray(center, dtype=np.float64)
        lo = np.floor((center - radius - self._origin) / self.cell_size).astype(np.int64)
        hi = np.floor((center + radius - self._origin) / self.cell_size).astype(np.int64)
        chunks = []
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                for cz in range(lo[2], hi[2] + 1):
                    ids = self._cells.get((cx, cy, cz))
                    if ids is not None:
                        chunks.append(ids)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(chunks)
        d2 = ((self.positions[cand] - center) ** 2).sum(axis=1)
        hits = cand[d2 < radius * radius]
        return np.sort(hits)

    def neighbor_lists(self, radius: float | None = None):
        """CSR adjacency (indptr, indices): strict-< radius, self excluded."""
        radius = self.cell_size if radius is None else float(radius)
        n = self.positions.shape[0]
        per_point: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        reach = int(np.ceil(radius / self.cell_size))
        offsets = range(-reach, reach + 1)
        r2 = radius * radius
        for cell, ids in self._cells.items():
            chunks = []
            for dx in offsets:
                for dy in offsets:
                    for dz in offsets:
                        other = self._cells.get((cell[0] + dx, cell[1] + dy, cell[2] + dz))
                        if other is not None:
                            chunks.append(other)
            cand = np.sort(np.concatenate(chunks))
            diff = self.positions[ids][:, None, :] - self.positions[cand][None, :, :]
            close = (diff ** 2).sum(axis=2) < r2
            for row, pid in enumerate(ids):
                nbr = cand[close[row]]
                per_point[pid] = nbr[nbr != pid]
        counts = np.array([len(v) for v in per_point], dtype=np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = np.concatenate(per_point) if n else np.empty(0, dtype=np.int64)
        return indptr, indices.astype(np.int64)


def query_neighbors(index: SpatialIndex, region, labels, delta: float | None = None) -> np.ndarray:
    """Unlabeled points strictly within delta of any region point, region excluded."""
    region = np.asarray(list(region) if isinstance(region, set) else region, dtype=np.int64)
    if region.size == 0:
        raise ValueError("region must be nonempty")
    delta = index.cell_size if delta is None else float(delta)
    n = index.positions.shape[0]
    near = np.zeros(n, dtype=bool)
    for m in region:
        near[index.query_point(index.positions[m], delta)] = True
    near[region] = False
    if labels is not None:
        near &= np.asarray(labels) == 0
    return np.flatnonzero(near)


class FrontierTracker:
    """Incrementally tracks points within delta of an evolving member set.

    Backed by the precomputed radius adjacency: every point keeps a count of
    member points adjacent to it, so membership changes cost O(degree).
    """

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, n: int):
        self._indptr = indptr
        self._indices = indices
        self._n = n
        self.support = np.zeros(n, dtype=np.int32)
        self.member = np.zeros(n, dtype=bool)

    def _gather(self, ids) -> np.ndarray:
        parts = [self._indices[self._indptr[i]:self._indptr[i + 1]] for i in ids]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def add(self, ids) -> None:
        ids = np.asarray(list(ids) if isinstance(ids, set) else ids, dtype=np.int64)
        if ids.size == 0:
            return
        self.member[ids] = True
        touched = self._gather(ids)
        if touched.size:
            self.support += np.bincount(touched, minlength=self._n).astype(np.int32)

    def remove(self, ids) -> None:
        ids = np.asarray(list(ids) if isinstance(ids, set) else ids, dtype=np.int64)
        if ids.size == 0:
            return
        self.member[ids] = False
        touched = self._gather(ids)
        if touched.size:
            self.support -= np.bincount(touched, minlength=self._n).astype(np.int32)

    def frontier(self, eligible: np.ndarray | None = None) -> np.ndarray:
        mask = (self.support > 0) & ~self.member
        if eligible is not None:
            mask &= eligible
        return np.flatnonzero(mask)

    def copy(self) -> "FrontierTracker":
        dup = FrontierTracker.__new__(FrontierTracker)
        dup._indptr = self._indptr
        dup._indices = self._indices
        dup._n = self._n
        dup.support = self.support.copy()
        dup.member = self.member.copy()
        return dup


def sample_fixed(indices, count: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly `count` indices drawn from a nonempty set.

    When the set is large enough this is a uniform sample without replacement;
    otherwise every member appears once and the rest are resampled uniformly
    with replacement.
    """
    idx = np.unique(np.asarray(list(indices) if isinstance(indices, set) else indices, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("cannot sample from an empty index set")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if idx.size >= count:
        return rng.choice(idx, size=count, replace=False)
    extra = rng.choice(idx, size=count - idx.size, replace=True)
    return np.concatenate([idx, extra])


def normalize_inputs(inliers: np.ndarray, neighbors: np.ndarray, passthrough=COL_ROOM):
    """Subtract the inlier per-column median from both sets.

    The median is the lower median (deterministic for even counts) and the
    passthrough columns (room-normalized XYZ by default) are left unchanged.
    """
    inliers = np.asarray(inliers, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    n = inliers.shape[0]
    med = np.sort(inliers, axis=0)[(n - 1) // 2].copy()
    if passthrough:
        med[list(passthrough)] = 0.0
    return inliers - med, neighbors - med


def passthrough_positions(columns) -> tuple[int, ...]:
    """Positions of the room-normalized columns within a feature subset."""
    return tuple(i for i, c in enumerate(columns) if c in COL_ROOM)


@dataclass
class SceneContext:
    """A scene bundled with everything region growing needs repeatedly."""

    cloud: "PointCloud"  # noqa: F821
    features: np.ndarray
    index: SpatialIndex
    adj_indptr: np.ndarray
    adj_indices: np.ndarray
    delta: float
    knn: int

    @property
    def n_points(self) -> int:
        return self.cloud.n_points

    def new_tracker(self) -> FrontierTracker:
        return FrontierTracker(self.adj_indptr, self.adj_indices, self.n_points)

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.adj_indices[self.adj_indptr[i]:self.adj_indptr[i + 1]]


def build_context(cloud, delta: float = DEFAULT_DELTA, knn: int = DEFAULT_KNN,
                  features: np.ndarray | None = None) -> SceneContext:
    """Compute features, spatial index and radius adjacency for a scene."""
    if features is None:
        features = compute_features(cloud, k=min(knn, cloud.n_points))
    index = SpatialIndex(cloud.positions, cell_size=delta)
    indptr, indices = index.neighbor_lists(delta)
    return SceneContext(cloud, features, index, indptr, indices, float(delta), knn)
