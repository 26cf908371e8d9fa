"""Point-cloud container and the geometric primitives the pipeline is built on.

Sampling, neighbor search and normal estimation are all deterministic: ties are
broken by the lowest point index so that patches (and everything downstream)
are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


class CloudError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    regions: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must be N x 3, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise CloudError("non-finite coordinate in point cloud")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != (n, 3):
                raise CloudError(f"normals must be {n} x 3, got {nrm.shape}")
            lens = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-6):
                raise CloudError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.labels is not None:
            lab = np.asarray(self.labels).astype(np.int64)
            if lab.shape != (n,):
                raise CloudError(f"labels must have length {n}, got {lab.shape}")
            if np.any((lab != 0) & (lab != 1)):
                raise CloudError("labels must be 0/1")
            object.__setattr__(self, "labels", lab)
        if self.regions is not None:
            reg = np.asarray(self.regions).astype(np.int64)
            if reg.shape != (n,):
                raise CloudError(f"regions must have length {n}, got {reg.shape}")
            object.__setattr__(self, "regions", reg)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        """Cloud restricted to ``indices`` (in the given order); attributes follow."""
        idx = np.asarray(indices, dtype=np.int64)
        take = lambda a: None if a is None else a[idx]
        return PointCloud(self.points[idx], take(self.normals), take(self.labels),
                          take(self.regions), dict(self.meta))


@dataclass(frozen=True)
class PatchSet:
    centers: np.ndarray   # (G,)
    members: np.ndarray   # (G, M)

    @property
    def G(self) -> int:
        return self.members.shape[0]

    @property
    def M(self) -> int:
        return self.members.shape[1]

    def validate(self, n_points: int) -> None:
        if self.members.ndim != 2 or self.members.shape[0] != len(self.centers):
            raise CloudError("members must be a G x M index matrix matching centers")
        if self.G < 1 or self.M < 1:
            raise CloudError("patch set must contain at least one patch and one member")
        if self.members.min() < 0 or self.members.max() >= n_points:
            raise CloudError("patch member index out of range")
        if not np.all((self.members == self.centers[:, None]).any(axis=1)):
            raise CloudError("each center must belong to its own patch")


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    if len(cloud) == 0:
        raise CloudError("cannot normalize an empty cloud")
    pts = cloud.points - cloud.points.mean(axis=0)
    # re-centre once more so the centroid is zero to rounding, not to a
    # catastrophic-cancellation residue of the first mean
    pts = pts - pts.mean(axis=0)
    radius = np.sqrt((pts ** 2).sum(axis=1)).max()
    if radius > 0:
        pts = pts / radius
    else:
        pts = np.zeros_like(pts)
    return replace(cloud, points=pts)


def farthest_point_sampling(cloud: PointCloud, count: int) -> np.ndarray:
    """Greedy max-min subsampling.

    The seed is the point farthest from the centroid; every later pick is the
    point whose distance to the picked set is largest. ``np.argmax`` returns
    the first maximum, which gives the lowest-index tie rule for free.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= count <= n:
        raise CloudError(f"sample count {count} outside [1, {n}]")
    centroid = pts.mean(axis=0)
    d_centroid = ((pts - centroid) ** 2).sum(axis=1)
    picked = np.empty(count, dtype=np.int64)
    picked[0] = int(np.argmax(d_centroid))
    min_d = ((pts - pts[picked[0]]) ** 2).sum(axis=1)
    min_d[picked[0]] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(min_d))
        picked[i] = nxt
        np.minimum(min_d, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d)
        # -1 keeps picked points out of argmax; unpicked duplicates sit at 0
        min_d[nxt] = -1.0
    return picked


def _sq_dists(pts: np.ndarray, query: np.ndarray) -> np.ndarray:
    return ((pts - query) ** 2).sum(axis=1)


def knn_indices(points: np.ndarray, queries: np.ndarray, m: int,
                tree: Optional[cKDTree] = None) -> np.ndarray:
    """m nearest points for every query row, ordered by (distance, index).

    The kd-tree only proposes candidates; the final order is decided on
    squared distances computed exactly like an exhaustive scan, so results
    are identical to brute force including ties.
    """
    n = len(points)
    if m > n:
        raise CloudError(f"m = {m} exceeds cloud size {n}")
    if m < 1:
        raise CloudError("m must be positive")
    tree = tree if tree is not None else cKDTree(points)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = min(m + 4, n)
    _, cand = tree.query(queries, k=k)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(queries), k)
    d2 = ((points[cand] - queries[:, None, :]) ** 2).sum(axis=2)
    order = np.lexsort((cand, d2), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    out = cand[:, :m].copy()
    if k == n:
        return out
    # a row is settled when the candidate list extends strictly past the m-th
    # distance; otherwise points outside the list could tie with it
    unsettled = np.flatnonzero(d2[:, -1] <= d2[:, m - 1] * (1 + 1e-9) + 1e-300)
    for row in unsettled:
        q = queries[row]
        r = np.sqrt(d2[row, m - 1])
        ball = np.asarray(tree.query_ball_point(q, r * (1 + 1e-6) + 1e-12), dtype=np.int64)
        dd = _sq_dists(points[ball], q)
        out[row] = ball[np.lexsort((ball, dd))[:m]]
    return out


def knn_group(cloud: PointCloud, centers, m: int) -> PatchSet:
    """Group the m nearest points (self included) around every center."""
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        raise CloudError("no patch centers given")
    if m > len(cloud):
        raise CloudError(f"m = {m} exceeds cloud size {len(cloud)}")
    members = knn_indices(cloud.points, cloud.points[centers], m)
    # the center is at distance 0 but an exactly coincident lower-index point
    # could displace it; force membership as the contract requires
    for row, c in enumerate(centers):
        if c not in members[row]:
            members[row, -1] = c
    return PatchSet(centers=centers, members=members)


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """PCA normals over each point's k-neighborhood (self included).

    Orientation: away from the centroid; if the normal is tangent to that
    direction, the sign that makes the first nonzero component positive.
    Points whose neighborhood covariance is rank deficient (collinear) are
    listed in ``meta["degenerate_normals"]``.
    """
    if k < 3:
        raise CloudError("normal estimation needs k >= 3")
    n = len(cloud)
    if n < k:
        raise CloudError(f"cloud of {n} points is smaller than k = {k}")
    pts = cloud.points
    nbrs = knn_indices(pts, pts, k)
    local = pts[nbrs] - pts[nbrs].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = np.flatnonzero(evals[:, 1] <= 1e-12 * scale + 1e-300)

    centroid = pts.mean(axis=0)
    span = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).max() or 1.0
    dots = ((pts - centroid) * normals).sum(axis=1)
    tie = np.abs(dots) <= 1e-12 * span
    flip = np.where(tie, False, dots < 0)
    for i in np.flatnonzero(tie):
        nz = np.flatnonzero(np.abs(normals[i]) > 1e-12)
        if len(nz) and normals[i, nz[0]] < 0:
            flip[i] = True
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    meta = dict(cloud.meta)
    meta["degenerate_normals"] = degenerate
    return replace(cloud, normals=normals, meta=meta)
