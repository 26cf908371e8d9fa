"""Fast Point Feature Histograms.

Layout is the usual 33 bins: 11 for alpha, 11 for phi, 11 for theta. The pair
features follow the Darboux-frame construction used by PCL, including its rule
for choosing which endpoint of a pair acts as the source.
"""
from __future__ import annotations

import numpy as np

from .cloud import CloudError, PatchSet, PointCloud, knn_indices

N_BINS = 11
DIM = 3 * N_BINS
MIN_WEIGHT = 1e-12
SWAP_TIE = 1e-12


def pair_features(p_s, n_s, p_t, n_t):
    """Vectorized (alpha, phi, theta, valid) for arrays of point pairs.

    Pairs whose connecting line is parallel to the chosen source normal (or
    coincident points) have no Darboux frame and come back with valid=False.
    """
    dp = p_t - p_s
    dist = np.sqrt((dp * dp).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)
    a1 = (n_s * dp).sum(axis=-1) / safe
    a2 = (n_t * dp).sum(axis=-1) / safe
    # acos is decreasing, so the larger source angle is the smaller |cos|; near-ties keep
    # the original order, otherwise rounding alone could flip the sign of phi
    swap = np.abs(a1) < np.abs(a2) - SWAP_TIE
    src_n = np.where(swap[..., None], n_t, n_s)
    tgt_n = np.where(swap[..., None], n_s, n_t)
    dp = np.where(swap[..., None], -dp, dp)
    phi = np.where(swap, -a2, a1)
    v = np.cross(dp, src_n)
    v_len = np.sqrt((v * v).sum(axis=-1))
    valid = (dist > 0) & (v_len > 0)
    v = v / np.where(valid, v_len, 1.0)[..., None]
    w = np.cross(src_n, v)
    alpha = (v * tgt_n).sum(axis=-1)
    theta = np.arctan2((w * tgt_n).sum(axis=-1), (src_n * tgt_n).sum(axis=-1))
    return alpha, phi, theta, valid


def _bin_index(alpha, phi, theta):
    ia = np.floor(N_BINS * ((alpha + 1.0) * 0.5)).astype(np.int64)
    ip = np.floor(N_BINS * ((phi + 1.0) * 0.5)).astype(np.int64)
    it = np.floor(N_BINS * ((theta + np.pi) / (2 * np.pi))).astype(np.int64)
    return (np.clip(ia, 0, N_BINS - 1), np.clip(ip, 0, N_BINS - 1),
            np.clip(it, 0, N_BINS - 1))


def _block_normalize(hist: np.ndarray) -> np.ndarray:
    blocks = hist.reshape(*hist.shape[:-1], 3, N_BINS)
    sums = blocks.sum(axis=-1, keepdims=True)
    blocks = np.where(sums > 0, blocks / np.where(sums > 0, sums, 1.0), 0.0)
    return blocks.reshape(hist.shape)


def _require_normals(cloud: PointCloud) -> None:
    if cloud.normals is None:
        raise CloudError("FPFH needs normals; run estimate_normals first")


def spfh(cloud: PointCloud, index: int, neighbor_indices) -> np.ndarray:
    """Simplified histogram of one point against the given neighbors."""
    _require_normals(cloud)
    nbrs = np.asarray(neighbor_indices, dtype=np.int64)
    if nbrs.size == 0:
        raise CloudError("SPFH needs at least one neighbor")
    if np.any(nbrs == index):
        raise CloudError("neighbor list must exclude the source point")
    return _spfh_rows(cloud.points, cloud.normals, np.array([index]), nbrs[None, :])[0]


def _spfh_rows(points, normals, src, nbrs) -> np.ndarray:
    p_s = points[src][:, None, :]
    n_s = normals[src][:, None, :]
    p_t, n_t = points[nbrs], normals[nbrs]
    alpha, phi, theta, valid = pair_features(p_s, n_s, p_t, n_t)
    ia, ip, it = _bin_index(alpha, phi, theta)
    rows = np.broadcast_to(np.arange(len(src))[:, None], ia.shape)
    hist = np.zeros((len(src), DIM))
    vr = rows[valid]
    np.add.at(hist, (vr, ia[valid]), 1.0)
    np.add.at(hist, (vr, N_BINS + ip[valid]), 1.0)
    np.add.at(hist, (vr, 2 * N_BINS + it[valid]), 1.0)
    return _block_normalize(hist)


def fpfh(cloud: PointCloud, k: int) -> np.ndarray:
    """Per-point FPFH over the k nearest neighbors (self excluded).

    FPFH(p) = SPFH(p) + (1/k) * sum_i SPFH(p_i) / w_i with w_i the Euclidean
    distance to neighbor i, followed by per-block renormalization. Zero
    distances are clamped to 1e-12; use :func:`fpfh_with_flags` to learn
    which points were affected.
    """
    return fpfh_with_flags(cloud, k)[0]


def fpfh_with_flags(cloud: PointCloud, k: int):
    """As :func:`fpfh`, also returning indices of points with coincident neighbors."""
    _require_normals(cloud)
    if k < 2:
        raise CloudError("FPFH needs k >= 2")
    n = len(cloud)
    if n < k + 1:
        raise CloudError(f"cloud of {n} points is too small for k = {k}")
    pts, nrm = cloud.points, cloud.normals
    nbrs = _neighbors_excluding_self(pts, k)
    own = _spfh_rows(pts, nrm, np.arange(n), nbrs)
    d = np.sqrt(((pts[nbrs] - pts[:, None, :]) ** 2).sum(axis=2))
    clamped = np.flatnonzero((d < MIN_WEIGHT).any(axis=1))
    w = np.maximum(d, MIN_WEIGHT)
    agg = own + (own[nbrs] / w[:, :, None]).sum(axis=1) / k
    return _block_normalize(agg), clamped


def _neighbors_excluding_self(pts: np.ndarray, k: int) -> np.ndarray:
    idx = knn_indices(pts, pts, k + 1)
    keep = idx != np.arange(len(pts))[:, None]
    # a coincident lower-index point can push self out of the list
    keep[keep.all(axis=1), -1] = False
    return idx[keep].reshape(len(pts), k)


def patch_fpfh(descriptors: np.ndarray, patches: PatchSet) -> np.ndarray:
    """Patch targets: mean member descriptor, L2-normalized (zero stays zero)."""
    desc = np.asarray(descriptors, dtype=np.float64)
    if patches.members.min() < 0 or patches.members.max() >= len(desc):
        raise CloudError("patch member index outside descriptor range")
    mean = desc[patches.members].mean(axis=1)
    norm = np.sqrt((mean ** 2).sum(axis=1, keepdims=True))
    return np.where(norm > 0, mean / np.where(norm > 0, norm, 1.0), 0.0)
