"""ASCII PLY I/O, heatmap export and the synthetic anomaly benchmark."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .cloud import PointCloud, knn_indices

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SHAPES = ("sphere", "cube", "cylinder")
ANOMALY_TYPES = ("bump", "dent", "crack")


class PlyError(ValueError):
    pass


class DataError(ValueError):
    pass


# ------------------------------------------------------------------------ PLY

def load_ply(path) -> PointCloud:
    """Parse an ASCII PLY with x y z and optional nx ny nz / label properties."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}:1: missing 'ply' magic")
    n_vertex, props, in_vertex, body_start = None, [], False, None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise PlyError(f"{path}:{i}: only ASCII PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyError(f"{path}:{i}: malformed element line")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise PlyError(f"{path}:{i}: vertex count {tok[2]!r} is not an integer")
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3 or tok[1] == "list":
                    raise PlyError(f"{path}:{i}: unsupported vertex property {raw.strip()!r}")
                props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i
            break
        else:
            raise PlyError(f"{path}:{i}: unexpected header line {raw.strip()!r}")
    if body_start is None:
        raise PlyError(f"{path}: header has no end_header")
    if n_vertex is None:
        raise PlyError(f"{path}: no vertex element declared")
    for required in ("x", "y", "z"):
        if required not in props:
            raise PlyError(f"{path}: missing vertex property {required!r}")

    rows = []
    for j in range(n_vertex):
        line_no = body_start + 1 + j
        if line_no - 1 >= len(lines) or not lines[line_no - 1].strip():
            raise PlyError(f"{path}:{line_no}: truncated body, expected {n_vertex} vertices "
                           f"but found {j} ({n_vertex - j} missing)")
        tok = lines[line_no - 1].split()
        if len(tok) != len(props):
            raise PlyError(f"{path}:{line_no}: expected {len(props)} values, got {len(tok)}")
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise PlyError(f"{path}:{line_no}: non-numeric token in {lines[line_no - 1]!r}")
    data = np.array(rows, dtype=np.float64).reshape(n_vertex, len(props))
    col = {p: data[:, k] for k, p in enumerate(props)}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    normals = None
    if all(p in col for p in ("nx", "ny", "nz")):
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1)
    labels = col["label"].astype(np.int64) if "label" in col else None
    return PointCloud(pts, normals, labels)


def save_ply(path, cloud: PointCloud, colors: Optional[np.ndarray] = None,
             scores: Optional[np.ndarray] = None) -> None:
    """Write ASCII PLY; floats use 9 significant decimals after the point."""
    props = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        props += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    fmt = ["%.9f"] * len(props)
    if cloud.labels is not None:
        header.append("property uchar label")
        cols.append(cloud.labels[:, None])
        fmt.append("%d")
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        cols.append(colors)
        fmt += ["%d"] * 3
    if scores is not None:
        header.append("property double score")
        cols.append(np.asarray(scores, dtype=np.float64)[:, None])
        fmt.append("%.9f")
    header.append("end_header")
    table = np.hstack([np.asarray(c, dtype=np.float64) for c in cols])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, table, fmt=fmt)


def heatmap_colors(scores) -> np.ndarray:
    """Linear blue -> red map; channel values rounded half up."""
    s = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    red = np.floor(255.0 * s + 0.5).astype(np.int64)
    blue = np.floor(255.0 * (1.0 - s) + 0.5).astype(np.int64)
    return np.stack([red, np.zeros_like(red), blue], axis=1)


def save_heatmap_ply(cloud: PointCloud, point_scores, path) -> None:
    scores = np.asarray(point_scores, dtype=np.float64)
    if scores.shape != (len(cloud),):
        raise DataError(f"{len(scores)} scores for a cloud of {len(cloud)} points")
    save_ply(path, cloud, colors=heatmap_colors(scores), scores=scores)


# ------------------------------------------------------------------ synthetic

@dataclass
class SynthSpec:
    categories: tuple = SHAPES
    points_per_cloud: int = 2048
    anomaly_types: tuple = ANOMALY_TYPES
    anomaly_count: tuple = (2, 4)          # inclusive range per anomalous cloud
    anomaly_radius: tuple = (0.25, 0.45)   # geodesic radius, shape units
    anomaly_height: tuple = (0.15, 0.3)    # displacement magnitude
    crack_width: float = 0.06
    jitter: float = 0.002
    train_normal: int = 40
    train_anomalous: int = 20
    test_normal: int = 20
    test_anomalous: int = 20
    seed: int = 0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.anomaly_types = tuple(self.anomaly_types)
        self.anomaly_count = tuple(int(v) for v in self.anomaly_count)
        self.anomaly_radius = tuple(float(v) for v in self.anomaly_radius)
        self.anomaly_height = tuple(float(v) for v in self.anomaly_height)
        bad = set(self.categories) - set(SHAPES)
        if bad:
            raise DataError(f"unknown base shapes {sorted(bad)}")
        bad = set(self.anomaly_types) - set(ANOMALY_TYPES)
        if bad:
            raise DataError(f"unknown anomaly types {sorted(bad)}")
        if self.anomaly_radius[1] >= 1.0 or self.anomaly_height[1] >= 0.5:
            raise DataError("anomaly larger than the base shape (radius < 1, height < 0.5)")
        if min(self.anomaly_radius) <= 0 or min(self.anomaly_height) <= 0:
            raise DataError("anomaly radius and height must be positive")
        if self.anomaly_count[0] < 0 or self.anomaly_count[1] < self.anomaly_count[0]:
            raise DataError("anomaly_count must be an increasing non-negative range")
        if self.points_per_cloud < 64:
            raise DataError("points_per_cloud must be at least 64")


@dataclass
class SampleRecord:
    cloud: str
    category: str
    object_label: int
    split: str
    mask: Optional[str] = None
    regions: list = field(default_factory=list)      # per anomaly: point indices
    anomalies: list = field(default_factory=list)    # generator log per anomaly


def sample_surface(shape: str, n: int, rng: np.random.Generator):
    """Uniform samples on a base shape; returns (points, outward normals)."""
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v, v.copy()
    if shape == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        for a in range(3):
            rows = axis == a
            others = [b for b in range(3) if b != a]
            pts[rows, a] = sign[rows]
            pts[rows, others[0]] = uv[rows, 0]
            pts[rows, others[1]] = uv[rows, 1]
            nrm[rows, a] = sign[rows]
        return pts, nrm
    if shape == "cylinder":
        r, h = 1.0, 2.0
        side, cap = 2 * math.pi * r * h, math.pi * r * r
        part = rng.choice(3, size=n, p=[side / (side + 2 * cap), cap / (side + 2 * cap),
                                        cap / (side + 2 * cap)])
        ang = rng.uniform(0, 2 * math.pi, size=n)
        z = rng.uniform(-h / 2, h / 2, size=n)
        rad = r * np.sqrt(rng.uniform(0, 1, size=n))
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        s = part == 0
        pts[s] = np.stack([r * np.cos(ang[s]), r * np.sin(ang[s]), z[s]], axis=1)
        nrm[s] = np.stack([np.cos(ang[s]), np.sin(ang[s]), np.zeros(s.sum())], axis=1)
        for k, zc in ((1, h / 2), (2, -h / 2)):
            c = part == k
            pts[c] = np.stack([rad[c] * np.cos(ang[c]), rad[c] * np.sin(ang[c]),
                               np.full(c.sum(), zc)], axis=1)
            nrm[c, 2] = np.sign(zc)
        return pts, nrm
    raise DataError(f"unknown shape {shape!r}")


def surface_distance(shape: str, points: np.ndarray, seed: int) -> np.ndarray:
    """Geodesic distance from ``points[seed]`` over the base surface.

    Exact great-circle distance on the sphere; elsewhere shortest paths on a
    symmetric 10-NN graph of the undeformed samples.
    """
    if shape == "sphere":
        return np.arccos(np.clip(points @ points[seed], -1.0, 1.0))
    nbrs = knn_indices(points, points, 11)[:, 1:]
    rows = np.repeat(np.arange(len(points)), nbrs.shape[1])
    w = np.sqrt(((points[rows] - points[nbrs.ravel()]) ** 2).sum(axis=1))
    graph = csr_matrix((w, (rows, nbrs.ravel())), shape=(len(points),) * 2)
    return dijkstra(graph, directed=False, indices=seed)


def apply_anomaly(shape, points, normals, kind, rng, radius, height, crack_width):
    """Deform a neighborhood of a random seed in place; returns (mask, log)."""
    seed = int(rng.integers(len(points)))
    dist = surface_distance(shape, points, seed)
    inside = dist <= radius
    falloff = 1.0 - (dist[inside] / radius) ** 2
    if kind == "bump":
        points[inside] += (height * falloff)[:, None] * normals[inside]
        mask = inside
    elif kind == "dent":
        points[inside] -= (height * falloff)[:, None] * normals[inside]
        mask = inside
    else:
        # a thin slab through the seed, across the surface, pushed inward
        n0 = normals[seed]
        tangent = np.cross(n0, rng.normal(size=3))
        tangent /= np.linalg.norm(tangent)
        offset = (points - points[seed]) @ tangent
        mask = inside & (np.abs(offset) <= crack_width / 2)
        points[mask] -= height * normals[mask]
    log = {"type": kind, "seed_index": seed, "radius": float(radius),
           "height": float(height)}
    return mask, log


def generate_cloud(shape: str, spec: SynthSpec, rng: np.random.Generator, anomalous: bool):
    """One synthetic cloud; returns (PointCloud, regions, anomaly log)."""
    pts, nrm = sample_surface(shape, spec.points_per_cloud, rng)
    base = pts.copy()
    labels = np.zeros(len(pts), dtype=np.int64)
    region_of = np.zeros(len(pts), dtype=np.int64)
    logs = []
    if anomalous:
        count = int(rng.integers(spec.anomaly_count[0], spec.anomaly_count[1] + 1))
        for k in range(count):
            kind = spec.anomaly_types[int(rng.integers(len(spec.anomaly_types)))]
            radius = rng.uniform(*spec.anomaly_radius)
            height = rng.uniform(*spec.anomaly_height)
            mask, log = apply_anomaly(shape, pts, nrm, kind, rng, radius, height,
                                      spec.crack_width)
            if kind != "crack":
                # membership is measured on the undeformed surface
                mask = surface_distance(shape, base, log["seed_index"]) <= radius
            labels[mask] = 1
            region_of[mask] = k + 1
            logs.append(log)
    pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)
    regions = [np.flatnonzero(region_of == k + 1).tolist() for k in range(len(logs))]
    keep = [i for i, r in enumerate(regions) if r]
    regions = [regions[i] for i in keep]
    logs = [logs[i] for i in keep]
    return PointCloud(pts, labels=labels), regions, logs


def synth_generate(spec: SynthSpec, out_dir) -> list:
    """Write the benchmark (PLY files plus manifest) and return its records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    plan = [("train", 0, spec.train_normal), ("train", 1, spec.train_anomalous),
            ("test", 0, spec.test_normal), ("test", 1, spec.test_anomalous)]
    for ci, shape in enumerate(spec.categories):
        for si, (split, label, count) in enumerate(plan):
            for k in range(count):
                rng = np.random.default_rng([spec.seed, ci, si, k])
                anomalous = bool(label) and spec.anomaly_count[1] > 0
                cloud, regions, logs = generate_cloud(shape, spec, rng, anomalous)
                obj = int(cloud.labels.any())
                rel = f"{shape}/{split}/{'bad' if label else 'good'}_{k:03d}.ply"
                save_ply(out_dir / rel, cloud)
                records.append(SampleRecord(rel, shape, obj, split, None, regions, logs))
    write_manifest(out_dir, spec, records)
    return records


def write_manifest(out_dir, spec: SynthSpec, records) -> None:
    doc = {"version": MANIFEST_VERSION, "spec": asdict(spec),
           "samples": [asdict(r) for r in records]}
    (Path(out_dir) / MANIFEST_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_manifest(root):
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('version')}")
    return [SampleRecord(**r) for r in doc["samples"]]


def load_record(root, record: SampleRecord) -> PointCloud:
    """Load a manifest entry with labels and per-point region ids attached."""
    cloud = load_ply(Path(root) / record.cloud)
    n = len(cloud)
    labels = cloud.labels if cloud.labels is not None else np.zeros(n, dtype=np.int64)
    if record.object_label and not labels.any():
        raise DataError(f"{record.cloud}: anomalous sample without a point mask")
    if not record.object_label and labels.any():
        raise DataError(f"{record.cloud}: normal sample with a non-zero mask")
    regions = np.zeros(n, dtype=np.int64)
    for k, idx in enumerate(record.regions, start=1):
        regions[np.asarray(idx, dtype=np.int64)] = k
    if labels.any() and not record.regions:
        regions = cluster_regions(cloud.points, labels)
    return PointCloud(cloud.points, cloud.normals, labels, regions)


def cluster_regions(points: np.ndarray, labels: np.ndarray, radius: float = 0.05) -> np.ndarray:
    """Single-linkage components of anomalous points at ``radius`` (0 = normal)."""
    from scipy.sparse.csgraph import connected_components
    from scipy.spatial import cKDTree

    idx = np.flatnonzero(labels)
    out = np.zeros(len(points), dtype=np.int64)
    if len(idx) == 0:
        return out
    pairs = cKDTree(points[idx]).query_pairs(radius, output_type="ndarray")
    graph = csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                       shape=(len(idx), len(idx)))
    _, comp = connected_components(graph, directed=False)
    out[idx] = comp + 1
    return out


class Real3DADAdapter:
    """Placeholder for the Real3D-AD / Anomaly-ShapeNet directory layout.

    Expected layout: ``<root>/<category>/train/*.pcd`` (normal only) and
    ``<root>/<category>/test/*.pcd`` with ``<root>/<category>/gt/*.txt`` point
    masks. Loading those formats is intentionally not supported.
    """

    def __init__(self, root):
        self.root = Path(root)

    def records(self):
        raise NotImplementedError("Real3D-AD loading is not supported; convert to ASCII PLY")
