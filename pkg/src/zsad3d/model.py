"""The full detector: preprocessing, forward pass, and loss assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cloud import (PatchSet, PointCloud, estimate_normals, farthest_point_sampling,
                    knn_group, normalize_cloud)
from .encoder import EncoderConfig, PointEncoder
from .fpfh import fpfh, patch_fpfh
from .fusion import MultiGranularityFusion
from .gfcm import GeometricFeatures, GeometryHead
from .losses import (LossConfig, geo_loss, global_loss, local_loss,
                     top_fraction_mean, total_loss)
from .nn import Module, param
from .prompts import (TAU_RANGE, AnomalyResult, PromptLearner, TextEncoder, classify_global,
                      interpolate, patch_anomaly_probs, upsample_weights)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    geo_dim: int = 32
    gfcm_widths: tuple = (32, 64)
    text_width: int = 32
    text_layers: int = 1
    text_heads: int = 2
    n_ctx: int = 4
    templates: Optional[dict] = None
    tau_init: float = 0.07
    num_points: int = 2048
    num_patches: int = 128
    patch_size: int = 32
    normal_k: int = 16
    fpfh_k: int = 16


@dataclass
class PreparedSample:
    """Everything the network needs from one cloud, computed once."""

    points: np.ndarray                 # (n, 3) normalized, sampled
    patches: PatchSet
    rel: np.ndarray                    # (G, M, 3) center-relative, local frame, unit radius
    centers: np.ndarray                # (G, 3)
    up_idx: np.ndarray                 # (n, K) nearest patch centers per point
    up_w: np.ndarray                   # (n, K) normalized inverse-distance weights
    labels: Optional[np.ndarray] = None
    regions: Optional[np.ndarray] = None
    object_label: Optional[int] = None
    fpfh_targets: Optional[np.ndarray] = None
    name: str = ""


def prepare_sample(cloud: PointCloud, cfg: ModelConfig, with_targets: bool = False,
                   object_label: int | None = None, name: str = "") -> PreparedSample:
    """Normalize, downsample by FPS, build patches and (optionally) FPFH targets."""
    cloud = normalize_cloud(cloud)
    if len(cloud) > cfg.num_points:
        cloud = cloud.subset(farthest_point_sampling(cloud, cfg.num_points))
    g = min(cfg.num_patches, len(cloud))
    centers = farthest_point_sampling(cloud, g)
    patches = knn_group(cloud, centers, min(cfg.patch_size, len(cloud)))
    pts = cloud.points
    center_xyz = pts[patches.centers]
    rel = pts[patches.members] - center_xyz[:, None, :]
    rel = patch_frames(rel, center_xyz - pts.mean(axis=0))
    up_idx, up_w = upsample_weights(pts, center_xyz)
    targets = None
    if with_targets:
        oriented = estimate_normals(cloud, min(cfg.normal_k, len(cloud)))
        targets = patch_fpfh(fpfh(oriented, min(cfg.fpfh_k, len(cloud) - 1)), patches)
    if object_label is None and cloud.labels is not None:
        object_label = int(cloud.labels.any())
    return PreparedSample(pts, patches, rel, center_xyz, up_idx, up_w, cloud.labels,
                          cloud.regions, object_label, targets, name)


def patch_frames(rel: np.ndarray, outward: np.ndarray) -> np.ndarray:
    """Express each patch in its own PCA frame, scaled to unit radius.

    Axes are sorted by decreasing variance, so the last one approximates the
    surface normal; it is flipped to agree with ``outward`` and the first axis
    is flipped to give a non-negative third moment. The result is invariant
    to rigid motions of the cloud and to point density.
    """
    cov = np.einsum("gmi,gmj->gij", rel, rel)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, :, ::-1].copy()                    # columns: major, minor, normal
    flip = np.einsum("gi,gi->g", axes[:, :, 2], outward) < 0
    axes[flip, :, 2] *= -1
    skew = (np.einsum("gmi,gi->gm", rel, axes[:, :, 0]) ** 3).sum(axis=1)
    axes[skew < 0, :, 0] *= -1
    axes[:, :, 1] = np.cross(axes[:, :, 2], axes[:, :, 0])
    local = np.einsum("gmi,gij->gmj", rel, axes)
    radius = np.sqrt((local ** 2).sum(axis=2)).max(axis=1)
    return local / np.where(radius > 0, radius, 1.0)[:, None, None]


@dataclass
class ForwardOutput:
    patch_probs: Tensor
    point_probs: Tensor
    y_pt: Tensor
    y_patch: Tensor
    object_score: Tensor
    global_probs: Tensor
    geo_proj: Tensor
    z: Tensor


class AnomalyDetector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, loss_cfg: LossConfig | None = None):
        rng = np.random.default_rng(seed)
        enc = cfg.encoder
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.encoder = PointEncoder(enc, rng)
        self.gfcm = GeometricFeatures(cfg.geo_dim, rng, cfg.gfcm_widths)
        self.geo_head = GeometryHead(cfg.geo_dim, rng)
        self.fusion = MultiGranularityFusion(len(enc.tap_layers), enc.embed_dim, cfg.geo_dim,
                                             enc.out_dim, rng)
        text_encoder = TextEncoder(enc.out_dim, rng, cfg.text_width, cfg.text_layers,
                                   cfg.text_heads)
        self.prompts = PromptLearner(text_encoder, rng, cfg.n_ctx, cfg.templates)
        self.tau = param(np.array(cfg.tau_init), name="tau")

    def param_groups(self):
        """Parameter names per optimizer group: encoder / heads / prompts."""
        groups = {"encoder": [], "heads": [], "prompts": []}
        for name, p in self.named_parameters():
            if name.startswith("encoder."):
                groups["encoder"].append((name, p))
            elif name.startswith("prompts.") or name == "tau":
                groups["prompts"].append((name, p))
            else:
                groups["heads"].append((name, p))
        return groups

    def text(self):
        return self.prompts.encode_text(ag.clamp(self.tau, *TAU_RANGE))

    def forward(self, sample: PreparedSample, text=None) -> ForwardOutput:
        text = text if text is not None else self.text()
        pyramid = self.encoder(sample.rel, sample.centers)
        geo = self.gfcm(sample.rel)
        z = self.fusion(pyramid.taps, geo, pyramid.cls)
        patch = patch_anomaly_probs(z, text)
        point = interpolate(patch, sample.up_idx, sample.up_w)
        lc = self.loss_cfg
        y_pt = ag.max(point, axis=0)
        y_patch = top_fraction_mean(patch, lc.top_fraction)
        obj = y_pt * lc.fusion_alpha + y_patch * (1.0 - lc.fusion_alpha)
        return ForwardOutput(patch, point, y_pt, y_patch, obj,
                             classify_global(pyramid.global_embedding, text),
                             self.geo_head(geo), z)

    def losses(self, sample: PreparedSample, out: ForwardOutput | None = None) -> dict:
        """Loss components and their weighted total for one annotated sample."""
        if sample.labels is None or sample.object_label is None:
            raise ValueError(f"sample {sample.name!r} has no annotations")
        out = out or self.forward(sample)
        lc = self.loss_cfg
        parts = {
            "local": local_loss(out.point_probs, sample.labels, lc),
            "global": global_loss(out.y_pt, out.y_patch, sample.object_label, lc),
        }
        if sample.fpfh_targets is not None and lc.lambda2:
            parts["geo"] = geo_loss(out.geo_proj, sample.fpfh_targets, lc.infonce_tau)
        else:
            parts["geo"] = Tensor(0.0)
        parts["total"] = total_loss(parts["local"], parts["global"], parts["geo"], lc)
        return parts

    def score(self, sample: PreparedSample, text=None) -> AnomalyResult:
        with ag.no_grad():
            out = self.forward(sample, text)
        if not (np.all(np.isfinite(out.point_probs.data)) and np.isfinite(out.object_score.item())):
            raise FloatingPointError(f"non-finite anomaly scores for {sample.name!r}")
        return AnomalyResult(out.point_probs.data.copy(), out.patch_probs.data.copy(),
                             out.object_score.item())
