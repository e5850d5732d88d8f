"""Classical threshold-driven region growing baselines."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .features import COL_CURVATURE, COL_NORMAL, COL_RGB, SceneContext
from .grow import DEFAULT_MIN_SEGMENT, reassign_small_segments, select_seed


@dataclass
class ThresholdConfig:
    normal_angle_max: float = 30.0   # degrees
    color_dist_max: float = 0.25     # unit-scaled RGB distance
    min_segment: int = DEFAULT_MIN_SEGMENT


@dataclass
class SmoothnessConfig:
    theta_th: float = 10.0           # degrees
    curvature_th: float = 0.05
    min_segment: int = DEFAULT_MIN_SEGMENT


def _flood(ctx: SceneContext, join, enqueue) -> np.ndarray:
    """Generic seeded flood fill over the radius adjacency.

    `join(q, p)` decides whether unlabeled neighbor p joins q's region and
    `enqueue(p)` whether p may keep growing the front.
    """
    curvature = ctx.features[:, COL_CURVATURE]
    labels = np.zeros(ctx.n_points, dtype=np.int32)
    next_id = 1
    while (labels == 0).any():
        seed = select_seed(curvature, labels)
        labels[seed] = next_id
        queue = deque([seed])
        while queue:
            q = queue.popleft()
            for p in ctx.neighbors_of(q):
                p = int(p)
                if labels[p] == 0 and join(q, p):
                    labels[p] = next_id
                    if enqueue(p):
                        queue.append(p)
        next_id += 1
    return labels


def grow_threshold(ctx: SceneContext, cfg: ThresholdConfig | None = None) -> np.ndarray:
    """Region growing on raw features: a neighbor joins when its normal is
    within an angle threshold of the front point's and their colors are close."""
    cfg = cfg or ThresholdConfig()
    normals = ctx.features[:, COL_NORMAL[0]:COL_NORMAL[-1] + 1]
    rgb = ctx.features[:, COL_RGB[0]:COL_RGB[-1] + 1]
    cos_th = math.cos(math.radians(cfg.normal_angle_max))
    max_col2 = cfg.color_dist_max ** 2

    def join(q: int, p: int) -> bool:
        if abs(float(normals[q] @ normals[p])) < cos_th:
            return False
        d = rgb[q] - rgb[p]
        return float(d @ d) <= max_col2

    labels = _flood(ctx, join, lambda p: True)
    return reassign_small_segments(ctx.cloud, labels, cfg.min_segment)


def grow_smoothness(ctx: SceneContext, cfg: SmoothnessConfig | None = None) -> np.ndarray:
    """Smoothness-constrained growing: neighbors join within a normal-angle
    threshold but only low-curvature points extend the growth front."""
    cfg = cfg or SmoothnessConfig()
    normals = ctx.features[:, COL_NORMAL[0]:COL_NORMAL[-1] + 1]
    curvature = ctx.features[:, COL_CURVATURE]
    cos_th = math.cos(math.radians(cfg.theta_th))

    def join(q: int, p: int) -> bool:
        return abs(float(normals[q] @ normals[p])) >= cos_th

    labels = _flood(ctx, join, lambda p: curvature[p] <= cfg.curvature_th)
    return reassign_small_segments(ctx.cloud, labels, cfg.min_segment)
