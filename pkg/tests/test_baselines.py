import numpy as np

from regrow.baselines import (
    SmoothnessConfig,
    ThresholdConfig,
    grow_smoothness,
    grow_threshold,
)
from regrow.features import build_context
from regrow.pointcloud import PointCloud


def scene_from(parts):
    """parts: list of (points, instance_id, rgb)."""
    pts = np.vstack([p for p, _, _ in parts])
    gt = np.concatenate([np.full(len(p), inst, dtype=np.int32) for p, inst, _ in parts])
    col = np.vstack([np.tile(np.array(rgb, dtype=np.uint8), (len(p), 1))
                     for p, _, rgb in parts])
    return PointCloud(pts, col, gt)


def plane(nx, ny, spacing=0.05, origin=(0.0, 0.0, 0.0), axis="z"):
    u, v = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    flat = np.zeros(nx * ny)
    if axis == "z":
        pts = np.column_stack([u.ravel(), v.ravel(), flat])
    elif axis == "y":
        pts = np.column_stack([u.ravel(), flat, v.ravel()])
    else:
        pts = np.column_stack([flat, u.ravel(), v.ravel()])
    return pts + np.asarray(origin)


class TestThresholdBaseline:
    def test_separated_planes_two_instances(self):
        cloud = scene_from([
            (plane(8, 8), 1, (200, 30, 30)),
            (plane(8, 8, origin=(0, 0, 1.0)), 2, (200, 30, 30)),
        ])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_threshold(ctx)
        assert len(np.unique(labels)) == 2
        assert len(np.unique(labels[:64])) == 1

    def test_touching_coplanar_same_color_merged(self):
        # two abutting same-color squares: thresholds cannot see the boundary
        cloud = scene_from([
            (plane(8, 8), 1, (90, 90, 200)),
            (plane(8, 8, origin=(8 * 0.05, 0, 0)), 2, (90, 90, 200)),
        ])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_threshold(ctx)
        assert len(np.unique(labels)) == 1  # undersegmentation by design

    def test_right_angle_junction_split(self):
        # junction gap 0.09 keeps the planes adjacent at delta=0.1 while every
        # PCA neighborhood stays on its own plane, so normals are exactly 90
        # degrees apart and the 30-degree gate blocks every crossing
        cloud = scene_from([
            (plane(20, 20, spacing=0.03), 1, (120, 120, 120)),
            (plane(20, 20, spacing=0.03, origin=(0, 0, 0.09), axis="x"), 2,
             (120, 120, 120)),
        ])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_threshold(ctx, ThresholdConfig(normal_angle_max=30.0))
        assert len(np.unique(labels)) == 2

    def test_color_gate_blocks(self):
        cloud = scene_from([
            (plane(8, 8), 1, (255, 0, 0)),
            (plane(8, 8, origin=(8 * 0.05, 0, 0)), 2, (0, 0, 255)),
        ])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_threshold(ctx)
        assert len(np.unique(labels)) == 2

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 0.5, (150, 3))
        col = rng.integers(0, 255, (150, 3)).astype(np.uint8)
        cloud = PointCloud(pts, col, None)
        ctx = build_context(cloud, delta=0.1, knn=8)
        a = grow_threshold(ctx)
        b = grow_threshold(ctx)
        assert np.array_equal(a, b)

    def test_complete_contiguous_labels(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 0.5, (200, 3))
        col = rng.integers(0, 255, (200, 3)).astype(np.uint8)
        cloud = PointCloud(pts, col, None)
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_threshold(ctx)
        assert (labels > 0).all()
        ids = np.unique(labels)
        assert ids.tolist() == list(range(1, len(ids) + 1))


def sphere_points(r=0.3, spacing=0.04):
    pts = []
    n_lat = max(3, int(round(np.pi * r / spacing)))
    for i in range(n_lat):
        phi = (i + 0.5) * np.pi / n_lat
        ring_r = r * np.sin(phi)
        z = r * np.cos(phi)
        m = max(1, int(round(2 * np.pi * ring_r / spacing)))
        ang = np.arange(m) * (2 * np.pi / m)
        pts.append(np.column_stack([ring_r * np.cos(ang), ring_r * np.sin(ang),
                                    np.full(m, z)]))
    return np.concatenate(pts)


class TestSmoothnessBaseline:
    def test_smooth_sphere_single_instance(self):
        cloud = scene_from([(sphere_points(), 1, (100, 180, 90))])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_smoothness(ctx, SmoothnessConfig(theta_th=10.0, curvature_th=0.2))
        assert len(np.unique(labels)) == 1

    def test_right_angle_blocks_growth(self):
        cloud = scene_from([
            (plane(14, 14), 1, (120, 120, 120)),
            (plane(14, 14, origin=(0, 0, 0.05), axis="x"), 2, (120, 120, 120)),
        ])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_smoothness(ctx, SmoothnessConfig(theta_th=10.0))
        assert len(np.unique(labels)) == 2

    def test_high_curvature_ridge_blocks_front(self):
        # two coplanar strips joined by a sharp fold (tent shape)
        left = plane(10, 8)
        ridge_x = 10 * 0.05
        right = plane(10, 8)
        right_rot = np.column_stack([
            ridge_x + right[:, 0] * np.cos(np.radians(75)),
            right[:, 1],
            right[:, 0] * np.sin(np.radians(75)),
        ])
        cloud = scene_from([(left, 1, (99, 99, 99)),
                            ((right_rot + [0.05, 0, 0.02]), 2, (99, 99, 99))])
        ctx = build_context(cloud, delta=0.1, knn=8)
        labels = grow_smoothness(ctx, SmoothnessConfig(theta_th=10.0,
                                                       curvature_th=0.01))
        assert len(np.unique(labels)) >= 2

    def test_deterministic_and_complete(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 0.5, (150, 3))
        col = rng.integers(0, 255, (150, 3)).astype(np.uint8)
        cloud = PointCloud(pts, col, None)
        ctx = build_context(cloud, delta=0.1, knn=8)
        a = grow_smoothness(ctx)
        b = grow_smoothness(ctx)
        assert np.array_equal(a, b)
        assert (a > 0).all()
