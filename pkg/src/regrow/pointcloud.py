"""Point cloud scene container plus text-format and PLY file I/O.

The native scene format is plain text, one point per line:

    x y z r g b [instance_id]

``#`` starts a comment line, coordinates are decimal floats in meters,
colors are integers in [0, 255] and the optional instance id is an
integer >= 1. Instance id 0 is reserved everywhere for "unassigned".
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SceneFormatError(ValueError):
    """A scene file could not be parsed."""


class IncompleteLabelsError(ValueError):
    """A labeling still contains unassigned (zero) entries."""


@dataclass(frozen=True)
class PointCloud:
    """One scene: positions in meters, RGB colors, optional instance labels.

    positions: (N, 3) float64, colors: (N, 3) uint8,
    gt_instance: (N,) int32 with ids >= 1, or None when unlabeled.
    """

    positions: np.ndarray
    colors: np.ndarray
    gt_instance: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        col = np.ascontiguousarray(np.asarray(self.colors, dtype=np.uint8))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pos).all():
            raise ValueError("positions contain non-finite values")
        if col.shape != pos.shape:
            raise ValueError(f"colors must match positions shape, got {col.shape}")
        if self.gt_instance is not None:
            gt = np.ascontiguousarray(np.asarray(self.gt_instance, dtype=np.int32))
            object.__setattr__(self, "gt_instance", gt)
            if gt.shape != (pos.shape[0],):
                raise ValueError(f"gt_instance must be (N,), got {gt.shape}")
            if gt.min() < 1:
                raise ValueError("instance ids must be >= 1")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned (min_corner, max_corner) of all positions."""
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @property
    def has_labels(self) -> bool:
        return self.gt_instance is not None

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        """Copy of this cloud with replaced positions (colors/labels shared)."""
        return PointCloud(positions, self.colors, self.gt_instance)


def load_scene(path) -> PointCloud:
    """Parse a scene file, raising SceneFormatError with the offending line number."""
    path = Path(path)
    positions: list[tuple[float, float, float]] = []
    colors: list[tuple[int, int, int]] = []
    labels: list[int] = []
    ncols = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if ncols is None:
                if len(parts) not in (6, 7):
                    raise SceneFormatError(
                        f"{path}: line {lineno}: expected 6 or 7 fields, got {len(parts)}"
                    )
                ncols = len(parts)
            elif len(parts) != ncols:
                raise SceneFormatError(
                    f"{path}: line {lineno}: expected {ncols} fields, got {len(parts)}"
                )
            try:
                x, y, z = float(parts[0]), float(parts[1]), float(parts[2])
                rgb = [float(parts[i]) for i in (3, 4, 5)]
                if ncols == 7:
                    inst = int(parts[6])
            except ValueError as exc:
                raise SceneFormatError(f"{path}: line {lineno}: {exc}") from None
            if not all(np.isfinite((x, y, z))):
                raise SceneFormatError(f"{path}: line {lineno}: non-finite coordinate")
            if any(c < 0 or c > 255 for c in rgb):
                raise SceneFormatError(f"{path}: line {lineno}: color outside [0, 255]")
            if ncols == 7 and inst < 1:
                raise SceneFormatError(f"{path}: line {lineno}: instance id must be >= 1")
            positions.append((x, y, z))
            colors.append(tuple(int(round(c)) for c in rgb))
            if ncols == 7:
                labels.append(inst)
    if not positions:
        raise SceneFormatError(f"{path}: empty scene (no data records)")
    gt = np.array(labels, dtype=np.int32) if ncols == 7 else None
    return PointCloud(np.array(positions), np.array(colors, dtype=np.uint8), gt)


def save_scene(cloud: PointCloud, path) -> None:
    """Write a cloud in the canonical text format (positions to 6 decimals)."""
    path = Path(path)
    lines = []
    pos, col = cloud.positions, cloud.colors
    gt = cloud.gt_instance
    for i in range(cloud.n_points):
        row = f"{pos[i, 0]:.6f} {pos[i, 1]:.6f} {pos[i, 2]:.6f} {col[i, 0]:d} {col[i, 1]:d} {col[i, 2]:d}"
        if gt is not None:
            row += f" {gt[i]:d}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def read_labels(path) -> np.ndarray:
    """Read a labels file: one integer per line, aligned with the scene file."""
    values = [int(line) for line in Path(path).read_text().split()]
    return np.array(values, dtype=np.int32)


def write_labels(labels: np.ndarray, path) -> None:
    Path(path).write_text("\n".join(str(int(v)) for v in labels) + "\n")


def _build_palette(n: int = 64) -> np.ndarray:
    """Fixed color table: golden-ratio hue walk with alternating tone tiers."""
    colors = []
    hue = 0.0
    for i in range(n):
        sat = (0.92, 0.62)[i % 2]
        val = (0.95, 0.70, 0.85, 0.55)[i % 4]
        r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
        colors.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
        hue = (hue + 0.61803398875) % 1.0
    return np.array(colors, dtype=np.uint8)


PALETTE = _build_palette()


def export_colored_ply(cloud: PointCloud, labels: np.ndarray, path) -> None:
    """Write an ASCII PLY where every instance gets one palette color.

    Colors are keyed by ``(instance_id - 1) % 64`` so output is deterministic
    and adjacent instance ids are visually distinct.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (cloud.n_points,):
        raise ValueError(f"labels must be (N,), got {labels.shape}")
    if (labels == 0).any():
        raise IncompleteLabelsError("labels contain unassigned (zero) entries")
    rgb = PALETTE[(labels - 1) % len(PALETTE)]
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {cloud.n_points}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    pos = cloud.positions
    body = [
        f"{pos[i, 0]:.6f} {pos[i, 1]:.6f} {pos[i, 2]:.6f} {rgb[i, 0]:d} {rgb[i, 1]:d} {rgb[i, 2]:d}"
        for i in range(cloud.n_points)
    ]
    Path(path).write_text("\n".join(header + body) + "\n")
