"""Scan container and normalization into the working volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Scan:
    points: np.ndarray
    name: str = "scan"
    gt_correspondences: np.ndarray | None = None
    gt_triangles: np.ndarray | None = None
    gt_barycentric: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    @property
    def labeled(self):
        return self.gt_correspondences is not None


@dataclass(frozen=True)
class Normalization:
    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points) - self.center) * self.scale

    def invert(self, points):
        return np.asarray(points) / self.scale + self.center


def normalization_for(points, fill=0.9, half_extent=0.5):
    """Centroid to origin, then uniform scale so the scan spans ``fill`` of H."""
    points = np.asarray(points, dtype=np.float64)
    center = points.mean(axis=0)
    extent = np.abs(points - center).max()
    scale = fill * half_extent / extent if extent > 0 else 1.0
    return Normalization(center, float(scale))
