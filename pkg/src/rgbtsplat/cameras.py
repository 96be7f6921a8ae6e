"""Pinhole camera with a rigid world-to-camera pose.

Convention: +x right, +y down, +z forward; pixel (row i, col j) sits at
continuous image coordinates (x=j, y=i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

ORTHONORMAL_TOL = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # world-to-camera rigid transform: x_cam = R @ x_world + t
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point outside the image")
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise InvalidParameterError("pose must be a 3x3 rotation and 3-vector")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise InvalidParameterError(f"pose rotation not orthonormal (err {err:.2e})")

    @classmethod
    def from_camera_to_world(cls, fx, fy, cx, cy, width, height, pose: np.ndarray) -> "Camera":
        """Build from a 4x4 camera-to-world matrix (the manifest convention)."""
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise InvalidParameterError("camera-to-world pose must be 4x4")
        Rcw = pose[:3, :3]
        tcw = pose[:3, 3]
        return cls(fx, fy, cx, cy, width, height, R=Rcw.T, t=-Rcw.T @ tcw)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def camera_to_world(self) -> np.ndarray:
        pose = np.eye(4)
        pose[:3, :3] = self.R.T
        pose[:3, 3] = self.camera_center
        return pose

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )
