"""Gaze-angle geometry: (yaw, pitch) <-> unit vectors, angular error, labeling.

Angles are degrees everywhere. The direction convention is

    v = (cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw))

in a right-handed frame with y up and z pointing away from the subject
(into the wall for the NISLGaze layout).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class GazeAngles(NamedTuple):
    yaw: float
    pitch: float


class Point3D(NamedTuple):
    x: float
    y: float
    z: float


class CoincidentPointsError(ValueError):
    """Eye and target are at the same location, so no gaze direction exists."""


def angles_to_vector(angles) -> np.ndarray:
    """Unit direction vector(s) for (yaw, pitch) in degrees.

    Accepts a single pair or an array of shape (..., 2); returns (..., 3).
    """
    a = np.radians(np.asarray(angles, dtype=float))
    yaw, pitch = a[..., 0], a[..., 1]
    cp = np.cos(pitch)
    return np.stack([cp * np.sin(yaw), np.sin(pitch), cp * np.cos(yaw)], axis=-1)


def vector_to_angles(v) -> np.ndarray:
    """Inverse of :func:`angles_to_vector`; `v` need not be normalized."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    yaw = np.arctan2(x, z)
    pitch = np.arctan2(y, np.hypot(x, z))
    return np.degrees(np.stack([yaw, pitch], axis=-1))


def angular_error(a, b) -> np.ndarray | float:
    """Angle in degrees between the gaze directions `a` and `b` (broadcasts)."""
    va = angles_to_vector(a)
    vb = angles_to_vector(b)
    # Cross/dot form keeps precision for nearly parallel vectors, where
    # arccos of the clamped dot product loses ~8 digits.
    cross = np.linalg.norm(np.cross(va, vb), axis=-1)
    dot = np.sum(va * vb, axis=-1)
    err = np.degrees(np.arctan2(cross, np.clip(dot, -1.0, 1.0)))
    return float(err) if np.ndim(err) == 0 else err


def label_gaze(target, eye) -> GazeAngles:
    """Gaze angles of the ray from `eye` to `target`."""
    d = np.asarray(target, dtype=float) - np.asarray(eye, dtype=float)
    if not np.any(d):
        raise CoincidentPointsError(f"target and eye coincide at {tuple(eye)}")
    yaw, pitch = vector_to_angles(d)
    return GazeAngles(float(yaw), float(pitch))


@dataclass(frozen=True)
class WallLayout:
    """Physical layout of a wall-target collection session, in meters.

    The origin sits on the wall at the center of the target area; z points
    into the wall and y points up. Targets lie on the plane z = 0.
    """

    cross_spacing: float = 0.06
    block_size: float = 0.20
    camera: Point3D = Point3D(0.0, 0.0, -0.095)
    eye_distance: float = 0.90
    reference_height: float = 1.60

    def eye_position(self, eye_height: float | None = None) -> Point3D:
        """Assumed fixed eye center for a subject whose eyes are at `eye_height`."""
        h = self.reference_height if eye_height is None else eye_height
        return Point3D(0.0, h - self.reference_height, -self.eye_distance)

    def cross_positions(self) -> list[Point3D]:
        """Crosses of the 3x3 block grid, 3x3 crosses per non-central block.

        The central block holds no crosses (subjects look at the camera).
        """
        out = []
        for bx in (-1, 0, 1):
            for by in (-1, 0, 1):
                if bx == 0 and by == 0:
                    continue
                cx, cy = bx * self.block_size, by * self.block_size
                for i in (-1, 0, 1):
                    for j in (-1, 0, 1):
                        out.append(Point3D(cx + i * self.cross_spacing,
                                           cy + j * self.cross_spacing, 0.0))
        return out

    def label_targets(self, eye_height: float | None = None) -> list[GazeAngles]:
        """Gaze labels for every cross, followed by the camera."""
        eye = self.eye_position(eye_height)
        targets = self.cross_positions() + [self.camera]
        return [label_gaze(t, eye) for t in targets]


NISLGAZE = WallLayout()
