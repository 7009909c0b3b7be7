"""SE(3) poses, pinhole camera model, and TUM trajectory I/O.

Poses map camera coordinates to world coordinates (T_world<-camera) and
store the rotation as a 3x3 matrix.  Tangent vectors are ordered
(rho, omega): translation part first, rotation part last.  Quaternions
appear only at the TUM text boundary, in (qx, qy, qz, qw) order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_EPS_ANGLE = 1e-8


class GeometryError(ValueError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class Pose:
    """Rigid transform T_world<-camera."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-9) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > tol:
            raise GeometryError(f"rotation not orthonormal (err {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > tol:
            raise GeometryError("rotation determinant != +1")

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform camera-frame point(s) (...,3) into the world frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        """Intrinsics for an image resampled by (sx, sy) in (width, height).

        Pixel centers convention: pixel (u, v) samples the image at
        (u + 0.5, v + 0.5) in continuous coordinates.
        """
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                (self.cx + 0.5) * sx - 0.5,
                                (self.cy + 0.5) * sy - 0.5)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < _EPS_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rot: np.ndarray) -> np.ndarray:
    trace = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(trace)
    if theta > math.pi - 1e-6:
        raise GeometryError("rotation angle at or near pi: log map ill-conditioned")
    vee = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < _EPS_ANGLE:
        return 0.5 * vee
    return theta / (2.0 * math.sin(theta)) * vee


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * w + (w @ w) / 6.0
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * w + b * (w @ w)


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    w = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * w + (w @ w) / 12.0
    cot_term = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * w + cot_term * (w @ w)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map; xi = (rho, omega) with translation first."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise GeometryError("non-finite tangent vector")
    rho, omega = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _so3_left_jacobian(omega) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    rho = _so3_left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([rho, omega])


def adjoint(pose: Pose) -> np.ndarray:
    """Adjoint matrix: exp(Ad_T xi) = T exp(xi) T^-1, in (rho, omega) order."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = pose.rotation
    ad[3:, 3:] = pose.rotation
    ad[:3, 3:] = skew(pose.translation) @ pose.rotation
    return ad


def _se3_q_matrix(rho: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (Barfoot's Q matrix)."""
    rx = skew(rho)
    wx = skew(omega)
    theta = np.linalg.norm(omega)
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - theta**2 / 120.0
        c2 = -1.0 / 24.0 + theta**2 / 720.0
        c4 = -1.0 / 120.0 + theta**2 / 5040.0
    else:
        c1 = (theta - math.sin(theta)) / theta**3
        c2 = (1.0 - theta**2 / 2.0 - math.cos(theta)) / theta**4
        c4 = (theta - math.sin(theta) - theta**3 / 6.0) / theta**5
    c3 = 0.5 * (c2 - 3.0 * c4)
    wrwx = wx @ rx @ wx
    q = 0.5 * rx
    q = q + c1 * (wx @ rx + rx @ wx + wrwx)
    q = q - c2 * (wx @ wx @ rx + rx @ wx @ wx - 3.0 * wrwx)
    q = q - c3 * (wrwx @ wx + wx @ wrwx)
    return q


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SE(3) at xi = (rho, omega)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, omega = xi[:3], xi[3:]
    jinv = _so3_left_jacobian_inv(omega)
    q = _se3_q_matrix(rho, omega)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[:3, 3:] = -jinv @ q @ jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=np.float64))


def project(point: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel (u, v)."""
    point = np.asarray(point, dtype=np.float64)
    z = point[..., 2]
    if np.any(z <= 0):
        raise GeometryError("point behind camera (z <= 0)")
    u = intr.fx * point[..., 0] / z + intr.cx
    v = intr.fy * point[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def unproject(pixel: np.ndarray, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Inverse pinhole: pixel (u, v) at camera depth z to a 3D point."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("nonpositive depth")
    x = (pixel[..., 0] - intr.cx) / intr.fx * depth
    y = (pixel[..., 1] - intr.cy) / intr.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def pixel_rays(intr: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    """Unit-depth ray directions for every pixel, shape (H, W, 3)."""
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    )


# --- quaternions (TUM boundary only) ----------------------------------------


def rotation_to_quat_xyzw(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (m[2, 1] - m[1, 2]) / s
        qy = (m[0, 2] - m[2, 0]) / s
        qz = (m[1, 0] - m[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            qw = (m[2, 1] - m[1, 2]) / s
            qx = 0.25 * s
            qy = (m[0, 1] + m[1, 0]) / s
            qz = (m[0, 2] + m[2, 0]) / s
        elif i == 1:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            qw = (m[0, 2] - m[2, 0]) / s
            qx = (m[0, 1] + m[1, 0]) / s
            qy = 0.25 * s
            qz = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            qw = (m[1, 0] - m[0, 1]) / s
            qx = (m[0, 2] + m[2, 0]) / s
            qy = (m[1, 2] + m[2, 1]) / s
            qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_xyzw_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def save_tum_trajectory(path, stamped_poses) -> None:
    """Write (timestamp, Pose) pairs as TUM lines: t tx ty tz qx qy qz qw."""
    lines = []
    for ts, pose in stamped_poses:
        q = rotation_to_quat_xyzw(pose.rotation)
        t = pose.translation
        lines.append(
            f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tum_trajectory(path) -> tuple[list[tuple[float, Pose]], int]:
    """Parse a TUM trajectory file; returns (stamped poses, skipped-line count)."""
    out: list[tuple[float, Pose]] = []
    skipped = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                skipped += 1
                continue
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                skipped += 1
                continue
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            out.append((ts, Pose(quat_xyzw_to_rotation([qx, qy, qz, qw]), [tx, ty, tz])))
    return out, skipped
