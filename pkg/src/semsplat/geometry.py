"""Camera model, rigid-body math and Gaussian projection.

Conventions
-----------
* Quaternions are stored scalar-first, ``(w, x, y, z)``.
* A :class:`Pose` maps world points into the camera frame
  (``x_cam = R @ x_world + t``).
* Camera frame: +x right, +y down, +z forward. Pixel ``(u, v)`` has its
  centre at integer coordinates, so the principal point ``(cx, cy)`` is the
  image of the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Low-pass dilation added to the diagonal of every projected covariance (px^2).
COV2D_DILATION = 0.3


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# quaternion / rotation helpers (vectorised over leading axes)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (already normalised) quaternions ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat` for a single matrix; returns w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega):
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R):
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2
        axis = A[:, np.argmax(np.diag(A))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2 * np.sin(theta)) * w


def rotation_angle(R) -> float:
    """Angle (radians) of the rotation matrix ``R``."""
    return float(np.linalg.norm(so3_log(R)))


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "near", "far"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def shape(self):
        return (self.height, self.width)

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def from_fov(cls, width, height, hfov_deg, near=0.01, far=100.0):
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, near, far)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        if abs(n - 1.0) > 1e-6:
            q = q / n
        object.__setattr__(self, "rotation", _readonly(q))
        object.__setattr__(self, "translation", _readonly(self.translation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self):
        return quat_to_rotmat(self.rotation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, x):
        """Transform points ``(..., 3)``."""
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return se3_compose(self, other)

    def inverse(self) -> "Pose":
        return se3_inverse(self)

    def camera_center(self):
        return -self.R.T @ self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def se3_compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    if q[0] < 0:
        q = -q
    return Pose(q / np.linalg.norm(q), a.R @ b.translation + a.translation)


def se3_inverse(a: Pose) -> Pose:
    q = a.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(q, -(quat_to_rotmat(q) @ a.translation))


def se3_exp(xi) -> Pose:
    """Exponential of a twist ``(omega, v)``, rotation part first."""
    xi = np.asarray(xi, dtype=np.float64)
    omega, v = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    R = so3_exp(omega)
    K = skew(omega)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K
    else:
        V = (np.eye(3) + (1 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * K @ K)
    return Pose.from_rt(R, V @ v)


def perturb_left(pose: Pose, xi) -> Pose:
    """``exp(xi) ∘ pose``."""
    return se3_compose(se3_exp(xi), pose)


def pose_error(a: Pose, b: Pose):
    """(rotation angle in degrees, translation distance) between two poses."""
    d = se3_compose(a, se3_inverse(b))
    cam_a, cam_b = a.camera_center(), b.camera_center()
    return np.degrees(rotation_angle(d.R)), float(np.linalg.norm(cam_a - cam_b))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_c2w = np.stack([right, down, fwd], axis=1)
    R = R_c2w.T
    return Pose.from_rt(R, -R @ eye)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def covariance_from_params(log_scales, quats):
    """``R diag(s^2) R^T`` for batches of log-scales ``(N,3)`` and quaternions ``(N,4)``."""
    R = quat_to_rotmat(quat_normalize(quats))
    M = R * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(eq=False)
class Gaussian3D:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feature: np.ndarray
    topk_count: int = 0
    max_contribution: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.feature = np.asarray(self.feature, dtype=np.float64).ravel()
        self.opacity_logit = float(self.opacity_logit)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self):
        return covariance_from_params(self.log_scale[None], self.rotation[None])[0]


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB-D observation with an aligned per-pixel feature map."""

    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    feature_map: np.ndarray
    label: np.ndarray | None = None

    def __post_init__(self):
        hw = self.depth.shape
        if self.color.shape[:2] != hw or self.feature_map.shape[:2] != hw:
            raise ValueError("color, depth and feature_map must share H x W")
        if self.label is not None and self.label.shape != hw:
            raise ValueError("label must be H x W")

    @property
    def shape(self):
        return self.depth.shape

    @property
    def feature_dim(self) -> int:
        return self.feature_map.shape[-1]


@dataclass(frozen=True, eq=False)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


FRUSTUM_GUARD = 1.3


def in_view_cone(t, cam: CameraIntrinsics, guard: float = FRUSTUM_GUARD) -> np.ndarray:
    """True for camera-space points whose projection lies within ``guard``
    times the half-image extent around the principal point.

    Means far outside the view cone project with an exploding Jacobian, so
    they are culled rather than splatted across the whole image.
    """
    t = np.asarray(t, dtype=np.float64)
    z = np.where(t[:, 2] > 0, t[:, 2], np.inf)
    du = np.abs(cam.fx * t[:, 0] / z)
    dv = np.abs(cam.fy * t[:, 1] / z)
    hx = max(cam.cx, cam.width - cam.cx)
    hy = max(cam.cy, cam.height - cam.cy)
    return (t[:, 2] > 0) & (du <= guard * hx) & (dv <= guard * hy)


def project_gaussian(g: Gaussian3D, pose: Pose, cam: CameraIntrinsics,
                     dilation: float = COV2D_DILATION) -> Projected2D:
    """EWA projection of one Gaussian into the image plane."""
    t = pose.apply(g.mean)
    z = float(t[2])
    if not (cam.near < z < cam.far) or not in_view_cone(t[None], cam)[0]:
        return Projected2D(np.full(2, np.nan), np.full((2, 2), np.nan), z, False)
    W = pose.R
    J = np.array([[cam.fx / z, 0.0, -cam.fx * t[0] / z**2],
                  [0.0, cam.fy / z, -cam.fy * t[1] / z**2]])
    T = J @ W
    cov = T @ g.covariance @ T.T
    cov = 0.5 * (cov + cov.T) + dilation * np.eye(2)
    mean2d = np.array([cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy])
    return Projected2D(mean2d, cov, z, True)
