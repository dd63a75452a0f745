"""Pinhole projection and the crop/scale reparameterization.

A person crop of side ``B`` pixels is resized to the fixed network input of
``CROP_SIZE`` pixels, so ``s = B / CROP_SIZE``. The crop center is encoded as
its offset from the principal point normalized by the principal point:
``bx = (crop_cx - cx) / cx``. A root translation expressed in the crop
camera frame maps to the full camera frame by

    z = z_c * s
    x = x_c + z * bx * cx / fx
    y = y_c + z * by * cy / fy

which makes ``fx * x / z == (fx / s) * x_c / z_c + bx * cx`` hold exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import jax.numpy as jnp
import numpy as np

from .errors import BehindCamera, EmptyBox, NotARotation, ShapeMismatch

CROP_SIZE = 224
DEPTH_NORMALIZER = 20.0
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ShapeMismatch("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ShapeMismatch("principal point must lie inside the image")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CropParams:
    bx: float
    by: float
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise EmptyBox(f"crop scale must be positive, got {self.s}")
        if not (np.isfinite(self.bx) and np.isfinite(self.by)):
            raise ShapeMismatch("crop offsets must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.bx, self.by, self.s], dtype=float)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["bx"]), float(d["by"]), float(d["s"]))


IDENTITY_CROP = CropParams(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera extrinsic: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("camera pose needs a 3x3 rotation and a 3-vector")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
            raise NotARotation("camera rotation is not a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def to_camera(self, x_world):
        return np.asarray(x_world) @ self.rotation.T + self.translation

    def to_world(self, x_cam):
        return (np.asarray(x_cam) - self.translation) @ self.rotation

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float))


def project(point, K: Intrinsics) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    if p.shape[-1] != 3:
        raise ShapeMismatch("points must have 3 coordinates")
    if np.any(p[..., 2] <= MIN_DEPTH):
        raise BehindCamera("point at or behind the camera plane")
    return np.asarray(project_jnp(p, K.as_array()))


def project_jnp(points, k):
    """Differentiable projection; ``k = [fx, fy, cx, cy]``."""
    z = points[..., 2:3]
    return points[..., :2] / z * k[:2] + k[2:4]


def squarify_bbox(xmin, ymin, xmax, ymax, pad: float = 0.0):
    """Expand the short side about the center, then pad by ``pad`` fraction.

    Returns ``(x0, y0, B)`` for a square box.
    """
    side = max(xmax - xmin, ymax - ymin) * (1.0 + pad)
    ccx, ccy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
    return ccx - side / 2, ccy - side / 2, side


def crop_params_from_bbox(x0, y0, side, K: Intrinsics) -> CropParams:
    if not side > 0:
        raise EmptyBox(f"crop side must be positive, got {side}")
    return CropParams(
        bx=(x0 + side / 2 - K.cx) / K.cx,
        by=(y0 + side / 2 - K.cy) / K.cy,
        s=side / CROP_SIZE,
    )


def crop_to_full(tau_c, P: CropParams, K: Intrinsics) -> np.ndarray:
    tau_c = np.asarray(tau_c, dtype=float)
    if tau_c[2] <= 0:
        raise BehindCamera("crop-frame depth must be positive")
    return np.asarray(crop_to_full_jnp(tau_c, P.as_array(), K.as_array()))


def full_to_crop(tau, P: CropParams, K: Intrinsics) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if tau[2] <= 0:
        raise BehindCamera("full-frame depth must be positive")
    return np.asarray(full_to_crop_jnp(tau, P.as_array(), K.as_array()))


def crop_to_full_jnp(tau_c, p, k):
    """Array form of :func:`crop_to_full`; leading axes broadcast as a batch."""
    bx, by, s = p[..., 0], p[..., 1], p[..., 2]
    z = tau_c[..., 2] * s
    x = tau_c[..., 0] + z * bx * k[..., 2] / k[..., 0]
    y = tau_c[..., 1] + z * by * k[..., 3] / k[..., 1]
    return jnp.stack([x, y, z], axis=-1)


def full_to_crop_jnp(tau, p, k):
    """Array form of :func:`full_to_crop`; leading axes broadcast as a batch."""
    bx, by, s = p[..., 0], p[..., 1], p[..., 2]
    z = tau[..., 2]
    x = tau[..., 0] - z * bx * k[..., 2] / k[..., 0]
    y = tau[..., 1] - z * by * k[..., 3] / k[..., 1]
    return jnp.stack([x, y, z / s], axis=-1)


def crop_intrinsics(P: CropParams, K: Intrinsics) -> Intrinsics:
    """Virtual camera that images the crop-frame body onto the 224 px crop.

    Consistent with the translation mapping for the root: a root at depth
    ``z_c = z / s`` must shrink by ``1 / s`` in crop pixels, hence focal
    lengths ``f / s**2`` and the principal point at the crop center.
    """
    return Intrinsics(K.fx / P.s ** 2, K.fy / P.s ** 2, CROP_SIZE / 2, CROP_SIZE / 2,
                      CROP_SIZE, CROP_SIZE)


def full_to_crop_pixels(uv, P: CropParams, K: Intrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    center = np.array([K.cx * (1 + P.bx), K.cy * (1 + P.by)])
    return (uv - center) / P.s + CROP_SIZE / 2


def tau_normalize(tau) -> np.ndarray:
    return np.asarray(tau, dtype=float) / DEPTH_NORMALIZER


def tau_denormalize(tau_n) -> np.ndarray:
    return np.asarray(tau_n, dtype=float) * DEPTH_NORMALIZER
