"""Simplified 22-joint articulated body model.

The model keeps the parameter layout of the full parametric body model used
for pose and shape estimation (root translation, 6D root rotation, 21 6D
joint rotations and 10 shape coefficients) but replaces the licensed mesh by
a seeded stick skeleton with five rigidly attached proxy vertices per joint.

Body frame: x to the person's left, y up, z forward. Joint 0 (pelvis) is the
root and always sits at the origin of the body frame, so ``tau`` is the root
joint position.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DegenerateRotation, NotARotation, ShapeMismatch

jax.config.update("jax_enable_x64", True)

NUM_JOINTS = 22
NUM_BODY_JOINTS = 21
THETA_DIM = 6 * NUM_BODY_JOINTS
BETA_DIM = 10
VERTS_PER_JOINT = 5
NUM_VERTICES = VERTS_PER_JOINT * NUM_JOINTS
TEMPLATE_VERSION = "1"
TEMPLATE_SEED = 20220322

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
IDENTITY_THETA = np.tile(IDENTITY_6D, NUM_BODY_JOINTS)

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENT = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# T-pose, meters, body frame
_REST_JOINTS = np.array([
    [0.000, 0.000, 0.000],
    [0.060, -0.090, 0.000],
    [-0.060, -0.090, 0.000],
    [0.000, 0.110, -0.010],
    [0.110, -0.470, 0.005],
    [-0.110, -0.470, 0.005],
    [0.000, 0.250, 0.000],
    [0.110, -0.870, -0.040],
    [-0.110, -0.870, -0.040],
    [0.000, 0.310, 0.010],
    [0.120, -0.930, 0.080],
    [-0.120, -0.930, 0.080],
    [0.000, 0.520, -0.010],
    [0.080, 0.430, 0.000],
    [-0.080, 0.430, 0.000],
    [0.000, 0.640, 0.030],
    [0.180, 0.450, -0.010],
    [-0.180, 0.450, -0.010],
    [0.440, 0.440, -0.020],
    [-0.440, 0.440, -0.020],
    [0.690, 0.450, -0.010],
    [-0.690, 0.450, -0.010],
])

# bones are indexed by their child joint
_BONE_GROUPS = {
    "legs": (4, 5, 7, 8, 10, 11),
    "torso": (3, 6, 9, 12),
    "arms": (18, 19, 20, 21),
    "shoulders": (13, 14, 16, 17),
    "hips": (1, 2),
    "head": (15,),
}


def rot6d_decode(r) -> np.ndarray:
    """Decode a 6D rotation (first two matrix columns) by Gram-Schmidt.

    The all-zero vector decodes to the identity so that zero-filled default
    rotations stay valid.

    Raises:
        DegenerateRotation: if a column vanishes or the two are parallel.
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (6,):
        raise ShapeMismatch(f"6D rotation must have shape (6,), got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise DegenerateRotation("non-finite 6D rotation")
    if not np.any(r):
        return np.eye(3)
    a, b = r[:3], r[3:]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateRotation(f"6D column norm too small ({na:.3g}, {nb:.3g})")
    if np.linalg.norm(np.cross(a / na, b / nb)) < 1e-12:
        raise DegenerateRotation("6D columns are parallel")
    x = a / na
    b = b - (x @ b) * x
    y = b / np.linalg.norm(b)
    return np.stack([x, y, np.cross(x, y)], axis=-1)


def rot6d_encode(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ShapeMismatch(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
        raise NotARotation("matrix is not orthonormal with determinant +1")
    return np.concatenate([R[:, 0], R[:, 1]])


def decode_6d(r):
    """Batched differentiable Gram-Schmidt decode, ``(..., 6) -> (..., 3, 3)``.

    No validation; use :func:`rot6d_decode` on untrusted input.
    """
    zero = jnp.all(r == 0.0, axis=-1, keepdims=True)
    r = jnp.where(zero, jnp.asarray(IDENTITY_6D), r)
    a, b = r[..., :3], r[..., 3:]
    x = a / jnp.linalg.norm(a, axis=-1, keepdims=True)
    b = b - jnp.sum(x * b, axis=-1, keepdims=True) * x
    y = b / jnp.linalg.norm(b, axis=-1, keepdims=True)
    z = jnp.cross(x, y)
    return jnp.stack([x, y, z], axis=-1)


@dataclass
class BodyParams:
    """Per-view body state: translation (m), root rotation, pose, shape."""

    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())
    theta: np.ndarray = field(default_factory=lambda: IDENTITY_THETA.copy())
    beta: np.ndarray = field(default_factory=lambda: np.zeros(BETA_DIM))

    SIZE = 3 + 6 + THETA_DIM + BETA_DIM

    def __post_init__(self):
        self.tau = _as_vector(self.tau, 3, "tau")
        self.phi = _as_vector(self.phi, 6, "phi")
        self.theta = _as_vector(self.theta, THETA_DIM, "theta")
        self.beta = _as_vector(self.beta, BETA_DIM, "beta")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, self.phi, self.theta, self.beta])

    @classmethod
    def from_vector(cls, x) -> "BodyParams":
        x = np.asarray(x, dtype=float)
        if x.shape != (cls.SIZE,):
            raise ShapeMismatch(f"flat BodyParams must have {cls.SIZE} entries, got {x.shape}")
        return cls(x[:3], x[3:9], x[9:9 + THETA_DIM], x[9 + THETA_DIM:])

    def copy(self) -> "BodyParams":
        return BodyParams(self.tau.copy(), self.phi.copy(), self.theta.copy(), self.beta.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("tau", "phi", "theta", "beta")}

    @classmethod
    def from_dict(cls, d) -> "BodyParams":
        try:
            return cls(d["tau"], d["phi"], d["theta"], d["beta"])
        except KeyError as exc:
            raise ShapeMismatch(f"BodyParams missing field {exc}") from None


def _as_vector(x, n, name):
    x = np.array(x, dtype=float).reshape(-1) if np.ndim(x) else np.array([x], dtype=float)
    if x.shape != (n,):
        raise ShapeMismatch(f"{name} must have {n} entries, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ShapeMismatch(f"{name} has non-finite entries")
    return x


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class BodyTemplate:
    parent: tuple
    rest_joints: np.ndarray
    joint_shape_basis: np.ndarray
    rest_vertices: np.ndarray
    vertex_joint: np.ndarray
    vertex_shape_basis: np.ndarray
    version: str = TEMPLATE_VERSION

    def tree_flatten(self):
        children = (self.rest_joints, self.joint_shape_basis, self.rest_vertices,
                    self.vertex_joint, self.vertex_shape_basis)
        return children, (self.parent, self.version)

    @classmethod
    def tree_unflatten(cls, aux, children):
        parent, version = aux
        return cls(parent, *children, version=version)

    def validate(self):
        if len(self.parent) != NUM_JOINTS or self.parent[0] != -1:
            raise ShapeMismatch("template needs 22 joints rooted at index 0")
        for i, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < i:
                raise ShapeMismatch(f"joint {i} has invalid parent {p}")
        shapes = {
            "rest_joints": (NUM_JOINTS, 3),
            "joint_shape_basis": (NUM_JOINTS, 3, BETA_DIM),
            "rest_vertices": (NUM_VERTICES, 3),
            "vertex_joint": (NUM_VERTICES,),
            "vertex_shape_basis": (NUM_VERTICES, 3, BETA_DIM),
        }
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeMismatch(f"{name} must have shape {shape}")
        vj = np.asarray(self.vertex_joint)
        if vj.min() < 0 or vj.max() >= NUM_JOINTS:
            raise ShapeMismatch("vertex attached to a non-existent joint")
        return self

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "parent": [None if p < 0 else int(p) for p in self.parent],
            "rest_joints": np.asarray(self.rest_joints).tolist(),
            "joint_shape_basis": np.asarray(self.joint_shape_basis).tolist(),
            "rest_vertices": np.asarray(self.rest_vertices).tolist(),
            "vertex_joint": [int(v) for v in self.vertex_joint],
            "vertex_shape_basis": np.asarray(self.vertex_shape_basis).tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "BodyTemplate":
        return cls(
            parent=tuple(-1 if p is None else int(p) for p in d["parent"]),
            rest_joints=np.asarray(d["rest_joints"], dtype=float),
            joint_shape_basis=np.asarray(d["joint_shape_basis"], dtype=float),
            rest_vertices=np.asarray(d["rest_vertices"], dtype=float),
            vertex_joint=np.asarray(d["vertex_joint"], dtype=np.int64),
            vertex_shape_basis=np.asarray(d["vertex_shape_basis"], dtype=float),
            version=str(d["version"]),
        ).validate()


def build_template(seed: int = TEMPLATE_SEED) -> BodyTemplate:
    """Construct the seeded stand-in template from scratch.

    Shape modes scale bone lengths. Every mode is orthogonal (in bone-scale
    space) to a uniform rescaling of the skeleton, so no shape vector can
    mimic a change of camera distance.
    """
    rng = np.random.default_rng(seed)
    parent = PARENT
    rest = _REST_JOINTS.copy()
    rest[1:] += rng.uniform(-0.002, 0.002, size=(NUM_JOINTS - 1, 3))
    rest = np.round(rest, 6)
    bones = np.zeros_like(rest)
    for i in range(1, NUM_JOINTS):
        bones[i] = rest[i] - rest[parent[i]]

    modes = []
    legs, torso = _group_mask(("legs",)), _group_mask(("torso", "head"))
    modes.append(legs + torso)
    modes.append(legs - torso)
    modes.append(_group_mask(("arms",)))
    modes.append(_group_mask(("shoulders",)))
    modes.append(_group_mask(("hips",)))
    modes.append(_group_mask(("head",)))
    for _ in range(BETA_DIM - len(modes)):
        c = rng.normal(size=NUM_JOINTS)
        c[0] = 0.0
        for i in range(1, NUM_JOINTS):  # smooth along the tree
            if parent[i] > 0:
                c[i] = 0.5 * c[i] + 0.5 * c[parent[i]]
        modes.append(c)
    ones = np.ones(NUM_JOINTS)
    ones[0] = 0.0
    basis = [ones / np.linalg.norm(ones)]
    coeffs = []
    for c in modes:
        c = np.asarray(c, dtype=float).copy()
        c[0] = 0.0
        for b in basis:
            c -= (c @ b) * b
        c /= np.linalg.norm(c)
        basis.append(c)
        coeffs.append(0.08 * c / np.max(np.abs(c)))
    coeffs = np.round(np.stack(coeffs, axis=1), 9)  # (22, 10), bone-length fraction per unit beta

    joint_basis = np.zeros((NUM_JOINTS, 3, BETA_DIM))
    for i in range(1, NUM_JOINTS):
        joint_basis[i] = joint_basis[parent[i]] + bones[i][:, None] * coeffs[i][None, :]

    children = {i: [j for j in range(NUM_JOINTS) if parent[j] == i] for i in range(NUM_JOINTS)}
    verts, vjoint, vbasis = [], [], []
    for j in range(NUM_JOINTS):
        if children[j]:
            seg = rest[children[j][0]] - rest[j]
            seg_coeff = coeffs[children[j][0]]
        else:
            seg = 0.12 * bones[j] / np.linalg.norm(bones[j])
            seg_coeff = coeffs[j]
        axis = seg / np.linalg.norm(seg)
        helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        for k in range(VERTS_PER_JOINT):
            frac = (k + 0.5) / VERTS_PER_JOINT
            ang = 2 * np.pi * k / VERTS_PER_JOINT + rng.uniform(-0.3, 0.3)
            radius = rng.uniform(0.04, 0.08)
            offset = frac * seg + radius * (np.cos(ang) * u + np.sin(ang) * w)
            offset = np.round(offset, 6)
            verts.append(rest[j] + offset)
            vjoint.append(j)
            vbasis.append(joint_basis[j] + offset[:, None] * seg_coeff[None, :])
    return BodyTemplate(
        parent=parent,
        rest_joints=rest,
        joint_shape_basis=np.round(joint_basis, 12),
        rest_vertices=np.round(np.asarray(verts), 6),
        vertex_joint=np.asarray(vjoint, dtype=np.int64),
        vertex_shape_basis=np.round(np.asarray(vbasis), 12),
    ).validate()


def _group_mask(groups):
    c = np.zeros(NUM_JOINTS)
    for g in groups:
        c[list(_BONE_GROUPS[g])] = 1.0
    return c


def forward_kinematics(template: BodyTemplate, theta, beta):
    """Root-relative joint positions and global joint rotations.

    Returns ``(positions (22, 3), rotations (22, 3, 3), shaped_rest (22, 3))``.
    """
    shaped = template.rest_joints + template.joint_shape_basis @ beta
    local = decode_6d(theta.reshape(NUM_BODY_JOINTS, 6))
    rots = [jnp.eye(3)]
    pos = [jnp.zeros(3)]
    for i in range(1, NUM_JOINTS):
        p = template.parent[i]
        pos.append(pos[p] + rots[p] @ (shaped[i] - shaped[p]))
        rots.append(rots[p] @ local[i - 1])
    return jnp.stack(pos), jnp.stack(rots), shaped


def joints_fn(template: BodyTemplate, tau, phi, theta, beta):
    pos, _, _ = forward_kinematics(template, theta, beta)
    return tau + pos @ decode_6d(phi).T


def vertices_fn(template: BodyTemplate, tau, phi, theta, beta):
    pos, rots, shaped = forward_kinematics(template, theta, beta)
    vj = template.vertex_joint
    rest_v = template.rest_vertices + template.vertex_shape_basis @ beta
    local = rest_v - shaped[vj]
    body = pos[vj] + jnp.einsum("vij,vj->vi", rots[vj], local)
    return tau + body @ decode_6d(phi).T


_joints_jit = jax.jit(joints_fn)
_vertices_jit = jax.jit(vertices_fn)


def _check_rotations(params: BodyParams):
    rot6d_decode(params.phi)
    for r in params.theta.reshape(NUM_BODY_JOINTS, 6):
        rot6d_decode(r)


def joints(params: BodyParams, template: BodyTemplate) -> np.ndarray:
    """World joints ``tau + R(phi) FK(theta, beta)``, shape (22, 3)."""
    _check_rotations(params)
    return np.asarray(_joints_jit(template, params.tau, params.phi, params.theta, params.beta))


def vertices(params: BodyParams, template: BodyTemplate) -> np.ndarray:
    """Proxy vertices following their joint's rigid transform, shape (110, 3)."""
    _check_rotations(params)
    return np.asarray(_vertices_jit(template, params.tau, params.phi, params.theta, params.beta))
