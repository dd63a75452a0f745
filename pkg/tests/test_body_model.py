import jax
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params, random_rotation, rel_err
from uavmocap.body_model import (
    BETA_DIM, IDENTITY_6D, NUM_JOINTS, NUM_VERTICES, PARENT, BodyParams, build_template,
    joints, joints_fn, rot6d_decode, rot6d_encode, vertices, vertices_fn,
)
from uavmocap.errors import DegenerateRotation, NotARotation, ShapeMismatch

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class TestRot6d:
    def test_identity_encoding(self):
        np.testing.assert_array_equal(rot6d_decode([1, 0, 0, 0, 1, 0]), np.eye(3))

    def test_column_scale_invariance(self):
        np.testing.assert_allclose(rot6d_decode([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-15)

    def test_hand_gram_schmidt(self):
        R = rot6d_decode([0, 1, 0, 0, 0, 1])
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0])
        np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1])
        np.testing.assert_allclose(R @ [0, 0, 1], [1, 0, 0])
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_zero_vector_is_identity(self):
        np.testing.assert_array_equal(rot6d_decode(np.zeros(6)), np.eye(3))

    @pytest.mark.parametrize("r", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0], [1, 0, 0, 2, 0, 0],
                                   [1e-13, 0, 0, 0, 1, 0]])
    def test_degenerate(self, r):
        with pytest.raises(DegenerateRotation):
            rot6d_decode(r)

    def test_encode_examples(self):
        np.testing.assert_array_equal(rot6d_encode(np.eye(3)), [1, 0, 0, 0, 1, 0])
        np.testing.assert_allclose(rot6d_encode(RZ90), [0, 1, 0, -1, 0, 0])

    def test_encode_rejects_non_rotation(self):
        with pytest.raises(NotARotation):
            rot6d_encode(np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(NotARotation):
            rot6d_encode(2 * np.eye(3))

    def test_round_trip_1000(self, rng):
        worst = max(np.max(np.abs(rot6d_decode(rot6d_encode(R)) - R))
                    for R in (random_rotation(rng) for _ in range(1000)))
        assert worst < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=6, max_size=6))
    def test_decode_orthonormal(self, r):
        r = np.array(r)
        a, b = r[:3], r[3:]
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        if np.linalg.norm(np.cross(a, b)) < 1e-3 * np.linalg.norm(a) * np.linalg.norm(b):
            return
        R = rot6d_decode(r)
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9


class TestBodyParams:
    def test_vector_round_trip(self, rng):
        p = random_params(rng)
        q = BodyParams.from_vector(p.to_vector())
        for k in ("tau", "phi", "theta", "beta"):
            np.testing.assert_array_equal(getattr(p, k), getattr(q, k))

    def test_arity(self):
        with pytest.raises(ShapeMismatch):
            BodyParams(theta=np.zeros(125))
        with pytest.raises(ShapeMismatch):
            BodyParams(beta=np.zeros(11))
        with pytest.raises(ShapeMismatch):
            BodyParams(tau=[0, 0, np.nan])

    def test_dict_round_trip(self, rng):
        p = random_params(rng)
        np.testing.assert_array_equal(BodyParams.from_dict(p.to_dict()).to_vector(), p.to_vector())


class TestTemplate:
    def test_structure(self, template):
        assert len(template.parent) == NUM_JOINTS and template.parent[0] == -1
        assert all(0 <= p < i for i, p in enumerate(PARENT) if i > 0)
        assert template.rest_vertices.shape == (NUM_VERTICES, 3)
        assert np.all((template.vertex_joint >= 0) & (template.vertex_joint < NUM_JOINTS))
        assert template.joint_shape_basis.shape == (NUM_JOINTS, 3, BETA_DIM)

    def test_deterministic(self, template):
        again = build_template()
        assert again.to_dict() == template.to_dict()


class TestJoints:
    def test_rest(self, template):
        np.testing.assert_allclose(joints(BodyParams(), template), template.rest_joints, atol=1e-12)

    def test_translation(self, template):
        j = joints(BodyParams(tau=[1, 2, 3]), template)
        np.testing.assert_allclose(j, template.rest_joints + [1, 2, 3], atol=1e-12)

    def test_root_rotation(self, template):
        j = joints(BodyParams(phi=rot6d_encode(RZ90)), template)
        np.testing.assert_allclose(j, template.rest_joints @ RZ90.T, atol=1e-12)

    def test_rigid_equivariance(self, template, rng):
        p = random_params(rng)
        R = random_rotation(rng)
        t = rng.normal(size=3)
        q = p.copy()
        q.phi = rot6d_encode(R @ rot6d_decode(p.phi))
        q.tau = R @ p.tau + t
        np.testing.assert_allclose(joints(q, template), joints(p, template) @ R.T + t, atol=1e-10)

    def test_shape_linear_at_rest(self, template, rng):
        b1, b2 = rng.normal(size=BETA_DIM), rng.normal(size=BETA_DIM)
        j = lambda b: joints(BodyParams(beta=b), template)
        np.testing.assert_allclose(j(b1 + b2) - j(b1), j(b2) - j(np.zeros(BETA_DIM)), atol=1e-12)


class TestVertices:
    def test_rest_is_shape_adjusted(self, template, rng):
        b = rng.normal(size=BETA_DIM)
        expected = template.rest_vertices + template.vertex_shape_basis @ b
        np.testing.assert_allclose(vertices(BodyParams(beta=b), template), expected, atol=1e-12)

    def test_translation(self, template):
        v = vertices(BodyParams(tau=[1, 2, 3]), template)
        np.testing.assert_allclose(v, template.rest_vertices + [1, 2, 3], atol=1e-12)

    def test_rigid_attachment(self, template, rng):
        p = random_params(rng)
        rest = BodyParams(beta=p.beta)
        d_rest = np.linalg.norm(vertices(rest, template) - joints(rest, template)[template.vertex_joint], axis=1)
        d = np.linalg.norm(vertices(p, template) - joints(p, template)[template.vertex_joint], axis=1)
        np.testing.assert_allclose(d, d_rest, atol=1e-10)


@pytest.mark.parametrize("fn,name", [(joints_fn, "joints"), (vertices_fn, "vertices")])
def test_jacobian_matches_finite_differences(template, fn, name):
    """Autodiff Jacobians against central differences at 100 seeded points."""
    rng = np.random.default_rng(7)

    def flat(x):
        return fn(template, x[:3], x[3:9], x[9:135], x[135:]).ravel()

    jac = jax.jit(jax.jacfwd(flat))
    f = jax.jit(flat)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        x = random_params(rng).to_vector()
        J = np.asarray(jac(x))
        d = rng.normal(size=x.size)
        fd = (np.asarray(f(x + h * d)) - np.asarray(f(x - h * d))) / (2 * h)
        worst = max(worst, rel_err(J @ d, fd))
    assert worst < 1e-4, f"{name}: {worst}"


def test_identity_6d_constant():
    np.testing.assert_array_equal(IDENTITY_6D, [1, 0, 0, 0, 1, 0])
