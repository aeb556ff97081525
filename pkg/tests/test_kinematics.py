import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from teledex.kinematics import (DimensionError, ModelError, axis_angle_matrix, forward_kinematics, is_rotation,
                                jacobian, load_model, model_to_dict, pelvis_relative)

from conftest import random_chain_doc, random_rotation


def homogeneous(R, p):
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = R, p
    return T


def rot_about(axis, angle):
    # independent Rodrigues via the matrix exponential series of the skew matrix
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def fk_oracle(doc, q):
    """World transforms by chaining 4x4 matrices one link at a time."""
    T = {}
    k = 0
    for link in doc["links"]:
        R = np.array(link["offset"]["rotation"]).reshape(3, 3)
        local = homogeneous(R, np.array(link["offset"]["translation"]))
        if link["joint"] is not None:
            local = local @ homogeneous(rot_about(np.array(link["joint"]["axis"]), q[k]), np.zeros(3))
            k += 1
        T[link["name"]] = local if link["parent"] is None else T[link["parent"]] @ local
    return T


def single_joint_doc():
    return {"name": "one", "links": [
        {"name": "base", "parent": None, "offset": {"rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 0]},
         "joint": None},
        {"name": "arm", "parent": "base", "offset": {"rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 0]},
         "joint": {"axis": [0, 0, 1], "lower": -3, "upper": 3}},
        {"name": "end", "parent": "arm", "offset": {"rotation": np.eye(3).ravel().tolist(), "translation": [1, 0, 0]},
         "joint": None},
    ], "sets": {}}


def test_root_only_model_has_no_dofs():
    doc = {"name": "r", "links": [{"name": "root", "parent": None,
                                   "offset": {"rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 0]},
                                   "joint": None}], "sets": {}}
    assert load_model(doc).dof_count == 0


def test_bundled_models(body, hand):
    assert body.dof_count == 29
    assert hand.dof_count == 20
    assert len(hand.sets["fingertips"]) == 5
    for f in ("thumb", "index", "middle", "ring", "little"):
        assert len(hand.sets[f]) == 4


@pytest.mark.parametrize("mutate, link", [
    (lambda d: d["links"][1]["joint"].update(axis=[0, 0, 2]), "arm"),
    (lambda d: d["links"][1]["joint"].update(lower=1.0, upper=-1.0), "arm"),
    (lambda d: d["links"][2].update(parent="ghost"), "end"),
    (lambda d: d["links"][0].update(parent="end"), None),
])
def test_schema_errors_name_the_link(mutate, link):
    doc = single_joint_doc()
    mutate(doc)
    with pytest.raises(ModelError) as err:
        load_model(doc)
    if link is not None:
        assert err.value.link == link


def test_model_round_trip(hand):
    again = load_model(json.loads(json.dumps(model_to_dict(hand))))
    q = np.random.default_rng(1).uniform(hand.lower, hand.upper)
    a, b = forward_kinematics(hand, q), forward_kinematics(again, q)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.rotations, b.rotations)


def test_zero_q_composes_offsets():
    doc = random_chain_doc(np.random.default_rng(2))
    model = load_model(doc)
    poses = forward_kinematics(model, np.zeros(model.dof_count))
    T = np.eye(4)
    for link, R, p in zip(doc["links"], poses.rotations, poses.positions):
        T = T @ homogeneous(np.array(link["offset"]["rotation"]).reshape(3, 3), link["offset"]["translation"])
        np.testing.assert_allclose(R, T[:3, :3], atol=1e-12)
        np.testing.assert_allclose(p, T[:3, 3], atol=1e-12)


def test_quarter_turn_moves_child_to_y():
    model = load_model(single_joint_doc())
    p = forward_kinematics(model, [np.pi / 2]).positions[2]
    np.testing.assert_allclose(p, [0, 1, 0], atol=1e-12)


def test_dimension_error(hand):
    with pytest.raises(DimensionError):
        forward_kinematics(hand, np.zeros(19))


@pytest.mark.parametrize("seed", range(10))
def test_fk_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    doc = random_chain_doc(rng, 3, branch=seed % 2 == 1)
    model = load_model(doc)
    q = rng.uniform(-2.5, 2.5, model.dof_count)
    poses = forward_kinematics(model, q)
    T = fk_oracle(doc, q)
    for i, link in enumerate(doc["links"]):
        np.testing.assert_allclose(poses.rotations[i], T[link["name"]][:3, :3], atol=1e-12)
        np.testing.assert_allclose(poses.positions[i], T[link["name"]][:3, 3], atol=1e-12)


def test_root_jacobian_is_zero(body):
    q = body.midpoints()
    for kind in ("position", "orientation"):
        assert not jacobian(body, q, 0, kind).any()


def test_single_joint_jacobian():
    model = load_model(single_joint_doc())
    np.testing.assert_allclose(jacobian(model, [0.0], 2)[:, 0], [0, 1, 0], atol=1e-15)


def fd_jacobians(model, q, link, h=1e-6):
    Jp = np.zeros((3, model.dof_count))
    Jw = np.zeros((3, model.dof_count))
    for k in range(model.dof_count):
        dq = np.zeros(model.dof_count)
        dq[k] = h
        a, b = forward_kinematics(model, q + dq), forward_kinematics(model, q - dq)
        Jp[:, k] = (a.positions[link] - b.positions[link]) / (2 * h)
        dR = (a.rotations[link] - b.rotations[link]) / (2 * h)
        W = dR @ forward_kinematics(model, q).rotations[link].T   # skew(omega)
        Jw[:, k] = [W[2, 1], W[0, 2], W[1, 0]]
    return Jp, Jw


def test_jacobian_matches_finite_differences(body, hand):
    """100 random (model, q, link) samples, max abs error below 1e-5."""
    rng = np.random.default_rng(3)
    worst = 0.0
    for s in range(100):
        model = (body, hand, load_model(random_chain_doc(rng, 4)))[s % 3]
        q = rng.uniform(model.lower, model.upper)
        link = int(rng.integers(1, len(model.links)))
        Jp, Jw = fd_jacobians(model, q, link)
        worst = max(worst, np.abs(Jp - jacobian(model, q, link)).max(),
                    np.abs(Jw - jacobian(model, q, link, "orientation")).max())
    assert worst < 1e-5


def test_fk_rotations_are_valid_and_deterministic(body):
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = rng.uniform(body.lower, body.upper)
        a, b = forward_kinematics(body, q), forward_kinematics(body, q.copy())
        assert np.array_equal(a.rotations, b.rotations) and np.array_equal(a.positions, b.positions)
        assert all(is_rotation(R) for R in a.rotations)


def test_pelvis_relative_oracle(body):
    rng = np.random.default_rng(5)
    poses = forward_kinematics(body, rng.uniform(body.lower, body.upper))
    pelvis = body.sets["pelvis"][0]
    rel = pelvis_relative(poses, pelvis)
    Tinv = np.linalg.inv(homogeneous(poses.rotations[pelvis], poses.positions[pelvis]))
    for i, p in enumerate(poses.positions):
        np.testing.assert_allclose(rel[i], (Tinv @ np.append(p, 1.0))[:3], atol=1e-12)
    assert not rel[pelvis].any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pelvis_relative_rigid_invariance(seed):
    from teledex.kinematics import LinkPoseSet
    rng = np.random.default_rng(seed)
    n = 6
    R = np.array([random_rotation(rng) for _ in range(n)])
    # positions on a dyadic grid so a grid-aligned shift is exact
    p = np.round(rng.uniform(-2, 2, (n, 3)) * 2**20) / 2**20
    d = np.round(rng.uniform(-5, 5, 3) * 2**20) / 2**20
    base = pelvis_relative(LinkPoseSet(R, p), 0)
    assert np.array_equal(base, pelvis_relative(LinkPoseSet(R, p + d), 0))
    G = random_rotation(rng)
    turned = pelvis_relative(LinkPoseSet(G @ R, p @ G.T + d), 0)
    np.testing.assert_allclose(turned, base, atol=1e-12)


def test_axis_angle_matrix_is_rotation():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        t = rng.uniform(-4, 4)
        R = axis_angle_matrix(a, t)
        assert is_rotation(R)
        np.testing.assert_allclose(R, rot_about(a, t), atol=1e-14)
