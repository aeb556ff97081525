"""Kinematic trees of revolute joints: model loading, forward kinematics, Jacobians.

A model is an ordered list of links. Each non-root link hangs off a parent
through a fixed offset transform, optionally followed by a revolute joint
about a unit axis expressed in the offset frame.  Links without a joint are
rigidly attached (fingertips, head).  Links are stored in topological order,
so a single forward sweep composes every world pose.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

AXIS_TOL = 1e-9


class ModelError(ValueError):
    """Malformed model description; ``link`` names the offending link."""

    def __init__(self, message: str, link: str | None = None):
        super().__init__(message if link is None else f"{link}: {message}")
        self.link = link


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Joint:
    axis: np.ndarray
    lower: float
    upper: float


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    parent: int | None
    offset_rotation: np.ndarray
    offset_translation: np.ndarray
    joint: Joint | None = None


@dataclass(frozen=True, eq=False)
class LinkPoseSet:
    """World rotations ``(n, 3, 3)`` and positions ``(n, 3)`` of every link."""

    rotations: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class KinematicModel:
    name: str
    links: tuple[Link, ...]
    sets: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        joint_links = tuple(i for i, link in enumerate(self.links) if link.joint is not None)
        object.__setattr__(self, "joint_links", joint_links)
        dof_of_link = np.full(len(self.links), -1, dtype=int)
        dof_of_link[list(joint_links)] = np.arange(len(joint_links))
        dof_of_link.setflags(write=False)
        object.__setattr__(self, "dof_of_link", dof_of_link)
        # ancestor_dofs[i]: joint indices whose motion moves link i (self included)
        ancestors: list[tuple[int, ...]] = []
        for i, link in enumerate(self.links):
            chain = () if link.parent is None else ancestors[link.parent]
            if link.joint is not None:
                chain = chain + (int(dof_of_link[i]),)
            ancestors.append(chain)
        object.__setattr__(self, "ancestor_dofs", tuple(ancestors))
        lower = np.array([self.links[i].joint.lower for i in joint_links], dtype=float)
        upper = np.array([self.links[i].joint.upper for i in joint_links], dtype=float)
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dof_count(self) -> int:
        return len(self.joint_links)

    @property
    def link_names(self) -> list[str]:
        return [link.name for link in self.links]

    def link_index(self, name: str) -> int:
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(f"no link named {name!r} in model {self.name!r}")

    def joint_names(self) -> list[str]:
        return [self.links[i].name for i in self.joint_links]

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dof_count,):
            raise DimensionError(f"expected joint vector of length {self.dof_count}, got shape {q.shape}")
        return q


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit ``axis`` by ``angle`` (Rodrigues)."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x``; a ``(..., 3)`` input gives ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


# --- loading -----------------------------------------------------------------

def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def model_from_dict(doc: Mapping) -> KinematicModel:
    """Build a validated model from a parsed model document."""
    try:
        entries = list(doc["links"])
        name = str(doc.get("name", "model"))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"model document needs a 'links' list ({exc})") from None
    by_name: dict[str, Mapping] = {}
    for entry in entries:
        link_name = entry.get("name")
        if not isinstance(link_name, str) or not link_name:
            raise ModelError("every link needs a non-empty string name")
        if link_name in by_name:
            raise ModelError("duplicate link name", link_name)
        by_name[link_name] = entry

    roots = [e["name"] for e in entries if e.get("parent") is None]
    for entry in entries:
        parent = entry.get("parent")
        if parent is not None and parent not in by_name:
            raise ModelError(f"unknown parent {parent!r}", entry["name"])
    for entry in entries:
        seen = {entry["name"]}
        cur = entry.get("parent")
        while cur is not None:
            if cur in seen:
                raise ModelError("cycle in kinematic tree", entry["name"])
            seen.add(cur)
            cur = by_name[cur].get("parent")
    if len(roots) != 1:
        raise ModelError(f"expected exactly one root link, found {len(roots)}", roots[1] if len(roots) > 1 else None)

    # stable topological order: file order, parents first
    order: list[str] = []
    placed: set[str] = set()

    def place(n: str):
        if n in placed:
            return
        parent = by_name[n].get("parent")
        if parent is not None:
            place(parent)
        placed.add(n)
        order.append(n)

    for entry in entries:
        place(entry["name"])
    index = {n: i for i, n in enumerate(order)}

    links = []
    for n in order:
        entry = by_name[n]
        offset = entry.get("offset") or {}
        rot = np.array(offset.get("rotation", np.eye(3).ravel()), dtype=float)
        trans = np.array(offset.get("translation", [0.0, 0.0, 0.0]), dtype=float)
        if rot.size != 9 or trans.size != 3:
            raise ModelError("offset needs 9 rotation and 3 translation entries", n)
        rot = rot.reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ModelError("offset rotation is not a proper rotation", n)
        joint = None
        jdoc = entry.get("joint")
        if jdoc is not None:
            if entry.get("parent") is None:
                raise ModelError("root link cannot carry a joint", n)
            axis = np.array(jdoc["axis"], dtype=float)
            if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > AXIS_TOL:
                raise ModelError("joint axis must be a unit 3-vector", n)
            lower, upper = float(jdoc["lower"]), float(jdoc["upper"])
            if not lower < upper:
                raise ModelError(f"inverted joint limits [{lower}, {upper}]", n)
            joint = Joint(_frozen(axis), lower, upper)
        parent = entry.get("parent")
        links.append(Link(n, None if parent is None else index[parent], _frozen(rot), _frozen(trans), joint))

    sets = {}
    for set_name, members in (doc.get("sets") or {}).items():
        idx = []
        for m in members:
            if m not in index:
                raise ModelError(f"set {set_name!r} references unknown link", m)
            idx.append(index[m])
        sets[set_name] = tuple(idx)
    return KinematicModel(name, tuple(links), sets)


def load_model(source: str | Path | Mapping) -> KinematicModel:
    """Load a model from a mapping, a JSON path, or a bundled model name.

    Bundled names are ``"g1body"`` (29 DoF body) and ``"wuji20"`` (20 DoF hand).
    """
    if isinstance(source, Mapping):
        return model_from_dict(source)
    path = Path(source)
    if not path.exists():
        bundled = resources.files("teledex.models").joinpath(
            source if str(source).endswith(".json") else f"{source}.model.json"
        )
        if not bundled.is_file():
            raise FileNotFoundError(f"no model file or bundled model named {source!r}")
        return model_from_dict(json.loads(bundled.read_text()))
    return model_from_dict(json.loads(path.read_text()))


def model_to_dict(model: KinematicModel) -> dict:
    links = []
    for link in model.links:
        links.append({
            "name": link.name,
            "parent": None if link.parent is None else model.links[link.parent].name,
            "offset": {
                "rotation": link.offset_rotation.ravel().tolist(),
                "translation": link.offset_translation.tolist(),
            },
            "joint": None if link.joint is None else {
                "axis": link.joint.axis.tolist(),
                "lower": link.joint.lower,
                "upper": link.joint.upper,
            },
        })
    sets = {k: [model.links[i].name for i in v] for k, v in model.sets.items()}
    return {"name": model.name, "links": links, "sets": sets}


# --- kinematics ----------------------------------------------------------------

def forward_kinematics(model: KinematicModel, q) -> LinkPoseSet:
    q = model.check_q(q)
    n = len(model.links)
    rotations = np.empty((n, 3, 3))
    positions = np.empty((n, 3))
    dof = model.dof_of_link
    for i, link in enumerate(model.links):
        if link.parent is None:
            R = link.offset_rotation.copy()
            p = link.offset_translation.copy()
        else:
            Rp = rotations[link.parent]
            R = Rp @ link.offset_rotation
            p = positions[link.parent] + Rp @ link.offset_translation
        if link.joint is not None:
            R = R @ axis_angle_matrix(link.joint.axis, q[dof[i]])
        rotations[i] = R
        positions[i] = p
    return LinkPoseSet(rotations, positions)


def joint_world_axes(model: KinematicModel, poses: LinkPoseSet) -> np.ndarray:
    """World-frame axis of every joint, ``(dof_count, 3)``.

    A revolute rotation leaves its own axis fixed, so the world axis is the
    link rotation applied to the local axis.
    """
    out = np.empty((model.dof_count, 3))
    for k, i in enumerate(model.joint_links):
        out[k] = poses.rotations[i] @ model.links[i].joint.axis
    return out


def jacobian(model: KinematicModel, q, link_index: int, kind: str = "position",
             poses: LinkPoseSet | None = None) -> np.ndarray:
    """Geometric Jacobian ``(3, dof_count)`` of one link.

    ``kind="position"`` gives d(link origin)/dq; ``kind="orientation"`` gives
    the angular-velocity Jacobian (world frame).
    """
    if not 0 <= link_index < len(model.links):
        raise IndexError(f"link index {link_index} out of range")
    if kind not in ("position", "orientation"):
        raise ValueError(f"unknown jacobian kind {kind!r}")
    if poses is None:
        poses = forward_kinematics(model, q)
    J = np.zeros((3, model.dof_count))
    target = poses.positions[link_index]
    for k in model.ancestor_dofs[link_index]:
        i = model.joint_links[k]
        w = poses.rotations[i] @ model.links[i].joint.axis
        J[:, k] = w if kind == "orientation" else np.cross(w, target - poses.positions[i])
    return J


def pelvis_relative(poses: LinkPoseSet, pelvis_index: int) -> np.ndarray:
    """Link positions expressed in the pelvis frame, ``(n, 3)``."""
    Rp = poses.rotations[pelvis_index]
    return (poses.positions - poses.positions[pelvis_index]) @ Rp


def is_rotation(R: np.ndarray, tol: float = 1e-8) -> bool:
    R = np.asarray(R)
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)
