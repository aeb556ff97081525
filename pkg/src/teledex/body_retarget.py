"""Pelvis-centric whole-body retargeting and command-vector assembly.

The solver matches every tracked link orientation in the world frame and a
set of end-effector positions expressed in the pelvis frame.  Because only
pelvis-relative positions enter the objective, a global position offset
shared by all human links (tracker drift) has no effect on the result.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kinematics import (DimensionError, KinematicModel, forward_kinematics,
                         joint_world_axes, pelvis_relative, skew)
from .solver import LMResult, NumericError, SolverOptions, levenberg_marquardt

BODY_DOF = 29
HAND_DOF = 20
BASE_DIMS = 6  # v_root(2) + z_ref(1) + theta_root(2) + yaw_rate(1)


class MappingError(LookupError):
    pass


class ConfigError(ValueError):
    pass


class RetargetError(RuntimeError):
    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause


@dataclass
class HumanFrame:
    """One mocap sample: per-link world poses plus wrist-frame fingertips."""

    timestamp_us: int
    link_rotations: dict[str, np.ndarray]
    link_positions: dict[str, np.ndarray]
    fingertips_left: np.ndarray | None = None
    fingertips_right: np.ndarray | None = None
    node_count: int = 0

    def __post_init__(self):
        if self.timestamp_us < 0:
            raise ValueError("timestamp must be non-negative")
        for attr in ("fingertips_left", "fingertips_right"):
            tips = getattr(self, attr)
            if tips is not None:
                tips = np.asarray(tips, dtype=float).reshape(-1, 3)
                if tips.shape != (5, 3):
                    raise ValueError(f"{attr} needs exactly 5 fingertips, got {tips.shape[0]}")
                setattr(self, attr, tips)

    def to_dict(self) -> dict:
        d = {
            "t_us": int(self.timestamp_us),
            "rot": {k: np.asarray(v, dtype=float).ravel().tolist() for k, v in self.link_rotations.items()},
            "pos": {k: np.asarray(v, dtype=float).tolist() for k, v in self.link_positions.items()},
            "tips_l": None if self.fingertips_left is None else self.fingertips_left.ravel().tolist(),
            "tips_r": None if self.fingertips_right is None else self.fingertips_right.ravel().tolist(),
            "nodes": int(self.node_count),
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "HumanFrame":
        return cls(
            timestamp_us=int(d["t_us"]),
            link_rotations={k: np.array(v, dtype=float).reshape(3, 3) for k, v in d["rot"].items()},
            link_positions={k: np.array(v, dtype=float).reshape(3) for k, v in d["pos"].items()},
            fingertips_left=None if d.get("tips_l") is None else np.array(d["tips_l"], dtype=float),
            fingertips_right=None if d.get("tips_r") is None else np.array(d["tips_r"], dtype=float),
            node_count=int(d.get("nodes", 0)),
        )


def frame_from_poses(model: KinematicModel, q, timestamp_us: int = 0, **kw) -> HumanFrame:
    """Human frame whose links are exactly the model's FK poses at ``q``."""
    poses = forward_kinematics(model, q)
    return HumanFrame(
        timestamp_us=timestamp_us,
        link_rotations={l.name: poses.rotations[i].copy() for i, l in enumerate(model.links)},
        link_positions={l.name: poses.positions[i].copy() for i, l in enumerate(model.links)},
        **kw,
    )


@dataclass(frozen=True)
class LinkPair:
    human: str
    robot: int
    weight: float = 1.0


@dataclass(frozen=True)
class RetargetConfig:
    orientation_links: tuple[LinkPair, ...]
    position_links: tuple[LinkPair, ...]
    pelvis_human: str
    pelvis_robot: int
    solver: SolverOptions = SolverOptions()

    def validate(self, model: KinematicModel) -> None:
        n = len(model.links)
        for pair in self.orientation_links + self.position_links:
            if not 0 <= pair.robot < n:
                raise ConfigError(f"robot link index {pair.robot} out of range for {model.name}")
            if not (pair.weight >= 0 and math.isfinite(pair.weight)):
                raise ConfigError(f"weight for {pair.human!r} must be finite and non-negative")
        if not 0 <= self.pelvis_robot < n:
            raise ConfigError("pelvis robot index out of range")
        for pair in self.position_links:
            if pair.robot == self.pelvis_robot and pair.weight > 0:
                raise ConfigError("pelvis cannot carry a position weight: its relative position is identically zero")

    def scaled(self, c: float) -> "RetargetConfig":
        def sc(pairs):
            return tuple(LinkPair(p.human, p.robot, p.weight * c) for p in pairs)
        return RetargetConfig(sc(self.orientation_links), sc(self.position_links),
                              self.pelvis_human, self.pelvis_robot, self.solver)

    def to_dict(self, model: KinematicModel) -> dict:
        def pairs(ps):
            return [{"human": p.human, "robot": model.links[p.robot].name, "weight": p.weight} for p in ps]
        return {
            "orientation_links": pairs(self.orientation_links),
            "position_links": pairs(self.position_links),
            "pelvis": {"human": self.pelvis_human, "robot": model.links[self.pelvis_robot].name},
            "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping, model: KinematicModel) -> "RetargetConfig":
        def resolve(ref):
            if isinstance(ref, int):
                return ref
            try:
                return model.link_index(ref)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None

        def pairs(ps):
            return tuple(LinkPair(p["human"], resolve(p["robot"]), float(p.get("weight", 1.0))) for p in ps)
        try:
            cfg = cls(pairs(d["orientation_links"]), pairs(d["position_links"]),
                      d["pelvis"]["human"], resolve(d["pelvis"]["robot"]),
                      SolverOptions.from_dict(d.get("solver")))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed retarget config: {exc}") from None
        cfg.validate(model)
        return cfg


def default_config(model: KinematicModel, solver: SolverOptions | None = None) -> RetargetConfig:
    """Every link tracked in orientation; wrists, ankles and head in position.

    Human link names are assumed equal to robot link names (donor skeleton).
    """
    pelvis = model.sets["pelvis"][0] if "pelvis" in model.sets else 0
    orient = tuple(LinkPair(l.name, i, 1.0) for i, l in enumerate(model.links))
    ee = model.sets.get("end_effectors", ())
    pos = tuple(LinkPair(model.links[i].name, i, 1.0) for i in ee if i != pelvis)
    cfg = RetargetConfig(orient, pos, model.links[pelvis].name, pelvis, solver or SolverOptions())
    cfg.validate(model)
    return cfg


def load_config(source, model: KinematicModel) -> RetargetConfig:
    """``"default"``, a mapping, or a path to a JSON config file."""
    if isinstance(source, Mapping):
        return RetargetConfig.from_dict(source, model)
    if source in (None, "default"):
        return default_config(model)
    return RetargetConfig.from_dict(json.loads(Path(source).read_text()), model)


# --- objective ---------------------------------------------------------------

def _human_terms(config: RetargetConfig, frame: HumanFrame):
    try:
        Rp = frame.link_rotations[config.pelvis_human]
        pp = frame.link_positions[config.pelvis_human]
    except KeyError:
        raise MappingError(f"human frame lacks pelvis link {config.pelvis_human!r}") from None
    rots = []
    for pair in config.orientation_links:
        try:
            rots.append(frame.link_rotations[pair.human])
        except KeyError:
            raise MappingError(f"human frame lacks link {pair.human!r}") from None
    rel = []
    for pair in config.position_links:
        try:
            rel.append((frame.link_positions[pair.human] - pp) @ Rp)
        except KeyError:
            raise MappingError(f"human frame lacks link {pair.human!r}") from None
    return rots, rel


def retarget_cost(config: RetargetConfig, frame: HumanFrame, model: KinematicModel, q):
    """Weighted objective value and the stacked residual at ``q``.

    The residual carries ``sqrt(w)`` times the 9 entries of each rotation
    difference and the 3 entries of each relative position difference, so
    its squared norm equals the cost.
    """
    q = model.check_q(q)
    rots, rel = _human_terms(config, frame)
    poses = forward_kinematics(model, q)
    robot_rel = pelvis_relative(poses, config.pelvis_robot)
    cost = 0.0
    parts = []
    for pair, RH in zip(config.orientation_links, rots):
        d = RH - poses.rotations[pair.robot]
        cost += pair.weight * float(np.sum(d * d))
        parts.append(math.sqrt(pair.weight) * d.ravel())
    for pair, pH in zip(config.position_links, rel):
        d = pH - robot_rel[pair.robot]
        cost += pair.weight * float(np.sum(d * d))
        parts.append(math.sqrt(pair.weight) * d)
    r = np.concatenate(parts) if parts else np.zeros(0)
    return cost, r


def _residual_and_jacobian(config, model, rots, rel, q):
    poses = forward_kinematics(model, q)
    axes = joint_world_axes(model, poses)
    origins = poses.positions[list(model.joint_links)] if model.dof_count else np.zeros((0, 3))
    Rp = poses.rotations[config.pelvis_robot]
    pp = poses.positions[config.pelvis_robot]
    pelvis_anc = set(model.ancestor_dofs[config.pelvis_robot])
    n = model.dof_count
    m = 9 * len(rots) + 3 * len(rel)
    r = np.empty(m)
    J = np.zeros((m, n))
    row = 0
    for pair, RH in zip(config.orientation_links, rots):
        sw = math.sqrt(pair.weight)
        R = poses.rotations[pair.robot]
        r[row:row + 9] = sw * (RH - R).ravel()
        ks = list(model.ancestor_dofs[pair.robot])
        if ks:
            # d/dq_k R = [w_k]x R, one 3x3 block per ancestor joint
            dR = skew(axes[ks]) @ R
            J[row:row + 9, ks] = -sw * dR.reshape(len(ks), 9).T
        row += 9
    for pair, pH in zip(config.position_links, rel):
        sw = math.sqrt(pair.weight)
        pj = poses.positions[pair.robot]
        r[row:row + 3] = sw * (pH - (pj - pp) @ Rp)
        anc_j = set(model.ancestor_dofs[pair.robot])
        mine = sorted(anc_j - pelvis_anc)
        theirs = sorted(pelvis_anc - anc_j)
        if mine:
            d = np.cross(axes[mine], pj - origins[mine])
            J[row:row + 3, mine] = -sw * (d @ Rp).T
        if theirs:
            # pelvis moves, link does not
            d = -np.cross(axes[theirs], pp - origins[theirs]) - np.cross(axes[theirs], pj - pp)
            J[row:row + 3, theirs] = -sw * (d @ Rp).T
        row += 3
    return r, J


def solve_frame(config: RetargetConfig, frame: HumanFrame, model: KinematicModel, q_init) -> "RetargetSolution":
    q_init = model.check_q(q_init)
    rots, rel = _human_terms(config, frame)
    res = levenberg_marquardt(lambda q: _residual_and_jacobian(config, model, rots, rel, q),
                              q_init, model.lower, model.upper, config.solver)
    return RetargetSolution.from_lm(res, _breakdown(config, rots, rel, model, res.x))


def _breakdown(config, rots, rel, model, q) -> dict[str, float]:
    poses = forward_kinematics(model, q)
    robot_rel = pelvis_relative(poses, config.pelvis_robot)
    o = sum(p.weight * float(np.sum((RH - poses.rotations[p.robot]) ** 2))
            for p, RH in zip(config.orientation_links, rots))
    pcost = sum(p.weight * float(np.sum((pH - robot_rel[p.robot]) ** 2))
                for p, pH in zip(config.position_links, rel))
    return {"orientation": o, "position": pcost}


@dataclass
class RetargetSolution:
    q_star: np.ndarray
    final_cost: float
    iterations: int
    accepted_steps: int
    converged: bool
    stop_reason: str
    cost_history: list[float] = field(default_factory=list)
    residual_breakdown: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_lm(cls, res: LMResult, breakdown: dict[str, float]) -> "RetargetSolution":
        return cls(res.x, res.cost, res.iterations, res.accepted_steps, res.converged,
                   res.stop_reason, res.cost_history, breakdown)


def retarget_stream(config: RetargetConfig, frames: Sequence[HumanFrame], model: KinematicModel,
                    q_init=None) -> list[RetargetSolution]:
    """Solve frames in order, warm-starting each from the previous solution."""
    if len(frames) == 0:
        raise ValueError("retarget_stream needs at least one frame")
    q = model.midpoints() if q_init is None else model.check_q(q_init)
    out = []
    for k, frame in enumerate(frames):
        try:
            sol = solve_frame(config, frame, model, q)
        except (MappingError, NumericError, DimensionError) as exc:
            raise RetargetError(k, exc) from exc
        out.append(sol)
        q = sol.q_star
    return out


# --- command vector ------------------------------------------------------------

@dataclass(frozen=True)
class BaseCommand:
    v_root: tuple[float, float] = (0.0, 0.0)
    z_ref: float = 0.0
    theta_root: tuple[float, float] = (0.0, 0.0)
    yaw_rate: float = 0.0


@dataclass(eq=False)
class CommandVector:
    """Base command plus joint targets ``q_ref = [q_body, q_hand_left, q_hand_right]``."""

    v_root: np.ndarray
    z_ref: float
    theta_root: np.ndarray
    yaw_rate: float
    q_body: np.ndarray
    q_hand_left: np.ndarray
    q_hand_right: np.ndarray

    def __post_init__(self):
        self.v_root = np.asarray(self.v_root, dtype=float)
        self.theta_root = np.asarray(self.theta_root, dtype=float)
        self.z_ref = float(self.z_ref)
        self.yaw_rate = float(self.yaw_rate)
        self.q_body = np.asarray(self.q_body, dtype=float)
        self.q_hand_left = np.asarray(self.q_hand_left, dtype=float)
        self.q_hand_right = np.asarray(self.q_hand_right, dtype=float)
        shapes = {"v_root": (self.v_root, 2), "theta_root": (self.theta_root, 2), "q_body": (self.q_body, BODY_DOF),
                  "q_hand_left": (self.q_hand_left, HAND_DOF), "q_hand_right": (self.q_hand_right, HAND_DOF)}
        for name, (arr, n) in shapes.items():
            if arr.shape != (n,):
                raise DimensionError(f"{name} must have length {n}, got shape {arr.shape}")
        if not np.all(np.isfinite(self.as_vector())):
            raise ValueError("command entries must be finite")

    @property
    def q_ref(self) -> np.ndarray:
        return np.concatenate([self.q_body, self.q_hand_left, self.q_hand_right])

    @property
    def body_command(self) -> np.ndarray:
        """The 35-dim block fed to the balance controller (6 base dims + 29 joints)."""
        return np.concatenate([self.v_root, [self.z_ref], self.theta_root, [self.yaw_rate], self.q_body])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.body_command, self.q_hand_left, self.q_hand_right])

    def __eq__(self, other):
        if not isinstance(other, CommandVector):
            return NotImplemented
        return np.array_equal(self.as_vector(), other.as_vector())

    def to_dict(self) -> dict:
        return {
            "v_root": self.v_root.tolist(),
            "z_ref": self.z_ref,
            "theta_root": self.theta_root.tolist(),
            "yaw_rate": self.yaw_rate,
            "q_ref": self.q_ref.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CommandVector":
        q = np.asarray(d["q_ref"], dtype=float)
        if q.shape != (BODY_DOF + 2 * HAND_DOF,):
            raise DimensionError(f"q_ref must have length {BODY_DOF + 2 * HAND_DOF}")
        return cls(d["v_root"], d["z_ref"], d["theta_root"], d["yaw_rate"],
                   q[:BODY_DOF], q[BODY_DOF:BODY_DOF + HAND_DOF], q[BODY_DOF + HAND_DOF:])

    @classmethod
    def zeros(cls) -> "CommandVector":
        return cls(np.zeros(2), 0.0, np.zeros(2), 0.0, np.zeros(BODY_DOF), np.zeros(HAND_DOF), np.zeros(HAND_DOF))


def assemble_command(solution: RetargetSolution | np.ndarray, q_hand_left, q_hand_right,
                     base: BaseCommand = BaseCommand()) -> CommandVector:
    q_body = solution.q_star if isinstance(solution, RetargetSolution) else solution
    return CommandVector(base.v_root, base.z_ref, base.theta_root, base.yaw_rate,
                         q_body, q_hand_left, q_hand_right)


# --- base command estimation -------------------------------------------------------

def _yaw(R):
    return math.atan2(R[1, 0], R[0, 0])


def _roll_pitch(R):
    return math.atan2(R[2, 1], R[2, 2]), math.asin(max(-1.0, min(1.0, -R[2, 0])))


class BaseCommandEstimator:
    """Finite-difference base commands from human root motion.

    Uses only pelvis orientation and pelvis-relative foot positions, so the
    estimate is unaffected by global drift.  Planar velocity is leg odometry:
    the stance (lowest) foot is assumed fixed in the world, and the pelvis
    moves opposite to the foot's world-aligned offset.  Rates are averaged
    over ``window_s``.
    """

    def __init__(self, pelvis: str = "pelvis", feet: Sequence[str] = ("left_ankle_roll", "right_ankle_roll"),
                 window_s: float = 0.1):
        self.pelvis = pelvis
        self.feet = tuple(feet)
        self.window_us = int(round(window_s * 1e6))
        self._hist: list[tuple[int, float, dict[str, np.ndarray]]] = []

    def update(self, frame: HumanFrame) -> BaseCommand:
        R = frame.link_rotations[self.pelvis]
        pp = frame.link_positions[self.pelvis]
        feet = {}
        for f in self.feet:
            if f in frame.link_positions:
                feet[f] = frame.link_positions[f] - pp  # world-aligned, drift-free
        roll, pitch = _roll_pitch(R)
        yaw = _yaw(R)
        z_ref = -min(v[2] for v in feet.values()) if feet else 0.0
        self._hist.append((frame.timestamp_us, yaw, feet))
        t_now = frame.timestamp_us
        while len(self._hist) > 1 and t_now - self._hist[0][0] > self.window_us:
            self._hist.pop(0)
        yaw_rate = 0.0
        v = np.zeros(2)
        if len(self._hist) > 1:
            dt = (t_now - self._hist[0][0]) * 1e-6
            dyaw = 0.0
            disp = np.zeros(2)
            for (_, y0, f0), (_, y1, f1) in zip(self._hist, self._hist[1:]):
                dyaw += math.remainder(y1 - y0, 2 * math.pi)
                common = [f for f in f0 if f in f1]
                if common:
                    stance = min(common, key=lambda f: f1[f][2])
                    disp -= (f1[stance] - f0[stance])[:2]
            yaw_rate = dyaw / dt
            c, s = math.cos(yaw), math.sin(yaw)
            # express in the heading frame
            v = np.array([c * disp[0] + s * disp[1], -s * disp[0] + c * disp[1]]) / dt
        return BaseCommand((float(v[0]), float(v[1])), float(z_ref), (roll, pitch), float(yaw_rate))
