"""Synthetic human motion and tracker drift.

Stands in for an IMU mocap suit and data gloves.  The body is rendered by
running a donor kinematic model through per-joint sinusoids, so a perfectly
retargetable reference exists; the fingertips follow interpolation between
canonical hand poses.

All link positions and drift offsets are rounded to a 2**-30 m grid.  Sums
and differences of grid values are then exact in double precision, so adding
a global offset and subtracting the pelvis recovers the drift-free relative
positions bit for bit, not just to rounding error.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .body_retarget import HumanFrame
from .hand_retarget import canonical_poses, fingertip_positions
from .kinematics import KinematicModel, axis_angle_matrix, forward_kinematics, load_model

GRID = 2.0 ** -30  # metres


class MotionFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def quantize(x) -> np.ndarray:
    """Round positions onto the 2**-30 m grid."""
    return np.round(np.asarray(x, dtype=float) / GRID) * GRID


@dataclass(frozen=True)
class BodyProgram:
    """Per-joint sinusoids ``mid + a*sin(2*pi*f*t + phi)``, clamped to limits.

    Empty tuples mean "draw from the seed": amplitudes up to
    ``amplitude_scale`` times each joint's half-range, frequencies in
    ``frequency_range`` Hz, uniform phases.
    """

    model: str = "g1body"
    amplitude: tuple[float, ...] = ()
    frequency: tuple[float, ...] = ()
    phase: tuple[float, ...] = ()
    amplitude_scale: float = 0.3
    frequency_range: tuple[float, float] = (0.1, 0.6)
    root_velocity: tuple[float, float] = (0.0, 0.0)   # world-frame m/s
    root_yaw_rate: float = 0.0                        # rad/s


@dataclass(frozen=True)
class HandProgram:
    """Fingertips cycling through named canonical poses.

    Each pose is held for ``dwell_s`` then blended into the next over
    ``blend_s`` with a smoothstep; the right hand runs half a cycle behind.
    """

    model: str = "wuji20"
    poses: tuple[str, ...] = ("open", "fist", "touch_index", "touch_middle", "touch_ring", "rock", "one_finger")
    dwell_s: float = 0.5
    blend_s: float = 0.5
    human_size: float = 1.15


@dataclass(frozen=True)
class MotionSpec:
    duration_s: float
    rate_hz: float = 100.0
    seed: int = 0
    body: BodyProgram = BodyProgram()
    hand: HandProgram | None = HandProgram()
    drift: bool = False
    drift_sigma: float = 0.0   # m / sqrt(s)
    node_count: int = 15

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        if not self.drift_sigma >= 0:
            raise ValueError("drift_sigma must be non-negative")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * self.rate_hz))

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("body", "hand")}
        d["body"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.body.__dict__.items()}
        d["hand"] = None if self.hand is None else {k: list(v) if isinstance(v, tuple) else v
                                                     for k, v in self.hand.__dict__.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MotionSpec":
        d = dict(d)
        tup = lambda m: {k: tuple(v) if isinstance(v, list) else v for k, v in m.items()}
        body = BodyProgram(**tup(d.pop("body", None) or {}))
        hand = d.pop("hand", {})
        hand = None if hand is None else HandProgram(**tup(hand))
        return cls(body=body, hand=hand, **d)


def _body_params(prog: BodyProgram, model: KinematicModel, rng: np.random.Generator):
    n = model.dof_count
    half = 0.5 * (model.upper - model.lower)

    def pick(given, draw, name):
        if len(given) == 0:
            return draw()
        arr = np.asarray(given, dtype=float)
        if arr.size == 1:
            return np.full(n, float(arr[0]))
        if arr.shape != (n,):
            raise ValueError(f"body {name} needs {n} entries, got {arr.size}")
        return arr

    # draw all three every time so supplying one vector does not shift the others
    a_draw = rng.uniform(0.0, prog.amplitude_scale, n) * half
    f_draw = rng.uniform(*prog.frequency_range, n)
    p_draw = rng.uniform(0.0, 2 * math.pi, n)
    return (pick(prog.amplitude, lambda: a_draw, "amplitude"),
            pick(prog.frequency, lambda: f_draw, "frequency"),
            pick(prog.phase, lambda: p_draw, "phase"))


def _hand_tips(prog: HandProgram, t: float, hand: KinematicModel, poses: dict, offset: float) -> np.ndarray:
    names = prog.poses
    period = prog.dwell_s + prog.blend_s
    u = (t + offset * period * len(names)) / period
    k = int(math.floor(u))
    frac = (u - k) * period
    a, b = poses[names[k % len(names)]], poses[names[(k + 1) % len(names)]]
    s = 0.0 if frac < prog.dwell_s or prog.blend_s == 0 else (frac - prog.dwell_s) / prog.blend_s
    s = s * s * (3 - 2 * s)
    return prog.human_size * fingertip_positions(hand, (1 - s) * a + s * b)


def synth_motion(spec: MotionSpec) -> list[HumanFrame]:
    """Render ``round(duration * rate)`` frames at uniform timestamps."""
    rng = np.random.default_rng(spec.seed)
    model = load_model(spec.body.model)
    amp, freq, phase = _body_params(spec.body, model, rng)
    mid = model.midpoints()
    hand = hand_poses = None
    if spec.hand is not None:
        hand = load_model(spec.hand.model)
        hand_poses = canonical_poses(hand)
        unknown = set(spec.hand.poses) - set(hand_poses)
        if unknown or not spec.hand.poses:
            raise ValueError(f"unknown hand poses {sorted(unknown)}; choose from {sorted(hand_poses)}")
    vx, vy = spec.body.root_velocity
    frames = []
    for k in range(spec.frame_count):
        t_us = int(round(k * 1e6 / spec.rate_hz))
        t = t_us * 1e-6
        q = model.clamp(mid + amp * np.sin(2 * math.pi * freq * t + phase))
        poses = forward_kinematics(model, q)
        Rw = axis_angle_matrix(np.array([0.0, 0.0, 1.0]), spec.body.root_yaw_rate * t)
        shift = np.array([vx * t, vy * t, 0.0])
        rots = {l.name: Rw @ poses.rotations[i] for i, l in enumerate(model.links)}
        pos = {l.name: quantize(Rw @ poses.positions[i] + shift) for i, l in enumerate(model.links)}
        tl = tr = None
        if hand is not None:
            tl = _hand_tips(spec.hand, t, hand, hand_poses, 0.0)
            tr = _hand_tips(spec.hand, t, hand, hand_poses, 0.5)
        frames.append(HumanFrame(t_us, rots, pos, tl, tr, spec.node_count))
    if spec.drift and spec.drift_sigma > 0:
        frames = inject_drift(frames, spec.drift_sigma, spec.seed + 1)
    return frames


def drift_offsets(timestamps_us: Sequence[int], sigma: float, seed: int) -> np.ndarray:
    """Random-walk offsets ``(n, 3)`` starting at zero.

    Each coordinate gains ``N(0, sigma**2 * dt)`` between consecutive
    timestamps, so after T seconds its standard deviation is ``sigma*sqrt(T)``.
    """
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    t = np.asarray(timestamps_us, dtype=np.int64)
    n = len(t)
    out = np.zeros((n, 3))
    if n < 2 or sigma == 0:
        return out
    dt = np.diff(t) * 1e-6
    if np.any(dt < 0):
        raise ValueError("timestamps must be non-decreasing")
    steps = np.random.default_rng(seed).standard_normal((n - 1, 3)) * (sigma * np.sqrt(dt))[:, None]
    out[1:] = np.cumsum(steps, axis=0)
    return quantize(out)


def inject_drift(frames: Sequence[HumanFrame], sigma: float, seed: int) -> list[HumanFrame]:
    """Add one shared random-walk offset per frame to every link position."""
    offsets = drift_offsets([f.timestamp_us for f in frames], sigma, seed)
    out = []
    for f, d in zip(frames, offsets):
        out.append(HumanFrame(f.timestamp_us, dict(f.link_rotations),
                              {k: v + d for k, v in f.link_positions.items()},
                              f.fingertips_left, f.fingertips_right, f.node_count))
    return out


def save_motion(frames: Iterable[HumanFrame], path) -> None:
    with Path(path).open("w") as fh:
        for f in frames:
            fh.write(json.dumps(f.to_dict()) + "\n")


def load_motion(path) -> list[HumanFrame]:
    """Read a JSON-lines motion file; blank lines are skipped."""
    frames = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frames.append(HumanFrame.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise MotionFormatError(lineno, f"{type(exc).__name__}: {exc}") from None
    return frames
