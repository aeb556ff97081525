"""Human-to-robot policy training at desk scale.

Human demonstrations have no robot state, so the previous action stands in
for proprioception (``s_t := a_{t-1}``).  ``validate_lag`` checks that
approximation on robot data that does carry states.

``run_two_stage`` is a synthetic experiment on a 2-D reach task.  Human
demonstrations cover many target positions, object descriptors and
backgrounds, but their actions live in a warped (affine) action space.
Robot demonstrations use the true action space and cover only a narrow
target region with default object and background.  Three policies with the
same network and epoch budget are compared:

* TwoStage: train on human data, then fine-tune on robot data.
* RobotOnly: robot data only.
* Mix: one stage on the union of both.

Each is rolled out closed-loop on the seen distribution and on three shifted
ones (target position, object descriptor, background channel).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .neuralnet import AdamW, DenseNet, TrainingError, fit, mlp
from .teleop_pipeline import EpisodeRecord

log = logging.getLogger(__name__)

METHODS = ("TwoStage", "RobotOnly", "Mix")
SETTINGS = ("seen", "ood_position", "ood_object", "ood_background")


class LagValidationError(ValueError):
    pass


# --- data transformation ------------------------------------------------------------------

@dataclass
class DemoEpisode:
    """One demonstration: per-step observations, actions and (robot only) measured states."""

    observations: np.ndarray          # (T, d_obs)
    actions: np.ndarray               # (T, d_act)
    states: np.ndarray | None = None  # (T, d_act)
    source: str = "robot"

    def __len__(self):
        return len(self.actions)


@dataclass
class TrainingSample:
    observation: np.ndarray
    proprio: np.ndarray
    action: np.ndarray
    source: str


def _episode_arrays(ep) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ep, EpisodeRecord):
        if not ep.frames:
            return np.zeros((0, 0)), np.zeros((0, 0))
        acts = np.array([f.command.as_vector() for f in ep.frames])
        return np.zeros((len(acts), 0)), acts
    return np.asarray(ep.observations, dtype=float), np.asarray(ep.actions, dtype=float)


def human_to_training(episodes: Sequence, source: str = "human") -> tuple[list[TrainingSample], int]:
    """Turn stateless demonstrations into samples with ``s_t := a_{t-1}`` and ``s_0 := a_0``.

    Accepts recorded ``EpisodeRecord``s (action = full command vector, no
    observation channel) or ``DemoEpisode``s.  Returns the samples and the
    number of empty episodes skipped.
    """
    out: list[TrainingSample] = []
    skipped = 0
    for ep in episodes:
        obs, acts = _episode_arrays(ep)
        if len(acts) == 0:
            skipped += 1
            continue
        prev = np.concatenate([acts[:1], acts[:-1]])
        out += [TrainingSample(o, p, a, source) for o, p, a in zip(obs, prev, acts)]
    if skipped:
        log.warning("skipped %d empty episode(s)", skipped)
    return out, skipped


def stack_samples(samples: Sequence[TrainingSample]) -> tuple[np.ndarray, np.ndarray]:
    """Policy inputs ``[observation, proprio]`` and action targets as arrays."""
    if not samples:
        raise ValueError("no samples")
    X = np.array([np.concatenate([s.observation, s.proprio]) for s in samples])
    Y = np.array([s.action for s in samples])
    return X, Y


@dataclass
class LagReport:
    best_k: int
    errors: list[float]     # mean |a_t - s_{t+k}| for k = 0..max_k
    episodes_used: int
    episodes_excluded: int

    def to_dict(self) -> dict:
        return asdict(self)


def validate_lag(robot_episodes: Sequence[DemoEpisode], max_k: int = 5) -> LagReport:
    """Find the shift ``k`` for which ``s_{t+k}`` best matches ``a_t``.

    The error for each ``k`` pools every valid ``t`` of every episode.
    Episodes shorter than ``max_k + 1`` steps are left out so that each
    ``k`` sees the same episodes.
    """
    if max_k < 0:
        raise ValueError("max_k must be non-negative")
    used = [ep for ep in robot_episodes if len(ep) >= max_k + 1]
    if any(ep.states is None for ep in used):
        raise LagValidationError("every episode needs a state stream")
    if not used:
        raise LagValidationError(f"no episode has at least {max_k + 1} steps")
    errors = []
    for k in range(max_k + 1):
        total, count = 0.0, 0
        for ep in used:
            a = np.asarray(ep.actions, dtype=float)
            s = np.asarray(ep.states, dtype=float)
            if a.shape != s.shape:
                raise LagValidationError(f"action shape {a.shape} and state shape {s.shape} differ")
            d = np.linalg.norm(a[:len(a) - k] - s[k:], axis=1)
            total += float(d.sum())
            count += len(d)
        errors.append(total / count)
    return LagReport(int(np.argmin(errors)), errors, len(used), len(robot_episodes) - len(used))


def lagged_episodes(n: int, length: int, dim: int, lag: int, noise: float, seed: int) -> list[DemoEpisode]:
    """Random-walk actions with states ``s_{t+lag} = a_t (+ noise)``; earlier states equal ``a_0``."""
    rng = np.random.default_rng(seed)
    eps = []
    for _ in range(n):
        a = np.cumsum(rng.normal(0.0, 0.1, (length, dim)), axis=0)
        s = np.empty_like(a)
        s[:lag] = a[0]
        s[lag:] = a[:length - lag]
        if noise > 0:
            s = s + rng.normal(0.0, noise, s.shape)
        eps.append(DemoEpisode(np.zeros((length, 0)), a, s, "robot"))
    return eps


# --- synthetic reach task ---------------------------------------------------------------------

@dataclass(frozen=True)
class Warp:
    """Human action space ``a_h = scale * Rot(rotation_deg) @ a + offset``."""

    scale: float = 1.1
    rotation_deg: float = 5.0
    offset: tuple[float, float] = (0.1, -0.1)

    @property
    def matrix(self) -> np.ndarray:
        t = math.radians(self.rotation_deg)
        return self.scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])

    def apply(self, a: np.ndarray) -> np.ndarray:
        return a @ self.matrix.T + np.asarray(self.offset)


IDENTITY = Warp(1.0, 0.0, (0.0, 0.0))
LARGE_WARP = Warp(3.0, 90.0, (0.0, 0.0))


@dataclass(frozen=True)
class ReachTask:
    step_max: float = 0.08                 # metres per step
    radius: float = 0.05                   # success radius
    horizon: int = 30                      # evaluation steps
    demo_length: int = 25
    start_noise: float = 0.02
    action_noise: float = 0.01             # demonstrator jitter
    robot_center: tuple[float, float] = (0.5, 0.5)
    robot_half_width: float = 0.15         # seen targets: square around robot_center
    wide_half_width: float = 0.8           # human/ood targets: square around the origin
    object_range: float = 1.0              # object descriptor in [-r, r]^2 when varied
    background_noise: float = 0.05
    background_shift: float = 1.0          # |mean| of shifted background channel

    def expert(self, s: np.ndarray, goal: np.ndarray) -> np.ndarray:
        d = goal - s
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return s + d * np.minimum(1.0, self.step_max / np.maximum(n, 1e-12))


@dataclass(frozen=True)
class ExperimentConfig:
    task: ReachTask = ReachTask()
    warp: Warp = Warp()
    robot_episodes: int = 50
    human_episodes_per_variation: int = 100
    hidden: tuple[int, ...] = (64, 64)
    stage1_epochs: int = 100
    stage2_epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    stage2_lr: float = 1e-5               # fine-tuning rate for TwoStage's second stage
    weight_decay: float = 0.01
    eval_episodes: int = 30
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = METHODS

    def __post_init__(self):
        if abs(np.linalg.det(self.warp.matrix)) <= 1e-6:
            raise ValueError("warp must be invertible")
        if min(self.robot_episodes, self.human_episodes_per_variation, self.eval_episodes) < 1:
            raise ValueError("dataset and evaluation sizes must be at least 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        tup = lambda m: {k: tuple(v) if isinstance(v, list) else v for k, v in m.items()}
        task = ReachTask(**tup(d.pop("task", {})))
        warp = Warp(**tup(d.pop("warp", {})))
        return cls(task=task, warp=warp, **tup(d))


# observation = [goal(2), object descriptor(2), background channel(2)]
OBS_DIM = 6
ACT_DIM = 2


def _square(rng, center, half, n):
    return np.asarray(center) + rng.uniform(-half, half, (n, 2))


def _sample_goals(task: ReachTask, rng, n: int, kind: str) -> np.ndarray:
    if kind == "narrow":
        return _square(rng, task.robot_center, task.robot_half_width, n)
    if kind == "wide":
        return _square(rng, (0.0, 0.0), task.wide_half_width, n)
    if kind == "outside":
        out = []
        while len(out) < n:
            g = _square(rng, (0.0, 0.0), task.wide_half_width, 1)[0]
            if np.max(np.abs(g - task.robot_center)) > task.robot_half_width + task.radius:
                out.append(g)
        return np.array(out)
    raise ValueError(kind)


def _contexts(task: ReachTask, rng, n: int, goals: str, objects: bool, background: bool):
    """Per-episode goal, object descriptor and background mean."""
    g = _sample_goals(task, rng, n, goals)
    if objects:
        # shifted descriptors stay away from the default so the shift is real
        r = task.object_range
        obj = rng.uniform(0.3 * r, r, (n, 2)) * rng.choice([-1.0, 1.0], (n, 2))
    else:
        obj = np.zeros((n, 2))
    if background:
        ang = rng.uniform(0, 2 * math.pi, n)
        bg = task.background_shift * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        bg = np.zeros((n, 2))
    return g, obj, bg


def _demos(task: ReachTask, rng, goals, objs, bgs, warp: Warp | None, source: str) -> list[DemoEpisode]:
    eps = []
    T = task.demo_length
    for g, o, b in zip(goals, objs, bgs):
        s = rng.normal(0.0, task.start_noise, 2)
        obs, acts, states = [], [], []
        for _ in range(T):
            bg = b + rng.normal(0.0, task.background_noise, 2)
            a = task.expert(s, g) + rng.normal(0.0, task.action_noise, 2)
            obs.append(np.concatenate([g, o, bg]))
            states.append(s)
            acts.append(a)
            s = a   # the robot reaches its commanded position in one step
        acts = np.array(acts)
        if warp is not None:
            acts = warp.apply(acts)
        eps.append(DemoEpisode(np.array(obs), acts, None if warp is not None else np.array(states), source))
    return eps


def build_datasets(cfg: ExperimentConfig, seed: int, warp: Warp | None = None):
    """Human demos (three variations, warped actions) and robot demos (narrow, true actions)."""
    task = cfg.task
    warp = cfg.warp if warp is None else warp
    rng = np.random.default_rng([seed, 1])
    n = cfg.human_episodes_per_variation
    human = []
    for objects, background in ((False, False), (True, False), (False, True)):
        g, o, b = _contexts(task, rng, n, "wide", objects, background)
        human += _demos(task, rng, g, o, b, warp, "human")
    g, o, b = _contexts(task, rng, cfg.robot_episodes, "narrow", False, False)
    robot = _demos(task, rng, g, o, b, None, "robot")
    return human, robot


def _settings(task: ReachTask, rng, n: int) -> dict[str, tuple]:
    return {
        "seen": _contexts(task, rng, n, "narrow", False, False),
        "ood_position": _contexts(task, rng, n, "outside", False, False),
        "ood_object": _contexts(task, rng, n, "narrow", True, False),
        "ood_background": _contexts(task, rng, n, "narrow", False, True),
    }


def rollout_success(policy: DenseNet, task: ReachTask, goals, objs, bgs, rng) -> np.ndarray:
    """Closed-loop rollouts, all episodes stepped together; success = within radius by the horizon."""
    n = len(goals)
    s = rng.normal(0.0, task.start_noise, (n, 2))
    done = np.zeros(n, dtype=bool)
    for _ in range(task.horizon):
        bg = bgs + rng.normal(0.0, task.background_noise, (n, 2))
        x = np.concatenate([goals, objs, bg, s], axis=1)
        s = policy(x)
        if not np.all(np.isfinite(s)):
            s = np.where(np.isfinite(s), s, 1e6)
        done |= np.linalg.norm(s - goals, axis=1) <= task.radius
    return done


def _train(net: DenseNet, X, Y, epochs: int, cfg: ExperimentConfig, rng, lr: float | None = None) -> dict:
    if epochs == 0:
        return {"epochs": 0, "final_loss": None, "diverged": False}
    opt = AdamW(cfg.lr if lr is None else lr, weight_decay=cfg.weight_decay)
    try:
        res = fit(net, opt, X, Y, X[:0], Y[:0], epochs, cfg.batch_size, rng, patience=None)
    except TrainingError as exc:
        return {"epochs": exc.epoch, "final_loss": None, "diverged": True}
    return {"epochs": len(res.train_loss), "final_loss": res.train_loss[-1], "diverged": False}


def _policy(cfg: ExperimentConfig, seed: int) -> DenseNet:
    return mlp([OBS_DIM + ACT_DIM, *cfg.hidden, ACT_DIM], np.random.default_rng([seed, 2]))


def train_method(method: str, cfg: ExperimentConfig, human, robot, seed: int) -> tuple[DenseNet, dict]:
    """Train one method; every method gets ``stage1 + stage2`` epochs from the same init."""
    Xh, Yh = stack_samples(human_to_training(human)[0])
    Xr, Yr = stack_samples(human_to_training(robot, "robot")[0])
    net = _policy(cfg, seed)
    rng = np.random.default_rng([seed, 3])
    total = cfg.stage1_epochs + cfg.stage2_epochs
    if method == "TwoStage":
        s1 = _train(net, Xh, Yh, cfg.stage1_epochs, cfg, rng)
        s2 = _train(net, Xr, Yr, cfg.stage2_epochs, cfg, rng, cfg.stage2_lr)
        return net, {"stage1": s1, "stage2": s2, "diverged": s1["diverged"] or s2["diverged"]}
    if method == "RobotOnly":
        s = _train(net, Xr, Yr, total, cfg, rng)
    elif method == "Mix":
        s = _train(net, np.concatenate([Xh, Xr]), np.concatenate([Yh, Yr]), total, cfg, rng)
    else:
        raise ValueError(method)
    return net, {"stage1": s, "diverged": s["diverged"]}


@dataclass
class ExperimentReport:
    config: dict
    success: dict[str, dict[str, float]]               # method -> setting -> mean rate
    per_seed: dict[str, dict[str, list[float]]]        # method -> setting -> rate per seed
    counts: dict[str, dict[str, list[int]]]            # successes per seed
    training: dict[str, list[dict]]                    # method -> per-seed training summary
    seeds: list[int]

    def ood_mean(self, method: str) -> float:
        return float(np.mean([self.success[method][s] for s in SETTINGS[1:]]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ood_mean"] = {m: self.ood_mean(m) for m in self.success}
        return d

    def to_markdown(self) -> str:
        n = self.config["eval_episodes"]
        head = "| method | " + " | ".join(SETTINGS) + " | OOD mean |"
        rows = [head, "|" + "---|" * (len(SETTINGS) + 2)]
        for m, rates in self.success.items():
            cells = [f"{rates[s]:.2f} ({sum(self.counts[m][s])}/{n * len(self.seeds)})" for s in SETTINGS]
            rows.append(f"| {m} | " + " | ".join(cells) + f" | {self.ood_mean(m):.2f} |")
        return "\n".join(rows) + "\n"


def run_two_stage(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentReport:
    """Train and evaluate every method for every seed; deterministic per seed."""
    task = cfg.task
    per_seed = {m: {s: [] for s in SETTINGS} for m in cfg.methods}
    counts = {m: {s: [] for s in SETTINGS} for m in cfg.methods}
    training = {m: [] for m in cfg.methods}
    for seed in cfg.seeds:
        human, robot = build_datasets(cfg, seed)
        settings = _settings(task, np.random.default_rng([seed, 4]), cfg.eval_episodes)
        for m in cfg.methods:
            net, summary = train_method(m, cfg, human, robot, seed)
            training[m].append(summary)
            for name, (g, o, b) in settings.items():
                ok = rollout_success(net, task, g, o, b, np.random.default_rng([seed, 5]))
                counts[m][name].append(int(ok.sum()))
                per_seed[m][name].append(float(ok.mean()))
            log.info("seed %d %s: %s", seed, m, {k: v[-1] for k, v in per_seed[m].items()})
    success = {m: {s: float(np.mean(v)) for s, v in d.items()} for m, d in per_seed.items()}
    return ExperimentReport(cfg.to_dict(), success, per_seed, counts, training, list(cfg.seeds))
