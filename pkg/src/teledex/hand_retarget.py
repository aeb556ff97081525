"""Fingertip-to-joint hand retargeting.

Two routes map five wrist-frame fingertip positions (15 numbers) to the 20
hand joints.  The oracle solves a per-finger damped least-squares IK on the
hand model; it is exact but iterative.  The regressor is a finger-wise MLP
trained on oracle labels and runs in constant time.

The oracle objective is fingertip position only.  It stands in for the
optimisation-based retargeter used to label real glove data; contact and
interpenetration terms are deliberately absent.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kinematics import KinematicModel, forward_kinematics, jacobian, model_from_dict, model_to_dict
from .neuralnet import AdamW, BatchNorm, DenseNet, LeakyReLU, Linear, Tanh, fit, evaluate_loss, mse_loss
from .solver import SolverOptions, levenberg_marquardt

log = logging.getLogger(__name__)

FINGERS = ("thumb", "index", "middle", "ring", "little")
JOINTS_PER_FINGER = 4
HAND_DOF = 20
ORACLE_VERSION = "fingertip-lm-1"
ATANH_CLAMP = 0.999999
TANH_LIMIT = 1.0 - 1e-12
ORACLE_OPTIONS = SolverOptions(max_iterations=100, cost_tolerance=1e-20, step_tolerance=1e-12, active_set=True)


class InputError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def as_tips(tips) -> np.ndarray:
    """Fingertips as a ``(5, 3)`` array (accepts the flat 15-vector too)."""
    arr = np.asarray(tips, dtype=float)
    if arr.size != 15:
        raise InputError(f"fingertip frame needs 15 entries, got {arr.size}")
    arr = arr.reshape(5, 3)
    if not np.all(np.isfinite(arr)):
        raise InputError("fingertip positions must be finite")
    return arr


# --- per-finger chains ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FingerChain:
    """A single finger extracted as its own small model (root = wrist)."""

    name: str
    model: KinematicModel
    tip: int           # tip link index inside ``model``
    dofs: np.ndarray   # joint indices in the full hand model


def finger_chains(hand: KinematicModel) -> list[FingerChain]:
    if hand.dof_count != HAND_DOF or "fingertips" not in hand.sets:
        raise ValueError("hand model must have 20 joints and a 'fingertips' set")
    root = next(i for i, l in enumerate(hand.links) if l.parent is None)
    doc = model_to_dict(hand)
    chains = []
    for f, tip in zip(FINGERS, hand.sets["fingertips"]):
        path = []
        i = tip
        while i is not None:
            path.append(i)
            i = hand.links[i].parent
        path.reverse()
        keep = {hand.links[i].name for i in path}
        sub = {"name": f"{hand.name}:{f}", "links": [l for l in doc["links"] if l["name"] in keep], "sets": {}}
        sub_model = model_from_dict(sub)
        dofs = np.array([int(hand.dof_of_link[i]) for i in path if hand.links[i].joint is not None])
        if len(dofs) != JOINTS_PER_FINGER or path[0] != root:
            raise ValueError(f"finger {f!r} is not a {JOINTS_PER_FINGER}-joint chain from the wrist")
        chains.append(FingerChain(f, sub_model, sub_model.link_index(hand.links[tip].name), dofs))
    return chains


_CHAIN_CACHE: dict[int, list[FingerChain]] = {}


def _chains(hand: KinematicModel) -> list[FingerChain]:
    key = id(hand)
    if key not in _CHAIN_CACHE:
        _CHAIN_CACHE[key] = finger_chains(hand)
    return _CHAIN_CACHE[key]


def fingertip_positions(hand: KinematicModel, q) -> np.ndarray:
    """Wrist-frame fingertip positions ``(5, 3)`` at hand configuration ``q``."""
    poses = forward_kinematics(hand, q)
    root = next(i for i, l in enumerate(hand.links) if l.parent is None)
    R0, p0 = poses.rotations[root], poses.positions[root]
    return (poses.positions[list(hand.sets["fingertips"])] - p0) @ R0


# --- oracle ------------------------------------------------------------------------------

@dataclass
class OracleResult:
    q: np.ndarray                 # (20,)
    residuals: np.ndarray         # (5,) fingertip distance after solve, metres
    iterations: np.ndarray        # (5,)


def _solve_finger(chain: FingerChain, target: np.ndarray, q0: np.ndarray, options: SolverOptions):
    m = chain.model

    def fun(q):
        poses = forward_kinematics(m, q)
        r = target - poses.positions[chain.tip]
        return r, -jacobian(m, q, chain.tip, "position", poses=poses)

    return levenberg_marquardt(fun, q0, m.lower, m.upper, options)


def oracle_retarget(hand: KinematicModel, tips, scale: float = 1.0,
                    options: SolverOptions = ORACLE_OPTIONS, q_init=None) -> OracleResult:
    """Per-finger IK matching ``scale * tips`` with the robot fingertips.

    Each finger's 4 joints start from their limit midpoints (or ``q_init``)
    and are solved independently with box-constrained Levenberg-Marquardt.
    Unreachable targets return the best effort; check ``residuals``.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    target = scale * as_tips(tips)
    q = np.empty(HAND_DOF)
    res = np.empty(5)
    its = np.empty(5, dtype=int)
    q_init = hand.midpoints() if q_init is None else np.asarray(q_init, dtype=float)
    for f, chain in enumerate(_chains(hand)):
        out = _solve_finger(chain, target[f], q_init[chain.dofs], options)
        q[chain.dofs] = out.x
        res[f] = math.sqrt(out.cost)
        its[f] = out.iterations
    return OracleResult(q, res, its)


def open_pose(hand: KinematicModel) -> np.ndarray:
    """Fully open hand: every joint at zero, clamped into its limits."""
    return hand.clamp(np.zeros(hand.dof_count))


def calibrate_scale(open_human_tips, hand: KinematicModel, min_separation: float = 0.01) -> float:
    """Ratio of mean robot to mean human fingertip reach in the open pose."""
    human = as_tips(open_human_tips)
    d = np.linalg.norm(human[:, None, :] - human[None, :, :], axis=-1)
    if np.min(d[np.triu_indices(5, 1)]) <= min_separation:
        raise CalibrationError("open-pose fingertips are degenerate (two tips closer than 1 cm)")
    robot = fingertip_positions(hand, open_pose(hand))
    return float(np.mean(np.linalg.norm(robot, axis=1)) / np.mean(np.linalg.norm(human, axis=1)))


# --- canonical poses and tip sources ---------------------------------------------------------

def canonical_poses(hand: KinematicModel) -> dict[str, np.ndarray]:
    """Named hand configurations: open, fist, thumb-to-finger touches, rock sign, one-finger extension."""
    chains = _chains(hand)
    lo, hi = hand.lower, hand.upper
    opened = open_pose(hand)
    fist = lo + 0.85 * (hi - lo)
    poses = {"open": opened, "fist": fist}
    # half-curled finger and thumb, alternately solved onto each other's tip
    thumb = chains[0]
    for k, f in ((1, "index"), (2, "middle"), (3, "ring")):
        q = opened.copy()
        ch = chains[k]
        q[ch.dofs] = lo[ch.dofs] + np.array([0.5, 0.45, 0.45, 0.35]) * (hi[ch.dofs] - lo[ch.dofs])
        q[thumb.dofs] = hand.midpoints()[thumb.dofs]
        for _ in range(8):
            q[thumb.dofs] = _solve_finger(thumb, fingertip_positions(hand, q)[k], q[thumb.dofs], ORACLE_OPTIONS).x
            q[ch.dofs] = _solve_finger(ch, fingertip_positions(hand, q)[0], q[ch.dofs], ORACLE_OPTIONS).x
        poses[f"touch_{f}"] = q
    rock = fist.copy()
    for k in (1, 4):  # index and little extended
        rock[chains[k].dofs] = opened[chains[k].dofs]
    poses["rock"] = rock
    point = fist.copy()
    point[chains[1].dofs] = opened[chains[1].dofs]
    poses["one_finger"] = point
    return poses


def random_hand_tips(hand: KinematicModel, n: int, rng: np.random.Generator, human_size: float = 1.0,
                     include_canonical: bool = True) -> np.ndarray:
    """Glove-like fingertip frames ``(n, 15)``: random finger movements plus canonical poses.

    ``human_size`` scales the robot hand up to a human-sized hand, so the
    matching retarget scale is ``1 / human_size``.
    """
    frames = []
    if include_canonical:
        frames += [fingertip_positions(hand, q).ravel() for q in canonical_poses(hand).values()]
    lo, hi = hand.lower, hand.upper
    while len(frames) < n:
        q = rng.uniform(lo, hi)
        frames.append(fingertip_positions(hand, q).ravel())
    return human_size * np.array(frames[:n])


# --- paired dataset ---------------------------------------------------------------------

@dataclass
class PairDataset:
    P: np.ndarray               # (N, 15) fingertip frames
    Q: np.ndarray               # (N, 20) joint targets
    train_idx: np.ndarray
    val_idx: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.P)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "validation": self.val_idx, "val": self.val_idx,
               "all": np.arange(len(self.P))}[name]
        return self.P[idx], self.Q[idx]

    def save(self, path) -> None:
        """JSON-lines, one ``{"p": [15], "q": [20]}`` per line; split and provenance in a sidecar."""
        path = Path(path)
        with path.open("w") as fh:
            for p, q in zip(self.P, self.Q):
                fh.write(json.dumps({"p": p.tolist(), "q": q.tolist()}) + "\n")
        meta = {"train": self.train_idx.tolist(), "validation": self.val_idx.tolist(), "provenance": self.provenance}
        path.with_name(path.name + ".split.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path, seed: int = 0, val_fraction: float = 0.1) -> "PairDataset":
        path = Path(path)
        P, Q = [], []
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    p, q = np.array(d["p"], dtype=float), np.array(d["q"], dtype=float)
                except (ValueError, KeyError, TypeError) as exc:
                    raise DatasetError(f"{path}:{lineno}: {exc}") from None
                if p.shape != (15,) or q.shape != (HAND_DOF,):
                    raise DatasetError(f"{path}:{lineno}: expected p[15], q[20]")
                P.append(p)
                Q.append(q)
        P = np.array(P).reshape(-1, 15)
        Q = np.array(Q).reshape(-1, HAND_DOF)
        side = path.with_name(path.name + ".split.json")
        if side.exists():
            meta = json.loads(side.read_text())
            return cls(P, Q, np.array(meta["train"], dtype=int), np.array(meta["validation"], dtype=int),
                       meta.get("provenance", {}))
        tr, va = split_indices(len(P), seed, val_fraction)
        return cls(P, Q, tr, va, {"seed": seed, "source": str(path)})


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_val = 0 if n < 2 else min(max(int(round(n * val_fraction)), 1), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def generate_pair_dataset(hand: KinematicModel, tip_source: Iterable, scale: float, seed: int,
                          val_fraction: float = 0.1) -> PairDataset:
    """Label every fingertip frame with the oracle and split train/validation."""
    P = []
    Q = []
    for k, tips in enumerate(tip_source):
        try:
            out = oracle_retarget(hand, tips, scale)
        except (InputError, ValueError) as exc:
            raise DatasetError(f"frame {k}: {exc}") from exc
        P.append(as_tips(tips).ravel())
        Q.append(out.q)
    if not P:
        raise DatasetError("tip source is empty")
    tr, va = split_indices(len(P), seed, val_fraction)
    return PairDataset(np.array(P), np.array(Q), tr, va,
                       {"oracle": ORACLE_VERSION, "seed": seed, "scale": scale})


# --- regressor -----------------------------------------------------------------------------

def finger_net(rng: np.random.Generator, hidden: int = 128, slope: float = 0.01) -> DenseNet:
    return DenseNet([
        Linear(3, hidden, rng), LeakyReLU(slope), BatchNorm(hidden),
        Linear(hidden, hidden, rng), LeakyReLU(slope), BatchNorm(hidden),
        Linear(hidden, JOINTS_PER_FINGER, rng), Tanh(),
    ])


class HandRegressor:
    """Five independent finger networks, each mapping one fingertip to its 4 joints.

    Inputs are standardised with train-split statistics; the tanh outputs
    are mapped onto joint ranges through per-joint midpoint and half-range.
    """

    def __init__(self, nets: Sequence[DenseNet], input_mean, input_std, out_mid, out_half,
                 seed: int = 0, hparams: Mapping | None = None):
        self.nets = list(nets)
        self.input_mean = np.asarray(input_mean, dtype=float)
        self.input_std = np.asarray(input_std, dtype=float)
        self.out_mid = np.asarray(out_mid, dtype=float)
        self.out_half = np.asarray(out_half, dtype=float)
        self.seed = seed
        self.hparams = dict(hparams or {})
        if len(self.nets) != 5:
            raise ValueError("hand regressor needs five finger networks")
        if np.any(self.out_half <= 0) or np.any(self.input_std <= 0):
            raise ValueError("output half-ranges and input scales must be positive")

    @classmethod
    def initialize(cls, hand: KinematicModel, seed: int = 0, input_mean=None, input_std=None,
                   hparams: Mapping | None = None) -> "HandRegressor":
        rng = np.random.default_rng(seed)
        nets = [finger_net(rng) for _ in FINGERS]
        mid = hand.midpoints()
        half = 0.5 * (hand.upper - hand.lower)
        mean = np.zeros(15) if input_mean is None else input_mean
        std = np.ones(15) if input_std is None else input_std
        return cls(nets, mean, std, mid, half, seed, hparams)

    # network view used by the generic trainer: normalised inputs -> pre-tanh outputs
    def params(self):
        return [p for n in self.nets for p in n.params()]

    def forward(self, x, train: bool = False):
        outs, caches = [], []
        for f, net in enumerate(self.nets):
            h = x[:, 3 * f:3 * f + 3]
            for layer in net.layers[:-1]:
                h, c = layer.forward(h, train)
                caches.append(c)
            outs.append(h)
        return np.concatenate(outs, axis=1), caches

    def backward(self, caches, grad_out):
        grads = []
        gx = []
        k = 0
        for f, net in enumerate(self.nets):
            layers = net.layers[:-1]
            cs = caches[k:k + len(layers)]
            k += len(layers)
            g = grad_out[:, JOINTS_PER_FINGER * f:JOINTS_PER_FINGER * (f + 1)]
            per = []
            for layer, c in zip(reversed(layers), reversed(cs)):
                g, pg = layer.backward(c, g)
                per.append(pg)
            grads += [p for pg in reversed(per) for p in pg]
            gx.append(g)
        return grads, np.concatenate(gx, axis=1)

    def normalize_inputs(self, P) -> np.ndarray:
        return (np.asarray(P, dtype=float).reshape(-1, 15) - self.input_mean) / self.input_std

    def encode_targets(self, Q) -> np.ndarray:
        """Joint angles -> pre-tanh training targets."""
        u = (np.asarray(Q, dtype=float) - self.out_mid) / self.out_half
        return np.arctanh(np.clip(u, -ATANH_CLAMP, ATANH_CLAMP))

    def decode(self, pre_tanh) -> np.ndarray:
        # tanh saturates to +-1 in floating point; the margin keeps outputs strictly inside
        # the limits despite rounding in the midpoint/half-range form
        t = np.clip(np.tanh(pre_tanh), -TANH_LIMIT, TANH_LIMIT)
        return self.out_mid + self.out_half * t

    def predict(self, P) -> np.ndarray:
        """Batch inference ``(N, 15) -> (N, 20)``; each row is computed independently."""
        P = np.asarray(P, dtype=float).reshape(-1, 15)
        if not np.all(np.isfinite(P)):
            raise InputError("fingertip positions must be finite")
        x = self.normalize_inputs(P)
        outs = []
        for f, net in enumerate(self.nets):
            h = x[:, 3 * f:3 * f + 3]
            for layer in net.layers[:-1]:
                h = layer.apply_rowwise(h) if isinstance(layer, Linear) else layer.forward(h, False)[0]
            outs.append(h)
        return self.decode(np.concatenate(outs, axis=1))

    # --- checkpoint ---
    def to_dict(self) -> dict:
        return {
            "format": "hand-regressor/1",
            "seed": self.seed,
            "hparams": self.hparams,
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "out_mid": self.out_mid.tolist(),
            "out_half": self.out_half.tolist(),
            "fingers": {f: n.to_dict() for f, n in zip(FINGERS, self.nets)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HandRegressor":
        nets = [DenseNet.from_dict(d["fingers"][f]) for f in FINGERS]
        return cls(nets, d["input_mean"], d["input_std"], d["out_mid"], d["out_half"],
                   d.get("seed", 0), d.get("hparams"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "HandRegressor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def infer_hand(regressor: HandRegressor, tips) -> np.ndarray:
    """Joint targets ``(20,)`` for one fingertip frame."""
    return regressor.predict(as_tips(tips).ravel()[None, :])[0]


# --- training -----------------------------------------------------------------------------

@dataclass(frozen=True)
class HandTrainParams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 2048
    epochs: int = 300
    patience: int = 20
    min_delta: float = 1e-6
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    init_train_loss: float
    init_val_loss: float
    best_epoch: int
    stop_reason: str
    epochs_run: int
    seed: int
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = dict(self.__dict__)
        if not include_timing:
            d.pop("wall_time_s")
        return d


def train_hand_retargeter(dataset: PairDataset, hand: KinematicModel,
                          hparams: HandTrainParams = HandTrainParams()) -> tuple[HandRegressor, TrainReport]:
    """Fit the finger-wise regressor with AdamW on pre-tanh MSE.

    Returns the parameters of the best validation epoch.
    """
    if len(dataset.train_idx) == 0 or len(dataset.val_idx) == 0:
        raise DatasetError("training needs non-empty train and validation splits")
    t0 = time.perf_counter()
    Ptr, Qtr = dataset.split("train")
    Pva, Qva = dataset.split("validation")
    mean = Ptr.mean(axis=0)
    std = Ptr.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)  # constant coordinates pass through centred
    reg = HandRegressor.initialize(hand, hparams.seed, mean, std, hparams.to_dict())
    X, Y = reg.normalize_inputs(Ptr), reg.encode_targets(Qtr)
    Xv, Yv = reg.normalize_inputs(Pva), reg.encode_targets(Qva)
    opt = AdamW(hparams.lr, hparams.beta1, hparams.beta2, 1e-8, hparams.weight_decay)
    res = fit(reg, opt, X, Y, Xv, Yv, hparams.epochs, hparams.batch_size,
              np.random.default_rng(hparams.seed + 1), hparams.patience, hparams.min_delta)
    report = TrainReport(res.train_loss, res.val_loss, res.init_train_loss, res.init_val_loss,
                         res.best_epoch, res.stop_reason, len(res.train_loss), hparams.seed,
                         time.perf_counter() - t0)
    return reg, report


def normalized_loss(regressor: HandRegressor, P, Q) -> float:
    """Pre-tanh MSE of the regressor on a set of pairs."""
    return evaluate_loss(regressor, regressor.normalize_inputs(P), regressor.encode_targets(Q))


@dataclass
class RetargetMetrics:
    mse_normalized: float
    rms_per_joint: np.ndarray
    rms: float
    max_abs_error: float
    latency_s: float
    count: int

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"mse_normalized": self.mse_normalized, "rms_per_joint": self.rms_per_joint.tolist(),
             "rms": self.rms, "max_abs_error": self.max_abs_error, "count": self.count}
        if include_timing:
            d["latency_s"] = self.latency_s
        return d


def eval_retargeter(regressor: HandRegressor, dataset: PairDataset, split: str = "validation",
                    latency_samples: int = 100) -> RetargetMetrics:
    P, Q = dataset.split(split)
    if len(P) == 0:
        raise DatasetError(f"split {split!r} is empty")
    pred = regressor.predict(P)
    err = pred - Q
    rms_j = np.sqrt(np.mean(err * err, axis=0))
    t0 = time.perf_counter()
    k = min(latency_samples, len(P))
    for i in range(k):
        infer_hand(regressor, P[i])
    latency = (time.perf_counter() - t0) / k
    return RetargetMetrics(normalized_loss(regressor, P, Q), rms_j, float(np.sqrt(np.mean(err * err))),
                           float(np.max(np.abs(err))), latency, len(P))
