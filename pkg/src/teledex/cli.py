"""Command-line workflows.

Every subcommand takes ``--seed``, ``--config`` and ``--out``.  Settings are
layered: built-in defaults, then the JSON file given by ``--config``, then
explicit flags.  Each run writes a manifest next to its output with the
resolved settings, the inputs and outputs, and a ``timing`` section holding
the only values that differ between two runs with the same seed.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .body_retarget import (BaseCommandEstimator, ConfigError, MappingError, RetargetError, assemble_command,
                            default_config, load_config, retarget_stream)
from .hand_retarget import (CalibrationError, DatasetError, HandRegressor, HandTrainParams, InputError, PairDataset,
                            calibrate_scale, eval_retargeter, generate_pair_dataset, open_pose, random_hand_tips,
                            train_hand_retargeter)
from .kinematics import ModelError, load_model
from .motion_source import MotionFormatError, MotionSpec, load_motion, save_motion, synth_motion
from .neuralnet import TrainingError
from .solver import NumericError
from .teleop_pipeline import (EpisodeError, ProtocolError, SimClock, TriggerEvent, WallClock, read_episode,
                              run_session, write_episode)
from .two_stage import (DemoEpisode, ExperimentConfig, LagValidationError, lagged_episodes, run_two_stage,
                        validate_lag)

log = logging.getLogger("teledex")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ValueError, LookupError, OSError, EpisodeError, ProtocolError, RetargetError)
NUMERIC_ERRORS = (NumericError, TrainingError, ArithmeticError)


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    inputs: list[str]
    outputs: list[str]
    tool_version: str = __version__
    extra: dict = field(default_factory=dict)
    # wall-clock measurements; the only manifest content that varies between identical runs
    timing: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


# --- argument parsing --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", default=None, help="JSON settings layered over the defaults")
    p.add_argument("--out", required=out_required, help="output path")


def build_parser() -> _Parser:
    top = _Parser(prog="teledex", description="Whole-body and hand teleoperation retargeting toolkit.")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="render synthetic human motion to JSON lines")
    _common(p)
    p.add_argument("--duration", type=float, help="seconds")
    p.add_argument("--rate", type=float, help="frames per second")
    p.add_argument("--drift", type=float, help="global drift random-walk sigma, m/sqrt(s)")
    p.add_argument("--no-hands", action="store_true", help="omit fingertip streams")

    p = sub.add_parser("retarget", help="retarget a motion file to command vectors")
    _common(p)
    p.add_argument("--in", dest="input", required=True, help="motion JSON lines")
    p.add_argument("--model", help="body model name or path")
    p.add_argument("--hand", help="hand regressor checkpoint (default: open hands)")

    hand = sub.add_parser("hand", help="fingertip retargeting: dataset, training, evaluation, inference")
    hsub = hand.add_subparsers(dest="hand_command", parser_class=_Parser)
    p = hsub.add_parser("gen-dataset", help="label synthetic fingertip frames with the IK oracle")
    _common(p)
    p.add_argument("--n", type=int, help="number of frames")
    p.add_argument("--human-size", type=float, help="human/robot hand size ratio")
    p = hsub.add_parser("train", help="train the finger-wise regressor")
    _common(p)
    p.add_argument("--data", required=True, help="pair dataset (JSON lines)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p = hsub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="train | validation | all")
    p = hsub.add_parser("infer", help="map fingertip frames to joint targets")
    _common(p)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--in", dest="input", required=True, help='JSON lines of {"p": [15]}')

    pipe = sub.add_parser("pipeline", help="streaming control loop and recorder")
    psub = pipe.add_subparsers(dest="pipeline_command", parser_class=_Parser)
    p = psub.add_parser("run", help="run control loop and recorder over a motion file")
    _common(p)
    p.add_argument("--in", dest="input", help="motion JSON lines (default: synthesise)")
    p.add_argument("--duration", type=float, help="seconds to synthesise when --in is absent")
    p.add_argument("--hand", help="hand regressor checkpoint")
    p.add_argument("--clock", choices=("sim", "wall"))
    p.add_argument("--window", action="append", help="pedal window START:STOP in seconds (repeatable)")

    ep = sub.add_parser("episode", help="recorded episode utilities")
    esub = ep.add_subparsers(dest="episode_command", parser_class=_Parser)
    p = esub.add_parser("inspect", help="summarise an episode directory")
    _common(p, out_required=False)
    p.add_argument("path", help="episode directory")

    ts = sub.add_parser("twostage", help="synthetic human-to-robot training experiment")
    tsub = ts.add_subparsers(dest="twostage_command", parser_class=_Parser)
    p = tsub.add_parser("run", help="run TwoStage / RobotOnly / Mix")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")

    p = sub.add_parser("validate-lag", help="estimate the action-to-state lag")
    _common(p)
    p.add_argument("--in", dest="input", help='JSON lines of {"actions": [[..]], "states": [[..]]}')
    p.add_argument("--max-k", type=int)
    p.add_argument("--lag", type=int, help="lag of the synthetic data when --in is absent")
    p.add_argument("--noise", type=float, help="state noise of the synthetic data")
    return top


def _all_parsers(parser: argparse.ArgumentParser, path=()) -> dict[tuple, argparse.ArgumentParser]:
    out = {path: parser}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, child in action.choices.items():
                out.update(_all_parsers(child, path + (name,)))
    return out


def _suggest(word: str, options: Sequence[str]) -> str:
    close = difflib.get_close_matches(word, list(options), n=1, cutoff=0.5)
    return f" (did you mean {close[0]!r}?)" if close else ""


def parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    parsers = _all_parsers(parser)
    # locate the deepest subcommand named in argv to give targeted suggestions
    path: tuple = ()
    for tok in argv:
        if path + (tok,) in parsers:
            path += (tok,)
        elif not tok.startswith("-") and any(len(k) == len(path) + 1 and k[:len(path)] == path for k in parsers):
            choices = [k[-1] for k in parsers if len(k) == len(path) + 1 and k[:len(path)] == path]
            raise UsageError(f"unknown command {tok!r}{_suggest(tok, choices)}; choose from {', '.join(choices)}")
    ns, extra = parser.parse_known_args(argv)
    if extra:
        opts = [o for a in parsers[path]._actions for o in a.option_strings]
        flag = extra[0].split("=")[0]
        raise UsageError(f"unrecognized argument {extra[0]!r}{_suggest(flag, opts)}")
    if ns.command is None or any(
            getattr(ns, f"{c}_command", "x") is None for c in ("hand", "pipeline", "episode", "twostage")
            if ns.command == c):
        raise UsageError(parsers[path].format_usage().strip())
    return ns


def layered(defaults: Mapping, ns: argparse.Namespace, flags: Mapping[str, str]) -> dict:
    """defaults <- --config file <- explicit flags (``flags`` maps setting -> namespace attribute)."""
    cfg = json.loads(json.dumps(dict(defaults)))
    if ns.config not in (None, "default"):
        try:
            doc = json.loads(Path(ns.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {ns.config}: {exc}") from None
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ValueError(f"config {ns.config}: unknown keys {sorted(unknown)}; known: {sorted(cfg)}")
        cfg.update(doc)
    for key, attr in flags.items():
        v = getattr(ns, attr, None)
        if v is not None:
            cfg[key] = v
    if getattr(ns, "seed", None) is not None:
        cfg["seed"] = ns.seed
    return cfg


# --- commands -------------------------------------------------------------------------------

Result = tuple[dict, list[str], list[str], dict]   # config, inputs, outputs, extra manifest fields
# a "timing" entry in the extra fields is moved to the manifest's timing section


def cmd_synth(ns) -> Result:
    base = MotionSpec(1.0).to_dict()
    cfg = layered(base, ns, {"duration_s": "duration", "rate_hz": "rate", "drift_sigma": "drift"})
    if ns.no_hands:
        cfg["hand"] = None
    cfg["drift"] = cfg["drift_sigma"] > 0 or bool(cfg.get("drift"))
    spec = MotionSpec.from_dict(cfg)
    frames = synth_motion(spec)
    save_motion(frames, ns.out)
    return spec.to_dict(), [], [ns.out], {"frames": len(frames)}


def _load_regressor(path: str | None) -> HandRegressor | None:
    return None if path is None else HandRegressor.load(path)


def cmd_retarget(ns) -> Result:
    cfg = layered({"model": "g1body", "hand_model": "wuji20", "seed": 0}, ns, {"model": "model"})
    model = load_model(cfg["model"])
    rcfg = default_config(model) if ns.config in (None, "default") or "orientation_links" not in \
        json.loads(Path(ns.config).read_text()) else load_config(ns.config, model)
    frames = load_motion(ns.input)
    if not frames:
        raise ValueError(f"{ns.input} holds no frames")
    hand = load_model(cfg["hand_model"])
    reg = _load_regressor(ns.hand)
    sols = retarget_stream(rcfg, frames, model)
    est = BaseCommandEstimator(rcfg.pelvis_human)
    rest = open_pose(hand)
    with open(ns.out, "w") as fh:
        for frame, sol in zip(frames, sols):
            left = right = rest
            if reg is not None:
                tips = [t for t in (frame.fingertips_left, frame.fingertips_right)]
                if tips[0] is not None and tips[1] is not None:
                    left, right = reg.predict(np.stack([tips[0].ravel(), tips[1].ravel()]))
            cmd = assemble_command(sol, left, right, est.update(frame))
            fh.write(json.dumps({"t_us": frame.timestamp_us, **cmd.to_dict()}) + "\n")
    resolved = {**cfg, "retarget": rcfg.to_dict(model), "hand_checkpoint": ns.hand}
    stats = {"frames": len(frames), "mean_iterations": float(np.mean([s.iterations for s in sols])),
             "converged": int(sum(s.converged for s in sols))}
    return resolved, [ns.input] + ([ns.hand] if ns.hand else []), [ns.out], stats


def cmd_hand_gen(ns) -> Result:
    cfg = layered({"n": 20000, "human_size": 1.15, "val_fraction": 0.1, "hand_model": "wuji20", "seed": 0},
                  ns, {"n": "n", "human_size": "human_size"})
    hand = load_model(cfg["hand_model"])
    rng = np.random.default_rng(cfg["seed"])
    tips = random_hand_tips(hand, cfg["n"], rng, cfg["human_size"])
    scale = calibrate_scale(tips[0], hand)  # first frame is the open pose
    ds = generate_pair_dataset(hand, tips, scale, cfg["seed"], cfg["val_fraction"])
    ds.save(ns.out)
    return cfg, [], [ns.out, ns.out + ".split.json"], {"scale": scale, "size": len(ds)}


def cmd_hand_train(ns) -> Result:
    cfg = layered({**HandTrainParams().to_dict(), "hand_model": "wuji20"}, ns,
                  {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr"})
    hand = load_model(cfg.pop("hand_model"))
    params = HandTrainParams(**cfg)
    ds = PairDataset.load(ns.data, seed=params.seed)
    reg, report = train_hand_retargeter(ds, hand, params)
    reg.save(ns.out)
    rep_path = ns.out + ".report.json"
    dump_json({**report.to_dict(include_timing=False), "hparams": params.to_dict()}, rep_path)
    return {**params.to_dict(), "hand_model": hand.name}, [ns.data], [ns.out, rep_path], \
        {"timing": {"train_s": report.wall_time_s}}


def cmd_hand_eval(ns) -> Result:
    cfg = layered({"split": "validation", "seed": 0}, ns, {"split": "split"})
    reg = HandRegressor.load(ns.model)
    ds = PairDataset.load(ns.data, seed=cfg["seed"])
    m = eval_retargeter(reg, ds, cfg["split"])
    dump_json(m.to_dict(include_timing=False), ns.out)
    return cfg, [ns.model, ns.data], [ns.out], {"timing": {"latency_s": m.latency_s}}


def cmd_hand_infer(ns) -> Result:
    cfg = layered({"seed": 0}, ns, {})
    reg = HandRegressor.load(ns.model)
    rows = []
    with open(ns.input) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rows.append(np.asarray(d["p"] if isinstance(d, dict) else d, dtype=float).reshape(15))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{ns.input}:{lineno}: {exc}") from None
    Q = reg.predict(np.array(rows).reshape(-1, 15)) if rows else np.zeros((0, 20))
    with open(ns.out, "w") as fh:
        for q in Q:
            fh.write(json.dumps({"q": q.tolist()}) + "\n")
    return cfg, [ns.model, ns.input], [ns.out], {"frames": len(rows)}


def _window(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"window {text!r} must look like START:STOP") from None
    if not b > a >= 0:
        raise ValueError(f"window {text!r} needs 0 <= START < STOP")
    return a, b


def cmd_pipeline_run(ns) -> Result:
    cfg = layered({"model": "g1body", "hand_model": "wuji20", "control_hz": 100.0, "record_hz": 30.0,
                   "clock": "sim", "duration_s": 3.0, "windows": ["0:3"], "seed": 0}, ns,
                  {"clock": "clock", "duration_s": "duration", "windows": "window"})
    model, hand = load_model(cfg["model"]), load_model(cfg["hand_model"])
    if ns.input:
        frames = load_motion(ns.input)
    else:
        frames = synth_motion(MotionSpec(cfg["duration_s"], cfg["control_hz"], cfg["seed"]))
    triggers = []
    for w in cfg["windows"]:
        a, b = _window(w)
        triggers += [TriggerEvent("start", int(round(a * 1e6))), TriggerEvent("stop", int(round(b * 1e6)))]
    wall = cfg["clock"] == "wall"
    res = run_session(frames, default_config(model), model, _load_regressor(ns.hand), triggers,
                      cfg["control_hz"], cfg["record_hz"], threaded=wall,
                      clock_factory=WallClock if wall else SimClock, hand=hand,
                      metadata={"source": ns.input or "synth", "seed": cfg["seed"]})
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ep in res.episodes:
        written.append(str(write_episode(ep, out / f"episode_{ep.episode_id:03d}")))
    summary = {"control": res.control.to_dict(include_timing=False), "messages": res.messages,
               "episodes": [{"id": e.episode_id, "frames": len(e.frames), "span_us": e.span_us}
                            for e in res.episodes]}
    if wall:
        # wall-clock counts vary run to run; the summary keeps only what is deterministic
        summary["control"] = {"clock": "wall"}
    dump_json(summary, out / "summary.json")
    timing = {"max_tick_s": res.control.max_tick_s, "overruns": res.control.overruns}
    return cfg, [ns.input] if ns.input else [], written + [str(out / "summary.json")], {"timing": timing}


def episode_summary(rec) -> dict:
    ts = [f.timestamp_us for f in rec.frames]
    rate = (len(ts) - 1) / ((ts[-1] - ts[0]) * 1e-6) if len(ts) > 1 and ts[-1] > ts[0] else None
    return {"episode_id": rec.episode_id, "frames": len(rec.frames), "span_us": rec.span_us,
            "mean_rate_hz": rate, "has_state": bool(rec.frames) and rec.frames[0].state is not None,
            "command_dim": len(rec.frames[0].command.as_vector()) if rec.frames else None,
            "metadata": rec.metadata}


def cmd_episode_inspect(ns) -> Result:
    cfg = layered({"seed": 0}, ns, {})
    summary = episode_summary(read_episode(ns.path))
    text = json.dumps(summary, indent=1, sort_keys=True)
    if ns.out:
        Path(ns.out).write_text(text + "\n")
    else:
        print(text)
    return cfg, [ns.path], [ns.out] if ns.out else [], {}


def cmd_twostage_run(ns) -> Result:
    cfg = layered(ExperimentConfig().to_dict(), ns, {})
    if ns.seeds:
        cfg["seeds"] = [int(s) for s in ns.seeds.split(",")]
    elif ns.seed is not None:
        cfg["seeds"] = [ns.seed]
    cfg.pop("seed", None)
    exp = ExperimentConfig.from_dict(cfg)
    report = run_two_stage(exp)
    dump_json(report.to_dict(), ns.out)
    md = str(Path(ns.out).with_suffix(".md"))
    Path(md).write_text(report.to_markdown())
    return exp.to_dict(), [], [ns.out, md], {}


def cmd_validate_lag(ns) -> Result:
    cfg = layered({"max_k": 5, "lag": 1, "noise": 0.0, "episodes": 20, "length": 50, "dim": 4, "seed": 0}, ns,
                  {"max_k": "max_k", "lag": "lag", "noise": "noise"})
    if ns.input:
        eps = []
        with open(ns.input) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    a, s = np.asarray(d["actions"], dtype=float), np.asarray(d["states"], dtype=float)
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{ns.input}:{lineno}: {exc}") from None
                eps.append(DemoEpisode(np.zeros((len(a), 0)), a, s))
    else:
        eps = lagged_episodes(cfg["episodes"], cfg["length"], cfg["dim"], cfg["lag"], cfg["noise"], cfg["seed"])
    rep = validate_lag(eps, cfg["max_k"])
    dump_json(rep.to_dict(), ns.out)
    return cfg, [ns.input] if ns.input else [], [ns.out], {}


COMMANDS: dict[tuple, Callable[[argparse.Namespace], Result]] = {
    ("synth",): cmd_synth,
    ("retarget",): cmd_retarget,
    ("hand", "gen-dataset"): cmd_hand_gen,
    ("hand", "train"): cmd_hand_train,
    ("hand", "eval"): cmd_hand_eval,
    ("hand", "infer"): cmd_hand_infer,
    ("pipeline", "run"): cmd_pipeline_run,
    ("episode", "inspect"): cmd_episode_inspect,
    ("twostage", "run"): cmd_twostage_run,
    ("validate-lag",): cmd_validate_lag,
}


def _key(ns) -> tuple:
    sub = getattr(ns, f"{ns.command.replace('-', '_')}_command", None)
    return (ns.command,) if sub is None else (ns.command, sub)


def configure_logging() -> None:
    level = os.environ.get("HUMDEX_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    configure_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = parse(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    key = _key(ns)
    t0 = time.perf_counter()
    try:
        config, inputs, outputs, extra = COMMANDS[key](ns)
    except NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    seeds = config.get("seeds") or [config.get("seed", 0)]
    timing = {**extra.pop("timing", {}), "wall_time_s": time.perf_counter() - t0}
    manifest = RunManifest(" ".join(key), config, list(seeds), [str(i) for i in inputs], [str(o) for o in outputs],
                           extra=extra, timing=timing)
    out = getattr(ns, "out", None)
    if out:
        manifest.write(manifest_path(Path(out)))
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
