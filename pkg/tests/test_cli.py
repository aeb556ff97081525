import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from teledex.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch, manifest_path

TINY_TWOSTAGE = {"robot_episodes": 4, "human_episodes_per_variation": 4, "hidden": [8], "stage1_epochs": 2,
                 "stage2_epochs": 2, "eval_episodes": 3}


def workflows(d: Path):
    """Every CLI workflow, small enough for a test, in dependency order."""
    (d / "ts.json").write_text(json.dumps(TINY_TWOSTAGE))
    (d / "tips.jsonl").write_text("")  # filled after gen-dataset
    return [
        ["synth", "--duration", "0.3", "--seed", "3", "--out", str(d / "motion.jsonl")],
        ["retarget", "--in", str(d / "motion.jsonl"), "--out", str(d / "cmd.jsonl")],
        ["hand", "gen-dataset", "--n", "40", "--seed", "1", "--out", str(d / "pairs.jsonl")],
        ["hand", "train", "--data", str(d / "pairs.jsonl"), "--epochs", "3", "--batch-size", "16",
         "--out", str(d / "reg.json")],
        ["hand", "eval", "--model", str(d / "reg.json"), "--data", str(d / "pairs.jsonl"),
         "--out", str(d / "eval.json")],
        ["hand", "infer", "--model", str(d / "reg.json"), "--in", str(d / "pairs.jsonl"),
         "--out", str(d / "q.jsonl")],
        ["retarget", "--in", str(d / "motion.jsonl"), "--hand", str(d / "reg.json"),
         "--out", str(d / "cmd_hands.jsonl")],
        ["pipeline", "run", "--duration", "1", "--window", "0.1:0.8", "--out", str(d / "run")],
        ["episode", "inspect", str(d / "run" / "episode_000"), "--out", str(d / "inspect.json")],
        ["twostage", "run", "--config", str(d / "ts.json"), "--seeds", "0,1", "--out", str(d / "ts_report.json")],
        ["validate-lag", "--noise", "0.01", "--out", str(d / "lag.json")],
    ]


def snapshot(d: Path) -> dict:
    """Every artifact's content; manifests without their timing section."""
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_dir():
            continue
        text = p.read_text()
        if p.name.endswith("manifest.json"):
            doc = json.loads(text)
            assert set(doc["timing"]) >= {"wall_time_s"}
            doc.pop("timing")
            text = json.dumps(doc, sort_keys=True)
        out[str(p.relative_to(d))] = text
    return out


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    snaps = []
    for _ in range(2):
        for p in d.iterdir():
            shutil.rmtree(p) if p.is_dir() else p.unlink()
        for argv in workflows(d):
            assert dispatch(argv) == EXIT_OK, argv
        snaps.append(snapshot(d))
    return d, snaps


def test_every_workflow_is_bit_identical_across_runs(two_runs):
    _, (a, b) = two_runs
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


def test_every_output_has_a_manifest(two_runs):
    d, (a, _) = two_runs
    for argv in workflows(d):
        out = Path(argv[argv.index("--out") + 1])
        m = json.loads(manifest_path(out).read_text())
        assert m["command"] == " ".join(t for t in argv[:2] if not t.startswith("-") and "/" not in t)
        assert all(Path(o).exists() for o in m["outputs"])


def test_artifact_contents(two_runs):
    d, _ = two_runs
    assert len((d / "motion.jsonl").read_text().splitlines()) == 30
    cmd = [json.loads(l) for l in (d / "cmd.jsonl").read_text().splitlines()]
    assert len(cmd) == 30 and len(cmd[0]["q_ref"]) == 69
    assert cmd != [json.loads(l) for l in (d / "cmd_hands.jsonl").read_text().splitlines()]
    assert len((d / "q.jsonl").read_text().splitlines()) == 40
    summary = json.loads((d / "run" / "summary.json").read_text())
    # 100 commands at 100 Hz plus the two pedal events
    assert summary["control"]["published"] == 100 and summary["messages"] == 102
    assert [e["frames"] for e in summary["episodes"]] == [21]
    assert json.loads((d / "inspect.json").read_text())["frames"] == 21
    assert json.loads((d / "lag.json").read_text())["best_k"] == 1
    ts = json.loads((d / "ts_report.json").read_text())
    assert ts["seeds"] == [0, 1] and (d / "ts_report.md").exists()
    train_manifest = json.loads(manifest_path(d / "reg.json").read_text())
    assert train_manifest["config"]["epochs"] == 3 and "train_s" in train_manifest["timing"]


def test_config_file_layers_under_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"duration_s": 0.5, "rate_hz": 20.0}))
    out = tmp_path / "m.jsonl"
    assert dispatch(["synth", "--config", str(cfg), "--rate", "10", "--out", str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 5
    m = json.loads(manifest_path(out).read_text())
    assert m["config"]["duration_s"] == 0.5 and m["config"]["rate_hz"] == 10.0


def test_usage_errors_suggest_alternatives(capsys):
    assert dispatch(["retarge"]) == EXIT_USAGE
    assert "did you mean 'retarget'" in capsys.readouterr().err
    assert dispatch(["hand", "trian"]) == EXIT_USAGE
    assert "did you mean 'train'" in capsys.readouterr().err
    assert dispatch(["synth", "--out", "x", "--durration", "1"]) == EXIT_USAGE
    assert "--duration" in capsys.readouterr().err
    assert dispatch([]) == EXIT_USAGE
    assert dispatch(["hand"]) == EXIT_USAGE


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"t_us": 0}\nnot json\n')
    assert dispatch(["retarget", "--in", str(bad), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert dispatch(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) \
        == EXIT_DATA
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"durration_s": 1}))
    assert dispatch(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "unknown keys" in capsys.readouterr().err
    assert dispatch(["pipeline", "run", "--window", "2:1", "--out", str(tmp_path / "p")]) == EXIT_DATA


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "teledex", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
    out = subprocess.run([sys.executable, "-m", "teledex", "nope"], capture_output=True, text=True)
    assert out.returncode == EXIT_USAGE
