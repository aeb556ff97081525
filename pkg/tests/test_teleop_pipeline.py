import json
import socket
import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from teledex.body_retarget import CommandVector, default_config, frame_from_poses
from teledex.kinematics import load_model
from teledex.motion_source import MotionSpec, inject_drift, synth_motion
from teledex.teleop_pipeline import (MIN_FRAME, BadChecksum, BadMagic, BadVersion, Bus, EncodeError,
                                     EpisodeCorrupt, EpisodeFrame, EpisodeIncomplete, EpisodeMissing,
                                     EpisodeRecord, FrameReader, FrameSource, ProtocolError, SimClock, TcpSink,
                                     TriggerEvent, Truncated, WireMessage, decode_message, encode_message,
                                     iter_socket, make_message, parse_payload, read_episode, run_control_loop,
                                     run_recorder, run_session, schema_for, write_episode)

messages = st.builds(WireMessage,
                     st.text(min_size=1, max_size=40).filter(lambda s: 0 < len(s.encode()) <= 255),
                     st.integers(0, 2**64 - 1), st.binary(max_size=300))


def test_minimal_frame_layout():
    raw = encode_message(WireMessage("t", 0, b""))
    assert len(raw) == 21 == MIN_FRAME + 1
    assert raw[:2] == b"HD" and raw[2] == 0x01 and raw[3] == 0x01 and raw[4:5] == b"t"
    assert raw[5:13] == bytes(8) and raw[13:17] == bytes(4)
    assert int.from_bytes(raw[17:], "little") == zlib.crc32(raw[2:17])


def test_layout_against_hand_packed_bytes():
    body = bytes([1, 3]) + b"cmd" + (1234).to_bytes(8, "little") + (2).to_bytes(4, "little") + b"{}"
    expected = b"HD" + body + zlib.crc32(body).to_bytes(4, "little")
    assert encode_message(WireMessage("cmd", 1234, b"{}")) == expected


@settings(max_examples=10_000, deadline=None)
@given(messages)
def test_round_trip(msg):
    assert decode_message(encode_message(msg)) == msg


def test_every_single_bit_flip_is_detected():
    raw = encode_message(WireMessage("cmd/left", 987654321, b'{"a": [1, 2, 3]}'))
    for i in range(len(raw)):
        for bit in range(8):
            bad = bytearray(raw)
            bad[i] ^= 1 << bit
            with pytest.raises(BadMagic if i < 2 else BadChecksum):
                decode_message(bytes(bad))


@settings(max_examples=500, deadline=None)
@given(messages, st.data())
def test_any_single_byte_change_is_detected(msg, data):
    raw = bytearray(encode_message(msg))
    i = data.draw(st.integers(2, len(raw) - 1))
    raw[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(BadChecksum):
        decode_message(bytes(raw))


def test_distinct_error_kinds():
    raw = encode_message(WireMessage("t", 5, b"xyz"))
    with pytest.raises(BadMagic):
        decode_message(b"XX" + raw[2:])
    with pytest.raises(Truncated):
        decode_message(raw[:10])
    body = bytearray(raw[2:-4])
    body[0] = 2
    with pytest.raises(BadVersion):
        decode_message(b"HD" + bytes(body) + zlib.crc32(bytes(body)).to_bytes(4, "little"))
    body = bytearray(raw[2:-4])
    body[-5] = 9   # payload length field claims more than is present
    with pytest.raises(Truncated):
        decode_message(b"HD" + bytes(body) + zlib.crc32(bytes(body)).to_bytes(4, "little"))


def test_encode_limits():
    with pytest.raises(EncodeError):
        encode_message(WireMessage("x" * 256, 0))
    with pytest.raises(EncodeError):
        encode_message(WireMessage("", 0))
    with pytest.raises(EncodeError):
        encode_message(WireMessage("t", -1))


@settings(max_examples=200, deadline=None)
@given(st.lists(messages, max_size=8), st.lists(st.integers(1, 50), min_size=1, max_size=20))
def test_stream_reader_handles_arbitrary_chunking(msgs, cuts):
    stream = b"".join(encode_message(m) for m in msgs)
    reader = FrameReader()
    out = []
    pos = 0
    k = 0
    while pos < len(stream):
        step = cuts[k % len(cuts)]
        out += reader.feed(stream[pos:pos + step])
        pos += step
        k += 1
    assert out == msgs and reader.pending == 0


def test_payload_schemas():
    cmd = CommandVector.zeros()
    assert parse_payload(make_message("cmd/left", 3, cmd)) == cmd
    ev = TriggerEvent("start", 10)
    assert parse_payload(make_message("pedal", 10, ev)) == ev
    with pytest.raises(KeyError):
        schema_for("video")
    with pytest.raises(TypeError):
        make_message("cmd", 0, ev)
    with pytest.raises(ValueError):
        TriggerEvent("pause", 0)


def test_tcp_stream_carries_identical_frames():
    msgs = [WireMessage("cmd", k, bytes([k]) * k) for k in range(50)]
    server = socket.create_server(("127.0.0.1", 0))
    received = []

    def serve():
        conn, _ = server.accept()
        with conn:
            received.extend(iter_socket(conn, chunk=7))

    th = threading.Thread(target=serve)
    th.start()
    sink = TcpSink.connect(*server.getsockname())
    for m in msgs:
        sink(m)
    sink.close()
    th.join(5)
    server.close()
    assert received == msgs


def test_bus_fan_out_by_prefix():
    bus = Bus()
    a, b = bus.subscribe("cmd"), bus.subscribe("pedal")
    bus.publish(WireMessage("cmd/left", 1, b"x"))
    bus.publish(WireMessage("pedal", 2, b"y"))
    bus.publish(WireMessage("command", 3, b"z"))
    assert [m.timestamp_us for m in a.poll()] == [1]
    assert [m.timestamp_us for m in b.poll()] == [2]
    assert not a.drained
    bus.close()
    assert a.drained


# --- loops -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def motion():
    return synth_motion(MotionSpec(1.0, 100.0, seed=0))


def collect():
    out = []
    return out, out.append


def test_one_second_gives_100_commands(body, hand, motion):
    out, sink = collect()
    stats = run_control_loop(FrameSource(motion), default_config(body), body, None, sink, 100.0, SimClock(), hand=hand)
    assert stats.ticks == stats.published == len(out) == 100
    assert [m.timestamp_us for m in out] == [k * 10_000 for k in range(100)]
    assert all(m.topic == "cmd" for m in out)


def test_constant_frame_gives_identical_commands(body):
    frame = frame_from_poses(body, body.midpoints() + 0.1)
    frames = [frame_from_poses(body, body.midpoints() + 0.1, timestamp_us=k * 10_000) for k in range(30)]
    out, sink = collect()
    run_control_loop(FrameSource([frame] * 1 + frames[1:]), default_config(body), body, None, sink)
    cmds = [parse_payload(m) for m in out]
    assert all(c == cmds[1] for c in cmds[1:])


def test_drifted_source_gives_identical_commands(body, hand, motion):
    a, sa = collect()
    b, sb = collect()
    run_control_loop(FrameSource(motion), default_config(body), body, None, sa, hand=hand)
    run_control_loop(FrameSource(inject_drift(motion, 0.05, 3)), default_config(body), body, None, sb, hand=hand)
    assert [m.payload for m in a] == [m.payload for m in b]


def feed(triggers, commands_until_us, rate_hz=100.0):
    bus = Bus()
    sub = bus.subscribe("cmd", "pedal")
    for ev in triggers:
        bus.publish(make_message("pedal", ev.timestamp_us, ev))
    cmd = CommandVector.zeros()
    k = 0
    while (t := int(round(k * 1e6 / rate_hz))) <= commands_until_us:
        bus.publish(make_message("cmd", t, cmd))
        k += 1
    bus.close()
    return sub


def test_three_second_window_records_90_frames():
    sub = feed([TriggerEvent("start", 0), TriggerEvent("stop", 3_000_000)], 3_500_000)
    eps = run_recorder(sub, 30.0, SimClock())
    assert len(eps) == 1 and abs(len(eps[0].frames) - 90) <= 1


def test_no_triggers_no_episodes():
    assert run_recorder(feed([], 2_000_000), 30.0, SimClock()) == []


def test_two_windows_two_episodes_within_bounds():
    windows = [(100_000, 900_000), (1_200_000, 2_000_000)]
    triggers = [TriggerEvent(k, t) for a, b in windows for k, t in (("start", a), ("stop", b))]
    eps = run_recorder(feed(triggers, 2_500_000), 30.0, SimClock())
    assert len(eps) == 2
    for ep, (a, b) in zip(eps, windows):
        ts = [f.timestamp_us for f in ep.frames]
        assert a <= ts[0] and ts[-1] <= b
        assert abs(len(ts) - int((b - a) * 30e-6)) <= 1
    assert eps[0].frames[-1].timestamp_us < eps[1].frames[0].timestamp_us


def test_protocol_errors():
    with pytest.raises(ProtocolError):
        run_recorder(feed([TriggerEvent("stop", 0)], 100_000), 30.0, SimClock())
    with pytest.raises(ProtocolError):
        run_recorder(feed([TriggerEvent("start", 0), TriggerEvent("start", 50_000)], 100_000), 30.0, SimClock())


def test_sparse_feed_repeats_latest_at_tick_time(caplog):
    # commands only every 200 ms: the recorder conflates, repeating the latest at each 30 Hz tick
    sub = feed([TriggerEvent("start", 0), TriggerEvent("stop", 1_000_000), TriggerEvent("start", 1_100_000)],
               1_500_000, rate_hz=5.0)
    eps = run_recorder(sub, 30.0, SimClock())
    ts = [f.timestamp_us for f in eps[0].frames]
    assert len(eps) == 1   # the unterminated second window is dropped
    assert all(b > a for a, b in zip(ts, ts[1:]))
    assert abs(len(ts) - 30) <= 1
    assert "unterminated" in caplog.text


def test_session_matches_acceptance_numbers(body, hand):
    frames = synth_motion(MotionSpec(3.0, 100.0, seed=1))
    res = run_session(frames, default_config(body), body, None,
                      [TriggerEvent("start", 0), TriggerEvent("stop", 3_000_000)], hand=hand)
    assert res.control.published == 300
    assert len(res.episodes) == 1 and abs(len(res.episodes[0].frames) - 90) <= 1


def test_threaded_session_under_simulated_clocks_matches_unthreaded(body, hand):
    frames = synth_motion(MotionSpec(1.0, 100.0, seed=2))
    trig = [TriggerEvent("start", 100_000), TriggerEvent("stop", 800_000)]
    a = run_session(frames, default_config(body), body, None, trig, hand=hand)
    b = run_session(frames, default_config(body), body, None, trig, hand=hand, threaded=True)
    assert [[f.to_dict() for f in e.frames] for e in a.episodes] == [[f.to_dict() for f in e.frames]
                                                                     for e in b.episodes]


# --- episode files ------------------------------------------------------------------------------

def episode(n, state=True):
    rng = np.random.default_rng(n)
    frames = [EpisodeFrame(k * 33_333, CommandVector.zeros(), rng.normal(size=63) if state else None)
              for k in range(n)]
    return EpisodeRecord(3, frames, {"rate_hz": 30.0, "seed": 1})


def test_episode_round_trip(tmp_path):
    for n in (0, 90):
        rec = episode(n)
        write_episode(rec, tmp_path / f"e{n}")
        assert len((tmp_path / f"e{n}" / "frames.jsonl").read_text().splitlines()) == n
        back = read_episode(tmp_path / f"e{n}")
        assert back.episode_id == 3 and back.metadata == rec.metadata
        assert [f.to_dict() for f in back.frames] == [f.to_dict() for f in rec.frames]


def test_episode_errors(tmp_path):
    with pytest.raises(EpisodeMissing):
        read_episode(tmp_path / "none")
    d = write_episode(episode(10), tmp_path / "e")
    lines = (d / "frames.jsonl").read_text().splitlines()
    lines[6] = lines[6][:-10]
    (d / "frames.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(EpisodeCorrupt) as err:
        read_episode(d)
    assert err.value.line == 7 and ":7:" in str(err.value)
    d = write_episode(episode(10), tmp_path / "f")
    (d / "frames.jsonl").write_text("\n".join((d / "frames.jsonl").read_text().splitlines()[:4]) + "\n")
    with pytest.raises(EpisodeIncomplete):
        read_episode(d)


def test_episode_invariants():
    rec = episode(3)
    rec.frames[2].state = None
    with pytest.raises(ValueError):
        rec.validate()
    rec = episode(3)
    rec.frames[1].timestamp_us = 0
    with pytest.raises(ValueError):
        rec.validate()
