"""Message framing, fixed-rate control and recording loops, episode files.

A frame on the wire (all integers little-endian)::

    "HD" | version u8 | topic_len u8 | topic | timestamp_us u64 | payload_len u32 | payload | crc32

The CRC covers every byte after the magic.  The same frames travel over the
in-process ``Bus`` and, back to back, over a TCP stream.

The control loop retargets the newest human frame at 100 Hz and publishes a
command on ``cmd``.  The recorder samples the newest command at 30 Hz and
keeps only the samples between pedal ``start`` and ``stop`` events.
"""
from __future__ import annotations

import json
import logging
import math
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .body_retarget import (BaseCommandEstimator, CommandVector, HumanFrame, RetargetConfig,
                            assemble_command, solve_frame)
from .hand_retarget import HandRegressor, open_pose
from .kinematics import KinematicModel

log = logging.getLogger(__name__)

MAGIC = b"HD"
VERSION = 1
_HEAD = struct.Struct("<BB")
_STAMP = struct.Struct("<QI")
_CRC = struct.Struct("<I")
MIN_FRAME = len(MAGIC) + _HEAD.size + _STAMP.size + _CRC.size  # empty topic, empty payload
MAX_TOPIC = 255
MAX_PAYLOAD = 2 ** 32 - 1

TOPIC_COMMAND = "cmd"
TOPIC_PEDAL = "pedal"
TOPIC_HUMAN = "human"


# --- wire format -------------------------------------------------------------------

class WireError(ValueError):
    """Base class for frames that cannot be decoded."""


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class BadChecksum(WireError):
    pass


class Truncated(WireError):
    pass


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class WireMessage:
    topic: str
    timestamp_us: int
    payload: bytes = b""


def encode_message(msg: WireMessage) -> bytes:
    topic = msg.topic.encode("utf-8")
    if not topic:
        raise EncodeError("topic must be non-empty")
    if len(topic) > MAX_TOPIC:
        raise EncodeError(f"topic is {len(topic)} bytes, limit {MAX_TOPIC}")
    if len(msg.payload) > MAX_PAYLOAD:
        raise EncodeError("payload exceeds 2**32 - 1 bytes")
    if not 0 <= msg.timestamp_us < 2 ** 64:
        raise EncodeError("timestamp must fit in an unsigned 64-bit integer")
    body = b"".join([_HEAD.pack(VERSION, len(topic)), topic,
                     _STAMP.pack(msg.timestamp_us, len(msg.payload)), bytes(msg.payload)])
    return MAGIC + body + _CRC.pack(zlib.crc32(body))


def frame_length(buf: bytes | bytearray | memoryview) -> int | None:
    """Total size of the frame starting at ``buf[0]``, or None if the header is incomplete."""
    if len(buf) < 4:
        return None
    if bytes(buf[:2]) != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(buf[:2])!r}")
    tlen = buf[3]
    head = 4 + tlen + _STAMP.size
    if len(buf) < head:
        return None
    _, plen = _STAMP.unpack_from(buf, 4 + tlen)
    return head + plen + _CRC.size


def decode_message(data: bytes) -> WireMessage:
    """Decode exactly one complete frame.

    The checksum is verified before any length field is trusted, so a
    corrupted byte anywhere after the magic reports as ``BadChecksum``.
    """
    data = bytes(data)
    if len(data) < 2 or data[:2] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:2]!r}")
    if len(data) < MIN_FRAME:
        raise Truncated(f"frame of {len(data)} bytes is shorter than the {MIN_FRAME}-byte minimum")
    body, (crc,) = data[2:-4], _CRC.unpack(data[-4:])
    if zlib.crc32(body) != crc:
        raise BadChecksum(f"crc mismatch: stored {crc:#010x}, computed {zlib.crc32(body):#010x}")
    version, tlen = _HEAD.unpack_from(body)
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    need = _HEAD.size + tlen + _STAMP.size
    if len(body) < need:
        raise Truncated("frame ends inside the header")
    ts, plen = _STAMP.unpack_from(body, _HEAD.size + tlen)
    if len(body) != need + plen:
        raise Truncated(f"payload length {plen} disagrees with frame size")
    try:
        topic = body[2:2 + tlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WireError(f"topic is not UTF-8: {exc}") from None
    return WireMessage(topic, ts, body[need:])


class FrameReader:
    """Splits a byte stream into messages; partial frames wait for more data."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while True:
            n = frame_length(self._buf)
            if n is None or len(self._buf) < n:
                return out
            out.append(decode_message(bytes(self._buf[:n])))
            del self._buf[:n]

    @property
    def pending(self) -> int:
        return len(self._buf)


# --- payload schemas --------------------------------------------------------------

@dataclass(frozen=True)
class TriggerEvent:
    kind: str   # "start" | "stop"
    timestamp_us: int

    def __post_init__(self):
        if self.kind not in ("start", "stop"):
            raise ValueError(f"trigger kind must be 'start' or 'stop', not {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "t_us": self.timestamp_us}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TriggerEvent":
        return cls(d["kind"], int(d["t_us"]))


_SCHEMAS = {TOPIC_COMMAND: CommandVector, TOPIC_PEDAL: TriggerEvent, TOPIC_HUMAN: HumanFrame}


def schema_for(topic: str):
    """Payload type selected by topic prefix (``cmd``, ``cmd/left`` ... -> CommandVector)."""
    for prefix, cls in _SCHEMAS.items():
        if topic == prefix or topic.startswith(prefix + "/"):
            return cls
    raise KeyError(f"no payload schema for topic {topic!r}")


def make_message(topic: str, timestamp_us: int, obj) -> WireMessage:
    cls = schema_for(topic)
    if not isinstance(obj, cls):
        raise TypeError(f"topic {topic!r} carries {cls.__name__}, got {type(obj).__name__}")
    return WireMessage(topic, timestamp_us, json.dumps(obj.to_dict(), separators=(",", ":")).encode())


def parse_payload(msg: WireMessage):
    return schema_for(msg.topic).from_dict(json.loads(msg.payload))


# --- transport ---------------------------------------------------------------------

class Subscription:
    """Queue of decoded messages for a set of topic prefixes."""

    def __init__(self, prefixes: Sequence[str]):
        self.prefixes = tuple(prefixes)
        self._q: queue.SimpleQueue = queue.SimpleQueue()
        self.closed = threading.Event()

    def matches(self, topic: str) -> bool:
        return any(topic == p or topic.startswith(p + "/") for p in self.prefixes) or not self.prefixes

    def _push(self, frame: bytes) -> None:
        self._q.put(frame)

    def poll(self, timeout: float | None = None) -> list[WireMessage]:
        """All messages delivered so far, decoded from their wire frames.

        With ``timeout`` an empty queue is waited on for up to that many seconds.
        """
        out = []
        if timeout is not None:
            try:
                out.append(decode_message(self._q.get(timeout=timeout)))
            except queue.Empty:
                return out
        while True:
            try:
                out.append(decode_message(self._q.get_nowait()))
            except queue.Empty:
                return out

    @property
    def drained(self) -> bool:
        return self.closed.is_set() and self._q.empty()


class Bus:
    """In-process pub/sub over encoded frames: one writer, many readers."""

    def __init__(self):
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self.published = 0

    def subscribe(self, *prefixes: str) -> Subscription:
        sub = Subscription(prefixes)
        with self._lock:
            self._subs.append(sub)
        return sub

    def publish(self, msg: WireMessage) -> None:
        frame = encode_message(msg)
        with self._lock:
            subs = list(self._subs)
            self.published += 1
        for s in subs:
            if s.matches(msg.topic):
                s._push(frame)

    __call__ = publish

    def close(self) -> None:
        with self._lock:
            for s in self._subs:
                s.closed.set()


class TcpSink:
    """Message consumer writing frames back to back onto a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "TcpSink":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def __call__(self, msg: WireMessage) -> None:
        self.sock.sendall(encode_message(msg))

    def close(self) -> None:
        self.sock.close()


def iter_socket(sock: socket.socket, chunk: int = 65536) -> Iterator[WireMessage]:
    """Yield messages from a socket until the peer closes it."""
    reader = FrameReader()
    while True:
        data = sock.recv(chunk)
        if not data:
            if reader.pending:
                raise Truncated(f"stream closed with {reader.pending} bytes of a partial frame")
            return
        yield from reader.feed(data)


# --- clocks ---------------------------------------------------------------------------

class Clock(Protocol):
    def now_us(self) -> int: ...
    def sleep_until(self, t_us: int) -> None: ...


class SimClock:
    """Time advances only when a loop sleeps; schedules are exact."""

    def __init__(self, start_us: int = 0):
        self._t = int(start_us)

    def now_us(self) -> int:
        return self._t

    def sleep_until(self, t_us: int) -> None:
        self._t = max(self._t, int(t_us))


class WallClock:
    """Monotonic wall time, zeroed at construction."""

    def __init__(self):
        self._t0 = time.monotonic_ns()

    def now_us(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    def sleep_until(self, t_us: int) -> None:
        dt = (t_us - self.now_us()) * 1e-6
        if dt > 0:
            time.sleep(dt)


def tick_time_us(k: int, rate_hz: float) -> int:
    return int(round(k * 1e6 / rate_hz))


# --- control loop -----------------------------------------------------------------------

class FrameSource:
    """Replays a recorded frame sequence as a "latest value" feed.

    ``latest(t)`` returns the newest frame stamped at or before ``t``; once
    ``t`` passes the last timestamp the source is exhausted.
    """

    def __init__(self, frames: Sequence[HumanFrame]):
        self.frames = list(frames)
        self._i = -1

    def latest(self, t_us: int) -> HumanFrame | None:
        if not self.frames or t_us > self.frames[-1].timestamp_us:
            raise StopIteration
        while self._i + 1 < len(self.frames) and self.frames[self._i + 1].timestamp_us <= t_us:
            self._i += 1
        return self.frames[self._i] if self._i >= 0 else None


@dataclass
class LoopStats:
    ticks: int = 0
    published: int = 0
    skipped: int = 0              # ticks before the first frame arrived
    mean_iterations: float = 0.0
    mean_accepted_steps: float = 0.0
    overruns: int = 0
    max_tick_s: float = 0.0
    start_us: int = 0
    end_us: int = 0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = dict(self.__dict__)
        if not include_timing:
            d.pop("max_tick_s")
        return d


class HandMapper:
    """Both hands through one regressor call; missing tips hold the last target."""

    def __init__(self, regressor: HandRegressor | None, hand: KinematicModel | None = None):
        self.regressor = regressor
        rest = open_pose(hand) if hand is not None else (
            regressor.out_mid if regressor is not None else np.zeros(20))
        self.last = [np.array(rest, dtype=float), np.array(rest, dtype=float)]

    def __call__(self, frame: HumanFrame) -> tuple[np.ndarray, np.ndarray]:
        tips = [frame.fingertips_left, frame.fingertips_right]
        if self.regressor is not None:
            have = [k for k in (0, 1) if tips[k] is not None]
            if have:
                pred = self.regressor.predict(np.stack([tips[k].ravel() for k in have]))
                for row, k in zip(pred, have):
                    self.last[k] = row
        return self.last[0].copy(), self.last[1].copy()


def run_control_loop(source: FrameSource, config: RetargetConfig, model: KinematicModel,
                     regressor: HandRegressor | None, sink: Callable[[WireMessage], None],
                     rate_hz: float = 100.0, clock: Clock | None = None,
                     duration_s: float | None = None, hand: KinematicModel | None = None,
                     topic: str = TOPIC_COMMAND) -> LoopStats:
    """Retarget the newest frame every tick and publish the command.

    Tick ``k`` is scheduled at ``k / rate_hz`` seconds.  The body solve is
    warm-started from the previous tick's solution.
    """
    clock = clock or SimClock()
    t0 = clock.now_us()
    stats = LoopStats(start_us=t0)
    q = model.midpoints()
    base = BaseCommandEstimator(config.pelvis_human)
    hands = HandMapper(regressor, hand)
    its = acc = 0
    last_frame = None
    k = 0
    while duration_s is None or k < round(duration_s * rate_hz):
        t_k = t0 + tick_time_us(k, rate_hz)
        clock.sleep_until(t_k)
        if clock.now_us() > t_k + tick_time_us(1, rate_hz):
            stats.overruns += 1
        wall = time.perf_counter()
        try:
            frame = source.latest(t_k - t0)
        except StopIteration:
            break
        stats.ticks += 1
        k += 1
        if frame is None:
            stats.skipped += 1
            continue
        if frame is not last_frame:
            sol = solve_frame(config, frame, model, q)
            q = sol.q_star
            its += sol.iterations
            acc += sol.accepted_steps
            bc = base.update(frame)
            left, right = hands(frame)
            cmd = assemble_command(q, left, right, bc)
            last_frame = frame
        sink(make_message(topic, t_k, cmd))
        stats.published += 1
        stats.max_tick_s = max(stats.max_tick_s, time.perf_counter() - wall)
    solved = max(stats.published, 1)
    stats.mean_iterations = its / solved
    stats.mean_accepted_steps = acc / solved
    stats.end_us = clock.now_us()
    return stats


# --- recorder ------------------------------------------------------------------------------

class ProtocolError(RuntimeError):
    pass


@dataclass
class EpisodeFrame:
    timestamp_us: int
    command: CommandVector
    state: np.ndarray | None = None
    image_ref: str | None = None

    def to_dict(self) -> dict:
        return {"t_us": self.timestamp_us, "command": self.command.to_dict(),
                "state": None if self.state is None else np.asarray(self.state).tolist(),
                "image": self.image_ref}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpisodeFrame":
        state = d.get("state")
        return cls(int(d["t_us"]), CommandVector.from_dict(d["command"]),
                   None if state is None else np.asarray(state, dtype=float), d.get("image"))


STATE_DIM = 63  # 23 body + 2 x 20 hand joints


@dataclass
class EpisodeRecord:
    episode_id: int
    frames: list[EpisodeFrame] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        ts = [f.timestamp_us for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("episode timestamps must be strictly increasing")
        has_state = {f.state is not None for f in self.frames}
        if len(has_state) > 1:
            raise ValueError("state must be present on all frames or none")
        for f in self.frames:
            if f.state is not None and np.shape(f.state) != (STATE_DIM,):
                raise ValueError(f"state must have {STATE_DIM} entries")

    @property
    def span_us(self) -> tuple[int, int] | None:
        return (self.frames[0].timestamp_us, self.frames[-1].timestamp_us) if self.frames else None


def run_recorder(subscription: Subscription, rate_hz: float = 30.0, clock: Clock | None = None,
                 until_us: int | None = None, metadata: Mapping | None = None,
                 state_fn: Callable[[int], np.ndarray] | None = None) -> list[EpisodeRecord]:
    """Sample the newest command each tick inside pedal windows.

    Messages are applied in timestamp order up to the tick time.  A tick is
    processed only once a command stamped after it has arrived or the stream
    has closed; the control loop publishes commands in time order, so nothing
    due can still be in flight and the result does not depend on how the
    producer and recorder threads interleave.

    A tick with no fresh command repeats the last one stamped at the tick
    time.  Commands stamped before the current ``start`` are never sampled.
    An episode still open when the stream ends is discarded.
    """
    clock = clock or SimClock()
    t0 = clock.now_us()
    pending: list[WireMessage] = []
    episodes: list[EpisodeRecord] = []
    current: EpisodeRecord | None = None
    start_us = 0
    latest: tuple[int, CommandVector] | None = None
    last_emitted = -1
    horizon = -1   # newest command timestamp received
    meta = {"rate_hz": rate_hz, **dict(metadata or {})}
    k = 0
    while True:
        t_k = t0 + tick_time_us(k, rate_hz)
        if until_us is not None and t_k > until_us:
            break
        clock.sleep_until(t_k)
        fresh: list[WireMessage] = []
        while True:
            drained = subscription.drained
            fresh += subscription.poll()
            pending.extend(fresh)
            horizon = max([horizon] + [m.timestamp_us for m in fresh if schema_for(m.topic) is CommandVector])
            if drained or horizon > t_k:
                break
            fresh = subscription.poll(timeout=0.05)
        pending.sort(key=lambda m: m.timestamp_us)
        n_due = 0
        while n_due < len(pending) and pending[n_due].timestamp_us <= t_k:
            n_due += 1
        due, pending = pending[:n_due], pending[n_due:]
        for msg in due:
            obj = parse_payload(msg)
            if isinstance(obj, TriggerEvent):
                if obj.kind == "start":
                    if current is not None:
                        raise ProtocolError(f"start at {obj.timestamp_us} us while an episode is open")
                    current = EpisodeRecord(len(episodes), [], dict(meta))
                    start_us = obj.timestamp_us
                    last_emitted = -1
                else:
                    if current is None:
                        raise ProtocolError(f"stop at {obj.timestamp_us} us without a start")
                    current.metadata["start_us"], current.metadata["stop_us"] = start_us, obj.timestamp_us
                    episodes.append(current)
                    current = None
            elif isinstance(obj, CommandVector):
                latest = (msg.timestamp_us, obj)
        if current is not None and latest is not None and latest[0] >= start_us:
            ts, cmd = latest
            stamp = ts if ts > last_emitted else t_k  # conflation: a repeat carries the tick time
            if stamp > last_emitted:
                state = None if state_fn is None else np.asarray(state_fn(stamp), dtype=float)
                current.frames.append(EpisodeFrame(stamp, cmd, state))
                last_emitted = stamp
        if drained and not pending:
            break
        k += 1
    if current is not None:
        log.warning("discarding unterminated episode %d (%d frames)", current.episode_id, len(current.frames))
    return episodes


# --- episode files -----------------------------------------------------------------------

class EpisodeError(Exception):
    pass


class EpisodeMissing(EpisodeError):
    pass


class EpisodeCorrupt(EpisodeError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class EpisodeIncomplete(EpisodeError):
    pass


EPISODE_FORMAT = "episode/1"


def write_episode(rec: EpisodeRecord, directory) -> Path:
    rec.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "frames.jsonl").open("w") as fh:
        for f in rec.frames:
            fh.write(json.dumps(f.to_dict(), separators=(",", ":")) + "\n")
    meta = {"format": EPISODE_FORMAT, "episode_id": rec.episode_id, "frame_count": len(rec.frames),
            "metadata": rec.metadata}
    # meta last: its presence marks a finished write
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def read_episode(directory) -> EpisodeRecord:
    d = Path(directory)
    meta_path, frames_path = d / "meta.json", d / "frames.jsonl"
    for p in (meta_path, frames_path):
        if not p.is_file():
            raise EpisodeMissing(f"{p} not found")
    try:
        meta = json.loads(meta_path.read_text())
        count = int(meta["frame_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise EpisodeCorrupt(meta_path, 1, f"unreadable metadata: {exc}") from None
    frames = []
    with frames_path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                frames.append(EpisodeFrame.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise EpisodeCorrupt(frames_path, lineno, f"{type(exc).__name__}: {exc}") from None
    if len(frames) != count:
        raise EpisodeIncomplete(f"{frames_path} has {len(frames)} frames, metadata declares {count}")
    rec = EpisodeRecord(int(meta["episode_id"]), frames, meta.get("metadata", {}))
    try:
        rec.validate()
    except ValueError as exc:
        raise EpisodeCorrupt(frames_path, 0, str(exc)) from None
    return rec


# --- session helper ------------------------------------------------------------------------------

@dataclass
class SessionResult:
    control: LoopStats
    episodes: list[EpisodeRecord]
    messages: int


def run_session(frames: Sequence[HumanFrame], config: RetargetConfig, model: KinematicModel,
                regressor: HandRegressor | None, triggers: Iterable[TriggerEvent],
                control_hz: float = 100.0, record_hz: float = 30.0, threaded: bool = False,
                clock_factory: Callable[[], Clock] = SimClock, hand: KinematicModel | None = None,
                metadata: Mapping | None = None) -> SessionResult:
    """Control loop and recorder wired through one bus.

    Unthreaded runs the loop to completion and then the recorder, which is
    exact under simulated clocks.  Threaded runs both concurrently.
    """
    bus = Bus()
    sub = bus.subscribe(TOPIC_COMMAND, TOPIC_PEDAL)
    for ev in triggers:
        bus.publish(make_message(TOPIC_PEDAL, ev.timestamp_us, ev))
    if not threaded:
        stats = run_control_loop(FrameSource(frames), config, model, regressor, bus, control_hz,
                                 clock_factory(), hand=hand)
        bus.close()
        eps = run_recorder(sub, record_hz, clock_factory(), metadata=metadata)
        return SessionResult(stats, eps, bus.published)
    result: dict = {}

    def produce():
        try:
            result["stats"] = run_control_loop(FrameSource(frames), config, model, regressor, bus,
                                               control_hz, clock_factory(), hand=hand)
        finally:
            bus.close()

    th = threading.Thread(target=produce, name="control-loop")
    th.start()
    eps = run_recorder(sub, record_hz, clock_factory(), metadata=metadata)
    th.join()
    return SessionResult(result["stats"], eps, bus.published)
