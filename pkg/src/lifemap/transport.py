"""Two-role wire protocol: the robot streams observations, the mapper answers.

Frame layout (little-endian)::

    magic "LLMS" | version u16 | topic u16 | sequence u64 | length u32
    payload[length] | crc32 u32 over everything before it

Sequence numbers are per topic and per direction, starting at 0.  Topics:

    1 observation  dataset record layout (see ``io``)
    2 pose         session hello, period plan or period end
    3 regions      change regions found so far in the period
    4 decision     session accept/refuse and remap decisions
    5 metrics      end-of-period summary (JSON)
"""

from __future__ import annotations

import json
import os
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import io as fio
from .detect import ChangeRegion
from .errors import (
    BadMagic,
    ChecksumMismatch,
    NeedMoreBytes,
    PayloadTooLarge,
    SequenceGap,
    SessionFailed,
    VersionMismatch,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    Mapper,
    PeriodOutput,
    PeriodPlan,
    QueryAnswer,
    Scenario,
    score_period,
)
from .scene import Pose

MAGIC = b"LLMS"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024
HEADER = struct.Struct("<4sHHQI")
CRC = struct.Struct("<I")
OVERHEAD = HEADER.size + CRC.size

TOPIC_OBSERVATION = 1
TOPIC_POSE = 2
TOPIC_REGIONS = 3
TOPIC_DECISION = 4
TOPIC_METRICS = 5
TOPICS = (1, 2, 3, 4, 5)

DEFAULT_ADDR = "127.0.0.1:7461"
DEFAULT_QUEUE_DEPTH = 32


@dataclass(frozen=True)
class MessageFrame:
    version: int
    topic: int
    sequence: int
    payload: bytes

    @property
    def size(self):
        return OVERHEAD + len(self.payload)


def encode_frame(topic, sequence, payload=b"", version=PROTOCOL_VERSION) -> bytes:
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = HEADER.pack(MAGIC, version, topic, sequence, len(payload))
    body = head + payload
    return body + CRC.pack(zlib.crc32(body))


def decode_frame(data) -> MessageFrame:
    """Parse the frame at the start of ``data``; trailing bytes are ignored."""
    data = memoryview(data)
    if len(data) >= 4 and bytes(data[:4]) != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r}")
    if len(data) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(data))
    _, version, topic, sequence, length = HEADER.unpack(data[: HEADER.size])
    total = HEADER.size + length + CRC.size
    if len(data) < total:
        raise NeedMoreBytes(total - len(data))
    end = HEADER.size + length
    (crc,) = CRC.unpack(data[end:total])
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumMismatch(f"crc mismatch on topic {topic} seq {sequence}")
    return MessageFrame(version, topic, sequence, bytes(data[HEADER.size : end]))


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data):
        self._buf += data

    def frames(self):
        while True:
            try:
                frame = decode_frame(self._buf)
            except NeedMoreBytes:
                return
            del self._buf[: frame.size]
            yield frame


class SequenceTracker:
    """Per-topic FIFO check: each frame must carry the next sequence number."""

    def __init__(self):
        self.expected = {}

    def check(self, frame: MessageFrame):
        want = self.expected.get(frame.topic, 0)
        if frame.sequence != want:
            raise SequenceGap(f"topic {frame.topic}: expected seq {want}, got {frame.sequence}")
        self.expected[frame.topic] = want + 1


# ----------------------------------------------------------------------------
# connection


def parse_addr(addr):
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def queue_depth_from_env(default=DEFAULT_QUEUE_DEPTH):
    return int(os.environ.get("LIFEMAP_QUEUE_DEPTH", default))


def mapper_addr_from_env(default=DEFAULT_ADDR):
    return os.environ.get("LIFEMAP_MAPPER_ADDR", default)


class Connection:
    """Framed duplex channel over a connected socket.

    Sends go through one FIFO drained by a writer thread; each topic may have
    at most ``queue_depth`` frames in flight and ``send`` blocks beyond that.
    Receives happen on the caller's thread.
    """

    def __init__(self, sock, version=PROTOCOL_VERSION, queue_depth=None):
        self.sock = sock
        self.version = version
        depth = queue_depth or queue_depth_from_env()
        self._slots = {t: threading.BoundedSemaphore(depth) for t in TOPICS}
        self._seq = {t: 0 for t in TOPICS}
        self._fifo = queue.Queue()
        self._reader = FrameReader()
        self._pending = []
        self.tracker = SequenceTracker()
        self._error = None
        self._writer = threading.Thread(target=self._drain, daemon=True)
        self._writer.start()

    def _drain(self):
        while True:
            item = self._fifo.get()
            if item is None:
                return
            topic, data = item
            try:
                self.sock.sendall(data)
            except OSError as exc:
                self._error = exc
            finally:
                self._slots[topic].release()

    def send(self, topic, payload):
        if self._error is not None:
            raise SessionFailed(f"send failed: {self._error}")
        self._slots[topic].acquire()
        data = encode_frame(topic, self._seq[topic], payload, self.version)
        self._seq[topic] += 1
        self._fifo.put((topic, data))

    def recv(self) -> MessageFrame:
        while not self._pending:
            try:
                chunk = self.sock.recv(1 << 16)
            except OSError as exc:
                raise SessionFailed(f"connection lost: {exc}") from exc
            if not chunk:
                raise SessionFailed("peer disconnected")
            self._reader.feed(chunk)
            self._pending.extend(self._reader.frames())
        frame = self._pending.pop(0)
        if frame.version != self.version:
            raise VersionMismatch(f"peer speaks version {frame.version}, we speak {self.version}")
        self.tracker.check(frame)
        return frame

    def close(self):
        self._fifo.put(None)
        self._writer.join(timeout=30)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# ----------------------------------------------------------------------------
# payloads

POSE_HELLO, POSE_PLAN, POSE_END = 0, 1, 2
DECISION_ACCEPT, DECISION_REFUSE, DECISION_REMAP = 0, 1, 2
_REGION = struct.Struct("<3dd3dI")


def encode_plan(plan) -> bytes:
    parts = [struct.pack("<BHII", POSE_PLAN, plan.period, plan.n_frames, len(plan.poses))]
    parts += [np.asarray(p.as_array(), "<f8").tobytes() for p in plan.poses]
    parts.append(struct.pack("<I", len(plan.queries)))
    for label, q in plan.queries:
        name = label.encode()
        q = np.asarray(q, "<f8")
        parts.append(struct.pack("<HI", len(name), len(q)) + name + q.tobytes())
    return b"".join(parts)


def decode_plan(payload):
    kind, period, n_frames, n_poses = struct.unpack_from("<BHII", payload)
    pos = struct.calcsize("<BHII")
    poses = []
    for _ in range(n_poses):
        poses.append(Pose.from_array(np.frombuffer(payload, "<f8", 12, pos)))
        pos += 96
    (nq,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    queries = []
    for _ in range(nq):
        ln, d = struct.unpack_from("<HI", payload, pos)
        pos += 6
        label = bytes(payload[pos : pos + ln]).decode()
        pos += ln
        queries.append((label, np.frombuffer(payload, "<f8", d, pos).copy()))
        pos += 8 * d
    return PeriodPlan(period, poses, queries, n_frames)


def encode_regions(period, regions) -> bytes:
    parts = [struct.pack("<HI", period, len(regions))]
    parts += [_REGION.pack(*r.center, r.yaw, *r.half_extents, int(r.count)) for r in regions]
    return b"".join(parts)


def decode_regions(payload):
    period, n = struct.unpack_from("<HI", payload)
    pos = struct.calcsize("<HI")
    out = []
    for _ in range(n):
        v = _REGION.unpack_from(payload, pos)
        pos += _REGION.size
        out.append(ChangeRegion(v[0:3], v[3], v[4:7], v[7]))
    return period, out


def encode_decision(kind, period=0, value=False) -> bytes:
    return struct.pack("<BHB", kind, period, int(bool(value)))


def decode_decision(payload):
    kind, period, value = struct.unpack("<BHB", payload)
    return kind, period, bool(value)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def encode_metrics(output) -> bytes:
    doc = {
        "period": output.period, "decision": output.decision, "mask_ratio": output.mask_ratio,
        "steps": output.steps, "frames": output.frames, "error": output.error,
        "answers": [[a.label, None if a.argmax is None else list(map(float, a.argmax)), a.value, a.no_content]
                    for a in output.answers],
    }
    return json.dumps(doc, default=_json_default).encode()


def decode_metrics(payload, regions):
    doc = json.loads(bytes(payload).decode())
    answers = [QueryAnswer(l, None if a is None else np.array(a), v, nc) for l, a, v, nc in doc["answers"]]
    return PeriodOutput(doc["period"], doc["decision"], list(regions), doc["mask_ratio"], doc["steps"],
                        doc["frames"], answers, [], doc["error"])


# ----------------------------------------------------------------------------
# roles


@dataclass
class RoleConfig:
    addr: str | None = None
    experiment: object = None  # ExperimentConfig, robot side
    checkpoint_dir: str | None = None  # mapper side
    version: int = PROTOCOL_VERSION
    queue_depth: int | None = None
    timeout: float = 600.0


def run_mapper_role(config: RoleConfig, ready=None, listener=None):
    """Serve one robot session.  Returns the list of period outputs.

    The field checkpoint is rewritten atomically after every completed
    period, so a dropped session leaves the last good map on disk.
    """
    if listener is None:
        listener = socket.create_server(parse_addr(config.addr or mapper_addr_from_env()))
    if ready is not None:
        ready(listener.getsockname())
    listener.settimeout(config.timeout)
    sock, _ = listener.accept()
    listener.close()
    sock.settimeout(config.timeout)
    conn = Connection(sock, config.version, config.queue_depth)
    outputs = []
    try:
        try:
            hello = conn.recv()
        except VersionMismatch:
            conn.send(TOPIC_DECISION, encode_decision(DECISION_REFUSE))
            raise
        doc = json.loads(hello.payload[1:].decode())
        mapper = Mapper(ExperimentConfig(**doc))
        conn.send(TOPIC_DECISION, encode_decision(DECISION_ACCEPT))
        sent = 0
        while True:
            frame = conn.recv()
            if frame.topic == TOPIC_POSE:
                kind = frame.payload[0]
                if kind == POSE_PLAN:
                    plan = decode_plan(frame.payload)
                    mapper.start_period(plan)
                    sent = 0
                elif kind == POSE_END:
                    out = mapper.finish_period()
                    conn.send(TOPIC_REGIONS, encode_regions(out.period, out.regions[sent:]))
                    if config.checkpoint_dir and mapper.field is not None and out.error is None:
                        fio.save_checkpoint(os.path.join(config.checkpoint_dir, "field.llff"), mapper.field)
                    conn.send(TOPIC_METRICS, encode_metrics(out))
                    outputs.append(out)
                elif kind == POSE_HELLO:
                    return outputs  # a second hello closes the session cleanly
            elif frame.topic == TOPIC_OBSERVATION:
                obs, _ = fio.decode_observation(frame.payload)
                events = mapper.observe(obs)
                if "regions" in events:
                    conn.send(TOPIC_REGIONS, encode_regions(mapper.out.period, events["regions"]))
                    sent += len(events["regions"])
                if "decision" in events:
                    conn.send(TOPIC_DECISION, encode_decision(DECISION_REMAP, mapper.out.period, events["decision"]))
    finally:
        conn.close()


def run_robot_role(config: RoleConfig, sock=None):
    """Drive one experiment against a remote mapper; returns an ExperimentReport."""
    cfg = config.experiment
    if sock is None:
        sock = socket.create_connection(parse_addr(config.addr or mapper_addr_from_env()), timeout=config.timeout)
    sock.settimeout(config.timeout)
    conn = Connection(sock, config.version, config.queue_depth)
    scenario = Scenario(cfg)
    report = ExperimentReport(cfg)
    try:
        conn.send(TOPIC_POSE, bytes([POSE_HELLO]) + json.dumps(cfg.as_dict(), default=_json_default).encode())
        reply = conn.recv()
        kind, _, _ = decode_decision(reply.payload)
        if kind == DECISION_REFUSE:
            raise VersionMismatch("mapper refused the session")
        for period in range(cfg.periods):
            t0 = time.perf_counter()
            trial = scenario.history[0] if period == 0 else scenario.advance()
            plan = scenario.plan(period)
            conn.send(TOPIC_POSE, encode_plan(plan))
            regions, decision, requested = [], None, 0
            probe = min(cfg.probe_frames, plan.n_frames)
            for k in range(plan.n_frames):
                obs = scenario.observe(period, k, plan.poses)
                conn.send(TOPIC_OBSERVATION, fio.encode_observation(obs))
                requested += 1
                if period > 0 and k + 1 == probe:
                    while decision is None:
                        frame = conn.recv()
                        if frame.topic == TOPIC_REGIONS:
                            regions += decode_regions(frame.payload)[1]
                        elif frame.topic == TOPIC_DECISION:
                            decision = decode_decision(frame.payload)[2]
                    if not decision:
                        break
            conn.send(TOPIC_POSE, struct.pack("<BHII", POSE_END, period, 0, 0))
            while True:
                frame = conn.recv()
                if frame.topic == TOPIC_REGIONS:
                    regions += decode_regions(frame.payload)[1]
                elif frame.topic == TOPIC_METRICS:
                    output = decode_metrics(frame.payload, regions)
                    break
            wall = time.perf_counter() - t0
            report.outputs.append(output)
            report.regions.append(list(output.regions))
            report.periods.append(score_period(cfg, trial, output, requested, wall))
            if output.error:
                break
        conn.send(TOPIC_POSE, bytes([POSE_HELLO]))
    finally:
        conn.close()
    return report
