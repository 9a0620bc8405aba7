"""Little-endian message framing and message bodies."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from ..exceptions import ProtocolError

PROTOCOL_VERSION = 1
FRAME_HEADER = struct.Struct("<IB")
HELLO_HEAD = struct.Struct("<IQ")
SESSION_BLOCK = struct.Struct("<I8ddII")
POSE_BODY = struct.Struct("<7fI")
DELTA_HEAD = struct.Struct("<II")
ACK_BODY = struct.Struct("<I")
MAX_FRAME = 1 << 30


class MessageType(enum.IntEnum):
    HELLO = 1
    CODEBOOK = 2
    POSE = 3
    DELTA_CUT = 4
    ACK = 5


@dataclass(frozen=True)
class WireMessage:
    type: MessageType
    payload: bytes

    def encode(self) -> bytes:
        return FRAME_HEADER.pack(len(self.payload), int(self.type)) + bytes(self.payload)

    @property
    def frame_size(self) -> int:
        return FRAME_HEADER.size + len(self.payload)


def decode_frame(buf, offset: int = 0) -> tuple[WireMessage, int]:
    """Parse one frame at ``offset``; returns the message and the next offset."""
    view = memoryview(buf)
    if len(view) - offset < FRAME_HEADER.size:
        raise ProtocolError("truncated frame header", offset)
    length, kind = FRAME_HEADER.unpack_from(view, offset)
    try:
        mtype = MessageType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}", offset + 4) from None
    start = offset + FRAME_HEADER.size
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds limit", offset)
    if len(view) - start < length:
        raise ProtocolError(f"frame declares {length} payload bytes, {len(view) - start} available", start)
    return WireMessage(mtype, bytes(view[start: start + length])), start + length


def decode_frames(buf) -> list[WireMessage]:
    out, off = [], 0
    while off < len(buf):
        msg, off = decode_frame(buf, off)
        out.append(msg)
    return out


# ---------------------------------------------------------------------------
# varints


def encode_varints(values) -> bytes:
    """Unsigned LEB128 for each value."""
    v = np.asarray(values, dtype=np.int64).reshape(-1)
    if len(v) == 0:
        return b""
    if v.min() < 0:
        raise ProtocolError("varints are unsigned")
    u = v.astype(np.uint64)
    nbytes = np.ones(len(u), dtype=np.int64)
    for k in range(1, 10):
        nbytes += (u >> np.uint64(7 * k)) > 0
    starts = np.concatenate([[0], np.cumsum(nbytes)[:-1]])
    out = np.zeros(int(nbytes.sum()), dtype=np.uint8)
    for k in range(int(nbytes.max())):
        has = nbytes > k
        byte = (u[has] >> np.uint64(7 * k)) & np.uint64(0x7F)
        more = (nbytes[has] > k + 1).astype(np.uint64) << np.uint64(7)
        out[starts[has] + k] = (byte | more).astype(np.uint8)
    return out.tobytes()


def decode_varints(buf, count: int, offset: int = 0) -> tuple[list[int], int]:
    if count == 0:
        return [], offset
    raw = np.frombuffer(buf, dtype=np.uint8, offset=offset) if offset < len(buf) else np.zeros(0, np.uint8)
    ends = np.flatnonzero((raw & 0x80) == 0)
    if len(ends) < count:
        raise ProtocolError(f"truncated varint block: {len(ends)} of {count} values", len(buf))
    ends = ends[:count]
    used = raw[: ends[-1] + 1]
    starts = np.concatenate([[0], ends[:-1] + 1])
    lengths = ends - starts + 1
    if lengths.max() > 10:
        bad = int(np.argmax(lengths > 10))
        raise ProtocolError("varint too long", offset + int(starts[bad]))
    pos_in = np.arange(len(used)) - np.repeat(starts, lengths)
    parts = (used & 0x7F).astype(np.uint64) << (7 * pos_in).astype(np.uint64)
    vals = np.add.reduceat(parts, starts)
    return vals.astype(np.int64).tolist(), offset + int(ends[-1]) + 1


def encode_id_block(ids) -> bytes:
    """Sorted ids as first value followed by gaps."""
    arr = np.asarray(ids, dtype=np.int64)
    if len(arr) and np.any(np.diff(arr) <= 0):
        raise ProtocolError("id block must be strictly increasing")
    gaps = np.diff(arr, prepend=0) if len(arr) else arr
    return encode_varints(gaps.tolist())


def decode_id_block(buf, count: int, offset: int = 0) -> tuple[np.ndarray, int]:
    gaps, pos = decode_varints(buf, count, offset)
    return np.cumsum(np.asarray(gaps, dtype=np.int64)), pos


def encode_link_block(ids, parents) -> bytes:
    """Count, then (id gap, parent + 1) pairs; parent -1 (the root) is sent as 0."""
    ids = np.asarray(ids, dtype=np.int64)
    parents = np.asarray(parents, dtype=np.int64)
    gaps = np.diff(ids, prepend=0) if len(ids) else ids
    flat = np.empty(2 * len(ids), dtype=np.int64)
    flat[0::2] = gaps
    flat[1::2] = parents + 1
    return encode_varints([len(ids)]) + encode_varints(flat.tolist())


def decode_link_block(buf, offset: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    (count,), pos = decode_varints(buf, 1, offset)
    flat, pos = decode_varints(buf, 2 * count, pos)
    arr = np.asarray(flat, dtype=np.int64).reshape(count, 2) if count else np.zeros((0, 2), dtype=np.int64)
    return np.cumsum(arr[:, 0]), arr[:, 1] - 1, pos


# ---------------------------------------------------------------------------
# message bodies


@dataclass(frozen=True)
class SessionInfo:
    """Constants the cloud announces so the client mirrors its bookkeeping exactly."""

    node_count: int
    quant: bytes
    tau_star: float
    frame_interval: int
    reuse_threshold: int


def hello(scene_hash: int = 0, session: SessionInfo | None = None,
          version: int = PROTOCOL_VERSION) -> WireMessage:
    body = HELLO_HEAD.pack(version, scene_hash)
    if session is not None:
        q = struct.unpack("<8d", session.quant)
        body += SESSION_BLOCK.pack(session.node_count, *q, session.tau_star,
                                   session.frame_interval, session.reuse_threshold)
    return WireMessage(MessageType.HELLO, body)


def parse_hello(payload: bytes) -> tuple[int, int, SessionInfo | None]:
    if len(payload) not in (HELLO_HEAD.size, HELLO_HEAD.size + SESSION_BLOCK.size):
        raise ProtocolError(f"HELLO payload of {len(payload)} bytes", 0)
    version, scene_hash = HELLO_HEAD.unpack_from(payload)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}", 0)
    if len(payload) == HELLO_HEAD.size:
        return version, scene_hash, None
    v = SESSION_BLOCK.unpack_from(payload, HELLO_HEAD.size)
    quant = struct.pack("<8d", *v[1:9])
    return version, scene_hash, SessionInfo(v[0], quant, v[9], v[10], v[11])


def pose_message(position, quaternion, frame_id: int) -> WireMessage:
    return WireMessage(MessageType.POSE, POSE_BODY.pack(*position, *quaternion, frame_id))


def parse_pose(payload: bytes):
    if len(payload) != POSE_BODY.size:
        raise ProtocolError(f"POSE payload must be {POSE_BODY.size} bytes, got {len(payload)}", 0)
    v = POSE_BODY.unpack(payload)
    return np.array(v[0:3]), np.array(v[3:7]), v[7]


def ack_message(round_id: int) -> WireMessage:
    return WireMessage(MessageType.ACK, ACK_BODY.pack(round_id))


def parse_ack(payload: bytes) -> int:
    if len(payload) != ACK_BODY.size:
        raise ProtocolError("ACK payload must be 4 bytes", 0)
    return ACK_BODY.unpack(payload)[0]


@dataclass(frozen=True)
class DeltaCut:
    round_id: int
    cut_ids: np.ndarray
    link_ids: np.ndarray
    link_parents: np.ndarray
    codec_payload: bytes

    def encode(self) -> WireMessage:
        body = (
            DELTA_HEAD.pack(self.round_id, len(self.cut_ids))
            + encode_id_block(self.cut_ids)
            + encode_link_block(self.link_ids, self.link_parents)
            + self.codec_payload
        )
        return WireMessage(MessageType.DELTA_CUT, body)

    @classmethod
    def parse(cls, payload: bytes) -> "DeltaCut":
        if len(payload) < DELTA_HEAD.size:
            raise ProtocolError("truncated DELTA_CUT header", len(payload))
        round_id, count = DELTA_HEAD.unpack_from(payload)
        ids, pos = decode_id_block(payload, count, DELTA_HEAD.size)
        link_ids, link_parents, pos = decode_link_block(payload, pos)
        return cls(round_id, ids, link_ids, link_parents, bytes(payload[pos:]))
