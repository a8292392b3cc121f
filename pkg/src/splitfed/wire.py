"""Binary message codec shared by both transports.

Frame layout: 4-byte big-endian total length (of everything after the
length field), 1-byte message type, 4-byte BE round, 4-byte BE client
id, then zero or more tensor records. A record is: name length (BE4),
name bytes, rank (BE4), dims (BE4 each), values (float64 LE each) --
the same record layout the checkpoint files use.

Records whose names start with "_" are auxiliary (labels, sample
counts, per-client accuracy echoes); they ride the same frames but are
excluded from the element counters that the communication-cost
comparison reads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadType, LengthMismatch, PayloadTooLarge, Truncated

MSG_SMASHED = 1
MSG_SMASHED_GRAD = 2
MSG_CLIENT_UPDATE = 3
MSG_GLOBAL_MODEL = 4
MSG_CONTROL = 5

MSG_NAMES = {
    MSG_SMASHED: "SMASHED",
    MSG_SMASHED_GRAD: "SMASHED_GRAD",
    MSG_CLIENT_UPDATE: "CLIENT_UPDATE",
    MSG_GLOBAL_MODEL: "GLOBAL_MODEL",
    MSG_CONTROL: "CONTROL",
}

NO_CLIENT = 0xFFFFFFFF
MAX_FRAME = 2**31 - 1


@dataclass
class WireMessage:
    msg_type: int
    round: int
    client_id: int
    records: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def get(self, name: str) -> np.ndarray:
        for rec_name, value in self.records:
            if rec_name == name:
                return value
        raise KeyError(name)

    def counted_elements(self) -> int:
        return sum(v.size for n, v in self.records if not n.startswith("_"))

    def aux_elements(self) -> int:
        return sum(v.size for n, v in self.records if n.startswith("_"))


def pack_record(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack(">I", len(raw)), raw, struct.pack(">I", value.ndim)]
    for dim in value.shape:
        parts.append(struct.pack(">I", dim))
    parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack_records(blob: bytes) -> list[tuple[str, np.ndarray]]:
    records = []
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise Truncated("record ends early")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    while offset < len(blob):
        (name_len,) = struct.unpack(">I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack(">I", take(4))
        dims = tuple(struct.unpack(">I", take(4))[0] for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(take(count * 8), dtype="<f8").reshape(dims)
        records.append((name, np.ascontiguousarray(values, dtype=np.float64)))
    return records


def record_size(name: str, value: np.ndarray) -> int:
    return 4 + len(name.encode("utf-8")) + 4 + 4 * value.ndim + 8 * value.size


def encode(msg: WireMessage) -> bytes:
    if msg.msg_type not in MSG_NAMES:
        raise BadType(f"message type {msg.msg_type}")
    total = 1 + 4 + 4 + sum(record_size(n, v) for n, v in msg.records)
    if total > MAX_FRAME:
        raise PayloadTooLarge(f"frame of {total} bytes exceeds {MAX_FRAME}")
    payload = b"".join(pack_record(n, v) for n, v in msg.records)
    return (
        struct.pack(">I", total)
        + struct.pack("B", msg.msg_type)
        + struct.pack(">I", msg.round)
        + struct.pack(">I", msg.client_id)
        + payload
    )


def decode(frame: bytes) -> WireMessage:
    if len(frame) < 4:
        raise Truncated("frame shorter than the length field")
    (total,) = struct.unpack(">I", frame[:4])
    if len(frame) - 4 < total:
        raise Truncated(f"length field says {total}, only {len(frame) - 4} bytes follow")
    if len(frame) - 4 > total:
        raise LengthMismatch(f"length field says {total}, {len(frame) - 4} bytes follow")
    if total < 9:
        raise Truncated("frame too short for its header")
    msg_type = frame[4]
    if msg_type not in MSG_NAMES:
        raise BadType(f"message type byte {msg_type}")
    (rnd,) = struct.unpack(">I", frame[5:9])
    (client_id,) = struct.unpack(">I", frame[9:13])
    return WireMessage(msg_type, rnd, client_id, unpack_records(frame[13:]))
