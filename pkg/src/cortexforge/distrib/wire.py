"""Length-prefixed binary messages between replicas and parameter shards.

Frame: ``u32 payload_length | u8 tag | payload`` (little-endian).  The
length counts the payload only, not the tag.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

FETCH_PARAMS = 0x01
PARAMS_RESPONSE = 0x02
PUSH_GRADS = 0x03
ACK = 0x04

HEADER = struct.Struct("<IB")
MAX_PAYLOAD = 1 << 30


class WireError(ValueError):
    pass


def _tensors_equal(a, b):
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = np.asarray(a[k], dtype="<f4"), np.asarray(b[k], dtype="<f4")
        if x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


@dataclass(eq=False)
class FetchParams:
    shard_id: int
    keys: list = field(default_factory=list)

    def __eq__(self, other):
        return (isinstance(other, FetchParams) and self.shard_id == other.shard_id
                and list(self.keys) == list(other.keys))


@dataclass(eq=False)
class ParamsResponse:
    version: int
    tensors: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, ParamsResponse) and self.version == other.version
                and _tensors_equal(self.tensors, other.tensors))


@dataclass(eq=False)
class PushGrads:
    replica_id: int
    step: int
    tensors: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, PushGrads) and self.replica_id == other.replica_id
                and self.step == other.step and _tensors_equal(self.tensors, other.tensors))


@dataclass
class Ack:
    version: int


def _pack_name(name):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise WireError("name longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def _pack_tensors(tensors):
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0
        parts.append(_pack_name(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode_payload(msg):
    if isinstance(msg, FetchParams):
        body = b"".join(_pack_name(k) for k in msg.keys)
        return FETCH_PARAMS, struct.pack("<II", msg.shard_id, len(msg.keys)) + body
    if isinstance(msg, ParamsResponse):
        return PARAMS_RESPONSE, struct.pack("<Q", msg.version) + _pack_tensors(msg.tensors)
    if isinstance(msg, PushGrads):
        return PUSH_GRADS, struct.pack("<IQ", msg.replica_id, msg.step) + _pack_tensors(msg.tensors)
    if isinstance(msg, Ack):
        return ACK, struct.pack("<Q", msg.version)
    raise WireError(f"cannot encode {type(msg).__name__}")


def encode_message(msg):
    tag, payload = encode_payload(msg)
    return HEADER.pack(len(payload), tag) + payload


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise WireError(f"truncated {what}: expected {n} bytes, "
                            f"got {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def name(self):
        (n,) = self.unpack("<H", "name length")
        try:
            return bytes(self.take(n, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(f"name is not valid UTF-8: {exc}") from None

    def tensors(self):
        (count,) = self.unpack("<I", "tensor count")
        out = {}
        for _ in range(count):
            name = self.name()
            (rank,) = self.unpack("<B", "tensor rank")
            dims = self.unpack(f"<{rank}Q", "tensor dims")
            n = 1
            for d in dims:
                n *= d
            raw = self.take(4 * n, f"tensor {name!r} data")
            out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        return out


def decode_payload(tag, payload):
    r = _Reader(payload)
    if tag == FETCH_PARAMS:
        shard_id, count = r.unpack("<II", "FetchParams header")
        msg = FetchParams(shard_id, [r.name() for _ in range(count)])
    elif tag == PARAMS_RESPONSE:
        (version,) = r.unpack("<Q", "ParamsResponse version")
        msg = ParamsResponse(version, r.tensors())
    elif tag == PUSH_GRADS:
        replica_id, step = r.unpack("<IQ", "PushGrads header")
        msg = PushGrads(replica_id, step, r.tensors())
    elif tag == ACK:
        (version,) = r.unpack("<Q", "Ack version")
        msg = Ack(version)
    else:
        raise WireError(f"unknown message tag 0x{tag:02x}")
    if r.pos != len(r.data):
        raise WireError(f"{len(r.data) - r.pos} trailing bytes after message")
    return msg


def decode_message(frame):
    frame = bytes(frame)
    if len(frame) < HEADER.size:
        raise WireError(f"truncated frame: expected at least {HEADER.size} header bytes, "
                        f"got {len(frame)}")
    length, tag = HEADER.unpack_from(frame)
    actual = len(frame) - HEADER.size
    if actual != length:
        raise WireError(f"truncated frame: expected {length} payload bytes, got {actual}")
    return decode_payload(tag, frame[HEADER.size:])


def _recv_exact(sock, n):
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock):
    header = _recv_exact(sock, HEADER.size)
    length, _ = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise WireError(f"frame payload of {length} bytes exceeds limit")
    return header + _recv_exact(sock, length)


def send_message(sock, msg):
    sock.sendall(encode_message(msg))


def recv_message(sock):
    return decode_message(read_frame(sock))
