"""Length-prefixed binary framing for the contributor/user protocol.

Frame: ``length u32 BE`` (of type + payload) | ``type u8`` | payload.
Framing integers are big-endian; tensor payloads are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO

import numpy as np

from ..field import DeploymentProfile
from ..tensorio import TensorFormatError, canonical_json, decode_wire_tensor, encode_wire_tensor

MAX_FRAME = 256 * 1024 * 1024
WIRE_MAGIC = b"ZKLW"
WIRE_VERSION = 1


class MsgType(IntEnum):
    HELLO = 0x01
    MANIFEST = 0x02
    ACT_REQUEST = 0x03
    ACT_RESPONSE = 0x04
    PROOF_REQUEST = 0x05
    PROOF_BUNDLE = 0x06
    VERIFY_REPORT = 0x07
    ERROR = 0x7F


class ErrorCode(IntEnum):
    PROTOCOL = 0x0001
    PROFILE_MISMATCH = 0x0002
    UNKNOWN_MODULE = 0x0003
    DIM_MISMATCH = 0x0004
    BUDGET_EXCEEDED = 0x0005
    OVERFLOW_BOUND = 0x0006
    INTERNAL = 0x0007


class Role(IntEnum):
    USER = 0
    CONTRIBUTOR = 1


class ProtocolError(Exception):
    """Local detection of a malformed or out-of-order frame."""

    def __init__(self, message: str, code: ErrorCode = ErrorCode.PROTOCOL):
        super().__init__(message)
        self.code = code


class RemoteError(Exception):
    """The peer answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote error 0x{code:04x}: {message}")
        self.code = code
        self.message = message


def encode_frame(mtype: int, payload: bytes) -> bytes:
    if len(payload) + 1 > MAX_FRAME:
        raise ProtocolError("frame exceeds 256 MiB")
    return struct.pack(">IB", len(payload) + 1, mtype) + payload


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO):
    """Next (type, payload) from a byte stream; None on clean EOF between frames."""
    head = _read_exact(stream, 4)
    if not head:
        return None
    if len(head) < 4:
        raise ProtocolError("truncated length prefix")
    (length,) = struct.unpack(">I", head)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = _read_exact(stream, length)
    if len(body) < length:
        raise ProtocolError("truncated frame")
    return body[0], body[1:]


def split_frame(buf: bytes):
    """Parse exactly one frame occupying all of ``buf``."""
    if len(buf) < 5:
        raise ProtocolError("frame too short")
    (length,) = struct.unpack_from(">I", buf)
    if length < 1 or length > MAX_FRAME or length != len(buf) - 4:
        raise ProtocolError(f"bad frame length {length}")
    return buf[4], buf[5:]


# -- payloads -------------------------------------------------------------------


def _json(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad JSON payload: {e}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("JSON payload is not an object")
    return obj


def _tensor(payload: bytes, offset: int, dtype) -> tuple[np.ndarray, int]:
    try:
        a, off = decode_wire_tensor(payload, offset)
    except (TensorFormatError, ValueError) as e:
        raise ProtocolError(f"bad tensor: {e}") from None
    if a.dtype != dtype:
        raise ProtocolError(f"expected {np.dtype(dtype).name} tensor, got {a.dtype.name}")
    if a.ndim != 2:
        raise ProtocolError("expected a rank-2 tensor")
    return a, off


@dataclass
class Hello:
    TYPE = MsgType.HELLO
    role: Role
    session_id: bytes
    profile: DeploymentProfile
    version: int = WIRE_VERSION

    def encode(self) -> bytes:
        return (WIRE_MAGIC + struct.pack(">HB", self.version, self.role) + self.session_id
                + self.profile.to_json())

    @classmethod
    def decode(cls, payload: bytes) -> "Hello":
        if len(payload) < 23 or payload[:4] != WIRE_MAGIC:
            raise ProtocolError("bad HELLO")
        version, role = struct.unpack_from(">HB", payload, 4)
        if version != WIRE_VERSION:
            raise ProtocolError(f"unsupported wire version {version}")
        try:
            role = Role(role)
            profile = DeploymentProfile.from_json(payload[23:])
        except (ValueError, TypeError, UnicodeDecodeError) as e:
            raise ProtocolError(f"bad HELLO: {e}", ErrorCode.PROFILE_MISMATCH) from None
        return cls(role, payload[7:23], profile, version)


@dataclass
class ManifestMsg:
    """Manifest JSON, public commitments (hex) and the settings timings."""

    TYPE = MsgType.MANIFEST
    body: dict

    def encode(self) -> bytes:
        return canonical_json(self.body)

    @classmethod
    def decode(cls, payload: bytes) -> "ManifestMsg":
        body = _json(payload)
        for k in ("profile_id", "manifest", "commitments"):
            if k not in body:
                raise ProtocolError(f"MANIFEST lacks {k!r}")
        return cls(body)


@dataclass
class ActRequest:
    TYPE = MsgType.ACT_REQUEST
    module_id: int
    x: np.ndarray  # f32, n x m

    def encode(self) -> bytes:
        return struct.pack(">I", self.module_id) + encode_wire_tensor(np.asarray(self.x, np.float32))

    @classmethod
    def decode(cls, payload: bytes) -> "ActRequest":
        if len(payload) < 4:
            raise ProtocolError("truncated ACT_REQUEST")
        (mid,) = struct.unpack_from(">I", payload)
        x, off = _tensor(payload, 4, np.float32)
        if off != len(payload):
            raise ProtocolError("trailing bytes in ACT_REQUEST")
        return cls(mid, x)


@dataclass
class ActResponse:
    TYPE = MsgType.ACT_RESPONSE
    module_id: int
    delta_q: np.ndarray  # i64, d x m, scale S^3
    delta: np.ndarray  # f32 dequantization of delta_q

    def encode(self) -> bytes:
        return (struct.pack(">I", self.module_id) + encode_wire_tensor(np.asarray(self.delta_q, np.int64))
                + encode_wire_tensor(np.asarray(self.delta, np.float32)))

    @classmethod
    def decode(cls, payload: bytes) -> "ActResponse":
        if len(payload) < 4:
            raise ProtocolError("truncated ACT_RESPONSE")
        (mid,) = struct.unpack_from(">I", payload)
        dq, off = _tensor(payload, 4, np.int64)
        df, off = _tensor(payload, off, np.float32)
        if off != len(payload):
            raise ProtocolError("trailing bytes in ACT_RESPONSE")
        if dq.shape != df.shape:
            raise ProtocolError("ACT_RESPONSE tensors disagree in shape")
        return cls(mid, dq, df)


@dataclass
class ProofRequest:
    """Module ids to prove; empty means every module cached this session."""

    TYPE = MsgType.PROOF_REQUEST
    module_ids: list[int] = field(default_factory=list)

    def encode(self) -> bytes:
        return struct.pack(f">I{len(self.module_ids)}I", len(self.module_ids), *self.module_ids)

    @classmethod
    def decode(cls, payload: bytes) -> "ProofRequest":
        if len(payload) < 4:
            raise ProtocolError("truncated PROOF_REQUEST")
        (count,) = struct.unpack_from(">I", payload)
        if len(payload) != 4 + 4 * count:
            raise ProtocolError("PROOF_REQUEST length disagrees with count")
        return cls(list(struct.unpack_from(f">{count}I", payload, 4)))


@dataclass
class ProofBundle:
    """Serialized proof files plus per-module proving times (ms)."""

    TYPE = MsgType.PROOF_BUNDLE
    proofs: list[bytes]
    prove_ms: dict = field(default_factory=dict)

    def encode(self) -> bytes:
        meta = canonical_json({"prove_ms": {str(k): v for k, v in self.prove_ms.items()}})
        parts = [struct.pack(">I", len(meta)), meta, struct.pack(">I", len(self.proofs))]
        for p in self.proofs:
            parts += [struct.pack(">I", len(p)), p]
        return b"".join(parts)

    @classmethod
    def decode(cls, payload: bytes) -> "ProofBundle":
        try:
            (mlen,) = struct.unpack_from(">I", payload)
            if 4 + mlen > len(payload):
                raise ProtocolError("truncated PROOF_BUNDLE metadata")
            meta = _json(payload[4:4 + mlen])
            off = 4 + mlen
            (count,) = struct.unpack_from(">I", payload, off)
            off += 4
            proofs = []
            for _ in range(count):
                (plen,) = struct.unpack_from(">I", payload, off)
                off += 4
                if off + plen > len(payload):
                    raise ProtocolError("truncated proof in PROOF_BUNDLE")
                proofs.append(payload[off:off + plen])
                off += plen
        except struct.error:
            raise ProtocolError("truncated PROOF_BUNDLE") from None
        if off != len(payload):
            raise ProtocolError("trailing bytes in PROOF_BUNDLE")
        prove_ms = meta.get("prove_ms", {})
        if not isinstance(prove_ms, dict):
            raise ProtocolError("bad prove_ms")
        try:
            prove_ms = {int(k): float(v) for k, v in prove_ms.items()}
        except (TypeError, ValueError):
            raise ProtocolError("bad prove_ms") from None
        return cls(proofs, prove_ms)


@dataclass
class VerifyReportMsg:
    TYPE = MsgType.VERIFY_REPORT
    report: dict

    def encode(self) -> bytes:
        return canonical_json(self.report)

    @classmethod
    def decode(cls, payload: bytes) -> "VerifyReportMsg":
        return cls(_json(payload))


@dataclass
class ErrorMsg:
    TYPE = MsgType.ERROR
    code: int
    message: str = ""

    def encode(self) -> bytes:
        return struct.pack(">H", self.code) + self.message.encode("utf-8")[:4096]

    @classmethod
    def decode(cls, payload: bytes) -> "ErrorMsg":
        if len(payload) < 2:
            raise ProtocolError("truncated ERROR")
        (code,) = struct.unpack_from(">H", payload)
        return cls(code, payload[2:].decode("utf-8", "replace"))


_DECODERS = {cls.TYPE: cls for cls in
             (Hello, ManifestMsg, ActRequest, ActResponse, ProofRequest, ProofBundle, VerifyReportMsg, ErrorMsg)}


def encode_message(msg) -> bytes:
    return encode_frame(msg.TYPE, msg.encode())


def decode_message(mtype: int, payload: bytes):
    cls = _DECODERS.get(mtype)
    if cls is None:
        raise ProtocolError(f"unknown message type 0x{mtype:02x}")
    return cls.decode(payload)


def decode_frame(buf: bytes):
    return decode_message(*split_frame(buf))


class Channel:
    """Blocking message channel over a connected socket."""

    def __init__(self, sock):
        self.sock = sock
        self._rfile = sock.makefile("rb")

    def send(self, msg) -> None:
        self.sock.sendall(encode_message(msg))

    def recv(self):
        frame = read_frame(self._rfile)
        if frame is None:
            raise ProtocolError("connection closed by peer")
        return decode_message(*frame)

    def recv_expect(self, cls):
        msg = self.recv()
        if isinstance(msg, ErrorMsg):
            raise RemoteError(msg.code, msg.message)
        if not isinstance(msg, cls):
            raise ProtocolError(f"expected {cls.TYPE.name}, got {msg.TYPE.name}")
        return msg

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self.sock.close()
