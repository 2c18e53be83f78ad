"""Binary framing for the UI stream.

Every frame is one type byte, a 4-byte little-endian payload length, then
the payload:

    0x01 client->server  pose: dx float32, dy float32, inject uint8
    0x02 server->client  audio: block index uint32, then int16 PCM samples
    0x03 server->client  state snapshot: UTF-8 JSON
    0x04 server->client  error: UTF-8 message
    0x05 client->server  config patch: UTF-8 JSON

All integers and floats are little-endian.  The decoder is incremental and
resynchronizes after garbage by skipping one byte at a time until a
plausible header parses.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = [
    "TYPE_POSE", "TYPE_AUDIO", "TYPE_STATE", "TYPE_ERROR", "TYPE_CONFIG",
    "encode_frame", "FrameDecoder",
    "pack_pose", "unpack_pose", "pack_audio", "unpack_audio",
    "pack_state", "unpack_state", "pack_error",
]

TYPE_POSE = 0x01
TYPE_AUDIO = 0x02
TYPE_STATE = 0x03
TYPE_ERROR = 0x04
TYPE_CONFIG = 0x05

_VALID_TYPES = {TYPE_POSE, TYPE_AUDIO, TYPE_STATE, TYPE_ERROR, TYPE_CONFIG}
MAX_PAYLOAD = 1 << 22  # 4 MiB; anything larger is treated as corruption

_POSE = struct.Struct("<ffB")
_LEN = struct.Struct("<I")


def encode_frame(ftype: int, payload: bytes) -> bytes:
    if ftype not in _VALID_TYPES:
        raise ValueError(f"invalid frame type 0x{ftype:02x}")
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    return bytes([ftype]) + _LEN.pack(len(payload)) + payload


class FrameDecoder:
    """Incremental stream decoder with single-byte resynchronization."""

    def __init__(self):
        self._buf = bytearray()
        self.resyncs = 0

    def feed(self, data: bytes):
        """Consume bytes, yield complete (type, payload) frames."""
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < 5:
                break
            ftype = self._buf[0]
            length = _LEN.unpack_from(self._buf, 1)[0]
            if ftype not in _VALID_TYPES or length > MAX_PAYLOAD:
                del self._buf[0]
                self.resyncs += 1
                continue
            if len(self._buf) < 5 + length:
                break
            payload = bytes(self._buf[5:5 + length])
            del self._buf[:5 + length]
            frames.append((ftype, payload))
        return frames


# -- payload codecs ----------------------------------------------------------

def pack_pose(dx: float, dy: float, inject: bool) -> bytes:
    return _POSE.pack(float(dx), float(dy), 1 if inject else 0)


def unpack_pose(payload: bytes):
    if len(payload) != _POSE.size:
        raise ValueError(f"pose payload must be {_POSE.size} bytes, "
                         f"got {len(payload)}")
    dx, dy, inject = _POSE.unpack(payload)
    return float(dx), float(dy), bool(inject)


def pack_audio(index: int, samples) -> bytes:
    x = np.asarray(samples)
    if x.dtype != np.int16:
        x = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    else:
        x = x.astype("<i2", copy=False)
    return _LEN.pack(int(index) & 0xFFFFFFFF) + x.tobytes()


def unpack_audio(payload: bytes):
    if len(payload) < 4 or (len(payload) - 4) % 2 != 0:
        raise ValueError("malformed audio payload")
    index = _LEN.unpack_from(payload, 0)[0]
    samples = np.frombuffer(payload, dtype="<i2", offset=4)
    return index, samples


def pack_state(state: dict) -> bytes:
    return json.dumps(state, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def unpack_state(payload: bytes) -> dict:
    return json.loads(payload.decode("utf-8"))


def pack_error(message: str) -> bytes:
    return message.encode("utf-8")
