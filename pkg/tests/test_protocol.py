import json
import os
import struct

import numpy as np
import pytest

from octsonify.runtime.protocol import (
    TYPE_AUDIO,
    TYPE_CONFIG,
    TYPE_ERROR,
    TYPE_POSE,
    TYPE_STATE,
    FrameDecoder,
    encode_frame,
    pack_audio,
    pack_error,
    pack_pose,
    pack_state,
    unpack_audio,
    unpack_pose,
    unpack_state,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures", "protocol")


def fixture(name):
    with open(os.path.join(FIXTURES, name), "rb") as f:
        return f.read()


def manifest():
    with open(os.path.join(FIXTURES, "manifest.json")) as f:
        return json.load(f)


class TestFraming:
    def test_header_layout(self):
        frame = encode_frame(TYPE_POSE, b"abc")
        assert frame[0] == TYPE_POSE
        assert struct.unpack("<I", frame[1:5])[0] == 3
        assert frame[5:] == b"abc"

    def test_invalid_type_rejected(self):
        with pytest.raises(ValueError):
            encode_frame(0x77, b"")

    def test_decoder_round_trip(self):
        dec = FrameDecoder()
        frames = dec.feed(encode_frame(TYPE_ERROR, b"x") +
                          encode_frame(TYPE_STATE, b"{}"))
        assert frames == [(TYPE_ERROR, b"x"), (TYPE_STATE, b"{}")]

    def test_decoder_handles_partial_delivery(self):
        data = encode_frame(TYPE_AUDIO, pack_audio(3, np.zeros(16, np.int16)))
        dec = FrameDecoder()
        out = []
        for i in range(len(data)):
            out.extend(dec.feed(data[i:i + 1]))
        assert len(out) == 1
        index, samples = unpack_audio(out[0][1])
        assert index == 3 and samples.size == 16

    def test_resync_after_garbage(self):
        good = encode_frame(TYPE_POSE, pack_pose(1.0, 2.0, False))
        dec = FrameDecoder()
        frames = dec.feed(b"\x99\xfe\x07" + good + b"\x00" + good)
        assert len(frames) == 2
        assert dec.resyncs > 0

    def test_oversized_length_treated_as_garbage(self):
        bogus = bytes([TYPE_POSE]) + struct.pack("<I", 1 << 30) + b"xx"
        good = encode_frame(TYPE_ERROR, b"ok")
        dec = FrameDecoder()
        frames = dec.feed(bogus + good)
        assert frames == [(TYPE_ERROR, b"ok")]


class TestCodecs:
    def test_pose_round_trip(self):
        dx, dy, inject = unpack_pose(pack_pose(1.5, -2.0, True))
        assert (dx, dy, inject) == (1.5, -2.0, True)

    def test_pose_payload_is_nine_bytes(self):
        assert len(pack_pose(0, 0, False)) == 9

    def test_pose_wrong_size_rejected(self):
        with pytest.raises(ValueError):
            unpack_pose(b"\x00" * 8)

    def test_audio_round_trip_int16(self):
        samples = np.array([0, 1, -1, 32767, -32768], dtype=np.int16)
        index, back = unpack_audio(pack_audio(9, samples))
        assert index == 9
        np.testing.assert_array_equal(back, samples)

    def test_audio_from_float_quantizes(self):
        index, back = unpack_audio(pack_audio(0, np.array([1.0, -1.0, 0.0])))
        assert back[0] == 32767 and back[1] == -32767 and back[2] == 0

    def test_state_round_trip(self):
        state = {"t": 0.5, "zone": "vitreous", "tip": [1.0, 2.0]}
        assert unpack_state(pack_state(state)) == state


class TestGoldenFixtures:
    """The byte-exact contract shared with the browser client."""

    def test_pose_fixture(self):
        m = manifest()["pose"]
        data = fixture("pose.bin")
        assert len(data) == m["frame_bytes"]
        regenerated = encode_frame(TYPE_POSE,
                                   pack_pose(m["dx"], m["dy"], m["inject"]))
        assert data == regenerated
        dec = FrameDecoder()
        (ftype, payload), = dec.feed(data)
        assert ftype == TYPE_POSE
        assert unpack_pose(payload) == (m["dx"], m["dy"], bool(m["inject"]))

    def test_audio_fixture(self):
        m = manifest()["audio"]
        data = fixture("audio.bin")
        regenerated = encode_frame(
            TYPE_AUDIO, pack_audio(m["index"],
                                   np.array(m["samples"], dtype=np.int16)))
        assert data == regenerated
        (ftype, payload), = FrameDecoder().feed(data)
        index, samples = unpack_audio(payload)
        assert index == m["index"]
        assert samples.tolist() == m["samples"]

    def test_state_fixture(self):
        m = manifest()["state"]
        (ftype, payload), = FrameDecoder().feed(fixture("state.bin"))
        assert ftype == TYPE_STATE
        assert unpack_state(payload) == m

    def test_error_fixture(self):
        (ftype, payload), = FrameDecoder().feed(fixture("error.bin"))
        assert ftype == TYPE_ERROR
        assert payload.decode() == manifest()["error"]["message"]

    def test_stream_fixture_resyncs(self):
        m = manifest()["stream"]
        dec = FrameDecoder()
        frames = dec.feed(fixture("stream.bin"))
        assert [f for f, _ in frames] == [TYPE_POSE, TYPE_AUDIO]
        assert dec.resyncs >= m["garbage_bytes"]
