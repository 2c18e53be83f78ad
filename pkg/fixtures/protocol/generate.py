"""Regenerate the golden protocol fixtures.

These bytes are the shared wire contract between the engine and the browser
client; both test suites parse the same files.  Rerun only when the protocol
changes, and commit the result.
"""

import json
import os
import struct

import numpy as np

from octsonify.runtime.protocol import (TYPE_AUDIO, TYPE_CONFIG, TYPE_ERROR,
                                        TYPE_POSE, TYPE_STATE, encode_frame,
                                        pack_audio, pack_error, pack_pose,
                                        pack_state)

HERE = os.path.dirname(os.path.abspath(__file__))

STATE = {
    "t": 1.25,
    "w": 512,
    "h": 512,
    "ds": 4,
    "tip": [256.0, 230.5],
    "zone": "intraretinal",
    "u": 0.42,
    "f_ilm": 1.5,
    "conf_ilm": 0.9,
    "conf_rpe": 0.8,
}

AUDIO_SAMPLES = [0, 1000, -1000, 32767, -32768, 12345, -12345, 1]


def main():
    fixtures = {
        "pose.bin": encode_frame(TYPE_POSE, pack_pose(1.5, -2.0, True)),
        "audio.bin": encode_frame(
            TYPE_AUDIO, pack_audio(7, np.array(AUDIO_SAMPLES, dtype=np.int16))),
        "state.bin": encode_frame(TYPE_STATE, pack_state(STATE)),
        "error.bin": encode_frame(TYPE_ERROR, pack_error("bad frame")),
        "config.bin": encode_frame(
            TYPE_CONFIG, json.dumps({"excite.f_min": 0.3},
                                    separators=(",", ":")).encode()),
    }
    # a stream with garbage requiring resynchronization between frames
    stream = (fixtures["pose.bin"] + b"\xff\x00\x99" + fixtures["audio.bin"]
              + fixtures["state.bin"][:3])  # trailing truncated frame
    fixtures["stream.bin"] = stream

    manifest = {
        "pose": {"dx": 1.5, "dy": -2.0, "inject": 1,
                 "payload_bytes": 9, "frame_bytes": 14},
        "audio": {"index": 7, "samples": AUDIO_SAMPLES},
        "state": STATE,
        "error": {"message": "bad frame"},
        "config": {"patch": {"excite.f_min": 0.3}},
        "stream": {"complete_frames": ["pose", "audio"],
                   "garbage_bytes": 3},
        "framing": {"header": "1 byte type + uint32le payload length",
                    "types": {"pose": 1, "audio": 2, "state": 3,
                              "error": 4, "config": 5}},
    }
    for name, data in fixtures.items():
        with open(os.path.join(HERE, name), "wb") as f:
            f.write(data)
    with open(os.path.join(HERE, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(fixtures)} fixtures to {HERE}")


if __name__ == "__main__":
    main()
