"""Live engine: phantom steering over a WebSocket, streamed audio back.

Three roles, matching the offline ordering:

  * analysis thread: paces the phantom at the configured frame rate, runs
    the per-frame analysis, posts (curves, events) to the audio thread and
    a JSON state snapshot to the client;
  * audio thread: renders blocks ahead of the wall clock with a fixed lead,
    applies queued snapshots at block boundaries, streams 0x02 frames;
  * server thread(s): one client at a time, poses and config patches in,
    protocol errors answered with 0x04 frames without dropping the session.

The analysis and audio threads communicate only through bounded deques
(drop-oldest, counted); the audio thread never blocks on the network (sends
are offloaded through a bounded queue too).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from http import HTTPStatus
from pathlib import Path

import numpy as np

import dataclasses as _dc
import gc
import sys

from .. import dynamics
from ..ingest import PhantomControl, new_phantom, phantom_step
from .config import SessionConfig
from .offline import AudioEngine
from .pipeline import AnalysisSession
from .protocol import (TYPE_AUDIO, TYPE_CONFIG, TYPE_ERROR, TYPE_POSE,
                       TYPE_STATE, FrameDecoder, encode_frame, pack_audio,
                       pack_error, pack_state, unpack_pose)

__all__ = ["LiveEngine", "Telemetry", "run_live"]

log = logging.getLogger(__name__)

POSE_STALE_S = 0.2   # heartbeat: older poses idle the phantom


@dataclass
class Telemetry:
    blocks_rendered: int = 0
    events_applied: int = 0
    queue_drops: int = 0
    underruns: int = 0
    frames_analyzed: int = 0
    overruns: int = 0
    send_drops: int = 0
    protocol_errors: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name, amount=1):
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def reset(self):
        with self._lock:
            for k in ("blocks_rendered", "events_applied", "queue_drops",
                      "underruns", "frames_analyzed", "overruns",
                      "send_drops", "protocol_errors"):
                setattr(self, k, 0)

    def snapshot(self) -> dict:
        with self._lock:
            return {k: getattr(self, k) for k in (
                "blocks_rendered", "events_applied", "queue_drops",
                "underruns", "frames_analyzed", "overruns", "send_drops",
                "protocol_errors")}


class _ControlMailbox:
    """Latest pose wins; staleness drives the idle heartbeat."""

    def __init__(self):
        self._lock = threading.Lock()
        self._control = PhantomControl()
        self._stamp = 0.0

    def put(self, dx, dy, inject):
        with self._lock:
            self._control = PhantomControl(dx=dx, dy=dy, inject=inject)
            self._stamp = time.monotonic()

    def get(self):
        with self._lock:
            if time.monotonic() - self._stamp > POSE_STALE_S:
                return PhantomControl(), False
            control = self._control
            # motion deltas are consumed once; inject persists while held
            self._control = PhantomControl(inject=control.inject)
            return control, True


class LiveEngine:
    """Owns the phantom, the analysis session, and the audio clock."""

    def __init__(self, config: SessionConfig, warmup_s=0.25):
        self.cfg = config
        self.telemetry = Telemetry()
        self.mailbox = _ControlMailbox()
        self.session = AnalysisSession(config)
        self.engine = AudioEngine(config)
        # the live loop never serializes images; skip the cosmetic render
        phantom_cfg = _dc.replace(config.phantom_config(), render_images=False)
        self.phantom = new_phantom(seed=config.seed,
                                   tilt=config.phantom.tilt_deg,
                                   config=phantom_cfg)
        self._result_queue = deque(maxlen=8)   # analysis -> audio
        self._send_queue = deque(maxlen=64)    # audio/analysis -> socket
        self._send_event = threading.Event()
        self._client_lock = threading.Lock()
        self._client = None
        self._stop = threading.Event()
        self._threads = []
        self._warmup_s = warmup_s
        self._last_state_json = None
        self._frame_reports = []

    # -- client management --------------------------------------------------

    def attach_client(self, send_callable):
        with self._client_lock:
            self._client = send_callable
        if self._last_state_json is not None:
            self.enqueue_frame(TYPE_STATE, self._last_state_json)

    def detach_client(self, send_callable):
        with self._client_lock:
            if self._client is send_callable:
                self._client = None

    def enqueue_frame(self, ftype, payload):
        if len(self._send_queue) == self._send_queue.maxlen:
            self.telemetry.bump("send_drops")
        self._send_queue.append(encode_frame(ftype, payload))
        self._send_event.set()

    def handle_pose(self, payload):
        dx, dy, inject = unpack_pose(payload)
        self.mailbox.put(dx, dy, inject)

    def handle_config_patch(self, payload):
        from .config import apply_overrides
        patch = json.loads(payload.decode("utf-8"))
        overrides = [f"{k}={json.dumps(v)}" for k, v in patch.items()]
        apply_overrides(self.cfg, overrides)
        self.session.excite_params = self.cfg.excite_params()

    # -- threads --------------------------------------------------------------

    def start(self):
        dynamics.warmup()
        # a full gen2 collection pauses every thread for ~100 ms, blowing the
        # audio lead; freeze the warm heap and defer gen2 while live
        gc.collect()
        gc.freeze()
        self._gc_thresholds = gc.get_threshold()
        gc.set_threshold(self._gc_thresholds[0], self._gc_thresholds[1], 100000)
        self._switch_interval = sys.getswitchinterval()
        sys.setswitchinterval(0.002)
        self._stop.clear()
        for fn, name in ((self._analysis_loop, "analysis"),
                         (self._audio_loop, "audio"),
                         (self._sender_loop, "sender")):
            th = threading.Thread(target=fn, name=f"octsonify-{name}",
                                  daemon=True)
            th.start()
            self._threads.append(th)

    def stop(self):
        self._stop.set()
        self._send_event.set()
        for th in self._threads:
            th.join(timeout=5.0)
        self._threads.clear()
        sys.setswitchinterval(self._switch_interval)
        gc.set_threshold(*self._gc_thresholds)
        gc.unfreeze()
        gc.collect()

    def _analysis_loop(self):
        fps = self.cfg.phantom.fps
        period = 1.0 / fps
        next_tick = time.monotonic()
        budget = self.cfg.runtime.frame_budget_ms
        while not self._stop.is_set():
            start = time.monotonic()
            control, fresh = self.mailbox.get()
            self.phantom, seg, _ = phantom_step(self.phantom, control, period)
            fr = self.session.process(seg)
            if self.engine.session is None:
                self.engine.bind(self.session)
            if len(self._result_queue) == self._result_queue.maxlen:
                self.telemetry.bump("queue_drops")
            self._result_queue.append(fr)
            self.telemetry.bump("frames_analyzed")
            elapsed_ms = (time.monotonic() - start) * 1e3
            if elapsed_ms > budget:
                self.telemetry.bump("overruns")
            self._frame_reports.append(
                {"frame": fr.frame, "t": fr.t, "ms": elapsed_ms,
                 "events": len(fr.events), "overrun": elapsed_ms > budget})
            self._send_state(seg, fr)
            next_tick += period
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_tick = time.monotonic()

    def _send_state(self, seg, fr):
        ds = 4  # lateral downsampling for the wire
        def col(arr):
            return [None if np.isnan(v) else round(float(v), 2)
                    for v in arr[::ds]]
        state = {
            "t": round(fr.t, 4),
            "w": seg.width,
            "h": seg.height,
            "ds": ds,
            "tip": [round(v, 2) for v in fr.tip_raw] if fr.tip_raw else None,
            "ilm": col(seg.ilm),
            "rpe": col(seg.rpe),
            "needle": [[round(float(x), 1), round(float(y), 1)]
                       for x, y in seg.needle_pixels[::ds]],
            "zone": fr.zone,
            "u": round(fr.u, 4),
            "f_ilm": round(fr.f_ilm, 4),
            "conf_ilm": round(fr.c_ilm, 4),
            "conf_rpe": round(fr.c_rpe, 4),
            "crossing": fr.crossing,
            "inject_effective": bool(self.phantom.inject_effective),
            "events": [row[0] for row in fr.event_rows],
            "telemetry": self.telemetry.snapshot(),
        }
        payload = pack_state(state)
        self._last_state_json = payload
        self.enqueue_frame(TYPE_STATE, payload)

    def _audio_loop(self):
        cfg = self.cfg
        block = cfg.audio.block_size
        rate = cfg.audio.rate
        lead = cfg.runtime.buffer_ahead_blocks * block / rate
        # wait for the first analysis result so the lattice exists
        while self.engine.session is None and not self._stop.is_set():
            time.sleep(0.005)
        # the playback clock starts when the first block is delivered
        start = None
        while not self._stop.is_set():
            produced = self.engine.cursor / rate
            if start is None:
                if self.engine.cursor > 0:
                    start = time.monotonic() - block / rate
                elapsed = 0.0
            else:
                elapsed = time.monotonic() - start
            if produced < elapsed:
                self.telemetry.bump("underruns")
            if produced < elapsed + lead:
                while self._result_queue:
                    self.engine.apply_result(self._result_queue.popleft())
                audio_block = self.engine.render_block()
                self.telemetry.bump("blocks_rendered")
                self.enqueue_frame(TYPE_AUDIO,
                                   pack_audio(audio_block.index,
                                              audio_block.samples))
            else:
                time.sleep(block / rate / 4)

    def _sender_loop(self):
        while not self._stop.is_set():
            self._send_event.wait(timeout=0.1)
            self._send_event.clear()
            while self._send_queue:
                frame = self._send_queue.popleft()
                with self._client_lock:
                    client = self._client
                if client is None:
                    continue
                try:
                    client(frame)
                except Exception:
                    self.detach_client(client)

    def frame_report(self) -> list:
        return list(self._frame_reports)


# ---------------------------------------------------------------------------
# WebSocket server
# ---------------------------------------------------------------------------

def _static_handler(root: Path):
    types = {".html": "text/html", ".js": "text/javascript",
             ".css": "text/css", ".map": "application/json",
             ".png": "image/png"}

    def process_request(connection, request):
        if request.path == "/ws":
            return None  # continue with the websocket handshake
        rel = request.path.lstrip("/").split("?")[0] or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())) \
                or not target.is_file():
            return connection.respond(HTTPStatus.NOT_FOUND, "not found\n")
        body = target.read_bytes()
        response = connection.respond(HTTPStatus.OK, "")
        response.body = body
        response.headers["Content-Type"] = types.get(target.suffix,
                                                     "application/octet-stream")
        response.headers["Content-Length"] = str(len(body))
        return response

    return process_request


def run_live(config: SessionConfig, host="127.0.0.1", port=8765,
             static_root=None, ready_callback=None, stop_event=None):
    """Serve the streaming protocol until interrupted.

    The client speaks the binary framing inside WebSocket binary messages.
    ``ready_callback`` fires once the socket is listening (used by tests);
    ``stop_event`` allows an external shutdown.
    """
    from websockets.sync.server import serve

    engine = LiveEngine(config)
    engine.start()
    stop_event = stop_event or threading.Event()

    def handler(connection):
        decoder = FrameDecoder()
        send_lock = threading.Lock()

        def send(frame_bytes):
            with send_lock:
                connection.send(frame_bytes)

        engine.attach_client(send)
        try:
            for message in connection:
                if isinstance(message, str):
                    engine.telemetry.bump("protocol_errors")
                    send(encode_frame(TYPE_ERROR,
                                      pack_error("binary frames expected")))
                    continue
                before = decoder.resyncs
                for ftype, payload in decoder.feed(message):
                    try:
                        if ftype == TYPE_POSE:
                            engine.handle_pose(payload)
                        elif ftype == TYPE_CONFIG:
                            engine.handle_config_patch(payload)
                        else:
                            raise ValueError(
                                f"unexpected client frame 0x{ftype:02x}")
                    except Exception as exc:
                        engine.telemetry.bump("protocol_errors")
                        send(encode_frame(TYPE_ERROR, pack_error(str(exc))))
                if decoder.resyncs > before:
                    engine.telemetry.bump("protocol_errors")
                    send(encode_frame(TYPE_ERROR,
                                      pack_error("frame resync required")))
        finally:
            engine.detach_client(send)

    root = Path(static_root) if static_root else None
    process_request = _static_handler(root) if root else None
    with serve(handler, host, port, process_request=process_request) as server:
        acceptor = threading.Thread(target=server.serve_forever, daemon=True)
        acceptor.start()
        if ready_callback:
            ready_callback(engine, server)
        try:
            while not stop_event.is_set():
                time.sleep(0.05)
        except KeyboardInterrupt:
            pass
        finally:
            server.shutdown()
            engine.stop()
            acceptor.join(timeout=5.0)
    return engine
