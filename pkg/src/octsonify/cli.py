"""Command line interface.

Verbs:
    phantom      generate a synthetic injection sequence
    sonify       render a sequence offline (proposed or baseline method)
    live         start the interactive streaming server
    bench        per-stage timing over recorded sequences
    spectrogram  CSV (and best-effort PNG) from a WAV file

Config values load from --config (JSON) and individual --set overrides.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import OctSonifyError
from .runtime.config import apply_overrides, load_config, save_config


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, help="override the session seed")


def _config_from(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "method", None):
        cfg.method = args.method
    return apply_overrides(cfg, args.overrides)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="octsonify",
        description="Physics-based sonification of retinal segmentation streams")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic sequence")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--script", choices=["bleb", "sweep", "idle"])
    p.add_argument("--frames", type=int)
    p.add_argument("--tilt", type=float)
    p.add_argument("--images", action="store_true", help="also write PGM images")

    p = sub.add_parser("sonify", help="render a sequence offline")
    _add_common(p)
    p.add_argument("--seq", required=True, help="sequence .jsonl file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", choices=["proposed", "baseline"])
    p.add_argument("--split", type=float,
                   help="compute the broadband onset metric at this time")

    p = sub.add_parser("live", help="interactive streaming server")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--method", choices=["proposed", "baseline"])
    p.add_argument("--static", help="directory with the browser UI build")

    p = sub.add_parser("bench", help="time the analysis pipeline")
    _add_common(p)
    p.add_argument("--seq", action="append", required=True,
                   help="sequence file, repeatable")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", help="write the summary CSV here")

    p = sub.add_parser("spectrogram", help="analyze a WAV file")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--png", help="optional PNG output path")
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--hop", type=int, default=256)

    p = sub.add_parser("config", help="print the effective configuration")
    _add_common(p)
    p.add_argument("--out", help="write the config JSON here")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except OctSonifyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args):
    if args.verb == "phantom":
        from .runtime.sequences import generate_phantom_sequence
        cfg = _config_from(args)
        if args.script:
            cfg.phantom.script = args.script
        if args.frames:
            cfg.phantom.frames = args.frames
        if args.tilt is not None:
            cfg.phantom.tilt_deg = args.tilt
        path, meta = generate_phantom_sequence(cfg, args.out,
                                               write_images=args.images)
        print(f"wrote {path} ({meta['frames']} frames, "
              f"bleb onset {meta['bleb_onset_t']})")
        return 0

    if args.verb == "sonify":
        from .runtime.offline import run_offline
        cfg = _config_from(args)
        res = run_offline(cfg, args.seq, args.out,
                          spectrogram_split=args.split)
        print(f"wrote {res.wav_path}: {res.duration_s:.2f}s, "
              f"{res.n_events} events")
        if res.onset_metric is not None:
            print(f"broadband onset metric: {res.onset_metric:+.2f} dB")
        return 0

    if args.verb == "live":
        from .runtime.live import run_live
        cfg = _config_from(args)
        print(f"listening on ws://{args.host}:{args.port}/ws")
        engine = run_live(cfg, host=args.host, port=args.port,
                          static_root=args.static)
        print(json.dumps(engine.telemetry.snapshot(), indent=2))
        return 0

    if args.verb == "bench":
        from .runtime.bench import bench
        cfg = _config_from(args)
        result = bench(cfg, args.seq, repeats=args.repeats)
        print(f"{'stage':<16}{'mean ms':>10}{'sd ms':>10}")
        for stage, mean, sd in result.summary_rows():
            print(f"{stage:<16}{mean:>10}{sd:>10}")
        budget = cfg.runtime.frame_budget_ms
        import statistics
        analysis = statistics.fmean(result.analysis_ms())
        print(f"analysis mean {analysis:.3f} ms vs budget {budget:.1f} ms: "
              f"{'OK' if analysis <= budget else 'OVER'}")
        if args.out:
            result.write_csv(args.out)
        return 0

    if args.verb == "spectrogram":
        from .render import (read_wav, save_spectrogram_csv,
                             save_spectrogram_png, spectrogram)
        samples, rate = read_wav(args.wav)
        spec = spectrogram(samples, window=args.window, hop=args.hop,
                           rate=rate)
        save_spectrogram_csv(spec, args.out)
        if args.png:
            save_spectrogram_png(spec, args.png)
        print(f"wrote {args.out} ({spec.db.shape[0]} frames)")
        return 0

    if args.verb == "config":
        cfg = _config_from(args)
        from .runtime.config import serialize
        text = serialize(cfg)
        if args.out:
            save_config(cfg, args.out)
        print(text, end="")
        return 0

    raise AssertionError(f"unhandled verb {args.verb}")


if __name__ == "__main__":
    sys.exit(main())
