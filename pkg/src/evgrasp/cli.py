"""Command-line front end: ``evgrasp <subcommand> ...``.

Every subcommand writes its outputs into a directory together with a
``manifest.json`` recording the resolved configuration.  Option values come
from built-in defaults, then ``--config`` (JSON), then explicit flags.

Exit codes: 0 success, 1 finished with warnings, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .annotation import (
    AnnotationError, Label, estimate_map, propagate_rects, quad_from_markers, quad_to_rect,
    read_annotations, smooth_tracks, write_annotations,
)
from .encoders import ENCODERS, LifConfig, encode_frequency, encode_lif, encode_sae, iter_windows, merge, save_frame
from .events import ConfigError, read_events, write_events
from .metrics import EvalConfig, SplitSpec, build_samples, evaluate, read_ground_truth, read_predictions, write_report
from .smp_filter import (
    DEFAULT_PERIODS_US, LOG_COLUMNS, SMPTracker, log_to_trajectory, read_track_log, write_track_log,
)
from .synth import BENCHMARK_PROFILES, SyntheticScene, benchmark_scene, generate, interval_histogram

EXIT_OK, EXIT_DEGRADED, EXIT_ERROR = 0, 1, 2
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    inputs: list
    config: dict
    overrides: dict
    seed: int
    version: str = __version__
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


# ---------------------------------------------------------------------------
# option tables: name -> (default, type, help)

_TRACK_OPTS = {
    "alpha": (1.0, float, "spatial evidence weight (0 = temporal-only baseline)"),
    "particles": (1000, int, "particles per marker"),
    "periods_us": (list(DEFAULT_PERIODS_US), None, "comma-separated marker periods (us)"),
    "period_sigma_us": (100.0, float, "period spread (us)"),
    "sigma_px": (2.0, float, "random-walk step (px)"),
    "reselect_threshold": (None, float, "evidence sum triggering reselection"),
    "resample_threshold": (0.5, float, "resample when N_eff < this fraction of particles"),
    "min_events": (3, int, "raw events a pixel needs to carry evidence"),
    "window_us": (10_000, int, "evidence window (us)"),
    "step_us": (1_000, int, "cycle step (us)"),
}

OPTIONS: dict[str, dict[str, tuple]] = {
    "synth": {
        "profile": (None, str, f"benchmark profile instead of a scene file {BENCHMARK_PROFILES}"),
        "duration_us": (10_000_000, int, "benchmark duration (us), with --profile"),
        "format": ("csv", str, "event file format: csv or bin"),
    },
    "track": dict(_TRACK_OPTS),
    "encode": {
        "method": ("freq", str, "encoder: freq, sae, lif or merged"),
        "window_us": (20_000, int, "window length (us)"),
        "step_us": (None, int, "window step (us); defaults to the window length"),
        "start_us": (0, int, "first window start (us)"),
        "stop_us": (None, int, "stop before this time (us)"),
        "lif_step": (1.0, float, "LIF potential increase per event"),
        "lif_decay": (0.1, float, "LIF leak per ms"),
        "lif_threshold": (1.5, float, "LIF firing threshold"),
    },
    "annotate": {
        "seed_rects": (None, str, "JSON-lines rectangles of the first frame (homography mode)"),
        "label": ("GOOD", str, "label of per-cycle rectangles: GOOD or BAD"),
        "smooth": (False, bool, "smooth marker tracks before annotating"),
        "every": (1, int, "annotate every n-th cycle"),
        **_TRACK_OPTS,
    },
    "eval": {
        "split": ("image", str, "image or object"),
        "test_fraction": (1.0, float, "fraction of samples evaluated"),
        "jaccard": (0.25, float, "Jaccard threshold (strictly greater)"),
        "angle": (30.0, float, "angle threshold in degrees (strictly less)"),
    },
    "histogram": {
        "bin_width_us": (50.0, float, "bin width (us)"),
        "max_interval_us": (10_000.0, float, "largest interval binned (us)"),
    },
}


def _parse_periods(v) -> list:
    if isinstance(v, str):
        v = [p for p in v.split(",") if p.strip()]
    return [float(p) for p in v]


def _add_options(p: argparse.ArgumentParser, table: dict) -> None:
    for name, (default, typ, help_) in table.items():
        flag = "--" + name.replace("_", "-")
        if typ is bool:
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=help_)
        else:
            p.add_argument(flag, dest=name, type=typ or str, default=None,
                           help=f"{help_} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
        g.add_argument("--config", default=default, help="JSON file of option defaults; flags win")
        g.add_argument("--threads", type=int, default=default, help="worker threads (default 1)")
        return g

    # accepted before or after the subcommand; the subcommand copy must not
    # clobber a value given before it
    common = globals_(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="evgrasp", description=__doc__.splitlines()[0],
                                     parents=[globals_(None)])
    parser.add_argument("--version", action="version", version=f"evgrasp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic LED event stream")
    p.add_argument("scene", nargs="?", help="scene JSON file")
    p.add_argument("out", help="output directory")
    _add_options(p, OPTIONS["synth"])

    p = sub.add_parser("track", parents=[common], help="track the markers through an event file")
    p.add_argument("events")
    p.add_argument("out")
    _add_options(p, OPTIONS["track"])

    p = sub.add_parser("encode", parents=[common], help="encode event windows as frames")
    p.add_argument("events")
    p.add_argument("out")
    _add_options(p, OPTIONS["encode"])

    p = sub.add_parser("annotate", parents=[common], help="grasp rectangles from a track log or events")
    p.add_argument("source", help="track log CSV, or an event file to track first")
    p.add_argument("out")
    _add_options(p, OPTIONS["annotate"])

    p = sub.add_parser("eval", parents=[common], help="rectangle-metric accuracy report")
    p.add_argument("predictions")
    p.add_argument("annotations")
    p.add_argument("out")
    _add_options(p, OPTIONS["eval"])

    p = sub.add_parser("histogram", parents=[common], help="transition-interval histogram")
    p.add_argument("events")
    p.add_argument("out")
    _add_options(p, OPTIONS["histogram"])
    return parser


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a JSON object")
    # a manifest can be fed back as a config
    if "subcommand" in cfg and isinstance(cfg.get("config"), dict):
        return {cfg["subcommand"]: cfg["config"], "seed": cfg.get("seed")}
    return cfg


def resolve(command: str, args: argparse.Namespace) -> tuple[dict, dict, int, int]:
    """Merge defaults, config file and flags.

    Returns ``(options, explicit_flags, seed, threads)``.
    """
    file_cfg = _load_config(args.config)
    section = file_cfg.get(command, {})
    table = OPTIONS[command]
    unknown = set(section) - set(table)
    if unknown:
        raise UsageError(f"unknown {command} option(s) in config: {sorted(unknown)}")
    opts, explicit = {}, {}
    for name, (default, typ, _) in table.items():
        v = getattr(args, name, None)
        if v is not None:
            explicit[name] = v
        elif name in section:
            v = section[name]
        elif name in file_cfg:
            v = file_cfg[name]
        else:
            v = default
        opts[name] = v
    if "periods_us" in opts:
        opts["periods_us"] = _parse_periods(opts["periods_us"])
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    threads = args.threads if args.threads is not None else file_cfg.get("threads", 1)
    if args.seed is not None:
        explicit["seed"] = args.seed
    return opts, explicit, int(seed) if seed is not None else 0, max(1, int(threads))


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _tracker(opts: dict, seed: int) -> SMPTracker:
    return SMPTracker(
        periods_us=tuple(opts["periods_us"]), period_sigma_us=opts["period_sigma_us"],
        alpha=opts["alpha"], proposal_sigma=opts["sigma_px"],
        reselect_threshold=opts["reselect_threshold"],
        resample_threshold=opts["resample_threshold"], min_events_per_pixel=opts["min_events"],
        n_particles=opts["particles"], window_us=opts["window_us"], step_us=opts["step_us"],
        random_state=seed,
    )


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs)


def cmd_synth(args, opts, seed, threads, out_dir):
    if args.scene:
        scene = SyntheticScene.load(args.scene)
        if args.seed is not None:
            scene.seed = seed
        inputs = [args.scene]
    elif opts["profile"]:
        scene = benchmark_scene(opts["profile"], seed, int(opts["duration_us"]))
        inputs = []
    else:
        raise UsageError("synth needs a scene file or --profile")
    if opts["format"] not in ("csv", "bin"):
        raise UsageError("--format must be csv or bin")
    events, gt = generate(scene)
    ev_name = f"events.{opts['format']}"
    write_events(os.path.join(out_dir, ev_name), events, opts["format"])
    gt.write_csv(os.path.join(out_dir, "ground_truth.csv"))
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"{len(events)} events, {len(gt.times)} ground-truth samples -> {out_dir}")
    return inputs, [ev_name, "ground_truth.csv", "scene.json"]


def cmd_track(args, opts, seed, threads, out_dir):
    events = read_events(args.events)
    tracker = _tracker(opts, seed).fit(events)
    write_track_log(os.path.join(out_dir, "track.csv"), tracker.track_log())
    n_deg = int(tracker.degenerate_.sum())
    if n_deg:
        warnings.warn(f"{n_deg} marker-cycles had all-zero weights (reset to uniform)")
    print(f"{tracker.trajectory_.shape[0]} cycles x {tracker.trajectory_.shape[1]} markers -> {out_dir}")
    return [args.events], ["track.csv"]


def _encode_window(method: str, lif: LifConfig, window_us: int):
    def run(item):
        start, ev = item
        if method == "freq":
            return encode_frequency(ev, start, window_us)
        if method == "sae":
            return encode_sae(ev, start, window_us)
        if method == "lif":
            return encode_lif(ev, lif, start, window_us)
        return merge(encode_frequency(ev, start, window_us), encode_sae(ev, start, window_us),
                     encode_lif(ev, lif, start, window_us))
    return run


def cmd_encode(args, opts, seed, threads, out_dir):
    method = opts["method"]
    if method not in ENCODERS:
        raise UsageError(f"unknown method {method!r}; choose from {sorted(ENCODERS)}")
    window = int(opts["window_us"])
    step = int(opts["step_us"]) if opts["step_us"] is not None else window
    if step > window:
        raise UsageError(f"step {step} us exceeds window {window} us")
    lif = LifConfig(opts["lif_step"], opts["lif_decay"], opts["lif_threshold"])
    events = read_events(args.events)
    start = int(opts["start_us"])
    stop = opts["stop_us"]
    if stop is None and len(events) == 0:
        stop = start + window
    items = list(iter_windows(events, window, step, start, stop))
    run = _encode_window(method, lif, window)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            frames = list(pool.map(run, items))
    else:
        frames = [run(it) for it in items]
    names = [save_frame(out_dir, f) for f in frames]
    print(f"{len(names)} {method} frames -> {out_dir}")
    return [args.events], names


def _is_track_log(path: str) -> bool:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii", "replace").strip()
    return head.split(",") == LOG_COLUMNS


def cmd_annotate(args, opts, seed, threads, out_dir):
    if _is_track_log(args.source):
        times, ids, pos = log_to_trajectory(read_track_log(args.source))
    else:
        tracker = _tracker(opts, seed).fit(read_events(args.source))
        times, pos = tracker.cycle_times_, tracker.trajectory_
        ids = np.array([m.id for m in tracker.markers_])
    if len(ids) != 4:
        raise UsageError(f"annotation needs exactly 4 markers, got {len(ids)}")
    if opts["smooth"]:
        pos = smooth_tracks(pos, seed=seed)
    every = max(1, int(opts["every"]))
    keep = np.arange(0, len(times), every)
    label = Label(opts["label"])
    rects, skipped = [], 0
    inputs = [args.source]
    if opts["seed_rects"]:
        inputs.append(opts["seed_rects"])
        seeds = read_annotations(opts["seed_rects"])
        if not seeds:
            raise UsageError("seed rectangle file is empty")
        t0 = seeds[0].t
        k0 = min(int(np.searchsorted(times, t0)), len(times) - 1)
        ref = pos[k0]
        for k in keep:
            try:
                G = estimate_map(ref, pos[k])
                rects.extend(propagate_rects(seeds, G, t=int(times[k])))
            except AnnotationError as exc:
                skipped += 1
                warnings.warn(f"cycle at {int(times[k])} us skipped: {exc}")
    else:
        for k in keep:
            try:
                q = quad_from_markers(pos[k], label, int(times[k]))
                rects.append(quad_to_rect(q))
            except AnnotationError as exc:
                skipped += 1
                warnings.warn(f"cycle at {int(times[k])} us skipped: {exc}")
    write_annotations(os.path.join(out_dir, "annotations.jsonl"), rects)
    print(f"{len(rects)} rectangles ({skipped} cycles skipped) -> {out_dir}")
    return inputs, ["annotations.jsonl"]


def cmd_eval(args, opts, seed, threads, out_dir):
    mode = {"image": "IMAGE_WISE", "object": "OBJECT_WISE"}.get(opts["split"])
    if mode is None:
        raise UsageError("--split must be image or object")
    split = SplitSpec(mode, float(opts["test_fraction"]), seed)
    cfg = EvalConfig(float(opts["jaccard"]), float(opts["angle"]))
    samples = build_samples(read_predictions(args.predictions), read_ground_truth(args.annotations))
    report = evaluate(samples, split, cfg)
    write_report(os.path.join(out_dir, "report.json"), report)
    print(f"accuracy {report['accuracy']:.4f} on {report['n_test']} test samples -> {out_dir}")
    return [args.predictions, args.annotations], ["report.json"]


def cmd_histogram(args, opts, seed, threads, out_dir):
    events = read_events(args.events)
    hist = interval_histogram(events, float(opts["bin_width_us"]), float(opts["max_interval_us"]))
    hist.write_csv(os.path.join(out_dir, "histogram.csv"))
    modes = hist.modes(4)
    print("modes (us): " + ", ".join(f"{m:g}" for m in modes))
    return [args.events], ["histogram.csv"]


COMMANDS: dict[str, Callable] = {
    "synth": cmd_synth,
    "track": cmd_track,
    "encode": cmd_encode,
    "annotate": cmd_annotate,
    "eval": cmd_eval,
    "histogram": cmd_histogram,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        opts, explicit, seed, threads = resolve(args.command, args)
        out_dir = _ensure_dir(args.out)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            inputs, outputs = COMMANDS[args.command](args, opts, seed, threads, out_dir)
        messages = [str(w.message) for w in caught]
        for m in messages:
            print(f"warning: {m}", file=sys.stderr)
        RunManifest(args.command, inputs, _jsonable(opts), _jsonable(explicit), seed,
                    outputs=outputs, warnings=messages).write(out_dir)
    except (UsageError, ConfigError) as exc:
        print(f"evgrasp {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"evgrasp {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_DEGRADED if messages else EXIT_OK


def _jsonable(d: dict) -> dict[str, Any]:
    return json.loads(json.dumps(d, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


if __name__ == "__main__":
    sys.exit(main())
