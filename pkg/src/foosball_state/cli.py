"""``foosball-state`` command line: capture, train, eval, bench, serve.

Exit codes: 0 success, 1 acceptance gate failed, 2 usage or input error.
Logs go to stderr; reports go to stdout and files.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import signal
import sys
import threading
from pathlib import Path

from foosball_state import cv_shift, dataset as ds, evaluation, pipeline, provisioning, regressor
from foosball_state import simulator
from foosball_state.core import ROD_IDS, RodId, default_table_geometry, load_geometry

log = logging.getLogger("foosball_state")

EXIT_OK, EXIT_GATE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--geometry", type=Path,
                        help="table geometry INI (default: built-in table)")
    common.add_argument("--config", type=Path,
                        help="INI file whose [defaults] keys override command-line flags")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--verbose", "-v", action="count", default=0)
    common.add_argument("--cv-threshold", type=int, default=cv_shift.DEFAULT_THRESHOLD,
                        help="stopper darkness threshold (pixel values below it are dark)")
    common.add_argument("--cv-min-run", type=int, default=cv_shift.DEFAULT_MIN_RUN,
                        help="minimum stopper run length in pixels")

    p = argparse.ArgumentParser(prog="foosball-state",
                                description="Synthetic foosball game-state detection pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("capture", parents=[common], help="capture a synthetic dataset")
    c.add_argument("--frames", type=int, default=500)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--p-still-moving", type=float, default=0.05)
    c.add_argument("--noise-sigma", type=float, default=simulator.AccelNoiseModel().gaussian_sigma_deg)
    c.add_argument("--blur-radius", type=int, default=0)
    c.add_argument("--brightness-offset", type=int, default=0)

    t = sub.add_parser("train", parents=[common], help="train per-rod regressors")
    t.add_argument("--rod", default="all", help="rod name such as black_goal, or all")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--epochs", type=int, default=regressor.TrainConfig.epochs)
    t.add_argument("--lr", type=float, default=regressor.TrainConfig.learning_rate)
    t.add_argument("--batch-size", type=int, default=regressor.TrainConfig.batch_size)
    t.add_argument("--labels", choices=("measured", "true"), default="measured")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--history", type=Path, help="write per-epoch losses as CSV")

    e = sub.add_parser("eval", parents=[common], help="evaluate models on a dataset")
    e.add_argument("--models", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True,
                   help="report path; .txt and .json are written next to each other")
    e.add_argument("--labels", choices=("measured", "true"), default="true")
    e.add_argument("--parallel", type=_on_off, default=False, metavar="{on,off}")
    e.add_argument("--no-figures", action="store_true")

    b = sub.add_parser("bench", parents=[common], help="benchmark inference latency")
    b.add_argument("--models", type=Path, required=True)
    b.add_argument("--frames", type=int, default=evaluation.MIN_REPETITIONS,
                   help="timed repetitions (at least 30)")
    b.add_argument("--warmup", type=int, default=evaluation.MIN_WARMUP)
    b.add_argument("--parallel", type=_on_off, default=False, metavar="{on,off}")
    b.add_argument("--publish-samples", type=int, default=500,
                   help="messages used to time publish-to-decode overhead (0 to skip)")

    s = sub.add_parser("serve", parents=[common], help="run the live detection loop")
    s.add_argument("--models", type=Path, required=True)
    s.add_argument("--endpoint", default="127.0.0.1:5556")
    s.add_argument("--source", default="sim", help="'sim' or a dataset directory to replay")
    s.add_argument("--frames", type=int, help="stop after this many simulator frames")
    s.add_argument("--fps", type=float, default=60.0)
    s.add_argument("--parallel", type=_on_off, default=False, metavar="{on,off}")
    s.add_argument("--no-timing", action="store_true",
                   help="publish inference_ms as 0 so payloads are reproducible")
    return p


_PATH_OPTIONS = ("geometry", "data", "out", "models", "history")


def _apply_config(args: argparse.Namespace) -> None:
    if args.config is None:
        return
    cp = configparser.ConfigParser()
    if not cp.read(args.config):
        raise UsageError(f"config file {args.config} not found")
    if not cp.has_section("defaults"):
        return
    for key, raw in cp["defaults"].items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"config key {key!r} is not an option of {args.command}")
        current = getattr(args, attr)
        if isinstance(current, bool):
            value = cp["defaults"].getboolean(key)
        elif isinstance(current, Path) or attr in _PATH_OPTIONS:
            value = Path(raw)
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, attr, value)


def _geometry(args):
    if args.geometry is None:
        return default_table_geometry()
    if not args.geometry.is_file():
        raise UsageError(f"geometry file {args.geometry} not found")
    return load_geometry(args.geometry)


def _load_dataset(path: Path) -> ds.Dataset:
    if not (path / "manifest.txt").is_file():
        raise UsageError(f"{path} is not a dataset directory")
    return ds.load(path)


def _load_models(path: Path, geometry):
    try:
        return pipeline.load_models(path, geometry)
    except (pipeline.ModelMismatch, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_capture(args) -> int:
    geometry = _geometry(args)
    opts = simulator.RenderOptions(seed=args.seed, blur_radius=args.blur_radius,
                                   brightness_offset=args.brightness_offset)
    noise = simulator.AccelNoiseModel(gaussian_sigma_deg=args.noise_sigma)
    data = ds.capture(args.frames, geometry, args.out, sim_opts=opts, noise_model=noise,
                      seed=args.seed, p_still_moving=args.p_still_moving,
                      cv_threshold=args.cv_threshold, cv_min_run=args.cv_min_run)
    flagged = ds.validate_shifts(data)
    print(f"captured {len(data)} frames to {args.out}; {len(flagged)} frames flagged by "
          f"motor/CV shift validation")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_dataset(args.data)
    if args.rod == "all":
        rods = list(ROD_IDS)
    else:
        try:
            rods = [RodId.parse(args.rod)]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    cfg = regressor.TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                                batch_size=args.batch_size, seed=args.seed)
    results = pipeline.train_rods(data, rods, cfg, args.labels, args.out)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            fh.write("rod,epoch,train_loss,val_loss\n")
            for rid, (_, hist) in results.items():
                for h in hist:
                    fh.write(f"{rid.name},{h.epoch},{h.train_loss!r},{h.val_loss!r}\n")
    for rid, (_, hist) in results.items():
        print(f"{rid.name}: train {hist[-1].train_loss:.5f} val {hist[-1].val_loss:.5f}")
    return EXIT_OK


def _report_paths(out: Path) -> tuple[Path, Path]:
    base = out.with_suffix("") if out.suffix in (".txt", ".json") else out
    return base.with_suffix(".txt"), base.with_suffix(".json")


def cmd_eval(args) -> int:
    data = _load_dataset(args.data)
    models = _load_models(args.models, data.geometry)
    run = pipeline.evaluate(models, data, labels=args.labels, parallel=args.parallel)
    text, doc = evaluation.render_report([run.report])
    txt_path, json_path = _report_paths(args.out)
    txt_path.parent.mkdir(parents=True, exist_ok=True)
    txt_path.write_text(text, encoding="utf-8")
    json_path.write_text(doc, encoding="utf-8")
    if not args.no_figures:
        for p in evaluation.plot_report(run.report, txt_path.parent, run.rotation_errors):
            log.info("figure written to %s", p)
    sys.stdout.write(text)
    gate = evaluation.acceptance_gate(run.report)
    return EXIT_OK if gate.passed else EXIT_GATE


def cmd_bench(args) -> int:
    geometry = _geometry(args)
    models = _load_models(args.models, geometry)
    frames = [f.image for f in pipeline.SimulatorSource(geometry, seed=args.seed, n=8)]
    try:
        lat = evaluation.latency_bench(pipeline.make_predictors(models, geometry), frames,
                                       repetitions=args.frames, warmup=args.warmup,
                                       parallel=args.parallel)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"mode {lat.mode}, {lat.repetitions} repetitions after {lat.warmup} warm-up")
    print(f"8-rod inference  mean {lat.mean_ms:.2f} ms  median {lat.median_ms:.2f} ms")
    print(f"per rod (/8)     mean {lat.per_rod_mean_ms:.2f} ms  median {lat.per_rod_median_ms:.2f} ms")
    print(f"FPS              mean {lat.fps_mean:.2f}  median {lat.fps_median:.2f}")
    for name in evaluation.ROD_NAMES:
        print(f"  {name:<16} mean {lat.rod_mean_ms[name]:.2f} ms  "
              f"median {lat.rod_median_ms[name]:.2f} ms")
    print(f"sequential ratio {lat.sequential_ratio():.3f} (overall / 8 x direct per-rod mean)")
    if args.publish_samples > 0:
        med = provisioning.measure_overhead(args.publish_samples)
        print(f"publish->decode median {med:.3f} ms (loopback)")
    ok = lat.worst_rod_median_ms < evaluation.ROD_LATENCY_LIMIT_MS
    return EXIT_OK if ok else EXIT_GATE


def cmd_serve(args) -> int:
    geometry = _geometry(args)
    models = _load_models(args.models, geometry)
    if args.source == "sim":
        source = pipeline.SimulatorSource(geometry, seed=args.seed, n=args.frames, fps=args.fps)
    else:
        source = pipeline.ReplaySource(_load_dataset(Path(args.source)))
    cfg = pipeline.ServeConfig(models, geometry, args.endpoint, args.parallel, args.fps,
                               report_timing=not args.no_timing)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        pub = provisioning.Publisher(args.endpoint).start()
    except OSError as exc:
        log.error("cannot bind %s: %s", args.endpoint, exc)
        return EXIT_USAGE
    log.info("publishing on %s", pub.bound_endpoint)
    try:
        stats = pipeline.serve(cfg, source, pub, stop)
    finally:
        pub.close(drain_timeout=1.0)
    print(f"published {stats.published} messages, skipped {stats.skipped}, "
          f"late ticks {stats.late_ticks}, dropped {pub.dropped}")
    return EXIT_OK


COMMANDS = {"capture": cmd_capture, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "serve": cmd_serve}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        _apply_config(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ds.DatasetError, FileNotFoundError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
