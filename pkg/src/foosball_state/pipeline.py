"""Glue between the modules: training all rods, evaluation runs and the live loop."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from foosball_state import angles, dataset as ds, evaluation, regressor, simulator
from foosball_state.core import ROD_IDS, GameState, RodConfig, RodId, RodState, TableGeometry
from foosball_state.provisioning import GameStateMessage, Publisher

log = logging.getLogger(__name__)

MODEL_LABEL = "compact-cnn"


class ModelMismatch(ValueError):
    """Model files do not fit the table geometry."""


# -- models ----------------------------------------------------------------------

class RodPredictor:
    """Full frame in, one rod's state out (cutout and preprocessing included)."""

    def __init__(self, model: regressor.RegressorModel, rod: RodConfig):
        self.model = model
        self.rod = rod

    def __call__(self, image: np.ndarray) -> RodState:
        cut = simulator.extract_cutout(image, self.rod, self.model.input_size)
        return regressor.predict_rod_state(self.model, cut, self.rod)


def load_models(model_dir: str | Path, geometry: TableGeometry) -> dict[RodId, regressor.RegressorModel]:
    root = Path(model_dir)
    models = {}
    for rid in ROD_IDS:
        path = root / regressor.model_filename(rid)
        if not path.is_file():
            raise ModelMismatch(f"missing model file {path}")
        m = regressor.load_model(path)
        if m.rod_id != rid:
            raise ModelMismatch(f"{path} holds a model for {m.rod_id}, expected {rid}")
        geometry.rod(rid)
        models[rid] = m
    return models


def make_predictors(models: Mapping[RodId, regressor.RegressorModel],
                    geometry: TableGeometry) -> dict[RodId, RodPredictor]:
    return {rid: RodPredictor(m, geometry.rod(rid)) for rid, m in models.items()}


def infer_frame(predictors: Mapping[RodId, RodPredictor], image: np.ndarray,
                pool: ThreadPoolExecutor | None = None) -> dict[RodId, RodState]:
    rids = [rid for rid in ROD_IDS if rid in predictors]
    if pool is None:
        states = [predictors[rid](image) for rid in rids]
    else:
        states = list(pool.map(lambda rid: predictors[rid](image), rids))
    return dict(zip(rids, states))


# -- training --------------------------------------------------------------------

def training_arrays(data: ds.Dataset, rid: RodId, cutouts: np.ndarray,
                    labels: str = "measured") -> tuple[np.ndarray, np.ndarray]:
    """Cutouts and targets for one rod, skipping frames whose label is unavailable."""
    rod = data.geometry.rod(rid)
    keep, targets = [], []
    for i, rec in enumerate(data.records):
        shift, rot = ds.rod_labels(rec, rid, labels)
        if shift is None or rot is None or not (np.isfinite(shift) and np.isfinite(rot)):
            continue
        keep.append(i)
        targets.append(regressor.make_target(shift, rot, rod))
    if len(keep) < len(data.records):
        log.warning("%s: %d frames without a usable label skipped", rid,
                    len(data.records) - len(keep))
    return cutouts[keep], np.array(targets).reshape(-1, 3)


def train_rods(data: ds.Dataset, rods: Sequence[RodId], cfg: regressor.TrainConfig,
               labels: str = "measured", out_dir: str | Path | None = None
               ) -> dict[RodId, tuple[regressor.RegressorModel, list[regressor.EpochStats]]]:
    cutouts = ds.all_cutouts(data)
    results = {}
    for rid in rods:
        x, y = training_arrays(data, rid, cutouts[rid], labels)
        t0 = time.perf_counter()
        model, history = regressor.train(x, y, cfg, rid)
        log.info("%s trained in %.1fs, final train %.5f val %.5f", rid,
                 time.perf_counter() - t0, history[-1].train_loss, history[-1].val_loss)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            regressor.save_model(model, Path(out_dir) / regressor.model_filename(rid))
        results[rid] = (model, history)
    return results


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalRun:
    report: evaluation.EvalReport
    shift_errors: dict[RodId, np.ndarray]
    rotation_errors: dict[RodId, np.ndarray]


def evaluate(models: Mapping[RodId, regressor.RegressorModel], data: ds.Dataset, *,
             labels: str = "true", split: str = "val", bench: bool = True,
             repetitions: int = evaluation.MIN_REPETITIONS, parallel: bool = False) -> EvalRun:
    """Per-rod MAE on the validation split each model was trained with."""
    shift_err, rot_err = {}, {}
    frames = None
    for rid in ROD_IDS:
        m = models[rid]
        rod = data.geometry.rod(rid)
        tr, va = ds.split_indices(len(data), m.split_ratio, m.split_seed)
        idx = {"val": va, "train": tr, "all": np.arange(len(data))}[split]
        if len(idx) == 0:
            raise ValueError(f"{split} split of {len(data)} frames is empty")
        recs = [data.records[i] for i in idx]
        cut = ds.rod_cutouts(data, rod, recs, m.input_size)
        pred = regressor.predict_batch(m, cut)
        states = [regressor.decode_prediction(p, rod) for p in pred]
        truth = [ds.rod_labels(r, rid, labels) for r in recs]
        shift_err[rid] = np.abs([s.shift - t[0] for s, t in zip(states, truth)])
        rot_err[rid] = evaluation.rotation_errors([s.rotation for s in states],
                                                  [t[1] for t in truth])
        if frames is None:
            frames = [data.image(r) for r in recs[:evaluation.MIN_REPETITIONS]]
    latency = None
    if bench:
        latency = evaluation.latency_bench(make_predictors(models, data.geometry), frames,
                                           repetitions=repetitions, parallel=parallel)
    report = evaluation.build_report(MODEL_LABEL, shift_err, rot_err, latency, labels)
    return EvalRun(report, shift_err, rot_err)


# -- frame sources ---------------------------------------------------------------

@dataclass
class SourceFrame:
    frame_id: int
    timestamp_us: int
    image: np.ndarray


class SimulatorSource:
    """Endless (or ``n``-frame) stream of rendered random table states."""

    def __init__(self, geometry: TableGeometry, opts: simulator.RenderOptions | None = None,
                 seed: int = 0, n: int | None = None, fps: float = 60.0):
        self.geometry = geometry
        self.opts = opts or simulator.RenderOptions(seed=seed)
        self.seed = seed
        self.n = n
        self.interval_us = int(round(1e6 / fps))

    def __iter__(self) -> Iterator[SourceFrame]:
        rng = np.random.default_rng(self.seed)
        i = 0
        while self.n is None or i < self.n:
            gt = simulator.random_state(self.geometry, rng, frame_id=i,
                                        timestamp_us=i * self.interval_us)
            yield SourceFrame(i, gt.timestamp_us,
                              simulator.render_frame(self.geometry, gt, self.opts))
            i += 1


class ReplaySource:
    """Frames of a captured dataset, in order."""

    def __init__(self, data: ds.Dataset):
        self.data = data

    def __iter__(self) -> Iterator[SourceFrame]:
        for rec in self.data.records:
            yield SourceFrame(rec.frame_id, rec.frame_id * ds.FRAME_INTERVAL_US,
                              self.data.image(rec))


# -- live loop -------------------------------------------------------------------

@dataclass
class ServeConfig:
    models: Mapping[RodId, regressor.RegressorModel]
    geometry: TableGeometry
    endpoint: str = "127.0.0.1:5556"
    parallel_rods: bool = False
    target_fps: float = 60.0
    report_timing: bool = True  # False publishes inference_ms = 0 for byte-stable output

    def __post_init__(self):
        if self.target_fps <= 0:
            raise ValueError("target_fps must be > 0")
        missing = [rid for rid in ROD_IDS if rid not in self.models]
        if missing:
            raise ModelMismatch(f"no model for {', '.join(map(str, missing))}")


@dataclass
class ServeStats:
    published: int = 0
    skipped: int = 0
    late_ticks: int = 0


def serve(cfg: ServeConfig, source, publisher: Publisher,
          stop: threading.Event | None = None) -> ServeStats:
    """Acquire, infer, publish at ``target_fps`` until the source ends or ``stop`` is set."""
    predictors = make_predictors(cfg.models, cfg.geometry)
    budget = 1.0 / cfg.target_fps
    stats = ServeStats()
    pool = ThreadPoolExecutor(max_workers=len(predictors)) if cfg.parallel_rods else None
    try:
        next_tick = time.monotonic()
        for frame in source:
            if stop is not None and stop.is_set():
                break
            t0 = time.perf_counter()
            try:
                states = infer_frame(predictors, frame.image, pool)
            except Exception:
                log.exception("inference failed on frame %d, skipped", frame.frame_id)
                stats.skipped += 1
                continue
            ms = (time.perf_counter() - t0) * 1e3 if cfg.report_timing else 0.0
            msg = GameStateMessage.from_state(
                GameState(frame.frame_id, frame.timestamp_us, states), ms)
            publisher.publish(msg)
            stats.published += 1
            next_tick += budget
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                stats.late_ticks += 1
                log.debug("frame %d over budget by %.1f ms", frame.frame_id, -delay * 1e3)
                next_tick = time.monotonic()
    finally:
        if pool is not None:
            pool.shutdown()
    if stats.late_ticks:
        log.info("%d of %d ticks exceeded the %.1f ms budget", stats.late_ticks,
                 stats.published, budget * 1e3)
    return stats


def state_errors(pred: GameState, gt: GameState) -> dict[RodId, tuple[float, float]]:
    """Absolute shift and circular rotation error per rod."""
    return {rid: (abs(pred.rods[rid].shift - gt.rods[rid].shift),
                  angles.circular_distance(pred.rods[rid].rotation, gt.rods[rid].rotation))
            for rid in ROD_IDS}
