"""Accuracy tables, acceptance gating and inference-latency benchmarking."""

from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from foosball_state.core import ROD_IDS, RodId, Team

log = logging.getLogger(__name__)

SHIFT_LIMIT_MM = 11.0
ROTATION_LIMIT_DEG = 42.0
ROD_LATENCY_LIMIT_MS = 16.6  # one frame at 60 FPS
MIN_REPETITIONS = 30
MIN_WARMUP = 5
ROD_NAMES = tuple(r.name for r in ROD_IDS)
REPORT_FORMAT = "foosball-eval-report"
REPORT_VERSION = 1


# -- metrics ---------------------------------------------------------------------

def _paired(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {g.size} ground truths")
    if p.size == 0:
        raise ValueError("cannot compute an error over empty lists")
    return p, g


def shift_mae(preds, gts) -> float:
    p, g = _paired(preds, gts)
    return float(np.mean(np.abs(p - g)))


def rotation_errors(preds, gts) -> np.ndarray:
    """Per-pair shortest-arc distance in degrees."""
    p, g = _paired(preds, gts)
    d = np.abs(p - g) % 360.0
    return np.minimum(d, 360.0 - d)


def rotation_mae(preds, gts) -> float:
    return float(np.mean(rotation_errors(preds, gts)))


# -- report ----------------------------------------------------------------------

@dataclass
class LatencyBlock:
    mode: str
    repetitions: int
    warmup: int
    mean_ms: float
    median_ms: float
    per_rod_mean_ms: float
    per_rod_median_ms: float
    fps_mean: float
    fps_median: float
    rod_mean_ms: dict[str, float]
    rod_median_ms: dict[str, float]
    samples_ms: list[float] = field(default_factory=list)

    @classmethod
    def from_samples(cls, mode: str, warmup: int, overall_ms: Sequence[float],
                     rod_ms: Mapping[str, Sequence[float]]) -> LatencyBlock:
        mean = statistics.fmean(overall_ms)
        median = statistics.median(overall_ms)
        n = len(rod_ms) or 1
        return cls(mode=mode, repetitions=len(overall_ms), warmup=warmup,
                   mean_ms=mean, median_ms=median,
                   per_rod_mean_ms=mean / n, per_rod_median_ms=median / n,
                   fps_mean=1000.0 / mean if mean > 0 else float("inf"),
                   fps_median=1000.0 / median if median > 0 else float("inf"),
                   rod_mean_ms={k: statistics.fmean(v) for k, v in rod_ms.items()},
                   rod_median_ms={k: statistics.median(v) for k, v in rod_ms.items()},
                   samples_ms=list(overall_ms))

    @property
    def direct_per_rod_mean_ms(self) -> float:
        """Average of the directly timed per-rod means."""
        return statistics.fmean(self.rod_mean_ms.values())

    @property
    def worst_rod_median_ms(self) -> float:
        return max(self.rod_median_ms.values())

    def sequential_ratio(self) -> float:
        """Overall time over 8x the direct per-rod mean; about 1 for sequential runs."""
        return self.mean_ms / (len(self.rod_mean_ms) * self.direct_per_rod_mean_ms)


@dataclass
class EvalReport:
    model: str
    shift_mae_mm: dict[str, float]
    rotation_mae_deg: dict[str, float]
    latency: LatencyBlock | None = None
    n_frames: int = 0
    label_source: str = "true"
    passes: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name, table in (("shift", self.shift_mae_mm), ("rotation", self.rotation_mae_deg)):
            if set(table) != set(ROD_NAMES):
                raise ValueError(f"{name} table must cover exactly the 8 rods")
        # canonical order so serialization is stable
        self.shift_mae_mm = {k: float(self.shift_mae_mm[k]) for k in ROD_NAMES}
        self.rotation_mae_deg = {k: float(self.rotation_mae_deg[k]) for k in ROD_NAMES}
        if not self.passes:
            self.passes = acceptance_gate(self).criteria

    @property
    def avg_shift_mm(self) -> float:
        return statistics.fmean(self.shift_mae_mm.values())

    @property
    def avg_rotation_deg(self) -> float:
        return statistics.fmean(self.rotation_mae_deg.values())

    def to_dict(self, include_latency: bool = True) -> dict[str, Any]:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "model": self.model,
            "n_frames": self.n_frames,
            "label_source": self.label_source,
            "shift_mae_mm": self.shift_mae_mm,
            "rotation_mae_deg": self.rotation_mae_deg,
            "avg_shift_mae_mm": self.avg_shift_mm,
            "avg_rotation_mae_deg": self.avg_rotation_deg,
            "passes": self.passes,
            "latency": asdict(self.latency) if include_latency and self.latency else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalReport:
        if d.get("format") != REPORT_FORMAT:
            raise ValueError("not an evaluation report")
        lat = d.get("latency")
        return cls(model=d["model"], shift_mae_mm=dict(d["shift_mae_mm"]),
                   rotation_mae_deg=dict(d["rotation_mae_deg"]),
                   latency=LatencyBlock(**lat) if lat else None,
                   n_frames=int(d["n_frames"]), label_source=d["label_source"],
                   passes=dict(d["passes"]))


def build_report(model: str, shift_errors: Mapping[RodId, Sequence[float]],
                 rotation_errs: Mapping[RodId, Sequence[float]],
                 latency: LatencyBlock | None = None, label_source: str = "true") -> EvalReport:
    """Report from per-frame absolute errors keyed by rod."""
    shift = {rid.name: float(np.mean(shift_errors[rid])) for rid in ROD_IDS}
    rot = {rid.name: float(np.mean(rotation_errs[rid])) for rid in ROD_IDS}
    n = len(next(iter(shift_errors.values()))) if shift_errors else 0
    return EvalReport(model, shift, rot, latency, n, label_source)


# -- gate ------------------------------------------------------------------------

@dataclass
class GateResult:
    passed: bool
    criteria: dict[str, bool]
    reasons: list[str]


def acceptance_gate(report: EvalReport) -> GateResult:
    """Check shift (a), rotation (b) and per-rod latency (c) thresholds.

    a and b use "does not exceed" semantics; c is strict. Latency is judged on
    the slowest rod's directly timed median, which is what bounds the frame
    rate when the 8 rods run in parallel.
    """
    reasons = []
    bad_shift = [k for k, v in report.shift_mae_mm.items() if not v <= SHIFT_LIMIT_MM]
    bad_rot = [k for k, v in report.rotation_mae_deg.items() if not v <= ROTATION_LIMIT_DEG]
    for k in bad_shift:
        reasons.append(f"a: {k} shift MAE {report.shift_mae_mm[k]:.2f} mm > {SHIFT_LIMIT_MM} mm")
    for k in bad_rot:
        reasons.append(f"b: {k} rotation MAE {report.rotation_mae_deg[k]:.2f} deg "
                       f"> {ROTATION_LIMIT_DEG} deg")
    if report.latency is None:
        lat_ok = False
        reasons.append("c: no latency measurement in report")
    else:
        worst = report.latency.worst_rod_median_ms
        lat_ok = worst < ROD_LATENCY_LIMIT_MS
        if not lat_ok:
            reasons.append(f"c: per-rod median latency {worst:.2f} ms >= {ROD_LATENCY_LIMIT_MS} ms")
    criteria = {"a_shift": not bad_shift, "b_rotation": not bad_rot, "c_latency": lat_ok}
    return GateResult(all(criteria.values()), criteria, reasons)


# -- latency -----------------------------------------------------------------------

RodTask = Callable[[np.ndarray], Any]


def latency_bench(tasks: Mapping[RodId, RodTask], frames: Sequence[np.ndarray],
                  repetitions: int = MIN_REPETITIONS, warmup: int = MIN_WARMUP,
                  parallel: bool = False, clock: Callable[[], int] = time.perf_counter_ns
                  ) -> LatencyBlock:
    """Time full-frame inference over all rods.

    Each task takes the full frame (so cutting and preprocessing are timed)
    and returns anything. Frames are cycled. Sequential mode runs the rods one
    after another; parallel mode fans them out on a thread pool.
    """
    if repetitions < MIN_REPETITIONS:
        raise ValueError(f"need at least {MIN_REPETITIONS} repetitions")
    if warmup < MIN_WARMUP:
        raise ValueError(f"need at least {MIN_WARMUP} warm-up iterations")
    if not frames:
        raise ValueError("no frames to benchmark on")
    items = [(rid.name, tasks[rid]) for rid in ROD_IDS if rid in tasks]
    if not items:
        raise ValueError("no rod tasks to benchmark")

    def timed(task, img):
        t0 = clock()
        task(img)
        return (clock() - t0) / 1e6

    overall: list[float] = []
    per_rod: dict[str, list[float]] = {name: [] for name, _ in items}
    pool = ThreadPoolExecutor(max_workers=len(items)) if parallel else None
    try:
        for i in range(warmup + repetitions):
            img = frames[i % len(frames)]
            t0 = clock()
            if pool is None:
                times = [timed(task, img) for _, task in items]
            else:
                times = list(pool.map(lambda it: timed(it[1], img), items))
            total = (clock() - t0) / 1e6
            if i < warmup:
                continue
            overall.append(total)
            for (name, _), t in zip(items, times):
                per_rod[name].append(t)
    finally:
        if pool is not None:
            pool.shutdown()
    return LatencyBlock.from_samples("parallel" if parallel else "sequential", warmup,
                                     overall, per_rod)


# -- rendering -------------------------------------------------------------------

_GROUP_ROLES = ("Goal", "Defense", "Midfield", "Striker")


def _accuracy_table(title: str, reports: Sequence[EvalReport], attr: str, avg_attr: str) -> str:
    label_w = max(len("Model"), *(len(r.model) for r in reports))
    cols = [f"{'':<{label_w}} | {'Black Rods':^35} | {'White Rods':^35} | {'Average':>7}",
            f"{'Model':<{label_w}} | " + " ".join(f"{c:>8}" for c in _GROUP_ROLES) + " | "
            + " ".join(f"{c:>8}" for c in _GROUP_ROLES) + f" | {'':>7}"]
    lines = [title, *cols, "-" * len(cols[1])]
    for r in reports:
        table = getattr(r, attr)
        black = " ".join(f"{table[rid.name]:8.2f}" for rid in ROD_IDS if rid.team is Team.BLACK)
        white = " ".join(f"{table[rid.name]:8.2f}" for rid in ROD_IDS if rid.team is Team.WHITE)
        lines.append(f"{r.model:<{label_w}} | {black} | {white} | {getattr(r, avg_attr):7.2f}")
    return "\n".join(lines)


def _latency_table(reports: Sequence[EvalReport]) -> str:
    label_w = max(len("Model"), *(len(r.model) for r in reports))
    head = (f"{'':<{label_w}} | {'':<10} | {'Inference (ms)':^17} | {'Inf. per Rod (ms)':^17} "
            f"| {'FPS':^17}")
    sub = (f"{'Model':<{label_w}} | {'Mode':<10} | {'Mean':>8} {'Median':>8} | "
           f"{'Mean':>8} {'Median':>8} | {'Mean':>8} {'Median':>8}")
    lines = ["Inference time per frame and per rod (CPU wall clock)", head, sub,
             "-" * len(sub)]
    for r in reports:
        lat = r.latency
        if lat is None:
            lines.append(f"{r.model:<{label_w}} | {'n/a':<10} |")
            continue
        lines.append(f"{r.model:<{label_w}} | {lat.mode:<10} | {lat.mean_ms:8.2f} "
                     f"{lat.median_ms:8.2f} | {lat.per_rod_mean_ms:8.2f} "
                     f"{lat.per_rod_median_ms:8.2f} | {lat.fps_mean:8.2f} {lat.fps_median:8.2f}")
    return "\n".join(lines)


def render_text(reports: Sequence[EvalReport]) -> str:
    if not reports:
        raise ValueError("no models to report")
    parts = [
        _accuracy_table("Shift MAE (mm) per rod", reports, "shift_mae_mm",
                        "avg_shift_mm"),
        _accuracy_table("Rotation MAE (deg) per rod", reports, "rotation_mae_deg",
                        "avg_rotation_deg"),
        _latency_table(reports),
    ]
    gate_lines = ["Acceptance (a: shift <= 11 mm, b: rotation <= 42 deg, "
                  "c: slowest rod median < 16.6 ms)"]
    for r in reports:
        g = acceptance_gate(r)
        flags = " ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in g.criteria.items())
        gate_lines.append(f"{r.model}: {'PASS' if g.passed else 'FAIL'} {flags}")
        gate_lines.extend(f"  {reason}" for reason in g.reasons)
    gate_lines.append("Criterion c is judged on per-rod latency because the rods can be "
                      "inferred in parallel; frames come from a synthetic source.")
    parts.append("\n".join(gate_lines))
    return "\n\n".join(parts) + "\n"


def render_json(reports: Sequence[EvalReport], include_latency: bool = True) -> str:
    if not reports:
        raise ValueError("no models to report")
    doc = {"reports": [r.to_dict(include_latency) for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def render_report(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """(text tables, JSON document)."""
    return render_text(reports), render_json(reports)


def reports_from_json(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)["reports"]]


# -- figures ---------------------------------------------------------------------

def plot_report(report: EvalReport, out_dir: str | Path,
                rotation_errs: Mapping[RodId, Sequence[float]] | None = None) -> list[Path]:
    """Write PNG figures next to the text report and return their paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    x = np.arange(len(ROD_NAMES))

    fig, axes = plt.subplots(1, 2, figsize=(11, 3.8))
    for ax, table, limit, unit in ((axes[0], report.shift_mae_mm, SHIFT_LIMIT_MM, "mm"),
                                   (axes[1], report.rotation_mae_deg, ROTATION_LIMIT_DEG, "deg")):
        ax.bar(x, [table[k] for k in ROD_NAMES], color=["0.25"] * 4 + ["0.7"] * 4)
        ax.axhline(limit, color="tab:red", linestyle="--", linewidth=1)
        ax.set_xticks(x, ROD_NAMES, rotation=45, ha="right")
        ax.set_ylabel(f"MAE ({unit})")
    axes[0].set_title("Shift MAE per rod")
    axes[1].set_title("Rotation MAE per rod")
    fig.tight_layout()
    path = out / "mae_per_rod.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)

    if report.latency is not None and report.latency.samples_ms:
        fig, ax = plt.subplots(figsize=(6, 3.8))
        ax.hist(report.latency.samples_ms, bins=20, color="0.4")
        ax.axvline(report.latency.median_ms, color="tab:blue", label="median")
        ax.axvline(report.latency.mean_ms, color="tab:orange", label="mean")
        ax.set_xlabel(f"{report.latency.mode} 8-rod inference (ms)")
        ax.set_ylabel("repetitions")
        ax.legend()
        fig.tight_layout()
        path = out / "latency_hist.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    if rotation_errs:
        fig, ax = plt.subplots(figsize=(7, 3.8))
        data = [np.asarray(rotation_errs[rid]) for rid in ROD_IDS]
        ax.boxplot(data, showfliers=True)
        ax.set_xticks(x + 1, ROD_NAMES, rotation=45, ha="right")
        ax.set_ylabel("rotation error (deg)")
        ax.set_title("Rotation error distribution")
        fig.tight_layout()
        path = out / "rotation_errors.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written

