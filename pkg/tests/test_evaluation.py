import itertools
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from foosball_state import evaluation as ev
from foosball_state.core import ROD_IDS

GOLDEN = Path(__file__).parent / "golden"
NAMES = ev.ROD_NAMES


def _latency(rod_ms=1.0):
    return ev.LatencyBlock.from_samples(
        "sequential", 5, [8 * rod_ms + 0.01 * (i % 3) for i in range(30)],
        {n: [rod_ms] * 30 for n in NAMES})


def _report(shift=None, rot=None, latency="default", model="compact-cnn"):
    shift = shift or {n: 0.0 for n in NAMES}
    rot = rot or {n: 0.0 for n in NAMES}
    lat = _latency() if latency == "default" else latency
    return ev.EvalReport(model, dict(shift), dict(rot), lat, n_frames=100)


def fixed_reports():
    lat = ev.LatencyBlock.from_samples(
        "sequential", 5, [10.0 + 0.125 * i for i in range(30)],
        {n: [1.25 + 0.01 * k + 0.001 * i for i in range(30)] for k, n in enumerate(NAMES)})
    a = ev.EvalReport("compact-cnn", {n: 1.5 + 0.25 * k for k, n in enumerate(NAMES)},
                      {n: 3.0 + 0.5 * k for k, n in enumerate(NAMES)}, lat, n_frames=100)
    b = ev.EvalReport("failing-model", {n: 12.0 if k == 2 else 4.0 for k, n in enumerate(NAMES)},
                      {n: 42.0 for n in NAMES}, None, n_frames=100)
    return [a, b]


# -- metrics ---------------------------------------------------------------------

def test_mae_examples():
    assert ev.shift_mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert ev.rotation_mae([350.0], [10.0]) == pytest.approx(20.0)
    assert ev.shift_mae([0.0, 10.0], [5.0, 5.0]) == 5.0


@pytest.mark.parametrize("fn", [ev.shift_mae, ev.rotation_mae])
def test_mae_errors(fn):
    with pytest.raises(ValueError):
        fn([], [])
    with pytest.raises(ValueError):
        fn([1.0], [1.0, 2.0])


angles = st.floats(0, 360, exclude_max=True)


@given(st.lists(st.tuples(angles, angles, st.integers(-3, 3), st.integers(-3, 3)),
                min_size=1, max_size=20))
def test_rotation_mae_invariant_under_full_turns(rows):
    p = [r[0] for r in rows]
    g = [r[1] for r in rows]
    p2 = [a + 360 * k for a, _, k, _ in rows]
    g2 = [b + 360 * k for _, b, _, k in rows]
    assert ev.rotation_mae(p2, g2) == pytest.approx(ev.rotation_mae(p, g), abs=1e-9)


# -- gate ------------------------------------------------------------------------

def test_gate_pass_trivial():
    g = ev.acceptance_gate(_report())
    assert g.passed and g.reasons == []


def test_gate_names_failing_rod():
    shift = {n: 0.0 for n in NAMES}
    shift["white_defense"] = 12.0
    g = ev.acceptance_gate(_report(shift=shift))
    assert not g.passed
    assert g.criteria == {"a_shift": False, "b_rotation": True, "c_latency": True}
    assert len(g.reasons) == 1 and "white_defense" in g.reasons[0]


def test_gate_boundaries():
    assert ev.acceptance_gate(_report(rot={n: 42.0 for n in NAMES})).passed
    assert ev.acceptance_gate(_report(shift={n: 11.0 for n in NAMES})).passed
    assert not ev.acceptance_gate(_report(rot={n: 42.0001 for n in NAMES})).passed
    assert not ev.acceptance_gate(_report(latency=_latency(16.6))).criteria["c_latency"]
    assert ev.acceptance_gate(_report(latency=_latency(16.59))).criteria["c_latency"]


def test_gate_needs_latency():
    g = ev.acceptance_gate(_report(latency=None))
    assert not g.passed and g.criteria["c_latency"] is False
    assert any(r.startswith("c:") for r in g.reasons)


@given(st.lists(st.floats(0, 60), min_size=16, max_size=16),
       st.integers(0, 15), st.floats(0, 1))
def test_gate_monotone(values, idx, factor):
    shift = dict(zip(NAMES, values[:8]))
    rot = dict(zip(NAMES, values[8:]))
    before = ev.acceptance_gate(_report(shift, rot)).passed
    table = shift if idx < 8 else rot
    table[NAMES[idx % 8]] *= factor
    after = ev.acceptance_gate(_report(shift, rot)).passed
    assert not (before and not after)


# -- report ----------------------------------------------------------------------

@given(st.lists(st.floats(0, 100), min_size=16, max_size=16))
def test_averages_match_cells(values):
    r = _report(dict(zip(NAMES, values[:8])), dict(zip(NAMES, values[8:])))
    assert abs(r.avg_shift_mm - sum(values[:8]) / 8) < 0.01
    assert abs(r.avg_rotation_deg - sum(values[8:]) / 8) < 0.01


def test_report_requires_all_rods():
    with pytest.raises(ValueError):
        ev.EvalReport("m", {"black_goal": 1.0}, {n: 0.0 for n in NAMES})


def test_build_report_from_errors():
    errs = {rid: [1.0, 3.0] for rid in ROD_IDS}
    r = ev.build_report("m", errs, errs)
    assert r.shift_mae_mm == {n: 2.0 for n in NAMES}
    assert r.n_frames == 2


def test_golden_text_and_json():
    text, js = ev.render_report(fixed_reports())
    assert text == (GOLDEN / "report.txt").read_text()
    assert js == (GOLDEN / "report.json").read_text()


def test_render_is_stable():
    assert ev.render_report(fixed_reports()) == ev.render_report(fixed_reports())


def test_json_round_trip():
    reports = fixed_reports()
    back = ev.reports_from_json(ev.render_json(reports))
    assert back == reports
    assert ev.render_json(back) == ev.render_json(reports)


def test_empty_model_list():
    with pytest.raises(ValueError):
        ev.render_report([])


def test_fps_derivation():
    lat = fixed_reports()[0].latency
    assert lat.fps_mean == pytest.approx(1000.0 / lat.mean_ms)
    assert lat.fps_median == pytest.approx(1000.0 / lat.median_ms)
    assert lat.per_rod_mean_ms == pytest.approx(lat.mean_ms / 8)


def test_plots_written(tmp_path):
    r = fixed_reports()[0]
    errs = {rid: np.linspace(0, 10, 20) for rid in ROD_IDS}
    paths = ev.plot_report(r, tmp_path, errs)
    assert {p.name for p in paths} == {"mae_per_rod.png", "latency_hist.png",
                                      "rotation_errors.png"}
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# -- latency ---------------------------------------------------------------------

def _noop_tasks():
    return {rid: (lambda img: None) for rid in ROD_IDS}


def test_bench_preconditions():
    frames = [np.zeros((4, 4), np.uint8)]
    with pytest.raises(ValueError):
        ev.latency_bench(_noop_tasks(), frames, repetitions=29)
    with pytest.raises(ValueError):
        ev.latency_bench(_noop_tasks(), frames, warmup=4)
    with pytest.raises(ValueError):
        ev.latency_bench(_noop_tasks(), [])


def test_stub_model_overhead():
    lat = ev.latency_bench(_noop_tasks(), [np.zeros((4, 4), np.uint8)], repetitions=100)
    assert lat.repetitions == 100
    assert max(lat.rod_median_ms.values()) < 0.1
    assert lat.direct_per_rod_mean_ms < 0.1


def test_median_below_mean_with_outlier():
    # fake clock: every call advances 1 us, except one spike of 50 ms
    ticks = itertools.count()
    spike_at = 400

    def clock():
        n = next(ticks)
        return n * 1000 + (50_000_000 if n >= spike_at else 0)

    lat = ev.latency_bench(_noop_tasks(), [np.zeros(1)], repetitions=40, clock=clock)
    assert lat.median_ms <= lat.mean_ms
    assert lat.mean_ms > 2 * lat.median_ms


def test_sequential_ratio():
    def busy(img):
        t0 = time.perf_counter()
        while time.perf_counter() - t0 < 0.0005:
            pass

    lat = ev.latency_bench({rid: busy for rid in ROD_IDS}, [np.zeros(1)], repetitions=30)
    assert 0.9 <= lat.sequential_ratio() <= 1.3


def test_parallel_mode_label():
    lat = ev.latency_bench(_noop_tasks(), [np.zeros(1)], parallel=True)
    assert lat.mode == "parallel"
    assert set(lat.rod_median_ms) == set(NAMES)
