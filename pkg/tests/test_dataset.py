import math
from pathlib import Path

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foosball_state import angles, cv_shift, dataset as ds, simulator as sim
from foosball_state.core import ROD_IDS, RodState, Team

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def small(tmp_path_factory, geometry):
    return ds.capture(12, geometry, tmp_path_factory.mktemp("cap"), seed=7, p_still_moving=0.3)


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_layout(small):
    root = small.root
    assert len(list((root / "frames").glob("frame_*.png"))) == 12
    lines = (root / "labels.csv").read_text().split("\n")
    assert lines[-1] == ""  # LF terminated
    assert len(lines) - 2 == 12
    assert "\r" not in (root / "labels.csv").read_text()
    assert (root / "frames" / "frame_000011.png").is_file()


def test_label_header_is_frozen():
    expected = (GOLDEN / "labels_header.csv").read_text().rstrip("\n")
    assert ",".join(ds.label_header()) == expected


def test_labels_golden(tmp_path, geometry):
    ds.capture(2, geometry, tmp_path, seed=0)
    assert (tmp_path / "labels.csv").read_text() == (GOLDEN / "labels_2frames.csv").read_text()


def test_white_rods_have_empty_motor_cells(small):
    for rec in small.records:
        for rid, r in rec.rods.items():
            assert (r.motor_shift is None) == (rid.team is Team.WHITE)
            assert (r.motor_rot is None) == (rid.team is Team.WHITE)


def test_capture_is_byte_deterministic(tmp_path, geometry):
    ds.capture(3, geometry, tmp_path / "a", seed=11)
    ds.capture(3, geometry, tmp_path / "b", seed=11)
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a == b
    ds.capture(3, geometry, tmp_path / "c", seed=12)
    assert _tree_bytes(tmp_path / "c") != a


def test_single_frame_capture(tmp_path, geometry):
    data = ds.capture(1, geometry, tmp_path, seed=1)
    assert len(data) == 1
    rec = data.records[0]
    assert rec.frame_id == 0 and set(rec.rods) == set(ROD_IDS)
    for rod in geometry.rods:
        rod.check_state(RodState(rec.rods[rod.id].gt_shift, rec.rods[rod.id].gt_rot))


def test_load_round_trip(small):
    loaded = ds.load(small.root)
    assert loaded.records == small.records
    assert loaded.geometry == small.geometry
    assert loaded.render_options == small.render_options
    assert loaded.noise_model == small.noise_model
    assert (loaded.seed, loaded.p_still_moving) == (7, 0.3)


def test_cv_shift_survives_persistence(small):
    for rec in small.records:
        img = small.image(rec)
        for rod in small.geometry.rods:
            assert cv_shift.detect_shift(img, rod, small.geometry.calibration) == \
                rec.rods[rod.id].cv_shift


def test_tilt_pipeline_matches_logged_noise(small):
    for rec in small.records:
        for rid in ROD_IDS:
            r, nz = rec.rods[rid], rec.noise[rid]
            expected = angles.normalize_deg(r.gt_rot + nz.accel_err)
            assert angles.circular_distance(r.accel_rot, expected) <= 1e-9


def test_black_rods_follow_motor_unless_in_flight(small):
    for rec in small.records:
        for rid in ROD_IDS[:4]:
            r, nz = rec.rods[rid], rec.noise[rid]
            if not nz.in_flight:
                assert (r.motor_shift, r.motor_rot) == (r.gt_shift, r.gt_rot)
            else:
                assert abs(r.motor_shift - r.gt_shift) >= 6.0


def test_validate_shifts_matches_in_flight_frames(small):
    in_flight = {rec.frame_id for rec in small.records
                 if any(nz.in_flight for nz in rec.noise.values())}
    assert ds.validate_shifts(small) == sorted(in_flight)
    assert ds.validate_shifts(small, math.inf) == []


def test_no_flags_without_motion(tmp_path, geometry):
    data = ds.capture(15, geometry, tmp_path, seed=4, p_still_moving=0.0)
    assert ds.validate_shifts(data) == []


def test_split_examples():
    tr, va = ds.split_indices(500, 0.8, 3)
    assert (len(tr), len(va)) == (400, 100)
    tr2, va2 = ds.split_indices(500, 0.8, 3)
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2)


@settings(max_examples=50)
@given(st.integers(1, 700), st.floats(0.05, 1.0), st.integers(0, 2**32))
def test_split_is_partition(n, ratio, seed):
    tr, va = ds.split_indices(n, ratio, seed)
    assert len(np.intersect1d(tr, va)) == 0
    assert np.array_equal(np.sort(np.concatenate([tr, va])), np.arange(n))
    assert len(tr) == min(n, math.ceil(ratio * n - 1e-9))


def test_split_records(small):
    tr, va = ds.split(small, 0.75, 0)
    assert (len(tr), len(va)) == (9, 3)


def test_rod_labels(small):
    rec = small.records[0]
    black, white = ROD_IDS[0], ROD_IDS[4]
    assert ds.rod_labels(rec, black) == (rec.rods[black].cv_shift, rec.rods[black].motor_rot)
    assert ds.rod_labels(rec, white) == (rec.rods[white].cv_shift, rec.rods[white].accel_rot)
    assert ds.rod_labels(rec, white, "true") == (rec.rods[white].gt_shift, rec.rods[white].gt_rot)
    with pytest.raises(ValueError):
        ds.rod_labels(rec, white, "guess")


def test_cutouts(small):
    cuts = ds.all_cutouts(small)
    assert set(cuts) == set(ROD_IDS)
    assert cuts[ROD_IDS[2]].shape == (12, 64, 256)
    one = ds.rod_cutouts(small, small.geometry.rod(ROD_IDS[2]))
    assert np.array_equal(one, cuts[ROD_IDS[2]])


# -- failure modes -------------------------------------------------------------

def test_rejected_sensor_writes_nothing(tmp_path, geometry):
    with pytest.raises(sim.SensorRejected):
        ds.capture(2, geometry, tmp_path / "x", noise_model=sim.AccelNoiseModel(calibration_bias_deg=4))
    assert not (tmp_path / "x").exists()


def test_n_must_be_positive(tmp_path, geometry):
    with pytest.raises(ValueError):
        ds.capture(0, geometry, tmp_path)


def test_io_failure_leaves_partial_manifest(tmp_path, geometry, monkeypatch):
    real = cv2.imwrite
    calls = {"n": 0}

    def flaky(path, img):
        calls["n"] += 1
        return False if calls["n"] == 3 else real(path, img)

    monkeypatch.setattr(ds.cv2, "imwrite", flaky)
    with pytest.raises(OSError):
        ds.capture(5, geometry, tmp_path, seed=0)
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "status = partial" in manifest and "frames = 2" in manifest
    with pytest.raises(ds.DatasetError, match="incomplete"):
        ds.load(tmp_path)


@pytest.fixture
def copy_of(small, tmp_path):
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(small.root, dst)
    return dst


def test_missing_image(copy_of):
    (copy_of / "frames" / "frame_000004.png").unlink()
    with pytest.raises(ds.DatasetError, match="missing image"):
        ds.load(copy_of)


def test_row_count_mismatch(copy_of):
    p = copy_of / "labels.csv"
    p.write_text("".join(p.read_text().splitlines(keepends=True)[:-1]))
    with pytest.raises(ds.DatasetError):
        ds.load(copy_of)


def test_malformed_csv(copy_of):
    p = copy_of / "labels.csv"
    lines = p.read_text().splitlines(keepends=True)
    lines[3] = lines[3].replace(",", ",abc,", 1)
    p.write_text("".join(lines))
    with pytest.raises(ds.DatasetError):
        ds.load(copy_of)


def test_missing_manifest(tmp_path):
    with pytest.raises(ds.DatasetError):
        ds.load(tmp_path)
