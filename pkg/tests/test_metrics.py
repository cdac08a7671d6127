import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from garmentdiff.design import DesignParams, DesignTemplate, design_mesh
from garmentdiff.errors import StructuralError, ValidationError
from garmentdiff.geometry import GarmentMesh
from garmentdiff.metrics import ErrorCurve, position_curve, position_error, read_report, report, velocity_error

coords = arrays(np.float64, (20, 3), elements=st.floats(-2, 2))


def loop_position_error(a, b):
    total = 0.0
    for i in range(len(a)):
        total += sum((a[i][k] - b[i][k]) ** 2 for k in range(3)) ** 0.5
    return total / len(a)


def test_identical_meshes_have_zero_error():
    m = design_mesh(DesignTemplate(), DesignParams())
    assert position_error(m, m) == 0.0


def test_one_centimetre_translation():
    v = np.random.default_rng(0).normal(size=(50, 3))
    assert position_error(v + [0.0, 0.01, 0.0], v) == pytest.approx(0.01, abs=1e-15)
    assert position_error(v + [0.0, 0.01, 0.0], v, reduce="max") == pytest.approx(0.01, abs=1e-15)


def test_random_pair_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    assert abs(position_error(a, b) - loop_position_error(a.tolist(), b.tolist())) < 1e-12


def test_topology_mismatch_rejected():
    m = design_mesh(DesignTemplate(), DesignParams())
    other = GarmentMesh(m.vertices, m.faces[::-1].copy(), m.uv)
    with pytest.raises(StructuralError):
        position_error(m, other)
    with pytest.raises(StructuralError):
        position_error(np.zeros((4, 3)), np.zeros((5, 3)))


@settings(max_examples=100, deadline=None)
@given(coords, coords, coords)
def test_position_error_is_a_metric(a, b, c):
    assert position_error(a, b) == position_error(b, a)
    assert position_error(a, c) <= position_error(a, b) + position_error(b, c) + 1e-12
    assert position_error(a, a) == 0.0


def test_velocity_of_identical_sequences_is_zero():
    seq = [np.random.default_rng(k).normal(size=(10, 3)) for k in range(5)]
    curve = velocity_error(seq, seq)
    assert np.all(curve.values == 0) and curve.frames.tolist() == [1, 2, 3, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), arrays(np.float64, (3,), elements=st.floats(-1, 1)))
def test_velocity_ignores_static_offset(seed, offset):
    rng = np.random.default_rng(seed)
    gt = [rng.normal(size=(10, 3)) for _ in range(4)]
    pred = [g + rng.normal(size=(10, 3)) * 0.01 for g in gt]
    shifted = [p + offset for p in pred]
    np.testing.assert_allclose(velocity_error(shifted, gt).values, velocity_error(pred, gt).values, atol=1e-12)
    assert position_error(gt[0] + offset, gt[0]) == pytest.approx(np.linalg.norm(offset), abs=1e-12)


def test_alternating_jitter():
    # pred_n = gt_n + (-1)^n * 1 mm along a fixed unit direction, so successive
    # differences disagree by (-1)^n * 2 mm: the per-frame velocity error is 2 mm.
    rng = np.random.default_rng(2)
    gt = [rng.normal(size=(30, 3)) for _ in range(8)]
    d = np.array([0.0, 0.6, 0.8])
    pred = [g + (-1) ** n * 1e-3 * d for n, g in enumerate(gt)]
    np.testing.assert_allclose(velocity_error(pred, gt).values, 2e-3, atol=1e-15)
    np.testing.assert_allclose(position_curve(pred, gt).values, 1e-3, atol=1e-15)


def test_velocity_shape_checks():
    with pytest.raises(StructuralError):
        velocity_error([np.zeros((3, 3))] * 3, [np.zeros((3, 3))] * 2)
    with pytest.raises(StructuralError):
        velocity_error([np.zeros((3, 3))], [np.zeros((3, 3))])


def test_error_curve_invariants():
    with pytest.raises(ValidationError):
        ErrorCurve([0.1, -0.1])
    with pytest.raises(ValidationError):
        ErrorCurve([np.nan])


def test_report_three_frames(tmp_path):
    report([ErrorCurve([0.1, 0.2, 0.3], "a")], tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 3 + 1 and rows[-1].startswith("mean")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["a"]["max"] == 0.3 and summary["a"]["mean"] == pytest.approx(0.2)


def test_report_empty_and_overwrite(tmp_path):
    with pytest.raises(ValidationError):
        report([], tmp_path / "r.csv")
    report([ErrorCurve([0.1], "a")], tmp_path / "r.csv")
    with pytest.raises(ValidationError):
        report([ErrorCurve([0.2], "a")], tmp_path / "r.csv")
    report([ErrorCurve([0.2], "a")], tmp_path / "r.csv", overwrite=True)
    assert read_report(tmp_path / "r.csv") == {"a": {0: 0.2}}


def test_report_round_trip_two_labels(tmp_path):
    rng = np.random.default_rng(3)
    a = ErrorCurve(rng.uniform(0, 1, 5), "static")
    b = ErrorCurve(rng.uniform(0, 1, 4), "temporal", frames=np.arange(1, 5))
    report([a, b], tmp_path / "r.csv")
    back = read_report(tmp_path / "r.csv")
    assert list(back) == ["static", "temporal"]
    assert back["static"] == dict(zip(range(5), a.values.tolist()))
    assert back["temporal"] == dict(zip(range(1, 5), b.values.tolist()))
