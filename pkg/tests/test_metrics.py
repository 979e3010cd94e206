import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import layer_error_loop
from tcaq.metrics import (CSV_COLUMNS, SCHEMA_VERSION, ArmResult, MetricReport, emit_report, fmd, layer_error,
                          load_report, moment_distance)

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


# -- layer error

def test_identical_is_infinite_sqnr(rng):
    a = rng.standard_normal((4, 3))
    assert layer_error(a, a) == {"mse": 0.0, "sqnr_db": math.inf}


def test_unit_power_plus_one_is_zero_db():
    fp = np.array([1.0, -1.0, 1.0, -1.0])
    e = layer_error(fp, fp + 1)
    assert e["mse"] == 1.0 and e["sqnr_db"] == pytest.approx(0.0, abs=1e-12)


def test_zero_signal_sentinels():
    assert layer_error(np.zeros(3), np.zeros(3))["sqnr_db"] == math.inf
    assert layer_error(np.zeros(3), np.ones(3))["sqnr_db"] == -math.inf


def test_layer_error_matches_loop(rng):
    for _ in range(5):
        fp = rng.standard_normal((3, 4, 5))
        q = fp + 0.1 * rng.standard_normal(fp.shape)
        mse, sqnr = layer_error_loop(fp, q)
        got = layer_error(fp, q)
        assert got["mse"] == pytest.approx(mse, rel=1e-7) and got["sqnr_db"] == pytest.approx(sqnr, rel=1e-7)


def test_layer_error_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        layer_error(np.zeros(3), np.zeros(4))


# -- fmd

def test_fmd_identical_sets(rng):
    a = rng.standard_normal((200, 64))
    assert fmd(a, a) == pytest.approx(0.0, abs=1e-8)


def test_fmd_gaussian_mean_offset():
    rng = np.random.default_rng(3)
    # sampled covariances add a bias near 0.43 at d=64, n=5000; the offset must dominate it
    m = np.full(64, 0.5)
    hits = 0
    for _ in range(5):
        a = rng.standard_normal((5000, 64))
        b = rng.standard_normal((5000, 64)) + m
        hits += abs(fmd(a, b) - m @ m) <= 0.05 * (m @ m)
    assert hits == 5


def test_fmd_symmetric(rng):
    a = rng.standard_normal((300, 64))
    b = 0.5 * rng.standard_normal((300, 64)) + 0.2
    assert fmd(a, b) == pytest.approx(fmd(b, a), abs=1e-6)
    assert fmd(a, b) >= 0


def test_fmd_permutation_invariant(rng):
    a = rng.standard_normal((150, 64))
    b = rng.standard_normal((150, 64)) * 1.3
    p = rng.permutation(64)
    assert fmd(a[:, p], b[:, p]) == pytest.approx(fmd(a, b), rel=1e-8)
    assert fmd(rng.permutation(a), b) == pytest.approx(fmd(a, b), rel=1e-8)


def test_fmd_of_doubled_set(rng):
    a = rng.standard_normal((100, 64))
    assert fmd(a, np.concatenate([a, a])) == pytest.approx(0.0, abs=1e-8)


def test_fmd_accepts_image_batches(rng):
    a = rng.standard_normal((100, 1, 8, 8))
    assert fmd(a, a.reshape(100, 64)) == pytest.approx(0.0, abs=1e-8)


def test_fmd_needs_enough_samples(rng):
    with pytest.raises(ValueError, match="at least 65"):
        fmd(rng.standard_normal((64, 64)), rng.standard_normal((100, 64)))
    with pytest.raises(ValueError, match="dimension"):
        fmd(rng.standard_normal((100, 64)), rng.standard_normal((100, 63)))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-2, 2))
def test_fmd_isotropic_scale_closed_form(scale, shift):
    # for exact Gaussian moments, fmd reduces to the closed form over independent coordinates
    rng = np.random.default_rng(0)
    a = rng.standard_normal((400, 64))
    b = scale * a + shift
    s1 = np.cov(a, rowvar=False, ddof=0) + 1e-6 * np.eye(64)
    s2 = scale ** 2 * (s1 - 1e-6 * np.eye(64)) + 1e-6 * np.eye(64)
    w1 = np.linalg.eigvalsh(s1)
    w2 = scale ** 2 * (w1 - 1e-6) + 1e-6
    expected = 64 * shift ** 2 + (np.sum(w1) + np.sum(w2) - 2 * np.sum(np.sqrt(w1 * w2)))
    mean_gap = np.sum((a.mean(0) * (scale - 1) + shift) ** 2) - 64 * shift ** 2
    assert fmd(a, b) == pytest.approx(expected + mean_gap, rel=1e-6, abs=1e-8)
    assert np.trace(s2) == pytest.approx(np.sum(w2))


def test_moment_distance_examples(rng):
    a = rng.standard_normal((500, 4))
    assert moment_distance(a, a) == 0
    assert moment_distance(a, a + 1) == pytest.approx(4.0)
    assert moment_distance(a, 2 * a) == pytest.approx(np.sum(a.mean(0) ** 2) + np.sum(a.std(0) ** 2))


# -- reports

def _report():
    arms = [ArmResult("baseline", 4, 8, 8, False, False, 0, 2.5, 17.25, 512, 1, 3.0),
            ArmResult("+TCR+DAQ+PAR", 4, 8, 8, True, True, 2, 0.1 + 0.2, -math.inf, 512, 1, None)]
    layers = {"mid.conv1": {"mse": 1e-3, "sqnr_db": 30.0}, "mid.attn.0": {"mse": 0.0, "sqnr_db": math.inf}}
    return MetricReport({"seed": 0, "bits_w": 4}, layers, arms, {"ablate": 1.5}, {"fp_fmd": 1 / 3})


def test_report_round_trip_bit_exact(tmp_path):
    r = _report()
    back = load_report(emit_report(r, tmp_path / "r.json"))
    assert back == r
    assert back.arms[1].fmd == 0.1 + 0.2 and back.extra["fp_fmd"] == 1 / 3


def test_report_carries_schema_version(tmp_path):
    doc = json.loads(emit_report(_report(), tmp_path / "r.json").read_text())
    assert doc["schema_version"] == SCHEMA_VERSION == 1
    doc["schema_version"] = 2
    with pytest.raises(ValueError, match="schema"):
        MetricReport.from_json(doc)


def test_csv_table_next_to_report(tmp_path):
    emit_report(_report(), tmp_path / "r.json", timings=True)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "baseline,4,8,8,0,0,0,2.5,17.25,3.000"
    assert lines[2].endswith(",-inf,")
    emit_report(_report(), tmp_path / "r.json")
    assert (tmp_path / "r.csv").read_text().splitlines()[1].endswith(",17.25,")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError, match="cannot write"):
        emit_report(_report(), tmp_path / "missing" / "r.json")


def test_golden_report(tmp_path):
    emit_report(_report(), tmp_path / "report.json")
    assert (tmp_path / "report.json").read_text() == (GOLDEN / "report_v1.json").read_text()
    assert (tmp_path / "report.csv").read_text() == (GOLDEN / "report_v1.csv").read_text()
