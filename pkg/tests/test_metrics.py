import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stars.errors import ContractViolation, ParameterError
from stars.metrics import (LONG_HORIZONS_MS, SHORT_HORIZONS_MS, MetricReport, ade, apd, fde, mmade, mmfde,
                           mode_matches, mpjpe, ms_to_frame)


def test_apd_examples():
    Y = np.zeros((2, 1, 3))
    assert apd(np.stack([Y, Y])) == 0.0
    b = Y.copy()
    b[0, 0, 0] = 3.0
    assert apd(np.stack([Y, b])) == pytest.approx(3.0, abs=1e-9)
    d = 2.0
    tri = np.zeros((3, 1, 1, 3))
    tri[1, 0, 0, 0] = d
    tri[2, 0, 0, :2] = d / 2, d * math.sqrt(3) / 2
    assert apd(tri) == pytest.approx(d, abs=1e-9)
    with pytest.raises(ContractViolation):
        apd(Y[None])


def test_ade_fde_examples():
    Y = np.zeros((2, 1, 3))
    off = Y + np.array([3.0, 4.0, 0.0])
    assert ade(np.stack([Y]), Y) == 0.0
    assert ade(off[None], Y) == pytest.approx(math.sqrt(50) / 2, abs=1e-9)
    assert fde(off[None], Y) == pytest.approx(5.0, abs=1e-9)
    assert ade(np.stack([off, off + 100]), Y) == ade(off[None], Y)
    other = off.copy()
    other[0] += 7.0
    assert fde(other[None], Y) == fde(off[None], Y)
    with pytest.raises(ContractViolation):
        ade(off[None], np.zeros((3, 1, 3)))


def test_mm_metrics():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(3, 4, 2, 3))
    Y = rng.normal(size=(4, 2, 3))
    assert mmade(P, Y[None]) == ade(P, Y)
    assert mmfde(P, Y[None]) == fde(P, Y)
    assert mmade(P, P[:2]) == 0.0
    Y0 = np.zeros((2, 1, 3))
    n1, n3 = Y0.copy(), Y0.copy()
    n1[:, 0, 0] = math.sqrt(2.0)   # whole-sequence norm 2 -> ade 1
    n3[:, 0, 0] = 3 * math.sqrt(2.0)
    assert mmade(Y0[None], np.stack([n1, n3])) == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(ContractViolation):
        mmade(P, np.zeros((0, 4, 2, 3)))


def test_mpjpe_examples():
    Y = np.zeros((5, 1, 3))
    assert mpjpe(Y, Y, [1, 5]) == {1: 0.0, 5: 0.0}
    p = Y.copy()
    p[2, 0] = [0.003, 0.004, 0.0]
    assert mpjpe(p, Y, [3])[3] == pytest.approx(5.0, abs=1e-9)
    Y2 = np.zeros((1, 2, 3))
    p2 = Y2.copy()
    p2[0, 1] = [0.006, 0.008, 0]
    assert mpjpe(p2, Y2, [1])[1] == pytest.approx(5.0, abs=1e-9)
    with pytest.raises(ParameterError):
        mpjpe(Y, Y, [6])


def test_horizons_at_25fps():
    assert [ms_to_frame(ms, 25) for ms in SHORT_HORIZONS_MS] == [2, 4, 8, 10]
    assert [ms_to_frame(ms, 25) for ms in LONG_HORIZONS_MS] == [14, 18, 22, 25]


def test_report_serialisation():
    r = MetricReport(apd=1.5, ade=0.25, mpjpe_by_horizon={160: 3.0, 80: 1.0}, sample_count=7)
    doc = json.loads(r.to_json({"seed": 3}))
    assert doc["config_echo"] == {"seed": 3} and doc["mpjpe_by_horizon"] == {"80": 1.0, "160": 3.0}
    rows = r.to_csv().splitlines()
    assert rows[0] == "metric,value" and "mpjpe_80ms,1.0" in rows and rows[-1] == "sample_count,7"


def test_mode_matches():
    modes = np.stack([np.zeros((2, 1, 3)), np.ones((2, 1, 3))])
    preds = np.stack([np.zeros((2, 1, 3)) + 0.01])
    assert mode_matches(preds, modes, 0.1).tolist() == [True, False]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_metric_properties(K, seed, scale):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(K, 3, 2, 3))
    Y = rng.normal(size=(3, 2, 3))
    perm = rng.permutation(K)
    assert apd(P[perm]) == pytest.approx(apd(P), rel=1e-12)
    assert ade(P[perm], Y) == ade(P, Y) and fde(P[perm], Y) == fde(P, Y)
    assert ade(P, Y) <= ade(P[:-1], Y) and fde(P, Y) <= fde(P[:-1], Y)
    mean = P.mean(axis=0, keepdims=True)
    assert apd(mean + scale * (P - mean)) == pytest.approx(scale * apd(P), rel=1e-9)
    assert min(apd(P), ade(P, Y), fde(P, Y)) >= 0
