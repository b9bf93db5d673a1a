import json
import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsrnowcast.eval import (
    DEFAULT_BINS, EmptySelectionError, EvalReport, SiteSpec, compare_reports, format_comparison, format_table,
    read_sites, report_from_values, site_eval, stratified_rmse, validate_report_dict,
)
from dsrnowcast.gridio import HOUR, GridFrame
from oracles import stratified_loop


def _utc(*args):
    return int(datetime(*args, tzinfo=timezone.utc).timestamp())


def _random(seed=0, shape=(5, 20, 20)):
    r = np.random.default_rng(seed)
    t = r.uniform(0, 1000, shape)
    t[r.random(shape) < 0.2] = 0.0
    return t + r.normal(0, 60, shape).clip(-t), t


def test_identity_and_constant_offset():
    _, t = _random()
    rep = stratified_rmse(t, t)
    assert rep.rmse == 0 and all(b.rmse == 0 for b in rep.bins)
    rep = stratified_rmse(t + 10, t)
    assert math.isclose(rep.rmse, 10, rel_tol=1e-12)
    assert all(math.isclose(b.rmse, 10, rel_tol=1e-12) for b in rep.bins)


def test_matches_flat_loop_oracle():
    p, t = _random(1)
    p[0, 0, :3] = np.nan
    rep = stratified_rmse(p, t)
    overall, per_bin = stratified_loop(p, t, DEFAULT_BINS)
    assert abs(rep.rmse - overall) <= 1e-9 * overall
    for b, (rm, n) in zip(rep.bins, per_bin):
        assert b.n == n and abs(b.rmse - rm) <= 1e-9 * rm
    assert rep.n == sum(n for _, n in per_bin) == t.size - 3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bin_decomposition_identity(seed):
    p, t = _random(seed, (3, 7, 9))
    rep = stratified_rmse(p, t)
    assert sum(b.n for b in rep.bins) == rep.n
    parts = sum(b.rmse ** 2 * b.n for b in rep.bins if b.n)
    assert math.isclose(rep.rmse ** 2 * rep.n, parts, rel_tol=1e-9)


def test_half_open_boundaries():
    t = np.array([0.0, 299.999, 300.0, 599.999, 600.0, 5000.0])
    rep = stratified_rmse(t + 1, t)
    assert [b.n for b in rep.bins] == [2, 2, 2]
    assert [b.label for b in rep.bins] == ["Low", "Medium", "High"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    p, t = _random(seed, (200,))
    perm = np.random.default_rng(seed).permutation(200)
    a, b = stratified_rmse(p, t), stratified_rmse(p[perm], t[perm])
    assert a.n == b.n
    assert math.isclose(a.rmse, b.rmse, rel_tol=1e-12)
    for x, y in zip(a.bins, b.bins):
        assert x.n == y.n and (x.n == 0 or math.isclose(x.rmse, y.rmse, rel_tol=1e-12))


def test_masked_and_missing_pixels_change_nothing():
    p, t = _random(2, (50,))
    base = stratified_rmse(p, t)
    p2 = np.concatenate([p, [1e6, 3.0, np.nan]])
    t2 = np.concatenate([t, [0.0, 1e6, 400.0]])
    mask = np.r_[np.ones(50, bool), False, False, True]
    rep = stratified_rmse(p2, t2, mask=mask)
    assert rep.to_dict() == base.to_dict()


def test_daylight_only_drops_night_truth():
    t = np.array([0.0, 0.0, 100.0])
    p = np.array([50.0, 50.0, 110.0])
    assert stratified_rmse(p, t).n == 3
    rep = stratified_rmse(p, t, daylight_only=True)
    assert rep.n == 1 and rep.rmse == 10.0


def test_frames_paired_by_timestamp_and_empty_overlap():
    truth = [GridFrame(k * HOUR, np.full((2, 2), 100.0 * k)) for k in range(4)]
    pred = [GridFrame(k * HOUR, np.full((2, 2), 100.0 * k + 5)) for k in (2, 3, 9)]
    rep = stratified_rmse(pred, truth)
    assert rep.n == 8 and rep.rmse == 5.0
    assert rep.meta["start"] == 2 * HOUR and rep.meta["end"] == 3 * HOUR
    with pytest.raises(EmptySelectionError, match="empty overlap"):
        stratified_rmse(pred[2:], truth)
    with pytest.raises(EmptySelectionError, match="empty overlap"):
        stratified_rmse(np.full(3, np.nan), np.ones(3))
    with pytest.raises(ValueError, match="shape"):
        stratified_rmse(np.ones(3), np.ones(4))


def test_bins_must_partition():
    with pytest.raises(ValueError):
        stratified_rmse(np.ones(3), np.ones(3), bins=((0, 300), (400, math.inf)))
    with pytest.raises(ValueError):
        stratified_rmse(np.ones(3), np.ones(3), bins=((0, 300), (300, 600)))


# ---------------------------------------------------------------- sites


def _site_frames():
    t0 = _utc(2020, 6, 1, 18)  # 10:00 PST
    truth = [np.zeros((3, 3)) for _ in range(3)]
    pred = [np.zeros((3, 3)) for _ in range(3)]
    for k, (ta, pa, tb, pb) in enumerate([(100, 110, 200, 200), (400, 380, 500, 530), (700, 700, 650, 610)]):
        truth[k][0, 0], pred[k][0, 0] = ta, pa
        truth[k][1, 1], pred[k][1, 1] = tb, pb
        truth[k][2, 2] = pred[k][2, 2] + 999  # not a site; must be ignored
    ts = [t0 + k * HOUR for k in range(3)]
    return ([GridFrame(t, v) for t, v in zip(ts, pred)], [GridFrame(t, v) for t, v in zip(ts, truth)])


def test_site_eval_hand_computed():
    pred, truth = _site_frames()
    sites = [SiteSpec("A", 0, 0, 0, 0), SiteSpec("B", 0, 0, 1, 1)]
    rep = site_eval(pred, truth, sites)
    # errors A: 10, -20, 0; B: 0, 30, -40
    assert rep.n == 6 and math.isclose(rep.rmse, math.sqrt(3000 / 6), rel_tol=1e-12)
    want = [math.sqrt(100 / 2), math.sqrt(1300 / 2), math.sqrt(1600 / 2)]
    for b, w in zip(rep.bins, want):
        assert b.n == 2 and math.isclose(b.rmse, w, rel_tol=1e-12)
    assert rep.meta["sites"] == ["A", "B"]


def test_site_eval_window_and_identity():
    pred, truth = _site_frames()
    assert site_eval(truth, truth, [SiteSpec("A", 0, 0, 0, 0)]).rmse == 0
    # window 10..11 local keeps the first two hours only
    rep = site_eval(pred, truth, [SiteSpec("A", 0, 0, 0, 0, 10, 11)])
    assert rep.n == 2 and math.isclose(rep.rmse, math.sqrt(500 / 2))
    with pytest.raises(EmptySelectionError, match="empty selection"):
        site_eval(pred, truth, [SiteSpec("A", 0, 0, 0, 0, 0, 5)])
    # the same hours seen from UTC are excluded
    with pytest.raises(EmptySelectionError, match="empty selection"):
        site_eval(pred, truth, [SiteSpec("A", 0, 0, 0, 0, 10, 15, utc_offset=0.0)])
    with pytest.raises(ValueError, match="outside"):
        site_eval(pred, truth, [SiteSpec("Z", 0, 0, 5, 0)])


def test_site_projection_and_csv(tmp_path):
    extent, shape = (30.0, 50.0, -125.0, -100.0), (20, 25)
    s = SiteSpec.at("Mojave", 35.01, -117.2, extent, shape)
    # row 0 is the northern edge: (50 - 35.01) / 1 deg = 14.99; (-117.2 + 125) / 1 deg = 7.8
    assert (s.row, s.col) == (14, 7)
    p = tmp_path / "sites.csv"
    p.write_text("name,lat,lon\nMojave,35.01,-117.2\nSeattle,47.6,-122.3\n")
    sites = read_sites(p, extent, shape, start_hour=9)
    assert [x.name for x in sites] == ["Mojave", "Seattle"] and sites[0].start_hour == 9
    with pytest.raises(ValueError):
        read_sites(p, (30.0, 40.0, -125.0, -100.0), shape)
    p.write_text("name,lat\nX,1\n")
    with pytest.raises(ValueError, match="lon"):
        read_sites(p, extent, shape)


# ---------------------------------------------------------------- compare / reports


def test_compare_published_values():
    a = report_from_values(124.9, [165.3, 170.7, 103.5])
    b = report_from_values(108.6, [135.3, 131.7, 98.3])
    d = compare_reports(a, b)
    assert abs(d["overall"] - 13.05) <= 0.1
    assert abs(d["Low"] - 18.15) <= 0.01
    assert all(v == 0 for v in compare_reports(a, a).values())
    assert "overall" in format_comparison(d) and "+13.05%" in format_comparison(d)


def test_compare_stratum_mismatch():
    a = report_from_values(1.0)
    b = report_from_values(1.0, bins=((0, 500), (500, math.inf)))
    with pytest.raises(ValueError, match="strata"):
        compare_reports(a, b)


def test_json_roundtrip_and_schema():
    p, t = _random(3)
    t[0, 0, 0] = 5000.0
    rep = stratified_rmse(p, t, bins=((0, 300), (300, 600), (600, 700), (700, math.inf)), horizon=2,
                          meta={"model": "m"})
    text = rep.to_json()
    d = json.loads(text)
    validate_report_dict(d)
    assert set(d) == {"horizon", "overall", "bins", "meta"}
    assert set(d["overall"]) == {"rmse", "n"} and set(d["bins"][0]) == {"lo", "hi", "rmse", "n"}
    assert d["bins"][-1]["hi"] is None
    back = EvalReport.from_json(text)
    assert back.to_dict() == d
    empty = stratified_rmse(np.array([10.0]), np.array([10.0]))
    validate_report_dict(json.loads(empty.to_json()))
    assert math.isnan(EvalReport.from_json(empty.to_json()).bins[1].rmse)
    with pytest.raises(ValueError):
        validate_report_dict({"horizon": 1, "overall": {"rmse": 1.0}, "bins": [], "meta": {}})
    with pytest.raises(ValueError):
        EvalReport.from_dict({"horizon": 1})


def test_format_table_layout():
    a = report_from_values(61.4, [70.0, 50.0, 40.0], horizon=1, meta={"model": "convlstm"})
    b = report_from_values(85.7, [90.0, 80.0, 70.0], horizon=2, meta={"model": "convlstm"})
    lines = format_table([a, b]).splitlines()
    assert "Overall" in lines[0] and "Low (0-300)" in lines[0] and "High (600+)" in lines[0]
    assert lines[2].split()[:3] == ["convlstm", "t+1", "61.4"]
    assert len({len(lines[0]), len(lines[1])}) == 1
