"""RMSE evaluation stratified by true DSR, site-level windowed evaluation and
report comparison.

All quantities are in W/m^2. Bins are half-open ``[lo, hi)`` and are chosen
by the *true* value, so a truth of exactly 300 lands in the middle bin.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .gridio import GridFrame, latlon_to_pixel

DEFAULT_BINS = ((0.0, 300.0), (300.0, 600.0), (600.0, math.inf))
BIN_LABELS = {DEFAULT_BINS[0]: "Low", DEFAULT_BINS[1]: "Medium", DEFAULT_BINS[2]: "High"}


class EmptySelectionError(ValueError):
    pass


@dataclass(frozen=True)
class BinStat:
    lo: float
    hi: float
    rmse: float
    n: int

    @property
    def label(self) -> str:
        return BIN_LABELS.get((self.lo, self.hi), f"{self.lo:g}-{self.hi:g}")


@dataclass
class EvalReport:
    horizon: int
    rmse: float
    n: int
    bins: list
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None or not math.isfinite(v) else v

        return {
            "horizon": self.horizon,
            "overall": {"rmse": num(self.rmse), "n": self.n},
            "bins": [{"lo": b.lo, "hi": num(b.hi), "rmse": num(b.rmse), "n": b.n} for b in self.bins],
            "meta": self.meta,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            bins = [BinStat(float(b["lo"]), math.inf if b["hi"] is None else float(b["hi"]),
                            math.nan if b["rmse"] is None else float(b["rmse"]), int(b["n"]))
                    for b in d["bins"]]
            overall = d["overall"]
            rmse = math.nan if overall["rmse"] is None else float(overall["rmse"])
            return cls(int(d["horizon"]), rmse, int(overall["n"]), bins, dict(d.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed report: missing or invalid field {exc}") from None

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def strata(self) -> dict:
        return {"overall": self.rmse, **{b.label: b.rmse for b in self.bins}}


def validate_report_dict(d) -> None:
    """Raise ValueError unless ``d`` follows the report JSON schema."""
    if not isinstance(d, dict):
        raise ValueError("report must be a JSON object")
    for key, kind in (("horizon", int), ("overall", dict), ("bins", list), ("meta", dict)):
        if not isinstance(d.get(key), kind):
            raise ValueError(f"report field {key!r} must be {kind.__name__}")
    for part in [d["overall"], *d["bins"]]:
        if not isinstance(part, dict) or not isinstance(part.get("n"), int):
            raise ValueError("each stratum needs an integer 'n'")
        if part.get("rmse") is not None and not isinstance(part["rmse"], (int, float)):
            raise ValueError("'rmse' must be a number or null")
    for b in d["bins"]:
        if not isinstance(b.get("lo"), (int, float)) or not (b.get("hi") is None or isinstance(b["hi"], (int, float))):
            raise ValueError("bins need numeric 'lo' and numeric-or-null 'hi'")


def _check_bins(bins):
    bins = tuple((float(lo), float(hi)) for lo, hi in bins)
    if not bins or bins[0][0] != 0.0 or bins[-1][1] != math.inf:
        raise ValueError("bins must cover [0, inf)")
    for (lo, hi), (nlo, _) in zip(bins, bins[1:] + ((math.inf, None),)):
        if not lo < hi or hi != nlo:
            raise ValueError(f"bins must be contiguous and increasing, got {bins}")
    return bins


def _as_arrays(predictions, truths):
    """Align predictions with truths; frames are paired by timestamp."""
    if _is_frames(predictions) or _is_frames(truths):
        pred = {f.timestamp: f for f in predictions}
        pairs = [(pred[f.timestamp], f) for f in truths if f.timestamp in pred]
        if not pairs:
            raise EmptySelectionError("empty overlap: no timestamps shared by predictions and truths")
        for p, t in pairs:
            if p.shape != t.shape:
                raise ValueError(f"shape mismatch at {t.timestamp}: {p.shape} vs {t.shape}")
        return (np.stack([p.values for p, _ in pairs]), np.stack([t.values for _, t in pairs]),
                [t.timestamp for _, t in pairs])
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs truths {t.shape}")
    return p, t, None


def _is_frames(obj):
    if isinstance(obj, np.ndarray):
        return False
    seq = list(obj) if not hasattr(obj, "frames") else obj.frames
    return bool(seq) and isinstance(seq[0], GridFrame)


def stratified_rmse(predictions, truths, bins=DEFAULT_BINS, horizon: int = 1, mask=None,
                    daylight_only: bool = False, meta: dict | None = None) -> EvalReport:
    """RMSE overall and within bins of the true value.

    ``predictions`` and ``truths`` are aligned arrays of any shape, or
    GridFrame sequences paired by timestamp. Pixels that are NaN in either
    input, or False in ``mask``, are excluded; ``daylight_only`` further drops
    pixels whose truth is 0.
    """
    bins = _check_bins(bins)
    p, t, stamps = _as_arrays(predictions, truths)
    ok = np.isfinite(p) & np.isfinite(t)
    if mask is not None:
        ok &= np.broadcast_to(np.asarray(mask, dtype=bool), ok.shape)
    if daylight_only:
        ok &= t > 0
    if not ok.any():
        raise EmptySelectionError("empty overlap: no valid pixel pairs to evaluate")
    tv = t[ok]
    sq = (p[ok] - tv) ** 2
    stats, total, n_total = [], 0.0, 0
    for lo, hi in bins:
        sel = (tv >= lo) & (tv < hi)
        n = int(sel.sum())
        s = float(np.sum(sq[sel]))
        total += s
        n_total += n
        stats.append(BinStat(lo, hi, math.sqrt(s / n) if n else math.nan, n))
    info = dict(meta or {})
    if stamps:
        info.setdefault("start", int(min(stamps)))
        info.setdefault("end", int(max(stamps)))
    return EvalReport(horizon, math.sqrt(total / n_total), n_total, stats, info)


# ---------------------------------------------------------------------------
# sites


@dataclass(frozen=True)
class SiteSpec:
    """A named location evaluated over a local-time window of whole hours.

    Frames whose local hour lies in ``[start_hour, end_hour]`` (both ends
    included) are kept; local time is UTC + ``utc_offset`` hours.
    """

    name: str
    lat: float
    lon: float
    row: int
    col: int
    start_hour: int = 10
    end_hour: int = 15
    utc_offset: float = -8.0

    @classmethod
    def at(cls, name, lat, lon, extent, shape, **window) -> "SiteSpec":
        row, col = latlon_to_pixel(lat, lon, shape, extent)
        return cls(name, float(lat), float(lon), int(row), int(col), **window)

    def in_window(self, timestamp: int) -> bool:
        local = (timestamp / 3600.0 + self.utc_offset) % 24
        return self.start_hour <= local <= self.end_hour


def read_sites(path, extent, shape, **window) -> list:
    """Sites from a CSV with a ``name,lat,lon`` header (extra columns ignored)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"name", "lat", "lon"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: site CSV lacks column(s) {', '.join(sorted(missing))}")
        return [SiteSpec.at(r["name"], float(r["lat"]), float(r["lon"]), extent, shape, **window)
                for r in reader]


def site_eval(predictions, truths, sites, bins=DEFAULT_BINS, horizon: int = 1,
              meta: dict | None = None) -> EvalReport:
    """Stratified RMSE over the site pixels at hours inside each site's window.

    Frames are paired by timestamp.
    """
    pred = {f.timestamp: f for f in predictions}
    pairs = [(pred[f.timestamp], f) for f in truths if f.timestamp in pred]
    if not sites:
        raise EmptySelectionError("empty selection: no sites given")
    pv, tv = [], []
    for p, t in pairs:
        rows, cols = t.shape
        for s in sites:
            if not (0 <= s.row < rows and 0 <= s.col < cols):
                raise ValueError(f"site {s.name!r} at ({s.row}, {s.col}) is outside the {rows}x{cols} grid")
            if s.in_window(t.timestamp):
                pv.append(p.values[s.row, s.col])
                tv.append(t.values[s.row, s.col])
    if not tv:
        raise EmptySelectionError("empty selection: no (site, hour) pair falls inside the evaluation window")
    info = {"sites": [s.name for s in sites], **(meta or {})}
    return stratified_rmse(np.array(pv), np.array(tv), bins, horizon, meta=info)


# ---------------------------------------------------------------------------
# comparison and presentation


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Relative change from ``a`` to ``b`` per stratum, in percent.

    Positive values mean ``b`` has the lower RMSE.
    """
    if [(x.lo, x.hi) for x in a.bins] != [(x.lo, x.hi) for x in b.bins]:
        raise ValueError("reports use different strata")
    sa, sb = a.strata(), b.strata()
    return {k: (sa[k] - sb[k]) / sa[k] * 100.0 if sa[k] else math.nan for k in sa}


def report_from_values(overall: float, bin_rmse=(), bins=DEFAULT_BINS, horizon: int = 1,
                       meta: dict | None = None) -> EvalReport:
    """Build a report from published RMSE values (sample counts unknown, 0)."""
    bins = _check_bins(bins)
    rm = list(bin_rmse) or [math.nan] * len(bins)
    if len(rm) != len(bins):
        raise ValueError(f"expected {len(bins)} bin values, got {len(rm)}")
    return EvalReport(horizon, float(overall), 0, [BinStat(lo, hi, float(r), 0) for (lo, hi), r in zip(bins, rm)],
                      dict(meta or {}))


def format_table(reports, label: str = "model") -> str:
    """Aligned text table: one row per report, RMSE overall and per bin."""
    reports = list(reports)
    if not reports:
        return ""
    heads = [label, "horizon", "Overall"] + [f"{b.label} ({b.lo:g}-{'' if math.isinf(b.hi) else f'{b.hi:g}'})"
                                             .replace("-)", "+)") for b in reports[0].bins]
    rows = []
    for r in reports:
        name = str(r.meta.get("model", "-"))
        cells = [name, f"t+{r.horizon}", _fmt(r.rmse)] + [_fmt(b.rmse) for b in r.bins]
        rows.append(cells)
    rows.append([""] * len(heads))
    for r in reports:
        rows.append([f"{r.meta.get('model', '-')} (n)", f"t+{r.horizon}", str(r.n)] + [str(b.n) for b in r.bins])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(heads)]
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(heads), line(["-" * w for w in widths])] + [line(r).rstrip() for r in rows])


def format_comparison(deltas: dict) -> str:
    width = max(len(k) for k in deltas)
    return "\n".join(f"{k.ljust(width)}  {v:+7.2f}%" for k, v in deltas.items())


def _fmt(v):
    return "-" if v is None or not math.isfinite(v) else f"{v:.1f}"
