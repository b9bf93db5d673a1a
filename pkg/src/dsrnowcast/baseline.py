"""Reference forecasters: a pixel-wise ridge regression on 3-hour patches and
persistence.

The linear model maps the ``patch_size x patch_size`` neighbourhoods of the
three most recent frames (flattened in hour, row, col order, oldest hour
first) to the next-hour value of the centre pixel. The same weights are
applied at every location.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .gridio import HOUR, GridFrame, GridSequence, NormalizationSpec
from .network import _read, _write, decode_params, encode_params

N_HOURS = 3
CHECKPOINT_MAGIC = b"NWCL"


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class LinearPixelModel:
    weights: np.ndarray
    intercept: float
    patch_size: int = 40
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    horizon: int = 1

    def __post_init__(self):
        if self.weights.shape != (N_HOURS * self.patch_size ** 2,):
            raise ValueError(f"expected {N_HOURS * self.patch_size ** 2} weights, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite coefficients")

    def predict_features(self, features) -> np.ndarray:
        scale = self.normalization.dsr_max
        return (np.asarray(features, dtype=np.float64) / scale) @ self.weights * scale + self.intercept * scale


def _offsets(patch_size):
    lo = patch_size // 2
    return lo, patch_size - lo  # rows y-lo .. y+hi-1


def patch_region(shape, patch_size, region=None) -> tuple:
    """Clip ``region = (row0, row1, col0, col1)`` (half-open) to pixels that
    admit a full patch."""
    rows, cols = shape
    lo, hi = _offsets(patch_size)
    r0, r1, c0, c1 = region if region is not None else (0, rows, 0, cols)
    r0, c0 = max(r0, lo), max(c0, lo)
    r1, c1 = min(r1, rows - hi + 1), min(c1, cols - hi + 1)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"region {region} admits no {patch_size}x{patch_size} patch in a {rows}x{cols} grid")
    return r0, r1, c0, c1


def usable_times(seq: GridSequence, lead: int = 1) -> np.ndarray:
    """Indices t with frames t-2 .. t+lead on an unbroken hourly cadence."""
    ts = seq.timestamps
    out = []
    for t in range(N_HOURS - 1, len(ts) - lead):
        if np.all(np.diff(ts[t - N_HOURS + 1:t + lead + 1]) == seq.cadence_seconds):
            out.append(t)
    return np.array(out, dtype=np.int64)


def _gather(stack, tt, ys, xs, patch_size):
    lo, _ = _offsets(patch_size)
    win = np.lib.stride_tricks.sliding_window_view(stack, (patch_size, patch_size), axis=(1, 2))
    hours = tt[:, None] + np.arange(-N_HOURS + 1, 1)[None, :]
    feats = win[hours, (ys - lo)[:, None], (xs - lo)[:, None]]
    return feats.reshape(len(tt), -1)


def extract_patch_samples(seq: GridSequence, region=None, patch_size: int = 40,
                          max_samples: int | None = None, seed: int = 0, lead: int = 1):
    """Feature matrix (n, 3*patch_size**2) and next-hour targets (n,).

    One candidate row per (usable hour, region pixel); candidates with any
    missing value are dropped, and a seeded subsample is taken when more than
    ``max_samples`` remain. Also returns the (t, row, col) index of each row.
    """
    r0, r1, c0, c1 = patch_region(seq.shape, patch_size, region)
    times = usable_times(seq, lead)
    if len(times) == 0:
        raise ValueError("sequence has no usable hour with 3 prior frames and a target")
    stack = seq.stack()
    yy, xx = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    n_pix = yy.size
    cand = np.arange(len(times) * n_pix)
    if max_samples is not None and len(cand) > max_samples:
        rng = np.random.default_rng(seed)
        cand = np.sort(rng.choice(len(cand), size=max_samples, replace=False))
    tt = times[cand // n_pix]
    ys = yy.reshape(-1)[cand % n_pix]
    xs = xx.reshape(-1)[cand % n_pix]
    features = _gather(stack, tt, ys, xs, patch_size)
    targets = stack[tt + lead, ys, xs]
    ok = np.isfinite(targets) & np.isfinite(features).all(axis=1)
    index = np.column_stack([tt, ys, xs])
    return features[ok], targets[ok], index[ok]


def fit_linear(features, targets, ridge: float = 1e-3, patch_size: int | None = None,
               normalization: NormalizationSpec = NormalizationSpec(), chunk: int = 4096,
               horizon: int = 1) -> LinearPixelModel:
    """Ridge regression with an unpenalized intercept via normal equations.

    Minimizes ``sum((X w + b - y)^2) + ridge * |w|^2`` in normalized units.
    """
    X = np.asarray(features)
    y = np.asarray(targets, dtype=np.float64)
    n, d = X.shape
    if n < 1:
        raise ValueError("need at least one sample")
    if patch_size is None:
        patch_size = int(round(np.sqrt(d / N_HOURS)))
    scale = normalization.dsr_max
    mean_x = X.mean(axis=0, dtype=np.float64) / scale
    mean_y = y.mean() / scale
    gram = np.zeros((d, d))
    rhs = np.zeros(d)
    for s in range(0, n, chunk):
        xc = X[s:s + chunk].astype(np.float64) / scale - mean_x
        gram += xc.T @ xc
        rhs += xc.T @ (y[s:s + chunk] / scale - mean_y)
    gram[np.diag_indices(d)] += ridge
    try:
        factor = scipy.linalg.cho_factor(gram, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal equations are singular (ridge={ridge}): {exc}") from None
    w = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    b = mean_y - mean_x @ w
    return LinearPixelModel(w, float(b), patch_size, normalization, horizon)


def predict_linear_raw(model: LinearPixelModel, seq: GridSequence, region=None, t: int | None = None,
                       chunk: int = 4096) -> np.ndarray:
    """Unclipped float64 forecast ``model.horizon`` hours after frame ``t``.

    ``t`` defaults to the last frame. Pixels outside ``region`` or lacking a
    full patch are NaN.
    """
    if t is None:
        t = len(seq) - 1
    if t < N_HOURS - 1 or t >= len(seq):
        raise ValueError(f"frame index {t} lacks {N_HOURS} prior frames")
    p = model.patch_size
    r0, r1, c0, c1 = patch_region(seq.shape, p, region)
    stack = np.stack([seq[k].values for k in range(t - N_HOURS + 1, t + 1)])
    yy, xx = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    ys, xs = yy.reshape(-1), xx.reshape(-1)
    out = np.full(seq.shape, np.nan)
    for s in range(0, len(ys), chunk):
        tt = np.full(len(ys[s:s + chunk]), N_HOURS - 1)
        out[ys[s:s + chunk], xs[s:s + chunk]] = model.predict_features(
            _gather(stack, tt, ys[s:s + chunk], xs[s:s + chunk], p))
    return out


def predict_linear(model: LinearPixelModel, seq: GridSequence, region=None, t: int | None = None,
                   chunk: int = 4096) -> GridFrame:
    """Forecast frame ``model.horizon`` hours after frame ``t`` (default: the last).

    Negative values are clipped to zero; pixels without a forecast are NaN.
    """
    if t is None:
        t = len(seq) - 1
    out = predict_linear_raw(model, seq, region, t, chunk)
    out = np.clip(out, 0.0, None).astype(np.float32)
    return GridFrame(seq[t].timestamp + model.horizon * HOUR, out, seq.extent)


def persistence(seq: GridSequence, t: int | None = None, horizons=(1, 2, 3)) -> list:
    """Frame ``t`` copied forward to each horizon."""
    if t is None:
        t = len(seq) - 1
    base = seq[t]
    return [GridFrame(base.timestamp + h * HOUR, base.values, base.extent) for h in horizons]


def save_linear(model: LinearPixelModel, sink) -> int:
    header = {"patch_size": model.patch_size, "dsr_max": model.normalization.dsr_max,
              "clip": model.normalization.clip, "horizon": model.horizon}
    params = {"weights": model.weights, "intercept": np.array([model.intercept])}
    return _write(encode_params(CHECKPOINT_MAGIC, header, params), sink)


def load_linear(source) -> LinearPixelModel:
    header, params = decode_params(CHECKPOINT_MAGIC, _read(source))
    return LinearPixelModel(
        params["weights"].astype(np.float64),
        float(params["intercept"][0]),
        int(header["patch_size"]),
        NormalizationSpec(header["dsr_max"], header["clip"]),
        int(header.get("horizon", 1)),
    )
