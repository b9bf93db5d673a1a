"""Gridded DSR frames: the DSRG binary format, normalization, sample windows,
time features and a synthetic cloud-advection generator.

Missing pixels are NaN on disk and in :class:`GridFrame` values.
"""
from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

MAGIC = b"DSRG"
VERSION = 1
# magic, version, rows, cols, frame_count, lat_min, lat_max, lon_min, lon_max
_HEADER = struct.Struct("<4sHIII4d")
HEADER_SIZE = _HEADER.size
FRAME_HEADER_SIZE = 8
HOUR = 3600
N_TIME_FEATURES = 36

DEFAULT_EXTENT = (0.0, 1.0, 0.0, 1.0)


class GridFormatError(ValueError):
    """Raised for malformed DSRG data or invalid grid objects."""


def _check_extent(extent):
    lat_min, lat_max, lon_min, lon_max = (float(v) for v in extent)
    if not (lat_min < lat_max and lon_min < lon_max):
        raise GridFormatError(f"extent not well-ordered: {extent}")
    return (lat_min, lat_max, lon_min, lon_max)


@dataclass(frozen=True, eq=False)
class GridFrame:
    """One hourly DSR raster in W/m^2.

    ``values`` has shape (rows, cols), row 0 is the northern edge of
    ``extent = (lat_min, lat_max, lon_min, lon_max)``.
    """

    timestamp: int
    values: np.ndarray
    extent: tuple = DEFAULT_EXTENT

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.flags.writeable:
            values = values.copy()
        if values.ndim != 2:
            raise GridFormatError(f"frame values must be 2-D, got shape {values.shape}")
        finite = values[~np.isnan(values)]
        if not np.all(np.isfinite(finite)) or np.any(finite < 0):
            raise GridFormatError("frame values must be finite and >= 0 (NaN marks missing)")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "extent", _check_extent(self.extent))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, GridFrame):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.extent == other.extent
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GridSequence:
    frames: tuple
    cadence_seconds: int = HOUR

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            return
        first = frames[0]
        for prev, cur in zip(frames, frames[1:]):
            if cur.timestamp <= prev.timestamp:
                raise GridFormatError(
                    f"timestamps not strictly increasing: {prev.timestamp} -> {cur.timestamp}"
                )
        for fr in frames[1:]:
            if fr.shape != first.shape or fr.extent != first.extent:
                raise GridFormatError("all frames must share rows, cols and extent")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    def __eq__(self, other):
        if not isinstance(other, GridSequence):
            return NotImplemented
        return self.cadence_seconds == other.cadence_seconds and self.frames == other.frames

    __hash__ = None

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape

    @property
    def extent(self) -> tuple:
        return self.frames[0].extent

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.int64)

    def stack(self) -> np.ndarray:
        """All frame values as a (T, rows, cols) float32 array."""
        return np.stack([f.values for f in self.frames])

    @classmethod
    def from_array(cls, values, timestamps, extent=DEFAULT_EXTENT, cadence_seconds=HOUR):
        return cls(
            tuple(GridFrame(int(t), v, extent) for t, v in zip(timestamps, values)),
            cadence_seconds,
        )


# ---------------------------------------------------------------------------
# DSRG binary format


def _open_sink(destination):
    if isinstance(destination, (str, os.PathLike)):
        return open(destination, "wb"), True
    return destination, False


def encode_sequence(seq: GridSequence) -> bytes:
    if len(seq) == 0:
        raise GridFormatError("cannot encode an empty sequence")
    rows, cols = seq.shape
    parts = [_HEADER.pack(MAGIC, VERSION, rows, cols, len(seq), *seq.extent)]
    for fr in seq:
        parts.append(struct.pack("<q", fr.timestamp))
        parts.append(np.ascontiguousarray(fr.values, dtype="<f4").tobytes())
    return b"".join(parts)


def write_sequence(seq: GridSequence, destination) -> int:
    """Write ``seq`` as DSRG to a path or binary file object; returns bytes written."""
    payload = encode_sequence(seq)
    sink, owned = _open_sink(destination)
    try:
        sink.write(payload)
    finally:
        if owned:
            sink.close()
    return len(payload)


def decode_sequence(data: bytes) -> GridSequence:
    if len(data) < HEADER_SIZE:
        raise GridFormatError("truncated header")
    magic, version, rows, cols, count, *extent = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise GridFormatError(f"unsupported version {version}")
    if rows == 0 or cols == 0:
        raise GridFormatError(f"bad shape {rows}x{cols}")
    npix = rows * cols
    frame_size = FRAME_HEADER_SIZE + 4 * npix
    frames = []
    offset = HEADER_SIZE
    for k in range(count):
        if offset + frame_size > len(data):
            raise GridFormatError(f"truncated payload in frame {k}")
        (ts,) = struct.unpack_from("<q", data, offset)
        vals = np.frombuffer(data, dtype="<f4", count=npix, offset=offset + FRAME_HEADER_SIZE)
        frames.append(GridFrame(ts, vals.reshape(rows, cols), tuple(extent)))
        offset += frame_size
    if offset != len(data):
        raise GridFormatError(f"{len(data) - offset} trailing bytes after {count} frames")
    return GridSequence(tuple(frames))


def read_sequence(source) -> GridSequence:
    """Read a DSRG sequence from a path, bytes, or binary file object."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        return decode_sequence(bytes(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return decode_sequence(fh.read())
    return decode_sequence(source.read())


def read_csv(source, rows: int | None = None, cols: int | None = None,
             extent=DEFAULT_EXTENT) -> GridSequence:
    """Import ``timestamp,row,col,value`` records. Absent pixels become NaN.

    A header line is optional. Grid shape defaults to max index + 1.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            records = list(csv.reader(fh))
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode()
        records = list(csv.reader(io.StringIO(text)))
    records = [r for r in records if r and r[0].strip()]
    if records and not records[0][0].strip().lstrip("-").isdigit():
        records = records[1:]
    if not records:
        raise GridFormatError("CSV contains no records")
    arr = np.array([(int(r[0]), int(r[1]), int(r[2])) for r in records], dtype=np.int64)
    vals = np.array([float(r[3]) for r in records], dtype=np.float32)
    nrows = rows if rows is not None else int(arr[:, 1].max()) + 1
    ncols = cols if cols is not None else int(arr[:, 2].max()) + 1
    if arr[:, 1].min() < 0 or arr[:, 2].min() < 0 or arr[:, 1].max() >= nrows or arr[:, 2].max() >= ncols:
        raise GridFormatError("CSV row/col index outside grid")
    times = np.unique(arr[:, 0])
    grid = np.full((len(times), nrows, ncols), np.nan, dtype=np.float32)
    tidx = np.searchsorted(times, arr[:, 0])
    grid[tidx, arr[:, 1], arr[:, 2]] = vals
    return GridSequence.from_array(grid, times, extent)


# ---------------------------------------------------------------------------
# geometry


def pixel_size(shape, extent) -> tuple:
    rows, cols = shape
    lat_min, lat_max, lon_min, lon_max = extent
    return (lat_max - lat_min) / rows, (lon_max - lon_min) / cols


def latlon_to_pixel(lat: float, lon: float, shape, extent) -> tuple:
    """Nearest pixel (row, col) for a coordinate; row 0 is ``lat_max``.

    Raises ``ValueError`` outside the extent.
    """
    lat_min, lat_max, lon_min, lon_max = extent
    if not (lat_min <= lat <= lat_max and lon_min <= lon <= lon_max):
        raise ValueError(f"({lat}, {lon}) outside extent {extent}")
    dlat, dlon = pixel_size(shape, extent)
    row = min(int((lat_max - lat) / dlat), shape[0] - 1)
    col = min(int((lon - lon_min) / dlon), shape[1] - 1)
    return row, col


def pixel_center(row: int, col: int, shape, extent) -> tuple:
    lat_min, lat_max, lon_min, lon_max = extent
    dlat, dlon = pixel_size(shape, extent)
    return lat_max - (row + 0.5) * dlat, lon_min + (col + 0.5) * dlon


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationSpec:
    dsr_max: float = 1200.0
    clip: bool = True

    def __post_init__(self):
        if not self.dsr_max > 0:
            raise ValueError("dsr_max must be > 0")


def normalize(frame, spec: NormalizationSpec = NormalizationSpec(), dtype=np.float64) -> np.ndarray:
    """Scale W/m^2 to [0, 1]; missing (NaN) pixels map to 0.

    Accepts a :class:`GridFrame` or a raw array. Computed in float64 so
    that :func:`denormalize` recovers clipped float32 inputs exactly.
    """
    values = frame.values if isinstance(frame, GridFrame) else np.asarray(frame)
    out = values.astype(np.float64)
    np.nan_to_num(out, copy=False, nan=0.0)
    if spec.clip:
        np.minimum(out, spec.dsr_max, out=out)
    out /= spec.dsr_max
    return out.astype(dtype, copy=False)


def denormalize(values, spec: NormalizationSpec = NormalizationSpec(), dtype=np.float32) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) * spec.dsr_max).astype(dtype, copy=False)


def valid_mask(frame) -> np.ndarray:
    values = frame.values if isinstance(frame, GridFrame) else np.asarray(frame)
    return ~np.isnan(values)


# ---------------------------------------------------------------------------
# windows and time features


def encode_time_features(timestamp: int) -> np.ndarray:
    """Month one-hot in [0, 12) followed by UTC hour one-hot in [12, 36)."""
    dt = datetime.fromtimestamp(int(timestamp), tz=timezone.utc)
    feats = np.zeros(N_TIME_FEATURES, dtype=np.float64)
    feats[dt.month - 1] = 1.0
    feats[12 + dt.hour] = 1.0
    return feats


@dataclass(frozen=True, eq=False)
class SampleWindow:
    """Six consecutive frames t-2 .. t+3 split into inputs and targets."""

    inputs: tuple
    targets: tuple
    time_features: np.ndarray = field(repr=False)

    @property
    def timestamp(self) -> int:
        """The prediction instant t (last input frame)."""
        return self.inputs[-1].timestamp

    @property
    def frames(self) -> tuple:
        return tuple(self.inputs) + tuple(self.targets)

    def target_sequence(self, horizon: int) -> tuple:
        """The three frames ending at t + horizon (t-1..t+1 for horizon 1)."""
        if horizon not in (1, 2, 3):
            raise ValueError(f"horizon must be 1, 2 or 3, got {horizon}")
        return self.frames[horizon:horizon + 3]


def build_windows(seq: GridSequence) -> list:
    """Every window of 6 frames spaced exactly one cadence apart.

    Windows that would straddle a timestamp gap are skipped.
    """
    frames = seq.frames
    ts = seq.timestamps
    windows = []
    for start in range(len(frames) - 5):
        if np.all(np.diff(ts[start:start + 6]) == seq.cadence_seconds):
            inputs = frames[start:start + 3]
            windows.append(
                SampleWindow(
                    tuple(inputs),
                    tuple(frames[start + 3:start + 6]),
                    encode_time_features(inputs[-1].timestamp),
                )
            )
    return windows


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticParams:
    """Settings for :func:`generate_synthetic`.

    Clear sky is ``peak * max(0, sin(pi * (h - sunrise) / (sunset - sunrise)))``
    for UTC hour ``h``. Each cloud is a Gaussian blob of opacity ``a*exp(-d^2/2s^2)``
    moving at ``velocity`` = (d_row, d_col) px/hour with periodic wrap; blobs
    combine multiplicatively in transmittance.
    """

    rows: int = 64
    cols: int = 64
    hours: int = 48
    start: int = 1577836800  # 2020-01-01T00:00Z
    n_clouds: int = 6
    velocity: tuple = (0.0, 1.0)
    sigma_range: tuple = (3.0, 8.0)
    opacity_range: tuple = (0.4, 0.9)
    peak: float = 1000.0
    sunrise: float = 6.0
    sunset: float = 18.0
    dsr_max: float = 1200.0
    extent: tuple = (30.0, 50.0, -125.0, -100.0)


def clear_sky(hour: float, params: SyntheticParams) -> float:
    day = params.sunset - params.sunrise
    return params.peak * max(0.0, float(np.sin(np.pi * (hour - params.sunrise) / day)))


def _wrapped(delta, size):
    return (delta + size / 2.0) % size - size / 2.0


def cloud_transmittance(params: SyntheticParams, centers, sigmas, opacities, step: int) -> np.ndarray:
    rows, cols = params.rows, params.cols
    yy = np.arange(rows, dtype=np.float64)[:, None]
    xx = np.arange(cols, dtype=np.float64)[None, :]
    trans = np.ones((rows, cols))
    vy, vx = params.velocity
    for (cy, cx), s, a in zip(centers, sigmas, opacities):
        dy = _wrapped(yy - (cy + vy * step), rows)
        dx = _wrapped(xx - (cx + vx * step), cols)
        trans *= 1.0 - a * np.exp(-(dy ** 2 + dx ** 2) / (2.0 * s ** 2))
    return trans


def generate_synthetic(params: SyntheticParams = SyntheticParams(), seed: int = 0) -> GridSequence:
    if params.rows < 8 or params.cols < 8:
        raise ValueError(f"grid must be at least 8x8, got {params.rows}x{params.cols}")
    if params.hours < 6:
        raise ValueError("need at least 6 hours")
    if params.peak > params.dsr_max:
        raise ValueError("peak clear-sky DSR exceeds dsr_max")
    rng = np.random.default_rng(seed)
    n = params.n_clouds
    centers = np.column_stack([rng.uniform(0, params.rows, n), rng.uniform(0, params.cols, n)])
    sigmas = rng.uniform(*params.sigma_range, n)
    opacities = rng.uniform(*params.opacity_range, n)
    frames = []
    for k in range(params.hours):
        ts = params.start + k * HOUR
        hour = (ts // HOUR) % 24
        values = clear_sky(hour, params) * cloud_transmittance(params, centers, sigmas, opacities, k)
        frames.append(GridFrame(ts, np.clip(values, 0.0, params.dsr_max).astype(np.float32), params.extent))
    return GridSequence(tuple(frames))


def write_pgm(frame: GridFrame, path, dsr_max: float = 1200.0) -> None:
    """8-bit binary PGM preview, grey = round(255 * dsr / dsr_max); missing is 0."""
    v = np.nan_to_num(np.asarray(frame.values, dtype=np.float64), nan=0.0)
    grey = np.floor(np.clip(v / dsr_max, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.cols} {frame.rows}\n255\n".encode())
        fh.write(grey.tobytes())
