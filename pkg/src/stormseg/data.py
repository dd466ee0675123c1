"""Geo-referenced raster I/O and dataset assembly.

Grids are row-major with row 0 at the north edge (dlat < 0 walks south) and
pixel (0, 0) centered at (lat0, lon0).  Two binary containers are defined,
both little-endian with a shared 57-byte header (magic, u32 version=1, u32
width, u32 height, f64 lat0/lon0/dlat/dlon, u8 cyclic flag, i64 unix
seconds): ".f32grid" carries f32 values, ".u8mask" carries {0,1} bytes.
Label tables are CSV with header ``timestamp,lat,lon,wind_kt``; timestamps
are ISO-8601 UTC and wind may be empty (label sources without wind speeds).

Rasterization stamps a box of ones on the nearest grid pixel to each record
center; rows clip at the poles, columns wrap across the dateline on cyclic
grids.  The synthetic-scene generator produces smooth-background frames with
a bright band distractor and drifting anisotropic vortices, standing in for
real model/satellite rasters at desk scale.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError, DomainError, FormatError, ParameterError, ShapeError
from .tensor import Rng

_HEADER = struct.Struct("<4sIIIddddBq")
_GRID_MAGIC = b"F32G"
_MASK_MAGIC = b"U8MK"
FORMAT_VERSION = 1
LABEL_HEADER = ["timestamp", "lat", "lon", "wind_kt"]
CADENCE_3H = timedelta(hours=3)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a lat/lon raster; (lat0, lon0) is the center of pixel (0,0)."""

    width: int
    height: int
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    cyclic_longitude: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"grid extents must be positive, got {self.width}x{self.height}")
        if self.dlat == 0 or self.dlon == 0:
            raise ParameterError("pixel steps must be nonzero")
        # wrap arithmetic needs the grid to tile the circle at most once
        if self.cyclic_longitude and self.width * abs(self.dlon) > 360.0 + 1e-9:
            raise ParameterError(f"cyclic width {self.width} x |dlon| {abs(self.dlon)} "
                                 "exceeds 360 deg")

    def latlon_to_rowcol(self, lat: float, lon: float) -> tuple[int, int]:
        """Nearest pixel (half-up rounding); the column is not yet wrapped."""
        row = int(math.floor((lat - self.lat0) / self.dlat + 0.5))
        col = int(math.floor(((lon % 360.0) - self.lon0) / self.dlon + 0.5))
        if self.cyclic_longitude:
            col %= self.width
        return row, col

    def rowcol_to_latlon(self, row: float, col: float) -> tuple[float, float]:
        return self.lat0 + row * self.dlat, (self.lon0 + col * self.dlon) % 360.0


GRID_GFS = GridSpec(720, 361, lat0=90.0, lon0=0.0, dlat=-0.5, dlon=0.5,
                    cyclic_longitude=True)
SYNTH_GRID = GridSpec(128, 128, lat0=40.0, lon0=180.0, dlat=-0.5, dlon=0.5,
                      cyclic_longitude=False)


def _as_utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass
class GridFrame:
    """One timestamped raster on a grid (3-hourly cadence for forecast data)."""

    spec: GridSpec
    timestamp: datetime
    values: np.ndarray

    def __post_init__(self):
        self.timestamp = _as_utc(self.timestamp)
        self.values = np.asarray(self.values, np.float32)
        want = (self.spec.height, self.spec.width)
        if self.values.shape != want:
            raise ShapeError(f"raster shape {self.values.shape} != (height, width) {want}")


@dataclass
class CycloneRecord:
    """A labeled storm center; wind is None for label sources without speeds."""

    timestamp: datetime
    lat: float
    lon: float
    wind: float | None = None

    def __post_init__(self):
        self.timestamp = _as_utc(self.timestamp)
        if not -90.0 <= self.lat <= 90.0:
            raise DomainError(f"latitude {self.lat} outside [-90, 90]")
        self.lon = self.lon % 360.0


@dataclass
class Sample:
    """A 3-channel input (frames at t, t-1, t-2) with its truth mask at t."""

    input: np.ndarray
    mask: np.ndarray
    timestamp: datetime

    def __post_init__(self):
        self.timestamp = _as_utc(self.timestamp)
        if self.input.ndim != 3 or self.input.shape[0] != 3:
            raise ShapeError(f"input must be 3 x H x W, got {self.input.shape}")
        if self.mask.shape != self.input.shape[1:]:
            raise ShapeError(f"mask shape {self.mask.shape} != frame shape "
                             f"{self.input.shape[1:]}")


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    train_years: frozenset[int]
    validation_years: frozenset[int]
    test_years: frozenset[int]


# -- binary raster containers ----------------------------------------------


def _write_raster(magic: bytes, frame_spec: GridSpec, ts: datetime, payload: bytes, path):
    head = _HEADER.pack(magic, FORMAT_VERSION, frame_spec.width, frame_spec.height,
                        frame_spec.lat0, frame_spec.lon0, frame_spec.dlat, frame_spec.dlon,
                        1 if frame_spec.cyclic_longitude else 0,
                        int(_as_utc(ts).timestamp()))
    with open(path, "wb") as f:
        f.write(head + payload)


def _read_raster(magic: bytes, itemsize: int, path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"file ends at byte {len(buf)}, header needs {_HEADER.size}")
    got_magic, version, width, height, lat0, lon0, dlat, dlon, cyc, unix = \
        _HEADER.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r} at offset 0, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    spec = GridSpec(width, height, lat0, lon0, dlat, dlon, bool(cyc))
    want = width * height * itemsize
    have = len(buf) - _HEADER.size
    if have != want:
        raise FormatError(f"payload at offset {_HEADER.size}: expected {want} bytes for "
                          f"{width}x{height}, got {have}")
    ts = datetime.fromtimestamp(unix, tz=timezone.utc)
    return spec, ts, buf[_HEADER.size:]


def write_grid(frame: GridFrame, path) -> None:
    payload = np.ascontiguousarray(frame.values, dtype="<f4").tobytes()
    _write_raster(_GRID_MAGIC, frame.spec, frame.timestamp, payload, path)


def read_grid(path) -> GridFrame:
    spec, ts, raw = _read_raster(_GRID_MAGIC, 4, path)
    values = np.frombuffer(raw, dtype="<f4").reshape(spec.height, spec.width)
    return GridFrame(spec, ts, values.astype(np.float32))


def write_mask(spec: GridSpec, ts: datetime, mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.shape != (spec.height, spec.width):
        raise ShapeError(f"mask shape {mask.shape} != (height, width) "
                         f"{(spec.height, spec.width)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask values must be exactly 0 or 1")
    _write_raster(_MASK_MAGIC, spec, ts, mask.astype(np.uint8).tobytes(), path)


def read_mask(path) -> tuple[GridSpec, datetime, np.ndarray]:
    spec, ts, raw = _read_raster(_MASK_MAGIC, 1, path)
    mask = np.frombuffer(raw, dtype=np.uint8).reshape(spec.height, spec.width)
    bad = (mask > 1).sum()
    if bad:
        raise FormatError(f"{bad} mask bytes outside {{0,1}}")
    return spec, ts, mask.copy()


# -- label tables ----------------------------------------------------------


def parse_timestamp(text: str, where: str) -> datetime:
    try:
        return _as_utc(datetime.fromisoformat(text.replace("Z", "+00:00")))
    except ValueError as e:
        raise FormatError(f"{where}: bad timestamp {text!r} ({e})") from e


def format_timestamp(ts: datetime) -> str:
    return _as_utc(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


def read_labels(path) -> list[CycloneRecord]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != LABEL_HEADER:
        raise FormatError(f"label table must start with header {','.join(LABEL_HEADER)!r}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"line {i}: expected 4 fields, got {len(row)}")
        where = f"line {i}"
        ts = parse_timestamp(row[0], where)
        try:
            lat, lon = float(row[1]), float(row[2])
            wind = float(row[3]) if row[3].strip() else None
        except ValueError as e:
            raise FormatError(f"{where}: bad numeric field ({e})") from e
        try:
            out.append(CycloneRecord(ts, lat, lon, wind))
        except DomainError as e:
            raise FormatError(f"{where}: {e}") from e
    return out


def write_labels(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LABEL_HEADER)
        for r in records:
            wind = "" if r.wind is None else f"{r.wind:g}"
            w.writerow([format_timestamp(r.timestamp), f"{r.lat:g}", f"{r.lon:g}", wind])


# -- rasterization ---------------------------------------------------------


def rasterize_labels(records, spec: GridSpec, box: int,
                     wind_min: float | None = None) -> tuple[np.ndarray, int]:
    """Stamp a box of ones per record center; returns (mask, skipped count).

    Records below wind_min contribute nothing; records without wind speeds
    always pass the filter.  Centers off the grid are skipped and counted.
    An odd box is symmetric about the center; an even box spans
    [c - box/2, c + box/2 - 1].  Rows clip, columns wrap on cyclic grids.
    """
    if box < 1:
        raise ParameterError(f"box must be >= 1, got {box}")
    mask = np.zeros((spec.height, spec.width), np.uint8)
    skipped = 0
    for rec in records:
        if wind_min is not None and rec.wind is not None and rec.wind < wind_min:
            continue
        row, col = spec.latlon_to_rowcol(rec.lat, rec.lon)
        if not 0 <= row < spec.height or not 0 <= col < spec.width:
            skipped += 1
            continue
        rlo = max(row - box // 2, 0)
        rhi = min(row - box // 2 + box - 1, spec.height - 1)
        clo = col - box // 2
        chi = clo + box - 1
        if spec.cyclic_longitude:
            cols = np.arange(clo, chi + 1) % spec.width
        else:
            cols = np.arange(max(clo, 0), min(chi, spec.width - 1) + 1)
        mask[np.ix_(np.arange(rlo, rhi + 1), cols)] = 1
    return mask, skipped


# -- sample assembly -------------------------------------------------------


def stack_temporal(frames: list[GridFrame],
                   cadence: timedelta = CADENCE_3H) -> list[tuple[datetime, np.ndarray]]:
    """(t, 3 x H x W stack) for every t whose two predecessors exist.

    Channel order is (t, t - cadence, t - 2 cadence); gaps yield no entry.
    """
    by_time: dict[datetime, GridFrame] = {}
    for f in frames:
        if f.timestamp in by_time:
            raise ContractError(f"duplicate frame timestamp {format_timestamp(f.timestamp)}")
        by_time[f.timestamp] = f
    times = [f.timestamp for f in frames]
    if times != sorted(times):
        raise ContractError("frames must be sorted by timestamp")
    out = []
    for t, f in by_time.items():
        prev1 = by_time.get(t - cadence)
        prev2 = by_time.get(t - 2 * cadence)
        if prev1 is None or prev2 is None:
            continue
        if prev1.spec != f.spec or prev2.spec != f.spec:
            raise ContractError("frames in one stack must share a grid spec")
        out.append((t, np.stack([f.values, prev1.values, prev2.values])))
    return out


def build_samples(frames: list[GridFrame], records, box: int,
                  wind_min: float | None = None,
                  cadence: timedelta = CADENCE_3H) -> tuple[list[Sample], int]:
    """Pair each temporal stack with the mask rasterized from time-t records."""
    by_time: dict[datetime, list[CycloneRecord]] = {}
    for r in records:
        by_time.setdefault(r.timestamp, []).append(r)
    samples = []
    skipped = 0
    for t, stacked in stack_temporal(frames, cadence):
        spec = frames[0].spec
        mask, sk = rasterize_labels(by_time.get(t, []), spec, box, wind_min)
        skipped += sk
        samples.append(Sample(stacked, mask, t))
    return samples, skipped


def split_by_year(samples: list[Sample], train_years, validation_years,
                  test_years) -> DatasetSplit:
    """Deterministic partition by each sample's calendar year."""
    tr, va, te = frozenset(train_years), frozenset(validation_years), frozenset(test_years)
    if not tr or not va or not te:
        raise ContractError("every split needs at least one assigned year")
    if tr & va or tr & te or va & te:
        raise ContractError("year sets must be pairwise disjoint")
    split = DatasetSplit([], [], [], tr, va, te)
    for s in samples:
        year = s.timestamp.year
        if year in tr:
            split.train.append(s)
        elif year in va:
            split.validation.append(s)
        elif year in te:
            split.test.append(s)
        else:
            raise ContractError(f"year {year} is not assigned to any split")
    return split


# -- normalization ---------------------------------------------------------


def normalize(inputs: np.ndarray, stats: dict | None = None) -> tuple[np.ndarray, dict]:
    """Per-channel min-max scaling of N x C x H x W inputs to [0, 1].

    When stats is None the extrema are measured on these inputs (the training
    split); pass the recorded stats to reuse them elsewhere.  A constant
    channel scales to all zeros with a warning.
    """
    inputs = np.asarray(inputs, np.float32)
    if inputs.ndim != 4:
        raise ShapeError(f"expected N x C x H x W, got {inputs.shape}")
    c = inputs.shape[1]
    if stats is None:
        stats = {"min": inputs.min(axis=(0, 2, 3)).tolist(),
                 "max": inputs.max(axis=(0, 2, 3)).tolist()}
    lo = np.asarray(stats["min"], np.float32)
    hi = np.asarray(stats["max"], np.float32)
    if lo.shape != (c,) or hi.shape != (c,):
        raise ShapeError(f"stats must carry {c} channel extrema")
    span = hi - lo
    flat = span == 0
    if np.any(flat):
        warnings.warn(f"constant channel(s) {np.flatnonzero(flat).tolist()} scaled to 0.0")
    safe = np.where(flat, 1.0, span)
    out = (inputs - lo[None, :, None, None]) / safe[None, :, None, None]
    out[:, flat] = 0.0
    return out.astype(np.float32), stats


# -- resampling ------------------------------------------------------------


def _lerp_axis(v: np.ndarray, new: int, axis: int) -> np.ndarray:
    old = v.shape[axis]
    if new == old:
        return v
    pos = np.arange(new) * (old - 1) / (new - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, old - 1)
    frac = (pos - i0).astype(v.dtype)
    shape = [1] * v.ndim
    shape[axis] = new
    a = np.take(v, i0, axis=axis)
    b = np.take(v, i1, axis=axis)
    return a + (b - a) * frac.reshape(shape)


def resample_bilinear(frame: GridFrame, new_width: int, new_height: int) -> GridFrame:
    """Align-corners bilinear resampling (corner pixel centers are preserved).

    Changing extents rescales the per-pixel steps; the result no longer tiles
    the full circle, so resized grids are marked non-cyclic.
    """
    if new_width < 2 or new_height < 2:
        raise ParameterError("target extents must be >= 2")
    s = frame.spec
    if (new_width, new_height) == (s.width, s.height):
        return GridFrame(s, frame.timestamp, frame.values.copy())
    vals = _lerp_axis(_lerp_axis(frame.values, new_height, 0), new_width, 1)
    spec = GridSpec(
        width=new_width,
        height=new_height,
        lat0=s.lat0,
        lon0=s.lon0,
        dlat=s.dlat * (s.height - 1) / (new_height - 1),
        dlon=s.dlon * (s.width - 1) / (new_width - 1),
        cyclic_longitude=False,
    )
    return GridFrame(spec, frame.timestamp, vals.astype(np.float32))


# -- synthetic scenes ------------------------------------------------------


@dataclass
class SynthParams:
    """Knobs for generated scenes; defaults put vortices well above clutter."""

    t0: datetime = field(default_factory=lambda: datetime(2015, 9, 1, tzinfo=timezone.utc))
    cadence: timedelta = CADENCE_3H
    cyclone_amp: tuple[float, float] = (1.5, 2.5)
    cyclone_sigma: tuple[float, float] = (4.0, 7.0)
    drift_pixels: tuple[float, float] = (1.0, 3.0)
    band_amp: float = 0.8
    band_sigma: float = 6.0
    noise_amp: float = 0.25
    noise_smooth: float = 6.0
    wind_kt: tuple[float, float] = (35.0, 120.0)


def synth_scene(rng: Rng, spec: GridSpec, n_cyclones: int,
                params: SynthParams | None = None
                ) -> tuple[list[GridFrame], list[CycloneRecord]]:
    """Three consecutive frames plus storm-center records at each timestamp.

    Background is smoothed noise plus one bright horizontal band (an
    ITCZ-like distractor); each vortex is an anisotropic Gaussian bump that
    drifts a little per step so the temporal channels carry motion.
    """
    if n_cyclones < 0:
        raise ParameterError(f"n_cyclones must be >= 0, got {n_cyclones}")
    p = params or SynthParams()
    h, w = spec.height, spec.width
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    band_row = rng.uniform((), 0.55 * h, 0.75 * h, dtype="f64")
    storms = []
    for _ in range(n_cyclones):
        r0 = float(rng.uniform((), 0.1 * h, 0.9 * h, dtype="f64"))
        c0 = float(rng.uniform((), 0.0, float(w), dtype="f64"))
        amp = float(rng.uniform((), *p.cyclone_amp, dtype="f64"))
        sr = float(rng.uniform((), *p.cyclone_sigma, dtype="f64"))
        sc = float(rng.uniform((), *p.cyclone_sigma, dtype="f64"))
        angle = float(rng.uniform((), 0.0, 2.0 * np.pi, dtype="f64"))
        step = float(rng.uniform((), *p.drift_pixels, dtype="f64"))
        wind = float(rng.uniform((), *p.wind_kt, dtype="f64"))
        storms.append((r0, c0, amp, sr, sc, angle, step, wind))

    frames, records = [], []
    for k in range(3):  # chronological: t-2, t-1, t
        ts = p.t0 - (2 - k) * p.cadence
        white = rng.normal((h, w), 1.0, dtype="f64")
        smooth = gaussian_filter(white, p.noise_smooth)
        sd = smooth.std()
        field_v = (smooth / sd if sd > 0 else smooth) * p.noise_amp
        field_v = field_v + p.band_amp * np.exp(
            -((rows - band_row) ** 2) / (2.0 * p.band_sigma**2))
        for r0, c0, amp, sr, sc, angle, step, wind in storms:
            r = r0 + k * step * np.sin(angle)
            c = c0 + k * step * np.cos(angle)
            dr = rows - r
            if spec.cyclic_longitude:
                dc = (cols - c + w / 2.0) % w - w / 2.0
            else:
                dc = cols - c
            field_v = field_v + amp * np.exp(-(dr**2 / (2 * sr**2) + dc**2 / (2 * sc**2)))
            lat, lon = spec.rowcol_to_latlon(r, c)
            if -90.0 <= lat <= 90.0:
                records.append(CycloneRecord(ts, lat, lon, wind))
        frames.append(GridFrame(spec, ts, field_v.astype(np.float32)))
    return frames, records
