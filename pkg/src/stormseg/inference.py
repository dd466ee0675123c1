"""Trained-model inference, ROI extraction, overlays, and timing.

A probability map comes from running the checkpointed model over a stacked
frame triple (t, t-1, t-2) normalized with the checkpoint's training stats.
Thresholding keeps pixels with probability >= tau; connected components of
the thresholded mask (4-connected, wrapping across the dateline on cyclic
grids) become geo-referenced ROI boxes after a minimum-area speckle filter.
A wrapped box reports col_min > col_max, mirroring its split pixel span.

Overlays are binary PPM (P6): grayscale base with red box outlines, or a
blue-to-red probability ramp.  Timing reports per-frame seconds and the
derived per-month figure (248 frames: 8 per day for 31 days).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .data import (
    CADENCE_3H,
    GridFrame,
    GridSpec,
    format_timestamp,
    normalize,
    parse_timestamp,
)
from .errors import ContractError, FormatError, ParameterError, ShapeError
from .model import Checkpoint, Model
from .tensor import Rng, Tensor

FRAMES_PER_MONTH = 248
DEFAULT_TAU = 0.7
DEFAULT_MIN_AREA = 4
ROI_COLUMNS = ("timestamp", "row_min", "row_max", "col_min", "col_max",
               "lat_min", "lat_max", "lon_min", "lon_max", "confidence",
               "area_pixels")


@dataclass
class RoiBox:
    """Tight bounding box of one detected component (pixel bounds inclusive).

    A box that crosses the dateline has col_min > col_max; its longitude
    bounds follow the columns, so lon_min > lon_max marks the same wrap.
    """

    row_min: int
    row_max: int
    col_min: int
    col_max: int
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    confidence: float
    area_pixels: int

    def __post_init__(self):
        if self.row_min > self.row_max:
            raise ParameterError(f"empty row span [{self.row_min}, {self.row_max}]")
        if min(self.row_min, self.col_min, self.col_max) < 0:
            raise ParameterError("pixel bounds must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise ParameterError(f"confidence {self.confidence} outside [0, 1]")
        if self.area_pixels < 1:
            raise ParameterError(f"area must be >= 1, got {self.area_pixels}")

    @property
    def wraps(self) -> bool:
        return self.col_min > self.col_max


@dataclass
class TimingReport:
    seconds_per_frame: float
    seconds_per_month: float

    def __post_init__(self):
        if self.seconds_per_frame <= 0 or self.seconds_per_month <= 0:
            raise ParameterError("timings must be positive")


class Predictor:
    """A checkpointed model plus its normalization stats, ready to run."""

    def __init__(self, ckpt: Checkpoint):
        if ckpt.config.in_channels != 3:
            raise ContractError(f"frame stacking yields 3 channels, model wants "
                                f"{ckpt.config.in_channels}")
        if ckpt.norm_stats is None:
            raise ContractError("checkpoint carries no normalization stats")
        self.model = Model.from_checkpoint(ckpt)
        self.stats = ckpt.norm_stats

    def probability_map(self, frames, at: datetime | None = None,
                        cadence: timedelta = CADENCE_3H) -> GridFrame:
        by_time = {}
        for f in frames:
            if f.timestamp in by_time:
                raise ContractError(f"duplicate frame timestamp "
                                    f"{format_timestamp(f.timestamp)}")
            by_time[f.timestamp] = f
        if not by_time:
            raise ContractError("no frames given")
        t = at if at is not None else max(by_time)
        needed = [t, t - cadence, t - 2 * cadence]
        missing = [format_timestamp(m) for m in needed if m not in by_time]
        if missing:
            raise ContractError(f"missing predecessor frames at {', '.join(missing)}")
        triple = [by_time[m] for m in needed]
        spec = triple[0].spec
        if any(f.spec != spec for f in triple):
            raise ContractError("stacked frames must share a grid spec")
        x = np.stack([f.values for f in triple])[None]
        x, _ = normalize(x, self.stats)
        out = self.model.forward(Tensor(x), mode="eval")
        return GridFrame(spec, t, out.values[0, 0])


def infer(ckpt: Checkpoint, frames, at: datetime | None = None,
          cadence: timedelta = CADENCE_3H) -> GridFrame:
    """Probability map at time `at` (default: the latest frame)."""
    return Predictor(ckpt).probability_map(frames, at, cadence)


def threshold_mask(prob, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Binary mask of pixels with probability >= tau."""
    if not 0.0 < tau <= 1.0:
        raise ParameterError(f"tau must be in (0, 1], got {tau}")
    values = prob.values if isinstance(prob, GridFrame) else np.asarray(prob)
    return (values >= tau).astype(np.uint8)


def _components(mask: np.ndarray, cyclic: bool) -> list[list[tuple[int, int]]]:
    h, w = mask.shape
    seen = np.zeros(mask.shape, bool)
    comps = []
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        seen[r0, c0] = True
        stack = [(int(r0), int(c0))]
        comp = []
        while stack:
            r, c = stack.pop()
            comp.append((r, c))
            for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if not 0 <= rr < h:
                    continue
                if cyclic:
                    cc %= w
                elif not 0 <= cc < w:
                    continue
                if mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    stack.append((rr, cc))
        comps.append(comp)
    return comps


def _col_bounds(cols, w: int, cyclic: bool) -> tuple[int, int]:
    cs = sorted(set(cols))
    if not cyclic or len(cs) == w:
        return cs[0], cs[-1]
    gaps = [(cs[i + 1] - cs[i], i) for i in range(len(cs) - 1)]
    best, at = max(gaps, default=(0, -1))
    wrap_gap = cs[0] + w - cs[-1]
    if wrap_gap >= best:
        return cs[0], cs[-1]
    return cs[at + 1], cs[at]


def extract_rois(mask: np.ndarray, spec: GridSpec, min_area: int = DEFAULT_MIN_AREA,
                 probabilities: np.ndarray | None = None) -> list[RoiBox]:
    """Connected components as geo-referenced boxes, largest confidence first.

    Confidence is the maximum probability inside the component; passing no
    probability map scores every component from the mask itself (1.0).
    """
    mask = np.asarray(mask)
    if mask.shape != (spec.height, spec.width):
        raise ShapeError(f"mask shape {mask.shape} != grid {(spec.height, spec.width)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask values must be exactly 0 or 1")
    if min_area < 1:
        raise ParameterError(f"min_area must be >= 1, got {min_area}")
    if probabilities is None:
        probabilities = mask
    probabilities = np.asarray(probabilities)
    if probabilities.shape != mask.shape:
        raise ShapeError(f"probability shape {probabilities.shape} != mask {mask.shape}")

    rois = []
    for comp in _components(mask, spec.cyclic_longitude):
        if len(comp) < min_area:
            continue
        rows = [r for r, _ in comp]
        row_min, row_max = min(rows), max(rows)
        col_min, col_max = _col_bounds([c for _, c in comp], spec.width,
                                       spec.cyclic_longitude)
        lat_a = spec.rowcol_to_latlon(row_min, 0)[0]
        lat_b = spec.rowcol_to_latlon(row_max, 0)[0]
        rois.append(RoiBox(
            row_min=row_min, row_max=row_max, col_min=col_min, col_max=col_max,
            lat_min=min(lat_a, lat_b), lat_max=max(lat_a, lat_b),
            lon_min=spec.rowcol_to_latlon(0, col_min)[1],
            lon_max=spec.rowcol_to_latlon(0, col_max)[1],
            confidence=float(max(probabilities[r, c] for r, c in comp)),
            area_pixels=len(comp),
        ))
    rois.sort(key=lambda r: (-r.confidence, r.row_min, r.col_min))
    return rois


def write_rois(rows, path) -> None:
    """rows: iterable of (timestamp, RoiBox); floats keep full precision."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ROI_COLUMNS)
        for ts, r in rows:
            w.writerow([format_timestamp(ts), r.row_min, r.row_max, r.col_min,
                        r.col_max, repr(r.lat_min), repr(r.lat_max), repr(r.lon_min),
                        repr(r.lon_max), repr(r.confidence), r.area_pixels])


def read_rois(path) -> list[tuple[datetime, RoiBox]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != ROI_COLUMNS:
        raise FormatError(f"ROI table header must be {','.join(ROI_COLUMNS)!r}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(ROI_COLUMNS):
            raise FormatError(f"line {i}: expected {len(ROI_COLUMNS)} fields")
        try:
            ts = parse_timestamp(row[0], f"line {i}")
            out.append((ts, RoiBox(*(int(v) for v in row[1:5]),
                                   *(float(v) for v in row[5:10]),
                                   int(row[10]))))
        except ValueError as e:
            raise FormatError(f"line {i}: {e}") from e
    return out


# -- rendering -------------------------------------------------------------


def _stretch(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def _box_cols(roi: RoiBox, w: int) -> list[int]:
    if not roi.wraps:
        return list(range(roi.col_min, roi.col_max + 1))
    return list(range(roi.col_min, w)) + list(range(0, roi.col_max + 1))


def render_overlay(frame: GridFrame, path, rois=None,
                   probabilities=None) -> None:
    """Write a P6 pixmap: grayscale + red ROI outlines, or a blue-red ramp.

    Exactly one of rois/probabilities may be given; neither draws the bare
    grayscale base.
    """
    if rois is not None and probabilities is not None:
        raise ParameterError("pass rois or probabilities, not both")
    h, w = frame.values.shape
    if probabilities is not None:
        p = probabilities.values if isinstance(probabilities, GridFrame) \
            else np.asarray(probabilities)
        if p.shape != (h, w):
            raise ShapeError(f"probability shape {p.shape} != frame {(h, w)}")
        p = np.clip(p, 0.0, 1.0)
        rgb = np.zeros((h, w, 3), np.uint8)
        rgb[..., 0] = np.round(255.0 * p)
        rgb[..., 2] = np.round(255.0 * (1.0 - p))
    else:
        rgb = np.repeat(_stretch(frame.values)[..., None], 3, axis=2)
        for roi in rois or []:
            cols = _box_cols(roi, w)
            rows = range(roi.row_min, roi.row_max + 1)
            rgb[roi.row_min, cols] = (255, 0, 0)
            rgb[roi.row_max, cols] = (255, 0, 0)
            rgb[rows, roi.col_min] = (255, 0, 0)
            rgb[rows, roi.col_max] = (255, 0, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def benchmark(ckpt: Checkpoint, n_frames: int,
              extents: tuple[int, int] | None = None) -> TimingReport:
    """Warm-started per-frame timing; month figure is 248 x per-frame.

    Frames run one at a time (no batching), so the month projection is the
    linear extrapolation by definition.
    """
    if n_frames < 1:
        raise ParameterError(f"n_frames must be >= 1, got {n_frames}")
    pred = Predictor(ckpt)
    h = ckpt.config.input_height or 128
    w = ckpt.config.input_width or 128
    if extents is not None:
        w, h = extents
    spec = GridSpec(w, h, lat0=40.0, lon0=180.0, dlat=-0.5,
                    dlon=min(0.5, 360.0 / w))
    rng = Rng(0)
    t0 = datetime(2015, 9, 1)

    def triple():
        return [GridFrame(spec, t0 - k * CADENCE_3H, rng.uniform((h, w)))
                for k in (2, 1, 0)]

    pred.probability_map(triple())  # warmup excluded from timing
    start = time.perf_counter()
    for _ in range(n_frames):
        pred.probability_map(triple())
    per_frame = (time.perf_counter() - start) / n_frames
    return TimingReport(per_frame, per_frame * FRAMES_PER_MONTH)
