"""Raw event streams, windowed sampling, voxel grids, density maps, masks.

Events follow the usual DVS convention: (x, y, p, t) with polarity in
{-1, +1} and timestamps in non-negative integer microseconds. Streams are
stored columnar (one array per field) because windowing and voxelization
are the hot path and want whole-array operations.

Aggregation into an H x W x B volume uses signed linear interpolation in
time: an event at normalized time t* = (B-1)(t - t_first)/(t_last - t_first)
deposits p * (1 - frac) into bin floor(t*) and p * frac into the next bin,
so per-event weights always sum to 1 and the volume conserves total
polarity. Density maps take the absolute value of the *accumulated* volume
(opposite polarities cancelling inside one cell reduce density), then sum
over each P x P patch and all bins.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

EVT1_MAGIC = b"EVT1"
EVT1_VERSION = 1

_EVT1_HEADER = struct.Struct("<4sIIIQ")
_EVT1_RECORD = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("p", "<i1"), ("pad", "<u1"), ("t", "<u8")]
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events on a width x height sensor."""

    width: int
    height: int
    x: np.ndarray  # uint16 column indices
    y: np.ndarray  # uint16 row indices
    p: np.ndarray  # int8 polarities, -1 or +1
    t: np.ndarray  # int64 microseconds, non-decreasing

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ParameterError(f"sensor geometry must be positive, got {self.width}x{self.height}")
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise DimensionError("event field arrays must share one length")
        if n:
            if self.x.max(initial=0) >= self.width or self.y.max(initial=0) >= self.height:
                raise DimensionError("event coordinates outside sensor geometry")
            if not np.isin(self.p, (-1, 1)).all():
                raise ParameterError("polarity must be -1 or +1 exactly")
            if self.t.min() < 0:
                raise ParameterError("timestamps must be non-negative")
            if np.any(np.diff(self.t) < 0):
                raise ParameterError("timestamps must be non-decreasing")
        for name in ("x", "y", "p", "t"):
            _frozen(getattr(self, name))

    @classmethod
    def from_arrays(cls, width, height, x, y, p, t) -> "EventStream":
        """Build a stream, coercing field dtypes to the storage layout."""
        return cls(
            width=int(width),
            height=int(height),
            x=np.ascontiguousarray(x, dtype=np.uint16),
            y=np.ascontiguousarray(y, dtype=np.uint16),
            p=np.ascontiguousarray(p, dtype=np.int8),
            t=np.ascontiguousarray(t, dtype=np.int64),
        )

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0)
        return cls.from_arrays(width, height, z, z, z, z)

    def __len__(self) -> int:
        return self.t.size

    @property
    def num_events(self) -> int:
        return self.t.size

    def _slice(self, lo: int, hi: int) -> "EventStream":
        return EventStream(
            self.width, self.height,
            self.x[lo:hi], self.y[lo:hi], self.p[lo:hi], self.t[lo:hi],
        )


@dataclass(frozen=True)
class EventVolume:
    """Signed H x W x B accumulation of an event stream."""

    width: int
    height: int
    bins: int
    data: np.ndarray  # (height, width, bins) float64

    def __post_init__(self):
        if self.data.shape != (self.height, self.width, self.bins):
            raise DimensionError(
                f"volume data shape {self.data.shape} does not match "
                f"{self.height}x{self.width}x{self.bins}"
            )
        _frozen(self.data)


@dataclass(frozen=True)
class DensityMap:
    """Per-patch non-negative event density on the token grid."""

    grid_h: int
    grid_w: int
    patch: int
    data: np.ndarray  # (grid_h, grid_w) float64, entries >= 0

    def __post_init__(self):
        if self.data.shape != (self.grid_h, self.grid_w):
            raise DimensionError("density data shape does not match grid")
        _frozen(self.data)


@dataclass(frozen=True)
class ActivationMask:
    """Binary token mask: 1 where density met the threshold."""

    grid_h: int
    grid_w: int
    tau: float
    data: np.ndarray  # (grid_h, grid_w) bool

    def __post_init__(self):
        if self.data.shape != (self.grid_h, self.grid_w):
            raise DimensionError("mask data shape does not match grid")
        _frozen(self.data)

    @property
    def active_fraction(self) -> float:
        return float(self.data.mean()) if self.data.size else 0.0


def sample_window(stream: EventStream, anchor_t: int, *,
                  duration_us: int | None = None,
                  count: int | None = None) -> EventStream:
    """Select a sub-stream around ``anchor_t``, preserving order.

    Exactly one of ``duration_us`` / ``count`` selects the mode:
    duration keeps events with anchor_t <= t < anchor_t + duration_us
    (half-open), count keeps the ``count`` most recent events with
    t <= anchor_t. An empty result is a valid empty stream.
    """
    if (duration_us is None) == (count is None):
        raise ParameterError("exactly one of duration_us or count must be given")
    if duration_us is not None:
        if duration_us <= 0:
            raise ParameterError(f"duration_us must be positive, got {duration_us}")
        lo = int(np.searchsorted(stream.t, anchor_t, side="left"))
        hi = int(np.searchsorted(stream.t, anchor_t + duration_us, side="left"))
        return stream._slice(lo, hi)
    if count <= 0:
        raise ParameterError(f"count must be positive, got {count}")
    hi = int(np.searchsorted(stream.t, anchor_t, side="right"))
    return stream._slice(max(0, hi - count), hi)


def voxelize(stream: EventStream, bins: int) -> EventVolume:
    """Aggregate a stream into a signed (H, W, bins) volume.

    Normalized time t* = (bins-1)(t - t_first)/(t_last - t_first); each
    event splits its polarity between floor(t*) and the next bin with
    linear weights. A single-timestamp window (or bins == 1) puts all
    mass in bin 0. Accumulation runs in float64 in stream order, so the
    result is deterministic.
    """
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    h, w = stream.height, stream.width
    grid = np.zeros(h * w * bins, dtype=np.float64)
    n = len(stream)
    if n == 0:
        return EventVolume(w, h, bins, grid.reshape(h, w, bins))

    t = stream.t.astype(np.float64)
    span = t[-1] - t[0]
    if bins == 1 or span == 0.0:
        tstar = np.zeros(n)
    else:
        tstar = (bins - 1) * (t - t[0]) / span
    b0 = np.floor(tstar).astype(np.int64)
    frac = tstar - b0
    pol = stream.p.astype(np.float64)

    base = (stream.y.astype(np.int64) * w + stream.x.astype(np.int64)) * bins
    np.add.at(grid, base + b0, pol * (1.0 - frac))
    right = frac > 0.0  # frac > 0 implies b0 + 1 <= bins - 1
    np.add.at(grid, base[right] + b0[right] + 1, pol[right] * frac[right])
    return EventVolume(w, h, bins, grid.reshape(h, w, bins))


def density_map(volume: EventVolume, patch: int) -> DensityMap:
    """Sum |volume| over each patch x patch block and all time bins.

    Geometry must divide evenly by ``patch``; there is no implicit padding.
    """
    if patch < 1:
        raise ParameterError(f"patch must be >= 1, got {patch}")
    h, w = volume.height, volume.width
    if h % patch or w % patch:
        raise DimensionError(f"geometry {w}x{h} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    dens = (
        np.abs(volume.data)
        .reshape(gh, patch, gw, patch, volume.bins)
        .sum(axis=(1, 3, 4))
    )
    return DensityMap(gh, gw, patch, dens)


def activation_mask(density: DensityMap, tau: float) -> ActivationMask:
    """Threshold a density map; the boundary is inclusive (density >= tau)."""
    if tau < 0:
        raise ParameterError(f"tau must be non-negative, got {tau}")
    return ActivationMask(density.grid_h, density.grid_w, float(tau),
                          density.data >= tau)


# ---------------------------------------------------------------------------
# EVT1 binary container and the CSV text variant
# ---------------------------------------------------------------------------

def evt1_bytes(stream: EventStream) -> bytes:
    """Serialize a stream to the EVT1 little-endian container."""
    header = _EVT1_HEADER.pack(EVT1_MAGIC, EVT1_VERSION, stream.width,
                               stream.height, len(stream))
    rec = np.zeros(len(stream), dtype=_EVT1_RECORD)
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    rec["t"] = stream.t.astype(np.uint64)
    return header + rec.tobytes()


def parse_evt1(data: bytes) -> EventStream:
    """Parse EVT1 bytes; truncated or trailing payload is a format error."""
    if len(data) < _EVT1_HEADER.size:
        raise FormatError("EVT1 file shorter than its header")
    magic, version, width, height, count = _EVT1_HEADER.unpack_from(data)
    if magic != EVT1_MAGIC:
        raise FormatError(f"bad EVT1 magic {magic!r}")
    if version != EVT1_VERSION:
        raise FormatError(f"unsupported EVT1 version {version}")
    expected = _EVT1_HEADER.size + count * _EVT1_RECORD.itemsize
    if len(data) != expected:
        raise FormatError(
            f"EVT1 payload size {len(data)} does not match header count {count}"
        )
    rec = np.frombuffer(data, dtype=_EVT1_RECORD, count=count,
                        offset=_EVT1_HEADER.size)
    try:
        return EventStream.from_arrays(width, height, rec["x"], rec["y"],
                                       rec["p"], rec["t"])
    except (ParameterError, DimensionError) as exc:
        raise FormatError(f"EVT1 records violate stream invariants: {exc}") from exc


def write_evt1(stream: EventStream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(evt1_bytes(stream))


def read_evt1(path) -> EventStream:
    with open(path, "rb") as fh:
        return parse_evt1(fh.read())


CSV_HEADER = "x,y,p,t"


def write_events_csv(stream: EventStream, path) -> None:
    """Write the text variant: a header line then one x,y,p,t row per event."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for xi, yi, pi, ti in zip(stream.x, stream.y, stream.p, stream.t):
            fh.write(f"{xi},{yi},{pi},{ti}\n")


def read_events_csv(path, width: int, height: int) -> EventStream:
    """Read the CSV variant. Geometry is not stored in the file."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise FormatError(f"expected CSV header {CSV_HEADER!r}, got {header!r}")
        rows = [line.strip() for line in fh if line.strip()]
    cols = np.zeros((len(rows), 4), dtype=np.int64)
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"CSV row {i + 2} has {len(parts)} fields, expected 4")
        try:
            cols[i] = [int(v) for v in parts]
        except ValueError as exc:
            raise FormatError(f"CSV row {i + 2} is not integer-valued") from exc
    try:
        return EventStream.from_arrays(width, height, cols[:, 0], cols[:, 1],
                                       cols[:, 2], cols[:, 3])
    except (ParameterError, DimensionError) as exc:
        raise FormatError(f"CSV events violate stream invariants: {exc}") from exc
