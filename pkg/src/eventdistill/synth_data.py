"""Deterministic synthetic scenes: frames, labels, and simulated events.

A Scene is a handful of colored rigid shapes translating over a flat
background. Frames render by painter's order (higher object id on top),
labels carry the topmost object id per pixel (0 = background), and events
come from the standard brightness-change model: per pixel,
L = ln(luma + eps), and a step |dL| = k*C yields k events of polarity
sign(dL) at the linear crossing times inside the frame interval. No
threshold noise and no refractory period, so floor(|dL| / C) is the exact
per-pixel event count.

Frames are quantized to 8-bit before the simulator runs, so events on disk
are exactly reproducible from the stored PPM pair.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .event_core import EventStream, evt1_bytes, write_evt1

DEFAULT_CONTRAST = 0.2
DEFAULT_LOG_EPS = 1e-3
DEFAULT_FRAME_GAP_US = 10_000

# One palette slot per object index; fixed across scenes (small seeded
# jitter aside) so object identity stays decodable from event signatures.
# Slots are spread in BOTH hue and luma: the synthetic teacher separates
# classes by color direction, while events only see log-luminance steps
# against the dark background, so the lumas are chosen to double the
# per-edge-pixel event count between classes (about 12 / 6 / 3 at the
# default contrast).
_PALETTE = (
    ("rect", (0.99, 0.97, 0.90)),
    ("circle", (0.45, 0.28, 0.17)),
    ("rect", (0.10, 0.16, 0.22)),
)
_BACKGROUND = (0.08, 0.08, 0.08)


@dataclass(frozen=True)
class SceneObject:
    """A moving shape. Position is the centre in pixels; velocity is px/s.

    For rectangles ``size`` is the full (width, height); for circles the
    first component is the radius.
    """

    shape: str
    color: tuple[float, float, float]
    position: tuple[float, float]
    velocity: tuple[float, float]
    size: tuple[float, float]
    object_id: int

    def __post_init__(self):
        if self.shape not in ("rect", "circle"):
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.object_id < 1:
            raise ParameterError("object_id must be >= 1")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ParameterError("color channels must lie in [0, 1]")
        if not all(math.isfinite(v) for v in (*self.position, *self.velocity, *self.size)):
            raise ParameterError("object geometry must be finite")


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]
    background: tuple[float, float, float]
    duration_us: int
    seed: int

    def __post_init__(self):
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ParameterError("object ids must be unique")
        if not all(0.0 <= c <= 1.0 for c in self.background):
            raise ParameterError("background channels must lie in [0, 1]")
        if self.duration_us <= 0:
            raise ParameterError("scene duration must be positive")


@dataclass(frozen=True)
class Frame:
    """An RGB frame with real-valued channels in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) float64 in [0, 1]
    timestamp_us: int

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise DimensionError("frame pixel shape does not match geometry")
        self.pixels.setflags(write=False)

    def to_u8(self) -> np.ndarray:
        return np.rint(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_u8(cls, raw: np.ndarray, timestamp_us: int) -> "Frame":
        h, w, _ = raw.shape
        return cls(w, h, raw.astype(np.float64) / 255.0, timestamp_us)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel object ids, 0 for background."""

    width: int
    height: int
    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise DimensionError("label shape does not match geometry")
        self.data.setflags(write=False)


def _object_id_map(scene: Scene, t_us: int) -> np.ndarray:
    """Topmost object id per pixel at time t (painter's order by id)."""
    if not 0 <= t_us <= scene.duration_us:
        raise ParameterError(
            f"t={t_us} outside scene duration [0, {scene.duration_us}]"
        )
    ids = np.zeros((scene.height, scene.width), dtype=np.uint8)
    xc = np.arange(scene.width, dtype=np.float64) + 0.5
    yc = np.arange(scene.height, dtype=np.float64) + 0.5
    dt_s = t_us / 1e6
    for obj in sorted(scene.objects, key=lambda o: o.object_id):
        cx = obj.position[0] + obj.velocity[0] * dt_s
        cy = obj.position[1] + obj.velocity[1] * dt_s
        if obj.shape == "rect":
            hit = (np.abs(xc - cx)[None, :] <= obj.size[0] / 2.0) & (
                np.abs(yc - cy)[:, None] <= obj.size[1] / 2.0
            )
        else:
            hit = (xc - cx)[None, :] ** 2 + (yc - cy)[:, None] ** 2 <= obj.size[0] ** 2
        ids[hit] = obj.object_id
    return ids


def render_frame(scene: Scene, t_us: int) -> Frame:
    """Render the scene at time t; deterministic given (scene, t)."""
    ids = _object_id_map(scene, t_us)
    colors = np.empty((max((o.object_id for o in scene.objects), default=0) + 1, 3))
    colors[0] = scene.background
    for obj in scene.objects:
        colors[obj.object_id] = obj.color
    return Frame(scene.width, scene.height, colors[ids], t_us)


def render_labels(scene: Scene, t_us: int) -> LabelMap:
    """Per-pixel topmost object id at time t, 0 where only background."""
    return LabelMap(scene.width, scene.height, _object_id_map(scene, t_us))


def esim_events(frame0: Frame, frame1: Frame, contrast_c: float = DEFAULT_CONTRAST,
                eps: float = DEFAULT_LOG_EPS) -> EventStream:
    """Simulate events between two frames of one scene.

    Per pixel: L = ln(luma + eps) with luma the channel mean; a change dL
    emits floor(|dL| / C) events of polarity sign(dL), timestamped at the
    linear crossing times t0 + (m*C/|dL|)(t1 - t0), rounded to integer
    microseconds. The merged stream is sorted by t (stable, so raster
    order breaks ties).
    """
    if (frame0.width, frame0.height) != (frame1.width, frame1.height):
        raise DimensionError("frames must share geometry")
    if frame0.timestamp_us >= frame1.timestamp_us:
        raise ParameterError("frame0 must precede frame1")
    if contrast_c <= 0:
        raise ParameterError(f"contrast must be positive, got {contrast_c}")
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")

    h, w = frame0.height, frame0.width
    log0 = np.log(frame0.pixels.mean(axis=2) + eps)
    log1 = np.log(frame1.pixels.mean(axis=2) + eps)
    dl = (log1 - log0).ravel()
    absdl = np.abs(dl)
    counts = np.floor(absdl / contrast_c).astype(np.int64)

    active = np.nonzero(counts)[0]
    if active.size == 0:
        return EventStream.empty(w, h)
    reps = counts[active]
    total = int(reps.sum())

    pix = np.repeat(active, reps)
    starts = np.concatenate(([0], np.cumsum(reps)[:-1]))
    m = (np.arange(total) - np.repeat(starts, reps) + 1).astype(np.float64)

    frac = m * contrast_c / absdl[pix]
    t0, t1 = frame0.timestamp_us, frame1.timestamp_us
    ts = t0 + np.rint(frac * (t1 - t0)).astype(np.int64)
    pol = np.where(dl[pix] > 0, 1, -1).astype(np.int8)
    xs = (pix % w).astype(np.uint16)
    ys = (pix // w).astype(np.uint16)

    order = np.argsort(ts, kind="stable")
    return EventStream.from_arrays(w, h, xs[order], ys[order], pol[order], ts[order])


# ---------------------------------------------------------------------------
# Scene synthesis and dataset generation
# ---------------------------------------------------------------------------

def make_scene(width: int, height: int, seed: int, index: int,
               duration_us: int = DEFAULT_FRAME_GAP_US) -> Scene:
    """Deterministic scene ``index`` of the stream seeded by ``seed``.

    Three objects with fixed per-slot shape and palette; exact sizes,
    velocities, and colors jitter per scene. Each object lands in its own
    quadrant of the frame, so objects rarely overlap and every edge is an
    object-to-background step with a clean per-class contrast.
    """
    rng = np.random.default_rng([seed, index])
    span = min(width, height)
    quads = rng.permutation(4)[:len(_PALETTE)]
    objects = []
    for slot, (shape, base) in enumerate(_PALETTE):
        color = tuple(float(np.clip(c + rng.uniform(-0.03, 0.03), 0.0, 1.0)) for c in base)
        extent = rng.uniform(0.38, 0.55) * span
        size = (extent, extent * rng.uniform(0.8, 1.2)) if shape == "rect" \
            else (extent / 2.0, extent / 2.0)
        qx, qy = quads[slot] % 2, quads[slot] // 2
        cx = (qx + 0.5) * width / 2.0 + rng.uniform(-0.08, 0.08) * width
        cy = (qy + 0.5) * height / 2.0 + rng.uniform(-0.08, 0.08) * height
        # Displacement over the frame gap exceeds the default patch size,
        # so patches interior to a moving-edge band see full coverage and
        # their event mass is a clean multiple of the per-pixel count.
        disp = rng.uniform(0.20, 0.30) * span
        angle = rng.uniform(0.0, 2.0 * np.pi)
        speed = disp / (duration_us / 1e6)
        objects.append(SceneObject(
            shape=shape,
            color=color,
            position=(float(cx), float(cy)),
            velocity=(float(speed * np.cos(angle)), float(speed * np.sin(angle))),
            size=(float(size[0]), float(size[1])),
            object_id=slot + 1,
        ))
    return Scene(width, height, tuple(objects), _BACKGROUND, duration_us, seed)


@dataclass(frozen=True)
class ManifestEntry:
    frame0: Path
    frame1: Path
    events: Path
    labels: Path


def worker_count() -> int:
    """Worker cap from EVENTDISTILL_THREADS (missing or 0 = auto)."""
    raw = os.environ.get("EVENTDISTILL_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"EVENTDISTILL_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ParameterError("EVENTDISTILL_THREADS must be >= 0")
    return n if n > 0 else min(os.cpu_count() or 1, 8)


def generate_dataset(n_scenes: int, seed: int, out_dir,
                     resolution: tuple[int, int] = (128, 128),
                     contrast: float = DEFAULT_CONTRAST) -> Path:
    """Write ``n_scenes`` (frame pair, events, labels) triplets plus manifest.

    Output bytes depend only on (n_scenes, seed, resolution, contrast);
    scene jobs may run on several threads but each scene writes its own
    files, so scheduling cannot change any byte. Returns the manifest path.
    """
    if n_scenes < 0:
        raise ParameterError("n_scenes must be >= 0")
    width, height = resolution
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def emit(i: int) -> None:
        scene = make_scene(width, height, seed, i)
        f0 = render_frame(scene, 0)
        f1 = render_frame(scene, scene.duration_us)
        # Simulate from the quantized frames so the PPM pair on disk
        # reproduces the stored events exactly.
        q0 = Frame.from_u8(f0.to_u8(), f0.timestamp_us)
        q1 = Frame.from_u8(f1.to_u8(), f1.timestamp_us)
        events = esim_events(q0, q1, contrast)
        # Labels sit at the window midpoint: the moving edges that carry
        # the events straddle it symmetrically, so edge tokens mostly
        # keep their own object's label.
        labels = render_labels(scene, scene.duration_us // 2)
        write_ppm(out / f"frame0_{i:04d}.ppm", q0.to_u8())
        write_ppm(out / f"frame1_{i:04d}.ppm", q1.to_u8())
        write_evt1(events, out / f"events_{i:04d}.evt1")
        write_pgm(out / f"labels_{i:04d}.pgm", labels.data)

    workers = worker_count()
    if workers > 1 and n_scenes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(emit, range(n_scenes)))
    else:
        for i in range(n_scenes):
            emit(i)

    manifest = out / "manifest.txt"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(n_scenes):
            fh.write(
                f"frame0_{i:04d}.ppm\tframe1_{i:04d}.ppm\t"
                f"events_{i:04d}.evt1\tlabels_{i:04d}.pgm\n"
            )
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    """Read a manifest; relative paths resolve against the manifest dir."""
    base = Path(path).parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"manifest line {lineno} has {len(parts)} fields, expected 4")
            entries.append(ManifestEntry(*(base / p for p in parts)))
    return entries


# ---------------------------------------------------------------------------
# Netpbm (binary PPM / PGM) readers and writers
# ---------------------------------------------------------------------------

def ppm_bytes(pixels: np.ndarray) -> bytes:
    """Serialize an (H, W, 3) uint8 array as binary PPM (P6, maxval 255)."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise DimensionError("PPM payload must be (H, W, 3) uint8")
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def pgm_bytes(pixels: np.ndarray) -> bytes:
    """Serialize an (H, W) uint8 array as binary PGM (P5, maxval 255)."""
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise DimensionError("PGM payload must be (H, W) uint8")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _parse_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if not data.startswith(magic):
        raise FormatError(f"expected netpbm magic {magic.decode()!r}")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment runs to end of line
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError("unterminated netpbm comment")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError("non-integer netpbm header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    expected = w * h * channels
    payload = data[pos:]
    if len(payload) != expected:
        raise FormatError(
            f"netpbm payload is {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def parse_ppm(data: bytes) -> np.ndarray:
    return _parse_netpbm(data, b"P6", 3)


def parse_pgm(data: bytes) -> np.ndarray:
    return _parse_netpbm(data, b"P5", 1)


def write_ppm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(pixels))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def write_pgm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(pixels))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def read_frame(path, timestamp_us: int = 0) -> Frame:
    return Frame.from_u8(read_ppm(path), timestamp_us)


def read_labels(path) -> LabelMap:
    data = read_pgm(path)
    return LabelMap(data.shape[1], data.shape[0], data)
