"""Student event encoder, deterministic synthetic teacher, and feature I/O.

The student is a patch-wise MLP: each P x P x B patch of an event volume
is flattened (row-major: y, then x, then bin) and pushed through
affine -> tanh -> affine, or a single affine when the hidden width is 0.
Backpropagation is hand-written and checked against central differences.

The teacher stands in for a frozen image foundation model: per image
patch it builds the descriptor [mean R, mean G, mean B, mu/H', nu/W'],
embeds it through a seeded orthonormal projection, and box-smooths over
the token grid so nearby tokens share structure. Real teacher features
can be loaded from an FTN1 file instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .event_core import EventVolume
from .synth_data import Frame

FTN_MAGIC = b"FTN1"
FTN_VERSION = 1
_FTN_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass(frozen=True)
class FeatureGrid:
    """An H' x W' grid of D-dimensional tokens.

    The token view flattens row-major (nu fastest within mu), so token
    index tau = mu * W' + nu.
    """

    grid_h: int
    grid_w: int
    dim: int
    data: np.ndarray  # (grid_h, grid_w, dim) float64

    def __post_init__(self):
        if self.data.shape != (self.grid_h, self.grid_w, self.dim):
            raise DimensionError("feature data shape does not match grid dims")
        if not np.isfinite(self.data).all():
            raise ParameterError("feature grid contains non-finite entries")
        self.data.setflags(write=False)

    @property
    def tokens(self) -> np.ndarray:
        """(T, D) view with T = H' * W'."""
        return self.data.reshape(self.grid_h * self.grid_w, self.dim)


@dataclass(frozen=True)
class StudentParams:
    """Patch-MLP weights. ``hidden == 0`` selects the purely linear model."""

    patch: int
    bins: int
    hidden: int
    dim: int
    seed: int
    w1: np.ndarray  # (input_len, hidden); empty when hidden == 0
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden or input_len, dim)
    b2: np.ndarray  # (dim,)

    def __post_init__(self):
        n_in = self.input_len
        if self.hidden > 0:
            ok = (self.w1.shape == (n_in, self.hidden)
                  and self.b1.shape == (self.hidden,)
                  and self.w2.shape == (self.hidden, self.dim))
        else:
            ok = (self.w1.size == 0 and self.b1.size == 0
                  and self.w2.shape == (n_in, self.dim))
        if not ok or self.b2.shape != (self.dim,):
            raise DimensionError("student parameter shapes are inconsistent")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.isfinite(arr).all():
                raise ParameterError("student parameters must be finite")

    @property
    def input_len(self) -> int:
        return self.patch * self.patch * self.bins

    HIDDEN_BIAS_INIT = 0.5

    @classmethod
    def init(cls, patch: int = 16, bins: int = 3, hidden: int = 32,
             dim: int = 16, seed: int = 0) -> "StudentParams":
        """Seeded Xavier-uniform weights (draw order: w1, w2).

        Signed event patches are antisymmetric under motion reversal, so a
        tanh layer started at zero bias only spans odd functions of the
        patch and magnitude cues stay invisible downstream. The hidden
        layer therefore starts as mirrored unit pairs (w, -w) sharing a
        constant positive bias: paired readouts span even functions from
        step zero, and training refines from there.
        """
        if patch < 1 or bins < 1 or hidden < 0 or dim < 1:
            raise ParameterError("invalid student dimensions")
        rng = np.random.default_rng(seed)
        n_in = patch * patch * bins

        def xavier(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        if hidden > 0:
            half = xavier(n_in, hidden)[:, :(hidden + 1) // 2]
            w1 = np.empty((n_in, hidden))
            w1[:, 0::2] = half
            w1[:, 1::2] = -half[:, : hidden // 2]
            w2 = xavier(hidden, dim)
            b1 = np.full(hidden, cls.HIDDEN_BIAS_INIT)
        else:
            w1 = np.zeros((0, 0))
            w2 = xavier(n_in, dim)
            b1 = np.zeros(0)
        return cls(patch, bins, hidden, dim, seed, w1, b1, w2, np.zeros(dim))

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed by name, in a fixed order."""
        if self.hidden > 0:
            return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        return {"w2": self.w2, "b2": self.b2}

    def replace_tensors(self, tensors: dict[str, np.ndarray]) -> "StudentParams":
        merged = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        merged.update(tensors)
        return StudentParams(self.patch, self.bins, self.hidden, self.dim,
                             self.seed, **merged)


def _patch_matrix(volume: EventVolume, patch: int) -> np.ndarray:
    """(T, P*P*B) matrix of flattened patches (y, then x, then bin)."""
    h, w, b = volume.height, volume.width, volume.bins
    if h % patch or w % patch:
        raise DimensionError(f"geometry {w}x{h} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return (volume.data
            .reshape(gh, patch, gw, patch, b)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch * patch * b))


def student_forward(params: StudentParams, volume: EventVolume) -> FeatureGrid:
    """Encode an event volume into an (H/P, W/P, D) feature grid."""
    if volume.bins != params.bins:
        raise DimensionError(
            f"volume has {volume.bins} bins but the student expects {params.bins}"
        )
    x = _patch_matrix(volume, params.patch)
    if params.hidden > 0:
        out = np.tanh(x @ params.w1 + params.b1) @ params.w2 + params.b2
    else:
        out = x @ params.w2 + params.b2
    gh = volume.height // params.patch
    gw = volume.width // params.patch
    return FeatureGrid(gh, gw, params.dim, out.reshape(gh, gw, params.dim))


def student_backward(params: StudentParams, volume: EventVolume,
                     upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients for upstream d(loss)/d(features).

    ``upstream`` may be shaped like the forward output grid or its (T, D)
    token view. Returns gradients keyed like ``params.tensors()``.
    """
    x = _patch_matrix(volume, params.patch)
    t = x.shape[0]
    g = np.asarray(upstream, dtype=np.float64).reshape(-1, params.dim)
    if g.shape[0] != t:
        raise DimensionError(
            f"upstream gradient has {g.shape[0]} tokens, forward output has {t}"
        )
    if params.hidden > 0:
        hid = np.tanh(x @ params.w1 + params.b1)
        dw2 = hid.T @ g
        db2 = g.sum(axis=0)
        dz = (g @ params.w2.T) * (1.0 - hid * hid)
        return {"w1": x.T @ dz, "b1": dz.sum(axis=0), "w2": dw2, "b2": db2}
    return {"w2": x.T @ g, "b2": g.sum(axis=0)}


# ---------------------------------------------------------------------------
# Synthetic teacher
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherSpec:
    """Frozen synthetic teacher: seeded projection plus token smoothing."""

    dim: int
    seed: int
    radius: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError("teacher dim must be >= 1")
        if self.radius < 0:
            raise ParameterError("smoothing radius must be >= 0")

    def projection(self) -> np.ndarray:
        """(dim, 5) embedding of the patch descriptor, deterministic per seed.

        Columns are orthonormal for dim >= 5 (an isometric embedding of the
        descriptor space); for dim < 5 the rows are orthonormal instead.
        """
        rng = np.random.default_rng(self.seed)
        a = rng.standard_normal((self.dim, 5))
        if self.dim >= 5:
            q, _ = np.linalg.qr(a)
            return q
        q, _ = np.linalg.qr(a.T)
        return q.T


def _patch_descriptors(frame: Frame, patch: int) -> np.ndarray:
    """(H', W', 5) descriptors: patch mean color plus grid position."""
    if frame.height % patch or frame.width % patch:
        raise DimensionError(
            f"geometry {frame.width}x{frame.height} not divisible by patch {patch}"
        )
    gh, gw = frame.height // patch, frame.width // patch
    means = (frame.pixels
             .reshape(gh, patch, gw, patch, 3)
             .mean(axis=(1, 3)))
    mu = np.broadcast_to((np.arange(gh) / gh)[:, None], (gh, gw))
    nu = np.broadcast_to(np.arange(gw) / gw, (gh, gw))
    return np.concatenate([means, mu[..., None], nu[..., None]], axis=2)


def _box_smooth(grid: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window, clipped at the borders."""
    if radius == 0:
        return grid.copy()
    gh, gw = grid.shape[:2]
    integral = np.zeros((gh + 1, gw + 1) + grid.shape[2:])
    integral[1:, 1:] = grid.cumsum(axis=0).cumsum(axis=1)
    y0 = np.clip(np.arange(gh) - radius, 0, gh)
    y1 = np.clip(np.arange(gh) + radius + 1, 0, gh)
    x0 = np.clip(np.arange(gw) - radius, 0, gw)
    x1 = np.clip(np.arange(gw) + radius + 1, 0, gw)
    sums = (integral[y1[:, None], x1[None, :]]
            - integral[y0[:, None], x1[None, :]]
            - integral[y1[:, None], x0[None, :]]
            + integral[y0[:, None], x0[None, :]])
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return sums / counts.reshape(gh, gw, *([1] * (grid.ndim - 2)))


def teacher_forward(spec: TeacherSpec, frame: Frame, patch: int) -> FeatureGrid:
    """Teacher tokens for a frame: project descriptors, then box-smooth."""
    desc = _patch_descriptors(frame, patch)
    feats = desc @ spec.projection().T
    feats = _box_smooth(feats, spec.radius)
    gh, gw = desc.shape[:2]
    return FeatureGrid(gh, gw, spec.dim, feats)


def similarity_map(grid: FeatureGrid, anchor: tuple[int, int]) -> np.ndarray:
    """Cosine similarity of the anchor token against every token.

    The anchor cell is exactly 1 by definition; zero-norm non-anchor
    tokens map to 0. A zero-norm anchor is a degenerate-anchor error.
    """
    mu, nu = anchor
    if not (0 <= mu < grid.grid_h and 0 <= nu < grid.grid_w):
        raise ParameterError(
            f"anchor ({mu},{nu}) outside grid {grid.grid_h}x{grid.grid_w}"
        )
    tok = grid.tokens
    a = tok[mu * grid.grid_w + nu]
    norm_a = np.linalg.norm(a)
    if norm_a == 0.0:
        raise ParameterError(f"anchor token ({mu},{nu}) has zero norm")
    norms = np.linalg.norm(tok, axis=1)
    sims = np.zeros(tok.shape[0])
    nz = norms > 0.0
    sims[nz] = (tok[nz] @ a) / (norms[nz] * norm_a)
    np.clip(sims, -1.0, 1.0, out=sims)
    out = sims.reshape(grid.grid_h, grid.grid_w)
    out[mu, nu] = 1.0
    return out


# ---------------------------------------------------------------------------
# FTN1 tensor container
# ---------------------------------------------------------------------------

def ftn_bytes(array: np.ndarray) -> bytes:
    """Serialize a float32/float64 array (row-major, little-endian)."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code, wire = 1, "<f4"
    elif arr.dtype == np.float64:
        code, wire = 2, "<f8"
    else:
        raise ParameterError(f"FTN1 stores f32/f64 tensors, not {arr.dtype}")
    if arr.ndim > 255:
        raise ParameterError("too many dimensions for FTN1")
    head = FTN_MAGIC + struct.pack("<IBB", FTN_VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.astype(wire, copy=False).tobytes()


def parse_ftn(data: bytes) -> np.ndarray:
    """Parse FTN1 bytes; any size mismatch is a format error."""
    fixed = 4 + 4 + 1 + 1
    if len(data) < fixed:
        raise FormatError("FTN1 file shorter than its header")
    if data[:4] != FTN_MAGIC:
        raise FormatError(f"bad FTN1 magic {data[:4]!r}")
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != FTN_VERSION:
        raise FormatError(f"unsupported FTN1 version {version}")
    dtype = _FTN_DTYPES.get(code)
    if dtype is None:
        raise FormatError(f"unknown FTN1 dtype code {code}")
    if len(data) < fixed + 4 * ndim:
        raise FormatError("FTN1 header truncated before dims")
    dims = struct.unpack_from(f"<{ndim}I", data, fixed)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    offset = fixed + 4 * ndim
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(
            f"FTN1 payload size {len(data) - offset} does not match dims {dims}"
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_ftn(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ftn_bytes(array))


def read_ftn(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_ftn(fh.read())


def save_features(grid: FeatureGrid, path) -> None:
    write_ftn(path, grid.data)


def load_features(path) -> FeatureGrid:
    """Load a feature grid (e.g. teacher tokens exported elsewhere)."""
    arr = read_ftn(path)
    if arr.ndim != 3:
        raise FormatError(f"feature tensor must be 3-d, got {arr.ndim}-d")
    arr = arr.astype(np.float64)
    return FeatureGrid(arr.shape[0], arr.shape[1], arr.shape[2], arr)
