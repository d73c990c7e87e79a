"""Pretraining: AdamW, the distillation loop, checkpoints, eval metrics.

The optimizer is the standard decoupled form: moment updates with bias
correction, then theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps)
+ wd * theta). Training is deterministic for a fixed (config, seed,
data): initialization, the per-epoch shuffle, and the per-sample
gradient reduction all run in a fixed order.

Two presets ship: "paper" carries the published pretraining constants
(bins 3, patch 16, tau 64, lambdas 10/4, lr 5e-6, beta1 0.9, weight
decay 1e-4, 10 epochs, 640x480); "desk" is the fast small-scale variant
(128x128, lr 1e-3, capped at 200 steps) whose learning rate suits a
freshly initialized toy encoder rather than a pretrained backbone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NumericError, ParameterError
from .event_core import (ActivationMask, EventVolume, activation_mask,
                         density_map, read_evt1, voxelize)
from .features import (FeatureGrid, StudentParams, TeacherSpec, ftn_bytes,
                       parse_ftn, student_backward, student_forward,
                       teacher_forward)
from .losses import MaskedPair, combined_loss
from .synth_data import ManifestEntry, read_frame, read_manifest

CKP_MAGIC = b"CKP1"
CKP_VERSION = 1

_DTYPE_CODES = {"f32": 1.0, "f64": 2.0}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 16
    max_steps: int = 0  # 0 = no cap
    bins: int = 3
    patch: int = 16
    tau: float = 64.0
    lambda_is: float = 10.0
    lambda_cs: float = 4.0
    hidden: int = 32
    dim: int = 16
    teacher_seed: int = 0
    teacher_radius: int = 1
    width: int = 128
    height: int = 128
    seed: int = 0
    dtype: str = "f64"

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("betas must lie in [0, 1)")
        if self.eps_adam <= 0 or self.weight_decay < 0:
            raise ParameterError("eps_adam must be positive, weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ParameterError("epochs/batch_size must be >= 1, max_steps >= 0")
        if self.bins < 1 or self.patch < 1 or self.tau < 0:
            raise ParameterError("bins/patch must be >= 1, tau >= 0")
        if self.lambda_is < 0 or self.lambda_cs < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.hidden < 0 or self.dim < 1:
            raise ParameterError("hidden must be >= 0, dim >= 1")
        if self.dtype not in _DTYPE_CODES:
            raise ParameterError(f"dtype must be one of {sorted(_DTYPE_CODES)}")
        return self


_INT_FIELDS = {"epochs", "batch_size", "max_steps", "bins", "patch", "hidden",
               "dim", "teacher_seed", "teacher_radius", "width", "height",
               "seed"}

PRESETS = {
    "paper": TrainConfig(lr=5e-6, weight_decay=1e-4, epochs=10, max_steps=0,
                         bins=3, patch=16, tau=64.0, lambda_is=10.0,
                         lambda_cs=4.0, width=640, height=480),
    "desk": TrainConfig(lr=1e-3, epochs=50, batch_size=16, max_steps=200,
                        width=128, height=128),
}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key = value` lines; `#` starts a comment; unknown keys error."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno} is not `key = value`: {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in known:
            raise ParameterError(f"unknown config key {key!r} (line {lineno})")
        if key == "dtype":
            values[key] = val
        elif key in _INT_FIELDS:
            try:
                values[key] = int(val)
            except ValueError:
                raise ParameterError(f"config key {key!r} needs an integer, got {val!r}")
        else:
            try:
                values[key] = float(val)
            except ValueError:
                raise ParameterError(f"config key {key!r} needs a number, got {val!r}")
    return replace(base or TrainConfig(), **values)


def read_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def dump_config(config: TrainConfig) -> str:
    """Render a config as `key = value` lines that parse_config_text accepts."""
    out = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        if f.name == "dtype":
            out.append(f"{f.name} = {v}")
        elif f.name in _INT_FIELDS:
            out.append(f"{f.name} = {v}")
        else:
            out.append(f"{f.name} = {v:.9g}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init_like(cls, tensors: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(t) for k, t in tensors.items()},
                   v={k: np.zeros_like(t) for k, t in tensors.items()})


def adamw_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, config: TrainConfig,
               ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay adaptive-moment update; functional."""
    if set(tensors) != set(grads) or set(tensors) != set(state.m):
        raise DimensionError("parameter, gradient, and state keys must match")
    b1, b2 = config.beta1, config.beta2
    k = state.step + 1
    new_t, new_m, new_v = {}, {}, {}
    for name in tensors:
        theta, g = tensors[name], grads[name]
        if theta.shape != g.shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** k)
        v_hat = v / (1 - b2 ** k)
        new_t[name] = theta - config.lr * (
            m_hat / (np.sqrt(v_hat) + config.eps_adam)
            + config.weight_decay * theta
        )
        new_m[name], new_v[name] = m, v
    return new_t, OptimizerState(new_m, new_v, k)


# ---------------------------------------------------------------------------
# Checkpoints (CKP1 container)
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: StudentParams
    config: TrainConfig
    opt: OptimizerState
    step: int
    loss_history: np.ndarray  # (steps, 4): l1, intra, cross, total


def _config_entries(config: TrainConfig) -> list[tuple[str, np.ndarray]]:
    out = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        if f.name == "dtype":
            v = _DTYPE_CODES[v]
        out.append((f"config/{f.name}", np.array([float(v)])))
    return out


def ckp1_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint: entries are {name_len u16, name, FTN1 tensor}.

    The embedded FTN1 tensors are self-describing, so no per-entry length
    field is needed.
    """
    entries = _config_entries(ckpt.config)
    entries += [(f"student/{k}", t) for k, t in ckpt.params.tensors().items()]
    entries += [(f"opt/m/{k}", t) for k, t in ckpt.opt.m.items()]
    entries += [(f"opt/v/{k}", t) for k, t in ckpt.opt.v.items()]
    entries.append(("opt/step", np.array([float(ckpt.opt.step)])))
    entries.append(("train/step", np.array([float(ckpt.step)])))
    entries.append(("train/loss_history", ckpt.loss_history.reshape(-1, 4)))
    blob = CKP_MAGIC + struct.pack("<II", CKP_VERSION, len(entries))
    for name, tensor in entries:
        raw = name.encode("utf-8")
        payload = ftn_bytes(np.ascontiguousarray(tensor, dtype=np.float64))
        blob += struct.pack("<H", len(raw)) + raw + payload
    return blob


def _ftn_span(data: bytes, pos: int) -> int:
    """Byte length of the FTN1 tensor starting at ``pos``."""
    fixed = 10  # magic + version + dtype + ndim
    if pos + fixed > len(data):
        raise FormatError("CKP1 truncated inside an FTN1 header")
    _, code, ndim = struct.unpack_from("<IBB", data, pos + 4)
    if pos + fixed + 4 * ndim > len(data):
        raise FormatError("CKP1 truncated inside FTN1 dims")
    dims = struct.unpack_from(f"<{ndim}I", data, pos + fixed)
    itemsize = {1: 4, 2: 8}.get(code)
    if itemsize is None:
        raise FormatError(f"unknown FTN1 dtype code {code}")
    count = 1
    for d in dims:
        count *= d
    return fixed + 4 * ndim + count * itemsize


def parse_ckp1(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise FormatError("CKP1 file shorter than its header")
    if data[:4] != CKP_MAGIC:
        raise FormatError(f"bad CKP1 magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKP_VERSION:
        raise FormatError(f"unsupported CKP1 version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError("CKP1 truncated inside an entry name")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen > len(data):
            raise FormatError("CKP1 truncated inside an entry name")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        span = _ftn_span(data, pos)
        if pos + span > len(data):
            raise FormatError(f"CKP1 truncated inside tensor {name!r}")
        tensors[name] = parse_ftn(data[pos:pos + span])
        pos += span
    if pos != len(data):
        raise FormatError("CKP1 has trailing bytes")
    return _checkpoint_from_tensors(tensors)


def _checkpoint_from_tensors(tensors: dict[str, np.ndarray]) -> Checkpoint:
    def scalar(name):
        if name not in tensors:
            raise FormatError(f"checkpoint misses entry {name!r}")
        return float(tensors[name][0])

    codes = {v: k for k, v in _DTYPE_CODES.items()}
    kwargs = {}
    for f in fields(TrainConfig):
        raw = scalar(f"config/{f.name}")
        if f.name == "dtype":
            if raw not in codes:
                raise FormatError(f"unknown dtype code {raw}")
            kwargs[f.name] = codes[raw]
        elif f.name in _INT_FIELDS:
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = raw
    config = TrainConfig(**kwargs)

    proto = StudentParams.init(config.patch, config.bins, config.hidden,
                               config.dim, config.seed)
    names = list(proto.tensors())
    try:
        params = proto.replace_tensors(
            {k: tensors[f"student/{k}"] for k in names})
    except KeyError as exc:
        raise FormatError(f"checkpoint misses student tensor {exc}") from exc
    try:
        opt = OptimizerState(
            m={k: tensors[f"opt/m/{k}"] for k in names},
            v={k: tensors[f"opt/v/{k}"] for k in names},
            step=int(scalar("opt/step")),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint misses optimizer tensor {exc}") from exc
    if "train/loss_history" not in tensors:
        raise FormatError("checkpoint misses entry 'train/loss_history'")
    history = tensors["train/loss_history"].reshape(-1, 4)
    return Checkpoint(params, config, opt, int(scalar("train/step")), history)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ckp1_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_ckp1(fh.read())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One manifest pair, preprocessed once: inputs never change per step."""

    volume: EventVolume
    teacher: FeatureGrid
    mask: ActivationMask


def prepare_samples(entries: list[ManifestEntry], config: TrainConfig,
                    ) -> list[Sample]:
    """Voxelize events, threshold masks, and run the frozen teacher."""
    spec = TeacherSpec(config.dim, config.teacher_seed, config.teacher_radius)
    samples = []
    for entry in entries:
        stream = read_evt1(entry.events)
        volume = voxelize(stream, config.bins)
        dens = density_map(volume, config.patch)
        mask = activation_mask(dens, config.tau)
        frame = read_frame(entry.frame0)
        if (frame.width, frame.height) != (stream.width, stream.height):
            raise DimensionError(
                f"frame {entry.frame0} geometry does not match its events"
            )
        teacher = teacher_forward(spec, frame, config.patch)
        samples.append(Sample(volume, teacher, mask))
    return samples


def pretrain(entries: list[ManifestEntry], config: TrainConfig,
             out_path=None) -> Checkpoint:
    """Optimize the student on (event, image) pairs; returns the checkpoint.

    Batches follow a seeded per-epoch permutation of the manifest; the
    end-of-epoch checkpoint is rewritten to ``out_path`` when given. A
    non-finite loss aborts with a diagnostic rather than skipping steps.
    """
    config.validate()
    samples = prepare_samples(entries, config)
    params = StudentParams.init(config.patch, config.bins, config.hidden,
                                config.dim, config.seed)
    state = OptimizerState.init_like(params.tensors())
    rng = np.random.default_rng(config.seed)
    history: list[tuple[float, float, float, float]] = []
    step = 0

    def budget_left() -> bool:
        return config.max_steps == 0 or step < config.max_steps

    for _ in range(config.epochs):
        if not budget_left():
            break
        order = rng.permutation(len(samples))
        for lo in range(0, len(samples), config.batch_size):
            if not budget_left():
                break
            batch = [samples[i] for i in order[lo:lo + config.batch_size]]
            pairs, grids = [], []
            for s in batch:
                grid = student_forward(params, s.volume)
                grids.append(grid)
                pairs.append(MaskedPair(grid, s.teacher, s.mask))
            report = combined_loss(pairs, config.lambda_is, config.lambda_cs)
            if not np.isfinite(report.total):
                raise NumericError(
                    f"non-finite loss at step {step}: l1={report.l1} "
                    f"intra={report.intra} cross={report.cross}"
                )
            grads = {k: np.zeros_like(t) for k, t in params.tensors().items()}
            for i, s in enumerate(batch):  # fixed reduction order
                g = student_backward(params, s.volume, report.grad_k[i])
                for k in grads:
                    grads[k] += g[k]
            tensors, state = adamw_step(params.tensors(), grads, state, config)
            params = params.replace_tensors(tensors)
            history.append((report.l1, report.intra, report.cross, report.total))
            step += 1
        if out_path is not None:
            save_checkpoint(Checkpoint(params, config, state, step,
                                       np.array(history).reshape(-1, 4)), out_path)

    ckpt = Checkpoint(params, config, state, step,
                      np.array(history).reshape(-1, 4))
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt


def pretrain_dir(data_dir, config: TrainConfig, out_path=None) -> Checkpoint:
    return pretrain(read_manifest(Path(data_dir) / "manifest.txt"), config,
                    out_path)


def eval_structure_discrepancy(ckpt: Checkpoint,
                               entries: list[ManifestEntry]) -> dict[str, float]:
    """Held-out discrepancy metrics; no parameter updates.

    gram_err averages ||K*K*^T - Q*Q*^T||_1 / T^2 over pairs, l1_err the
    per-element masked L1 (divide by T*D).
    """
    if not entries:
        raise ParameterError("need at least one held-out pair")
    samples = prepare_samples(entries, ckpt.config)
    gram_err = 0.0
    l1_err = 0.0
    for s in samples:
        grid = student_forward(ckpt.params, s.volume)
        pair = MaskedPair(grid, s.teacher, s.mask)
        t = pair.tokens
        gram = pair.k_star @ pair.k_star.T - pair.q_star @ pair.q_star.T
        gram_err += np.abs(gram).sum() / (t * t)
        l1_err += np.abs(pair.k_star - pair.q_star).sum() / (t * grid.dim)
    n = len(samples)
    return {"gram_err": gram_err / n, "l1_err": l1_err / n}
