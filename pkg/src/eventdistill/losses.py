"""Masked L1 and Gram-structure distillation losses with exact gradients.

All three terms operate on masked token matrices K* = K (.) M and
Q* = Q (.) M (the mask broadcast across the feature dimension, zeroing
whole tokens), average over the N samples of a batch, and use entrywise
L1 norms with the sign(0) := 0 subgradient convention:

  per-token term    sum |K* - Q*|
  intra-structure   sum |K* K*^T - Q* Q*^T|
  cross-structure   sum |K* Q*^T - Q* Q*^T|

Gradients with respect to the unmasked student tokens K:

  l1     sign(K* - Q*) (.) M / N
  intra  (2/N) sign(A) K*,  A = K* K*^T - Q* Q*^T   (A symmetric)
  cross  (1/N) sign(B) Q*,  B = K* Q*^T - Q* Q*^T

masked back so rows of masked-out tokens stay identically zero. The
finite-difference verifier excludes entries whose perturbation can
actually move an argument entry through a kink; unreachable zeros (for
example whole Gram rows zeroed by the mask) do not count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError
from .event_core import ActivationMask, EventVolume
from .features import FeatureGrid, StudentParams, student_backward, student_forward

KINK_TOL = 1e-8


@dataclass(frozen=True)
class MaskedPair:
    """One (student, teacher, mask) sample with cached masked token views."""

    student: FeatureGrid
    teacher: FeatureGrid
    mask: ActivationMask
    k_star: np.ndarray = field(init=False)   # (T, D)
    q_star: np.ndarray = field(init=False)   # (T, D)
    mask_col: np.ndarray = field(init=False)  # (T, 1) float64

    def __post_init__(self):
        s, t, m = self.student, self.teacher, self.mask
        if (s.grid_h, s.grid_w, s.dim) != (t.grid_h, t.grid_w, t.dim):
            raise DimensionError("student and teacher grids must share dims")
        if (m.grid_h, m.grid_w) != (s.grid_h, s.grid_w):
            raise DimensionError("mask grid does not match feature grids")
        mask_col = m.data.reshape(-1, 1).astype(np.float64)
        object.__setattr__(self, "mask_col", mask_col)
        object.__setattr__(self, "k_star", s.tokens * mask_col)
        object.__setattr__(self, "q_star", t.tokens * mask_col)

    @property
    def tokens(self) -> int:
        return self.student.grid_h * self.student.grid_w


def _check_batch(batch: list[MaskedPair]) -> None:
    if not batch:
        raise ParameterError("loss needs a non-empty batch")
    t0, d0 = batch[0].k_star.shape
    for pair in batch[1:]:
        if pair.k_star.shape != (t0, d0):
            raise DimensionError("batch samples must share token dims")


def masked_l1(batch: list[MaskedPair]) -> tuple[float, np.ndarray]:
    """Mean over the batch of sum |K* - Q*|, with d/dK."""
    _check_batch(batch)
    n = len(batch)
    grads = np.zeros((n, *batch[0].k_star.shape))
    value = 0.0
    for i, pair in enumerate(batch):
        diff = pair.k_star - pair.q_star
        value += np.abs(diff).sum()
        grads[i] = np.sign(diff) * pair.mask_col / n
    return value / n, grads


def intra_structure(batch: list[MaskedPair]) -> tuple[float, np.ndarray]:
    """Mean over the batch of sum |K* K*^T - Q* Q*^T|, with d/dK."""
    _check_batch(batch)
    n = len(batch)
    grads = np.zeros((n, *batch[0].k_star.shape))
    value = 0.0
    for i, pair in enumerate(batch):
        k, q = pair.k_star, pair.q_star
        a = k @ k.T - q @ q.T
        value += np.abs(a).sum()
        grads[i] = (2.0 / n) * (np.sign(a) @ k) * pair.mask_col
    return value / n, grads


def cross_structure(batch: list[MaskedPair]) -> tuple[float, np.ndarray]:
    """Mean over the batch of sum |K* Q*^T - Q* Q*^T|, with d/dK."""
    _check_batch(batch)
    n = len(batch)
    grads = np.zeros((n, *batch[0].k_star.shape))
    value = 0.0
    for i, pair in enumerate(batch):
        k, q = pair.k_star, pair.q_star
        b = k @ q.T - q @ q.T
        value += np.abs(b).sum()
        grads[i] = (np.sign(b) @ q) * pair.mask_col / n
    return value / n, grads


DEFAULT_LAMBDA_IS = 10.0
DEFAULT_LAMBDA_CS = 4.0


@dataclass(frozen=True)
class LossReport:
    """Per-term values plus the gradient of the total w.r.t. student tokens."""

    l1: float
    intra: float
    cross: float
    total: float
    lambda_is: float
    lambda_cs: float
    grad_k: np.ndarray  # (N, T, D)

    def per_element(self) -> dict[str, float]:
        """Per-element means (value / (T*D)); diagnostic only, never optimized."""
        denom = self.grad_k.shape[1] * self.grad_k.shape[2]
        return {
            "l1": self.l1 / denom,
            "intra": self.intra / denom,
            "cross": self.cross / denom,
        }


def combined_loss(batch: list[MaskedPair],
                  lambda_is: float = DEFAULT_LAMBDA_IS,
                  lambda_cs: float = DEFAULT_LAMBDA_CS) -> LossReport:
    """Weighted sum of the three terms: l1 + lambda_is*intra + lambda_cs*cross."""
    v1, g1 = masked_l1(batch)
    vi, gi = intra_structure(batch)
    vc, gc = cross_structure(batch)
    total = v1 + lambda_is * vi + lambda_cs * vc
    grad = g1 + lambda_is * gi + lambda_cs * gc
    return LossReport(v1, vi, vc, total, lambda_is, lambda_cs, grad)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

_LOSS_FNS = {"l1": masked_l1, "intra": intra_structure, "cross": cross_structure}
GRADCHECK_LOSSES = ("l1", "intra", "cross", "student")


@dataclass(frozen=True)
class GradcheckResult:
    loss: str
    max_rel_err: float
    kink_count: int
    checked: int
    seeds: int
    elapsed_s: float

    @property
    def entries(self) -> int:
        return self.checked + self.kink_count


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / denom


def _random_pair(rng: np.random.Generator, tokens: int, dim: int) -> tuple:
    """A random K matrix plus the fixed (Q, mask) context around it."""
    side_h = 1
    side_w = tokens
    k = rng.standard_normal((tokens, dim))
    q = rng.standard_normal((tokens, dim))
    mask = rng.random(tokens) < 0.75
    if not mask.any():
        mask[0] = True
    return k, q, mask, side_h, side_w


def _build_pair(k, q, mask, gh, gw) -> MaskedPair:
    dim = k.shape[1]
    return MaskedPair(
        FeatureGrid(gh, gw, dim, k.reshape(gh, gw, dim)),
        FeatureGrid(gh, gw, dim, q.reshape(gh, gw, dim)),
        ActivationMask(gh, gw, 0.0, mask.reshape(gh, gw)),
    )


def _kink_map(loss: str, k, q, mask) -> np.ndarray:
    """True where perturbing K[a, b] can move a loss argument near zero.

    An argument entry within KINK_TOL of zero only disqualifies the
    coordinates that can actually move it (nonzero sensitivity); zeros
    pinned by the mask are unreachable and do not exclude anything.
    """
    mcol = mask.reshape(-1, 1).astype(np.float64)
    ks, qs = k * mcol, q * mcol
    if loss == "l1":
        return (np.abs(ks - qs) < KINK_TOL) & (mcol > 0)
    if loss == "intra":
        arg = ks @ ks.T - qs @ qs.T
        near = (np.abs(arg) < KINK_TOL).astype(np.float64)  # (T, T)
        # entry (a, b) is kinked iff some j has |arg[a, j]| ~ 0 and ks[j, b] != 0
        movable = (ks != 0.0).astype(np.float64)
        return ((near @ movable) > 0) & (mcol > 0)
    if loss == "cross":
        arg = ks @ qs.T - qs @ qs.T
        near = (np.abs(arg) < KINK_TOL).astype(np.float64)
        movable = (qs != 0.0).astype(np.float64)
        return ((near @ movable) > 0) & (mcol > 0)
    raise ParameterError(f"unknown loss {loss!r}")


def _gradcheck_loss(loss: str, tokens: int, dim: int, seeds: int,
                    h: float) -> GradcheckResult:
    fn = _LOSS_FNS[loss]
    start = time.monotonic()
    max_err = 0.0
    kinks = 0
    checked = 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        k, q, mask, gh, gw = _random_pair(rng, tokens, dim)
        _, grads = fn([_build_pair(k, q, mask, gh, gw)])
        analytic = grads[0]
        excluded = _kink_map(loss, k, q, mask)
        for a in range(tokens):
            for b in range(dim):
                if excluded[a, b]:
                    kinks += 1
                    continue
                kp = k.copy()
                kp[a, b] += h
                fp, _ = fn([_build_pair(kp, q, mask, gh, gw)])
                kp[a, b] -= 2 * h
                fm, _ = fn([_build_pair(kp, q, mask, gh, gw)])
                numeric = (fp - fm) / (2 * h)
                err = float(_rel_err(np.array(analytic[a, b]), np.array(numeric)))
                max_err = max(max_err, err)
                checked += 1
    return GradcheckResult(loss, max_err, kinks, checked, seeds,
                           time.monotonic() - start)


def _gradcheck_student(seeds: int, h: float) -> GradcheckResult:
    """Check student_backward on a small MLP and a small linear model.

    The scalar probe is sum(forward(params) * G) for a fixed random G, so
    its parameter gradient is exactly student_backward(..., G). tanh is
    smooth, hence no kink exclusions.
    """
    start = time.monotonic()
    max_err = 0.0
    checked = 0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for hidden in (3, 0):
            params = StudentParams.init(patch=4, bins=2, hidden=hidden,
                                        dim=3, seed=seed)
            data = rng.standard_normal((8, 8, 2))
            volume = EventVolume(8, 8, 2, data)
            out = student_forward(params, volume)
            g = rng.standard_normal(out.data.shape)
            grads = student_backward(params, volume, g)

            def probe(p: StudentParams) -> float:
                return float((student_forward(p, volume).data * g).sum())

            for name, tensor in params.tensors().items():
                analytic = grads[name]
                flat = tensor.copy()
                for idx in range(flat.size):
                    orig = flat.flat[idx]
                    flat.flat[idx] = orig + h
                    fp = probe(params.replace_tensors({name: flat.copy()}))
                    flat.flat[idx] = orig - h
                    fm = probe(params.replace_tensors({name: flat.copy()}))
                    flat.flat[idx] = orig
                    numeric = (fp - fm) / (2 * h)
                    err = float(_rel_err(np.array(analytic.flat[idx]),
                                         np.array(numeric)))
                    max_err = max(max_err, err)
                    checked += 1
    return GradcheckResult("student", max_err, 0, checked, seeds,
                           time.monotonic() - start)


def gradcheck(loss: str = "all", tokens: int = 8, dim: int = 4,
              seeds: int = 5, h: float = 1e-6) -> list[GradcheckResult]:
    """Compare analytic gradients to central differences.

    ``loss`` selects one of l1 / intra / cross / student, or "all".
    Token and feature dims are capped (T <= 16, D <= 8) to keep the
    entrywise sweep tractable.
    """
    if loss != "all" and loss not in GRADCHECK_LOSSES:
        raise ParameterError(f"unknown loss {loss!r}")
    if not 2 <= tokens <= 16:
        raise ParameterError("tokens must lie in [2, 16]")
    if not 1 <= dim <= 8:
        raise ParameterError("dim must lie in [1, 8]")
    if seeds < 1:
        raise ParameterError("need at least one seed")
    if h <= 0:
        raise ParameterError("step h must be positive")
    names = GRADCHECK_LOSSES if loss == "all" else (loss,)
    results = []
    for name in names:
        if name == "student":
            results.append(_gradcheck_student(seeds, h))
        else:
            results.append(_gradcheck_loss(name, tokens, dim, seeds, h))
    return results
