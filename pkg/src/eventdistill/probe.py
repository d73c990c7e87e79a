"""Linear probing of frozen student features on token-level labels.

The head is closed-form ridge regression of one-hot class targets on
tokens, fit on the sample-mean normal equations

    (X^T X / n + alpha I) W = X^T Y / n

with centering for the (unpenalized) bias, so duplicating every training
token leaves the solution unchanged. Prediction is the argmax of
W^T f + b; every tie anywhere in the module breaks toward the lowest
class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .features import FeatureGrid
from .synth_data import LabelMap


@dataclass(frozen=True)
class TokenLabels:
    """H' x W' class ids on the token grid."""

    grid_h: int
    grid_w: int
    data: np.ndarray  # (grid_h, grid_w) int64

    def __post_init__(self):
        if self.data.shape != (self.grid_h, self.grid_w):
            raise DimensionError("token label shape does not match grid")
        self.data.setflags(write=False)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class ProbeModel:
    weight: np.ndarray  # (D, C)
    bias: np.ndarray    # (C,)
    n_classes: int
    alpha: float

    def predict(self, features: FeatureGrid) -> TokenLabels:
        """Argmax class per token; ties go to the lowest class id."""
        if features.dim != self.weight.shape[0]:
            raise DimensionError(
                f"features have dim {features.dim}, probe expects {self.weight.shape[0]}"
            )
        scores = features.tokens @ self.weight + self.bias
        pred = scores.argmax(axis=1)  # argmax returns the first (lowest) maximizer
        return TokenLabels(features.grid_h, features.grid_w,
                           pred.reshape(features.grid_h, features.grid_w))


def downsample_labels(labels: LabelMap, patch: int) -> TokenLabels:
    """Majority class per patch x patch block; ties break to the lowest id."""
    if patch < 1:
        raise ParameterError(f"patch must be >= 1, got {patch}")
    h, w = labels.height, labels.width
    if h % patch or w % patch:
        raise DimensionError(f"geometry {w}x{h} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    blocks = (labels.data.astype(np.int64)
              .reshape(gh, patch, gw, patch)
              .transpose(0, 2, 1, 3)
              .reshape(gh * gw, patch * patch))
    n_ids = int(blocks.max()) + 1
    out = np.empty(gh * gw, dtype=np.int64)
    for i, block in enumerate(blocks):
        out[i] = np.bincount(block, minlength=n_ids).argmax()
    return TokenLabels(gh, gw, out.reshape(gh, gw))


def fit_probe(features: list[FeatureGrid], labels: list[TokenLabels],
              alpha: float = 1e-3, n_classes: int | None = None) -> ProbeModel:
    """Fit the ridge head on matched (features, token labels) grids.

    Every class in [0, n_classes) must appear at least once; with
    alpha = 0 a rank-deficient system raises and suggests alpha > 0.
    """
    if alpha < 0:
        raise ParameterError("alpha must be >= 0")
    if not features or len(features) != len(labels):
        raise ParameterError("need equally many feature and label grids")
    for f, l in zip(features, labels):
        if (f.grid_h, f.grid_w) != (l.grid_h, l.grid_w):
            raise DimensionError("feature and label grids must match")
    x = np.concatenate([f.tokens for f in features], axis=0)
    y = np.concatenate([l.flat for l in labels])
    c = int(y.max()) + 1 if n_classes is None else n_classes
    if c < 2:
        raise ParameterError("probe needs at least 2 classes")
    present = np.bincount(y, minlength=c) > 0
    if not present.all():
        missing = np.nonzero(~present)[0].tolist()
        raise ParameterError(f"classes {missing} never appear in the labels")

    n, d = x.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    x_mean = x.mean(axis=0)
    y_mean = onehot.mean(axis=0)
    xc = x - x_mean
    yc = onehot - y_mean
    gram = xc.T @ xc / n + alpha * np.eye(d)
    try:
        np.linalg.cholesky(gram)  # PD check doubles as the singularity guard
    except np.linalg.LinAlgError:
        raise ParameterError(
            "singular normal equations; use alpha > 0 to regularize"
        ) from None
    weight = np.linalg.solve(gram, xc.T @ yc / n)
    bias = y_mean - x_mean @ weight
    return ProbeModel(weight, bias, c, float(alpha))


@dataclass(frozen=True)
class SegmentationScore:
    per_class_iou: np.ndarray  # (C,), NaN where excluded
    miou: float
    acc: float


def miou(pred: TokenLabels, gt: TokenLabels, n_classes: int) -> SegmentationScore:
    """IoU per class plus mean IoU and mean per-class recall.

    Classes absent from both prediction and ground truth are excluded
    from the IoU mean (not counted as zero); accuracy averages recall
    over classes present in the ground truth.
    """
    if pred.data.shape != gt.data.shape:
        raise DimensionError("prediction and ground truth grids must match")
    p, g = pred.flat, gt.flat
    if n_classes < 1 or p.max(initial=0) >= n_classes or g.max(initial=0) >= n_classes:
        raise ParameterError("labels exceed the declared class count")
    ious = np.full(n_classes, np.nan)
    recalls = []
    for c in range(n_classes):
        tp = int(np.sum((p == c) & (g == c)))
        fp = int(np.sum((p == c) & (g != c)))
        fn = int(np.sum((p != c) & (g == c)))
        if tp + fp + fn > 0:
            ious[c] = tp / (tp + fp + fn)
        if tp + fn > 0:
            recalls.append(tp / (tp + fn))
    included = ious[~np.isnan(ious)]
    return SegmentationScore(
        per_class_iou=ious,
        miou=float(included.mean()) if included.size else float("nan"),
        acc=float(np.mean(recalls)) if recalls else float("nan"),
    )


def miou_over_grids(preds: list[TokenLabels], gts: list[TokenLabels],
                    n_classes: int) -> SegmentationScore:
    """Scores over the pooled confusion counts of several grids."""
    if len(preds) != len(gts) or not preds:
        raise ParameterError("need equally many prediction and ground-truth grids")
    gh = sum(p.grid_h * p.grid_w for p in preds)
    p = np.concatenate([x.flat for x in preds])
    g = np.concatenate([x.flat for x in gts])
    assert p.size == gh
    merged_p = TokenLabels(1, p.size, p.reshape(1, -1))
    merged_g = TokenLabels(1, g.size, g.reshape(1, -1))
    return miou(merged_p, merged_g, n_classes)


def stride_subsample(entries: list, fraction: float) -> list:
    """Keep every k-th entry, k = round(1/fraction), starting at index 0."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    k = max(1, round(1.0 / fraction))
    return entries[::k]
