"""Object-level feature aggregation, attention fusion of visual tokens, and
the confidence-aware regression losses used to supervise pointmap prediction.

All losses are pure functions and deterministic over pixel enumeration order.
Each has two layers: a differentiable core on flat valid-pixel tensors (used
for training and gradient checks) and a PointMap/FeatureMap wrapper matching
the engine's data types. Invalid pixels contribute exactly zero to values
and gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor_ad as ta
from .errors import ContractError, DomainError, ShapeError
from .geometry import PointMap
from .tensor_ad import Tensor

MASK_OVERLAP_WARN_FRACTION = 0.10


class MaskOverlapWarning(UserWarning):
    """Raised (as a warning) when object masks overlap heavily."""


@dataclass
class MaskSet:
    """A frame's object masks. Masks may overlap; each must be non-empty."""

    masks: list  # of H x W bool arrays

    def __post_init__(self):
        masks = [np.asarray(m, dtype=bool) for m in self.masks]
        if masks:
            shape = masks[0].shape
            for i, m in enumerate(masks):
                if m.shape != shape:
                    raise ShapeError(f"mask {i} shape {m.shape} != {shape}")
                if not m.any():
                    raise ContractError(f"mask {i} is empty")
        self.masks = masks

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    @property
    def shape(self):
        return self.masks[0].shape if self.masks else None


@dataclass
class FeatureMap:
    """Dense H x W x D feature image."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be H x W x D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("feature map contains non-finite values")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def depth(self):
        return self.data.shape[2]


@dataclass
class LossConfig:
    """Knobs for the pointmap regression losses.

    ``alpha`` weighs the -log(confidence) regularizer. ``scale_mode``
    selects how the normalizers are obtained: ``mean_norm`` derives each
    from the mean point norm of its own cloud, ``external`` uses the
    supplied ``z_gt`` / ``z_pred``. ``scaled_l2w`` opts the world-frame
    loss into the same normalization (off by default: that loss compares
    absolute coordinates).
    """

    alpha: float = 0.2
    scale_mode: str = "mean_norm"
    z_gt: float | None = None
    z_pred: float | None = None
    scaled_l2w: bool = False

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ContractError("alpha must be non-negative")
        if self.scale_mode not in ("mean_norm", "external"):
            raise ContractError(f"unknown scale_mode {self.scale_mode!r}")
        if self.scale_mode == "external" and (self.z_gt is None or self.z_pred is None):
            raise ContractError("external scale_mode requires z_gt and z_pred")


@dataclass
class TrainingSwitches:
    """Structural ablation toggles for the reconstruction branches:
    ``use_clip_insert`` gates the token-level fusion, ``use_clip_head``
    gates the dense-feature supervision term."""

    use_clip_insert: bool = True
    use_clip_head: bool = True


def aggregate_object_clip(masks: MaskSet, per_mask_features) -> FeatureMap:
    """Combine per-object feature maps into one dense map: the sum over
    objects of mask * features. Pixels covered by no mask are zero; pixels
    under several masks accumulate (heavy overlap draws a warning)."""
    feats = list(per_mask_features)
    if len(feats) != len(masks):
        raise ContractError(
            f"{len(masks)} masks but {len(feats)} feature maps supplied"
        )
    if not feats:
        raise ContractError("cannot aggregate an empty mask set with no shape hint")
    maps = [f.data if isinstance(f, FeatureMap) else np.asarray(f, float) for f in feats]
    h, w = masks.shape
    depth = maps[0].shape[2]
    out = np.zeros((h, w, depth))
    coverage = np.zeros((h, w), dtype=np.int64)
    for m, f in zip(masks, maps):
        if f.shape != (h, w, depth):
            raise ShapeError(f"feature map shape {f.shape} != ({h}, {w}, {depth})")
        out += m[:, :, None] * f
        coverage += m
    overlap = np.count_nonzero(coverage > 1) / coverage.size
    if overlap > MASK_OVERLAP_WARN_FRACTION:
        warnings.warn(
            f"{overlap:.0%} of pixels are covered by more than one mask; "
            "their features are summed",
            MaskOverlapWarning,
        )
    return FeatureMap(out)


def aggregate_object_clip_empty(height, width, depth) -> FeatureMap:
    """The zero-mask case: an all-zero map of the requested shape."""
    return FeatureMap(np.zeros((height, width, depth)))


def compute_scale(pm: PointMap) -> float:
    """Cloud normalizer: mean Euclidean norm of the valid 3D points."""
    pts = pm.valid_points()
    if pts.shape[0] == 0:
        raise ContractError("compute_scale needs at least one valid pixel")
    return float(np.mean(np.linalg.norm(pts, axis=1)))


def tokenize_feature_map(feature_map, patch=16):
    """Pool a dense H x W x D feature map into a T x D token matrix by
    non-overlapping patch means (ragged border patches pool over what is
    left). The patch size is a convention of this engine, not a published
    value; runs record it in their metadata.
    """
    data = feature_map.data if isinstance(feature_map, FeatureMap) else np.asarray(feature_map, float)
    if data.ndim != 3:
        raise ShapeError(f"feature map must be H x W x D, got {data.shape}")
    if patch < 1:
        raise ContractError("patch size must be positive")
    h, w, depth = data.shape
    tokens = []
    for r0 in range(0, h, patch):
        for c0 in range(0, w, patch):
            block = data[r0 : r0 + patch, c0 : c0 + patch]
            tokens.append(block.reshape(-1, depth).mean(axis=0))
    return np.stack(tokens)


def clip_cross_attention(f_vit, f_clip_tokens):
    """Residual fusion of visual tokens with object-level semantic tokens:
    tokens plus their scaled cross-attention over the semantic tokens.
    Differentiable with respect to both operands."""
    q = f_vit if isinstance(f_vit, Tensor) else ta.tensor(f_vit)
    kv = f_clip_tokens if isinstance(f_clip_tokens, Tensor) else ta.tensor(f_clip_tokens)
    if q.shape != kv.shape:
        raise ShapeError(f"token matrices differ: {q.shape} vs {kv.shape}")
    return ta.add(q, ta.scaled_cross_attention(q, kv))


def encode_window_tokens(f_vit, f_clip_tokens, switches: TrainingSwitches):
    """Token encoding with the fusion ablation toggle applied."""
    if switches.use_clip_insert:
        return clip_cross_attention(f_vit, f_clip_tokens)
    return f_vit if isinstance(f_vit, Tensor) else ta.tensor(f_vit)


# -- loss cores (flat valid-pixel tensors) -----------------------------------


def _as_points_tensor(x, name):
    t = x if isinstance(x, Tensor) else ta.tensor(np.asarray(x, dtype=np.float64))
    if t.ndim != 2 or t.shape[1] != 3:
        raise ShapeError(f"{name} must be N x 3, got {t.shape}")
    return t


def _as_conf_tensor(c, n, name):
    t = c if isinstance(c, Tensor) else ta.tensor(np.asarray(c, dtype=np.float64))
    if t.size != n:
        raise ShapeError(f"{name} has {t.size} entries for {n} pixels")
    if np.any(t.data <= 0.0):
        raise DomainError(f"{name} must be positive at every valid pixel")
    return t


def _mean_norm(points: Tensor) -> Tensor:
    return ta.tmean(ta.l2norm_rows(points))


def confidence_weighted_terms(pred, conf, gt, alpha, z_pred=None, z_gt=None):
    """Per-pixel loss sum over one frame's valid pixels:

        sum_p  C_p * || P'_p / z' - P_p / z ||  -  alpha * log C_p

    with optional scale normalizers (z terms omitted when None). ``pred``
    and ``conf`` may be graph tensors; the result is a scalar Tensor.
    """
    pred_t = _as_points_tensor(pred, "predicted points")
    gt_t = _as_points_tensor(gt, "ground-truth points")
    if pred_t.shape != gt_t.shape:
        raise ShapeError(f"point shapes differ: {pred_t.shape} vs {gt_t.shape}")
    n = pred_t.shape[0]
    if n == 0:
        raise ContractError("loss needs at least one valid pixel")
    conf_t = _as_conf_tensor(conf, n, "confidence")

    a = pred_t if z_pred is None else ta.div(pred_t, z_pred)
    b = gt_t if z_gt is None else ta.div(gt_t, z_gt)
    residual = ta.l2norm_rows(ta.sub(a, b))  # (N, 1)
    conf_col = ta.reshape(conf_t, (n, 1))
    weighted = ta.tsum(ta.mul(conf_col, residual))
    if alpha == 0.0:
        return weighted
    reg = ta.tsum(ta.log(conf_col))
    return ta.sub(weighted, ta.mul(reg, alpha))


def loss_i2p_terms(pred, conf, gt, cfg: LossConfig):
    """Scale-normalized confidence-aware loss on one frame (core form)."""
    if cfg.scale_mode == "external":
        z_pred = ta.tensor(float(cfg.z_pred))
        z_gt = float(cfg.z_gt)
    else:
        pred_t = _as_points_tensor(pred, "predicted points")
        z_pred = _mean_norm(pred_t)  # differentiable through the prediction
        gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
        z_gt = float(np.mean(np.linalg.norm(gt_arr, axis=1)))
        pred = pred_t
    if float(z_pred.data if isinstance(z_pred, Tensor) else z_pred) <= 0.0 or z_gt <= 0.0:
        raise DomainError("scale normalizers must be positive")
    return confidence_weighted_terms(pred, conf, gt, cfg.alpha, z_pred=z_pred, z_gt=z_gt)


def loss_l2w_terms(pred, conf, gt, cfg: LossConfig):
    """World-frame confidence-aware loss on one frame (no normalization
    unless ``cfg.scaled_l2w``)."""
    if cfg.scaled_l2w:
        return loss_i2p_terms(pred, conf, gt, cfg)
    return confidence_weighted_terms(pred, conf, gt, cfg.alpha)


def _window_terms(per_frame, cfg, frame_loss):
    if not per_frame:
        raise ContractError("window loss needs at least one frame")
    total = None
    for pred, conf, gt in per_frame:
        term = frame_loss(pred, conf, gt, cfg)
        total = term if total is None else ta.add(total, term)
    return total


def loss_i2p_window(per_frame, cfg: LossConfig):
    """Sum of per-frame scale-normalized losses over a window.

    ``per_frame`` is a list of (pred_points, confidence, gt_points) triples,
    each already restricted to that frame's valid pixels.
    """
    return _window_terms(per_frame, cfg, loss_i2p_terms)


def loss_l2w_window(per_frame, cfg: LossConfig):
    return _window_terms(per_frame, cfg, loss_l2w_terms)


def loss_oclip_terms(pred, target):
    """Mean absolute difference between two feature tensors (any equal
    shapes); the mean keeps the magnitude resolution-independent."""
    p = pred if isinstance(pred, Tensor) else ta.tensor(np.asarray(pred, float))
    t = target if isinstance(target, Tensor) else ta.tensor(np.asarray(target, float))
    if p.shape != t.shape:
        raise ShapeError(f"feature shapes differ: {p.shape} vs {t.shape}")
    return ta.tmean(ta.absolute(ta.sub(p, t)))


# -- PointMap / FeatureMap wrappers ---------------------------------------------


def _extract_valid(pred_pm: PointMap, gt_pm: PointMap):
    if pred_pm.coords.shape != gt_pm.coords.shape:
        raise ShapeError("prediction and ground truth have different extents")
    valid = gt_pm.valid
    if not valid.any():
        raise ContractError("no valid pixels in the ground-truth map")
    pred = pred_pm.coords[valid]
    conf = pred_pm.confidence[valid]
    gt = gt_pm.coords[valid]
    if np.any(conf <= 0.0):
        raise DomainError("confidence must be positive at valid pixels")
    return pred, conf, gt


def loss_i2p(pred_pm: PointMap, gt_pm: PointMap, cfg: LossConfig | None = None) -> float:
    """Confidence-aware, scale-normalized loss between a predicted and a
    ground-truth pointmap. Valid pixels come from the ground truth mask."""
    cfg = cfg or LossConfig()
    pred, conf, gt = _extract_valid(pred_pm, gt_pm)
    return loss_i2p_terms(ta.tensor(pred), ta.tensor(conf), gt, cfg).item()


def loss_l2w(pred_pm: PointMap, gt_pm: PointMap, cfg: LossConfig | None = None) -> float:
    """World-frame confidence-aware loss (no scale normalization)."""
    cfg = cfg or LossConfig()
    pred, conf, gt = _extract_valid(pred_pm, gt_pm)
    return loss_l2w_terms(ta.tensor(pred), ta.tensor(conf), gt, cfg).item()


def loss_oclip(pred: FeatureMap, target: FeatureMap) -> float:
    """Mean absolute distance between predicted and extracted feature maps."""
    p = pred.data if isinstance(pred, FeatureMap) else pred
    t = target.data if isinstance(target, FeatureMap) else target
    p2 = np.asarray(p, dtype=np.float64)
    t2 = np.asarray(t, dtype=np.float64)
    if p2.shape != t2.shape:
        raise ShapeError(f"feature shapes differ: {p2.shape} vs {t2.shape}")
    return loss_oclip_terms(p2.reshape(-1, p2.shape[-1]), t2.reshape(-1, t2.shape[-1])).item()


def combined_reconstruction_loss(i2p_value, l2w_value, oclip_value, switches: TrainingSwitches):
    """Total supervision with the dense-feature head toggle applied."""
    total = i2p_value + l2w_value
    if switches.use_clip_head:
        total = total + oclip_value
    return total
