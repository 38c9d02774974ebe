"""Open-vocabulary semantic head over a reconstructed scene.

2D masks claim the 3D points of their own keyframe and are merged into 3D
segments by reprojection overlap. Each segment carries a descriptor fused
from three observation levels (full frame, segment crop with background,
background-free crop), combining vision-language tokens with
self-supervised visual tokens and 3D point features through cross-attention
and a learned per-channel weighting head. Training minimizes a sigmoid
cosine-similarity loss against text embeddings; inference labels each
segment with the most similar text class.

FusionModel is immutable during inference and safe to share across threads;
training owns it exclusively. Segment merging mutates the segment table
under single-writer discipline.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ad as ta
from .errors import ContractError, ShapeError
from .geometry import project
from .pipeline import SceneState
from .tensor_ad import Tensor


@dataclass
class LevelInputs:
    """Per-view token matrices for one (keyframe, mask) observation.

    Within the background-free level the point tokens must pair one-to-one
    with the vision-language tokens (same row count).
    """

    clip_full: np.ndarray  # T x D
    clip_seg: np.ndarray  # T x D
    clip_oseg: np.ndarray  # T x D
    dino_full: np.ndarray  # T x D_dino
    dino_seg: np.ndarray  # T x D_dino
    point_oseg: np.ndarray | None  # T x D_point

    def __post_init__(self):
        for name in ("clip_full", "clip_seg", "clip_oseg", "dino_full", "dino_seg"):
            arr = getattr(self, name)
            if not isinstance(arr, Tensor):
                arr = np.asarray(arr, dtype=np.float64)
                setattr(self, name, arr)
            shape = arr.shape if isinstance(arr, Tensor) else arr.shape
            if len(shape) != 2:
                raise ShapeError(f"{name} must be a T x d matrix, got {shape}")
        if self.point_oseg is not None and not isinstance(self.point_oseg, Tensor):
            self.point_oseg = np.asarray(self.point_oseg, dtype=np.float64)

    @property
    def clip_dim(self):
        return self.clip_full.shape[1]


@dataclass
class Descriptor:
    """A vector in the shared vision-language space; unit-normalized
    whenever cosine similarity is taken."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ContractError("descriptor contains non-finite values")

    def normalized(self):
        n = np.linalg.norm(self.values)
        if n == 0.0:
            raise ContractError("cannot normalize a zero descriptor")
        return self.values / n


def _unit_rows(arr, name, tol=1e-6):
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"{name} rows must be unit-normalized")


# -- the fusion model ---------------------------------------------------------


LEVELS = ("full", "seg", "oseg")


class FusionModel:
    """Learnable descriptor-fusion parameters.

    Projections start at (stacked) identities so an untrained model passes
    tokens through unchanged; the weighting head is a small attention+MLP
    stack whose per-channel softmax across the three levels always sums
    to one.
    """

    def __init__(
        self,
        clip_dim,
        dino_dim=None,
        point_dim=None,
        use_dino=True,
        use_point_encoder=True,
        per_channel_weights=True,
        use_attention_projections=True,
        init_noise=0.01,
        seed=0,
    ):
        self.clip_dim = int(clip_dim)
        self.dino_dim = int(dino_dim) if dino_dim is not None else self.clip_dim
        self.point_dim = int(point_dim) if point_dim is not None else self.clip_dim
        self.use_dino = bool(use_dino)
        self.use_point_encoder = bool(use_point_encoder)
        self.per_channel_weights = bool(per_channel_weights)
        self.use_attention_projections = bool(use_attention_projections)
        rng = np.random.default_rng(seed)
        D = self.clip_dim

        def eye_like(rows, cols):
            m = np.zeros((rows, cols))
            k = min(rows, cols)
            m[:k, :k] = np.eye(k)
            return m

        def noisy(base):
            return base + init_noise * rng.normal(size=base.shape)

        params = {
            "dino_proj": noisy(eye_like(self.dino_dim, D)),
            "concat_proj": noisy(np.vstack([np.eye(D), np.eye(D)])),
            "point_proj": noisy(eye_like(self.point_dim, D)),
            "head_w1": rng.normal(size=(D, 2 * D)) / np.sqrt(D),
            "head_b1": np.zeros(2 * D),
            "head_w2": rng.normal(size=(2 * D, D)) / np.sqrt(2 * D),
            "head_b2": np.zeros(D),
            "sim_k": np.array(10.0),
            "sim_b": np.array(0.0),
        }
        if self.use_attention_projections:
            params["head_wq"] = noisy(np.eye(D))
            params["head_wk"] = noisy(np.eye(D))
        self.params = {k: ta.parameter(v) for k, v in params.items()}

    @classmethod
    def identity(cls, clip_dim, **kwargs):
        """Exact identity projections, still with a usable weighting head."""
        kwargs.setdefault("init_noise", 0.0)
        return cls(clip_dim, **kwargs)

    def parameters(self):
        return list(self.params.values())

    @property
    def sim_k(self):
        return self.params["sim_k"]

    @property
    def sim_b(self):
        return self.params["sim_b"]

    def config(self):
        return {
            "clip_dim": self.clip_dim,
            "dino_dim": self.dino_dim,
            "point_dim": self.point_dim,
            "use_dino": self.use_dino,
            "use_point_encoder": self.use_point_encoder,
            "per_channel_weights": self.per_channel_weights,
            "use_attention_projections": self.use_attention_projections,
        }

    @classmethod
    def from_config(cls, config, arrays):
        model = cls(
            config["clip_dim"],
            dino_dim=config["dino_dim"],
            point_dim=config["point_dim"],
            use_dino=config["use_dino"],
            use_point_encoder=config["use_point_encoder"],
            per_channel_weights=config["per_channel_weights"],
            use_attention_projections=config["use_attention_projections"],
        )
        for name, arr in arrays.items():
            if name not in model.params:
                raise ContractError(f"unknown model parameter {name!r}")
            if model.params[name].shape != arr.shape:
                raise ShapeError(f"parameter {name} shaped {arr.shape}, "
                                 f"expected {model.params[name].shape}")
            model.params[name] = ta.parameter(np.asarray(arr, dtype=np.float64))
        return model

    def state_arrays(self):
        return {k: v.data.copy() for k, v in self.params.items()}


def _as_graph(x):
    return x if isinstance(x, Tensor) else ta.constant(x)


def _pair_level_tokens(model: FusionModel, clip, dino):
    """Refined tokens for a level that carries self-supervised features:
    vision-language tokens, the projected concatenation, and the
    concatenation's attention over the vision-language tokens."""
    clip_t = _as_graph(clip)
    if model.use_dino:
        dino_t = _as_graph(dino)
        if dino_t.shape[0] != clip_t.shape[0]:
            raise ShapeError(
                f"token counts differ within a level: {dino_t.shape[0]} vs {clip_t.shape[0]}"
            )
        dino_p = ta.matmul(dino_t, model.params["dino_proj"])
        f_cat = ta.matmul(ta.concat_cols(dino_p, clip_t), model.params["concat_proj"])
        refined = ta.scaled_cross_attention(f_cat, clip_t)
        return ta.add(ta.add(clip_t, f_cat), refined)
    refined = ta.scaled_cross_attention(clip_t, clip_t)
    return ta.add(clip_t, refined)


def _point_level_tokens(model: FusionModel, clip_os, point):
    """Background-free level: vision-language tokens plus the attention of
    projected 3D point features over them."""
    clip_t = _as_graph(clip_os)
    if not model.use_point_encoder:
        return clip_t
    if point is None:
        raise ContractError("point features required while the 3D branch is enabled")
    point_t = _as_graph(point)
    if point_t.shape[0] != clip_t.shape[0]:
        raise ShapeError(
            f"point tokens ({point_t.shape[0]}) must pair with visual tokens "
            f"({clip_t.shape[0]}) in the background-free level"
        )
    point_p = ta.matmul(point_t, model.params["point_proj"])
    refined = ta.scaled_cross_attention(point_p, clip_t)
    return ta.add(clip_t, refined)


def _pool_tokens(tokens):
    return ta.tmean(tokens, axis=0)  # (1, D)


def level_weights(model: FusionModel, level_matrix):
    """Per-channel weights over the three levels: attention across the level
    descriptors, an MLP, then a softmax across levels (per channel), so the
    three weights sum to one everywhere."""
    if model.use_attention_projections:
        q = ta.matmul(level_matrix, model.params["head_wq"])
        kv = ta.matmul(level_matrix, model.params["head_wk"])
        attended = ta.scaled_cross_attention(q, kv)
    else:
        attended = ta.scaled_cross_attention(level_matrix, level_matrix)
    hidden = ta.relu(ta.add_bias(ta.matmul(attended, model.params["head_w1"]), model.params["head_b1"]))
    scores = ta.add_bias(ta.matmul(hidden, model.params["head_w2"]), model.params["head_b2"])
    if model.per_channel_weights:
        return ta.transpose(ta.row_softmax(ta.transpose(scores)))  # softmax across levels
    per_level = ta.tmean(scores, axis=1)  # (3, 1)
    w = ta.transpose(ta.row_softmax(ta.transpose(per_level)))  # (3, 1)
    ones_row = ta.constant(np.ones((1, level_matrix.shape[1])))
    return ta.matmul(w, ones_row)  # broadcast scalars across channels


def fuse_descriptor(model: FusionModel, inputs: LevelInputs, return_aux=False):
    """The full descriptor fusion: per-level refined tokens, token pooling,
    learned per-channel level weighting, unit normalization.

    Returns a (1, D) graph tensor; with ``return_aux`` also a dict holding
    the level descriptors and weights.
    """
    d_full = _pool_tokens(_pair_level_tokens(model, inputs.clip_full, inputs.dino_full))
    d_seg = _pool_tokens(_pair_level_tokens(model, inputs.clip_seg, inputs.dino_seg))
    d_oseg = _pool_tokens(_point_level_tokens(model, inputs.clip_oseg, inputs.point_oseg))
    levels = ta.concat_rows([d_full, d_seg, d_oseg])  # (3, D)
    weights = level_weights(model, levels)
    merged = ta.tsum(ta.mul(weights, levels), axis=0)  # (1, D)
    norm = ta.sqrt(ta.tsum(ta.mul(merged, merged)))
    unit = ta.div(merged, norm)
    if return_aux:
        return unit, {"levels": levels, "weights": weights, "unnormalized": merged}
    return unit


def descriptor_from_inputs(model, inputs):
    return Descriptor(fuse_descriptor(model, inputs).data.reshape(-1))


# -- similarity loss and training ------------------------------------------------


def sim_pair_term(dot, z, k=1.0, b=0.0):
    """One summand of the similarity loss: -log sigmoid(z * (k*dot - b))."""
    x = float(z) * (float(k) * float(dot) - float(b))
    return float(np.logaddexp(0.0, -x))


def sim_loss(descriptors, classes, text_embeddings, k=None, b=None):
    """Sigmoid cosine-similarity loss over a batch of (descriptor, class)
    pairs against the class text embeddings:

        -(1/|B|) * sum_ij log sigmoid(z_ij * (k * d_i . t_j - b))

    where z_ij is +1 when items i and j share a class and -1 otherwise.
    ``k`` and ``b`` may be graph tensors (learnable) or floats.
    """
    if isinstance(descriptors, Tensor):
        d_matrix = descriptors
        batch = d_matrix.shape[0]
    else:
        descriptors = list(descriptors)
        batch = len(descriptors)
        if batch == 0:
            raise ContractError("similarity loss needs a non-empty batch")
        d_matrix = ta.concat_rows([_as_row(d) for d in descriptors])
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if classes.shape[0] != batch:
        raise ContractError("class list does not match the batch size")
    text = np.asarray(text_embeddings, dtype=np.float64)
    if text.ndim != 2:
        raise ShapeError("text embeddings must be K x D")
    if np.any(classes < 0) or np.any(classes >= text.shape[0]):
        raise ContractError("class id outside the text-embedding table")
    _unit_rows(text, "text embeddings")

    k = k if k is not None else ta.constant(np.array(10.0))
    b = b if b is not None else ta.constant(np.array(0.0))
    k = _as_graph(np.asarray(k, dtype=np.float64)) if not isinstance(k, Tensor) else k
    b = _as_graph(np.asarray(b, dtype=np.float64)) if not isinstance(b, Tensor) else b

    targets = ta.constant(text[classes])  # (B, D)
    dots = ta.matmul(d_matrix, ta.transpose(targets))  # (B, B): d_i . t_j
    z = np.where(classes[:, None] == classes[None, :], 1.0, -1.0)
    logits = ta.mul(ta.constant(z), ta.sub(ta.mul(dots, k), b))
    total = ta.tsum(ta.log_sigmoid(logits))
    return ta.mul(total, -1.0 / batch)


def _as_row(d):
    if isinstance(d, Tensor):
        return d if d.ndim == 2 else ta.reshape(d, (1, d.size))
    if isinstance(d, Descriptor):
        return ta.constant(d.values.reshape(1, -1))
    arr = np.asarray(d, dtype=np.float64)
    return ta.constant(arr.reshape(1, -1))


def classify(descriptor, text_embeddings):
    """Most-similar text class by cosine similarity; ties resolve to the
    lowest index. Returns (class index, score vector)."""
    text = np.asarray(text_embeddings, dtype=np.float64)
    if text.ndim != 2 or text.shape[0] == 0:
        raise ContractError("classification needs at least one text embedding")
    _unit_rows(text, "text embeddings")
    if isinstance(descriptor, Descriptor):
        d = descriptor.normalized()
    else:
        d = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ContractError("cannot classify a zero descriptor")
        d = d / n
    scores = text @ d
    return int(np.argmax(scores)), scores


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 512
    lr: float = 0.02
    seed: int = 0


def train_fusion(dataset, epochs=None, batch_size=None, config=None, model=None):
    """Mini-batch training of the fusion model against the dataset's text
    embeddings. Returns (model, per-epoch mean loss trace). The dataset must
    contain at least two classes so negatives exist."""
    cfg = config or TrainConfig()
    if epochs is not None:
        cfg.epochs = int(epochs)
    if batch_size is not None:
        cfg.batch_size = int(batch_size)
    items = list(dataset.items)
    if not items:
        raise ContractError("training dataset is empty")
    classes = {cls for _, cls in items}
    if len(classes) < 2:
        raise ContractError("training needs at least two classes (no negatives)")
    _unit_rows(np.asarray(dataset.text_embeddings), "text embeddings")

    if model is None:
        first = items[0][0]
        model = FusionModel(
            clip_dim=first.clip_full.shape[1],
            dino_dim=first.dino_full.shape[1],
            point_dim=None if first.point_oseg is None else first.point_oseg.shape[1],
            use_point_encoder=first.point_oseg is not None,
            seed=cfg.seed,
        )
    opt = ta.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for start in range(0, len(items), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            if batch_idx.size < 2:
                continue  # a singleton tail batch has no pair structure
            descs = [fuse_descriptor(model, items[i][0]) for i in batch_idx]
            labels = [items[i][1] for i in batch_idx]
            loss = sim_loss(
                descs, labels, dataset.text_embeddings, k=model.sim_k, b=model.sim_b
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        trace.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    return model, trace


def classification_accuracy(model, dataset):
    """Fraction of dataset items whose fused descriptor classifies to the
    item's class."""
    correct = 0
    for inputs, cls in dataset.items:
        pred, _ = classify(descriptor_from_inputs(model, inputs), dataset.text_embeddings)
        correct += int(pred == cls)
    return correct / len(dataset.items)


# -- 3D segments ---------------------------------------------------------------


@dataclass
class Segment3D:
    """A merged set of 3D points with multi-view descriptor state."""

    id: int
    point_indices: np.ndarray  # global indices into the scene world cloud
    observations: list = field(default_factory=list)  # (keyframe id, mask id)
    desc_sum: np.ndarray | None = None
    desc_weight: float = 0.0
    label: int | None = None

    @property
    def descriptor(self):
        if self.desc_sum is None or self.desc_weight <= 0.0:
            return None
        return Descriptor(self.desc_sum / self.desc_weight)

    @property
    def point_count(self):
        return int(self.point_indices.size)


def aggregate_segment_descriptor(segment: Segment3D, view_descriptor, weight):
    """Fold one view's fused descriptor into the segment: a weighted running
    mean over unit view descriptors, re-normalized at read time. Visibility
    (point count in the view) is the intended weight."""
    if weight <= 0.0:
        raise ContractError("view weight must be positive")
    if isinstance(view_descriptor, Descriptor):
        v = view_descriptor.normalized()
    else:
        v = np.asarray(view_descriptor, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ContractError("view descriptor must be non-zero")
        v = v / n
    if segment.desc_sum is None:
        segment.desc_sum = weight * v
    else:
        if segment.desc_sum.shape != v.shape:
            raise ShapeError("descriptor width changed between views")
        segment.desc_sum = segment.desc_sum + weight * v
    segment.desc_weight += float(weight)
    return segment


def match_segments(state: SceneState, masks_by_keyframe, iou_threshold=0.5):
    """Merge per-keyframe 2D masks into 3D segments.

    Each mask claims the scene points of its own keyframe's valid pixels
    (first mask wins inside one keyframe, so a point never lands in two
    segments). The mask joins an existing segment when that segment's
    points, projected into this keyframe, overlap the mask with IoU above
    the threshold; otherwise it starts a new segment.
    """
    if state.intrinsics is None:
        raise ContractError("segment matching needs camera intrinsics")
    cloud = state.world_points()
    segments = []
    next_id = 0
    for kf_id in sorted(masks_by_keyframe):
        if kf_id not in state.frames:
            raise ContractError(f"keyframe {kf_id} has no registered pointmap")
        masks = masks_by_keyframe[kf_id]
        pm = state.frames[kf_id]
        if masks.shape is not None and masks.shape != pm.valid.shape:
            raise ShapeError(
                f"keyframe {kf_id}: masks are {masks.shape}, pointmap is {pm.valid.shape}"
            )
        index_map = state.point_index_map(kf_id)
        cam_from_world = state.keyframe_pose(kf_id).inverse()
        h, w = pm.valid.shape
        claimed = np.zeros((h, w), dtype=bool)
        for mask_id, mask in enumerate(masks):
            claim = mask & pm.valid & ~claimed
            if not claim.any():
                continue
            claimed |= claim
            new_points = index_map[claim]

            best_seg, best_iou = None, iou_threshold
            for seg in segments:
                proj = _project_to_pixel_grid(
                    cloud[seg.point_indices], cam_from_world, state.intrinsics, h, w
                )
                inter = np.count_nonzero(proj & mask)
                union = np.count_nonzero(proj | mask)
                if union == 0:
                    continue
                iou = inter / union
                if iou > best_iou:
                    best_iou = iou
                    best_seg = seg
            if best_seg is None:
                segments.append(
                    Segment3D(next_id, np.sort(new_points), [(kf_id, mask_id)])
                )
                next_id += 1
            else:
                best_seg.point_indices = np.sort(
                    np.concatenate([best_seg.point_indices, new_points])
                )
                best_seg.observations.append((kf_id, mask_id))
    return segments


def _project_to_pixel_grid(points, cam_from_world, intrinsics, h, w):
    res = project(points, intrinsics, cam_from_world)
    grid = np.zeros((h, w), dtype=bool)
    if not res.in_view.any():
        return grid
    px = res.pixels[res.in_view]
    cols = np.floor(px[:, 0]).astype(np.int64)
    rows = np.floor(px[:, 1]).astype(np.int64)
    keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    grid[rows[keep], cols[keep]] = True
    return grid


def segment_point_labels(state: SceneState, segments, background=0):
    """Per-point labels over the scene cloud from the segments' labels
    (``background`` where unclaimed or unlabeled)."""
    labels = np.full(state.total_points, background, dtype=np.int64)
    for seg in segments:
        if seg.label is not None:
            labels[seg.point_indices] = seg.label
    return labels


def count_visible_points(state: SceneState, segment: Segment3D, kf_id):
    """How many of the segment's points project into the keyframe's image;
    the view weight used for descriptor aggregation."""
    pm = state.frames[kf_id]
    cam_from_world = state.keyframe_pose(kf_id).inverse()
    cloud = state.world_points()
    res = project(cloud[segment.point_indices], state.intrinsics, cam_from_world)
    return int(np.count_nonzero(res.in_view))


# -- observation construction ---------------------------------------------------


@dataclass
class LevelCrops:
    full: np.ndarray
    seg: np.ndarray
    oseg: np.ndarray
    bbox: tuple  # (row0, row1, col0, col1), half-open


def level_crops(image, mask):
    """The three observation crops of a mask: the full image, the bounding
    box crop with background, and the same crop with background zeroed."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("mask is empty")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != mask.shape:
        raise ShapeError("image and mask extents differ")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    seg = image[r0:r1, c0:c1].copy()
    local_mask = mask[r0:r1, c0:c1]
    if image.ndim == 3:
        oseg = seg * local_mask[:, :, None]
    else:
        oseg = seg * local_mask
    return LevelCrops(image, seg, oseg, (int(r0), int(r1), int(c0), int(c1)))


def build_levels(image, mask, pointmap, providers, frame_id=None, mask_id=None):
    """Assemble the fusion inputs for one (frame, mask) observation.

    ``providers`` supplies the token matrices (see SyntheticTokenProvider
    for the contract); provider failures propagate unchanged. The pointmap
    restricted to the mask yields the 3D points handed to the point-feature
    provider.
    """
    crops = level_crops(image, mask)
    points = None
    if pointmap is not None:
        inside = np.asarray(mask, dtype=bool) & pointmap.valid
        points = pointmap.coords[inside]
    clip_full = providers.clip_tokens("full", crops.full, frame_id, mask_id)
    clip_seg = providers.clip_tokens("seg", crops.seg, frame_id, mask_id)
    clip_oseg = providers.clip_tokens("oseg", crops.oseg, frame_id, mask_id)
    dino_full = providers.dino_tokens("full", crops.full, frame_id, mask_id)
    dino_seg = providers.dino_tokens("seg", crops.seg, frame_id, mask_id)
    point_oseg = providers.point_tokens(points, frame_id, mask_id)
    return LevelInputs(clip_full, clip_seg, clip_oseg, dino_full, dino_seg, point_oseg)


class SyntheticTokenProvider:
    """Deterministic stand-in for backbone feature extractors: tokens are a
    pure function of (kind, level, frame, mask) plus coarse content
    statistics, so repeated runs are byte-identical."""

    def __init__(self, clip_dim=16, dino_dim=16, point_dim=16, tokens=2, seed=0):
        self.clip_dim = clip_dim
        self.dino_dim = dino_dim
        self.point_dim = point_dim
        self.tokens = tokens
        self.seed = seed

    def _tokens(self, kind, dim, level, content_stat, frame_id, mask_id):
        # stable across processes (unlike hash())
        tag = f"{self.seed}|{kind}|{level}|{frame_id}|{mask_id}".encode()
        key = zlib.crc32(tag)
        rng = np.random.default_rng(key)
        base = rng.normal(size=(self.tokens, dim))
        return base + content_stat

    def clip_tokens(self, level, crop, frame_id, mask_id):
        stat = float(np.mean(crop)) if crop is not None and crop.size else 0.0
        return self._tokens("clip", self.clip_dim, level, stat, frame_id, mask_id)

    def dino_tokens(self, level, crop, frame_id, mask_id):
        stat = float(np.std(crop)) if crop is not None and crop.size else 0.0
        return self._tokens("dino", self.dino_dim, level, stat, frame_id, mask_id)

    def point_tokens(self, points, frame_id, mask_id):
        stat = float(np.mean(points)) if points is not None and points.size else 0.0
        return self._tokens("point", self.point_dim, "points", stat, frame_id, mask_id)
