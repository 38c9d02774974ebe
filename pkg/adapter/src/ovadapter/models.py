"""Model registry.

``builtin:`` identifiers name dependency-free deterministic models so the
full export pipeline runs anywhere; other identifiers are treated as
hub-hosted checkpoints and loaded through torch/transformers when those
are importable, otherwise a startup error explains what is missing.

Builtin embeddings project coarse image (or point) statistics through a
fixed seeded random matrix and unit-normalize; they are stable across
processes and carry enough content signal for retrieval-style tests.
"""

from __future__ import annotations

import zlib

import numpy as np
from scipy import ndimage

from .errors import StartupError

_DEFAULT_DIM = 32


def _seeded_matrix(tag, rows, cols):
    rng = np.random.default_rng(zlib.crc32(tag.encode()))
    return rng.normal(size=(rows, cols)) / np.sqrt(rows)


def _pool_to_grid(gray, side=16):
    """Average-pool an H x W array onto a side x side grid."""
    h, w = gray.shape
    rows = np.linspace(0, h, side + 1).astype(int)
    cols = np.linspace(0, w, side + 1).astype(int)
    out = np.zeros((side, side))
    for i in range(side):
        r0, r1 = rows[i], max(rows[i + 1], rows[i] + 1)
        for j in range(side):
            c0, c1 = cols[j], max(cols[j + 1], cols[j] + 1)
            patch = gray[min(r0, h - 1) : min(r1, h), min(c0, w - 1) : min(c1, w)]
            out[i, j] = patch.mean() if patch.size else 0.0
    return out


def _unit_rows(arr):
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return arr / norms


class BlobSegmenter:
    """Color-quantization + connected-components instance masks.

    The modal quantized color counts as background; each remaining color
    bin splits into connected components, reported largest-first.
    """

    def __init__(self, bins=6, min_pixels=12, max_masks=32):
        self.bins = bins
        self.min_pixels = min_pixels
        self.max_masks = max_masks

    def segment(self, image):
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        q = np.floor(img / 256.0 * self.bins).clip(0, self.bins - 1).astype(np.int64)
        codes = q.reshape(img.shape[0] * img.shape[1], -1)
        flat = codes @ (self.bins ** np.arange(codes.shape[1]))
        flat_img = flat.reshape(img.shape[:2])
        values, counts = np.unique(flat, return_counts=True)
        background = values[np.argmax(counts)]
        masks = []
        for value in values:
            if value == background:
                continue
            region = flat_img == value
            labeled, n = ndimage.label(region)
            for comp in range(1, n + 1):
                m = labeled == comp
                if m.sum() >= self.min_pixels:
                    masks.append(m)
        masks.sort(key=lambda m: -int(m.sum()))
        return masks[: self.max_masks]


class PatchEmbedder:
    """Deterministic crop embedding: pooled grid statistics through a fixed
    projection, one unit row per token."""

    def __init__(self, tag, dim=_DEFAULT_DIM, tokens=1, grid=16):
        self.tag = tag
        self.dim = dim
        self.tokens = tokens
        self.grid = grid
        self._proj = _seeded_matrix(f"{tag}|proj", grid * grid + 2, dim)

    def embed(self, crop):
        img = np.asarray(crop, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        if img.size == 0:
            img = np.zeros((1, 1))
        pooled = _pool_to_grid(img / 255.0, self.grid).reshape(-1)
        stats = np.array([img.mean() / 255.0, img.std() / 255.0])
        base = np.concatenate([pooled, stats]) @ self._proj
        rows = []
        for tok in range(self.tokens):
            mix = _seeded_matrix(f"{self.tag}|tok{tok}", self.dim, self.dim)
            rows.append(base @ mix)
        return _unit_rows(np.stack(rows))


class PointStatsEmbedder:
    """3D point-set embedding from pooled geometric statistics."""

    def __init__(self, tag="point-stats", dim=_DEFAULT_DIM, tokens=1):
        self.tag = tag
        self.dim = dim
        self.tokens = tokens
        self._proj = _seeded_matrix(f"{tag}|proj", 11, dim)

    def embed(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            stats = np.zeros(10)
        else:
            lo = pts.min(axis=0)
            hi = pts.max(axis=0)
            stats = np.concatenate(
                [pts.mean(axis=0), pts.std(axis=0), hi - lo, [np.log1p(pts.shape[0])]]
            )
        # constant bias channel keeps the row non-zero for empty sets
        base = np.concatenate([stats, [1.0]]) @ self._proj
        rows = []
        for tok in range(self.tokens):
            mix = _seeded_matrix(f"{self.tag}|tok{tok}", self.dim, self.dim)
            rows.append(base @ mix)
        return _unit_rows(np.stack(rows))


class HashTextEmbedder:
    """Character-trigram hashing into a fixed-width unit row per name."""

    def __init__(self, dim=_DEFAULT_DIM):
        self.dim = dim

    def embed(self, names):
        rows = np.zeros((len(names), self.dim))
        for i, name in enumerate(names):
            text = f"^{name.strip().lower()}$"
            for j in range(len(text) - 2):
                tri = text[j : j + 3]
                h = zlib.crc32(tri.encode())
                rows[i, h % self.dim] += 1.0 if (h >> 16) % 2 else -1.0
            if not np.any(rows[i]):
                rows[i, zlib.crc32(text.encode()) % self.dim] = 1.0
        return _unit_rows(rows)


def _load_hub_model(identifier, kind):
    try:
        import torch  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:
        raise StartupError(
            f"cannot load {kind} model {identifier!r}: torch/transformers unavailable ({exc})"
        ) from exc
    raise StartupError(
        f"cannot load {kind} model {identifier!r}: no checkpoint access in this "
        "environment; use a builtin: model identifier"
    )


def load_segmenter(identifier, **kwargs):
    if identifier.startswith("builtin:"):
        return BlobSegmenter(**kwargs)
    return _load_hub_model(identifier, "segmentation")


def load_embedder(identifier, tag, dim, tokens):
    if identifier.startswith("builtin:"):
        return PatchEmbedder(tag, dim=dim, tokens=tokens)
    return _load_hub_model(identifier, "embedding")


def load_point_embedder(identifier, dim, tokens):
    if identifier.startswith("builtin:"):
        return PointStatsEmbedder(dim=dim, tokens=tokens)
    return _load_hub_model(identifier, "point-feature")


def load_text_embedder(identifier, dim):
    if identifier.startswith("builtin:"):
        return HashTextEmbedder(dim=dim)
    return _load_hub_model(identifier, "text-embedding")
