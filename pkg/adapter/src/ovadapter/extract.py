"""Frame feature extraction and manifest export.

For each frame: instance masks (label map + per-mask booleans), then per
mask the three observation crops (full frame, bounding-box crop, crop with
background zeroed) embedded by the vision-language model, the two context
crops embedded by the self-supervised model, and, when a pointmap is
available, the masked 3D points embedded by the point-feature model. Every
tensor lands as an OVTF file with a manifest binding; all embedding rows
are unit-norm checked before writing.

File layout under the output directory::

    manifest.yaml
    masks/labels_<frame>.ovtf          u32 H x W, 0 = background
    features/f<frame>_m<mask>_<kind>_<level>.ovtf
    text.ovtf                          K x D class-name embeddings
    gt/...                             copied ground-truth bindings (optional)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from . import models, ovtf
from .errors import InputError

UNIT_NORM_TOL = 1e-5


@dataclass
class ExtractorConfig:
    seg_model: str = "builtin:blobs"
    vl_model: str = "builtin:patch-clip"
    ssl_model: str = "builtin:patch-dino"
    point_model: str = "builtin:point-stats"
    text_model: str = "builtin:hash-text"
    device: str = "cpu"
    out_dir: str = "export"
    feature_dim: int = 32
    tokens: int = 1


@dataclass
class FrameGroundTruth:
    """Optional per-frame geometry forwarded into the manifest so the
    engine's oracle predictor can consume the export directly."""

    pointmap: np.ndarray  # H x W x 3
    pose_row: list  # 12 floats, camera-to-world
    valid: np.ndarray | None = None


@dataclass
class Extractor:
    config: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        cfg = self.config
        self.segmenter = models.load_segmenter(cfg.seg_model)
        self.vl = models.load_embedder(cfg.vl_model, "vl", cfg.feature_dim, cfg.tokens)
        self.ssl = models.load_embedder(cfg.ssl_model, "ssl", cfg.feature_dim, cfg.tokens)
        self.point = models.load_point_embedder(cfg.point_model, cfg.feature_dim, cfg.tokens)
        self.text = models.load_text_embedder(cfg.text_model, cfg.feature_dim)

    # -- masks ------------------------------------------------------------

    def export_masks(self, image, out_dir, frame_id):
        """Label map (u32, 0 background, mask k at value k+1) plus the mask
        list, largest area first."""
        masks = self.segmenter.segment(image)
        h, w = np.asarray(image).shape[:2]
        label_map = np.zeros((h, w), dtype=np.uint32)
        kept = []
        for m in masks:
            unclaimed = m & (label_map == 0)
            if not unclaimed.any():
                continue
            label_map[unclaimed] = len(kept) + 1
            kept.append(unclaimed)
        rel = f"masks/labels_{frame_id:05d}.ovtf"
        ovtf.write(Path(out_dir) / rel, label_map)
        return kept, rel

    # -- features ----------------------------------------------------------

    def export_frame_features(self, image, masks, out_dir, frame_id, pointmap=None, valid=None):
        """Per-mask level tensors; returns manifest feature bindings."""
        img = np.asarray(image, dtype=np.float64)
        bindings = []
        if not masks:
            warnings.warn(f"frame {frame_id}: no masks, nothing to export")
            return bindings
        for mask_id, mask in enumerate(masks):
            crops = _level_crops(img, mask)
            tensors = {
                ("clip", "full"): self.vl.embed(crops["full"]),
                ("clip", "seg"): self.vl.embed(crops["seg"]),
                ("clip", "oseg"): self.vl.embed(crops["oseg"]),
                ("dino", "full"): self.ssl.embed(crops["full"]),
                ("dino", "seg"): self.ssl.embed(crops["seg"]),
            }
            if pointmap is not None:
                inside = mask if valid is None else (mask & valid)
                points = np.asarray(pointmap, dtype=np.float64)[inside]
                tensors[("point", "oseg")] = self.point.embed(points)
            for (kind, level), arr in tensors.items():
                _check_unit_rows(arr, f"frame {frame_id} mask {mask_id} {kind}/{level}")
                rel = f"features/f{frame_id:05d}_m{mask_id:03d}_{kind}_{level}.ovtf"
                ovtf.write(Path(out_dir) / rel, arr)
                bindings.append(
                    {"frame": frame_id, "mask": mask_id, "level": level, "kind": kind, "path": rel}
                )
        return bindings

    def export_text_embeddings(self, class_names, out_dir, rel="text.ovtf"):
        names = [str(n) for n in class_names]
        if not names:
            raise InputError("need at least one class name")
        rows = self.text.embed(names)
        _check_unit_rows(rows, "text embeddings")
        ovtf.write(Path(out_dir) / rel, rows)
        return rel, rows

    # -- whole scenes --------------------------------------------------------

    def export_scene(self, image_paths, out_dir, class_names=None, ground_truth=None,
                     intrinsics=None):
        """Drive the full export and write ``manifest.yaml``.

        ``ground_truth`` maps frame id -> FrameGroundTruth; when present the
        manifest carries pointmap/pose bindings so the engine's oracle
        reconstruction can run on the export. Returns the manifest path.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ground_truth = ground_truth or {}
        frames_doc = []
        features_doc = []
        for frame_id, image_path in enumerate(image_paths):
            image = _load_image(image_path)
            masks, labels_rel = self.export_masks(image, out, frame_id)
            gt = ground_truth.get(frame_id)
            pointmap = gt.pointmap if gt else None
            valid = gt.valid if gt else None
            features_doc.extend(
                self.export_frame_features(
                    image, masks, out, frame_id, pointmap=pointmap, valid=valid
                )
            )
            entry = {"id": frame_id, "image": _relative_or_copy(image_path, out),
                     "mask_labels": labels_rel}
            if intrinsics is not None:
                entry["intrinsics"] = dict(intrinsics)
            if gt is not None:
                pm_rel = f"gt/points_{frame_id:05d}.ovtf"
                ovtf.write(out / pm_rel, np.asarray(gt.pointmap, dtype=np.float64))
                entry["pointmap"] = pm_rel
                if gt.valid is not None:
                    valid_rel = f"gt/valid_{frame_id:05d}.ovtf"
                    ovtf.write(out / valid_rel, np.asarray(gt.valid, dtype=np.uint8))
                    entry["valid"] = valid_rel
                entry["pose"] = [float(x) for x in gt.pose_row]
            frames_doc.append(entry)

        doc = {"config": {"exporter": "ovadapter", "feature_dim": self.config.feature_dim},
               "frames": frames_doc}
        if features_doc:
            doc["features"] = features_doc
        if class_names:
            text_rel, _ = self.export_text_embeddings(class_names, out)
            doc["classes"] = [str(n) for n in class_names]
            doc["text_embeddings"] = text_rel
        manifest_path = out / "manifest.yaml"
        with open(manifest_path, "w") as fh:
            yaml.safe_dump(doc, fh, sort_keys=False)
        return manifest_path


def _load_image(path):
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def _relative_or_copy(image_path, out_dir):
    """Reference the image from the manifest; copy it under the export when
    it lives elsewhere so the manifest stays self-contained."""
    image_path = Path(image_path)
    try:
        return str(image_path.relative_to(out_dir))
    except ValueError:
        dest = Path(out_dir) / "images" / image_path.name
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(image_path.read_bytes())
        return str(dest.relative_to(out_dir))


def _level_crops(img, mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InputError("empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    seg = img[r0:r1, c0:c1]
    local = mask[r0:r1, c0:c1]
    oseg = seg * (local[:, :, None] if img.ndim == 3 else local)
    return {"full": img, "seg": seg, "oseg": oseg}


def _check_unit_rows(arr, what):
    norms = np.linalg.norm(np.asarray(arr), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise InputError(f"{what}: embedding rows are not unit-norm")
