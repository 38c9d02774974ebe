"""Persistence: scene directories, segment tables, fusion models, datasets.

A scene directory holds the world cloud as flat tensors plus enough
structure (per-frame validity masks, frame order) to rebuild the per-pixel
pointmaps, the keyframe trajectory, and optional semantic outputs::

    scene/
      meta.yaml          frame order, extents, keyframe scales, report
      points.ovtf        f64 N x 3, valid pixels in frame order
      confidences.ovtf   f64 N
      valid.ovtf         u8 F x H x W
      trajectory.ovtf    f64 K x 12 pose rows (keyframes, ascending id)
      keyframes.ovtf     u32 K
      labels.ovtf        u32 N (optional; written by segment/query)
      segments.json      segment table (optional)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml

from . import ovtf
from .errors import ValidationError
from .geometry import Intrinsics, PointMap, Pose
from .ovs import FusionModel, LevelInputs, Segment3D
from .pipeline import KeyframeRecord, SceneState
from .synthetic import OvsDataset


def save_scene(state: SceneState, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not state.frame_order:
        raise ValidationError("refusing to save an empty scene")
    h, w = state.frames[state.frame_order[0]].valid.shape

    ovtf.write(directory / "points.ovtf", state.world_points())
    ovtf.write(directory / "confidences.ovtf", state.world_confidence())
    valid = np.stack([state.frames[f].valid for f in state.frame_order]).astype(np.uint8)
    ovtf.write(directory / "valid.ovtf", valid)

    records = sorted(state.keyframes, key=lambda k: k.frame_id)
    ovtf.write(
        directory / "keyframes.ovtf", np.array([k.frame_id for k in records], np.uint32)
    )
    ovtf.write(
        directory / "trajectory.ovtf",
        np.stack([k.pose.as_row() for k in records]) if records else np.zeros((0, 12)),
    )

    meta = {
        "height": int(h),
        "width": int(w),
        "frame_order": [int(f) for f in state.frame_order],
        "keyframe_scales": {int(k.frame_id): float(k.scale) for k in records},
        "intrinsics": state.intrinsics.to_dict() if state.intrinsics else None,
        "report": _plain(state.report),
    }
    with open(directory / "meta.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)
    return directory


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def load_scene(directory) -> SceneState:
    directory = Path(directory)
    meta_path = directory / "meta.yaml"
    if not meta_path.exists():
        raise ValidationError(f"not a scene directory (no meta.yaml): {directory}")
    with open(meta_path) as fh:
        meta = yaml.safe_load(fh)

    points = ovtf.read(directory / "points.ovtf")
    conf = ovtf.read(directory / "confidences.ovtf")
    valid = ovtf.read(directory / "valid.ovtf").astype(bool)
    keyframes = ovtf.read(directory / "keyframes.ovtf")
    traj_rows = ovtf.read(directory / "trajectory.ovtf")

    frame_order = [int(f) for f in meta["frame_order"]]
    if valid.shape[0] != len(frame_order):
        raise ValidationError("validity stack does not match the frame order")
    total_valid = int(valid.sum())
    if points.shape != (total_valid, 3) or conf.shape != (total_valid,):
        raise ValidationError("point/confidence extents disagree with validity masks")

    intr = meta.get("intrinsics")
    state = SceneState(
        intrinsics=Intrinsics.from_dict(intr) if intr else None
    )
    cursor = 0
    h, w = int(meta["height"]), int(meta["width"])
    for i, fid in enumerate(frame_order):
        mask = valid[i]
        count = int(mask.sum())
        coords = np.zeros((h, w, 3))
        coords[mask] = points[cursor : cursor + count]
        confidence = np.ones((h, w))
        confidence[mask] = conf[cursor : cursor + count]
        cursor += count
        state.add_frame(fid, PointMap(coords, confidence, mask, frame="world"))

    scales = {int(k): float(v) for k, v in (meta.get("keyframe_scales") or {}).items()}
    for fid, row in zip(keyframes.tolist(), np.asarray(traj_rows).reshape(-1, 12)):
        state.keyframes.append(
            KeyframeRecord(int(fid), Pose.from_row(row), scales.get(int(fid), 1.0))
        )
    state.frame_counter = max(frame_order) + 1 if frame_order else 0
    state.report = meta.get("report") or {}
    return state


# -- segments ---------------------------------------------------------------------


def save_segments(segments, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for seg in segments:
        desc = seg.descriptor
        rows.append(
            {
                "id": int(seg.id),
                "point_indices": [int(i) for i in seg.point_indices],
                "observations": [[int(a), int(b)] for a, b in seg.observations],
                "descriptor": None if desc is None else desc.normalized().tolist(),
                "desc_weight": float(seg.desc_weight),
                "label": None if seg.label is None else int(seg.label),
            }
        )
    with open(directory / "segments.json", "w") as fh:
        json.dump({"segments": rows}, fh, indent=1)
    return directory / "segments.json"


def load_segments(directory):
    path = Path(directory) / "segments.json"
    if not path.exists():
        raise ValidationError(f"no segment table in {directory}")
    with open(path) as fh:
        doc = json.load(fh)
    segments = []
    for row in doc.get("segments", []):
        seg = Segment3D(
            int(row["id"]),
            np.asarray(row["point_indices"], dtype=np.int64),
            [(int(a), int(b)) for a, b in row.get("observations", [])],
            label=None if row.get("label") is None else int(row["label"]),
        )
        if row.get("descriptor") is not None:
            weight = float(row.get("desc_weight") or 1.0)
            seg.desc_sum = np.asarray(row["descriptor"], dtype=np.float64) * weight
            seg.desc_weight = weight
        segments.append(seg)
    return segments


def save_labels(labels, directory):
    ovtf.write(Path(directory) / "labels.ovtf", np.asarray(labels, dtype=np.uint32))


def load_labels(directory):
    path = Path(directory) / "labels.ovtf"
    if not path.exists():
        raise ValidationError(f"no labels tensor in {directory}")
    return ovtf.read(path).astype(np.int64)


# -- fusion model -------------------------------------------------------------------


def save_model(model: FusionModel, directory):
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    with open(directory / "meta.yaml", "w") as fh:
        yaml.safe_dump(model.config(), fh, sort_keys=False)
    for name, arr in model.state_arrays().items():
        ovtf.write(directory / "params" / f"{name}.ovtf", arr)
    return directory


def load_model(directory) -> FusionModel:
    directory = Path(directory)
    meta_path = directory / "meta.yaml"
    if not meta_path.exists():
        raise ValidationError(f"not a model directory (no meta.yaml): {directory}")
    with open(meta_path) as fh:
        config = yaml.safe_load(fh)
    arrays = {}
    for path in sorted((directory / "params").glob("*.ovtf")):
        arrays[path.stem] = ovtf.read(path)
    return FusionModel.from_config(config, arrays)


# -- training datasets -----------------------------------------------------------------


_ITEM_KEYS = ("clip_full", "clip_seg", "clip_oseg", "dino_full", "dino_seg", "point_oseg")


def save_dataset(dataset: OvsDataset, directory):
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    ovtf.write(directory / "text.ovtf", np.asarray(dataset.text_embeddings))
    items = []
    for i, (inputs, cls) in enumerate(dataset.items):
        row = {"class": int(cls)}
        for key in _ITEM_KEYS:
            arr = getattr(inputs, key)
            if arr is None:
                continue
            rel = f"tensors/item{i:05d}_{key}.ovtf"
            ovtf.write(directory / rel, np.asarray(arr))
            row[key] = rel
        items.append(row)
    doc = {
        "classes": list(dataset.class_names),
        "text_embeddings": "text.ovtf",
        "items": items,
    }
    with open(directory / "dataset.yaml", "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return directory


def load_dataset(directory) -> OvsDataset:
    directory = Path(directory)
    doc_path = directory / "dataset.yaml"
    if not doc_path.exists():
        raise ValidationError(f"not a dataset directory (no dataset.yaml): {directory}")
    with open(doc_path) as fh:
        doc = yaml.safe_load(fh)
    text = ovtf.read(directory / doc["text_embeddings"]).astype(np.float64)
    items = []
    for row in doc.get("items", []):
        arrays = {}
        for key in _ITEM_KEYS:
            rel = row.get(key)
            if rel is None:
                if key != "point_oseg":
                    raise ValidationError(f"dataset item missing tensor {key!r}")
                arrays[key] = None
                continue
            path = directory / rel
            if not path.exists():
                raise ValidationError(f"dataset tensor missing: {rel}")
            arrays[key] = ovtf.read(path).astype(np.float64)
        items.append((LevelInputs(**arrays), int(row["class"])))
    if not items:
        raise ValidationError("dataset declares no items")
    return OvsDataset(items, text, list(doc.get("classes", [])))


# -- synthetic scene export ---------------------------------------------------------------


def export_synthetic_scene(scene, directory, stem="scene"):
    """Write a synthetic scene as OVTF ground truth plus a manifest so the
    CLI oracle path can run on it."""
    from .manifest import FrameEntry, SceneManifest, save_manifest

    directory = Path(directory)
    (directory / "gt").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    frames = []
    for fid in scene.frame_ids:
        pm_rel = f"gt/points_{fid:05d}.ovtf"
        valid_rel = f"gt/valid_{fid:05d}.ovtf"
        labels_rel = f"masks/labels_{fid:05d}.ovtf"
        ovtf.write(directory / pm_rel, scene.coords[fid])
        ovtf.write(directory / valid_rel, scene.valid[fid].astype(np.uint8))
        ovtf.write(directory / labels_rel, scene.labels[fid].astype(np.uint32))
        frames.append(
            FrameEntry(
                frame_id=fid,
                intrinsics=scene.intrinsics,
                pointmap=pm_rel,
                valid=valid_rel,
                pose=scene.poses[fid].as_row().tolist(),
                mask_labels=labels_rel,
            )
        )
    man = SceneManifest(
        frames=frames,
        classes=list(scene.class_names),
        config={"window_init": 5, "window_incremental": 11},
        base_dir=directory,
    )
    return save_manifest(man, directory / f"{stem}.yaml")
