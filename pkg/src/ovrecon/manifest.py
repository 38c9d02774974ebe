"""Scene manifests: the human-readable YAML document binding a scene's
frames, per-frame ground truth (for the oracle path), exported feature
tensors, text embeddings, and configuration echoes.

Every referenced path is resolved relative to the manifest file and must
exist at load time; frame ids must be unique; feature bindings must
reference declared frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ValidationError
from .geometry import Intrinsics

FEATURE_KINDS = ("clip", "dino", "point")
FEATURE_LEVELS = ("full", "seg", "oseg")


@dataclass
class FrameEntry:
    frame_id: int
    image: str | None = None
    intrinsics: Intrinsics | None = None
    pointmap: str | None = None  # OVTF HxWx3 ground-truth/world points
    valid: str | None = None  # OVTF HxW u8 validity
    pose: list | None = None  # 12 floats, camera-to-world
    mask_labels: str | None = None  # OVTF HxW u32 label map


@dataclass
class FeatureBinding:
    frame_id: int
    mask_id: int
    level: str
    kind: str
    path: str


@dataclass
class SceneManifest:
    frames: list = field(default_factory=list)
    features: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    text_embeddings: str | None = None
    config: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def frame_ids(self):
        return [f.frame_id for f in self.frames]

    def frame(self, frame_id):
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise ValidationError(f"manifest has no frame {frame_id}")

    def resolve(self, rel):
        return self.base_dir / rel

    def feature_path(self, frame_id, mask_id, level, kind):
        for b in self.features:
            if (
                b.frame_id == frame_id
                and b.mask_id == mask_id
                and b.level == level
                and b.kind == kind
            ):
                return self.resolve(b.path)
        return None

    def intrinsics(self):
        """The shared camera model, when every frame declares the same one."""
        models = [f.intrinsics for f in self.frames if f.intrinsics is not None]
        if not models:
            return None
        first = models[0]
        for m in models[1:]:
            if m != first:
                raise ValidationError("frames declare differing intrinsics")
        return first


def _require(cond, message):
    if not cond:
        raise ValidationError(message)


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    _require(isinstance(doc, dict), f"{path}: manifest must be a mapping")
    base = path.parent

    frames = []
    seen = set()
    for raw in doc.get("frames", []):
        _require(isinstance(raw, dict), f"{path}: frame entries must be mappings")
        _require("id" in raw, f"{path}: frame entry missing 'id'")
        fid = int(raw["id"])
        _require(fid not in seen, f"{path}: duplicate frame id {fid}")
        seen.add(fid)
        intr = None
        if raw.get("intrinsics") is not None:
            try:
                intr = Intrinsics.from_dict(raw["intrinsics"])
            except Exception as exc:
                raise ValidationError(f"{path}: frame {fid} intrinsics invalid: {exc}")
        pose = raw.get("pose")
        if pose is not None:
            pose = [float(x) for x in pose]
            _require(len(pose) == 12, f"{path}: frame {fid} pose needs 12 numbers")
        entry = FrameEntry(
            frame_id=fid,
            image=raw.get("image"),
            intrinsics=intr,
            pointmap=raw.get("pointmap"),
            valid=raw.get("valid"),
            pose=pose,
            mask_labels=raw.get("mask_labels"),
        )
        for attr in ("image", "pointmap", "valid", "mask_labels"):
            rel = getattr(entry, attr)
            if rel is not None:
                _require(
                    (base / rel).exists(),
                    f"{path}: frame {fid} {attr} path does not exist: {rel}",
                )
        frames.append(entry)
    _require(frames, f"{path}: manifest declares no frames")

    features = []
    ids = {f.frame_id for f in frames}
    for raw in doc.get("features", []):
        _require(isinstance(raw, dict), f"{path}: feature entries must be mappings")
        for key in ("frame", "mask", "level", "kind", "path"):
            _require(key in raw, f"{path}: feature binding missing '{key}'")
        binding = FeatureBinding(
            int(raw["frame"]), int(raw["mask"]), str(raw["level"]), str(raw["kind"]), str(raw["path"])
        )
        _require(
            binding.frame_id in ids,
            f"{path}: feature binding references unknown frame {binding.frame_id}",
        )
        _require(
            binding.level in FEATURE_LEVELS and binding.kind in FEATURE_KINDS,
            f"{path}: feature binding has unknown level/kind "
            f"{binding.level!r}/{binding.kind!r}",
        )
        _require(
            (base / binding.path).exists(),
            f"{path}: feature tensor missing for frame {binding.frame_id} "
            f"mask {binding.mask_id} ({binding.level}/{binding.kind}): {binding.path}",
        )
        features.append(binding)

    text = doc.get("text_embeddings")
    if text is not None:
        _require((base / text).exists(), f"{path}: text embeddings missing: {text}")
    classes = list(doc.get("classes", []) or [])

    return SceneManifest(
        frames=frames,
        features=features,
        classes=classes,
        text_embeddings=text,
        config=dict(doc.get("config", {}) or {}),
        base_dir=base,
    )


def save_manifest(manifest: SceneManifest, path):
    path = Path(path)
    doc = {"config": dict(manifest.config)}
    if manifest.classes:
        doc["classes"] = list(manifest.classes)
    if manifest.text_embeddings:
        doc["text_embeddings"] = manifest.text_embeddings
    doc["frames"] = []
    for f in manifest.frames:
        raw = {"id": f.frame_id}
        if f.image:
            raw["image"] = f.image
        if f.intrinsics:
            raw["intrinsics"] = f.intrinsics.to_dict()
        if f.pointmap:
            raw["pointmap"] = f.pointmap
        if f.valid:
            raw["valid"] = f.valid
        if f.pose:
            raw["pose"] = [float(x) for x in f.pose]
        if f.mask_labels:
            raw["mask_labels"] = f.mask_labels
        doc["frames"].append(raw)
    if manifest.features:
        doc["features"] = [
            {
                "frame": b.frame_id,
                "mask": b.mask_id,
                "level": b.level,
                "kind": b.kind,
                "path": b.path,
            }
            for b in manifest.features
        ]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return path
