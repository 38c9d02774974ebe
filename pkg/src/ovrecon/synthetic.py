"""Synthetic scenes and datasets with exact ground truth.

A scene is a rectangular room (axis-aligned box interior) containing a few
box-shaped objects, rendered by per-pixel ray casting from a smooth orbital
camera path. Every pixel carries an exact 3D point, an object label
(0 = room surfaces), and the camera pose, which makes oracle predictors,
oracle masks, and metric ground truth trivially available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .fusion import MaskSet
from .geometry import Intrinsics, PointMap, Pose
from .pipeline import SceneState, KeyframeRecord


@dataclass
class BoxObject:
    lo: np.ndarray
    hi: np.ndarray
    class_id: int  # semantic class of the object (>= 1; 0 is background)


@dataclass
class SyntheticScene:
    intrinsics: Intrinsics
    frame_ids: list
    poses: dict  # frame id -> camera-to-world Pose
    coords: dict  # frame id -> H x W x 3 world points
    valid: dict  # frame id -> H x W bool
    labels: dict  # frame id -> H x W int (0 background, k>0 objects)
    objects: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    @property
    def n_frames(self):
        return len(self.frame_ids)


def _look_at(position, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world rotation for a camera at ``position`` looking at
    ``target`` (x right, y down, z forward)."""
    f = np.asarray(target, float) - np.asarray(position, float)
    f = f / np.linalg.norm(f)
    up = np.asarray(up, float)
    x = np.cross(f, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ContractError("camera gaze is parallel to the up vector")
    x = x / nx
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return Pose(R, np.asarray(position, float))


def _pixel_rays(intrinsics):
    """Unit-z camera-frame ray directions through pixel centers."""
    js, is_ = np.meshgrid(
        np.arange(intrinsics.width), np.arange(intrinsics.height)
    )
    x = (js + 0.5 - intrinsics.cx) / intrinsics.fx
    y = (is_ + 0.5 - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _ray_box_exit(origin, dirs, lo, hi):
    """Distance to the interior wall of a box the origin is inside."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    t_far = np.nanmax(np.stack([t1, t2]), axis=0)
    t_far = np.where(np.isfinite(t_far), t_far, np.inf)
    return np.min(t_far, axis=-1)


def _ray_box_entry(origin, dirs, lo, hi):
    """Entry distance into an AABB from outside; inf where missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    t_near = np.max(np.where(np.isfinite(t1) | np.isfinite(t2), np.minimum(t1, t2), -np.inf), axis=-1)
    t_far = np.min(np.where(np.isfinite(t1) | np.isfinite(t2), np.maximum(t1, t2), np.inf), axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def render_frame(pose, intrinsics, room_lo, room_hi, objects):
    """Ray-cast one frame: exact world points and per-pixel object labels."""
    dirs_cam = _pixel_rays(intrinsics)
    dirs_world = dirs_cam @ pose.R.T
    origin = pose.t
    t_best = _ray_box_exit(origin, dirs_world, room_lo, room_hi)
    labels = np.zeros(t_best.shape, dtype=np.int64)
    for obj in objects:
        t_obj = _ray_box_entry(origin, dirs_world, obj.lo, obj.hi)
        closer = t_obj < t_best
        t_best = np.where(closer, t_obj, t_best)
        labels = np.where(closer, obj.class_id, labels)
    coords = origin + t_best[..., None] * dirs_world
    valid = np.isfinite(t_best)
    return coords, valid, labels


def build_room_scene(
    n_frames=40,
    width=32,
    height=24,
    n_objects=2,
    seed=0,
    orbit_radius=1.2,
    arc_degrees=300.0,
    room=((0.0, 0.0, 0.0), (4.0, 4.0, 2.5)),
):
    """A furnished room observed from a smooth inward-looking orbit."""
    if n_frames < 1:
        raise ContractError("need at least one frame")
    rng = np.random.default_rng(seed)
    room_lo = np.asarray(room[0], float)
    room_hi = np.asarray(room[1], float)
    center = (room_lo + room_hi) / 2.0

    fx = width * 0.42
    intrinsics = Intrinsics(
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height
    )

    objects = []
    for k in range(n_objects):
        angle = 2.0 * np.pi * k / max(n_objects, 1)
        offset = 0.55 * np.array([np.cos(angle), np.sin(angle), 0.0])
        size = np.array(
            [rng.uniform(0.35, 0.5), rng.uniform(0.35, 0.5), rng.uniform(0.5, 0.8)]
        )
        base = center + offset - np.array([size[0] / 2, size[1] / 2, center[2]])
        objects.append(BoxObject(base, base + size, class_id=k + 1))

    frame_ids = list(range(n_frames))
    poses, coords, valid, labels = {}, {}, {}, {}
    arc = np.deg2rad(arc_degrees)
    for i in frame_ids:
        theta = arc * i / max(n_frames - 1, 1)
        position = center + np.array(
            [
                orbit_radius * np.cos(theta),
                orbit_radius * np.sin(theta),
                0.25 + 0.05 * np.sin(3.0 * theta),
            ]
        )
        target = center + np.array([0.0, 0.0, -0.15])
        pose = _look_at(position, target)
        poses[i] = pose
        c, v, l = render_frame(pose, intrinsics, room_lo, room_hi, objects)
        coords[i], valid[i], labels[i] = c, v, l

    class_names = ["background"] + [f"object_{k}" for k in range(1, n_objects + 1)]
    return SyntheticScene(
        intrinsics, frame_ids, poses, coords, valid, labels, objects, class_names
    )


def two_box_scene(n_frames=5, width=40, height=30, seed=0):
    """Two well-separated boxes seen fully from a short, gentle arc; every
    view contains both objects."""
    return build_room_scene(
        n_frames=n_frames,
        width=width,
        height=height,
        n_objects=2,
        seed=seed,
        orbit_radius=1.35,
        arc_degrees=40.0,
    )


def oracle_masks(scene: SyntheticScene, frame_id, min_pixels=1):
    """Ground-truth object masks for one frame, with their class ids.

    Objects not visible (or below ``min_pixels``) are skipped.
    """
    labels = scene.labels[frame_id]
    masks, classes = [], []
    for obj in scene.objects:
        m = labels == obj.class_id
        if np.count_nonzero(m) >= min_pixels:
            masks.append(m)
            classes.append(obj.class_id)
    return MaskSet(masks), classes


def scene_state_from_ground_truth(scene: SyntheticScene, frame_ids=None):
    """A SceneState populated directly from ground truth (identity
    registration), with every selected frame as a keyframe."""
    ids = list(frame_ids) if frame_ids is not None else list(scene.frame_ids)
    state = SceneState(intrinsics=scene.intrinsics)
    for fid in ids:
        h, w = scene.valid[fid].shape
        pm = PointMap(
            scene.coords[fid], np.ones((h, w)), scene.valid[fid].copy(), frame="world"
        )
        state.add_frame(fid, pm)
        state.keyframes.append(KeyframeRecord(fid, scene.poses[fid], 1.0))
    state.frame_counter = max(ids) + 1
    return state


def gt_labeled_cloud(scene: SyntheticScene, state: SceneState, frame_ids=None):
    """Ground-truth labels, aligned index-by-index with the state's world
    cloud restricted to ``frame_ids`` (default: every registered frame)."""
    ids = list(frame_ids) if frame_ids is not None else list(state.frame_order)
    parts = []
    for fid in ids:
        pm = state.frames[fid]
        parts.append(scene.labels[fid][pm.valid])
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


# -- synthetic descriptor dataset ----------------------------------------------


@dataclass
class OvsDataset:
    """Training corpus for the descriptor-fusion model."""

    items: list  # of (LevelInputs, class id)
    text_embeddings: np.ndarray  # K x D unit rows
    class_names: list

    @property
    def n_classes(self):
        return self.text_embeddings.shape[0]

    def __len__(self):
        return len(self.items)


def build_separable_ovs_dataset(n_segments=300, dim=16, tokens=2, seed=0):
    """Three-class corpus that is fully separable only when the auxiliary
    branches are used.

    Class 0 is linearly separable from its visual-language tokens alone.
    Classes 1 and 2 share a symmetric token mixture; the within-item token
    split (one token leaning each way) is resolvable through the 3D-feature
    attention branch, and a direct class direction rides on the
    self-supervised tokens for the concatenation branch.
    """
    from .ovs import LevelInputs

    if dim < 12:
        raise ContractError("separable dataset needs at least 12 channels")
    rng = np.random.default_rng(seed)
    e = np.eye(dim)
    mix = (e[1] + e[2]) / np.sqrt(2.0)
    gamma = 0.45
    dino_dir = e[5]
    point_dir = e[9]

    items = []
    for i in range(n_segments):
        cls = i % 3
        noise = lambda scale: scale * rng.normal(size=(tokens, dim))
        if cls == 0:
            clip = e[0] + noise(0.05)
            dino = noise(0.25)
            point = noise(0.25)
        else:
            sign = 1.0 if cls == 1 else -1.0
            clip = np.tile(mix, (tokens, 1)) + noise(0.05)
            # one token leans each way; the lean order itself is class-blind
            clip[0] += gamma * e[1]
            clip[1 % tokens] += gamma * e[2]
            dino = sign * np.tile(dino_dir, (tokens, 1)) + noise(0.25)
            point = sign * np.tile(point_dir, (tokens, 1)) + noise(0.25)
        inputs = LevelInputs(
            clip_full=clip.copy(),
            clip_seg=clip + noise(0.02),
            clip_oseg=clip + noise(0.02),
            dino_full=dino.copy(),
            dino_seg=dino + noise(0.02),
            point_oseg=point,
        )
        items.append((inputs, cls))

    text = np.stack([e[0], e[1], e[2]])
    return OvsDataset(items, text, ["alpha", "beta", "gamma"])
