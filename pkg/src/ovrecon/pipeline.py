"""The incremental reconstruction loop.

Frames stream through overlapping windows; a predictor turns each window
into local pointmaps expressed in the window's central keyframe, and each
window is registered into the world frame by confidence-weighted similarity
alignment on pixels covisible with previously registered keyframes. A
bounded reservoir of keyframes supplies the registration candidates via
cosine retrieval on pooled key vectors.

Processing is strictly causal and append-only: once a frame has a world
map or a keyframe has a pose, later windows never change them, so any
prefix of the stream reproduces an identical prefix of the state.
"""

from __future__ import annotations

import subprocess
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ovtf
from .errors import (
    ContractError,
    PredictorFailureError,
    RegistrationFailureError,
    ShapeError,
)
from .geometry import Intrinsics, PointMap, Pose, Sim3, umeyama_align


@dataclass
class WindowConfig:
    """Window lengths must be odd so a central keyframe exists. The stride
    between consecutive keyframes defaults to half the incremental window,
    which keeps the previous keyframe inside every new window."""

    init_length: int = 5
    incremental_length: int = 11
    stride: int | None = None
    keyframe_policy: str = "center"

    def __post_init__(self):
        if self.init_length < 1 or self.init_length % 2 == 0:
            raise ContractError("init_length must be a positive odd integer")
        if self.incremental_length < 1 or self.incremental_length % 2 == 0:
            raise ContractError("incremental_length must be a positive odd integer")
        if self.keyframe_policy != "center":
            raise ContractError(f"unknown keyframe policy {self.keyframe_policy!r}")
        if self.stride is None:
            self.stride = max(1, (self.incremental_length - 1) // 2)
        if self.stride < 1:
            raise ContractError("stride must be positive")


@dataclass
class Window:
    indices: list  # positions into the frame stream
    keyframe_index: int  # position of the central frame


def window_schedule(n_frames, cfg: WindowConfig):
    """Deterministic window plan for a stream of ``n_frames`` frames.

    The plan for a prefix of the stream is a prefix of the plan, which is
    what makes the pipeline causal.
    """
    if n_frames < cfg.init_length:
        raise ContractError(
            f"stream has {n_frames} frames; initialization needs {cfg.init_length}"
        )
    windows = [Window(list(range(cfg.init_length)), cfg.init_length // 2)]
    half = (cfg.incremental_length - 1) // 2
    k = windows[0].keyframe_index + cfg.stride
    while k - half >= 0 and k + half <= n_frames - 1:
        windows.append(Window(list(range(k - half, k + half + 1)), k))
        k += cfg.stride
    return windows


# -- reservoir and retrieval ---------------------------------------------------


@dataclass
class ReservoirEntry:
    keyframe_id: int
    key: np.ndarray
    summary: dict = field(default_factory=dict)


class Reservoir:
    """Bounded keyframe store with uniform reservoir sampling: after the
    capacity fills, the n-th distinct keyframe is kept with probability
    capacity / n, evicting a uniformly random slot."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ContractError("reservoir capacity must be positive")
        self.capacity = int(capacity)
        self._slots = []  # ReservoirEntry, order = slot index
        self._by_id = {}
        self.attempts = 0

    def __len__(self):
        return len(self._slots)

    def __contains__(self, kf_id):
        return kf_id in self._by_id

    def ids(self):
        return [e.keyframe_id for e in self._slots]

    def entries(self):
        return list(self._slots)

    def get(self, kf_id):
        return self._by_id.get(kf_id)

    def insert(self, kf_id, key, summary=None, rng=None):
        """Returns True when the keyframe is retained. Re-inserting an
        existing id replaces it in place without consuming a sample."""
        key = np.asarray(key, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(key)):
            raise ContractError("retrieval keys must be finite")
        entry = ReservoirEntry(kf_id, key, summary or {})
        if kf_id in self._by_id:
            slot = self._slots.index(self._by_id[kf_id])
            self._slots[slot] = entry
            self._by_id[kf_id] = entry
            return True
        self.attempts += 1
        if len(self._slots) < self.capacity:
            self._slots.append(entry)
            self._by_id[kf_id] = entry
            return True
        rng = rng or np.random.default_rng()
        j = int(rng.integers(0, self.attempts))
        if j < self.capacity:
            evicted = self._slots[j]
            del self._by_id[evicted.keyframe_id]
            self._slots[j] = entry
            self._by_id[kf_id] = entry
            return True
        return False


def retrieve_correlated(reservoir: Reservoir, query_key, k):
    """Top-k reservoir keyframes by cosine similarity of retrieval keys,
    descending, ties broken by the lower keyframe id."""
    if len(reservoir) == 0:
        raise ContractError("cannot retrieve from an empty reservoir")
    q = np.asarray(query_key, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    scored = []
    for entry in reservoir.entries():
        kn = np.linalg.norm(entry.key)
        if qn == 0.0 or kn == 0.0 or entry.key.shape != q.shape:
            sim = 0.0
        else:
            sim = float(q @ entry.key / (qn * kn))
        scored.append((-sim, entry.keyframe_id))
    scored.sort()
    return [kf_id for _, kf_id in scored[: int(k)]]


def default_retrieval_key(local_map: PointMap):
    """Pooled geometry statistics of a local map; stands in for pooled
    backbone features when no provider is attached."""
    pts = local_map.valid_points()
    if pts.shape[0] == 0:
        return np.zeros(8)
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    return np.concatenate(
        [mean, std, [local_map.valid_confidence().mean(), pts.shape[0] / local_map.valid.size]]
    )


# -- scene state ---------------------------------------------------------------


@dataclass
class KeyframeRecord:
    frame_id: int
    pose: Pose  # camera-to-world (rigid part of the registration)
    scale: float  # similarity scale absorbed at registration


class SceneState:
    """Accumulated world-frame maps, keyframe trajectory, and reservoir.

    Single-writer: only the pipeline loop mutates it, strictly in stream
    order.
    """

    def __init__(self, intrinsics: Intrinsics | None = None, reservoir_capacity=64):
        self.intrinsics = intrinsics
        self.frames = {}  # frame id -> world PointMap
        self.frame_order = []
        self.keyframes = []  # KeyframeRecord, in registration order
        self.reservoir = Reservoir(reservoir_capacity)
        self.frame_counter = 0
        self.report = {}
        self._offsets = {}
        self._total_points = 0

    # frame bookkeeping ------------------------------------------------------

    def add_frame(self, frame_id, world_map: PointMap):
        if frame_id in self.frames:
            return False  # append-only: first registration wins
        self.frames[frame_id] = world_map
        self.frame_order.append(frame_id)
        self._offsets[frame_id] = (self._total_points, world_map.valid_count)
        self._total_points += world_map.valid_count
        return True

    @property
    def keyframe_ids(self):
        return [k.frame_id for k in self.keyframes]

    def keyframe_pose(self, frame_id):
        for k in self.keyframes:
            if k.frame_id == frame_id:
                return k.pose
        raise ContractError(f"frame {frame_id} is not a registered keyframe")

    # world cloud ------------------------------------------------------------

    @property
    def total_points(self):
        return self._total_points

    def world_points(self):
        if not self.frame_order:
            return np.zeros((0, 3))
        return np.concatenate(
            [self.frames[fid].valid_points() for fid in self.frame_order], axis=0
        )

    def world_confidence(self):
        if not self.frame_order:
            return np.zeros(0)
        return np.concatenate(
            [self.frames[fid].valid_confidence() for fid in self.frame_order]
        )

    def frame_point_range(self, frame_id):
        """(start, count) of the frame's valid pixels in the world cloud."""
        return self._offsets[frame_id]

    def point_index_map(self, frame_id):
        """H x W array of global point indices (-1 on invalid pixels)."""
        pm = self.frames[frame_id]
        start, count = self._offsets[frame_id]
        idx = np.full(pm.valid.shape, -1, dtype=np.int64)
        idx[pm.valid] = start + np.arange(count)
        return idx

    def trajectory(self):
        from .metrics import Trajectory

        records = sorted(self.keyframes, key=lambda k: k.frame_id)
        return Trajectory([k.frame_id for k in records], [k.pose for k in records])


@dataclass
class RegistrationResult:
    sim3: Sim3
    pose: Pose  # rigid part: keyframe camera-to-world
    world_maps: dict  # frame id -> PointMap in world frame
    correspondences: int


def register_local_to_world(
    local_maps, state: SceneState, retrieved_ids=None, min_correspondences=3
):
    """Estimate the similarity mapping a window's keyframe coordinates into
    the world frame and re-express every map of the window there.

    ``local_maps`` is {frame id -> PointMap in the keyframe's frame}. The
    first window defines the world frame (identity). Later windows need
    covisible valid pixels with retrieved, already-registered keyframes;
    correspondences are weighted by the product of both confidences.
    """
    if not isinstance(local_maps, dict):
        raise ContractError("local_maps must map frame ids to PointMaps")
    if not local_maps:
        raise ContractError("cannot register an empty window")

    if not state.keyframes:
        sim = Sim3.identity()
        world = {
            fid: pm.transformed(sim) for fid, pm in local_maps.items()
        }
        return RegistrationResult(sim, sim.pose, world, 0)

    candidates = retrieved_ids if retrieved_ids is not None else state.keyframe_ids
    src_parts, dst_parts, w_parts = [], [], []
    for kf_id in candidates:
        if kf_id not in local_maps or kf_id not in state.frames:
            continue
        local = local_maps[kf_id]
        stored = state.frames[kf_id]
        if local.valid.shape != stored.valid.shape:
            raise ShapeError(
                f"frame {kf_id}: local map {local.valid.shape} vs stored {stored.valid.shape}"
            )
        both = local.valid & stored.valid
        if not both.any():
            continue
        src_parts.append(local.coords[both])
        dst_parts.append(stored.coords[both])
        w_parts.append(local.confidence[both] * stored.confidence[both])

    count = sum(p.shape[0] for p in src_parts)
    if count < max(3, min_correspondences):
        raise RegistrationFailureError(
            f"only {count} covisible correspondences with retrieved keyframes",
            overlap_count=count,
        )
    src = np.concatenate(src_parts, axis=0)
    dst = np.concatenate(dst_parts, axis=0)
    weights = np.concatenate(w_parts)
    sim = umeyama_align(src, dst, with_scale=True, weights=weights)
    world = {fid: pm.transformed(sim) for fid, pm in local_maps.items()}
    return RegistrationResult(sim, sim.pose, world, count)


# -- predictors -----------------------------------------------------------------


class OraclePointmapPredictor:
    """Test predictor backed by ground-truth world maps and poses; emits the
    exact local maps, optionally perturbed by isotropic Gaussian noise."""

    def __init__(self, world_coords, valid, poses, noise_sigma=0.0, seed=0):
        """``world_coords``: {frame id -> H x W x 3}; ``valid``: {frame id ->
        H x W bool}; ``poses``: {frame id -> camera-to-world Pose}."""
        self.world_coords = world_coords
        self.valid = valid
        self.poses = poses
        self.noise_sigma = float(noise_sigma)
        self.rng = np.random.default_rng(seed)

    def predict(self, frame_ids, keyframe_id):
        cam_from_world = self.poses[keyframe_id].inverse()
        out = {}
        for fid in frame_ids:
            coords = self.world_coords[fid]
            h, w, _ = coords.shape
            local = cam_from_world.apply(coords.reshape(-1, 3)).reshape(h, w, 3)
            valid = self.valid[fid]
            if self.noise_sigma > 0.0:
                local = local + self.noise_sigma * self.rng.normal(size=local.shape)
            out[fid] = PointMap(local, np.ones((h, w)), valid.copy(), frame=keyframe_id)
        return out


class ExternalDirectoryPredictor:
    """File-exchange predictor: writes a window request tensor into a watched
    directory and waits for the response tensors.

    Request ``req_<n>.ovtf``: u32 vector [keyframe id, frame ids...].
    Response ``res_<n>_points.ovtf`` (L,H,W,3 f64), ``res_<n>_conf.ovtf``
    (L,H,W f64), optional ``res_<n>_valid.ovtf`` (L,H,W u8), then the
    marker file ``res_<n>.done``.
    """

    def __init__(self, exchange_dir, timeout=30.0, poll=0.01):
        self.dir = Path(exchange_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.timeout = timeout
        self.poll = poll
        self._counter = 0

    def predict(self, frame_ids, keyframe_id):
        n = self._counter
        self._counter += 1
        request = np.array([keyframe_id] + list(frame_ids), dtype=np.uint32)
        ovtf.write(self.dir / f"req_{n:06d}.ovtf", request)
        marker = self.dir / f"res_{n:06d}.done"
        deadline = time.monotonic() + self.timeout
        while not marker.exists():
            if time.monotonic() > deadline:
                raise PredictorFailureError(
                    f"external predictor timed out on window {n}",
                    keyframe_id=keyframe_id,
                    frame_ids=frame_ids,
                )
            time.sleep(self.poll)
        points = ovtf.read(self.dir / f"res_{n:06d}_points.ovtf")
        conf = ovtf.read(self.dir / f"res_{n:06d}_conf.ovtf")
        valid_path = self.dir / f"res_{n:06d}_valid.ovtf"
        valid = ovtf.read(valid_path).astype(bool) if valid_path.exists() else None
        return _unpack_window_response(frame_ids, keyframe_id, points, conf, valid)


class ExternalStreamPredictor:
    """Byte-stream predictor over a subprocess's stdio. Each message is a
    u64 little-endian length followed by one OVTF blob; a request is the
    u32 id vector, a response is three blobs (points, confidence, valid)."""

    def __init__(self, command):
        self.proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )

    def close(self):
        if self.proc.stdin:
            self.proc.stdin.close()
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait(timeout=5)

    def predict(self, frame_ids, keyframe_id):
        request = np.array([keyframe_id] + list(frame_ids), dtype=np.uint32)
        write_frame(self.proc.stdin, ovtf.to_bytes(request))
        self.proc.stdin.flush()
        try:
            points = ovtf.from_bytes(read_frame(self.proc.stdout), origin="stream")
            conf = ovtf.from_bytes(read_frame(self.proc.stdout), origin="stream")
            valid = ovtf.from_bytes(read_frame(self.proc.stdout), origin="stream")
        except EOFError as exc:
            raise PredictorFailureError(
                "external predictor stream closed early",
                keyframe_id=keyframe_id,
                frame_ids=frame_ids,
            ) from exc
        return _unpack_window_response(
            frame_ids, keyframe_id, points, conf, valid.astype(bool)
        )


def write_frame(stream, blob):
    stream.write(struct.pack("<Q", len(blob)))
    stream.write(blob)


def read_frame(stream):
    header = stream.read(8)
    if len(header) < 8:
        raise EOFError("stream ended inside a frame header")
    (length,) = struct.unpack("<Q", header)
    blob = stream.read(length)
    if len(blob) < length:
        raise EOFError("stream ended inside a frame payload")
    return blob


def _unpack_window_response(frame_ids, keyframe_id, points, conf, valid):
    L = len(frame_ids)
    if points.ndim != 4 or points.shape[0] != L or points.shape[3] != 3:
        raise PredictorFailureError(
            f"response points shaped {points.shape}, expected ({L}, H, W, 3)",
            keyframe_id=keyframe_id,
            frame_ids=frame_ids,
        )
    h, w = points.shape[1:3]
    if conf.shape != (L, h, w):
        raise PredictorFailureError(
            f"response confidence shaped {conf.shape}, expected ({L}, {h}, {w})",
            keyframe_id=keyframe_id,
            frame_ids=frame_ids,
        )
    if valid is None:
        valid = np.ones((L, h, w), dtype=bool)
    out = {}
    for i, fid in enumerate(frame_ids):
        out[fid] = PointMap(
            points[i].astype(np.float64),
            conf[i].astype(np.float64),
            valid[i],
            frame=keyframe_id,
        )
    return out


# -- the loop --------------------------------------------------------------------


def run_stream(
    frame_ids,
    predictor,
    cfg: WindowConfig | None = None,
    intrinsics: Intrinsics | None = None,
    key_provider=None,
    reservoir_capacity=64,
    retrieve_k=8,
    seed=0,
):
    """Process a frame stream into a SceneState.

    ``key_provider(frame_id, local_map) -> vector`` overrides the default
    pooled-statistics retrieval key. ``seed`` drives reservoir sampling
    only; predictors carry their own randomness.
    """
    cfg = cfg or WindowConfig()
    frame_ids = list(frame_ids)
    windows = window_schedule(len(frame_ids), cfg)
    state = SceneState(intrinsics=intrinsics, reservoir_capacity=reservoir_capacity)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()

    for window in windows:
        wf_ids = [frame_ids[i] for i in window.indices]
        kf_id = frame_ids[window.keyframe_index]
        try:
            local_maps = predictor.predict(wf_ids, kf_id)
        except PredictorFailureError:
            raise
        except Exception as exc:
            raise PredictorFailureError(
                f"predictor failed on keyframe {kf_id}: {exc}",
                keyframe_id=kf_id,
                frame_ids=wf_ids,
            ) from exc
        missing = [fid for fid in wf_ids if fid not in local_maps]
        if missing:
            raise PredictorFailureError(
                f"predictor returned no map for frames {missing}",
                keyframe_id=kf_id,
                frame_ids=wf_ids,
            )

        retrieved = None
        if state.keyframes:
            query = _make_key(key_provider, kf_id, local_maps[kf_id])
            retrieved = retrieve_correlated(state.reservoir, query, retrieve_k)
        reg = register_local_to_world(local_maps, state, retrieved_ids=retrieved)

        for fid in sorted(reg.world_maps):
            state.add_frame(fid, reg.world_maps[fid])
        state.keyframes.append(KeyframeRecord(kf_id, reg.pose, reg.sim3.s))
        state.frame_counter = max(state.frame_counter, max(wf_ids) + 1)
        state.reservoir.insert(
            kf_id,
            _make_key(key_provider, kf_id, local_maps[kf_id]),
            summary={"points": local_maps[kf_id].valid_count},
            rng=rng,
        )

    elapsed = time.perf_counter() - t0
    processed = len(state.frames)
    state.report = {
        "frames_in_stream": len(frame_ids),
        "frames_registered": processed,
        "windows": len(windows),
        "keyframes": len(state.keyframes),
        "elapsed_s": elapsed,
        "fps": processed / elapsed if elapsed > 0 else float("inf"),
        "window_init": cfg.init_length,
        "window_incremental": cfg.incremental_length,
        "stride": cfg.stride,
        "registration": "confidence-weighted similarity on covisible keyframe pixels",
        "map_policy": "append-only, first registration wins",
    }
    return state


def _make_key(key_provider, frame_id, local_map):
    if key_provider is not None:
        return np.asarray(key_provider(frame_id, local_map), dtype=np.float64)
    return default_retrieval_key(local_map)
