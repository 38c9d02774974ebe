"""Rigid and similarity transforms, pinhole projection, point-set alignment,
robust pose recovery, and exact nearest-neighbor queries.

Conventions: a ``Pose`` is a rigid map ``x -> R x + t``. Projection takes a
world-to-camera pose; trajectories store camera-to-world poses (so the pose
translation is the camera position). All distances are meters, pixels are
continuous with the image rectangle ``[0, width) x [0, height)``.

All operations here are pure functions of their inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ContractError,
    DegeneracyError,
    EstimationFailureError,
    ShapeError,
)

_ORTHO_TOL = 1e-9


def _check_rotation(R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
        raise ContractError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
        raise ContractError("rotation matrix determinant is not +1")
    return R


class Pose:
    """Rigid transform x -> R x + t."""

    __slots__ = ("R", "t")

    def __init__(self, rotation=None, translation=None, validate=True):
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64).reshape(3)
        if validate:
            R = _check_rotation(R)
        self.R = R
        self.t = t

    @classmethod
    def identity(cls):
        return cls()

    def compose(self, other):
        """self after other: (self.compose(other))(x) == self(other(x))."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t, validate=False)

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t, validate=False)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = pts @ self.R.T + self.t
        return out[0] if single else out

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def as_row(self):
        """Flattened 12-vector: rotation row-major then translation."""
        return np.concatenate([self.R.reshape(-1), self.t])

    @classmethod
    def from_row(cls, row):
        row = np.asarray(row, dtype=np.float64).reshape(12)
        return cls(row[:9].reshape(3, 3), row[9:])

    def __repr__(self):
        return f"Pose(t={self.t})"


class Sim3:
    """Similarity transform x -> s R x + t with s > 0."""

    __slots__ = ("s", "R", "t")

    def __init__(self, scale=1.0, rotation=None, translation=None, validate=True):
        s = float(scale)
        if validate and s <= 0.0:
            raise ContractError(f"similarity scale must be positive, got {s}")
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64).reshape(3)
        if validate:
            R = _check_rotation(R)
        self.s = s
        self.R = R
        self.t = t

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_pose(cls, pose, scale=1.0):
        return cls(scale, pose.R, pose.t, validate=False)

    @property
    def pose(self):
        """Rigid part (scale dropped)."""
        return Pose(self.R, self.t, validate=False)

    def compose(self, other):
        return Sim3(
            self.s * other.s,
            self.R @ other.R,
            self.s * (self.R @ other.t) + self.t,
            validate=False,
        )

    def inverse(self):
        inv_s = 1.0 / self.s
        return Sim3(inv_s, self.R.T, -inv_s * (self.R.T @ self.t), validate=False)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = self.s * (pts @ self.R.T) + self.t
        return out[0] if single else out

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        m[:3, 3] = self.t
        return m

    def __repr__(self):
        return f"Sim3(s={self.s:.6g}, t={self.t})"


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ContractError("image extents must be positive")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


WORLD_FRAME = "world"


@dataclass
class PointMap:
    """Per-pixel 3D coordinates with confidence and validity.

    ``frame`` names the reference system: ``"world"`` or the keyframe id the
    coordinates are expressed in. Invalid pixels carry no meaning in
    ``coords``.
    """

    coords: np.ndarray  # H x W x 3
    confidence: np.ndarray  # H x W, positive where valid
    valid: np.ndarray  # H x W bool
    frame: object = WORLD_FRAME

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        h, w = self.valid.shape
        if self.coords.shape != (h, w, 3):
            raise ShapeError(f"coords shape {self.coords.shape} != ({h}, {w}, 3)")
        if self.confidence.shape != (h, w):
            raise ShapeError("confidence shape does not match validity mask")
        if np.any(self.confidence[self.valid] <= 0.0):
            raise ContractError("confidence must be positive on valid pixels")

    @property
    def height(self):
        return self.valid.shape[0]

    @property
    def width(self):
        return self.valid.shape[1]

    @property
    def valid_count(self):
        return int(np.count_nonzero(self.valid))

    def valid_points(self):
        return self.coords[self.valid]

    def valid_confidence(self):
        return self.confidence[self.valid]

    def transformed(self, sim3, frame=WORLD_FRAME):
        """Re-express coordinates under a similarity transform."""
        coords = self.coords.reshape(-1, 3)
        moved = sim3.apply(coords).reshape(self.coords.shape)
        return PointMap(moved, self.confidence.copy(), self.valid.copy(), frame)


@dataclass
class ProjectionResult:
    pixels: np.ndarray  # N x 2 (u, v); meaningless where not in_view
    in_view: np.ndarray  # N bool
    depths: np.ndarray  # N camera-frame z


def project(points, intrinsics, pose=None):
    """Pinhole-project world points. ``pose`` maps world to camera frame.

    Out-of-view (behind the camera or outside the image rectangle) is a
    value, not an error.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts if pose is None else pose.apply(pts)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    in_view = (
        (z > 0.0)
        & (u >= 0.0)
        & (u < intrinsics.width)
        & (v >= 0.0)
        & (v < intrinsics.height)
    )
    pixels = np.stack([u, v], axis=1)
    pixels[~in_view] = np.nan
    return ProjectionResult(pixels, in_view, z)


def unproject(pixels, depths, intrinsics, pose=None):
    """Back-project pixels at given camera-frame depths.

    ``pose`` is the same world-to-camera map used by :func:`project`; the
    result is expressed in the world frame (camera frame when None).
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    x = (px[:, 0] - intrinsics.cx) / intrinsics.fx * z
    y = (px[:, 1] - intrinsics.cy) / intrinsics.fy * z
    cam = np.stack([x, y, z], axis=1)
    return cam if pose is None else pose.inverse().apply(cam)


def umeyama_align(src, dst, with_scale=True, weights=None):
    """Least-squares similarity (or rigid) transform aligning src onto dst.

    Minimizes sum w_i ||s R src_i + t - dst_i||^2 and returns the Sim3.
    Requires at least 3 non-collinear correspondences.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"point sets must both be Nx3, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegeneracyError(f"alignment needs at least 3 correspondences, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != n:
            raise ShapeError("weights length does not match point count")
        if np.any(w < 0.0) or w.sum() <= 0.0:
            raise ContractError("weights must be non-negative with positive sum")
        w = w / w.sum()

    mu_src = w @ src
    mu_dst = w @ dst
    cs = src - mu_src
    cd = dst - mu_dst
    cov = (cd * w[:, None]).T @ cs  # 3x3, dst-by-src
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= max(D[0] * 1e-12, 1e-300):
        raise DegeneracyError("point configuration is collinear or coincident")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    if with_scale:
        var_src = float(np.sum(w * np.sum(cs * cs, axis=1)))
        if var_src <= 0.0:
            raise DegeneracyError("source points are coincident")
        s = float(np.sum(D * S)) / var_src
        if s <= 0.0:
            raise DegeneracyError("alignment produced a non-positive scale")
    else:
        s = 1.0
    t = mu_dst - s * (R @ mu_src)
    return Sim3(s, R, t, validate=False)


def nn_distances(query, reference, workers=1):
    """Exact nearest-neighbor distance from each query point to the reference
    set (kd-tree backed; results match brute force to machine precision)."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    r = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if r.size == 0:
        raise ContractError("reference point set must be non-empty")
    if q.size == 0:
        raise ContractError("query point set must be non-empty")
    tree = cKDTree(r)
    dists, _ = tree.query(q, k=1, workers=workers)
    return np.asarray(dists, dtype=np.float64)


# -- PnP ---------------------------------------------------------------------


def _rodrigues(w):
    """Axis-angle 3-vector to rotation matrix."""
    theta = np.linalg.norm(w)
    if theta < 1e-14:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def _pnp_linear(points, norm_pix):
    """Direct linear solve for [R|t] from >= 6 points in normalized image
    coordinates. Returns None for degenerate configurations."""
    n = points.shape[0]
    A = np.zeros((2 * n, 12))
    X = np.hstack([points, np.ones((n, 1))])
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -norm_pix[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -norm_pix[:, 1:2] * X
    try:
        _, sv, Vt = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    if sv[-2] < 1e-12 * max(sv[0], 1e-300):
        return None  # solution not unique: degenerate sample
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0.0:
        P = -P
        M = P[:, :3]
    U, D, Vt2 = np.linalg.svd(M)
    if D[2] < 1e-10 * D[0]:
        return None
    R = U @ Vt2
    scale = D.mean()
    t = P[:, 3] / scale
    # cheirality: most points must land in front of the camera
    depths = points @ R[2] + t[2]
    if np.count_nonzero(depths > 0.0) < 0.75 * n:
        return None
    return Pose(R, t, validate=False)


def _reprojection_residuals(pose, points, pixels, intrinsics):
    cam = pose.apply(points)
    z = cam[:, 2]
    bad = z <= 1e-12
    zs = np.where(bad, 1.0, z)
    u = intrinsics.fx * cam[:, 0] / zs + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / zs + intrinsics.cy
    res = np.stack([u, v], axis=1) - pixels
    res[bad] = 1e6  # points behind the camera never count as inliers
    return res


def _pnp_refine(pose, points, pixels, intrinsics, iterations=15):
    """Gauss-Newton on the pixel reprojection error over (axis-angle, t)."""
    R, t = pose.R.copy(), pose.t.copy()
    n = points.shape[0]
    step = 1e-7
    for _ in range(iterations):
        base = Pose(R, t, validate=False)
        r0 = _reprojection_residuals(base, points, pixels, intrinsics).reshape(-1)
        J = np.zeros((2 * n, 6))
        for j in range(6):
            delta = np.zeros(6)
            delta[j] = step
            Rp = _rodrigues(delta[:3]) @ R
            tp = t + delta[3:]
            rp = _reprojection_residuals(
                Pose(Rp, tp, validate=False), points, pixels, intrinsics
            ).reshape(-1)
            Rm = _rodrigues(-delta[:3]) @ R
            tm = t - delta[3:]
            rm = _reprojection_residuals(
                Pose(Rm, tm, validate=False), points, pixels, intrinsics
            ).reshape(-1)
            J[:, j] = (rp - rm) / (2.0 * step)
        H = J.T @ J + 1e-12 * np.eye(6)
        g = J.T @ r0
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        R = _rodrigues(delta[:3]) @ R
        t = t + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    # re-orthonormalize against numeric drift
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return Pose(R, t, validate=False)


@dataclass
class PnPResult:
    pose: Pose  # world-to-camera
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def inlier_count(self):
        return int(self.inliers.size)


def pnp_ransac(points, pixels, intrinsics, iterations=512, inlier_threshold=2.0, seed=0):
    """Robust pose from 3D-2D correspondences.

    Linear 6-point solves inside a RANSAC loop, then Gauss-Newton refinement
    on the final inlier set. The returned pose (world-to-camera) reprojects
    every reported inlier within ``inlier_threshold`` pixels. ``seed`` fixes
    the sampling sequence; it can also be a ``numpy.random.Generator``.
    """
    points = np.asarray(points, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or pixels.shape != (points.shape[0], 2):
        raise ShapeError("expected Nx3 points with matching Nx2 pixels")
    n = points.shape[0]
    if n < 6:
        raise ContractError(f"PnP needs at least 6 correspondences, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    norm_pix = np.stack(
        [
            (pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
            (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
        ],
        axis=1,
    )

    best_mask = None
    best_count = 0
    best_rms = np.inf
    for _ in range(int(iterations)):
        sample = rng.choice(n, size=6, replace=False)
        pose = _pnp_linear(points[sample], norm_pix[sample])
        if pose is None:
            continue
        res = _reprojection_residuals(pose, points, pixels, intrinsics)
        err = np.linalg.norm(res, axis=1)
        mask = err < inlier_threshold
        count = int(np.count_nonzero(mask))
        if count < 6:
            continue
        rms = float(np.sqrt(np.mean(err[mask] ** 2)))
        if count > best_count or (count == best_count and rms < best_rms):
            best_count = count
            best_mask = mask
            best_rms = rms

    if best_mask is None:
        raise EstimationFailureError(
            f"no pose with >= 6 inliers found in {iterations} iterations"
        )

    # refit on the consensus set, then re-evaluate membership (twice: the
    # refined pose can pull additional borderline points in or out)
    mask = best_mask
    pose = None
    for _ in range(2):
        idx = np.flatnonzero(mask)
        pose = _pnp_linear(points[idx], norm_pix[idx])
        if pose is None:
            raise EstimationFailureError("inlier set became degenerate during refit")
        pose = _pnp_refine(pose, points[idx], pixels[idx], intrinsics)
        err = np.linalg.norm(
            _reprojection_residuals(pose, points, pixels, intrinsics), axis=1
        )
        new_mask = err < inlier_threshold
        if new_mask.sum() < 6:
            raise EstimationFailureError("refined pose keeps fewer than 6 inliers")
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask

    return PnPResult(pose, np.flatnonzero(mask))


def rotation_angle(Ra, Rb=None):
    """Geodesic angle of Ra (relative to Rb when given), in radians."""
    R = Ra if Rb is None else Ra @ Rb.T
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng):
    """Uniform random rotation via QR of a Gaussian matrix."""
    A = rng.normal(size=(3, 3))
    Q, Rm = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(Rm)))
    if np.linalg.det(Q) < 0.0:
        Q[:, 0] = -Q[:, 0]
    return Q
