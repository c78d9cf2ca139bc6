"""Manipulated-object extraction: trajectory clustering, robust rigid fits, refinement.

Given labeled trajectories and a contact event, the background trajectories
near the contact centroid are clustered into two groups by their pairwise
distance variation (rigidly co-moving points keep constant distances), the
moving group seeds the object, and per-frame RANSAC rigid fits relative to
the event start select the background points consistent with the object
motion in every frame. The final segment is the intersection of those
per-frame inlier sets; poses are re-fit on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import eigh

from .contacts import ContactEvent
from .errors import DegenerateInputError, InputError, NoConsensusError, ObjectLostError
from .geometry import PointCloud
from .tracking import LabeledTrajectorySet, TrajectorySet

_ORTHONORMAL_TOL = 1e-9


@dataclass(eq=False)
class RigidPose:
    """A proper rigid transform: orthonormal rotation with det +1, plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InputError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHONORMAL_TOL:
            raise InputError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHONORMAL_TOL:
            raise InputError("rotation must have determinant +1")
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)


def rotation_geodesic_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in degrees."""
    cos = (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def rotation_axis(r: np.ndarray) -> np.ndarray:
    """Unit rotation axis of a rotation matrix (undefined sign for tiny angles)."""
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        raise DegenerateInputError("rotation angle too small to define an axis")
    return w / norm


@dataclass(eq=False)
class TrajectorySimilarity:
    """Pairwise trajectory similarity s_ij = exp(-(d_max - d_min)^2 / (2 sigma^2))."""

    matrix: np.ndarray
    sigma: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InputError("similarity matrix must be square")
        if not np.array_equal(m, m.T):
            raise InputError("similarity matrix must be symmetric")
        if np.abs(np.diagonal(m) - 1.0).max(initial=0.0) > 1e-12:
            raise InputError("similarity diagonal must be 1")
        if m.min(initial=0.0) < 0 or m.max(initial=1.0) > 1 + 1e-12:
            raise InputError("similarity entries must lie in [0, 1]")
        if self.sigma <= 0:
            raise InputError("sigma must be positive")
        self.matrix = m

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass
class ObjectSegmentationParams:
    attention_radius: float = 0.25
    sigma: float = 0.01
    ransac_iters: int = 500
    inlier_dist: float = 0.01
    seed: int = 0
    kmeans_restarts: int = 10

    def validate(self) -> None:
        if self.attention_radius <= 0 or self.sigma <= 0 or self.inlier_dist <= 0:
            raise InputError("radii, sigma, and inlier distance must be positive")
        if self.ransac_iters < 1 or self.kmeans_restarts < 1:
            raise InputError("iteration counts must be at least 1")


@dataclass(eq=False)
class ObjectResult:
    """Extracted object segment with per-frame poses relative to the event start.

    ``poses[k]`` maps object positions at the start frame to frame
    ``start_frame + k``; ``poses[0]`` is the identity. ``ransac_poses``
    keeps the raw per-frame RANSAC estimates before the final refit, and
    ``frame_inlier_sets`` the motion-consistent background points per
    frame after the start.
    """

    segment: np.ndarray
    initial_cluster: np.ndarray
    poses: tuple[RigidPose, ...]
    start_frame: int
    end_frame: int
    ransac_poses: tuple[RigidPose, ...] = ()
    frame_inlier_sets: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        self.segment = np.asarray(self.segment, dtype=np.int64).reshape(-1)
        self.initial_cluster = np.asarray(self.initial_cluster, dtype=np.int64).reshape(-1)
        self.poses = tuple(self.poses)
        if len(self.poses) != self.end_frame - self.start_frame + 1:
            raise InputError("need one pose per frame of the event window")


def trajectory_similarity(
    traj: TrajectorySet,
    candidates: np.ndarray,
    window: tuple[int, int],
    sigma: float,
) -> TrajectorySimilarity:
    """Similarity of candidate trajectories over an inclusive frame window.

    For each pair the minimum and maximum inter-point distance over the
    window feed the kernel exp(-(d_max - d_min)^2 / (2 sigma^2)), which is
    1 exactly for rigidly co-moving pairs.
    """
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if len(candidates) < 2:
        raise InputError("need at least 2 candidate trajectories")
    if sigma <= 0:
        raise InputError("sigma must be positive")
    start, end = window
    if not (0 <= start <= end < traj.n_frames):
        raise InputError(f"window {window} outside trajectory range")
    pos = traj.positions[start : end + 1, candidates]
    c = len(candidates)
    d_min = np.full((c, c), np.inf)
    d_max = np.zeros((c, c))
    for t in range(pos.shape[0]):
        diff = pos[t, :, None, :] - pos[t, None, :, :]
        d = np.sqrt((diff**2).sum(axis=-1))
        np.minimum(d_min, d, out=d_min)
        np.maximum(d_max, d, out=d_max)
    s = np.exp(-((d_max - d_min) ** 2) / (2.0 * sigma**2))
    np.fill_diagonal(s, 1.0)
    return TrajectorySimilarity(matrix=s, sigma=sigma)


def _kmeans_two(points: np.ndarray, seed: int, restarts: int) -> np.ndarray:
    """Seeded k-means with k=2; returns labels, both clusters non-empty."""
    n = len(points)
    rng = np.random.default_rng(seed)
    best_labels = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = points[rng.choice(n, size=2, replace=False)].copy()
        labels = np.full(n, -1, dtype=np.int64)
        for _ in range(100):
            d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
            new_labels = d.argmin(axis=1)
            for k in range(2):
                if not np.any(new_labels == k):  # repair empty cluster with the farthest point
                    far = d[np.arange(n), new_labels].argmax()
                    new_labels[far] = k
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for k in range(2):
                centers[k] = points[labels == k].mean(axis=0)
        inertia = ((points - centers[labels]) ** 2).sum()
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels.copy()
    return best_labels


def spectral_cluster_2(similarity, seed: int = 0, restarts: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Two-way spectral clustering with the random-walk graph Laplacian.

    Embeds points in the two generalized eigenvectors of (D - S) u = lam D u
    with the smallest eigenvalues (equivalently the smallest eigenvectors of
    I - D^-1 S) and k-means them with ``restarts`` seeded restarts. Rows
    whose similarity sum is numerically zero are split off as their own
    cluster side. The cluster containing the smallest index is returned first.
    """
    s = similarity.matrix if isinstance(similarity, TrajectorySimilarity) else np.asarray(similarity, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n) or n < 2:
        raise InputError("similarity must be square with at least 2 rows")
    degree = s.sum(axis=1)
    disconnected = degree < 1e-12
    if disconnected.any():
        connected = np.flatnonzero(~disconnected)
        isolated = np.flatnonzero(disconnected)
        if len(connected) == 0:
            connected, isolated = isolated[:1], isolated[1:]
        return _ordered(connected, isolated)
    laplacian = np.diag(degree) - s
    _, vecs = eigh(laplacian, np.diag(degree), subset_by_index=[0, 1])
    labels = _kmeans_two(vecs, seed=seed, restarts=restarts)
    return _ordered(np.flatnonzero(labels == labels[0]), np.flatnonzero(labels != labels[0]))


def _ordered(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.sort(a)
    b = np.sort(b)
    if len(b) and (len(a) == 0 or b[0] < a[0]):
        return b, a
    return a, b


def pick_moving_cluster(
    traj: TrajectorySet,
    clusters: tuple[np.ndarray, np.ndarray],
    window: tuple[int, int],
    tie_break_point=None,
) -> np.ndarray:
    """Pick the cluster with the largest mean path length over the window.

    On an exact tie the cluster containing the point nearest
    ``tie_break_point`` (at the window start) wins; without a tie-break
    point the first cluster wins.
    """
    a, b = clusters
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise InputError("clusters must be non-empty")
    start, end = window
    pos = traj.positions[start : end + 1]
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=2)  # (frames-1, n_points)
    path = steps.sum(axis=0)
    mean_a = path[a].mean()
    mean_b = path[b].mean()
    if mean_a > mean_b:
        return a
    if mean_b > mean_a:
        return b
    if tie_break_point is None:
        return a
    p = np.asarray(tie_break_point, dtype=np.float64).reshape(3)
    da = np.linalg.norm(traj.positions[start, a] - p, axis=1).min()
    db = np.linalg.norm(traj.positions[start, b] - p, axis=1).min()
    return a if da <= db else b


def umeyama_rigid_fit(src: np.ndarray, dst: np.ndarray) -> RigidPose:
    """Least-squares rigid alignment (no scale) of corresponding point sets.

    Minimizes sum ||R src_i + t - dst_i||^2 via SVD of the cross-covariance
    with the determinant-correction step, so the returned rotation is always
    proper even for reflected data. Raises DegenerateInputError for fewer
    than 3 points or a rank-deficient (collinear) configuration.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InputError("src and dst must have the same shape")
    n = len(src)
    if n < 3:
        raise DegenerateInputError(f"need at least 3 point pairs, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / n
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateInputError("point configuration is rank deficient (collinear)")
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    rot = u @ d @ vt
    return RigidPose(rot, mu_d - rot @ mu_s)


def ransac_rigid(
    src: np.ndarray,
    dst: np.ndarray,
    inlier_dist: float,
    iters: int = 500,
    seed: int = 0,
) -> tuple[RigidPose, np.ndarray]:
    """Robust rigid fit from minimal 3-point samples.

    Keeps the sample pose with the largest inlier count (pairs within
    ``inlier_dist`` of their prediction), refits on its inliers, and
    returns the refit pose with the inliers recomputed under it. Raises
    NoConsensusError when no sample reaches 3 inliers, which covers
    incompatible (non-congruent) data where even the minimal sample fails
    to fit itself.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InputError("src and dst must have the same shape")
    n = len(src)
    if n < 3:
        raise InputError(f"need at least 3 point pairs, got {n}")
    if inlier_dist <= 0:
        raise InputError("inlier_dist must be positive")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_pose = None
    for _ in range(iters):
        sample = rng.choice(n, size=3, replace=False)
        try:
            pose = umeyama_rigid_fit(src[sample], dst[sample])
        except DegenerateInputError:
            continue
        resid = np.linalg.norm(pose.apply(src) - dst, axis=1)
        count = int((resid <= inlier_dist).sum())
        if count > best_count:
            best_count = count
            best_pose = pose
    if best_pose is None or best_count < 3:
        raise NoConsensusError(f"no sample reached 3 inliers in {iters} iterations")
    resid = np.linalg.norm(best_pose.apply(src) - dst, axis=1)
    consensus = np.flatnonzero(resid <= inlier_dist)
    try:
        refit = umeyama_rigid_fit(src[consensus], dst[consensus])
    except DegenerateInputError:
        return best_pose, consensus
    resid = np.linalg.norm(refit.apply(src) - dst, axis=1)
    return refit, np.flatnonzero(resid <= inlier_dist)


def segment_object(
    traj: LabeledTrajectorySet,
    event: ContactEvent,
    params: ObjectSegmentationParams | None = None,
) -> ObjectResult:
    """Extract the rigid object manipulated during a contact event.

    Background points within ``attention_radius`` of the contact centroid
    at the start frame are clustered into two trajectory groups; the one
    with the largest average motion is the object seed. For every later
    frame of the event a RANSAC rigid fit of the seed relative to the start
    selects all background points consistent with that motion, and the
    final segment is the intersection of the per-frame inlier sets, with
    poses re-fit on it. Raises ObjectLostError (carrying per-frame inlier
    counts) if the intersection empties.
    """
    params = params if params is not None else ObjectSegmentationParams()
    params.validate()
    if not (0 <= event.start_frame <= event.end_frame < traj.n_frames):
        raise InputError("event window outside trajectory range")
    window = (event.start_frame, event.end_frame)
    t0 = event.start_frame
    bg_idx = np.flatnonzero(~traj.labels)
    if len(bg_idx) == 0:
        raise InputError("no background points to segment")
    positions = traj.trajectories.positions
    centroid0 = event.contact_centroid_per_frame[0]
    near = np.linalg.norm(positions[t0, bg_idx] - centroid0, axis=1) <= params.attention_radius
    candidates = bg_idx[near]
    if len(candidates) < 3:
        raise DegenerateInputError(
            f"only {len(candidates)} background points within {params.attention_radius} m of the contact"
        )
    similarity = trajectory_similarity(traj.trajectories, candidates, window, params.sigma)
    rows_a, rows_b = spectral_cluster_2(similarity, seed=params.seed, restarts=params.kmeans_restarts)
    cluster = pick_moving_cluster(
        traj.trajectories,
        (candidates[rows_a], candidates[rows_b]),
        window,
        tie_break_point=centroid0,
    )
    if len(cluster) < 3:
        raise DegenerateInputError(f"moving cluster has only {len(cluster)} points")

    src = positions[t0, cluster]
    bg0 = positions[t0, bg_idx]
    segment_mask = np.ones(len(bg_idx), dtype=bool)
    ransac_poses = [RigidPose.identity()]
    inlier_sets = []
    inlier_counts = []
    for k, t in enumerate(range(t0 + 1, event.end_frame + 1)):
        pose, _ = ransac_rigid(
            src,
            positions[t, cluster],
            inlier_dist=params.inlier_dist,
            iters=params.ransac_iters,
            seed=params.seed + k,
        )
        ransac_poses.append(pose)
        resid = np.linalg.norm(pose.apply(bg0) - positions[t, bg_idx], axis=1)
        frame_inliers = resid <= params.inlier_dist
        inlier_sets.append(bg_idx[frame_inliers])
        inlier_counts.append(int(frame_inliers.sum()))
        segment_mask &= frame_inliers
    segment = bg_idx[segment_mask]
    if len(segment) == 0:
        raise ObjectLostError(
            "per-frame inlier intersection is empty", inlier_counts=inlier_counts
        )

    poses = [RigidPose.identity()]
    seg0 = positions[t0, segment]
    for t in range(t0 + 1, event.end_frame + 1):
        poses.append(umeyama_rigid_fit(seg0, positions[t, segment]))
    return ObjectResult(
        segment=segment,
        initial_cluster=cluster,
        poses=tuple(poses),
        start_frame=event.start_frame,
        end_frame=event.end_frame,
        ransac_poses=tuple(ransac_poses),
        frame_inlier_sets=tuple(inlier_sets),
    )


def object_result_to_dict(result: ObjectResult) -> dict:
    return {
        "segment": result.segment.tolist(),
        "initial_cluster": result.initial_cluster.tolist(),
        "poses": [
            {
                "frame": result.start_frame + k,
                "R": pose.rotation.reshape(-1).tolist(),
                "t": pose.translation.tolist(),
            }
            for k, pose in enumerate(result.poses)
        ],
    }


def save_object_result(path, result: ObjectResult) -> None:
    with open(path, "w") as f:
        json.dump(object_result_to_dict(result), f)
        f.write("\n")


def load_object_result(path) -> ObjectResult:
    with open(path) as f:
        record = json.load(f)
    poses = []
    frames = []
    for p in record["poses"]:
        frames.append(int(p["frame"]))
        poses.append(RigidPose(np.asarray(p["R"], dtype=np.float64).reshape(3, 3), np.asarray(p["t"])))
    if not frames:
        raise InputError(f"{path}: object record has no poses")
    return ObjectResult(
        segment=np.asarray(record["segment"], dtype=np.int64),
        initial_cluster=np.asarray(record["initial_cluster"], dtype=np.int64),
        poses=tuple(poses),
        start_frame=frames[0],
        end_frame=frames[-1],
    )


def export_segment_overlays(traj: LabeledTrajectorySet, result: ObjectResult, directory) -> list[Path]:
    """Write one PLY per event frame: background points gray, segment red."""
    from .fileio import write_ply

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bg_idx = np.flatnonzero(~traj.labels)
    seg_rows = np.isin(bg_idx, result.segment)
    colors = np.full((len(bg_idx), 3), 0.6)
    colors[seg_rows] = [0.9, 0.1, 0.1]
    written = []
    for t in range(result.start_frame, result.end_frame + 1):
        cloud = PointCloud(traj.trajectories.positions[t, bg_idx], colors=colors)
        path = directory / f"frame_{t:04d}.ply"
        write_ply(cloud, path)
        written.append(path)
    return written
