"""Synthetic piecewise-rigid scenes with exact ground truth.

Scenes are unions of rigid bodies (sampled panels, boxes, spheres) with a
scripted pose per frame; one body is the actor, one may be the manipulated
object. Generation adds isotropic Gaussian position noise and returns both
the frames and a ground-truth bundle (noise-free trajectories, labels,
contact interval, object membership, absolute body poses) against which
any pipeline output can be scored.

The canned scenarios cover a free rigid motion ("pitcher"), a pure
translation ("drawer"), and a rotation about a fixed hinge axis ("door").
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .contacts import ContactEvent
from .errors import InputError
from .geometry import PointCloud
from .objects import ObjectResult, RigidPose, rotation_geodesic_deg
from .tracking import LabeledTrajectorySet, TrajectorySet


@dataclass(eq=False)
class RigidBody:
    """Canonical point samples of one rigid body plus its absolute pose per frame."""

    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    poses: tuple[RigidPose, ...]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.poses = tuple(self.poses)
        if not (len(self.points) == len(self.normals) == len(self.colors)):
            raise InputError("points, normals, colors must have equal length")


@dataclass(eq=False)
class SyntheticScene:
    bodies: list[RigidBody]
    actor_index: int | None
    contact_interval: tuple[int, int] | None
    noise_sigma: float
    seed: int
    object_index: int | None = None

    def __post_init__(self):
        if not self.bodies:
            raise InputError("scene needs at least one body")
        n_frames = len(self.bodies[0].poses)
        if n_frames < 2:
            raise InputError("scene needs at least 2 frames")
        if any(len(b.poses) != n_frames for b in self.bodies):
            raise InputError("all bodies must define a pose for every frame")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be nonnegative")
        if self.actor_index is not None and not 0 <= self.actor_index < len(self.bodies):
            raise InputError("actor_index out of range")
        if self.object_index is not None and not 0 <= self.object_index < len(self.bodies):
            raise InputError("object_index out of range")

    @property
    def n_frames(self) -> int:
        return len(self.bodies[0].poses)


@dataclass(eq=False)
class GroundTruth:
    """Noise-free trajectories and exact labels/poses of a generated scene."""

    positions: np.ndarray  # (n_frames, n_points, 3), noise-free
    labels: np.ndarray  # bool, True = actor
    body_index: np.ndarray
    contact_start: int | None
    contact_end: int | None
    object_indices: np.ndarray
    body_poses: list[tuple[RigidPose, ...]]
    noise_sigma: float
    seed: int

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_points(self) -> int:
        return self.positions.shape[1]


def generate(scene: SyntheticScene) -> tuple[list[PointCloud], GroundTruth]:
    """Render a scene to per-frame clouds plus its ground-truth bundle.

    Frame t is the union of all bodies under their frame-t poses with
    N(0, noise_sigma^2) position noise; normals are rotated exactly and
    colors are noise-free. Deterministic for a fixed scene seed.
    """
    n_frames = scene.n_frames
    rng = np.random.default_rng(scene.seed + 1)  # builders consume scene.seed
    body_index = np.concatenate(
        [np.full(len(b.points), i, dtype=np.int64) for i, b in enumerate(scene.bodies)]
    )
    colors = np.vstack([b.colors for b in scene.bodies])
    clean = np.empty((n_frames, len(body_index), 3))
    frames = []
    for t in range(n_frames):
        pos = np.vstack([b.poses[t].apply(b.points) for b in scene.bodies])
        nrm = np.vstack([b.normals @ b.poses[t].rotation.T for b in scene.bodies])
        clean[t] = pos
        noisy = pos + rng.normal(scale=scene.noise_sigma, size=pos.shape) if scene.noise_sigma > 0 else pos
        frames.append(PointCloud(noisy, normals=nrm, colors=colors))
    labels = body_index == scene.actor_index if scene.actor_index is not None else np.zeros(len(body_index), bool)
    object_indices = (
        np.flatnonzero(body_index == scene.object_index)
        if scene.object_index is not None
        else np.empty(0, dtype=np.int64)
    )
    contact = scene.contact_interval
    truth = GroundTruth(
        positions=clean,
        labels=labels,
        body_index=body_index,
        contact_start=None if contact is None else int(contact[0]),
        contact_end=None if contact is None else int(contact[1]),
        object_indices=object_indices,
        body_poses=[b.poses for b in scene.bodies],
        noise_sigma=scene.noise_sigma,
        seed=scene.seed,
    )
    return frames, truth


@dataclass(eq=False)
class PipelineResult:
    """The pipeline outputs needed for scoring against a ground-truth bundle."""

    trajectories: LabeledTrajectorySet
    events: list[ContactEvent]
    objects: list[ObjectResult]


@dataclass(eq=False)
class ScoreReport:
    contact_iou: float
    segment_iou: float | None
    rotation_errors_deg: list[float]
    translation_errors_m: list[float]
    trajectory_rmse_m: float

    @property
    def max_rotation_err_deg(self) -> float:
        return max(self.rotation_errors_deg, default=float("nan"))

    @property
    def max_translation_err_m(self) -> float:
        return max(self.translation_errors_m, default=float("nan"))

    def to_dict(self) -> dict:
        return {
            "contact_iou": self.contact_iou,
            "segment_iou": self.segment_iou,
            "rotation_errors_deg": self.rotation_errors_deg,
            "translation_errors_m": self.translation_errors_m,
            "max_rotation_err_deg": self.max_rotation_err_deg,
            "max_translation_err_m": self.max_translation_err_m,
            "trajectory_rmse_m": self.trajectory_rmse_m,
        }


def interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of two inclusive frame intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    union = max(a[1], b[1]) - min(a[0], b[0]) + 1
    return max(inter, 0) / union


def set_iou(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def score(result: PipelineResult, truth: GroundTruth) -> ScoreReport:
    """Score pipeline outputs against ground truth.

    Reports contact interval IoU (best event), object segment IoU, and
    per-frame pose errors of the matched object: rotation as geodesic
    degrees, translation as the displacement mismatch evaluated at the
    object's start-frame centroid. Trajectory RMSE covers all points and
    frames.
    """
    traj = result.trajectories
    if traj.n_frames != truth.n_frames:
        raise InputError(f"frame count mismatch: result {traj.n_frames}, truth {truth.n_frames}")
    if traj.n_points != truth.n_points:
        raise InputError(f"point count mismatch: result {traj.n_points}, truth {truth.n_points}")
    diff = traj.trajectories.positions - truth.positions
    rmse = float(np.sqrt((diff**2).sum(axis=-1).mean()))

    contact_iou = 0.0
    best = None
    if truth.contact_start is not None and result.events:
        truth_iv = (truth.contact_start, truth.contact_end)
        ious = [interval_iou((e.start_frame, e.end_frame), truth_iv) for e in result.events]
        best = int(np.argmax(ious))
        contact_iou = float(ious[best])

    segment_iou = None
    rot_errs: list[float] = []
    trans_errs: list[float] = []
    if best is not None and best < len(result.objects) and len(truth.object_indices):
        obj = result.objects[best]
        segment_iou = set_iou(obj.segment, truth.object_indices)
        body_poses = truth.body_poses[int(truth.body_index[truth.object_indices[0]])]
        t0 = obj.start_frame
        base = body_poses[t0].inverse()
        centroid0 = truth.positions[t0, truth.object_indices].mean(axis=0)
        for k, pose in enumerate(obj.poses):
            expected = body_poses[t0 + k].compose(base)
            rot_errs.append(rotation_geodesic_deg(pose.rotation, expected.rotation))
            trans_errs.append(float(np.linalg.norm(pose.apply(centroid0) - expected.apply(centroid0))))
    return ScoreReport(
        contact_iou=contact_iou,
        segment_iou=segment_iou,
        rotation_errors_deg=rot_errs,
        translation_errors_m=trans_errs,
        trajectory_rmse_m=rmse,
    )


# ---------------------------------------------------------------------------
# body sampling and motion scripts

def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _sample_rect(rng, n, axes, extent, center, normal, hole=None):
    """Sample a single-sided rectangular panel; ``hole`` removes an inner rect."""
    pts = np.empty((0, 3))
    while len(pts) < n:
        uv = rng.uniform(-1.0, 1.0, size=(2 * n, 2)) * extent
        if hole is not None:
            (hu, hv) = hole
            inside = (np.abs(uv[:, 0] - hu[0]) <= hu[1]) & (np.abs(uv[:, 1] - hv[0]) <= hv[1])
            uv = uv[~inside]
        cand = np.outer(uv[:, 0], axes[0]) + np.outer(uv[:, 1], axes[1]) + center
        pts = np.vstack([pts, cand])
    pts = pts[:n]
    normals = np.tile(np.asarray(normal, dtype=float), (n, 1))
    return pts, normals


def _sample_sphere(rng, n, center, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d, d


def _sample_box(rng, n, center, size):
    half = np.asarray(size) / 2.0
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)
    counts = np.maximum((n * areas / areas.sum()).astype(int), 1)
    counts[0] += n - counts.sum()
    pts, nrms = [], []
    for f, cnt in enumerate(counts):
        axis, sign = f // 2, 1.0 if f % 2 else -1.0
        other = [i for i in range(3) if i != axis]
        uv = rng.uniform(-1, 1, size=(cnt, 2)) * half[other]
        p = np.zeros((cnt, 3))
        p[:, other] = uv
        p[:, axis] = sign * half[axis]
        nr = np.zeros((cnt, 3))
        nr[:, axis] = sign
        pts.append(p + center)
        nrms.append(nr)
    return np.vstack(pts), np.vstack(nrms)


def _body_colors(rng, n, base, points):
    """Smooth low-frequency color texture over the body surface.

    Spatially correlated texture matches real footage: close-by points look
    alike (so near-miss correspondences still pass the color gate and feed
    the plane constraint) while larger tangential slips hit color changes
    and are rejected, anchoring point identity at coarse scale.
    """
    colors = np.tile(np.asarray(base, dtype=float), (n, 1))
    for c in range(3):
        wavelength = rng.uniform(0.08, 0.2)
        direction = rng.normal(size=3)
        direction *= 2.0 * np.pi / (wavelength * np.linalg.norm(direction))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        colors[:, c] += 0.15 * np.sin(points @ direction + phase)
    return np.clip(colors, 0.0, 1.0)


def _translation(v) -> RigidPose:
    return RigidPose(np.eye(3), np.asarray(v, dtype=float))


def _rotation_about(axis, angle, pivot) -> RigidPose:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    pivot = np.asarray(pivot, dtype=float)
    return RigidPose(rot, pivot - rot @ pivot)


def _phases(n_frames: int) -> tuple[int, int]:
    """(touch_frame, release_frame): approach before, manipulation between, retreat after."""
    touch = max(2, round(0.25 * (n_frames - 1)))
    release = min(n_frames - 3, round(0.75 * (n_frames - 1)))
    if release <= touch + 1:
        raise InputError(f"too few frames ({n_frames}) for a three-phase script")
    return touch, release


def _actor_poses(start_center, touch_center, object_poses, touch, release, n_frames, retreat_dir):
    """Actor pose script: linear approach, rigid attachment, linear retreat."""
    grip_shift = _translation(np.asarray(touch_center) - np.asarray(start_center))
    poses = []
    for t in range(n_frames):
        if t <= touch:
            u = t / touch
            poses.append(_translation(u * (np.asarray(touch_center) - np.asarray(start_center))))
        elif t <= release:
            poses.append(object_poses[t].compose(grip_shift))
        else:
            # slow enough for frame-to-frame tracking right next to the object
            base = object_poses[release].compose(grip_shift)
            step = 0.03 * (t - release)
            poses.append(_translation(np.asarray(retreat_dir) * step).compose(base))
    return tuple(poses)


def _contact_interval_from_geometry(bodies, actor_index, contact_dist, n_frames):
    """Longest run of frames whose noise-free actor/background distance is below threshold."""
    in_contact = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        actor_pts = bodies[actor_index].poses[t].apply(bodies[actor_index].points)
        bg = np.vstack(
            [b.poses[t].apply(b.points) for i, b in enumerate(bodies) if i != actor_index]
        )
        d, _ = cKDTree(bg).query(actor_pts, k=1)
        in_contact[t] = d.min() <= contact_dist
    runs = []
    t = 0
    while t < n_frames:
        if in_contact[t]:
            s = t
            while t + 1 < n_frames and in_contact[t + 1]:
                t += 1
            runs.append((s, t))
        t += 1
    if not runs:
        raise InputError("scenario script never makes contact")
    return max(runs, key=lambda r: r[1] - r[0])


def drawer_scene(
    n_points: int = 3000,
    n_frames: int = 24,
    noise_sigma: float = 0.002,
    seed: int = 0,
    contact_dist: float = 0.02,
) -> SyntheticScene:
    """Opening a drawer: a panel translating 0.2 m out of a cabinet front."""
    rng = np.random.default_rng(seed)
    touch, release = _phases(n_frames)
    n_cab = int(0.45 * n_points)
    n_drawer = int(0.35 * n_points)
    n_actor = n_points - n_cab - n_drawer

    cab_pts, cab_nrm = _sample_rect(
        rng,
        n_cab,
        axes=(np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
        extent=np.array([0.35, 0.35]),
        center=np.array([0.0, 0.0, 1.0]),
        normal=[0.0, 0.0, -1.0],
        hole=((0.0, 0.18), (0.06, 0.11)),  # opening around the drawer face
    )
    drw_pts, drw_nrm = _sample_rect(
        rng,
        n_drawer,
        axes=(np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
        extent=np.array([0.15, 0.08]),
        center=np.array([0.0, 0.06, 1.0]),
        normal=[0.0, 0.0, -1.0],
    )
    u = _smoothstep((np.arange(n_frames) - touch) / (release - touch))
    drawer_poses = tuple(_translation([0.0, 0.0, -0.2 * ui]) for ui in u)
    static = tuple(_translation([0, 0, 0]) for _ in range(n_frames))

    start_center = np.array([0.0, 0.06, 0.662])
    touch_center = np.array([0.0, 0.06, 1.0 - 0.048])
    actor_pts, actor_nrm = _sample_sphere(rng, n_actor, start_center, radius=0.04)
    actor_poses = _actor_poses(
        start_center, touch_center, drawer_poses, touch, release, n_frames, retreat_dir=[0, 0, -1.0]
    )
    bodies = [
        RigidBody(cab_pts, cab_nrm, _body_colors(rng, n_cab, [0.55, 0.45, 0.35], cab_pts), static),
        RigidBody(drw_pts, drw_nrm, _body_colors(rng, n_drawer, [0.30, 0.45, 0.70], drw_pts), drawer_poses),
        RigidBody(actor_pts, actor_nrm, _body_colors(rng, n_actor, [0.80, 0.60, 0.50], actor_pts), actor_poses),
    ]
    interval = _contact_interval_from_geometry(bodies, 2, contact_dist, n_frames)
    return SyntheticScene(
        bodies=bodies,
        actor_index=2,
        contact_interval=interval,
        noise_sigma=noise_sigma,
        seed=seed,
        object_index=1,
    )


def door_scene(
    n_points: int = 3200,
    n_frames: int = 30,
    noise_sigma: float = 0.002,
    seed: int = 0,
    contact_dist: float = 0.02,
) -> SyntheticScene:
    """Opening a door: a panel rotating 24 degrees about a fixed vertical hinge."""
    rng = np.random.default_rng(seed)
    touch, release = _phases(n_frames)
    n_wall = int(0.45 * n_points)
    n_door = int(0.35 * n_points)
    n_actor = n_points - n_wall - n_door

    wall_pts, wall_nrm = _sample_rect(
        rng,
        n_wall,
        axes=(np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
        extent=np.array([0.7, 0.5]),
        center=np.array([0.0, 0.0, 1.3]),
        normal=[0.0, 0.0, -1.0],
        hole=((0.22, 0.19), (0.0, 0.45)),  # doorway x in [0.03, 0.41], full height
    )
    n_handle = max(n_door // 8, 30)
    panel_pts, panel_nrm = _sample_rect(
        rng,
        n_door - n_handle,
        axes=(np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
        extent=np.array([0.16, 0.42]),
        center=np.array([0.22, 0.0, 1.3]),
        normal=[0.0, 0.0, -1.0],
    )
    # protruding handle: in-plane geometric relief that anchors the panel
    # against sliding within its own surface, like a real door
    handle_pts, handle_nrm = _sample_box(
        rng, n_handle, center=np.array([0.33, -0.10, 1.3 - 0.015]), size=(0.05, 0.12, 0.03)
    )
    door_pts = np.vstack([panel_pts, handle_pts])
    door_nrm = np.vstack([panel_nrm, handle_nrm])
    hinge = np.array([0.05, 0.0, 1.3])
    u = _smoothstep((np.arange(n_frames) - touch) / (release - touch))
    door_poses = tuple(_rotation_about([0.0, 1.0, 0.0], np.radians(24.0) * ui, hinge) for ui in u)
    static = tuple(_translation([0, 0, 0]) for _ in range(n_frames))

    start_center = np.array([0.33, -0.10, 0.922])
    touch_center = np.array([0.33, -0.10, 1.3 - 0.03 - 0.048])
    actor_pts, actor_nrm = _sample_sphere(rng, n_actor, start_center, radius=0.04)
    actor_poses = _actor_poses(
        start_center, touch_center, door_poses, touch, release, n_frames, retreat_dir=[0, 0, -1.0]
    )
    bodies = [
        RigidBody(wall_pts, wall_nrm, _body_colors(rng, n_wall, [0.60, 0.58, 0.52], wall_pts), static),
        RigidBody(door_pts, door_nrm, _body_colors(rng, n_door, [0.45, 0.30, 0.20], door_pts), door_poses),
        RigidBody(actor_pts, actor_nrm, _body_colors(rng, n_actor, [0.80, 0.60, 0.50], actor_pts), actor_poses),
    ]
    interval = _contact_interval_from_geometry(bodies, 2, contact_dist, n_frames)
    return SyntheticScene(
        bodies=bodies,
        actor_index=2,
        contact_interval=interval,
        noise_sigma=noise_sigma,
        seed=seed,
        object_index=1,
    )


def pitcher_scene(
    n_points: int = 2600,
    n_frames: int = 28,
    noise_sigma: float = 0.002,
    seed: int = 0,
    contact_dist: float = 0.02,
) -> SyntheticScene:
    """Flipping a pitcher: a box lifted off a table, rotated 120 degrees, set back down."""
    rng = np.random.default_rng(seed)
    touch, release = _phases(n_frames)
    n_table = int(0.45 * n_points)
    n_pitcher = int(0.35 * n_points)
    n_actor = n_points - n_table - n_pitcher

    table_pts, table_nrm = _sample_rect(
        rng,
        n_table,
        axes=(np.array([1.0, 0, 0]), np.array([0, 0, 1.0])),
        extent=np.array([0.45, 0.30]),
        center=np.array([0.0, 0.0, 0.85]),
        normal=[0.0, 1.0, 0.0],
    )
    c0 = np.array([-0.08, 0.115, 0.85])
    pitcher_pts, pitcher_nrm = _sample_box(rng, n_pitcher, c0, size=(0.10, 0.14, 0.08))
    u = _smoothstep((np.arange(n_frames) - touch) / (release - touch))
    pitcher_poses = []
    for ui in u:
        angle = np.radians(80.0) * ui
        center = c0 + np.array([0.14 * ui, 0.06 * np.sin(np.pi * ui), 0.0])
        spin = _rotation_about([0.0, 0.0, 1.0], angle, c0)
        pitcher_poses.append(_translation(center - c0).compose(spin))
    pitcher_poses = tuple(pitcher_poses)
    static = tuple(_translation([0, 0, 0]) for _ in range(n_frames))

    start_center = np.array([0.27, 0.115, 0.85])
    touch_center = np.array([-0.08 + 0.05 + 0.048, 0.115, 0.85])
    actor_pts, actor_nrm = _sample_sphere(rng, n_actor, start_center, radius=0.04)
    actor_poses = _actor_poses(
        start_center, touch_center, pitcher_poses, touch, release, n_frames, retreat_dir=[0.5, 0.866, 0.0]
    )
    bodies = [
        RigidBody(table_pts, table_nrm, _body_colors(rng, n_table, [0.50, 0.50, 0.55], table_pts), static),
        RigidBody(pitcher_pts, pitcher_nrm, _body_colors(rng, n_pitcher, [0.25, 0.55, 0.35], pitcher_pts), pitcher_poses),
        RigidBody(actor_pts, actor_nrm, _body_colors(rng, n_actor, [0.80, 0.60, 0.50], actor_pts), actor_poses),
    ]
    interval = _contact_interval_from_geometry(bodies, 2, contact_dist, n_frames)
    return SyntheticScene(
        bodies=bodies,
        actor_index=2,
        contact_interval=interval,
        noise_sigma=noise_sigma,
        seed=seed,
        object_index=1,
    )


SCENARIOS = {"drawer": drawer_scene, "door": door_scene, "pitcher": pitcher_scene}


def save_truth(path, truth: GroundTruth) -> None:
    record = {
        "positions": truth.positions.tolist(),
        "labels": truth.labels.astype(int).tolist(),
        "body_index": truth.body_index.tolist(),
        "contact": None
        if truth.contact_start is None
        else {"start": truth.contact_start, "end": truth.contact_end},
        "object_indices": truth.object_indices.tolist(),
        "body_poses": [
            [{"R": p.rotation.reshape(-1).tolist(), "t": p.translation.tolist()} for p in poses]
            for poses in truth.body_poses
        ],
        "noise_sigma": truth.noise_sigma,
        "seed": truth.seed,
    }
    with open(path, "w") as f:
        json.dump(record, f)
        f.write("\n")


def load_truth(path) -> GroundTruth:
    with open(path) as f:
        record = json.load(f)
    contact = record["contact"]
    return GroundTruth(
        positions=np.asarray(record["positions"], dtype=np.float64),
        labels=np.asarray(record["labels"], dtype=bool),
        body_index=np.asarray(record["body_index"], dtype=np.int64),
        contact_start=None if contact is None else int(contact["start"]),
        contact_end=None if contact is None else int(contact["end"]),
        object_indices=np.asarray(record["object_indices"], dtype=np.int64),
        body_poses=[
            tuple(
                RigidPose(np.asarray(p["R"], dtype=np.float64).reshape(3, 3), np.asarray(p["t"]))
                for p in poses
            )
            for poses in record["body_poses"]
        ],
        noise_sigma=float(record["noise_sigma"]),
        seed=int(record["seed"]),
    )
