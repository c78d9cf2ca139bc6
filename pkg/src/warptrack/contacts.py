"""Contact detection from labeled dense trajectories.

A frame is in contact when the minimum distance between any actor point
and any background point drops to the contact threshold. Maximal runs of
in-contact frames (debounced by a minimum duration) become events carrying
the participating point sets and a per-frame centroid of the touched
background region. Simultaneous contacts at spatially disconnected
locations are split into separate events sharing the same interval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .geometry import PointCloud, build_proximity_graph, connected_components
from .tracking import LabeledTrajectorySet


@dataclass(eq=False)
class ContactEvent:
    """One actor-environment contact: an inclusive frame interval plus the
    actor/background points that were within contact distance at its start,
    and the tracked centroid of the touched background points per frame."""

    start_frame: int
    end_frame: int
    actor_points: np.ndarray
    background_points: np.ndarray
    contact_centroid_per_frame: np.ndarray

    def __post_init__(self):
        self.actor_points = np.asarray(self.actor_points, dtype=np.int64).reshape(-1)
        self.background_points = np.asarray(self.background_points, dtype=np.int64).reshape(-1)
        self.contact_centroid_per_frame = np.asarray(self.contact_centroid_per_frame, dtype=np.float64).reshape(-1, 3)
        if self.start_frame > self.end_frame:
            raise InputError("start_frame must not exceed end_frame")
        if len(self.actor_points) == 0 or len(self.background_points) == 0:
            raise InputError("both participating point sets must be non-empty")
        if len(self.contact_centroid_per_frame) != self.end_frame - self.start_frame + 1:
            raise InputError("need one centroid per frame of the interval")

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame + 1


def _contact_runs(in_contact: np.ndarray, min_duration: int) -> list[tuple[int, int]]:
    runs = []
    t = 0
    n = len(in_contact)
    while t < n:
        if in_contact[t]:
            start = t
            while t + 1 < n and in_contact[t + 1]:
                t += 1
            if t - start + 1 >= min_duration:
                runs.append((start, t))
        t += 1
    return runs


def detect_contacts(
    traj: LabeledTrajectorySet,
    contact_dist: float = 0.02,
    min_duration: int = 3,
) -> list[ContactEvent]:
    """Detect actor-environment contact events from labeled trajectories.

    Participants are the points involved in any actor-background pair
    within ``contact_dist`` at the event's start frame; events whose
    participating background points fall apart at radius 2 * contact_dist
    are split per connected component. Events are sorted by start frame,
    then by their smallest background index.
    """
    if contact_dist <= 0:
        raise InputError("contact_dist must be positive")
    if min_duration < 1:
        raise InputError("min_duration must be at least 1")
    labels = traj.labels
    actor_idx = np.flatnonzero(labels)
    bg_idx = np.flatnonzero(~labels)
    if len(actor_idx) == 0 or len(bg_idx) == 0:
        raise InputError("need both actor and background points")

    positions = traj.trajectories.positions
    n_frames = traj.n_frames
    in_contact = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        pa = positions[t, actor_idx]
        pb = positions[t, bg_idx]
        # query the larger side against a tree over the smaller one
        if len(pa) <= len(pb):
            d, _ = cKDTree(pa).query(pb, k=1, workers=-1)
        else:
            d, _ = cKDTree(pb).query(pa, k=1, workers=-1)
        in_contact[t] = d.min() <= contact_dist

    events: list[ContactEvent] = []
    for start, end in _contact_runs(in_contact, min_duration):
        pa = positions[start, actor_idx]
        pb = positions[start, bg_idx]
        tree_b = cKDTree(pb)
        partners = tree_b.query_ball_point(pa, r=contact_dist, workers=-1)
        part_a = np.array([i for i, lst in enumerate(partners) if lst], dtype=np.int64)
        part_b = np.array(sorted({j for lst in partners for j in lst}), dtype=np.int64)
        if len(part_a) == 0:
            continue  # boundary-precision guard; the run test said contact
        group_of = _split_background(pb[part_b], 2.0 * contact_dist)
        for g in range(group_of.max() + 1):
            local_b = part_b[group_of == g]
            members = set(local_b.tolist())
            local_a = np.array(
                [i for i in part_a if members.intersection(partners[i])], dtype=np.int64
            )
            if len(local_a) == 0:
                continue
            bg_points = bg_idx[local_b]
            centroids = positions[start : end + 1, bg_points].mean(axis=1)
            events.append(
                ContactEvent(
                    start_frame=start,
                    end_frame=end,
                    actor_points=actor_idx[local_a],
                    background_points=bg_points,
                    contact_centroid_per_frame=centroids,
                )
            )
    events.sort(key=lambda e: (e.start_frame, int(e.background_points.min())))
    return events


def _split_background(points: np.ndarray, radius: float) -> np.ndarray:
    """Component id per point under proximity clustering at ``radius``."""
    if len(points) == 1:
        return np.zeros(1, dtype=np.int64)
    comps = connected_components(build_proximity_graph(PointCloud(points), radius))
    out = np.empty(len(points), dtype=np.int64)
    for g, comp in enumerate(comps):
        out[comp] = g
    return out


def contacts_to_json(events: list[ContactEvent]) -> list[dict]:
    return [
        {
            "start": int(e.start_frame),
            "end": int(e.end_frame),
            "actor_points": e.actor_points.tolist(),
            "background_points": e.background_points.tolist(),
            "centroids": e.contact_centroid_per_frame.tolist(),
        }
        for e in events
    ]


def save_contacts(path, events: list[ContactEvent]) -> None:
    with open(path, "w") as f:
        json.dump(contacts_to_json(events), f)
        f.write("\n")


def load_contacts(path) -> list[ContactEvent]:
    with open(path) as f:
        records = json.load(f)
    return [
        ContactEvent(
            start_frame=int(r["start"]),
            end_frame=int(r["end"]),
            actor_points=np.asarray(r["actor_points"], dtype=np.int64),
            background_points=np.asarray(r["background_points"], dtype=np.int64),
            contact_centroid_per_frame=np.asarray(r["centroids"], dtype=np.float64),
        )
        for r in records
    ]
