"""Actor/background labeling of the initial scene model.

Both entry points rely on Euclidean clustering: points closer than a
distance threshold are connected, and the actor is one connected component
of the resulting proximity graph, picked either by a selector over
component summaries or by growing from a seed point. The assumption is
that the actor starts out of contact with everything else, so it forms its
own component.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AmbiguousComponentError, InputError
from .geometry import PointCloud, build_proximity_graph, connected_components


@dataclass(frozen=True)
class ComponentSummary:
    """Size, centroid, and axis-aligned bounding box of one proximity component."""

    component_id: int
    size: int
    centroid: tuple[float, float, float]
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]


Selector = Callable[[Sequence[ComponentSummary]], Sequence[int]]


def select_largest() -> Selector:
    def selector(summaries: Sequence[ComponentSummary]) -> list[int]:
        top = max(s.size for s in summaries)
        return [s.component_id for s in summaries if s.size == top]

    return selector


def select_closest_to(point) -> Selector:
    target = np.asarray(point, dtype=np.float64).reshape(3)

    def selector(summaries: Sequence[ComponentSummary]) -> list[int]:
        dists = [np.linalg.norm(np.asarray(s.centroid) - target) for s in summaries]
        best = min(dists)
        return [s.component_id for s, d in zip(summaries, dists) if d == best]

    return selector


def select_size_range(lo: int, hi: int) -> Selector:
    def selector(summaries: Sequence[ComponentSummary]) -> list[int]:
        return [s.component_id for s in summaries if lo <= s.size <= hi]

    return selector


def _summaries(model: PointCloud, components) -> list[ComponentSummary]:
    out = []
    for cid, comp in enumerate(components):
        pts = model.positions[comp]
        out.append(
            ComponentSummary(
                component_id=cid,
                size=len(comp),
                centroid=tuple(pts.mean(axis=0)),
                bbox_min=tuple(pts.min(axis=0)),
                bbox_max=tuple(pts.max(axis=0)),
            )
        )
    return out


def _warn_if_actor_splits(model: PointCloud, actor_indices: np.ndarray, radius: float) -> None:
    # the clustering assumption is fragile if the actor barely hangs together
    if len(actor_indices) < 2:
        return
    sub = PointCloud(model.positions[actor_indices])
    halves = connected_components(build_proximity_graph(sub, radius / 2.0))
    if len(halves) > 1:
        warnings.warn(
            f"actor component splits into {len(halves)} parts at half the clustering "
            f"radius ({radius / 2.0:.3g} m); labeling may be unstable",
            RuntimeWarning,
            stacklevel=3,
        )


def segment_by_component(model: PointCloud, radius: float, selector: Selector) -> np.ndarray:
    """Label the selector-chosen proximity component as actor.

    The selector receives summaries of every connected component and
    returns the chosen component ids; anything but exactly one match
    raises AmbiguousComponentError listing the candidates.
    """
    graph = build_proximity_graph(model, radius)
    components = connected_components(graph)
    summaries = _summaries(model, components)
    chosen = list(selector(summaries))
    if len(chosen) != 1:
        detail = "; ".join(
            f"component {s.component_id}: size={s.size}, centroid=({s.centroid[0]:.3f}, "
            f"{s.centroid[1]:.3f}, {s.centroid[2]:.3f})"
            for s in summaries
        )
        raise AmbiguousComponentError(
            f"selector matched {len(chosen)} components, need exactly 1; candidates: {detail}",
            candidates=summaries,
        )
    labels = np.zeros(model.n_points, dtype=bool)
    actor = components[chosen[0]]
    labels[actor] = True
    _warn_if_actor_splits(model, actor, radius)
    return labels


def segment_by_seed(model: PointCloud, seed_index: int, radius: float) -> np.ndarray:
    """Label all points reachable from the seed through hops of at most ``radius``.

    Equivalent to the seed's connected component in the proximity graph.
    """
    if not 0 <= seed_index < model.n_points:
        raise InputError(f"seed index {seed_index} out of range for {model.n_points} points")
    graph = build_proximity_graph(model, radius)
    for comp in connected_components(graph):
        if seed_index in comp:
            labels = np.zeros(model.n_points, dtype=bool)
            labels[comp] = True
            _warn_if_actor_splits(model, comp, radius)
            return labels
    raise AssertionError("unreachable: every node belongs to a component")


def nearest_point_index(model: PointCloud, point) -> int:
    """Index of the model point closest to an arbitrary 3D location."""
    if model.n_points == 0:
        raise InputError("cloud is empty")
    target = np.asarray(point, dtype=np.float64).reshape(3)
    return int(np.linalg.norm(model.positions - target, axis=1).argmin())


def save_labels(path, labels: np.ndarray) -> None:
    actor = np.flatnonzero(np.asarray(labels, dtype=bool))
    with open(path, "w") as f:
        json.dump({"actor_indices": actor.tolist()}, f)
        f.write("\n")


def load_labels(path, n_points: int) -> np.ndarray:
    with open(path) as f:
        record = json.load(f)
    labels = np.zeros(n_points, dtype=bool)
    idx = np.asarray(record["actor_indices"], dtype=int)
    if len(idx) and (idx.min() < 0 or idx.max() >= n_points):
        raise InputError(f"{path}: actor index out of range")
    labels[idx] = True
    return labels
