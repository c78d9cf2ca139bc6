"""Point cloud primitives.

Colored, oriented 3D point clouds plus the geometric queries every later
stage builds on: pinhole back-projection of depth images, PCA normal
estimation, exact nearest-neighbor search, fixed-radius proximity graphs
and their connected components, and voxel downsampling.

Conventions: positions are float64 arrays of shape (N, 3) in meters,
normals are unit vectors (rows of NaN mark points whose neighborhood was
too degenerate to orient), colors are RGB triples in [0, 1]. All arrays
are made read-only at construction; operations return new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components
from scipy.spatial import cKDTree

from .errors import InputError

_UNIT_NORM_TOL = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    view = a.view()
    view.flags.writeable = False
    return view


def _as_float_array(a, shape_tail: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise InputError(f"{name} must have shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    return arr


@dataclass(eq=False)
class PointCloud:
    """A 3D scene snapshot: positions with optional normals and colors.

    Normals, when present, are unit length; a row of NaN flags a point
    whose normal could not be estimated. Instances are immutable.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = _as_float_array(self.positions, (3,), "positions")
        n = pos.shape[0]
        self.positions = _readonly(pos)
        if self.normals is not None:
            normals = _as_float_array(self.normals, (3,), "normals")
            if normals.shape[0] != n:
                raise InputError(f"normals length {normals.shape[0]} != positions length {n}")
            finite = np.isfinite(normals).all(axis=1)
            if finite.any():
                norms = np.linalg.norm(normals[finite], axis=1)
                if np.abs(norms - 1.0).max(initial=0.0) > _UNIT_NORM_TOL:
                    raise InputError("normals must be unit length (or NaN for invalid points)")
            self.normals = _readonly(normals)
        if self.colors is not None:
            colors = _as_float_array(self.colors, (3,), "colors")
            if colors.shape[0] != n:
                raise InputError(f"colors length {colors.shape[0]} != positions length {n}")
            self.colors = _readonly(colors)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.n_points

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def subset(self, indices) -> "PointCloud":
        """New cloud containing only the given point indices."""
        idx = np.asarray(indices)
        return PointCloud(
            self.positions[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of the color camera, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise InputError("image size must be positive")


@dataclass(eq=False)
class RGBDFrame:
    """A registered depth + color frame. Depth is in meters, 0 marks invalid pixels."""

    depth: np.ndarray
    color: np.ndarray | None
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        h, w = self.intrinsics.height, self.intrinsics.width
        if depth.shape != (h, w):
            raise InputError(f"depth shape {depth.shape} does not match intrinsics ({h}, {w})")
        self.depth = _readonly(depth)
        if self.color is not None:
            color = np.asarray(self.color, dtype=np.float64)
            if color.shape != (h, w, 3):
                raise InputError(f"color shape {color.shape} does not match intrinsics ({h}, {w}, 3)")
            self.color = _readonly(color)


@dataclass(eq=False)
class NeighborhoodGraph:
    """Undirected graph over point indices, stored as symmetric CSR adjacency.

    ``indices[indptr[i]:indptr[i+1]]`` are the neighbors of node i;
    ``weights`` aligns with ``indices`` and holds edge lengths (meters).
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if indptr.shape != (self.n_nodes + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise InputError("malformed indptr")
        if np.any(np.diff(indptr) < 0):
            raise InputError("indptr must be non-decreasing")
        if len(weights) != len(indices):
            raise InputError("weights must align with indices")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.n_nodes):
            raise InputError("neighbor index out of range")
        if np.any(weights < 0):
            raise InputError("edge weights must be nonnegative")
        src = np.repeat(np.arange(self.n_nodes), np.diff(indptr))
        if np.any(src == indices):
            raise InputError("self loops are not allowed")
        a = csr_matrix((weights, indices, indptr), shape=(self.n_nodes, self.n_nodes))
        if (a != a.T).nnz != 0:
            raise InputError("adjacency must be symmetric")
        self.indptr = _readonly(indptr)
        self.indices = _readonly(indices)
        self.weights = _readonly(weights)

    @classmethod
    def from_edges(cls, n_nodes: int, pairs: np.ndarray, weights: np.ndarray) -> "NeighborhoodGraph":
        """Build from unique undirected edges given as an (E, 2) index array."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        w = np.concatenate([weights, weights])
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        indptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(n_nodes, indptr, dst, w)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All adjacency entries as (source, target, weight); each undirected edge appears twice."""
        src = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        return src, self.indices, self.weights

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2


def back_project(frame: RGBDFrame, max_depth: float = 4.0) -> PointCloud:
    """Back-project an RGBD frame to a colored point cloud.

    Each pixel (u, v) with depth 0 < z <= max_depth maps to
    ((u - cx) z / fx, (v - cy) z / fy, z) and carries the pixel color.
    Invalid pixels (zero or truncated depth) are skipped; points are
    emitted in row-major pixel order.
    """
    if max_depth <= 0:
        raise InputError("max_depth must be positive")
    intr = frame.intrinsics
    valid = (frame.depth > 0) & (frame.depth <= max_depth)
    v, u = np.nonzero(valid)
    z = frame.depth[v, u]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    colors = frame.color[v, u] if frame.color is not None else None
    return PointCloud(np.column_stack([x, y, z]), colors=colors)


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint: Sequence[float] = (0.0, 0.0, 0.0)) -> PointCloud:
    """Estimate unit normals from k-nearest-neighbor PCA.

    The normal of each point is the least-eigenvalue eigenvector of its
    k-neighborhood covariance (the neighborhood includes the point itself),
    sign-flipped to face ``viewpoint``. Points with a rank-deficient
    neighborhood (fewer than two significant covariance directions) get a
    NaN normal.
    """
    n = cloud.n_points
    if k < 3:
        raise InputError("k must be at least 3")
    if n < k:
        raise InputError(f"cloud has {n} points, need at least k={k}")
    tree = cKDTree(cloud.positions)
    _, idx = tree.query(cloud.positions, k=k, workers=-1)
    nbr = cloud.positions[idx]
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    # rank < 2 when the second eigenvalue vanishes relative to the largest
    degenerate = (evals[:, 2] <= 1e-24) | (evals[:, 1] <= 1e-9 * evals[:, 2])
    toward = np.asarray(viewpoint, dtype=np.float64) - cloud.positions
    flip = np.einsum("ni,ni->n", normals, toward) < 0
    normals[flip] *= -1.0
    normals[degenerate] = np.nan
    return PointCloud(cloud.positions, normals, cloud.colors)


def knn_search(cloud: PointCloud, query: Sequence[float], k: int) -> list[tuple[int, float]]:
    """Exact k nearest neighbors of a query point, ascending by distance.

    Returns at most ``min(k, len(cloud))`` pairs of (index, distance).
    Ties are broken toward the lower index so results are canonical.
    """
    if k < 1:
        raise InputError("k must be at least 1")
    n = cloud.n_points
    if n == 0:
        raise InputError("cloud is empty")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    tree = cKDTree(cloud.positions)
    kk = min(k, n)
    m = kk
    while True:
        dist, idx = tree.query(q, k=m)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        kth = np.partition(dist, kk - 1)[kk - 1]
        if m >= n or dist.max() > kth:
            break
        m = min(n, m + kk)  # extend past boundary ties before truncating
    order = np.lexsort((idx, dist))
    dist, idx = dist[order][:kk], idx[order][:kk]
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def build_proximity_graph(cloud: PointCloud, radius: float) -> NeighborhoodGraph:
    """Connect every pair of distinct points within ``radius`` of each other.

    Coincident duplicates (distance exactly zero) are not connected.
    """
    if radius <= 0:
        raise InputError("radius must be positive")
    n = cloud.n_points
    if n == 0:
        raise InputError("cloud is empty")
    tree = cKDTree(cloud.positions)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(cloud.positions[pairs[:, 0]] - cloud.positions[pairs[:, 1]], axis=1)
        keep = d > 0
        pairs, d = pairs[keep], d[keep]
    else:
        d = np.empty(0)
    return NeighborhoodGraph.from_edges(n, pairs, d)


def build_knn_graph(positions: np.ndarray, k: int) -> NeighborhoodGraph:
    """Symmetrized k-nearest-neighbor graph over point positions."""
    pos = _as_float_array(positions, (3,), "positions")
    n = pos.shape[0]
    if k < 1:
        raise InputError("k must be at least 1")
    if n < k + 1:
        raise InputError(f"need at least k+1={k + 1} points, got {n}")
    tree = cKDTree(pos)
    dist, idx = tree.query(pos, k=k + 1, workers=-1)
    src = np.repeat(np.arange(n), k + 1)
    dst = idx.ravel()
    d = dist.ravel()
    keep = src != dst  # the self match can land in any zero-distance slot
    src, dst, d = src[keep], dst[keep], d[keep]
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    key = lo * n + hi
    _, first = np.unique(key, return_index=True)
    pairs = np.column_stack([lo[first], hi[first]])
    return NeighborhoodGraph.from_edges(n, pairs, d[first])


def connected_components(graph: NeighborhoodGraph) -> list[np.ndarray]:
    """Partition nodes into maximal connected sets.

    Components are sorted by their smallest member index and each
    component's indices are ascending, so the output is deterministic.
    """
    if graph.n_nodes == 0:
        return []
    adj = csr_matrix(
        (np.ones(len(graph.indices)), graph.indices, graph.indptr),
        shape=(graph.n_nodes, graph.n_nodes),
    )
    n_comp, labels = _csgraph_components(adj, directed=False)
    comps = [np.flatnonzero(labels == c) for c in range(n_comp)]
    comps.sort(key=lambda c: int(c[0]))
    return comps


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Average points falling into the same cubic voxel of side ``leaf``.

    Normals are averaged ignoring NaN rows and renormalized; a voxel whose
    averaged normal vanishes gets NaN. Output voxels are ordered by their
    integer grid key, so the result is deterministic.
    """
    if leaf <= 0:
        raise InputError("leaf must be positive")
    if cloud.n_points == 0:
        return cloud
    keys = np.floor(cloud.positions / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)

    def _mean(values: np.ndarray) -> np.ndarray:
        out = np.zeros((m, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    positions = _mean(cloud.positions)
    normals = None
    if cloud.normals is not None:
        valid = np.isfinite(cloud.normals).all(axis=1)
        sums = np.zeros((m, 3))
        np.add.at(sums, inverse[valid], cloud.normals[valid])
        norms = np.linalg.norm(sums, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = sums / norms[:, None]
        normals[norms < 1e-12] = np.nan
    colors = _mean(cloud.colors) if cloud.colors is not None else None
    return PointCloud(positions, normals, colors)
