"""Non-rigid point cloud registration with a locally rigid warp field.

Every model point i carries its own 6-parameter rigid transform
``[alpha, beta, gamma, tx, ty, tz]`` acting about the global origin with
rotation ``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``. Registration alternates
a nearest-neighbor correspondence search (gated on distance, normal angle
and color) with Gauss-Newton updates of the warp field.

The optimized cost stacks, per correspondence, one point-to-plane residual
and three weighted point-to-point residuals, plus a stiffness prior that
penalizes parameter differences of neighboring transforms through a
per-component Huber loss. Huber robustness is realized by emitting the
signed square root of each Huber term as the residual, so the squared
residual norm equals the robust cost exactly and the analytic Jacobian of
the residual vector yields the exact cost gradient. The normal equations
are solved with diagonally preconditioned conjugate gradients, and each
Gauss-Newton step is accepted only if it decreases the cost (with up to a
few step halvings).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import csr_matrix, issparse
from scipy.spatial import cKDTree

from .errors import InputError, NoOverlapError
from .geometry import NeighborhoodGraph, PointCloud, build_knn_graph

_DIAG_FLOOR = 1e-12
_MAX_STEP_HALVINGS = 6


@dataclass(frozen=True)
class LocalTransform:
    """One 6DOF rigid transform: Euler angles (radians) and offsets (meters)."""

    alpha: float
    beta: float
    gamma: float
    tx: float
    ty: float
    tz: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise InputError("transform components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.tx, self.ty, self.tz])

    @classmethod
    def from_array(cls, values) -> "LocalTransform":
        a = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(*a.tolist())

    def rotation(self) -> np.ndarray:
        return _rotations(np.array([[self.alpha, self.beta, self.gamma]]))[0]

    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])


@dataclass(eq=False)
class WarpField:
    """Per-point local rigid transforms, stored as an (N, 6) array."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 6:
            raise InputError(f"warp field values must have shape (N, 6), got {v.shape}")
        if not np.isfinite(v).all():
            raise InputError("warp field values must be finite")
        self.values = v

    @classmethod
    def identity(cls, n: int) -> "WarpField":
        return cls(np.zeros((n, 6)))

    @classmethod
    def from_transforms(cls, transforms) -> "WarpField":
        return cls(np.stack([t.as_array() for t in transforms]))

    def transform(self, i: int) -> LocalTransform:
        return LocalTransform.from_array(self.values[i])

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "WarpField":
        return WarpField(self.values.copy())


@dataclass(eq=False)
class CorrespondenceSet:
    """Accepted source-to-target index pairs, at most one per source point."""

    source_indices: np.ndarray
    target_indices: np.ndarray

    def __post_init__(self):
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        self.target_indices = np.asarray(self.target_indices, dtype=np.int64).reshape(-1)
        if len(self.source_indices) != len(self.target_indices):
            raise InputError("source and target index lists must have equal length")
        if len(np.unique(self.source_indices)) != len(self.source_indices):
            raise InputError("at most one pair per source index")

    def __len__(self) -> int:
        return len(self.source_indices)

    @property
    def pairs(self) -> np.ndarray:
        return np.column_stack([self.source_indices, self.target_indices])


@dataclass
class RegistrationParams:
    """Tunables of the registration cost and solver.

    ``max_normal_angle`` is in radians; ``max_color_diff`` is a Euclidean
    RGB distance. ``delta`` is the Huber threshold on per-component
    transform differences and ``sigma_reg`` the Gaussian radius of the
    stiffness weights.
    """

    w_point: float = 0.1
    w_stiff: float = 200.0
    delta: float = 1e-4
    sigma_reg: float = 0.03
    max_dist: float = 0.1
    max_normal_angle: float = math.radians(45.0)
    max_color_diff: float = 0.2
    gn_iters: int = 3
    outer_iters: int = 10
    cg_iters: int = 200
    cg_tol: float = 1e-6
    graph_k: int = 6
    converge_tol: float = 1e-6

    def validate(self) -> None:
        if self.w_point < 0 or self.w_stiff < 0:
            raise InputError("weights must be nonnegative")
        if self.delta <= 0:
            raise InputError("delta must be positive")
        if self.sigma_reg <= 0:
            raise InputError("sigma_reg must be positive")
        if self.max_dist <= 0 or self.max_color_diff < 0:
            raise InputError("correspondence gates must be positive")
        if not 0 < self.max_normal_angle <= math.pi:
            raise InputError("max_normal_angle must be in (0, pi]")
        if min(self.gn_iters, self.outer_iters, self.cg_iters) < 0:
            raise InputError("iteration counts must be nonnegative")
        if self.cg_tol <= 0 or self.converge_tol < 0:
            raise InputError("solver tolerances must be positive")
        if self.graph_k < 1:
            raise InputError("graph_k must be at least 1")


def _rotations(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices Rz(gamma) @ Ry(beta) @ Rx(alpha) for (N, 3) angles."""
    ca, cb, cg = np.cos(angles).T
    sa, sb, sg = np.sin(angles).T
    r = np.empty((angles.shape[0], 3, 3))
    r[:, 0, 0] = cg * cb
    r[:, 0, 1] = cg * sb * sa - sg * ca
    r[:, 0, 2] = cg * sb * ca + sg * sa
    r[:, 1, 0] = sg * cb
    r[:, 1, 1] = sg * sb * sa + cg * ca
    r[:, 1, 2] = sg * sb * ca - cg * sa
    r[:, 2, 0] = -sb
    r[:, 2, 1] = cb * sa
    r[:, 2, 2] = cb * ca
    return r


def _rotation_derivatives(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d(R)/d(alpha), d(R)/d(beta), d(R)/d(gamma) for (N, 3) angles."""
    n = angles.shape[0]
    ca, cb, cg = np.cos(angles).T
    sa, sb, sg = np.sin(angles).T
    zero = np.zeros(n)
    one = np.ones(n)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    rx = mat([[one, zero, zero], [zero, ca, -sa], [zero, sa, ca]])
    ry = mat([[cb, zero, sb], [zero, one, zero], [-sb, zero, cb]])
    rz = mat([[cg, -sg, zero], [sg, cg, zero], [zero, zero, one]])
    dx = mat([[zero, zero, zero], [zero, -sa, -ca], [zero, ca, -sa]])
    dy = mat([[-sb, zero, cb], [zero, zero, zero], [-cb, zero, -sb]])
    dz = mat([[-sg, -cg, zero], [cg, -sg, zero], [zero, zero, zero]])
    zy = np.einsum("nij,njk->nik", rz, ry)
    da = np.einsum("nij,njk->nik", zy, dx)
    db = np.einsum("nij,njk,nkl->nil", rz, dy, rx)
    dg = np.einsum("nij,njk,nkl->nil", dz, ry, rx)
    return da, db, dg


def apply_warp(model: PointCloud, warp: WarpField) -> PointCloud:
    """Apply each point's local transform: R_i x_i + t_i, normals rotated by R_i."""
    if len(warp) != model.n_points:
        raise InputError(f"warp field size {len(warp)} != model size {model.n_points}")
    rot = _rotations(warp.values[:, :3])
    positions = np.einsum("nij,nj->ni", rot, model.positions) + warp.values[:, 3:]
    normals = None
    if model.normals is not None:
        normals = np.einsum("nij,nj->ni", rot, model.normals)
    return PointCloud(positions, normals, model.colors)


def find_correspondences(source: PointCloud, target: PointCloud, params: RegistrationParams) -> CorrespondenceSet:
    """Match every source point to its nearest target point, then gate.

    A pair survives if its distance, normal angle, and color difference all
    pass the configured thresholds; a gate is skipped when either cloud
    lacks that attribute. Pairs whose target normal is invalid (NaN) are
    dropped since they cannot support a point-to-plane residual.
    """
    if source.n_points == 0:
        raise InputError("source cloud is empty")
    if target.n_points == 0:
        raise InputError("target cloud is empty")
    tree = cKDTree(target.positions)
    return _correspond(source, target, tree, params)


def _correspond(source: PointCloud, target: PointCloud, tree: cKDTree, params: RegistrationParams) -> CorrespondenceSet:
    dist, idx = tree.query(source.positions, k=1, workers=-1)
    keep = dist <= params.max_dist
    if target.normals is not None:
        tn = target.normals[idx]
        keep &= np.isfinite(tn).all(axis=1)
        if source.normals is not None:
            sn = source.normals
            cos_limit = math.cos(params.max_normal_angle)
            with np.errstate(invalid="ignore"):
                angle_ok = np.einsum("ni,ni->n", sn, tn) >= cos_limit - 1e-12
            angle_ok |= ~np.isfinite(sn).all(axis=1)  # invalid source normal: skip the gate
            keep &= angle_ok
    if source.colors is not None and target.colors is not None:
        cdiff = np.linalg.norm(source.colors - target.colors[idx], axis=1)
        keep &= cdiff <= params.max_color_diff
    src = np.flatnonzero(keep)
    return CorrespondenceSet(src, idx[keep])


def _huber_sqrt(d: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Signed sqrt of the Huber term h(d) and its derivative.

    h(d) = d^2 for |d| <= delta, delta * (2|d| - delta) beyond, so the
    returned value squares to h(d) and stays smooth except at |d| = delta.
    """
    a = np.abs(d)
    lin = np.maximum(2.0 * a - delta, delta)
    value = np.where(a <= delta, d, np.sign(d) * np.sqrt(delta * lin))
    slope = np.where(a <= delta, 1.0, np.sqrt(delta / lin))
    return value, slope


def _gaussian_edges(positions: np.ndarray, graph: NeighborhoodGraph, sigma_reg: float):
    """Directed stiffness edges (i, j, w_ij) with Gaussian distance weights."""
    src, dst, _ = graph.directed_edges()
    d2 = ((positions[src] - positions[dst]) ** 2).sum(axis=1)
    w = np.exp(-d2 / (2.0 * sigma_reg**2))
    return src, dst, w


def _assemble(
    model: PointCloud,
    target: PointCloud,
    corr: CorrespondenceSet,
    edges: tuple[np.ndarray, np.ndarray, np.ndarray],
    warp: WarpField,
    params: RegistrationParams,
    with_jacobian: bool,
):
    n = model.n_points
    if len(warp) != n:
        raise InputError("warp field size must match model size")
    angles = warp.values[:, :3]
    trans = warp.values[:, 3:]
    p = len(corr)
    ei, ej, gw = edges
    e = len(ei)
    n_rows = 4 * p + 6 * e
    r = np.empty(n_rows)

    sqrt_wp = math.sqrt(params.w_point)
    if p:
        s = corr.source_indices
        d = corr.target_indices
        if target.normals is None:
            raise InputError("target cloud must have normals for point-to-plane residuals")
        x = model.positions[s]
        rot = _rotations(angles[s])
        warped = np.einsum("pij,pj->pi", rot, x) + trans[s]
        diff = warped - target.positions[d]
        nrm = target.normals[d]
        if not np.isfinite(nrm).all():
            raise InputError("correspondences reference invalid target normals")
        r[:p] = np.einsum("pi,pi->p", nrm, diff)
        r[p : 4 * p] = (sqrt_wp * diff).ravel()

    scale = np.sqrt(params.w_stiff * gw) if e else np.empty(0)
    if e:
        dvec = warp.values[ei] - warp.values[ej]
        value, slope = _huber_sqrt(dvec, params.delta)
        r[4 * p :] = (scale[:, None] * value).ravel()

    if not with_jacobian:
        return r, None

    blocks_rows = []
    blocks_cols = []
    blocks_vals = []
    if p:
        da, db, dg = _rotation_derivatives(angles[s])
        g = np.empty((p, 3, 6))
        g[:, :, 0] = np.einsum("pij,pj->pi", da, x)
        g[:, :, 1] = np.einsum("pij,pj->pi", db, x)
        g[:, :, 2] = np.einsum("pij,pj->pi", dg, x)
        g[:, :, 3:] = np.broadcast_to(np.eye(3), (p, 3, 3))
        cols_point = (6 * s)[:, None] + np.arange(6)[None, :]  # (p, 6)

        j_plane = np.einsum("pi,pik->pk", nrm, g)  # (p, 6)
        blocks_rows.append(np.repeat(np.arange(p), 6))
        blocks_cols.append(cols_point.ravel())
        blocks_vals.append(j_plane.ravel())

        j_point = sqrt_wp * g  # (p, 3, 6)
        rows_point = (p + 3 * np.arange(p)[:, None, None] + np.arange(3)[None, :, None])
        rows_point = np.broadcast_to(rows_point, (p, 3, 6))
        cols_pp = np.broadcast_to(cols_point[:, None, :], (p, 3, 6))
        blocks_rows.append(rows_point.ravel())
        blocks_cols.append(cols_pp.ravel())
        blocks_vals.append(j_point.ravel())

    if e:
        j_st = scale[:, None] * slope  # (e, 6)
        row_base = 4 * p + 6 * np.arange(e)[:, None] + np.arange(6)[None, :]
        cols_i = (6 * ei)[:, None] + np.arange(6)[None, :]
        cols_j = (6 * ej)[:, None] + np.arange(6)[None, :]
        blocks_rows.append(row_base.ravel())
        blocks_cols.append(cols_i.ravel())
        blocks_vals.append(j_st.ravel())
        blocks_rows.append(row_base.ravel())
        blocks_cols.append(cols_j.ravel())
        blocks_vals.append((-j_st).ravel())

    rows = np.concatenate(blocks_rows) if blocks_rows else np.empty(0, dtype=np.int64)
    cols = np.concatenate(blocks_cols) if blocks_cols else np.empty(0, dtype=np.int64)
    vals = np.concatenate(blocks_vals) if blocks_vals else np.empty(0)
    jac = csr_matrix((vals, (rows, cols)), shape=(n_rows, 6 * n))
    return r, jac


def residuals_and_jacobian(
    model: PointCloud,
    target: PointCloud,
    corr: CorrespondenceSet,
    graph: NeighborhoodGraph,
    warp: WarpField,
    params: RegistrationParams,
) -> tuple[np.ndarray, csr_matrix]:
    """Residual vector and sparse Jacobian of the registration cost at ``warp``.

    Rows are ordered as: one point-to-plane residual per pair, then three
    point-to-point residuals per pair, then six stiffness residuals per
    directed graph edge. The squared norm of the residual vector equals
    the full robust cost, including the Huber-attenuated stiffness terms.
    An empty correspondence set yields a stiffness-only system.
    """
    if graph.n_nodes != model.n_points:
        raise InputError("graph must be defined over the model points")
    edges = _gaussian_edges(model.positions, graph, params.sigma_reg)
    return _assemble(model, target, corr, edges, warp, params, with_jacobian=True)


def gauss_newton_step(J, r: np.ndarray, cg_iters: int = 200, cg_tol: float = 1e-6) -> np.ndarray:
    """Solve the normal equations (J^T J) x = J^T r by preconditioned CG.

    Uses a Jacobi (diagonal) preconditioner with entries floored at 1e-12,
    and stops when the normal-equation residual drops below
    ``cg_tol * ||J^T r||`` or after ``cg_iters`` iterations.
    """
    n = J.shape[1]
    x = np.zeros(n)
    if issparse(J):
        jt = J.T.tocsr()
        b = jt @ r
        normal = (jt @ J).tocsr()  # one matvec per CG iteration instead of two
        matvec = normal.__matmul__
        diag = normal.diagonal()
    else:
        J = np.asarray(J)
        b = J.T @ r
        normal = J.T @ J
        matvec = normal.__matmul__
        diag = np.diagonal(normal).copy()
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return x
    diag = np.maximum(diag, _DIAG_FLOOR)
    resid = b.copy()
    z = resid / diag
    p = z.copy()
    rz = resid @ z
    for _ in range(cg_iters):
        if np.linalg.norm(resid) <= cg_tol * b_norm:
            break
        q = matvec(p)
        pq = p @ q
        if pq <= 0:
            break
        alpha = rz / pq
        x += alpha * p
        resid -= alpha * q
        z = resid / diag
        rz_next = resid @ z
        p = z + (rz_next / rz) * p
        rz = rz_next
    return x


def register(
    model: PointCloud,
    target: PointCloud,
    init: WarpField | None = None,
    params: RegistrationParams | None = None,
    graph: NeighborhoodGraph | None = None,
) -> WarpField:
    """Estimate the warp field aligning ``model`` to ``target``.

    Runs up to ``outer_iters`` rounds of correspondence search against the
    currently warped model, each followed by ``gn_iters`` Gauss-Newton
    updates with backtracking step acceptance, and exits early once the
    largest per-point position update falls below ``converge_tol``.

    ``graph`` is the stiffness neighborhood graph; when omitted, a
    ``graph_k``-nearest-neighbor graph over the model positions is built.
    Callers tracking a sequence should build the graph once on the initial
    model and reuse it, so that bodies coming into contact later never
    become coupled by the prior.

    Raises NoOverlapError if every round rejects all correspondences.
    """
    params = params if params is not None else RegistrationParams()
    params.validate()
    n = model.n_points
    if n < params.graph_k + 1:
        raise InputError(f"model needs at least graph_k+1={params.graph_k + 1} points, got {n}")
    if target.n_points == 0:
        raise InputError("target cloud is empty")
    if target.normals is None:
        raise InputError("target cloud must have normals")
    warp = init.copy() if init is not None else WarpField.identity(n)
    if len(warp) != n:
        raise InputError(f"init warp size {len(warp)} != model size {n}")

    if graph is None:
        graph = build_knn_graph(model.positions, params.graph_k)
    elif graph.n_nodes != n:
        raise InputError("graph must be defined over the model points")
    edges = _gaussian_edges(model.positions, graph, params.sigma_reg)
    tree = cKDTree(target.positions)
    got_pairs = False
    prev_positions = apply_warp(model, warp).positions
    for _ in range(params.outer_iters):
        warped = apply_warp(model, warp)
        corr = _correspond(warped, target, tree, params)
        if len(corr) == 0:
            continue
        got_pairs = True
        for _ in range(params.gn_iters):
            r, jac = _assemble(model, target, corr, edges, warp, params, with_jacobian=True)
            step = gauss_newton_step(jac, r, params.cg_iters, params.cg_tol).reshape(n, 6)
            cost = r @ r
            scale = 1.0
            accepted = False
            for _ in range(_MAX_STEP_HALVINGS):
                candidate = WarpField(warp.values - scale * step)
                r_new, _ = _assemble(model, target, corr, edges, candidate, params, with_jacobian=False)
                if r_new @ r_new < cost:
                    warp = candidate
                    accepted = True
                    break
                scale *= 0.5
            if not accepted:
                break
        new_positions = apply_warp(model, warp).positions
        moved = np.linalg.norm(new_positions - prev_positions, axis=1).max(initial=0.0)
        prev_positions = new_positions
        if moved < params.converge_tol:
            break
    if not got_pairs:
        raise NoOverlapError("all correspondences were rejected in every outer iteration")
    return warp


def save_warp_field(warp: WarpField, path, fmt: str | None = None) -> None:
    """Serialize a warp field; per point, 6 values in order [alpha beta gamma tx ty tz].

    ``fmt`` is "binary" (flat little-endian float64 record) or "json";
    by default it is inferred from the path suffix (.json selects JSON).
    """
    fmt = fmt or ("json" if str(path).endswith(".json") else "binary")
    if fmt == "binary":
        with open(path, "wb") as f:
            f.write(warp.values.astype("<f8").tobytes())
    elif fmt == "json":
        with open(path, "w") as f:
            json.dump({"transforms": warp.values.tolist()}, f)
            f.write("\n")
    else:
        raise InputError(f"unknown warp field format '{fmt}'")


def load_warp_field(path, fmt: str | None = None) -> WarpField:
    fmt = fmt or ("json" if str(path).endswith(".json") else "binary")
    if fmt == "binary":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % 48 != 0:
            raise InputError(f"{path}: binary warp record length must be a multiple of 48 bytes")
        values = np.frombuffer(raw, dtype="<f8").reshape(-1, 6)
        return WarpField(values.astype(np.float64))
    if fmt == "json":
        with open(path) as f:
            record = json.load(f)
        return WarpField(np.asarray(record["transforms"], dtype=np.float64).reshape(-1, 6))
    raise InputError(f"unknown warp field format '{fmt}'")
