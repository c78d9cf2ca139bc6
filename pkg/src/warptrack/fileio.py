"""File formats: PLY point clouds, PNG depth/color frames, intrinsics JSON."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .geometry import CameraIntrinsics, PointCloud, RGBDFrame

_PLY_TYPES = {
    "float": ("<f4", "%.9g"),
    "float32": ("<f4", "%.9g"),
    "double": ("<f8", "%.17g"),
    "float64": ("<f8", "%.17g"),
    "uchar": ("u1", "%d"),
    "uint8": ("u1", "%d"),
}


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write a cloud as PLY with x,y,z[,nx,ny,nz][,red,green,blue] vertex properties.

    Positions and normals are stored as float32, colors as uint8.
    ``binary`` selects binary little-endian, otherwise ASCII.
    """
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    columns = [cloud.positions.astype("<f4")]
    props = ["property float x", "property float y", "property float z"]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
        columns.append(cloud.normals.astype("<f4"))
        props += ["property float nx", "property float ny", "property float nz"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype("u1")
        columns.append(rgb)
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(
        ["ply", f"format {fmt} 1.0", f"element vertex {cloud.n_points}", *props, "end_header", ""]
    )
    rec = np.empty(cloud.n_points, dtype=fields)
    flat = np.concatenate([c.reshape(cloud.n_points, -1) for c in columns], axis=1)
    for j, (name, _) in enumerate(fields):
        rec[name] = flat[:, j]
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            fmts = [_PLY_TYPES["float"][1]] * 3
            if cloud.normals is not None:
                fmts += [_PLY_TYPES["float"][1]] * 3
            if cloud.colors is not None:
                fmts += ["%d"] * 3
            lines = []
            for row in rec:
                lines.append(" ".join(f % row[name] for f, (name, _) in zip(fmts, fields)))
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    """Read an ASCII or binary little-endian PLY vertex cloud.

    Recognizes x,y,z (required), nx,ny,nz, and red,green,blue properties;
    uchar colors are rescaled to [0, 1].
    """
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise InputError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = None
        names: list[str] = []
        dtypes: list[str] = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise InputError(f"{path}: truncated PLY header")
            tokens = line.decode("ascii", "replace").strip().split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
                elif int(tokens[2]) > 0:
                    raise InputError(f"{path}: unsupported non-vertex element '{tokens[1]}'")
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise InputError(f"{path}: list properties are not supported")
                if tokens[1] not in _PLY_TYPES:
                    raise InputError(f"{path}: unsupported property type '{tokens[1]}'")
                dtypes.append(_PLY_TYPES[tokens[1]][0])
                names.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise InputError(f"{path}: unsupported PLY format '{fmt}'")
        if n_vertex is None:
            raise InputError(f"{path}: missing vertex element")
        dtype = np.dtype(list(zip(names, dtypes)))
        if fmt == "binary_little_endian":
            data = np.frombuffer(f.read(dtype.itemsize * n_vertex), dtype=dtype, count=n_vertex)
        else:
            raw = np.loadtxt(f, ndmin=2, max_rows=n_vertex) if n_vertex else np.empty((0, len(names)))
            data = np.empty(n_vertex, dtype=dtype)
            for j, name in enumerate(names):
                data[name] = raw[:, j]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise InputError(f"{path}: missing '{axis}' vertex property")
    positions = np.column_stack([data["x"], data["y"], data["z"]]).astype(np.float64)
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.column_stack([data["nx"], data["ny"], data["nz"]]).astype(np.float64)
        # float32 storage perturbs unit length; renormalize finite rows
        finite = np.isfinite(normals).all(axis=1)
        norms = np.linalg.norm(normals[finite], axis=1)
        nz = norms > 0
        normals[np.flatnonzero(finite)[nz]] /= norms[nz][:, None]
        normals[np.flatnonzero(finite)[~nz]] = np.nan
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        rgb = np.column_stack([data["red"], data["green"], data["blue"]]).astype(np.float64)
        if dtype["red"].kind == "u":
            rgb /= 255.0
        colors = rgb
    return PointCloud(positions, normals, colors)


def save_intrinsics(intrinsics: CameraIntrinsics, path) -> None:
    record = {
        "fx": intrinsics.fx,
        "fy": intrinsics.fy,
        "cx": intrinsics.cx,
        "cy": intrinsics.cy,
        "width": intrinsics.width,
        "height": intrinsics.height,
    }
    with open(path, "w") as f:
        json.dump(record, f, indent=2)
        f.write("\n")


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        record = json.load(f)
    try:
        return CameraIntrinsics(
            fx=float(record["fx"]),
            fy=float(record["fy"]),
            cx=float(record["cx"]),
            cy=float(record["cy"]),
            width=int(record["width"]),
            height=int(record["height"]),
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing intrinsics key {exc}") from exc


def save_depth_png(depth_m: np.ndarray, path, depth_scale: float = 0.001) -> None:
    """Write depth in meters as a 16-bit PNG of ``depth / depth_scale`` units."""
    raw = np.rint(np.asarray(depth_m, dtype=np.float64) / depth_scale)
    if raw.min(initial=0) < 0 or raw.max(initial=0) > np.iinfo(np.uint16).max:
        raise InputError("depth values out of 16-bit range at this scale")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def save_color_png(color: np.ndarray, path) -> None:
    rgb = np.clip(np.rint(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_rgbd_frame(depth_path, color_path, intrinsics: CameraIntrinsics, depth_scale: float = 0.001) -> RGBDFrame:
    """Load a 16-bit depth PNG (and optional 8-bit RGB PNG) into an RGBDFrame."""
    depth_img = Image.open(depth_path)
    depth = np.asarray(depth_img, dtype=np.float64) * depth_scale
    color = None
    if color_path is not None:
        color_img = Image.open(color_path).convert("RGB")
        color = np.asarray(color_img, dtype=np.float64) / 255.0
    return RGBDFrame(depth=depth, color=color, intrinsics=intrinsics)


def list_frame_files(directory, suffix: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{directory}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix == suffix and p.is_file())


def load_ply_sequence(directory) -> list[PointCloud]:
    """Read every .ply file in a directory in lexicographic order."""
    files = list_frame_files(directory, ".ply")
    if not files:
        raise InputError(f"{directory}: no .ply frames found")
    return [read_ply(p) for p in files]


def load_rgbd_sequence(directory, depth_scale: float = 0.001) -> list[RGBDFrame]:
    """Read depth_*.png / color_*.png pairs plus intrinsics.json from a directory.

    Color images are optional; depth files define the frame list.
    """
    d = Path(directory)
    intrinsics_path = d / "intrinsics.json"
    if not intrinsics_path.is_file():
        raise InputError(f"{directory}: missing intrinsics.json")
    intrinsics = load_intrinsics(intrinsics_path)
    depth_files = sorted(d.glob("depth_*.png"))
    if not depth_files:
        raise InputError(f"{directory}: no depth_*.png frames found")
    frames = []
    for depth_path in depth_files:
        color_path = d / depth_path.name.replace("depth_", "color_", 1)
        frames.append(
            load_rgbd_frame(depth_path, color_path if color_path.is_file() else None, intrinsics, depth_scale)
        )
    return frames
