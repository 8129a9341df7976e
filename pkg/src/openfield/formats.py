"""On-disk formats: PPM images, OFMP tensor planes, OFLD checkpoints,
ASCII PLY point clouds, pose text files, and per-point stats dumps.

All binary formats are little-endian. The OFMP container stores one
row-major H x W x D plane and doubles as the depth/semantics format with
dim=1. The OFLD checkpoint stores the field bbox followed by a sequence
of lattice blocks (resolution triple, channel count, f32 values with x
varying fastest); blocks are read until EOF, in the fixed order density,
color, feature, background (the background block is a 1x1x1x3 lattice).
"""

import json
import struct

import numpy as np

from .geometry import Camera
from .scenegen import FeatureMap, LabeledPointCloud, Primitive, SceneSpec

OFMP_MAGIC = b"OFMP"
OFLD_MAGIC = b"OFLD"
OFST_MAGIC = b"OFST"

DTYPE_F16 = 0
DTYPE_F32 = 1


# ---------------------------------------------------------------------------
# PPM (binary P6)

def write_ppm(path, image: np.ndarray):
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM image must be (H, W, 3)")
    h, w = image.shape[:2]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM file: {path}")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise ValueError(f"truncated PPM header: {path}")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields[:3])
        if maxval != 255:
            raise ValueError("only maxval 255 PPM supported")
        raw = f.read(w * h * 3)
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# OFMP feature planes

def write_ofmp(path, data: np.ndarray, half_precision: bool = True):
    """Write an (H, W, D) or (H, W) plane. Half precision by default."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError("OFMP payload must be (H, W) or (H, W, D)")
    h, w, d = data.shape
    dtype_code = DTYPE_F16 if half_precision else DTYPE_F32
    payload = data.astype("<f2" if half_precision else "<f4")
    with open(path, "wb") as f:
        f.write(OFMP_MAGIC)
        f.write(struct.pack("<IIIIB3x", 1, w, h, d, dtype_code))
        f.write(payload.tobytes())


def read_ofmp(path) -> np.ndarray:
    """Read an OFMP plane as float32 (H, W, D). Rejects NaN/Inf payloads."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != OFMP_MAGIC:
            raise ValueError(f"not an OFMP file: {path}")
        version, w, h, d, dtype_code = struct.unpack("<IIIIB3x", f.read(20))
        if version != 1:
            raise ValueError(f"unsupported OFMP version {version}")
        if d < 1:
            raise ValueError("OFMP dim must be >= 1")
        np_dtype = "<f2" if dtype_code == DTYPE_F16 else "<f4"
        raw = f.read(h * w * d * np.dtype(np_dtype).itemsize)
    data = np.frombuffer(raw, dtype=np_dtype).reshape(h, w, d)
    data = data.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"OFMP payload contains NaN/Inf: {path}")
    return data


def write_feature_map(path, fm: FeatureMap, half_precision: bool = True):
    write_ofmp(path, fm.data, half_precision=half_precision)


def read_feature_map(path) -> FeatureMap:
    return FeatureMap(data=read_ofmp(path))


# ---------------------------------------------------------------------------
# OFLD field checkpoints

def _write_lattice(f, grid: np.ndarray):
    if grid.ndim == 3:
        grid = grid[..., None]
    nx, ny, nz, c = grid.shape
    f.write(struct.pack("<IIII", nx, ny, nz, c))
    # x fastest, then y, then z; channels contiguous per lattice point.
    f.write(np.transpose(grid, (2, 1, 0, 3)).astype("<f4").tobytes())


def _read_lattice(f):
    header = f.read(16)
    if len(header) < 16:
        return None
    nx, ny, nz, c = struct.unpack("<IIII", header)
    raw = f.read(nx * ny * nz * c * 4)
    data = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx, c)
    return np.ascontiguousarray(np.transpose(data, (2, 1, 0, 3))).astype(np.float64)


def write_checkpoint(path, params):
    """Write FieldParams to an OFLD checkpoint."""
    with open(path, "wb") as f:
        f.write(OFLD_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<6d", *params.bbox_min, *params.bbox_max))
        _write_lattice(f, params.density)
        _write_lattice(f, params.color)
        _write_lattice(f, params.feature)
        _write_lattice(f, params.background_color.reshape(1, 1, 1, 3))


def read_checkpoint(path):
    from .field import FieldParams

    with open(path, "rb") as f:
        if f.read(4) != OFLD_MAGIC:
            raise ValueError(f"not an OFLD checkpoint: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported OFLD version {version}")
        bbox = struct.unpack("<6d", f.read(48))
        grids = []
        while True:
            grid = _read_lattice(f)
            if grid is None:
                break
            grids.append(grid)
    if len(grids) < 3:
        raise ValueError("checkpoint must contain density, color, feature grids")
    background = (grids[3].reshape(3) if len(grids) > 3
                  else np.full(3, 0.5))
    return FieldParams(
        bbox_min=np.array(bbox[:3]),
        bbox_max=np.array(bbox[3:]),
        density=grids[0][..., 0],
        color=grids[1],
        feature=grids[2],
        background_color=background,
    )


# ---------------------------------------------------------------------------
# ASCII PLY point clouds

def write_ply(path, cloud: LabeledPointCloud):
    colors = cloud.colors
    if colors is None:
        colors = np.zeros((len(cloud), 3))
    rgb255 = np.clip(np.rint(colors * 255.0), 0, 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property int class_id",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c, col in zip(cloud.positions, cloud.class_ids, rgb255):
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                     f"{int(c)} {col[0]} {col[1]} {col[2]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_ply(path) -> LabeledPointCloud:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"not a PLY file: {path}")
        n_vertex = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError("truncated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            if line == "end_header":
                break
        if n_vertex is None:
            raise ValueError("PLY header missing vertex element")
        positions = np.zeros((n_vertex, 3))
        class_ids = np.zeros(n_vertex, dtype=np.int64)
        colors = np.zeros((n_vertex, 3))
        for i in range(n_vertex):
            parts = f.readline().split()
            positions[i] = [float(v) for v in parts[:3]]
            class_ids[i] = int(parts[3])
            colors[i] = [int(v) / 255.0 for v in parts[4:7]]
    return LabeledPointCloud(positions=positions, class_ids=class_ids,
                             colors=colors)


# ---------------------------------------------------------------------------
# Camera pose text files

def write_poses(path, cameras: list):
    """One camera per line: 16 row-major pose floats, fx fy cx cy w h."""
    lines = []
    for cam in cameras:
        vals = [repr(float(v)) for v in cam.pose.ravel()]
        vals += [repr(float(cam.fx)), repr(float(cam.fy)),
                 repr(float(cam.cx)), repr(float(cam.cy)),
                 str(cam.width), str(cam.height)]
        lines.append(" ".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_poses(path) -> list:
    cameras = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 22:
                raise ValueError("pose line must have 22 fields")
            pose = np.array([float(v) for v in parts[:16]]).reshape(4, 4)
            fx, fy, cx, cy = (float(v) for v in parts[16:20])
            w, h = int(parts[20]), int(parts[21])
            cameras.append(Camera(pose=pose, fx=fx, fy=fy, cx=cx, cy=cy,
                                  width=w, height=h))
    return cameras


# ---------------------------------------------------------------------------
# Per-point fusion stats

def write_stats(path, stats_list, dump_covariance: bool = False):
    """Binary stats dump: per point u32 count, f32 mean[D], f32 log_u.

    Covariances are optionally appended per point for D <= 32.
    """
    if not stats_list:
        raise ValueError("empty stats list")
    dim = len(stats_list[0].mean)
    if dump_covariance and dim > 32:
        raise ValueError("covariance dump only supported for D <= 32")
    with open(path, "wb") as f:
        f.write(OFST_MAGIC)
        f.write(struct.pack("<IIIB3x", 1, len(stats_list), dim,
                            1 if dump_covariance else 0))
        for st in stats_list:
            f.write(struct.pack("<I", st.count))
            f.write(np.asarray(st.mean, dtype="<f4").tobytes())
            f.write(struct.pack("<f", float(st.log_uncertainty)))
            if dump_covariance:
                f.write(np.asarray(st.m2, dtype="<f4").tobytes())


def read_stats(path):
    """Read a stats dump as arrays (count, mean, log_u[, m2])."""
    with open(path, "rb") as f:
        if f.read(4) != OFST_MAGIC:
            raise ValueError(f"not a stats file: {path}")
        version, n, dim, has_cov = struct.unpack("<IIIB3x", f.read(16))
        if version != 1:
            raise ValueError(f"unsupported stats version {version}")
        count = np.zeros(n, dtype=np.int64)
        mean = np.zeros((n, dim))
        log_u = np.zeros(n)
        m2 = np.zeros((n, dim, dim)) if has_cov else None
        for i in range(n):
            (count[i],) = struct.unpack("<I", f.read(4))
            mean[i] = np.frombuffer(f.read(4 * dim), dtype="<f4")
            (log_u[i],) = struct.unpack("<f", f.read(4))
            if has_cov:
                m2[i] = np.frombuffer(f.read(4 * dim * dim),
                                      dtype="<f4").reshape(dim, dim)
    out = {"count": count, "mean": mean, "log_u": log_u}
    if has_cov:
        out["m2"] = m2
    return out


# ---------------------------------------------------------------------------
# Scene spec JSON

def scene_spec_to_dict(spec: SceneSpec) -> dict:
    prims = []
    for p in spec.primitives:
        d = {"shape": p.shape, "center": list(p.center),
             "class_id": int(p.class_id), "albedo": list(p.albedo)}
        if p.shape == "box":
            d["extents"] = list(p.extents)
        else:
            d["radius"] = float(p.radius)
        prims.append(d)
    return {
        "bbox_min": list(spec.bbox_min),
        "bbox_max": list(spec.bbox_max),
        "background_color": list(spec.background_color),
        "seed": int(spec.seed),
        "primitives": prims,
    }


def scene_spec_from_dict(doc: dict) -> SceneSpec:
    known = {"bbox_min", "bbox_max", "background_color", "seed", "primitives"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
    prims = []
    for d in doc["primitives"]:
        prims.append(Primitive(
            shape=d["shape"],
            center=np.array(d["center"], dtype=np.float64),
            class_id=int(d["class_id"]),
            albedo=np.array(d["albedo"], dtype=np.float64),
            extents=(np.array(d["extents"], dtype=np.float64)
                     if "extents" in d else None),
            radius=d.get("radius"),
        ))
    return SceneSpec(
        bbox_min=np.array(doc["bbox_min"], dtype=np.float64),
        bbox_max=np.array(doc["bbox_max"], dtype=np.float64),
        primitives=prims,
        background_color=np.array(doc.get("background_color", (0, 0, 0)),
                                  dtype=np.float64),
        seed=int(doc.get("seed", 0)),
    )


def write_scene_spec(path, spec: SceneSpec):
    with open(path, "w") as f:
        json.dump(scene_spec_to_dict(spec), f, indent=2)
        f.write("\n")


def read_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        return scene_spec_from_dict(json.load(f))
