"""File formats: splat PLY, mesh export (OBJ/PLY), solid OBJ, cameras, images.

The PLY layer is self-contained (header parsing plus binary-little-endian
and ascii payloads) because it only has to cover the fixed splat schema and
our own mesh exports, not the full generality of the format.
"""

import json
import logging
import math
import os
import struct

import numpy as np
from PIL import Image

from .core import FlatGaussian, eps_flat_for_points, flatten
from .errors import FormatError, ValidationError
from .meshing import FAN_INDICES, N_SIDES, gaussian_to_polygon
from .scene import Camera, Material, SolidMesh

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# generic PLY


def read_ply(path):
    """Parse a PLY file into {element: {"count", "properties", "data"}}.

    data maps property name -> 1d array; list properties map to a Python
    list of int arrays. Supports format ascii and binary_little_endian.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"ply"):
        raise FormatError(f"{path}: not a PLY file")
    end = blob.find(b"end_header")
    if end < 0:
        raise FormatError(f"{path}: unterminated PLY header")
    newline = blob.find(b"\n", end)
    header = blob[:newline].decode("ascii", errors="replace").splitlines()
    body = blob[newline + 1:]

    fmt = None
    elements = []  # (name, count, [(prop_name, kind...)])
    for line in header[1:]:
        parts = line.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before any element")
            try:
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1][2].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
            except (KeyError, IndexError):
                raise FormatError(f"{path}: malformed property line {line.strip()!r}") from None
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    out = {}
    offset = 0
    ascii_tokens = None
    tok_pos = 0
    if fmt == "ascii":
        ascii_tokens = body.split()
    for name, count, props in elements:
        has_list = any(p[1] == "list" for p in props)
        data = {}
        if fmt == "binary_little_endian" and not has_list:
            dt = np.dtype([(p[0], "<" + p[2]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            for p in props:
                data[p[0]] = np.ascontiguousarray(arr[p[0]])
        elif fmt == "binary_little_endian":
            for p in props:
                data[p[0]] = [] if p[1] == "list" else np.empty(count)
            scal = {p[0]: np.empty(count) for p in props if p[1] == "scalar"}
            for i in range(count):
                for p in props:
                    if p[1] == "list":
                        n = int(np.frombuffer(body, dtype="<" + p[2], count=1, offset=offset)[0])
                        offset += np.dtype(p[2]).itemsize
                        items = np.frombuffer(body, dtype="<" + p[3], count=n, offset=offset)
                        offset += np.dtype(p[3]).itemsize * n
                        data[p[0]].append(np.asarray(items))
                    else:
                        scal[p[0]][i] = np.frombuffer(body, dtype="<" + p[2], count=1, offset=offset)[0]
                        offset += np.dtype(p[2]).itemsize
            data.update(scal)
        else:  # ascii
            for p in props:
                data[p[0]] = [] if p[1] == "list" else np.empty(count)
            for i in range(count):
                for p in props:
                    if p[1] == "list":
                        n = int(ascii_tokens[tok_pos]); tok_pos += 1
                        items = [int(ascii_tokens[tok_pos + j]) for j in range(n)]
                        tok_pos += n
                        data[p[0]].append(np.asarray(items))
                    else:
                        data[p[0]][i] = float(ascii_tokens[tok_pos]); tok_pos += 1
        out[name] = {"count": count, "properties": [p[0] for p in props], "data": data}
    return out


# ---------------------------------------------------------------------------
# splat PLY (3D Gaussian Splatting vertex layout)

_GS_REQUIRED = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


def load_gs_ply(path, eps_flat=None):
    """Load splats stored in the common Gaussian-splatting PLY layout.

    Stored scales are logs, opacity is a logit, color is the DC spherical
    harmonic coefficient; each splat is flattened on load (smallest axis
    pinned to eps_flat, which defaults to 1e-6 of the cloud's bbox
    diagonal). Rows with non-finite values are dropped with a warning.
    """
    ply = read_ply(path)
    if "vertex" not in ply:
        raise FormatError(f"{path}: PLY has no vertex element")
    vert = ply["vertex"]["data"]
    missing = [p for p in _GS_REQUIRED if p not in vert]
    if missing:
        raise FormatError(f"{path}: missing splat properties: {', '.join(missing)}")

    cols = np.stack([np.asarray(vert[p], dtype=np.float64) for p in _GS_REQUIRED], axis=1)
    finite = np.isfinite(cols).all(axis=1)
    n_bad = int((~finite).sum())
    if n_bad:
        log.warning("%s: dropped %d splats with non-finite values", path, n_bad)
        cols = cols[finite]

    means = cols[:, 0:3]
    f_dc = cols[:, 3:6]
    opacity = _sigmoid(cols[:, 6])
    scales = np.exp(cols[:, 7:10])
    quats = cols[:, 10:14]

    if eps_flat is None:
        eps_flat = eps_flat_for_points(means)
    colors = np.clip(SH_C0 * f_dc + 0.5, 0.0, 1.0)

    gaussians = []
    for i in range(means.shape[0]):
        gaussians.append(
            flatten(means[i], quats[i], scales[i], float(opacity[i]), colors[i], eps_flat)
        )
    return gaussians


def save_gs_ply(path, gaussians):
    """Write splats back out in the same PLY layout (binary little-endian).

    Opacity is clamped into (0, 1) before the logit so fully transparent
    or fully opaque splats stay finite on disk.
    """
    n = len(gaussians)
    names = ["x", "y", "z", "nx", "ny", "nz",
             "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"]
    dt = np.dtype([(nm, "<f4") for nm in names])
    rows = np.zeros(n, dtype=dt)
    for i, g in enumerate(gaussians):
        q = g.quaternion / np.linalg.norm(g.quaternion)
        p = min(max(g.opacity_hat, 1e-7), 1.0 - 1e-7)
        rows["x"][i], rows["y"][i], rows["z"][i] = g.mean
        f_dc = (g.color - 0.5) / SH_C0
        rows["f_dc_0"][i], rows["f_dc_1"][i], rows["f_dc_2"][i] = f_dc
        rows["opacity"][i] = math.log(p / (1.0 - p))
        rows["scale_0"][i], rows["scale_1"][i], rows["scale_2"][i] = np.log(g.scales)
        rows["rot_0"][i], rows["rot_1"][i], rows["rot_2"][i], rows["rot_3"][i] = q
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


# ---------------------------------------------------------------------------
# mesh export

def _splat_meshes(gaussians, level):
    meshes = []
    for i, g in enumerate(gaussians):
        meshes.append(gaussian_to_polygon(g, level, splat_index=i))
    return meshes


def export_splat_mesh(path, gaussians, level, fmt=None):
    """Write the octagon proxy mesh of every splat to OBJ or PLY.

    OBJ gets a sibling .mtl with one material per splat (diffuse color Kd,
    dissolve d = opacity); PLY stores per-vertex RGBA instead. The format
    comes from the extension unless fmt overrides it.
    """
    if fmt is None:
        fmt = os.path.splitext(path)[1].lstrip(".").lower()
    if fmt not in ("obj", "ply"):
        raise ValidationError(f"unsupported mesh export format: {fmt!r}")
    meshes = _splat_meshes(gaussians, level)
    if fmt == "obj":
        _export_obj(path, gaussians, meshes)
    else:
        _export_mesh_ply(path, gaussians, meshes)


def _export_obj(path, gaussians, meshes):
    stem = os.path.splitext(os.path.basename(path))[0]
    mtl_path = os.path.splitext(path)[0] + ".mtl"
    with open(mtl_path, "w") as f:
        for i, g in enumerate(gaussians):
            f.write(f"newmtl splat_{i:05d}\n")
            f.write("Kd {:.9g} {:.9g} {:.9g}\n".format(*g.color))
            f.write(f"d {g.opacity_hat:.9g}\n\n")
    with open(path, "w") as f:
        f.write(f"mtllib {os.path.basename(mtl_path)}\n")
        f.write(f"o {stem}\n")
        for mesh in meshes:
            for v in mesh.vertices:
                f.write("v {:.17g} {:.17g} {:.17g}\n".format(*v))
        for i, mesh in enumerate(meshes):
            f.write(f"usemtl splat_{i:05d}\n")
            base = 1 + N_SIDES * i
            for tri in mesh.fan_indices:
                f.write(f"f {base + tri[0]} {base + tri[1]} {base + tri[2]}\n")


def _export_mesh_ply(path, gaussians, meshes):
    n = len(meshes)
    nv = N_SIDES * n
    nf = FAN_INDICES.shape[0] * n
    vdt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("alpha", "u1")])
    verts = np.zeros(nv, dtype=vdt)
    for i, (g, mesh) in enumerate(zip(gaussians, meshes)):
        sl = slice(N_SIDES * i, N_SIDES * (i + 1))
        verts["x"][sl] = mesh.vertices[:, 0]
        verts["y"][sl] = mesh.vertices[:, 1]
        verts["z"][sl] = mesh.vertices[:, 2]
        rgba = np.round(np.array([*g.color, g.opacity_hat]) * 255.0).astype(np.uint8)
        verts["red"][sl], verts["green"][sl], verts["blue"][sl], verts["alpha"][sl] = rgba
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {nv}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uchar alpha",
        f"element face {nf}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(verts.tobytes())
        for i in range(n):
            base = N_SIDES * i
            for tri in FAN_INDICES:
                f.write(struct.pack("<B3i", 3, base + int(tri[0]), base + int(tri[1]), base + int(tri[2])))


# ---------------------------------------------------------------------------
# solid meshes (OBJ subset)

def load_solid_mesh(path, material=None):
    """Read an OBJ file (v/f lines only) into a SolidMesh.

    Polygons are fan-triangulated; faces that collapse to fewer than three
    distinct vertices are dropped (counted in the log). Negative indices
    are resolved relative to the vertices seen so far. The mesh gets the
    given material (default diffuse).
    """
    verts = []
    tris = []
    dropped = 0
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: malformed vertex line")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    s = tok.split("/")[0]
                    if not s:
                        raise FormatError(f"{path}:{lineno}: malformed face token {tok!r}")
                    k = int(s)
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                if len(idx) < 3:
                    raise FormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for j in range(1, len(idx) - 1):
                    a, b, c = idx[0], idx[j], idx[j + 1]
                    if a == b or b == c or a == c:
                        dropped += 1
                        continue
                    tris.append([a, b, c])
    vertices = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise FormatError(f"{path}: face index out of range")
    if dropped:
        log.warning("%s: dropped %d degenerate faces", path, dropped)
    return SolidMesh(vertices=vertices, triangles=triangles,
                     material=material if material is not None else Material())


# ---------------------------------------------------------------------------
# cameras

def save_cameras(path, cameras):
    """Write cameras to a transforms JSON readable by load_cameras.

    All cameras must share focal length and image size (the format has a
    single global camera_angle_x).
    """
    if not cameras:
        raise ValidationError("no cameras to save")
    c0 = cameras[0]
    for c in cameras:
        if (c.width, c.height) != (c0.width, c0.height) or c.focal_x != c0.focal_x:
            raise ValidationError("cameras must share image size and focal length")
    doc = {
        "camera_angle_x": 2.0 * math.atan(c0.width / (2.0 * c0.focal_x)),
        "camera_angle_y": 2.0 * math.atan(c0.height / (2.0 * c0.focal_y)),
        "w": c0.width,
        "h": c0.height,
        "frames": [],
    }
    for c in cameras:
        mat = np.eye(4)
        mat[:3, :3] = c.rotation
        mat[:3, 3] = c.position
        doc["frames"].append({"transform_matrix": mat.tolist()})
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_cameras(path, width=800, height=800):
    """Load cameras from a transforms JSON (camera_angle_x + c2w frames).

    Image size comes from "w"/"h" fields when present, else the arguments.
    The rotation block of each transform_matrix is projected to the nearest
    rotation matrix; anything farther than 1e-3 from orthonormal is an error.
    """
    with open(path) as f:
        doc = json.load(f)
    if "camera_angle_x" not in doc:
        raise FormatError(f"{path}: missing camera_angle_x")
    if "frames" not in doc or not isinstance(doc["frames"], list):
        raise FormatError(f"{path}: missing frames list")
    w = int(doc.get("w", width))
    h = int(doc.get("h", height))
    angle_x = float(doc["camera_angle_x"])
    focal_x = w / (2.0 * math.tan(angle_x / 2.0))
    if "camera_angle_y" in doc:
        focal_y = h / (2.0 * math.tan(float(doc["camera_angle_y"]) / 2.0))
    else:
        focal_y = focal_x

    cameras = []
    for i, frame in enumerate(doc["frames"]):
        if "transform_matrix" not in frame:
            raise FormatError(f"{path}: frame {i} missing transform_matrix")
        mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if mat.shape != (4, 4):
            raise FormatError(f"{path}: frame {i} transform_matrix is not 4x4")
        rot = mat[:3, :3]
        u, _, vt = np.linalg.svd(rot)
        nearest = u @ vt
        if np.linalg.det(nearest) < 0 or np.abs(rot - nearest).max() > 1e-3:
            raise FormatError(f"{path}: frame {i} rotation is not orthonormal")
        cameras.append(
            Camera(rotation=nearest, position=mat[:3, 3],
                   focal_x=focal_x, focal_y=focal_y, width=w, height=h)
        )
    return cameras


# ---------------------------------------------------------------------------
# images

def srgb_encode(linear):
    """Linear [0, 1] -> sRGB [0, 1] transfer curve."""
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded):
    """sRGB [0, 1] -> linear [0, 1]; inverse of srgb_encode."""
    x = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_image(path, image):
    """Save a linear float image as sRGB PNG, or raw float64 as .npy."""
    image = np.asarray(image, dtype=np.float64)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".npy":
        np.save(path, image)
        return
    if ext != ".png":
        raise ValidationError(f"unsupported image extension: {ext!r}")
    u8 = np.round(srgb_encode(image) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path):
    """Load an image into a linear float64 (H, W, 3) array.

    PNG bytes are decoded through the inverse sRGB transfer so a save/load
    round trip is identity up to 8-bit quantization; .npy files come back
    bit-exact.
    """
    ext = os.path.splitext(path)[1].lower()
    if ext == ".npy":
        arr = np.load(path)
        return np.asarray(arr, dtype=np.float64)
    img = Image.open(path).convert("RGB")
    return srgb_decode(np.asarray(img, dtype=np.float64) / 255.0)
