"""Hemispherical gel surface model: radial depth fields, ray-cast contact
deformation, volume-conserving bulge, and the exact 8-bit depth codec.

A depth map stores, per camera pixel direction, the radial distance (mm)
from the optical center to the gel surface. The undeformed gel is the
sphere r = r_nominal; an indenter pushes the surface inward along each ray
it blocks, and the displaced volume bulges the remaining surface outward.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .optics import CameraModel

R_NOMINAL_MM = 15.5
D_MIN_MM = 12.23
D_MAX_MM = 16.88
CODEC_STEP_MM = 4.64 / 255.0  # 0.0182 mm per pixel increment


@dataclass(frozen=True)
class SensorGeometry:
    r_nominal: float = R_NOMINAL_MM
    d_min: float = D_MIN_MM
    d_max: float = D_MAX_MM
    cap_half_angle: float = 90.0  # degrees; 90 = full hemisphere
    resolution: int = 640
    fov_deg: float = 185.0

    def __post_init__(self):
        if not self.d_min < self.r_nominal < self.d_max:
            raise ValueError("need d_min < r_nominal < d_max")

    @property
    def camera(self) -> CameraModel:
        return CameraModel(width=self.resolution, height=self.resolution,
                           fov_deg=self.fov_deg)

    def directions(self) -> np.ndarray:
        dirs, _ = self.camera.pixel_grid_directions()
        return dirs

    def valid_mask(self) -> np.ndarray:
        """Pixels whose direction lies on the gel cap (and inside the image disk)."""
        dirs, in_disk = self.camera.pixel_grid_directions()
        theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
        limit = np.deg2rad(min(self.cap_half_angle, self.fov_deg / 2.0))
        return in_disk & (theta <= limit + 1e-12)

    def solid_angles(self) -> np.ndarray:
        """Per-pixel solid angle dOmega (steradians); zero outside the cap.

        For the equidistant model, dOmega = sin(theta)/(f^2 * theta) du dv."""
        cam = self.camera
        dirs, _ = cam.pixel_grid_directions()
        theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
        f = cam.focal
        w = np.where(theta > 1e-9, np.sin(theta) / np.maximum(theta, 1e-12), 1.0) / f**2
        w[~self.valid_mask()] = 0.0
        return w


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) mm
    meta: dict = field(default_factory=dict)

    def copy(self) -> "DepthMap":
        return DepthMap(values=self.values.copy(), meta=dict(self.meta))


@dataclass(frozen=True)
class DepthCodec:
    d_min: float = D_MIN_MM
    step: float = CODEC_STEP_MM

    @property
    def d_max_encodable(self) -> float:
        return self.d_min + 255 * self.step

    def encode(self, values: np.ndarray) -> np.ndarray:
        px = np.round((np.asarray(values, dtype=np.float64) - self.d_min) / self.step)
        return np.clip(px, 0, 255).astype(np.uint8)

    def encode_with_stats(self, values: np.ndarray) -> tuple[np.ndarray, int, int]:
        px = np.round((np.asarray(values, dtype=np.float64) - self.d_min) / self.step)
        n_low = int(np.count_nonzero(px < 0))
        n_high = int(np.count_nonzero(px > 255))
        return np.clip(px, 0, 255).astype(np.uint8), n_low, n_high

    def decode(self, img: np.ndarray) -> np.ndarray:
        return self.d_min + np.asarray(img, dtype=np.float64) * self.step

    def sidecar(self) -> dict:
        return {"d_min_mm": self.d_min, "step_mm": self.step,
                "d_max_encodable_mm": self.d_max_encodable}


def undeformed(geom: SensorGeometry) -> DepthMap:
    shape = (geom.resolution, geom.resolution)
    return DepthMap(values=np.full(shape, geom.r_nominal, dtype=np.float64))


# ---------------------------------------------------------------- indenters

@dataclass(frozen=True)
class SphereIndenter:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class PlaneIndenter:
    """Halfspace normal . x >= offset, with the normal pointing away from the
    optical center (rays hit the plane at t = offset / (normal . dir))."""
    normal: tuple[float, float, float]
    offset: float


@dataclass
class MeshIndenter:
    vertices: np.ndarray  # (V, 3) mm, already posed in the sensor frame
    faces: np.ndarray  # (F, 3) int

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "MeshIndenter":
        v = self.vertices @ np.asarray(rotation, dtype=np.float64).T + np.asarray(translation)
        return MeshIndenter(vertices=v, faces=self.faces)


def quaternion_to_matrix(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def load_pose(path_or_dict) -> tuple[np.ndarray, np.ndarray]:
    """Pose JSON {"quaternion": [w,x,y,z], "translation_mm": [x,y,z]}."""
    if isinstance(path_or_dict, dict):
        d = path_or_dict
    else:
        with open(path_or_dict) as f:
            d = json.load(f)
    return quaternion_to_matrix(d["quaternion"]), np.asarray(d["translation_mm"], dtype=np.float64)


def load_stl(path) -> MeshIndenter:
    """Binary or ASCII STL. Vertices are deduplicated exactly."""
    with open(path, "rb") as f:
        head = f.read(5)
        f.seek(0)
        data = f.read()
    if head.lower() == b"solid" and b"facet" in data[:1024]:
        tris = []
        for line in data.decode("ascii", errors="replace").splitlines():
            parts = line.split()
            if len(parts) == 4 and parts[0] == "vertex":
                tris.append([float(parts[1]), float(parts[2]), float(parts[3])])
        verts = np.asarray(tris, dtype=np.float64)
        if len(verts) % 3:
            raise ValueError("malformed ASCII STL")
    else:
        (n_tri,) = struct.unpack_from("<I", data, 80)
        need = 84 + 50 * n_tri
        if len(data) < need:
            raise ValueError("truncated binary STL")
        raw = np.frombuffer(data, dtype=np.uint8, count=50 * n_tri, offset=84)
        rec = raw.reshape(n_tri, 50)
        verts = rec[:, 12:48].copy().view("<f4").reshape(n_tri * 3, 3).astype(np.float64)
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3)
    return MeshIndenter(vertices=uniq, faces=faces)


def save_stl(mesh: MeshIndenter, path) -> None:
    """Binary STL writer."""
    v = mesh.vertices[mesh.faces]  # (F, 3, 3)
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    with open(path, "wb") as f:
        f.write(b"\0" * 80)
        f.write(struct.pack("<I", len(v)))
        for i in range(len(v)):
            f.write(np.asarray(n[i], dtype="<f4").tobytes())
            f.write(np.asarray(v[i], dtype="<f4").tobytes())
            f.write(b"\0\0")


def icosphere(radius: float, center, subdivisions: int = 2) -> MeshIndenter:
    """Geodesic sphere mesh from subdividing an icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in edge_mid:
                m = verts_list[a] + verts_list[b]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    return MeshIndenter(vertices=verts * radius + np.asarray(center, dtype=np.float64),
                        faces=faces)


# ---------------------------------------------------------------- ray casting

def analytic_sphere_indent(geom: SensorGeometry, center, radius: float) -> DepthMap:
    """Closed-form ray-sphere intersection per grid direction (oracle for the
    mesh path)."""
    c = np.asarray(center, dtype=np.float64)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius > 0 and np.linalg.norm(c) <= radius:
        raise ValueError("invalid pose: sphere contains the optical center")
    dm = undeformed(geom)
    if radius == 0:
        return dm
    dirs = geom.directions().reshape(-1, 3)
    b = dirs @ c
    disc = b * b - (c @ c - radius * radius)
    hit = disc > 0
    t = np.full(len(dirs), np.inf)
    t[hit] = b[hit] - np.sqrt(disc[hit])
    t[t <= 0] = np.inf
    vals = np.minimum(geom.r_nominal, t).reshape(dm.values.shape)
    vals[~geom.valid_mask()] = geom.r_nominal
    return _finalize_contact(vals, geom)


def _finalize_contact(vals: np.ndarray, geom: SensorGeometry,
                      extra_meta: dict | None = None) -> DepthMap:
    n_low = int(np.count_nonzero(vals < geom.d_min))
    vals = np.clip(vals, geom.d_min, geom.r_nominal)
    mask = geom.valid_mask()
    saturated = bool(np.all(vals[mask] <= geom.d_min + 1e-12))
    meta = {"clamped_low": n_low, "contact_saturated": saturated}
    if extra_meta:
        meta.update(extra_meta)
    return DepthMap(values=vals, meta=meta)


def _raycast_mesh(dirs: np.ndarray, mesh: MeshIndenter,
                  chunk: int = 64) -> tuple[np.ndarray, int]:
    """Nearest positive ray-triangle intersection distance per direction
    (Moeller-Trumbore, rays from the origin). Returns (t, degenerate_count)."""
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    good = area2 > 1e-12
    degenerate = int(np.count_nonzero(~good))
    v0, e1, e2 = v0[good], e1[good], e2[good]
    t_best = np.full(len(dirs), np.inf)
    eps = 1e-12
    for lo in range(0, len(v0), chunk):
        V0 = v0[lo:lo + chunk]
        E1 = e1[lo:lo + chunk]
        E2 = e2[lo:lo + chunk]
        # (rays, tris) broadcasting
        p = np.cross(dirs[:, None, :], E2[None, :, :])
        det = np.einsum("rtk,tk->rt", p, E1)
        inv = np.where(np.abs(det) > eps, 1.0 / np.where(det == 0, 1.0, det), 0.0)
        # ray origin is 0, so tvec = -V0
        u = np.einsum("rtk,tk->rt", p, -V0) * inv
        q = np.cross(-V0[None, :, :], E1[None, :, :])
        v = np.einsum("rtk,rk->rt", q, dirs) * inv
        t = np.einsum("rtk,tk->rt", q, E2) * inv
        ok = (np.abs(det) > eps) & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > eps)
        t = np.where(ok, t, np.inf)
        t_best = np.minimum(t_best, t.min(axis=1))
    return t_best, degenerate


def raycast_indent(geom: SensorGeometry, shape) -> DepthMap:
    """Depth map of an indenter posed in the sensor frame:
    per direction min(r_nominal, nearest intersection distance)."""
    if isinstance(shape, SphereIndenter):
        return analytic_sphere_indent(geom, shape.center, shape.radius)
    dm = undeformed(geom)
    dirs = geom.directions().reshape(-1, 3)
    extra: dict = {}
    if isinstance(shape, PlaneIndenter):
        n = np.asarray(shape.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        if shape.offset <= 0:
            raise ValueError("invalid pose: plane through or behind the optical center")
        denom = dirs @ n
        t = np.where(denom > 1e-12, shape.offset / np.maximum(denom, 1e-12), np.inf)
    elif isinstance(shape, MeshIndenter):
        t, degenerate = _raycast_mesh(dirs, shape)
        extra["degenerate_triangles"] = degenerate
    else:
        raise TypeError(f"unsupported indenter {type(shape).__name__}")
    vals = np.minimum(geom.r_nominal, t).reshape(dm.values.shape)
    vals[~geom.valid_mask()] = geom.r_nominal
    return _finalize_contact(vals, geom, extra)


# ---------------------------------------------------------------- bulging

def enclosed_volume(values: np.ndarray, geom: SensorGeometry) -> float:
    """Volume enclosed by the radial field over the cap: integral of r^3/3 dOmega."""
    w = geom.solid_angles()
    return float(np.sum(values**3 / 3.0 * w))


def apply_bulge(contact: DepthMap, geom: SensorGeometry, sigma: float = 20.0) -> DepthMap:
    """Redistribute the indented volume outward onto non-contact directions.

    The outward displacement profile is a Gaussian in geodesic angle from the
    contact boundary with width sigma (degrees), scaled so the enclosed volume
    is conserved before clamping to [d_min, d_max]."""
    r = contact.values
    mask = geom.valid_mask()
    in_contact = mask & (r < geom.r_nominal - 1e-9)
    meta = dict(contact.meta)
    meta.setdefault("conservation_impossible", False)
    if not np.any(in_contact):
        out = contact.copy()
        out.meta = meta
        return out
    non_contact = mask & ~in_contact
    if not np.any(non_contact):
        meta["conservation_impossible"] = True
        out = contact.copy()
        out.meta = meta
        return out

    w_omega = geom.solid_angles()
    v_disp = float(np.sum((geom.r_nominal**3 - r[in_contact]**3) / 3.0 * w_omega[in_contact]))

    # contact boundary: contact pixels with a 4-neighbor outside the contact
    pad = np.pad(in_contact, 1, constant_values=False)
    nb = (pad[:-2, 1:-1] & pad[1:-1, 1:-1], pad[2:, 1:-1] & pad[1:-1, 1:-1],
          pad[1:-1, :-2] & pad[1:-1, 1:-1], pad[1:-1, 2:] & pad[1:-1, 1:-1])
    interior = nb[0] & nb[1] & nb[2] & nb[3]
    boundary = in_contact & ~interior

    dirs = geom.directions()
    b_dirs = dirs[boundary]
    nc_dirs = dirs[non_contact]
    chord, _ = cKDTree(b_dirs).query(nc_dirs, k=1)
    angle = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    sig = np.deg2rad(sigma)
    profile = np.exp(-0.5 * (angle / sig) ** 2)

    r_nc = r[non_contact]
    w_nc = w_omega[non_contact]

    def added(s: float) -> float:
        return float(np.sum(((r_nc + s * profile) ** 3 - r_nc**3) / 3.0 * w_nc))

    hi = 1.0
    while added(hi) < v_disp:
        hi *= 2.0
        if hi > 1e6:
            break
    s = brentq(lambda x: added(x) - v_disp, 0.0, hi, xtol=1e-12, rtol=1e-13)

    out_vals = r.copy()
    out_vals[non_contact] = r_nc + s * profile
    rel_err = abs(added(s) - v_disp) / max(v_disp, 1e-12)
    n_clamped = int(np.count_nonzero(out_vals > geom.d_max) +
                    np.count_nonzero(out_vals < geom.d_min))
    out_vals = np.clip(out_vals, geom.d_min, geom.d_max)
    meta.update({"bulge_scale_mm": s, "bulge_volume_rel_error": rel_err,
                 "bulge_clamped": n_clamped})
    return DepthMap(values=out_vals, meta=meta)
