"""Interior camera simulation: equidistant fisheye projection, LED ring
illumination, and pattern-textured shading of the deformed gel surface.

Conventions: the optical center sits at the origin, +z is the optical axis
pointing at the gel cap pole. Pixel coordinates are continuous with the
image center at (W/2, H/2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Equidistant fisheye: pixel radius r = f * theta."""

    width: int = 640
    height: int = 640
    fov_deg: float = 185.0

    @property
    def focal(self) -> float:
        return (min(self.height, self.width) / 2.0) / np.deg2rad(self.fov_deg / 2.0)

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def project(self, dirs: np.ndarray, check: bool = True) -> np.ndarray:
        """Unit direction(s) -> (u, v) pixel coordinates."""
        d = np.asarray(dirs, dtype=np.float64)
        single = d.ndim == 1
        d = np.atleast_2d(d)
        theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
        if check and np.any(theta > np.deg2rad(self.fov_deg / 2.0) + 1e-12):
            raise OutOfRangeError("direction outside field of view")
        phi = np.arctan2(d[:, 1], d[:, 0])
        r = self.focal * theta
        uv = np.column_stack([self.cx + r * np.cos(phi), self.cy + r * np.sin(phi)])
        return uv[0] if single else uv

    def unproject(self, px: np.ndarray, check: bool = True) -> np.ndarray:
        """(u, v) pixel coordinates -> unit direction(s)."""
        p = np.asarray(px, dtype=np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        du = p[:, 0] - self.cx
        dv = p[:, 1] - self.cy
        r = np.hypot(du, dv)
        if check and np.any(r > min(self.height, self.width) / 2.0 + 1e-9):
            raise OutOfRangeError("pixel outside image disk")
        theta = r / self.focal
        phi = np.arctan2(dv, du)
        st = np.sin(theta)
        d = np.column_stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])
        return d[0] if single else d

    def pixel_grid_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Directions for every pixel center, shape (H, W, 3), plus the
        in-disk validity mask. Out-of-disk corners get the +z axis."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        du = uu - self.cx
        dv = vv - self.cy
        r = np.hypot(du, dv)
        valid = r <= min(self.height, self.width) / 2.0
        theta = r / self.focal
        phi = np.arctan2(dv, du)
        st = np.sin(theta)
        dirs = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
        dirs[~valid] = (0.0, 0.0, 1.0)
        return dirs, valid


@dataclass
class LightRig:
    """9 point emitters on a ring, colors interleaved R,G,B at 40deg spacing.

    The mirror-coated wall is approximated by one mirrored virtual emitter per
    LED on the opposite azimuth, attenuated by mirror_gain.
    """

    ring_radius: float = 12.0  # mm
    ring_height: float = 2.0  # mm above the optical center, toward the gel
    intensity: float = 1.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mirror_gain: float = 0.5
    n_leds: int = 9

    def emitters(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (positions (N,3) mm, colors (N,3), intensities (N,))
        including mirrored virtual emitters."""
        base = np.eye(3)  # R, G, B rows
        angles = np.deg2rad(np.arange(self.n_leds) * (360.0 / self.n_leds))
        pos = np.column_stack([
            self.ring_radius * np.cos(angles),
            self.ring_radius * np.sin(angles),
            np.full_like(angles, self.ring_height),
        ])
        colors = base[np.arange(self.n_leds) % 3] * np.asarray(self.tint)
        inten = np.full(self.n_leds, self.intensity)
        if self.mirror_gain > 0:
            mirrored = pos.copy()
            mirrored[:, 0] *= -1.0
            mirrored[:, 1] *= -1.0
            pos = np.vstack([pos, mirrored])
            colors = np.vstack([colors, colors])
            inten = np.concatenate([inten, inten * self.mirror_gain])
        return pos, colors, inten


@dataclass
class SurfaceMaterial:
    """Pattern albedo texture plus simple Blinn-Phong style reflectance."""

    texture: np.ndarray | None = None  # (Ht, Wt) uint8 pattern, 255 = background
    texture_mm: float = 25.0  # side length of the texture tile in mm
    base_reflectance: tuple[float, float, float] = (0.85, 0.85, 0.85)
    ink_reflectance: float = 0.12
    specular_exponent: float = 24.0
    specular_strength: float = 0.15
    ambient: float = 0.04


def _sample_texture_albedo(mat: SurfaceMaterial, theta: np.ndarray, phi: np.ndarray,
                           r_surface: np.ndarray | float) -> np.ndarray:
    """Azimuthal-equidistant texture lookup from the cap pole, tiled.

    Arc length from the pole s = r_surface * theta maps into the square
    texture tile centered at the pole; bilinear sampling with wraparound.
    Passing the per-pixel radius makes the pattern stretch with deformation."""
    if mat.texture is None:
        return np.ones_like(theta)
    tex = mat.texture.astype(np.float64) / 255.0
    ht, wt = tex.shape
    s = r_surface * theta
    x_mm = mat.texture_mm / 2.0 + s * np.cos(phi)
    y_mm = mat.texture_mm / 2.0 + s * np.sin(phi)
    fx = x_mm / mat.texture_mm * wt - 0.5
    fy = y_mm / mat.texture_mm * ht - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax = fx - x0
    ay = fy - y0
    x0m, x1m = x0 % wt, (x0 + 1) % wt
    y0m, y1m = y0 % ht, (y0 + 1) % ht
    return ((1 - ax) * (1 - ay) * tex[y0m, x0m] + ax * (1 - ay) * tex[y0m, x1m]
            + (1 - ax) * ay * tex[y1m, x0m] + ax * ay * tex[y1m, x1m])


def shade(points: np.ndarray, normals: np.ndarray, rig: LightRig, mat: SurfaceMaterial,
          albedo_tex: np.ndarray | None = None,
          falloff: float = 2e-3) -> np.ndarray:
    """Radiance at surface points (pre-tonemap, linear).

    points (..., 3) mm, normals (..., 3) unit. albedo_tex is the texture
    factor in [0, 1] per point (1 = background); None means untextured.
    Returns (..., 3) linear RGB."""
    p = np.asarray(points, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    shp = p.shape[:-1]
    p = p.reshape(-1, 3)
    n = n.reshape(-1, 3)
    if albedo_tex is None:
        tex = np.ones(len(p))
    else:
        tex = np.asarray(albedo_tex, dtype=np.float64).reshape(-1)
    base = np.asarray(mat.base_reflectance)
    albedo = base[None, :] * (mat.ink_reflectance + (1.0 - mat.ink_reflectance) * tex)[:, None]

    pos, colors, inten = rig.emitters()
    out = np.full((len(p), 3), mat.ambient)
    view = -p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    for e in range(len(pos)):
        lvec = pos[e][None, :] - p
        dist2 = np.einsum("ij,ij->i", lvec, lvec)
        l = lvec / np.maximum(np.sqrt(dist2)[:, None], 1e-12)
        ndotl = np.maximum(0.0, np.einsum("ij,ij->i", n, l))
        atten = inten[e] / (1.0 + falloff * dist2)
        out += albedo * colors[e][None, :] * (ndotl * atten)[:, None]
        h = l + view
        h /= np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        ndoth = np.maximum(0.0, np.einsum("ij,ij->i", n, h))
        spec = mat.specular_strength * ndoth ** mat.specular_exponent * atten
        out += colors[e][None, :] * spec[:, None]
    return out.reshape(*shp, 3)


def surface_normals(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel normals from central differences of the surface point grid,
    oriented toward the camera (inward)."""
    du = np.empty_like(points)
    dv = np.empty_like(points)
    du[:, 1:-1] = points[:, 2:] - points[:, :-2]
    du[:, 0] = points[:, 1] - points[:, 0]
    du[:, -1] = points[:, -1] - points[:, -2]
    dv[1:-1, :] = points[2:, :] - points[:-2, :]
    dv[0, :] = points[1, :] - points[0, :]
    dv[-1, :] = points[-1, :] - points[-2, :]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = n / np.maximum(norm, 1e-12)
    # orient toward the origin (camera sees the inside of the cap)
    toward = -points
    flip = np.einsum("ijk,ijk->ij", n, toward) < 0
    n[flip] *= -1.0
    n[~valid] = (0.0, 0.0, -1.0)
    return n


def render_frame(depth_values: np.ndarray, cam: CameraModel, rig: LightRig,
                 mat: SurfaceMaterial, gamma: float | None = None,
                 exposure: float = 1.0) -> np.ndarray:
    """Render the interior view of a radial depth field.

    depth_values: (H, W) radial distances in mm on the camera's pixel grid.
    Returns (H, W, 3) uint8."""
    r = np.asarray(depth_values, dtype=np.float64)
    if r.shape != (cam.height, cam.width):
        raise ValueError(f"depth grid {r.shape} does not match camera "
                         f"{(cam.height, cam.width)}")
    dirs, valid = cam.pixel_grid_directions()
    points = r[..., None] * dirs
    normals = surface_normals(points, valid)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    # per-pixel radius so the pattern displaces where the gel deforms
    tex = _sample_texture_albedo(mat, theta, phi, r)
    rgb = shade(points, normals, rig, mat, albedo_tex=tex)
    rgb *= exposure
    if gamma is not None:
        rgb = np.power(np.clip(rgb, 0.0, None), 1.0 / gamma)
    rgb[~valid] = 0.0
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
