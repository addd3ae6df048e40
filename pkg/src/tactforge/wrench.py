"""Synthetic 6-axis wrench labels from the contact deformation field.

An elastic (Winkler) foundation: each surface direction acts as an
independent spring, so traction is proportional to local penetration.
Integrating traction over the contact patch yields force and torque at the
optical center. Forces in N, torques in N mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gelsim import DepthMap, SensorGeometry

# Tuned so a 2 mm central indentation of a 10 mm-radius sphere gives
# Fz ~ -5 N (middle of the published Fz range) on the default geometry.
DEFAULT_STIFFNESS = 6.26e-2  # N/mm^3

DEFAULT_FZ_RANGE = (-11.0, 3.0)  # N


@dataclass(frozen=True)
class FoundationParams:
    k: float = DEFAULT_STIFFNESS  # normal stiffness N/mm^3
    mu: float = 0.0  # tangential traction ratio
    tangential_dir: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("stiffness k must be positive")
        if not 0.0 <= self.mu <= 1.5:
            raise ValueError("mu must be in [0, 1.5]")


@dataclass(frozen=True)
class Wrench:
    force: tuple[float, float, float]  # N
    torque: tuple[float, float, float]  # N mm

    def as_array(self) -> np.ndarray:
        return np.array([*self.force, *self.torque], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Wrench":
        a = np.asarray(a, dtype=np.float64)
        return Wrench(force=(a[0], a[1], a[2]), torque=(a[3], a[4], a[5]))


AXES = ("Fx", "Fy", "Fz", "Tx", "Ty", "Tz")


@dataclass(frozen=True)
class WrenchRanges:
    """Per-axis (min, max) used for normalization; order Fx,Fy,Fz,Tx,Ty,Tz."""
    ranges: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.ranges) != 6:
            raise ValueError("need 6 axis ranges")
        for lo, hi in self.ranges:
            if not lo < hi:
                raise ValueError(f"invalid range ({lo}, {hi})")

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(self.ranges, dtype=np.float64)
        return r[:, 0], r[:, 1]

    def to_json(self) -> dict:
        return {a: list(r) for a, r in zip(AXES, self.ranges)}

    @staticmethod
    def from_json(d: dict) -> "WrenchRanges":
        return WrenchRanges(tuple(tuple(d[a]) for a in AXES))

    @staticmethod
    def from_samples(samples, pad: float = 0.05) -> "WrenchRanges":
        """Empirical per-axis ranges over observed wrenches, padded so the
        extremes do not sit exactly at 0/1."""
        arr = np.asarray([s.as_array() if isinstance(s, Wrench) else s for s in samples],
                         dtype=np.float64)
        lo = arr.min(axis=0)
        hi = arr.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
        lo = lo - pad * span
        hi = hi + pad * span
        return WrenchRanges(tuple((float(a), float(b)) for a, b in zip(lo, hi)))


def compute_wrench(contact: DepthMap, geom: SensorGeometry,
                   params: FoundationParams = FoundationParams()) -> Wrench:
    """Integrate foundation tractions over the contact patch.

    Uses the pre-bulge contact map: penetration delta = r_nominal - r where
    the indenter blocks the ray; traction -k delta n_hat plus an optional
    Coulomb-like tangential term mu k delta t_hat."""
    r = contact.values
    mask = geom.valid_mask() & (r < geom.r_nominal - 1e-12)
    if not np.any(mask):
        return Wrench(force=(0.0, 0.0, 0.0), torque=(0.0, 0.0, 0.0))
    dirs = geom.directions()[mask]
    delta = (geom.r_nominal - r[mask])
    dA = geom.solid_angles()[mask] * geom.r_nominal**2

    traction = -params.k * delta[:, None] * dirs
    if params.mu > 0.0 and params.tangential_dir is not None:
        td = np.asarray(params.tangential_dir, dtype=np.float64)
        td = td / np.linalg.norm(td)
        tan = td[None, :] - (dirs @ td)[:, None] * dirs
        norm = np.linalg.norm(tan, axis=1, keepdims=True)
        tan = np.divide(tan, norm, out=np.zeros_like(tan), where=norm > 1e-12)
        traction = traction + params.mu * params.k * delta[:, None] * tan

    points = r[mask][:, None] * dirs
    force = np.sum(traction * dA[:, None], axis=0)
    torque = np.sum(np.cross(points, traction) * dA[:, None], axis=0)
    return Wrench(force=tuple(force), torque=tuple(torque))


def normalize(w: Wrench, ranges: WrenchRanges) -> tuple[np.ndarray, int]:
    """Per-axis affine map to [0, 1]; returns (vector, clamp count)."""
    lo, hi = ranges.as_arrays()
    x = (w.as_array() - lo) / (hi - lo)
    n_sat = int(np.count_nonzero((x < 0) | (x > 1)))
    return np.clip(x, 0.0, 1.0), n_sat


def denormalize(x, ranges: WrenchRanges) -> Wrench:
    lo, hi = ranges.as_arrays()
    return Wrench.from_array(lo + np.asarray(x, dtype=np.float64) * (hi - lo))
