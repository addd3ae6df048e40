"""Dataset construction and management: PSNR duplicate filtering with a
5-deep ring buffer, frame/depth/manifest file layout, and held-out-indenter
train/test splitting.
"""

from __future__ import annotations

import collections
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np

from . import gelsim, optics, pattern as pattern_mod, wrench as wrench_mod

PSNR_CAP_DB = 99.0
PSNR_FULL_SCALE_DB = 50.0
RING_BUFFER_DEPTH = 5


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit images; identical pairs cap."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return cap_db
    return min(cap_db, 10.0 * np.log10(255.0**2 / mse))


def similarity(a: np.ndarray, b: np.ndarray,
               full_scale_db: float = PSNR_FULL_SCALE_DB,
               cap_db: float = PSNR_CAP_DB) -> float:
    """PSNR normalized to [0, 1] with full_scale_db mapping to 1.0, so a 0.9
    duplicate threshold corresponds to 45 dB."""
    return float(np.clip(psnr(a, b, cap_db) / full_scale_db, 0.0, 1.0))


class RingBuffer:
    """FIFO of the most recent kept frames, capacity 5."""

    def __init__(self, capacity: int = RING_BUFFER_DEPTH):
        self.frames: collections.deque = collections.deque(maxlen=capacity)

    def is_duplicate(self, frame: np.ndarray, threshold: float) -> bool:
        return any(similarity(frame, prev) >= threshold for prev in self.frames)

    def push(self, frame: np.ndarray) -> None:
        self.frames.append(frame)


def filter_stream(frames, threshold: float = 0.9):
    """Keep a frame iff its similarity to every buffered predecessor is below
    the threshold; kept frames enter the buffer. Yields (index, frame)."""
    buf = RingBuffer()
    for i, frame in enumerate(frames):
        if not buf.is_duplicate(frame, threshold):
            buf.push(frame)
            yield i, frame


# ---------------------------------------------------------------- manifests

@dataclass
class FrameRecord:
    record_id: str
    image: str  # path relative to the dataset root
    depth: str | None = None
    wrench: list | None = None  # raw values, units N / N mm
    sensor_id: str = ""
    indenter_id: str = ""
    step: int = 0
    pose: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class Manifest:
    root: str
    records: list[FrameRecord]
    codec: dict
    wrench_ranges: dict | None = None
    units: dict = field(default_factory=lambda: {"force": "N", "torque": "N*mm"})
    split: str = "all"
    sensor_id: str = ""
    reference_image: str | None = None  # undeflected frame for 6-channel input
    extra: dict = field(default_factory=dict)

    def save(self, path=None) -> str:
        path = path or os.path.join(self.root, "manifest.jsonl")
        header = {
            "kind": "tactforge-manifest",
            "codec": self.codec,
            "wrench_ranges": self.wrench_ranges,
            "units": self.units,
            "split": self.split,
            "sensor_id": self.sensor_id,
            "reference_image": self.reference_image,
            "extra": self.extra,
            "count": len(self.records),
        }
        with open(path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        return path

    @staticmethod
    def load(path) -> "Manifest":
        path = str(path)
        with open(path) as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
        header = json.loads(lines[0])
        records = [FrameRecord(**json.loads(ln)) for ln in lines[1:]]
        ids = [r.record_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids in manifest")
        return Manifest(root=os.path.dirname(path), records=records,
                        codec=header["codec"], wrench_ranges=header.get("wrench_ranges"),
                        units=header.get("units", {}), split=header.get("split", "all"),
                        sensor_id=header.get("sensor_id", ""),
                        reference_image=header.get("reference_image"),
                        extra=header.get("extra", {}))


def split(manifest: Manifest, held_out_indenters) -> tuple[Manifest, Manifest]:
    """Exact disjoint partition: test = records of the held-out indenters."""
    held = set(held_out_indenters)
    known = {r.indenter_id for r in manifest.records}
    unknown = held - known
    if unknown:
        raise ValueError(f"unknown indenter ids: {sorted(unknown)}")
    test = [r for r in manifest.records if r.indenter_id in held]
    train = [r for r in manifest.records if r.indenter_id not in held]
    mk = lambda recs, tag: Manifest(
        root=manifest.root, records=recs, codec=manifest.codec,
        wrench_ranges=manifest.wrench_ranges, units=manifest.units, split=tag,
        sensor_id=manifest.sensor_id, reference_image=manifest.reference_image,
        extra=manifest.extra)
    return mk(train, "train"), mk(test, "test")


# ---------------------------------------------------------------- generation

@dataclass
class SensorConfig:
    """Everything that makes one simulated sensor unit distinct."""
    sensor_id: str = "sim0"
    resolution: int = 64
    pattern_seed: int = 0
    pattern_n: int = 2048
    pattern_iterations: int = 20
    stiffness: float = wrench_mod.DEFAULT_STIFFNESS
    mu: float = 0.2
    led_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def geometry(self) -> gelsim.SensorGeometry:
        return gelsim.SensorGeometry(resolution=self.resolution)

    def rig(self) -> optics.LightRig:
        return optics.LightRig(tint=tuple(self.led_tint))

    def material(self) -> optics.SurfaceMaterial:
        ps = pattern_mod.stipple(self.pattern_n, 25.0,
                                 iterations=self.pattern_iterations,
                                 seed=self.pattern_seed)
        tour = pattern_mod.solve_tour(ps, seed=self.pattern_seed)
        img = pattern_mod.rasterize_tour(tour, ps, px_per_mm=20.0, stroke_width=0.3)
        return optics.SurfaceMaterial(texture=img.pixels)


@dataclass
class DatasetPlan:
    """Simulation plan: which indenters, how many rotation/press steps."""
    sensor: SensorConfig = field(default_factory=SensorConfig)
    indenters: list[dict] = field(default_factory=list)
    steps: int = 20
    press_min_mm: float = 0.5
    press_max_mm: float = 2.5
    polar_max_deg: float = 30.0
    bulge_sigma_deg: float = 20.0
    filter_threshold: float = 0.9

    @staticmethod
    def default(n_indenters: int = 21, steps: int = 20,
                sensor: SensorConfig | None = None) -> "DatasetPlan":
        """Sphere indenters of graded radii, mirroring the multi-indenter
        collection protocol at desk scale."""
        radii = np.linspace(3.0, 12.0, n_indenters)
        indenters = [{"id": f"sphere_r{r:.2f}", "type": "sphere", "radius": float(r)}
                     for r in radii]
        return DatasetPlan(sensor=sensor or SensorConfig(),
                           indenters=indenters, steps=steps)


def _indenter_shape(spec: dict, press_dir: np.ndarray, press_mm: float,
                    geom: gelsim.SensorGeometry):
    if spec["type"] == "sphere":
        radius = float(spec["radius"])
        center = press_dir * (geom.r_nominal + radius - press_mm)
        return gelsim.SphereIndenter(center=tuple(center), radius=radius)
    if spec["type"] == "icosphere":
        radius = float(spec["radius"])
        center = press_dir * (geom.r_nominal + radius - press_mm)
        return gelsim.icosphere(radius, center, subdivisions=int(spec.get("subdivisions", 3)))
    if spec["type"] == "plane":
        return gelsim.PlaneIndenter(normal=tuple(press_dir),
                                    offset=float(geom.r_nominal - press_mm))
    if spec["type"] == "stl":
        mesh = gelsim.load_stl(spec["path"])
        rot, trans = gelsim.load_pose(spec["pose"]) if "pose" in spec else (np.eye(3), np.zeros(3))
        return mesh.transformed(rot, trans)
    raise ValueError(f"unknown indenter type {spec['type']!r}")


def build_dataset(plan: DatasetPlan, out_dir, seed: int = 0) -> Manifest:
    """Render frames, depth maps, and wrench labels for the whole plan,
    filter near-duplicates in sequence order, and write the manifest."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)

    sensor = plan.sensor
    geom = sensor.geometry()
    cam = geom.camera
    rig = sensor.rig()
    mat = sensor.material()
    codec = gelsim.DepthCodec()
    rng = np.random.default_rng(seed)

    ref_frame = optics.render_frame(gelsim.undeformed(geom).values, cam, rig, mat)
    cv2.imwrite(str(out / "reference.png"), ref_frame[..., ::-1])

    candidates = []
    for spec in plan.indenters:
        for step in range(plan.steps):
            azim = rng.uniform(0.0, 2 * np.pi)
            polar = np.deg2rad(rng.uniform(0.0, plan.polar_max_deg))
            press = rng.uniform(plan.press_min_mm, plan.press_max_mm)
            press_dir = np.array([np.sin(polar) * np.cos(azim),
                                  np.sin(polar) * np.sin(azim),
                                  np.cos(polar)])
            shape = _indenter_shape(spec, press_dir, press, geom)
            contact = gelsim.raycast_indent(geom, shape)
            # sliding direction follows the press azimuth so every wrench
            # axis sees variation across the dataset
            params = wrench_mod.FoundationParams(
                k=sensor.stiffness, mu=sensor.mu,
                tangential_dir=(float(np.cos(azim)), float(np.sin(azim)), 0.0))
            wr = wrench_mod.compute_wrench(contact, geom, params)
            surface = gelsim.apply_bulge(contact, geom, sigma=plan.bulge_sigma_deg)
            frame = optics.render_frame(surface.values, cam, rig, mat)
            pose = {"azimuth_rad": float(azim), "polar_rad": float(polar),
                    "press_mm": float(press)}
            candidates.append((spec["id"], step, pose, frame, surface, wr))

    kept_idx = {i for i, _ in filter_stream((c[3] for c in candidates),
                                            threshold=plan.filter_threshold)}
    records = []
    wrenches = []
    for i, (ind_id, step, pose, frame, surface, wr) in enumerate(candidates):
        if i not in kept_idx:
            continue
        rid = f"{ind_id}_{step:04d}"
        img_rel = f"frames/{rid}.png"
        depth_rel = f"depth/{rid}.png"
        cv2.imwrite(str(out / img_rel), frame[..., ::-1])
        cv2.imwrite(str(out / depth_rel), codec.encode(surface.values))
        records.append(FrameRecord(record_id=rid, image=img_rel, depth=depth_rel,
                                   wrench=[float(v) for v in wr.as_array()],
                                   sensor_id=sensor.sensor_id, indenter_id=ind_id,
                                   step=step, pose=pose, seed=seed))
        wrenches.append(wr)

    ranges = None
    if wrenches:
        default_fz = wrench_mod.DEFAULT_FZ_RANGE
        r = wrench_mod.WrenchRanges.from_samples(wrenches)
        # Fz keeps the published range; other axes stay empirical per dataset
        fixed = list(r.ranges)
        fixed[2] = default_fz
        ranges = wrench_mod.WrenchRanges(tuple(fixed)).to_json()

    manifest = Manifest(root=str(out), records=records, codec=codec.sidecar(),
                        wrench_ranges=ranges, sensor_id=sensor.sensor_id,
                        reference_image="reference.png",
                        extra={"seed": seed, "plan_steps": plan.steps,
                               "n_indenters": len(plan.indenters),
                               "filter_threshold": plan.filter_threshold})
    try:
        manifest.save()
    except OSError:
        # do not leave a half-written manifest next to good frames
        mpath = out / "manifest.jsonl"
        if mpath.exists():
            mpath.unlink()
        raise
    return manifest


def load_image(manifest: Manifest, rel_path: str) -> np.ndarray:
    img = cv2.imread(os.path.join(manifest.root, rel_path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(rel_path)
    if img.ndim == 3:
        img = img[..., ::-1]  # BGR -> RGB
    return img
