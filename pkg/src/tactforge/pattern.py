"""Randomized gel surface pattern: stippling, tour construction, rasterization.

The pattern is a single open stroke visiting a set of stipple points once.
Stippling distributes points uniformly but irregularly (centroidal Voronoi
tessellation under uniform density); the stroke makes the texture locally
unique so that deformation tracking does not alias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import cv2
import numpy as np
from numba import njit
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray  # (n, 2) float64, mm
    domain_size: float  # mm
    seed: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must be (n, 2)")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Tour:
    order: np.ndarray  # permutation of point indices
    length: float  # mm

    def is_valid_permutation(self, n: int) -> bool:
        return len(self.order) == n and np.array_equal(np.sort(self.order), np.arange(n))


@dataclass
class PatternImage:
    pixels: np.ndarray  # (H, W) uint8, 255 = background, 0 = ink
    px_per_mm: float
    stroke_width: float  # mm
    meta: dict = field(default_factory=dict)


def _voronoi_centroids(points: np.ndarray, domain: float, grid: int) -> np.ndarray:
    """Centroid of each discretized Voronoi cell under uniform density.

    Cells are approximated by assigning a dense pixel grid of sample sites to
    their nearest point. Empty cells (possible when points coincide) keep
    their current location.
    """
    step = domain / grid
    axis = (np.arange(grid) + 0.5) * step
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    samples = np.column_stack([gx.ravel(), gy.ravel()])
    _, owner = cKDTree(points).query(samples, k=1)
    n = len(points)
    counts = np.bincount(owner, minlength=n).astype(np.float64)
    sx = np.bincount(owner, weights=samples[:, 0], minlength=n)
    sy = np.bincount(owner, weights=samples[:, 1], minlength=n)
    out = points.copy()
    occupied = counts > 0
    out[occupied, 0] = sx[occupied] / counts[occupied]
    out[occupied, 1] = sy[occupied] / counts[occupied]
    return out


def stipple(n: int, domain: float, iterations: int = 30, seed: int = 0,
            grid: int | None = None) -> PointSet:
    """Place n points in [0, domain]^2 by Lloyd relaxation under uniform density."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if domain <= 0:
        raise ValueError(f"domain must be positive, got {domain}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, domain, size=(n, 2))
    if grid is None:
        # ~128 grid samples per cell keeps centroid error well below spacing
        grid = int(min(2048, max(64, np.ceil(np.sqrt(n * 128.0)))))
    for _ in range(iterations):
        pts = _voronoi_centroids(pts, domain, grid)
    eps = 1e-9 * domain
    pts = np.clip(pts, eps, domain - eps)
    return PointSet(points=pts, domain_size=float(domain), seed=int(seed))


@njit(cache=True)
def _nearest_neighbor_order(pts, start):
    n = pts.shape[0]
    order = np.empty(n, dtype=np.int64)
    visited = np.zeros(n, dtype=np.bool_)
    order[0] = start
    visited[start] = True
    cur = start
    for i in range(1, n):
        best = -1
        best_d = np.inf
        for j in range(n):
            if not visited[j]:
                dx = pts[cur, 0] - pts[j, 0]
                dy = pts[cur, 1] - pts[j, 1]
                d = dx * dx + dy * dy
                if d < best_d:
                    best_d = d
                    best = j
        order[i] = best
        visited[best] = True
        cur = best
    return order


@njit(cache=True)
def _path_length(pts, order):
    total = 0.0
    for i in range(len(order) - 1):
        dx = pts[order[i], 0] - pts[order[i + 1], 0]
        dy = pts[order[i], 1] - pts[order[i + 1], 1]
        total += np.sqrt(dx * dx + dy * dy)
    return total


@njit(cache=True)
def _two_opt(pts, order, neighbors):
    """2-opt local search on an open path, candidate moves limited to the
    neighbor lists. Reverses order[i+1..j] when it shortens the path; endpoint
    moves (prefix/suffix reversal) are included. Runs until no candidate move
    improves."""
    n = len(order)
    pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        pos[order[i]] = i
    dont_look = np.zeros(n, dtype=np.bool_)
    improved = True
    while improved:
        improved = False
        for a in range(n):
            if dont_look[a]:
                continue
            moved = False
            ia = pos[a]
            for kk in range(neighbors.shape[1]):
                b = neighbors[a, kk]
                if b < 0 or b == a:
                    continue
                ib = pos[b]
                i, j = (ia, ib) if ia < ib else (ib, ia)
                # move 1: remove edges (i,i+1),(j,j+1); add (i,j),(i+1,j+1)
                if j > i:
                    p_i = order[i]
                    p_i1 = order[i + 1]
                    p_j = order[j]
                    d_rm = np.sqrt((pts[p_i, 0] - pts[p_i1, 0]) ** 2 + (pts[p_i, 1] - pts[p_i1, 1]) ** 2)
                    d_ad = np.sqrt((pts[p_i, 0] - pts[p_j, 0]) ** 2 + (pts[p_i, 1] - pts[p_j, 1]) ** 2)
                    if j + 1 < n:
                        p_j1 = order[j + 1]
                        d_rm += np.sqrt((pts[p_j, 0] - pts[p_j1, 0]) ** 2 + (pts[p_j, 1] - pts[p_j1, 1]) ** 2)
                        d_ad += np.sqrt((pts[p_i1, 0] - pts[p_j1, 0]) ** 2 + (pts[p_i1, 1] - pts[p_j1, 1]) ** 2)
                    if d_ad < d_rm - 1e-12:
                        lo, hi = i + 1, j
                        while lo < hi:
                            order[lo], order[hi] = order[hi], order[lo]
                            pos[order[lo]] = lo
                            pos[order[hi]] = hi
                            lo += 1
                            hi -= 1
                        pos[order[lo]] = lo
                        dont_look[p_i] = dont_look[p_i1] = dont_look[p_j] = False
                        moved = True
                        improved = True
                        ia = pos[a]
                        continue
                # move 2: prefix reversal, remove (i,i+1), add (0,i+1)
                if i >= 1:
                    p_i = order[i]
                    p_i1 = order[i + 1]
                    p_0 = order[0]
                    d_rm = np.sqrt((pts[p_i, 0] - pts[p_i1, 0]) ** 2 + (pts[p_i, 1] - pts[p_i1, 1]) ** 2)
                    d_ad = np.sqrt((pts[p_0, 0] - pts[p_i1, 0]) ** 2 + (pts[p_0, 1] - pts[p_i1, 1]) ** 2)
                    if d_ad < d_rm - 1e-12:
                        lo, hi = 0, i
                        while lo < hi:
                            order[lo], order[hi] = order[hi], order[lo]
                            pos[order[lo]] = lo
                            pos[order[hi]] = hi
                            lo += 1
                            hi -= 1
                        pos[order[lo]] = lo
                        dont_look[p_i] = dont_look[p_i1] = dont_look[p_0] = False
                        moved = True
                        improved = True
                        ia = pos[a]
            if not moved:
                dont_look[a] = True
    return order


def solve_tour(ps: PointSet, seed: int = 0, k_neighbors: int = 12) -> Tour:
    """Open tour over ps: nearest-neighbor construction then 2-opt improvement."""
    pts = ps.points
    n = len(pts)
    if n < 2:
        raise ValueError(f"tour needs >= 2 points, got {n}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    order = _nearest_neighbor_order(pts, start)
    k = int(min(n - 1, k_neighbors))
    _, nbr = cKDTree(pts).query(pts, k=k + 1)
    nbr = np.asarray(nbr[:, 1:], dtype=np.int64)  # drop self
    order = _two_opt(pts, order, nbr)
    return Tour(order=order, length=float(_path_length(pts, order)))


def nearest_neighbor_tour(ps: PointSet, seed: int = 0) -> Tour:
    """Nearest-neighbor seed tour without 2-opt (baseline for dominance checks)."""
    pts = ps.points
    if len(pts) < 2:
        raise ValueError("tour needs >= 2 points")
    rng = np.random.default_rng(seed)
    order = _nearest_neighbor_order(pts, int(rng.integers(len(pts))))
    return Tour(order=order, length=float(_path_length(pts, order)))


def rasterize_tour(tour: Tour, ps: PointSet, px_per_mm: float = 20.0,
                   stroke_width: float = 0.15) -> PatternImage:
    """Anti-aliased raster of the tour polyline, ink on white background."""
    if px_per_mm <= 0:
        raise ValueError(f"px_per_mm must be positive, got {px_per_mm}")
    if stroke_width <= 0:
        raise ValueError(f"stroke_width must be positive, got {stroke_width}")
    size = int(round(ps.domain_size * px_per_mm))
    # Draw hard-edged at 4x scale, then area-downsample: the half-intensity
    # contour then sits at the true stroke width instead of the ~1 px wider
    # ramp cv2's own AA produces.
    ss = 4
    img = np.full((size * ss, size * ss), 255, dtype=np.uint8)
    pts_px = ps.points[tour.order] * px_per_mm * ss
    thickness = max(1, int(round(stroke_width * px_per_mm * ss)))
    poly = np.round(pts_px * 16).astype(np.int32)  # 4-bit subpixel precision
    if len(poly) >= 2:
        cv2.polylines(img, [poly], isClosed=False, color=0, thickness=thickness,
                      lineType=cv2.LINE_8, shift=4)
    else:
        cv2.circle(img, tuple(poly[0]), max(1, thickness // 2), 0, -1,
                   lineType=cv2.LINE_8, shift=4)
    img = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
    return PatternImage(pixels=img, px_per_mm=float(px_per_mm), stroke_width=float(stroke_width),
                        meta={"seed": ps.seed, "n": len(ps), "tour_length_mm": tour.length})


def coverage_fraction(img: PatternImage) -> float:
    """Fraction of ink pixels (value < 128)."""
    px = img.pixels
    if px.size == 0:
        raise ValueError("empty image")
    return float(np.count_nonzero(px < 128) / px.size)


def autocorrelation_peak_ratio(img: PatternImage, min_shift: int = 2) -> float:
    """Max normalized autocorrelation at any shift with |shift| >= min_shift,
    as a fraction of the zero-shift peak. Low values mean locally unique."""
    x = img.pixels.astype(np.float64)
    x -= x.mean()
    f = np.fft.rfft2(x)
    ac = np.fft.irfft2(f * np.conj(f), s=x.shape)
    peak = ac[0, 0]
    h, w = x.shape
    sy = np.minimum(np.arange(h), h - np.arange(h))[:, None]
    sx = np.minimum(np.arange(w), w - np.arange(w))[None, :]
    far = np.maximum(sy, sx) >= min_shift
    return float(np.max(np.abs(ac[far])) / peak)


def save_pattern(img: PatternImage, path: str, svg_path: str | None = None,
                 tour: Tour | None = None, ps: PointSet | None = None,
                 iterations: int | None = None) -> None:
    """Write PNG (+ optional SVG polyline) and a JSON sidecar."""
    cv2.imwrite(path, img.pixels)
    sidecar = {
        "seed": img.meta.get("seed"),
        "n": img.meta.get("n"),
        "iterations": iterations,
        "px_per_mm": img.px_per_mm,
        "stroke_width_mm": img.stroke_width,
        "coverage": coverage_fraction(img),
        "tour_length_mm": img.meta.get("tour_length_mm"),
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    if svg_path is not None:
        if tour is None or ps is None:
            raise ValueError("svg export needs tour and point set")
        pts = ps.points[tour.order]
        coords = " ".join(f"{x:.4f},{y:.4f}" for x, y in pts)
        d = ps.domain_size
        svg = (
            f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {d} {d}" '
            f'width="{d}mm" height="{d}mm">\n'
            f'<rect width="{d}" height="{d}" fill="white"/>\n'
            f'<polyline points="{coords}" fill="none" stroke="black" '
            f'stroke-width="{img.stroke_width}" stroke-linecap="round" '
            f'stroke-linejoin="round"/>\n</svg>\n'
        )
        with open(svg_path, "w") as f:
            f.write(svg)
