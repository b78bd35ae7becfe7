"""Change detection: heatmaps, components, deprojection, clustering, boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch
from .scene import NORM_EPS, CameraIntrinsics, Pose

NOISE = -1


@dataclass(eq=False)
class DifferenceHeatmap:
    values: np.ndarray  # cosine similarity per cell, or bool for the depth method
    frame_id: int | None = None
    method: str = "semantic"
    stride: int = 1

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class PixelComponent:
    pixels: np.ndarray  # (n, 2) cell coordinates (row, col)
    frame_id: int | None = None

    @property
    def size(self):
        return len(self.pixels)

    def __len__(self):
        return self.size


@dataclass(eq=False)
class ChangeRegion:
    """Box whose vertical axis is world Z, rotated by ``yaw`` about it."""

    center: np.ndarray
    yaw: float
    half_extents: np.ndarray
    count: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)

    def axes(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # rows: box axes in world

    def to_local(self, points):
        return (np.atleast_2d(points) - self.center) @ self.axes().T

    def contains(self, points, tol=0.0):
        local = self.to_local(points)
        return np.all(np.abs(local) <= self.half_extents + tol, axis=-1)

    def corners(self, inflate=0.0):
        h = self.half_extents * (1.0 + inflate)
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)
        return self.center + (signs * h) @ self.axes()

    def as_dict(self):
        return {
            "center": [float(v) for v in self.center],
            "yaw": self.yaw,
            "half_extents": [float(v) for v in self.half_extents],
            "count": int(self.count),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["yaw"], d["half_extents"], d.get("count", 0))


# ----------------------------------------------------------------------------
# heatmaps


def semantic_difference(phi_2d, phi_lerf, phi_rend, frame_id=None, additive=False, stride=1):
    """Per-cell renorm(phi_2d - (phi_lerf - phi_rend)) . phi_lerf.

    ``additive=True`` adds the shift instead of subtracting it.  Cells where
    the corrected vector or phi_lerf has norm <= 1e-6 score 1.0.
    """
    a = np.asarray(phi_2d, dtype=np.float64)
    b = np.asarray(phi_lerf, dtype=np.float64)
    c = np.asarray(phi_rend, dtype=np.float64)
    if not (a.shape == b.shape == c.shape):
        raise DimensionMismatch(f"feature grids differ: {a.shape}, {b.shape}, {c.shape}")
    shift = b - c
    corrected = a + shift if additive else a - shift
    n_corr = np.linalg.norm(corrected, axis=-1)
    n_lerf = np.linalg.norm(b, axis=-1)
    ok = (n_corr > NORM_EPS) & (n_lerf > NORM_EPS)
    dot = np.einsum("...k,...k->...", corrected, b)
    sim = np.where(ok, dot / np.where(ok, n_corr * n_lerf, 1.0), 1.0)
    return DifferenceHeatmap(np.clip(sim, -1.0, 1.0), frame_id, "semantic", stride)


def depth_difference(d_obs, d_rend, band=(0.10, 0.30), valid_range=(0.10, 1.50), frame_id=None):
    """Flag pixels whose depths both lie in range and differ by an amount in band."""
    a = np.asarray(d_obs, dtype=np.float64)
    b = np.asarray(d_rend, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"depth maps differ: {a.shape} vs {b.shape}")
    lo, hi = valid_range
    in_range = (a >= lo) & (a <= hi) & (b >= lo) & (b <= hi)
    diff = np.abs(a - b)
    return DifferenceHeatmap(in_range & (diff >= band[0]) & (diff <= band[1]), frame_id, "depth", 1)


def binarize(heatmap: DifferenceHeatmap, tau=0.9):
    """True where similarity is strictly below tau; depth heatmaps pass through."""
    if heatmap.method == "depth":
        return np.asarray(heatmap.values, dtype=bool)
    return np.asarray(heatmap.values) < tau


# ----------------------------------------------------------------------------
# connected components


def connected_components(binary, frame_id=None, connectivity=4):
    """Maximal connected sets of true cells, by iterative depth-first search.

    Components are ordered by (min row, min col) of their cells, ties broken
    by raster order of their first cell.
    """
    grid = np.asarray(binary, dtype=bool)
    H, W = grid.shape
    if connectivity == 4:
        steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    elif connectivity == 8:
        steps = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc)
    else:
        raise ValueError("connectivity must be 4 or 8")
    seen = np.zeros_like(grid)
    comps = []
    for r0, c0 in zip(*np.nonzero(grid)):
        if seen[r0, c0]:
            continue
        seen[r0, c0] = True
        stack = [(r0, c0)]
        members = []
        while stack:
            r, c = stack.pop()
            members.append((r, c))
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W and grid[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    stack.append((rr, cc))
        comps.append(PixelComponent(np.array(sorted(members), dtype=np.int64), frame_id))
    comps.sort(key=lambda comp: (comp.pixels[:, 0].min(), comp.pixels[:, 1].min(), tuple(comp.pixels[0])))
    return comps


def filter_components(components, min_pixels=30):
    return [c for c in components if c.size >= min_pixels]


# ----------------------------------------------------------------------------
# deprojection


def deproject_component(comp: PixelComponent, d_field, d_sensor, pose: Pose, K: CameraIntrinsics, stride=1):
    """World points for a component using the nearer valid of two depth maps.

    Cell (i, j) stands for pixel (i*stride, j*stride); cells with no valid
    depth in either map are skipped.
    """
    rows = comp.pixels[:, 0] * stride
    cols = comp.pixels[:, 1] * stride
    a = np.asarray(d_field, dtype=np.float64)[rows, cols]
    b = np.asarray(d_sensor, dtype=np.float64)[rows, cols]
    a = np.where(a > 0, a, np.inf)
    b = np.where(b > 0, b, np.inf)
    depth = np.minimum(a, b)
    keep = np.isfinite(depth)
    if not keep.any():
        return np.zeros((0, 3))
    cam = K.pixel_rays(rows[keep], cols[keep]) * depth[keep][:, None]
    return pose.to_world(cam)


# ----------------------------------------------------------------------------
# clustering and boxes


def dbscan(points, eps=0.05, min_pts=10):
    """Density-based clustering; returns labels with -1 for noise.

    A point is core when its closed eps-ball holds at least ``min_pts``
    points (itself included).  Clusters are grown from the lowest-index
    unvisited core point, so a border point reachable from several clusters
    joins the one discovered first.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    neighbors = tree.query_ball_point(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        frontier = [i]
        while frontier:
            j = frontier.pop()
            if not core[j]:
                continue
            for k in neighbors[j]:
                if labels[k] == NOISE:
                    labels[k] = cluster
                    frontier.append(k)
        cluster += 1
    return labels


def convex_hull(xy):
    """Counter-clockwise hull by the monotone chain; collinear points dropped."""
    pts = np.unique(np.asarray(xy, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(xy):
    """Minimum-area enclosing rectangle of 2D points.

    One side of the optimal rectangle is collinear with a hull edge, so every
    edge direction of the hull is tried.  Returns (center, yaw, half_extents)
    with yaw folded into [0, pi/2).
    """
    hull = convex_hull(xy)
    if len(hull) == 1:
        return hull[0].copy(), 0.0, np.zeros(2)
    if len(hull) == 2:
        edges = hull[1:] - hull[:1]
    else:
        edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    c, s = np.cos(angles), np.sin(angles)
    # project hull points on each candidate frame: u along the edge, v across it
    u = hull[:, 0][None, :] * c[:, None] + hull[:, 1][None, :] * s[:, None]
    v = -hull[:, 0][None, :] * s[:, None] + hull[:, 1][None, :] * c[:, None]
    area = (u.max(1) - u.min(1)) * (v.max(1) - v.min(1))
    k = int(np.argmin(area))
    uc = 0.5 * (u[k].max() + u[k].min())
    vc = 0.5 * (v[k].max() + v[k].min())
    center = np.array([uc * c[k] - vc * s[k], uc * s[k] + vc * c[k]])
    half = 0.5 * np.array([u[k].max() - u[k].min(), v[k].max() - v[k].min()])
    return center, float(angles[k]), half


def fit_region(points, min_half_extent=1e-6):
    """Z-aligned oriented box around a 3D point cluster."""
    pts = np.asarray(points, dtype=np.float64)
    center_xy, yaw, half_xy = min_area_rect(pts[:, :2])
    zlo, zhi = pts[:, 2].min(), pts[:, 2].max()
    center = np.array([center_xy[0], center_xy[1], 0.5 * (zlo + zhi)])
    half = np.maximum(np.array([half_xy[0], half_xy[1], 0.5 * (zhi - zlo)]), min_half_extent)
    return ChangeRegion(center, yaw, half, len(pts))


def cluster_and_box(points, eps=0.05, min_pts=10):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = dbscan(pts, eps, min_pts)
    return [fit_region(pts[labels == k]) for k in range(labels.max() + 1)] if len(pts) else []


# ----------------------------------------------------------------------------
# per-frame pipeline


@dataclass
class DetectorConfig:
    method: str = "semantic"  # or "depth"
    tau: float = 0.9
    additive_renorm: bool = False
    depth_band: tuple = (0.10, 0.30)
    depth_range: tuple = (0.10, 1.50)
    connectivity: int = 4
    min_pixels: int = 30
    eps: float = 0.05
    min_pts: int = 10
    batch_size: int = 15

    def __post_init__(self):
        if self.method not in ("semantic", "depth"):
            raise ValueError(f"unknown detection method {self.method!r}")
        self.depth_band = tuple(self.depth_band)
        self.depth_range = tuple(self.depth_range)


def frame_heatmap(obs, rendered, config: DetectorConfig):
    """Heatmap for one observation given ``rendered`` = (depth, fine, coarse, phi_rend)."""
    d_field, _, coarse, phi_rend = rendered
    if config.method == "depth":
        return depth_difference(obs.depth, d_field, config.depth_band, config.depth_range, obs.frame_id)
    s = obs.stride
    return semantic_difference(obs.feature_map, coarse[::s, ::s], phi_rend, obs.frame_id,
                               config.additive_renorm, s)


def frame_points(obs, rendered, config: DetectorConfig, trace=None):
    """Changed-region points contributed by one observation.

    ``trace``, when given, is a list that receives one record per stage so
    callers can confirm both methods run the same downstream steps.
    """
    def mark(stage, value):
        if trace is not None:
            trace.append((stage, heat.method))
        return value

    heat = frame_heatmap(obs, rendered, config)
    mark("heatmap", heat)
    binary = mark("binarize", binarize(heat, config.tau))
    comps = mark("connected_components", connected_components(binary, obs.frame_id, config.connectivity))
    comps = mark("filter_components", filter_components(comps, config.min_pixels))
    pts = [deproject_component(c, rendered[0], obs.depth, obs.pose, obs.intrinsics, heat.stride) for c in comps]
    mark("deproject_component", pts)
    return np.concatenate(pts) if pts else np.zeros((0, 3)), heat, comps


class BatchAccumulator:
    """Collects points from up to ``batch_size`` frames, then clusters them."""

    def __init__(self, config: DetectorConfig, trace=None):
        self.config = config
        self.trace = trace
        self.points = []
        self.n_frames = 0

    def add(self, points):
        self.points.append(np.asarray(points).reshape(-1, 3))
        self.n_frames += 1
        return self.n_frames >= self.config.batch_size

    def flush(self):
        pts = np.concatenate(self.points) if self.points else np.zeros((0, 3))
        self.points, self.n_frames = [], 0
        if self.trace is not None:
            self.trace.append(("cluster_and_box", self.config.method))
        return cluster_and_box(pts, self.config.eps, self.config.min_pts)
