"""Embedding queries against the field: relevancy volumes and success tests."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import UnknownLabel
from .scene import SceneObject, SceneState


def _catalog(scene_truth):
    if isinstance(scene_truth, SceneState):
        return {o.label: o.embedding for o in scene_truth.objects}
    if isinstance(scene_truth, dict):
        return scene_truth
    return {o.label: o.embedding for o in scene_truth}


def embed_query(label, scene_truth, theta=0.0, avoid=None):
    """Catalog embedding for ``label`` rotated by ``theta`` radians.

    The rotation direction is fixed per label so repeated calls agree, and is
    kept orthogonal to ``avoid`` (default: the scene background, when known)
    so the perturbation never drifts toward the table.
    """
    catalog = _catalog(scene_truth)
    if avoid is None:
        avoid = [scene_truth.background_embedding] if isinstance(scene_truth, SceneState) else []
    if label not in catalog:
        raise UnknownLabel(label)
    e = np.asarray(catalog[label], dtype=np.float64)
    e = e / np.linalg.norm(e)
    if theta == 0:
        return e
    rng = np.random.default_rng(zlib.crc32(label.encode()))
    basis = [e]
    for a in avoid:
        a = np.asarray(a, dtype=np.float64)
        for b in basis:
            a = a - (a @ b) * b
        if np.linalg.norm(a) > 1e-9:
            basis.append(a / np.linalg.norm(a))
    u = rng.standard_normal(e.shape)
    for b in basis:
        u -= (u @ b) * b
    u /= np.linalg.norm(u)
    return np.cos(theta) * e + np.sin(theta) * u


@dataclass(eq=False)
class QueryResult:
    resolution: int
    scene_box: object
    values: np.ndarray  # (R, R, R) cosine, nan where the opacity floor is not met
    argmax: np.ndarray | None
    value: float
    no_content: bool = False


def grid_points(scene_box, resolution):
    axes = [scene_box.lo[i] + (np.arange(resolution) + 0.5) * scene_box.size[i] / resolution for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass(eq=False)
class OccupiedGrid:
    """Grid points that pass the opacity floor, with unit coarse features."""

    resolution: int
    scene_box: object
    points: np.ndarray  # (R^3, 3) cell centers
    keep: np.ndarray  # indices of points above the opacity floor
    unit: np.ndarray  # (len(keep), d)


def occupied_grid(field, resolution=64, opacity_floor=0.5):
    pts = grid_points(field.scene_box, resolution)
    sigma, coarse = field.query(pts)
    spacing = float(np.mean(field.scene_box.size / resolution))
    opacity = 1.0 - np.exp(-sigma * spacing)
    norms = np.linalg.norm(coarse, axis=1)
    keep = np.flatnonzero((opacity > opacity_floor) & (norms > 1e-6))
    return OccupiedGrid(resolution, field.scene_box, pts, keep, coarse[keep] / norms[keep, None])


def relevancy_volume(field, query, resolution=64, opacity_floor=0.5, grid: OccupiedGrid | None = None):
    """Cosine relevancy of the coarse head on a regular grid.

    Only points whose local opacity ``1 - exp(-sigma * spacing)`` exceeds
    ``opacity_floor`` are scored; opacity gates the score but does not scale it.
    Pass a precomputed ``grid`` to answer many queries against one field.
    """
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    if grid is None:
        grid = occupied_grid(field, resolution, opacity_floor)
    R = grid.resolution
    rel = np.full(len(grid.points), np.nan)
    rel[grid.keep] = grid.unit @ q
    values = rel.reshape((R,) * 3)
    if len(grid.keep) == 0:
        return QueryResult(R, grid.scene_box, values, None, float("nan"), True)
    k = int(grid.keep[np.argmax(rel[grid.keep])])
    return QueryResult(R, grid.scene_box, values, grid.points[k].copy(), float(rel[k]))


def evaluate_query(result: QueryResult, obj: SceneObject, status="present", swapped_in: SceneObject | None = None,
                   inflate=0.02):
    """Success rule for one query.

    ``present``: argmax inside the object's inflated bounds.
    ``removed``: argmax outside the removed object's former inflated bounds.
    ``swapped``: (query for the swapped-out object) argmax outside the
    inflated bounds of the object swapped in at its place.
    A result with no content never lies on anything.
    """
    if status == "present":
        return bool(not result.no_content and obj.contains(result.argmax, inflate)[0])
    if result.no_content:
        return True
    if status == "removed":
        return bool(not obj.contains(result.argmax, inflate)[0])
    if status == "swapped":
        return bool(not swapped_in.contains(result.argmax, inflate)[0])
    raise ValueError(f"unknown query status {status!r}")
