"""Synthetic tabletop world, camera trajectories and the RGBD + semantic sensor model.

The sensor returns exact ray-cast depth (z-depth, OpenCV camera convention:
x right, y down, z forward), a per-pixel semantic image holding the unit
embedding of whatever the pixel ray hits first, and an encoder feature map
that mimics a large-receptive-field image encoder: a sliding-window mean of
the semantic image followed by renormalization.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .errors import InvalidScene, OverlappingObjects, TooFewFrames, UnknownObject

DEFAULT_SCALE = 0.25
NORM_EPS = 1e-6
MAX_OBJECTS = 16


def renormalize(vectors, eps=NORM_EPS):
    """Normalize along the last axis; vectors with norm <= eps become zero."""
    v = np.asarray(vectors, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n > eps
    return np.where(ok, v / np.where(ok, n, 1.0), 0.0)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform taking camera-frame points to the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise ValueError("viewing direction is parallel to the up vector")
        right /= n
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        # re-orthonormalize so the 1e-9 invariant holds after float roundoff
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)

    @property
    def center(self):
        return self.translation

    def to_world(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_camera(self, points):
        return (np.asarray(points) - self.translation) @ self.rotation

    def as_array(self):
        """12 floats: rotation row-major then translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])

    def allclose(self, other, atol=1e-12):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 80.0
    fy: float = 80.0
    cx: float = 39.5
    cy: float = 29.5
    width: int = 80
    height: int = 60

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self):
        return (self.height, self.width)

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        fx, fy, cx, cy, w, h = (float(v) for v in values)
        return cls(fx, fy, cx, cy, int(w), int(h))

    def pixel_rays(self, rows=None, cols=None):
        """Camera-frame ray directions with unit z for the given pixel centers.

        Pixel (u, v) = (col, row) sits at integer coordinates.  Defaults to the
        full image, shape (H, W, 3).
        """
        if rows is None:
            rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        return np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(rows)], axis=-1
        )


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    label: str
    shape: str  # "box" or "sphere"
    center: np.ndarray
    size: np.ndarray  # half-extents (3,) for boxes, radius (1,) for spheres
    embedding: np.ndarray

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise InvalidScene(f"unknown shape {self.shape!r}")
        center = np.array(self.center, dtype=np.float64).reshape(3)
        size = np.atleast_1d(np.array(self.size, dtype=np.float64))
        if size.shape != ((3,) if self.shape == "box" else (1,)):
            raise InvalidScene(f"object {self.id}: bad size {size}")
        if np.any(size <= 0):
            raise InvalidScene(f"object {self.id}: extents must be positive")
        emb = np.array(self.embedding, dtype=np.float64).ravel()
        if abs(np.linalg.norm(emb) - 1.0) > 1e-9:
            raise InvalidScene(f"object {self.id}: embedding must be unit norm")
        for a in (center, size, emb):
            a.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "embedding", emb)

    @property
    def half_extents(self):
        return self.size if self.shape == "box" else np.repeat(self.size, 3)

    def bounds(self, inflate=0.0):
        h = self.half_extents + inflate
        return self.center - h, self.center + h

    def contains(self, points, inflate=0.0):
        lo, hi = self.bounds(inflate)
        p = np.atleast_2d(points)
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class SceneState:
    objects: tuple
    background_embedding: np.ndarray
    period: int = 0
    table_half_extent: float = 0.6

    @property
    def feature_dim(self):
        return self.background_embedding.shape[0]

    def ids(self):
        return [o.id for o in self.objects]

    def get(self, object_id):
        for o in self.objects:
            if o.id == object_id:
                return o
        raise UnknownObject(object_id)

    def by_label(self, label):
        for o in self.objects:
            if o.label == label:
                return o
        return None


@dataclass(frozen=True)
class ChangeSpec:
    kind: str  # NoChange | Removal | Addition | Swap
    removed: tuple = ()
    added: tuple = ()

    KINDS = ("NoChange", "Removal", "Addition", "Swap")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown change kind {self.kind!r}")
        if self.kind == "NoChange" and (self.removed or self.added):
            raise ValueError("NoChange touches nothing")
        if self.kind == "Removal" and self.added:
            raise ValueError("Removal adds nothing")
        if self.kind == "Addition" and self.removed:
            raise ValueError("Addition removes nothing")
        if self.kind == "Swap" and len(self.removed) != len(self.added):
            raise ValueError("Swap pairs each removed id with one added object")

    @property
    def tier(self):
        return max(len(self.removed), len(self.added))

    @classmethod
    def no_change(cls):
        return cls("NoChange")

    @classmethod
    def removal(cls, ids):
        return cls("Removal", removed=tuple(int(i) for i in ids))

    @classmethod
    def addition(cls, objects):
        return cls("Addition", added=tuple(objects))

    @classmethod
    def swap(cls, pairs):
        pairs = list(pairs)
        return cls("Swap", removed=tuple(int(i) for i, _ in pairs), added=tuple(o for _, o in pairs))


@dataclass(eq=False)
class Observation:
    """One posed capture.  ``pose`` is the pose the mapper is told about."""

    frame_id: int
    period: int
    pose: Pose
    intrinsics: CameraIntrinsics
    depth: np.ndarray  # (H, W) float32 z-depth, 0 = no return
    semantic: np.ndarray  # (H, W, d) float32
    feature_map: np.ndarray | None  # (H', W', d) float32
    mask: np.ndarray = None  # (H, W) bool, True = stale
    scale: float = DEFAULT_SCALE
    stride: int = 1

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros(self.depth.shape, dtype=bool)

    @property
    def shape(self):
        return self.depth.shape


# ----------------------------------------------------------------------------
# scene construction


def draw_embeddings(n, dim, rng, max_coherence=None, orthogonal_to=None, max_tries=10000):
    """Draw n unit vectors; optionally bound pairwise |cos| and project out a vector."""
    out = []
    for _ in range(n):
        for _ in range(max_tries):
            v = rng.standard_normal(dim)
            if orthogonal_to is not None:
                v -= (v @ orthogonal_to) * orthogonal_to
            v /= np.linalg.norm(v)
            if max_coherence is None or all(abs(v @ u) <= max_coherence for u in out):
                out.append(v)
                break
        else:
            raise InvalidScene("could not satisfy the embedding coherence bound")
    return out


def _objects_overlap(a: SceneObject, b: SceneObject):
    if a.shape == "sphere" and b.shape == "sphere":
        return np.linalg.norm(a.center - b.center) < a.size[0] + b.size[0]
    if a.shape == "box" and b.shape == "box":
        return bool(np.all(np.abs(a.center - b.center) < a.size + b.size))
    box, sph = (a, b) if a.shape == "box" else (b, a)
    closest = np.clip(sph.center, box.center - box.size, box.center + box.size)
    return np.linalg.norm(closest - sph.center) < sph.size[0]


def _validate_objects(objects, table_half_extent):
    if len(objects) > MAX_OBJECTS:
        raise InvalidScene(f"at most {MAX_OBJECTS} objects")
    ids = [o.id for o in objects]
    if len(set(ids)) != len(ids):
        raise InvalidScene("object ids must be unique")
    for o in objects:
        lo, hi = o.bounds()
        if lo[2] < -1e-9:
            raise InvalidScene(f"object {o.id} sinks below the table")
        if np.any(np.abs(lo[:2]) > table_half_extent + 1e-9) or np.any(np.abs(hi[:2]) > table_half_extent + 1e-9):
            raise InvalidScene(f"object {o.id} leaves the table")
    for i, a in enumerate(objects):
        for b in objects[i + 1 :]:
            if _objects_overlap(a, b):
                raise OverlappingObjects(a.id, b.id)


def build_scene(spec: Mapping | None = None) -> SceneState:
    """Build a SceneState from a scene description mapping.

    Recognised keys: ``seed``, ``feature_dim``, ``table_half_extent``,
    ``max_coherence``, ``background_embedding`` and ``objects`` (each with
    ``label``, ``shape``, ``center``, ``half_extents`` or ``radius`` and
    optional ``id`` / ``embedding``).
    """
    spec = dict(spec or {})
    rng = np.random.default_rng(spec.get("seed", 0))
    dim = int(spec.get("feature_dim", 8))
    table = float(spec.get("table_half_extent", 0.6))
    entries = list(spec.get("objects", []))
    if len(entries) > MAX_OBJECTS:
        raise InvalidScene(f"at most {MAX_OBJECTS} objects")

    if spec.get("background_embedding") is not None:
        bg = renormalize(spec["background_embedding"])
    else:
        bg = draw_embeddings(1, dim, rng)[0]
    n_random = sum(1 for e in entries if e.get("embedding") is None)
    drawn = iter(draw_embeddings(n_random, dim, rng, spec.get("max_coherence")))

    objects = []
    for i, e in enumerate(entries):
        shape = e.get("shape", "box")
        size = e["radius"] if shape == "sphere" else e["half_extents"]
        emb = renormalize(e["embedding"]) if e.get("embedding") is not None else next(drawn)
        objects.append(
            SceneObject(int(e.get("id", i)), str(e.get("label", f"object{i}")), shape, e["center"], size, emb)
        )
    _validate_objects(objects, table)
    return SceneState(tuple(objects), bg, 0, table)


def load_scene_spec(path):
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def apply_change(scene: SceneState, change: ChangeSpec) -> SceneState:
    present = {o.id: o for o in scene.objects}
    for oid in change.removed:
        if oid not in present:
            raise UnknownObject(oid)
    if change.kind == "Swap":
        for oid, new in zip(change.removed, change.added):
            if np.abs(present[oid].center[:2] - new.center[:2]).max() > 1e-9:
                raise InvalidScene(f"swap for {oid} must keep the object location")
    kept = [o for o in scene.objects if o.id not in set(change.removed)]
    objects = kept + list(change.added)
    _validate_objects(objects, scene.table_half_extent)
    return SceneState(tuple(objects), scene.background_embedding, scene.period + 1, scene.table_half_extent)


# ----------------------------------------------------------------------------
# trajectories and pose noise


def generate_trajectory(
    scene: SceneState,
    n_frames: int,
    radius=0.75,
    height=0.55,
    target_height=0.05,
    phase=0.0,
    heading_offset=0.0,
    min_frames=8,
):
    """Poses evenly spaced on a circle around the table center, looking at it.

    ``heading_offset`` yaws each camera about world Z away from the look-at
    direction; zero keeps the pure look-at geometry.
    """
    if n_frames < min_frames:
        raise TooFewFrames(f"need at least {min_frames} frames, got {n_frames}")
    target = np.array([0.0, 0.0, target_height])
    poses = []
    for k in range(n_frames):
        theta = phase + 2.0 * np.pi * k / n_frames
        eye = np.array([radius * np.cos(theta), radius * np.sin(theta), height])
        pose = Pose.look_at(eye, target)
        if heading_offset:
            yaw = Rotation.from_rotvec([0.0, 0.0, heading_offset]).as_matrix()
            pose = Pose(yaw @ pose.rotation, eye)
        poses.append(pose)
    return poses


def perturb_pose(pose: Pose, sigma_rot, sigma_trans, rng) -> Pose:
    if sigma_rot < 0 or sigma_trans < 0:
        raise ValueError("noise scales must be non-negative")
    if sigma_rot == 0 and sigma_trans == 0:
        return pose
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, sigma_rot)) if sigma_rot > 0 else 0.0
    noise = Rotation.from_rotvec(axis * angle).as_matrix()
    R = pose.rotation @ noise
    u, _, vt = np.linalg.svd(R)
    t = pose.translation + (rng.normal(0.0, sigma_trans, 3) if sigma_trans > 0 else 0.0)
    return Pose(u @ vt, t)


# ----------------------------------------------------------------------------
# sensor model


def cast_rays(scene: SceneState, origin, directions):
    """Exact first-hit ray casting.

    ``directions`` need not be unit length; the returned parameter ``s`` is in
    units of the direction vector, so camera rays with unit z give z-depth.
    Returns (s, hit) where hit is the object index, -1 for the table and -2
    for a miss (s = 0).
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = d.shape[0]
    best = np.full(n, np.inf)
    hit = np.full(n, -2, dtype=np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        s = -o[2] / d[:, 2]
        p = o + s[:, None] * d
        ok = (d[:, 2] < 0) & (s > 0) & np.all(np.abs(p[:, :2]) <= scene.table_half_extent, axis=1)
        best = np.where(ok, s, best)
        hit[ok] = -1

        for idx, obj in enumerate(scene.objects):
            if obj.shape == "box":
                lo, hi = obj.bounds()
                t1 = (lo - o) / d
                t2 = (hi - o) / d
                tmin = np.nanmax(np.minimum(t1, t2), axis=1)
                tmax = np.nanmin(np.maximum(t1, t2), axis=1)
                s = tmin
                ok = (tmax >= tmin) & (tmin > 0)
            else:
                oc = o - obj.center
                a = np.einsum("ij,ij->i", d, d)
                b = 2.0 * d @ oc
                c = oc @ oc - obj.size[0] ** 2
                disc = b * b - 4 * a * c
                s = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
                ok = (disc >= 0) & (s > 0)
            closer = ok & (s < best)
            best = np.where(closer, s, best)
            hit[closer] = idx
    best[hit == -2] = 0.0
    return best, hit


def _window_size(scale, height, width):
    return max(1, int(np.floor(scale * min(height, width) + 0.5)))


def encoder_geometry(height, width, scale=DEFAULT_SCALE, stride=1):
    """Window size and the (rows, cols) of the pixel each output cell is centered on."""
    w = _window_size(scale, height, width)
    return w, np.arange(0, height, stride), np.arange(0, width, stride)


def window_encode(image, scale=DEFAULT_SCALE, stride=1):
    """Sliding-window mean of a (H, W, d) vector image, then renormalization.

    Each output cell is centered on pixel (i*stride, j*stride); the w x w
    window is clipped to the image and averaged over its in-bounds pixels.
    Windows whose mean has norm <= 1e-6 encode to zero.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W, d = img.shape
    w, rows, cols = encoder_geometry(H, W, scale, stride)
    integral = np.zeros((H + 1, W + 1, d))
    integral[1:, 1:] = img.cumsum(0).cumsum(1)
    r0 = np.clip(rows - w // 2, 0, H)
    r1 = np.clip(rows - w // 2 + w, 0, H)
    c0 = np.clip(cols - w // 2, 0, W)
    c1 = np.clip(cols - w // 2 + w, 0, W)
    sums = (
        integral[r1][:, c1]
        - integral[r0][:, c1]
        - integral[r1][:, c0]
        + integral[r0][:, c0]
    )
    counts = ((r1 - r0)[:, None] * (c1 - c0)[None, :])[..., None]
    return renormalize(sums / counts)


def render_observation(
    scene: SceneState,
    pose: Pose,
    K: CameraIntrinsics,
    scale=DEFAULT_SCALE,
    frame_id=0,
    recorded_pose: Pose | None = None,
    stride=1,
) -> Observation:
    """Capture depth, semantics and encoder features from ``pose``.

    ``recorded_pose`` is the (possibly drifted) pose attached to the
    observation; it defaults to the true capture pose.
    """
    if not 0 < scale <= 1:
        raise ValueError("scale must lie in (0, 1]")
    dirs = K.pixel_rays() @ pose.rotation.T
    s, hit = cast_rays(scene, pose.translation, dirs.reshape(-1, 3))
    table = np.vstack([o.embedding for o in scene.objects] + [scene.background_embedding])
    # hit -1 (table) and -2 (miss) both map to the background row
    semantic = table[np.where(hit >= 0, hit, len(scene.objects))]
    semantic = semantic.reshape(K.height, K.width, -1)
    return Observation(
        frame_id=frame_id,
        period=scene.period,
        pose=recorded_pose if recorded_pose is not None else pose,
        intrinsics=K,
        depth=s.reshape(K.height, K.width).astype(np.float32),
        semantic=semantic.astype(np.float32),
        feature_map=window_encode(semantic, scale, stride).astype(np.float32),
        scale=scale,
        stride=stride,
    )
