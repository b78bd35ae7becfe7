"""Trainable multi-resolution voxel feature field.

One shared density and two feature heads: ``fine`` is supervised with the
per-pixel semantic image, ``coarse`` with the window-encoder feature map.
Training streams frames in, samples rays uniformly over unmasked pixels and
takes analytic-gradient steps through compositing and trilinear reads.
"""

from __future__ import annotations

import concurrent.futures
import copy
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import AllPixelsMasked, Diverged, DuplicateFrame, InsufficientPoses
from .scene import DEFAULT_SCALE, CameraIntrinsics, Observation, Pose, encoder_geometry, renormalize, window_encode


@dataclass(frozen=True, eq=False)
class SceneBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64).reshape(3)
        hi = np.array(self.hi, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError("scene box min must be below max on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self):
        return self.hi - self.lo

    def contains(self, points):
        p = np.atleast_2d(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def clip_rays(self, origins, dirs, near=0.0):
        """Entry/exit ray parameters; rays missing the box get far <= near."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - origins) / dirs
            t2 = (self.hi - origins) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        t0 = np.maximum(tmin, near)
        hit = tmax > t0
        return np.where(hit, t0, 0.0), np.where(hit, tmax, 0.0)


def determine_scene_box(poses, depths=(), intrinsics=None, margin=0.10, min_half_extent=0.05):
    """Axis-aligned box around all camera centers and deprojected depth points.

    The box is scaled about its center by ``1 + margin`` with each half-extent
    floored at ``min_half_extent``.
    """
    poses = list(poses)
    if len(poses) < 2:
        raise InsufficientPoses("need at least two poses to size the scene box")
    pts = [np.array([p.translation for p in poses])]
    for pose, depth in zip(poses, depths):
        if depth is None:
            continue
        depth = np.asarray(depth, dtype=np.float64)
        Kc = intrinsics or CameraIntrinsics(width=depth.shape[1], height=depth.shape[0])
        valid = depth > 0
        cam = Kc.pixel_rays()[valid] * depth[valid][:, None]
        pts.append(pose.to_world(cam))
    pts = np.concatenate(pts)
    lo, hi = pts.min(0), pts.max(0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * (1.0 + margin), min_half_extent)
    return SceneBox(center - half, center + half)


class FeatureField:
    """Dense multi-resolution grids of [raw density, fine (d), coarse (d)]."""

    def __init__(self, scene_box, resolutions=(16, 32, 64), feature_dim=8, dtype=np.float32,
                 seed=0, init_density=-1.0, init_feature_std=0.1):
        self.scene_box = scene_box
        self.feature_dim = int(feature_dim)
        self.channels = 1 + 2 * self.feature_dim
        self.res = np.array(resolutions, dtype=np.int64)
        if np.any(self.res < 2):
            raise ValueError("each level needs at least 2 vertices per axis")
        sizes = self.res**3 * self.channels
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        rng = np.random.default_rng(seed)
        params = rng.normal(0.0, init_feature_std, int(sizes.sum()))
        n_levels = len(self.res)
        for lvl in range(n_levels):
            self.level_block(lvl, params)[..., 0] = init_density / n_levels
        self.params = params.astype(dtype)

    @property
    def n_vertices(self):
        return int((self.res**3).sum())

    def level_block(self, lvl, params=None):
        params = self.params if params is None else params
        R = int(self.res[lvl])
        start = int(self.offsets[lvl])
        return params[start : start + R**3 * self.channels].reshape(R, R, R, self.channels)

    @property
    def levels(self):
        """List of (resolution, raw density, fine, coarse) views per level."""
        d = self.feature_dim
        out = []
        for lvl in range(len(self.res)):
            blk = self.level_block(lvl)
            out.append((int(self.res[lvl]), blk[..., 0], blk[..., 1 : 1 + d], blk[..., 1 + d :]))
        return out

    def kernel_args(self):
        return (self.params, self.res, self.offsets, self.channels)

    def copy(self):
        return copy.deepcopy(self)

    def query(self, points):
        """Density (post-activation) and raw coarse features at world points."""
        p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return K.sample_points(self.params, self.res, self.offsets, self.channels, self.feature_dim,
                               self.scene_box.lo, self.scene_box.size, p)


@dataclass
class TrainConfig:
    steps_per_period: int = 2000
    rays_per_batch: int = 256
    samples_per_ray: int = 64
    importance_samples: int = 32
    optimizer: str = "adam"
    learning_rate: float = 0.05
    density_learning_rate: float = 1.0
    proposal_floor: float = 0.02
    depth_weight: float = 1.0
    fine_weight: float = 1.0
    coarse_weight: float = 1.0
    near: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    termination: float = 1e-4  # stop compositing below this transmittance; 0 = exact

    def __post_init__(self):
        if not 0 <= self.proposal_floor < 1:
            raise ValueError("proposal_floor must lie in [0, 1)")
        for name in ("steps_per_period", "rays_per_batch", "samples_per_ray"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.importance_samples < 0:
            raise ValueError("importance_samples must be >= 0")


def apply_proposal_floor(weights, floor=0.02):
    """Add constant mass to every sample weight, then normalize per ray."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    w = w + floor
    total = w.sum(axis=-1, keepdims=True)
    n = w.shape[-1]
    return np.divide(w, total, out=np.full_like(w, 1.0 / n), where=total > 0)


# ----------------------------------------------------------------------------
# ray sampling along rays


def _stratified(near, far, n, jitter):
    edges = near[:, None] + (far - near)[:, None] * np.linspace(0.0, 1.0, n + 1)[None, :]
    t = edges[:, :-1] + jitter * (edges[:, 1:] - edges[:, :-1])
    delta = np.repeat(((far - near) / n)[:, None], n, axis=1)
    return edges, t, delta


def ray_samples(field, origins, dirs, config, jitter_coarse=None, jitter_fine=None):
    """Sample positions and segment lengths for a ray batch.

    Stratified samples over the box-clipped segment; when
    ``config.importance_samples`` > 0 their density weights (plus the proposal
    floor) drive inverse-CDF resampling and only the resampled points are
    returned.  Missing jitter means bin midpoints (deterministic rendering).
    """
    near, far = field.scene_box.clip_rays(origins, dirs, config.near)
    n = config.samples_per_ray
    B = origins.shape[0]
    if jitter_coarse is None:
        jitter_coarse = np.full((B, n), 0.5)
    edges, t, delta = _stratified(near, far, n, jitter_coarse)
    if config.importance_samples == 0:
        return t, delta
    w = K.density_weights(*field.kernel_args(), field.scene_box.lo, field.scene_box.size,
                          origins, dirs, t, delta, config.termination)
    probs = apply_proposal_floor(w, config.proposal_floor)
    nf = config.importance_samples
    if jitter_fine is None:
        jitter_fine = np.full((B, nf), 0.5)
    u = (np.arange(nf)[None, :] + jitter_fine) / nf
    return K.resample(edges, probs, u, near, far)


def render_rays(field, origins, dirs, config=None, jitter_coarse=None, jitter_fine=None):
    """Render (ray-distance depth, fine, coarse, weights); features unnormalized."""
    config = config or TrainConfig()
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    t, delta = ray_samples(field, origins, dirs, config, jitter_coarse, jitter_fine)
    return K.render_forward(*field.kernel_args(), field.feature_dim, field.scene_box.lo,
                            field.scene_box.size, origins, dirs, t, delta, config.termination)


def render_ray(field, origin, direction, n_samples=64, jitter=None):
    """Render one ray with plain stratified sampling.

    Returns (fine, coarse, depth, weights); features are renormalized, or
    left zero when their norm is <= 1e-6.
    """
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    cfg = TrainConfig(samples_per_ray=n_samples, importance_samples=0, near=0.0, termination=0.0)
    jit = None if jitter is None else np.asarray(jitter, dtype=np.float64).reshape(1, n_samples)
    depth, fine, coarse, weights = render_rays(field, np.asarray(origin)[None], direction[None], cfg, jit)
    return renormalize(fine[0]), renormalize(coarse[0]), float(depth[0]), weights[0]


def pixel_rays(pose: Pose, K_: CameraIntrinsics, rows=None, cols=None):
    """World-frame unit ray directions and the per-ray z-depth factor."""
    cam = K_.pixel_rays(rows, cols)
    norm = np.linalg.norm(cam, axis=-1)
    dirs = (cam / norm[..., None]) @ pose.rotation.T
    return dirs, norm


# ----------------------------------------------------------------------------
# ray batches


@dataclass(eq=False)
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    target_depth: np.ndarray  # ray distance, 0 = no return
    target_fine: np.ndarray
    target_coarse: np.ndarray
    coarse_valid: np.ndarray
    frame_ids: np.ndarray
    pixels: np.ndarray  # (row, col)
    jitter_coarse: np.ndarray | None = None
    jitter_fine: np.ndarray | None = None

    def __len__(self):
        return self.origins.shape[0]


def _unmasked_index(dataset):
    flat = [np.flatnonzero(~obs.mask.ravel()) for obs in dataset]
    counts = np.array([f.size for f in flat], dtype=np.int64)
    return flat, counts


def sample_ray_batch(dataset, config, rng, _index=None):
    """Draw rays uniformly over the unmasked pixels of every registered frame."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    flat, counts = _index if _index is not None else _unmasked_index(dataset)
    total = counts.sum()
    if total == 0:
        raise AllPixelsMasked("every pixel of every frame is masked")
    B = config.rays_per_batch
    draws = rng.integers(0, total, B)
    cum = np.cumsum(counts)
    frame_idx = np.searchsorted(cum, draws, side="right")
    local = draws - (cum - counts)[frame_idx]

    d = dataset[0].semantic.shape[-1]
    origins = np.empty((B, 3))
    dirs = np.empty((B, 3))
    tdepth = np.empty(B)
    tfine = np.empty((B, d))
    tcoarse = np.zeros((B, d))
    cvalid = np.zeros(B, dtype=bool)
    fids = np.empty(B, dtype=np.int64)
    pix = np.empty((B, 2), dtype=np.int64)
    for fi in np.unique(frame_idx):
        sel = np.flatnonzero(frame_idx == fi)
        obs = dataset[fi]
        H, W = obs.shape
        lin = flat[fi][local[sel]]
        rows, cols = lin // W, lin % W
        dirs_w, znorm = pixel_rays(obs.pose, obs.intrinsics, rows, cols)
        origins[sel] = obs.pose.translation
        dirs[sel] = dirs_w
        tdepth[sel] = obs.depth[rows, cols] * znorm
        tfine[sel] = obs.semantic[rows, cols]
        if obs.feature_map is not None:
            s = obs.stride
            tcoarse[sel] = obs.feature_map[np.minimum((rows + s // 2) // s, obs.feature_map.shape[0] - 1),
                                           np.minimum((cols + s // 2) // s, obs.feature_map.shape[1] - 1)]
            cvalid[sel] = True
        fids[sel] = obs.frame_id
        pix[sel, 0], pix[sel, 1] = rows, cols
    return RayBatch(
        origins, dirs, tdepth, tfine, tcoarse, cvalid, fids, pix,
        rng.random((B, config.samples_per_ray)),
        rng.random((B, config.importance_samples)) if config.importance_samples else None,
    )


# ----------------------------------------------------------------------------
# optimization


class Optimizer:
    """Plain gradient descent or lazy Adam over the vertices a batch touched."""

    def __init__(self, field, config):
        self.config = config
        n = field.params.size
        self.grad = np.zeros(n, dtype=field.params.dtype)
        self.touched = np.zeros(field.n_vertices, dtype=np.uint8)
        self.touched_list = np.zeros(field.n_vertices, dtype=np.int64)
        self.n_touched = np.zeros(1, dtype=np.int64)
        self.step_count = 0
        if config.optimizer == "adam":
            self.m = np.zeros(n, dtype=field.params.dtype)
            self.v = np.zeros(3 * field.n_vertices, dtype=field.params.dtype)
        elif config.optimizer != "sgd":
            raise ValueError(f"unknown optimizer {config.optimizer!r}")

    def loss_and_grad(self, field, batch):
        cfg = self.config
        t, delta = ray_samples(field, batch.origins, batch.directions, cfg,
                               batch.jitter_coarse, batch.jitter_fine)
        B = len(batch)
        valid_depth = batch.target_depth > 0
        w_depth = np.where(valid_depth, cfg.depth_weight / max(valid_depth.sum(), 1), 0.0)
        w_fine = np.full(B, cfg.fine_weight / B)
        w_coarse = np.where(batch.coarse_valid, cfg.coarse_weight / max(batch.coarse_valid.sum(), 1), 0.0)
        return K.loss_and_grad(
            *field.kernel_args(), field.feature_dim, field.scene_box.lo, field.scene_box.size,
            batch.origins, batch.directions, t, delta,
            batch.target_depth, batch.target_fine, batch.target_coarse, w_depth, w_fine, w_coarse,
            self.grad, self.touched, self.touched_list, self.n_touched, cfg.termination,
        )

    def apply(self, field):
        cfg = self.config
        self.step_count += 1
        if cfg.optimizer == "adam":
            K.adam_update(field.params, self.grad, self.m, self.v, self.touched, self.touched_list,
                          self.n_touched, field.channels, field.feature_dim,
                          cfg.density_learning_rate, cfg.learning_rate,
                          cfg.beta1, cfg.beta2, cfg.adam_eps, self.step_count)
        else:
            K.sgd_update(field.params, self.grad, self.touched, self.touched_list, self.n_touched,
                         field.channels, cfg.density_learning_rate, cfg.learning_rate)

    def discard(self):
        idx = self.touched_list[: self.n_touched[0]]
        C = self.grad.size // self.touched.size
        flat = (idx[:, None] * C + np.arange(C)[None, :]).ravel()
        self.grad[flat] = 0
        self.touched[idx] = 0
        self.n_touched[0] = 0


def train_step(field, batch, config, optimizer=None):
    """One gradient step on ``batch``; returns the loss before the update."""
    optimizer = optimizer or Optimizer(field, config)
    loss = optimizer.loss_and_grad(field, batch)
    if not np.isfinite(loss):
        optimizer.discard()
        raise Diverged(f"non-finite loss {loss}")
    optimizer.apply(field)
    return float(loss)


class FieldTrainer:
    """Streaming trainer: frames join the ray pool while optimization runs.

    Encoder features for a frame may be supplied later as a future; finished
    futures are merged at step boundaries only.  Until then the frame's rays
    carry no coarse-feature supervision.
    """

    def __init__(self, field, config=None, seed=0):
        self.field = field
        self.config = config or TrainConfig()
        self.rng = np.random.default_rng(seed)
        self.optimizer = Optimizer(field, self.config)
        self.frames = {}
        self._pending = {}
        self._index = None
        self.history = []

    def __len__(self):
        return len(self.frames)

    @property
    def observations(self):
        return list(self.frames.values())

    def add_frame(self, obs: Observation, features=None):
        if obs.frame_id in self.frames:
            raise DuplicateFrame(f"frame {obs.frame_id} already registered")
        if isinstance(features, concurrent.futures.Future):
            obs.feature_map = None
            self._pending[obs.frame_id] = features
        elif features is not None:
            obs.feature_map = np.asarray(features, dtype=np.float32)
        self.frames[obs.frame_id] = obs
        self.invalidate()

    def invalidate(self):
        """Call after any mask change so the sampler sees it."""
        self._index = None

    def merge_features(self):
        done = [fid for fid, fut in self._pending.items() if fut.done()]
        for fid in done:
            self.frames[fid].feature_map = np.asarray(self._pending.pop(fid).result(), dtype=np.float32)
        return len(done)

    def step(self):
        self.merge_features()
        obs = self.observations
        if self._index is None:
            self._index = _unmasked_index(obs)
        batch = sample_ray_batch(obs, self.config, self.rng, self._index)
        loss = train_step(self.field, batch, self.config, self.optimizer)
        self.history.append(loss)
        return loss

    def train(self, n_steps):
        loss = float("nan")
        for _ in range(n_steps):
            loss = self.step()
        return loss


def add_frame(trainer: FieldTrainer, obs: Observation, features=None):
    trainer.add_frame(obs, features)


def encode_async(executor, obs: Observation):
    """Submit the window encoder for ``obs`` to an executor; returns a future."""
    return executor.submit(window_encode, obs.semantic, obs.scale, obs.stride)


# ----------------------------------------------------------------------------
# image rendering


def render_views(field, pose: Pose, K_: CameraIntrinsics, config=None, rows=None, cols=None):
    """Render z-depth plus unit fine and coarse features for pixel centers.

    Defaults to every pixel; returns arrays shaped like the pixel grid.
    """
    dirs, znorm = pixel_rays(pose, K_, rows, cols)
    shape = dirs.shape[:-1]
    flat = dirs.reshape(-1, 3)
    origins = np.broadcast_to(pose.translation, flat.shape)
    depth, fine, coarse, _ = render_rays(field, origins, flat, config)
    d = field.feature_dim
    return (
        (depth / znorm.ravel()).reshape(shape),
        renormalize(fine).reshape(shape + (d,)),
        renormalize(coarse).reshape(shape + (d,)),
    )


def render_feature_map(field, pose, K_, scale=DEFAULT_SCALE, which="coarse", stride=1, config=None):
    """One ray per encoder output cell, centered on the cell's center pixel."""
    _, rows, cols = encoder_geometry(K_.height, K_.width, scale, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    _, fine, coarse = render_views(field, pose, K_, config, rr, cc)
    if which not in ("fine", "coarse"):
        raise ValueError("which must be 'fine' or 'coarse'")
    return coarse if which == "coarse" else fine


def render_depth_map(field, pose, K_, config=None):
    return render_views(field, pose, K_, config)[0]


def render_phi_rend(field, pose, K_, scale=DEFAULT_SCALE, stride=1, config=None):
    """Window-encode the rendered per-pixel fine feature image."""
    _, fine, _ = render_views(field, pose, K_, config)
    return window_encode(fine, scale, stride)
