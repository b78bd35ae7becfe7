"""Experiment protocol: scenarios, the mapper state machine, metrics and reports.

The robot side (:class:`Scenario`) owns the ground truth: it builds the scene,
applies changes between periods, drives the trajectory and renders
observations.  The mapper side (:class:`Mapper`) only ever sees posed
observations, a per-period plan and query vectors.  Both run unchanged in a
single process (:func:`run_experiment`) or across a socket (``transport``).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from .detect import BatchAccumulator, ChangeRegion, DetectorConfig, frame_points
from .errors import Diverged, InvalidScene
from .field import FeatureField, FieldTrainer, TrainConfig, determine_scene_box, render_views
from .query import embed_query, occupied_grid, relevancy_volume
from .scene import (
    CameraIntrinsics,
    ChangeSpec,
    Observation,
    SceneObject,
    SceneState,
    _validate_objects,
    apply_change,
    build_scene,
    generate_trajectory,
    perturb_pose,
    render_observation,
    window_encode,
)
from .update import MaskLedger, apply_masks, decide_remap, pixel_mask_ratio

CATEGORIES = ("NoChange", "Addition", "Removal", "Swap")
_ALIASES = {"add": "Addition", "addition": "Addition", "remove": "Removal", "removal": "Removal",
            "swap": "Swap", "nochange": "NoChange", "none": "NoChange"}


def canonical_category(name):
    key = str(name).replace("_", "").replace("-", "").lower()
    if key in _ALIASES:
        return _ALIASES[key]
    raise ValueError(f"unknown change category {name!r}")


@dataclass
class ExperimentConfig:
    """One trial.  See ``configs/`` for an annotated YAML version."""

    category: str = "Swap"
    tier: int = 1
    method: str = "semantic"
    periods: int | None = None  # None: 3, or 2 for NoChange
    scene: dict | None = None  # explicit scene spec; None generates one from scene_seed
    scene_seed: int = 0
    n_objects: int = 5
    feature_dim: int = 8
    slot_spacing: float = 0.25
    max_coherence: float = 0.35
    n_frames: int = 24
    probe_frames: int = 15
    phase_step: float = 0.5  # per-period trajectory offset, in frame spacings
    sigma_rot_deg: float = 0.0
    sigma_trans: float = 0.0
    seed: int = 0
    steps_initial: int = 400
    steps_update: int = 250
    mask_inflate: float = 0.05
    query_theta_deg: float = 10.0
    query_resolution: int = 64
    opacity_floor: float = 0.5
    query_inflate: float = 0.02
    recall_tol: float = 0.02
    width: int = 80
    height: int = 60
    focal: float = 80.0
    scale: float = 0.25
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        self.category = canonical_category(self.category)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if self.method != self.detector.method:
            self.detector = dataclasses.replace(self.detector, method=self.method)
        if self.periods is None:
            self.periods = 2 if self.category == "NoChange" else 3
        if self.category != "NoChange" and self.tier < 1:
            raise ValueError("tier must be >= 1")
        if self.probe_frames < 1 or self.probe_frames > self.n_frames:
            raise ValueError("probe_frames must lie in [1, n_frames]")

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                                self.width, self.height)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return dataclasses.asdict(self)


def load_config(path, **overrides):
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**doc)


# ----------------------------------------------------------------------------
# robot side


def _draw_vector(rng, dim, avoid, orthogonal, max_coherence, max_tries=20000):
    basis = []
    for u in orthogonal:
        u = np.asarray(u, dtype=np.float64)
        for b in basis:
            u = u - (u @ b) * b
        n = np.linalg.norm(u)
        if n > 1e-9:
            basis.append(u / n)
    best, best_c = None, np.inf
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        for b in basis:
            v -= (v @ b) * b
        v /= np.linalg.norm(v)
        c = max((abs(v @ a) for a in avoid), default=0.0)
        if c <= max_coherence:
            return v
        if c < best_c:
            best, best_c = v, c
    # crowded subspace (many swaps at small d): settle for the least coherent draw
    if best is None or best_c >= 0.9:
        raise InvalidScene("could not satisfy the embedding coherence bound")
    return best


@dataclass
class Trial:
    """What changed in one period, from the robot's point of view."""

    period: int
    change: ChangeSpec
    scene: SceneState
    swapped: list = field(default_factory=list)  # (out, in) object pairs
    previous: SceneState | None = None


class Scenario:
    """Ground-truth world: scene, change schedule, trajectories and sensing."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.K = config.intrinsics
        self._scene_rng = np.random.default_rng([config.scene_seed, 11])
        self._change_rng = np.random.default_rng(
            [config.scene_seed, config.seed, CATEGORIES.index(config.category), config.tier, 23])
        if config.scene is not None:
            scene = build_scene(config.scene)
        else:
            scene = self._generate_scene()
        self.initial = scene
        self.slots = self._slot_grid()
        self.history = [Trial(0, ChangeSpec.no_change(), scene, previous=scene)]
        self.ever = {o.id: o for o in scene.objects}

    # scene generation ----------------------------------------------------

    def _slot_grid(self):
        s = self.config.slot_spacing
        return [np.array([x, y]) for x in (-s, 0.0, s) for y in (-s, 0.0, s)]

    def _random_geometry(self, rng, xy):
        if rng.random() < 0.5:
            half = np.array([rng.uniform(0.045, 0.065), rng.uniform(0.045, 0.065), rng.uniform(0.04, 0.07)])
            return "box", np.array([xy[0], xy[1], half[2]]), half
        r = rng.uniform(0.05, 0.065)
        return "sphere", np.array([xy[0], xy[1], r]), np.array([r])

    def _generate_scene(self):
        cfg = self.config
        rng = self._scene_rng
        self._bg = rng.standard_normal(cfg.feature_dim)
        self._bg /= np.linalg.norm(self._bg)
        slots = self._slot_grid()
        chosen = rng.choice(len(slots), size=cfg.n_objects, replace=False)
        objects, embs = [], []
        for i, si in enumerate(sorted(int(c) for c in chosen)):
            shape, center, size = self._random_geometry(rng, slots[si])
            emb = _draw_vector(rng, cfg.feature_dim, embs, [self._bg], cfg.max_coherence)
            embs.append(emb)
            objects.append(SceneObject(i, f"object{i}", shape, center, size, emb))
        _validate_objects(objects, 0.6)
        return SceneState(tuple(objects), self._bg, 0, 0.6)

    # change schedule -----------------------------------------------------

    @property
    def scene(self):
        return self.history[-1].scene

    def _new_id(self):
        return max(self.ever) + 1 if self.ever else 0

    def advance(self):
        """Apply the next period's change and return the new Trial."""
        cfg = self.config
        rng = self._change_rng
        scene = self.scene
        swapped = []
        avoid = [o.embedding for o in self.ever.values()]
        if cfg.category == "NoChange":
            change = ChangeSpec.no_change()
        elif cfg.category == "Removal":
            ids = sorted(int(i) for i in rng.choice(scene.ids(), size=cfg.tier, replace=False))
            change = ChangeSpec.removal(ids)
        elif cfg.category == "Addition":
            used = [tuple(np.round(o.center[:2], 6)) for o in scene.objects]
            free = [s for s in self.slots if tuple(np.round(s, 6)) not in used]
            if len(free) < cfg.tier:
                raise InvalidScene("no free slot left for an addition")
            picks = sorted(int(i) for i in rng.choice(len(free), size=cfg.tier, replace=False))
            added = []
            for si in picks:
                oid = self._new_id() + len(added)
                shape, center, size = self._random_geometry(rng, free[si])
                emb = _draw_vector(rng, cfg.feature_dim, avoid, [scene.background_embedding], cfg.max_coherence)
                avoid.append(emb)
                added.append(SceneObject(oid, f"object{oid}", shape, center, size, emb))
            change = ChangeSpec.addition(added)
        else:
            ids = sorted(int(i) for i in rng.choice(scene.ids(), size=cfg.tier, replace=False))
            pairs = []
            for k, oid in enumerate(ids):
                old = scene.get(oid)
                nid = self._new_id() + k
                # same geometry, embedding orthogonal to what it replaces
                emb = _draw_vector(rng, cfg.feature_dim, avoid, [scene.background_embedding, old.embedding],
                                   cfg.max_coherence)
                avoid.append(emb)
                new = old.replace(id=nid, label=f"object{nid}", embedding=emb)
                pairs.append((oid, new))
                swapped.append((old, new))
            change = ChangeSpec.swap(pairs)
        nxt = apply_change(scene, change)
        for o in change.added:
            self.ever[o.id] = o
        trial = Trial(nxt.period, change, nxt, swapped, previous=scene)
        self.history.append(trial)
        return trial

    # sensing -------------------------------------------------------------

    def trajectory(self, period):
        cfg = self.config
        phase = 2.0 * np.pi * cfg.phase_step * period / cfg.n_frames
        return generate_trajectory(self.scene, cfg.n_frames, phase=phase)

    def recorded_poses(self, period):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, period, 37])
        sr = np.deg2rad(cfg.sigma_rot_deg)
        return [perturb_pose(p, sr, cfg.sigma_trans, rng) for p in self.trajectory(period)]

    def queries(self):
        """(label, vector) for every object that was ever in the scene."""
        theta = np.deg2rad(self.config.query_theta_deg)
        catalog = {o.label: o.embedding for o in self.ever.values()}
        bg = [self.initial.background_embedding]
        return [(o.label, embed_query(o.label, catalog, theta, bg)) for o in sorted(self.ever.values(), key=lambda o: o.id)]

    def plan(self, period):
        return PeriodPlan(period, self.recorded_poses(period), self.queries(), self.config.n_frames)

    def observe(self, period, k, poses=None):
        truth = self.trajectory(period)[k]
        recorded = (poses or self.recorded_poses(period))[k]
        frame_id = period * 10000 + k
        return render_observation(self.scene, truth, self.K, self.config.scale, frame_id, recorded)


@dataclass
class PeriodPlan:
    period: int
    poses: list
    queries: list  # (label, unit vector)
    n_frames: int


# ----------------------------------------------------------------------------
# mapper side


@dataclass
class QueryAnswer:
    label: str
    argmax: np.ndarray | None
    value: float
    no_content: bool


@dataclass
class PeriodOutput:
    period: int
    decision: bool | None = None
    regions: list = field(default_factory=list)
    mask_ratio: float = 0.0
    steps: int = 0
    frames: int = 0
    answers: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    error: str | None = None

    def metrics(self):
        """Flat, deterministic summary used for equivalence checks."""
        out = {"period": self.period, "decision": self.decision, "mask_ratio": self.mask_ratio,
               "steps": self.steps, "frames": self.frames, "n_regions": len(self.regions)}
        for a in self.answers:
            out[f"query/{a.label}/value"] = a.value
            for i, v in enumerate(a.argmax if a.argmax is not None else (np.nan,) * 3):
                out[f"query/{a.label}/argmax{i}"] = float(v)
        return out


class Mapper:
    """Single-threaded mapper state machine.

    Calls per period: :meth:`start_period`, then :meth:`observe` for each
    frame until it returns ``decision == False`` or the plan is exhausted,
    then :meth:`finish_period`.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.field = None
        self.trainer = None
        self.ledger = MaskLedger()
        self.plan = None
        self.out = None
        self._buffer = []
        self._acc = None
        self._steps_done = 0
        self.heatmaps = []

    # helpers -------------------------------------------------------------

    def _train_to(self, target):
        n = max(0, target - self._steps_done)
        for _ in range(n):
            self.trainer.step()
        self._steps_done += n

    def _add(self, obs):
        if obs.feature_map is None:
            obs.feature_map = window_encode(obs.semantic, obs.scale, obs.stride).astype(np.float32)
        self.trainer.add_frame(obs)
        self.ledger.register(obs)

    def _apply(self, regions):
        self.out.trace.append(("apply_masks", self.config.detector.method))
        if regions:
            apply_masks(self.ledger, regions, self.plan.period, self.config.mask_inflate)
            self.trainer.invalidate()
        self.out.regions.extend(regions)

    def render(self, obs):
        depth, fine, coarse = render_views(self.field, obs.pose, obs.intrinsics, self.config.train)
        phi_rend = window_encode(fine, obs.scale, obs.stride)
        return depth, fine, coarse, phi_rend

    # protocol ------------------------------------------------------------

    def start_period(self, plan: PeriodPlan):
        self.plan = plan
        self.out = PeriodOutput(plan.period)
        self._buffer = []
        self._acc = BatchAccumulator(self.config.detector, self.out.trace)
        self._steps_done = 0
        self.heatmaps = []
        self._remap = None

    def observe(self, obs: Observation):
        """Feed one frame; returns a (possibly empty) dict of events to publish."""
        cfg = self.config
        self.out.frames += 1
        if self.plan.period == 0:
            self._buffer.append(obs)
            return {}
        if obs.feature_map is None:
            obs.feature_map = window_encode(obs.semantic, obs.scale, obs.stride).astype(np.float32)
        rendered = self.render(obs)
        pts, heat, _ = frame_points(obs, rendered, cfg.detector, self.out.trace)
        self.heatmaps.append(heat)
        full = self._acc.add(pts)
        k = self.out.frames
        events = {}
        if self._remap is None:
            self._buffer.append(obs)
            if k == min(cfg.probe_frames, self.plan.n_frames):
                regions = self._acc.flush()
                self._remap = decide_remap(regions)
                self.out.trace.append(("decide_remap", cfg.detector.method))
                self.out.decision = self._remap
                events = {"regions": regions, "decision": self._remap}
                if self._remap:
                    self._apply(regions)
                    for b in self._buffer:
                        self._add(b)
                    self._buffer = []
                    self._train_to(cfg.steps_update * k // self.plan.n_frames)
            return events
        self._add(obs)
        if full:
            regions = self._acc.flush()
            self._apply(regions)
            events["regions"] = regions
        self._train_to(cfg.steps_update * k // self.plan.n_frames)
        return events

    def finish_period(self):
        cfg = self.config
        out = self.out
        try:
            if self.plan.period == 0:
                self._initial_fit()
            elif self._remap:
                if self._acc.n_frames:
                    self._apply(self._acc.flush())
                self._train_to(cfg.steps_update)
        except Diverged as exc:
            out.error = f"diverged: {exc}"
        out.steps = self._steps_done
        out.mask_ratio = pixel_mask_ratio(self.ledger)
        if self.field is not None and out.error is None:
            out.answers = self.answer(self.plan.queries)
        return out

    def _initial_fit(self):
        cfg = self.config
        frames = self._buffer
        box = determine_scene_box([o.pose for o in frames], [o.depth for o in frames], frames[0].intrinsics)
        self.field = FeatureField(box, feature_dim=cfg.feature_dim, seed=cfg.seed)
        self.trainer = FieldTrainer(self.field, cfg.train, seed=cfg.seed)
        n = len(frames)
        for k, obs in enumerate(frames, 1):
            self._add(obs)
            self._train_to(cfg.steps_initial * k // n)
        self._buffer = []

    def answer(self, queries):
        cfg = self.config
        grid = occupied_grid(self.field, cfg.query_resolution, cfg.opacity_floor)
        answers = []
        for label, q in queries:
            res = relevancy_volume(self.field, q, grid=grid)
            answers.append(QueryAnswer(label, res.argmax, res.value, res.no_content))
        return answers

    def checkpoint_state(self):
        return copy.deepcopy((self.field, self.trainer, self.ledger))

    def restore_state(self, state):
        self.field, self.trainer, self.ledger = copy.deepcopy(state)
        # the trainer's view of its field must be the restored field
        self.field = self.trainer.field


# ----------------------------------------------------------------------------
# evaluation


def region_contains_object(region: ChangeRegion, obj: SceneObject, tol=0.0):
    """True when the region box fully contains the object's solid."""
    if obj.shape == "sphere":
        local = np.abs(region.to_local(obj.center)[0])
        return bool(np.all(local + obj.size[0] <= region.half_extents + tol))
    h = obj.half_extents
    signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)
    return bool(np.all(region.contains(obj.center + signs * h, tol)))


def evaluate_recall(regions, changed, tol=0.02):
    """Fraction of changed objects fully inside some region.

    Each entry of ``changed`` is an object or a tuple of objects that must all
    be contained by the same region (a swap's old and new solids).
    """
    if not changed:
        return float("nan")
    hits = 0
    for item in changed:
        group = item if isinstance(item, (tuple, list)) else (item,)
        if any(all(region_contains_object(r, o, tol) for o in group) for r in regions):
            hits += 1
    return hits / len(changed)


def _in_bounds(point, obj, inflate):
    return point is not None and bool(obj.contains(point, inflate)[0])


@dataclass
class PeriodReport:
    category: str
    tier: int
    method: str
    scene_seed: int
    seed: int
    period: int
    decision: bool | None
    remapped: bool
    n_regions: int
    n_changed: int
    recall: float
    mask_ratio: float
    query_acc_moved: float
    n_moved: int
    query_acc_static: float
    n_static: int
    query_acc_swapped_in: float
    frames_requested: int
    steps: int
    wall_clock: float = 0.0
    error: str | None = None


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    periods: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    regions: list = field(default_factory=list)  # per period

    @property
    def decision_accuracy(self):
        """Share of later NoChange periods correctly left unmapped."""
        later = [p for p in self.periods if p.period > 0]
        if self.config.category != "NoChange" or not later:
            return float("nan")
        return float(np.mean([p.decision is False for p in later]))

    def _later_mean(self, attr):
        vals = [getattr(p, attr) for p in self.periods if p.period > 0 and not np.isnan(getattr(p, attr))]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def recall(self):
        return self._later_mean("recall")

    @property
    def query_acc_moved(self):
        return self._later_mean("query_acc_moved")

    @property
    def query_acc_static(self):
        return self._later_mean("query_acc_static")

    @property
    def mask_ratio(self):
        return self.periods[-1].mask_ratio if self.periods else float("nan")

    @property
    def failed(self):
        return any(p.error for p in self.periods)


def _frac(flags):
    return float(np.mean(flags)) if flags else float("nan")


def score_period(config, trial: Trial, output: PeriodOutput, frames_requested, wall):
    """Compare one period's mapper output with ground truth."""
    answers = {a.label: a for a in output.answers}
    scene = trial.scene
    change = trial.change
    inflate = config.query_inflate

    changed, moved = [], []
    if change.kind == "Addition":
        changed = list(change.added)
        moved = [_in_bounds(answers[o.label].argmax, o, inflate) for o in change.added if o.label in answers]
    elif change.kind == "Removal":
        prev = {o.id: o for o in trial.previous.objects}
        gone = [prev[i] for i in change.removed]
        changed = gone
        moved = [not _in_bounds(answers[o.label].argmax, o, inflate) for o in gone if o.label in answers]
    elif change.kind == "Swap":
        changed = [(old, new) for old, new in trial.swapped]
        moved = [not _in_bounds(answers[old.label].argmax, new, inflate) for old, new in trial.swapped
                 if old.label in answers]
    swapped_in = [_in_bounds(answers[new.label].argmax, new, inflate) for _, new in trial.swapped
                  if new.label in answers]
    fresh = {o.id for o in change.added}
    static = [_in_bounds(answers[o.label].argmax, o, inflate) for o in scene.objects
              if o.id not in fresh and o.label in answers]
    recall = evaluate_recall(output.regions, changed, config.recall_tol) if trial.period > 0 else float("nan")
    return PeriodReport(
        category=config.category, tier=config.tier, method=config.method, scene_seed=config.scene_seed,
        seed=config.seed, period=trial.period, decision=output.decision,
        remapped=bool(output.decision) if trial.period > 0 else True,
        n_regions=len(output.regions), n_changed=len(changed), recall=recall, mask_ratio=output.mask_ratio,
        query_acc_moved=_frac(moved), n_moved=len(moved), query_acc_static=_frac(static), n_static=len(static),
        query_acc_swapped_in=_frac(swapped_in), frames_requested=frames_requested, steps=output.steps,
        wall_clock=wall, error=output.error,
    )


# period-0 fits are shared across categories, tiers and methods of a scene
_PERIOD0_CACHE: dict = {}


def _period0_key(config: ExperimentConfig):
    keep = config.as_dict()
    for k in ("category", "tier", "method", "periods", "detector", "steps_update", "probe_frames"):
        keep.pop(k, None)
    return hashlib.sha256(json.dumps(keep, sort_keys=True, default=str).encode()).hexdigest()


def clear_cache():
    _PERIOD0_CACHE.clear()


def run_experiment(config: ExperimentConfig, use_cache=True, mapper=None, on_period=None) -> ExperimentReport:
    """Run every period of one trial in-process."""
    scenario = Scenario(config)
    mapper = mapper or Mapper(config)
    report = ExperimentReport(config)
    for period in range(config.periods):
        t0 = time.perf_counter()
        trial = scenario.history[0] if period == 0 else scenario.advance()
        plan = scenario.plan(period)
        key = _period0_key(config)
        if period == 0 and use_cache and key in _PERIOD0_CACHE:
            state, output = _PERIOD0_CACHE[key]
            mapper.restore_state(state)
            output = copy.deepcopy(output)
            requested = plan.n_frames
        else:
            mapper.start_period(plan)
            requested = 0
            for k in range(plan.n_frames):
                obs = scenario.observe(period, k, plan.poses)
                requested += 1
                events = mapper.observe(obs)
                if events.get("decision") is False:
                    break
            output = mapper.finish_period()
            if period == 0 and use_cache and output.error is None:
                _PERIOD0_CACHE[key] = (mapper.checkpoint_state(), copy.deepcopy(output))
        wall = time.perf_counter() - t0
        report.outputs.append(output)
        report.regions.append(list(output.regions))
        report.periods.append(score_period(config, trial, output, requested, wall))
        if on_period is not None:
            on_period(period, mapper, output)
        if output.error:
            break
    return report


# drift levels for robustness studies; translation noise scales with rotation (5 mm per half degree)
POSE_NOISE_SWEEP = (0.0, 0.25, 0.5, 1.0)


def run_noise_sweep(config: ExperimentConfig, seeds=range(5), levels=POSE_NOISE_SWEEP, trans_per_deg=0.01):
    """Run ``config`` at each pose-noise level over ``seeds``; returns {sigma_rot_deg: [reports]}."""
    out = {}
    for level in levels:
        out[level] = [
            run_experiment(dataclasses.replace(config, sigma_rot_deg=float(level),
                                               sigma_trans=float(level) * trans_per_deg,
                                               seed=int(s), scene_seed=int(s)))
            for s in seeds
        ]
    return out


# ----------------------------------------------------------------------------
# reports

REPORT_FIELDS = [
    "kind", "category", "tier", "method", "scene_seed", "seed", "period", "decision", "remapped",
    "n_regions", "n_changed", "recall", "mask_ratio", "query_acc_moved", "n_moved", "query_acc_static",
    "n_static", "query_acc_swapped_in", "decision_accuracy", "frames_requested", "steps", "error",
]
TIMING_FIELDS = ["category", "tier", "method", "scene_seed", "seed", "period", "wall_clock"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else f"{float(v):.6f}"
    return str(v)


def aggregate_rows(reports):
    """Table-style aggregates: one row per (category, method), tiers pooled."""
    groups = {}
    for rep in reports:
        groups.setdefault((rep.config.category, rep.config.method), []).append(rep)
    rows = []
    for (cat, method), reps in sorted(groups.items()):
        later = [p for r in reps for p in r.periods if p.period > 0]

        def mean(attr):
            vals = [getattr(p, attr) for p in later if not np.isnan(getattr(p, attr))]
            return float(np.mean(vals)) if vals else float("nan")

        dec = [r.decision_accuracy for r in reps if not np.isnan(r.decision_accuracy)]
        rows.append({
            "kind": "aggregate", "category": cat, "tier": "all", "method": method, "period": "all",
            "recall": mean("recall"), "mask_ratio": float(np.mean([r.mask_ratio for r in reps])),
            "query_acc_moved": mean("query_acc_moved"), "query_acc_static": mean("query_acc_static"),
            "query_acc_swapped_in": mean("query_acc_swapped_in"),
            "decision_accuracy": float(np.mean(dec)) if dec else float("nan"),
            "n_regions": sum(p.n_regions for p in later), "n_changed": sum(p.n_changed for p in later),
        })
    return rows


def emit_report(reports, path):
    """Write the metrics CSV; wall-clock times go to ``<path>.timing.csv``."""
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    reports = list(reports)
    rows = []
    for rep in reports:
        for p in rep.periods:
            row = dataclasses.asdict(p)
            row["kind"] = "period"
            rows.append(row)
    rows += aggregate_rows(reports)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in REPORT_FIELDS})
    with open(os.fspath(path) + ".timing.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, TIMING_FIELDS, extrasaction="ignore")
        w.writeheader()
        for rep in reports:
            for p in rep.periods:
                w.writerow({k: _fmt(getattr(p, k)) for k in TIMING_FIELDS})
    return path
