import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist
from scipy.stats import special_ortho_group

from lifemap.detect import (
    NOISE,
    BatchAccumulator,
    ChangeRegion,
    DetectorConfig,
    DifferenceHeatmap,
    PixelComponent,
    binarize,
    cluster_and_box,
    connected_components,
    dbscan,
    deproject_component,
    depth_difference,
    filter_components,
    fit_region,
    frame_points,
    min_area_rect,
    semantic_difference,
)
from lifemap.errors import DimensionMismatch
from lifemap.scene import CameraIntrinsics, Observation, Pose

E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])


def sim(a, b, c, **kw):
    return float(semantic_difference(np.array([a]), np.array([b]), np.array([c]), **kw).values[0])


# ----------------------------------------------------------------------------
# semantic differencing


def test_semantic_identity():
    assert sim(E1, E1, E1) == pytest.approx(1.0)


def test_semantic_orthogonal_swap():
    assert sim(E2, E1, E1) == pytest.approx(0.0, abs=1e-12)


def test_semantic_arithmetic_example():
    v = np.array([0.6, 0.8])
    s = sim(E1, v, v)
    assert s == pytest.approx(0.6)
    assert binarize(DifferenceHeatmap(np.array([s])), 0.9)[0]


def test_semantic_subtractive_shift_example():
    r = (E1 + E2) / np.sqrt(2)
    # independent arithmetic: corrected = 2r - e1 = (sqrt2 - 1, sqrt2)
    corrected = np.array([np.sqrt(2) - 1.0, np.sqrt(2)])
    expected = corrected[0] / np.hypot(*corrected)
    assert expected == pytest.approx(0.2811, abs=1e-4)
    assert sim(r, E1, r) == pytest.approx(expected, abs=1e-12)


def test_additive_variant_reduces_to_one():
    r = (E1 + E2) / np.sqrt(2)
    assert sim(r, E1, r, additive=True) == pytest.approx(1.0)


def test_semantic_degenerate_cells_score_one():
    assert sim(np.zeros(2), np.zeros(2), np.zeros(2)) == 1.0
    assert sim(E1, np.zeros(2), E1) == 1.0
    # corrected vector vanishes: phi_2d == phi_lerf - phi_rend
    assert sim(E1, E1 + E1, E1) == 1.0


def test_semantic_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        semantic_difference(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def unit_grid(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_semantic_rotation_invariance(seed, additive):
    rng = np.random.default_rng(seed)
    a, b, c = (unit_grid(rng, (5, 6, 8)) for _ in range(3))
    Q = special_ortho_group.rvs(8, random_state=seed % (2**32))
    h0 = semantic_difference(a, b, c, additive=additive).values
    h1 = semantic_difference(a @ Q.T, b @ Q.T, c @ Q.T, additive=additive).values
    assert np.allclose(h0, h1, atol=1e-10)
    assert np.all((h0 >= -1) & (h0 <= 1))


def test_semantic_identical_grids_all_ones(rng):
    a = unit_grid(rng, (7, 9, 8))
    assert np.allclose(semantic_difference(a, a, a).values, 1.0)


# ----------------------------------------------------------------------------
# depth baseline and thresholding


def test_depth_band_examples():
    d_obs = np.array([[1.0, 1.0, 2.0, 1.0]])
    d_rend = np.array([[1.05, 1.20, 2.2, 0.5]])
    flagged = depth_difference(d_obs, d_rend).values
    assert flagged.tolist() == [[False, True, False, False]]


def test_depth_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        depth_difference(np.zeros((2, 2)), np.zeros((2, 3)))


def test_binarize_examples():
    h = DifferenceHeatmap(np.array([[0.95, 0.85], [0.91, 0.20]]))
    assert binarize(h).tolist() == [[False, True], [False, True]]
    assert not binarize(DifferenceHeatmap(np.ones((3, 3)))).any()
    assert not binarize(DifferenceHeatmap(np.array([0.9])))[0]


# ----------------------------------------------------------------------------
# connected components


def test_components_empty_and_diagonal():
    assert connected_components(np.zeros((4, 4), bool)) == []
    g = np.zeros((3, 3), bool)
    g[0, 0] = g[1, 1] = True
    assert len(connected_components(g)) == 2
    assert len(connected_components(g, connectivity=8)) == 1


def flood_fill_labels(grid):
    """Oracle: repeated breadth-first flood fill over a label image."""
    H, W = grid.shape
    lab = np.zeros((H, W), int)
    nxt = 0
    for r in range(H):
        for c in range(W):
            if grid[r, c] and lab[r, c] == 0:
                nxt += 1
                lab[r, c] = nxt
                queue = [(r, c)]
                while queue:
                    y, x = queue.pop(0)
                    for yy, xx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                        if 0 <= yy < H and 0 <= xx < W and grid[yy, xx] and lab[yy, xx] == 0:
                            lab[yy, xx] = nxt
                            queue.append((yy, xx))
    return {frozenset(zip(*np.nonzero(lab == k))) for k in range(1, nxt + 1)}


def test_components_match_flood_fill():
    rng = np.random.default_rng(0)
    for i in range(100):
        grid = rng.random((32, 32)) < rng.uniform(0.2, 0.7)
        comps = connected_components(grid)
        got = [frozenset(map(tuple, c.pixels.tolist())) for c in comps]
        assert set(got) == flood_fill_labels(grid)
        # partition of the true cells
        assert sum(len(c) for c in got) == grid.sum()
        keys = [(c.pixels[:, 0].min(), c.pixels[:, 1].min()) for c in comps]
        assert keys == sorted(keys)


def test_filter_components_boundary():
    def comp(n):
        return PixelComponent(np.stack([np.zeros(n, int), np.arange(n)], 1))

    kept = filter_components([comp(29), comp(30), comp(31)])
    assert [c.size for c in kept] == [30, 31]
    assert filter_components([]) == []


# ----------------------------------------------------------------------------
# deprojection


def test_deproject_pinhole_example():
    K = CameraIntrinsics(100, 100, 50, 50, 101, 101)
    comp = PixelComponent(np.array([[50, 60]]))  # row 50, col 60
    d = np.ones((101, 101))
    pts = deproject_component(comp, d, d, Pose.identity(), K)
    assert np.allclose(pts, [[0.1, 0.0, 1.0]])


def test_deproject_min_and_validity_rules():
    K = CameraIntrinsics(100, 100, 50, 50, 101, 101)
    comp = PixelComponent(np.array([[50, 50], [10, 10], [20, 20]]))
    d_field = np.zeros((101, 101))
    d_sensor = np.zeros((101, 101))
    d_field[50, 50], d_sensor[50, 50] = 0.8, 1.2
    d_sensor[10, 10] = 1.2
    pts = deproject_component(comp, d_field, d_sensor, Pose.identity(), K)
    assert len(pts) == 2  # (20, 20) has no return in either map
    assert pts[0, 2] == pytest.approx(0.8) and pts[1, 2] == pytest.approx(1.2)


def test_deproject_applies_pose():
    K = CameraIntrinsics(100, 100, 50, 50, 101, 101)
    pose = Pose.look_at([0.0, 0.0, 2.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0))
    d = np.full((101, 101), 2.0)
    pts = deproject_component(PixelComponent(np.array([[50, 50]])), d, d, pose, K)
    assert np.allclose(pts, [[0.0, 0.0, 0.0]], atol=1e-12)


# ----------------------------------------------------------------------------
# clustering


def dbscan_oracle(pts, eps, min_pts):
    """Core-point partition from pairwise distances, plus the border/noise sets."""
    D = cdist(pts, pts)
    adj = D <= eps
    core = adj.sum(1) >= min_pts
    comp = -np.ones(len(pts), int)
    k = 0
    for i in np.flatnonzero(core):
        if comp[i] >= 0:
            continue
        comp[i] = k
        stack = [i]
        while stack:
            j = stack.pop()
            for m in np.flatnonzero(adj[j] & core):
                if comp[m] < 0:
                    comp[m] = k
                    stack.append(m)
        k += 1
    return adj, core, comp


def test_dbscan_matches_density_reachability():
    rng = np.random.default_rng(3)
    for trial in range(50):
        n_blobs = rng.integers(1, 5)
        centers = rng.uniform(-0.5, 0.5, (n_blobs, 3))
        pts = np.concatenate([c + rng.normal(0, rng.uniform(0.01, 0.04), (rng.integers(5, 60), 3)) for c in centers]
                             + [rng.uniform(-0.6, 0.6, (rng.integers(0, 20), 3))])
        labels = dbscan(pts, 0.05, 10)
        adj, core, comp = dbscan_oracle(pts, 0.05, 10)
        # core points: identical partition
        core_idx = np.flatnonzero(core)
        pairs_ours = labels[core_idx][:, None] == labels[core_idx][None, :]
        pairs_oracle = comp[core_idx][:, None] == comp[core_idx][None, :]
        assert np.array_equal(pairs_ours, pairs_oracle)
        for i in np.flatnonzero(~core):
            reach = np.flatnonzero(adj[i] & core)
            if reach.size == 0:
                assert labels[i] == NOISE
            else:
                assert labels[i] in set(labels[reach])


def test_two_blobs_two_regions():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.01, (50, 3))
    b = a + [0.5, 0.0, 0.0]
    regions = cluster_and_box(np.concatenate([a, b]), 0.05, 10)
    assert len(regions) == 2


def test_scattered_points_are_noise():
    pts = np.eye(5, 3) * np.arange(1, 6)[:, None]
    assert cluster_and_box(pts, 0.05, 10) == []
    assert cluster_and_box(np.zeros((0, 3))) == []


# ----------------------------------------------------------------------------
# boxes


def sweep_min_area(xy, step_deg=0.1):
    best = np.inf
    for a in np.deg2rad(np.arange(0.0, 90.0, step_deg)):
        c, s = np.cos(a), np.sin(a)
        u = xy @ [c, s]
        v = xy @ [-s, c]
        best = min(best, np.ptp(u) * np.ptp(v))
    return best


def test_min_area_rect_vs_angle_sweep():
    rng = np.random.default_rng(1)
    for _ in range(25):
        xy = rng.normal(size=(rng.integers(3, 40), 2)) * rng.uniform(0.1, 1.0, 2)
        xy = xy @ special_ortho_group.rvs(2, random_state=int(rng.integers(1 << 30)))
        center, yaw, half = min_area_rect(xy)
        area = 4 * half[0] * half[1]
        swept = sweep_min_area(xy)
        assert area <= swept * (1 + 1e-9)
        assert swept <= area * 1.01
        assert area <= np.ptp(xy[:, 0]) * np.ptp(xy[:, 1]) + 1e-12


def test_rotated_unit_square_box():
    t = np.linspace(-0.5, 0.5, 11)
    edge = np.concatenate([np.stack([t, np.full_like(t, s)], 1) for s in (-0.5, 0.5)]
                          + [np.stack([np.full_like(t, s), t], 1) for s in (-0.5, 0.5)])
    a = np.pi / 4
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    xy = edge @ R.T
    pts = np.concatenate([np.column_stack([xy, np.full(len(xy), z)]) for z in (0.0, 0.25, 0.5)])
    region = fit_region(pts)
    assert np.degrees(region.yaw) == pytest.approx(45.0, abs=1.0)
    assert np.allclose(region.half_extents[:2], 0.5, atol=1e-3)
    assert region.half_extents[2] == pytest.approx(0.25)
    assert region.axes()[2].tolist() == [0.0, 0.0, 1.0]


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1))
def test_region_contains_its_cluster(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(rng.integers(1, 80), 3)) * rng.uniform(0.01, 0.3, 3)
    region = fit_region(pts)
    assert region.contains(pts, tol=1e-9).all()
    assert np.all(region.half_extents > 0)
    xy_area = 4 * region.half_extents[0] * region.half_extents[1]
    assert xy_area <= np.ptp(pts[:, 0]) * np.ptp(pts[:, 1]) + 1e-9 or len(pts) < 3


def test_region_dict_roundtrip():
    r = ChangeRegion([0.1, 0.2, 0.3], 0.4, [0.05, 0.06, 0.07], 12)
    back = ChangeRegion.from_dict(r.as_dict())
    assert np.allclose(back.center, r.center) and back.yaw == r.yaw and back.count == 12


# ----------------------------------------------------------------------------
# per-frame pipeline


def _obs_and_render(d=4, swap=True):
    H, W = 60, 80
    K = CameraIntrinsics(80, 80, 39.5, 29.5, W, H)
    base = np.zeros(d)
    base[0] = 1.0
    other = np.zeros(d)
    other[1] = 1.0
    fm = np.tile(base, (H, W, 1))
    if swap:
        fm[20:30, 30:42] = other
    depth = np.full((H, W), 1.0, np.float32)
    obs = Observation(7, 1, Pose.look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0)), K, depth,
                      fm.astype(np.float32), fm.astype(np.float32))
    lerf = np.tile(base, (H, W, 1))
    return obs, (depth.astype(np.float64), lerf, lerf, lerf)


def test_frame_points_semantic_swap():
    obs, rendered = _obs_and_render()
    trace = []
    pts, heat, comps = frame_points(obs, rendered, DetectorConfig(), trace)
    assert len(comps) == 1 and comps[0].size == 120
    assert pts.shape == (120, 3)
    assert np.allclose(pts[:, 2], 0.0, atol=1e-9)  # the table plane under a top-down camera
    assert [s for s, _ in trace] == ["heatmap", "binarize", "connected_components", "filter_components",
                                     "deproject_component"]


def test_depth_method_blind_to_semantic_swap():
    obs, rendered = _obs_and_render()
    trace = []
    pts, heat, comps = frame_points(obs, rendered, DetectorConfig(method="depth"), trace)
    assert heat.method == "depth" and len(pts) == 0 and comps == []
    assert {m for _, m in trace} == {"depth"}


def test_batch_accumulator_flushes_at_size():
    acc = BatchAccumulator(DetectorConfig(batch_size=3))
    rng = np.random.default_rng(0)
    blob = rng.normal(0, 0.005, (20, 3))
    assert not acc.add(blob)
    assert not acc.add(np.zeros((0, 3)))
    assert acc.add(blob + 0.001)
    regions = acc.flush()
    assert len(regions) == 1 and regions[0].count == 40
    assert acc.n_frames == 0 and acc.flush() == []


def test_detector_config_rejects_method():
    with pytest.raises(ValueError):
        DetectorConfig(method="rgb")
