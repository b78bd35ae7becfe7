"""Selective map updates: project change boxes into older views and mask them."""

from __future__ import annotations

import numpy as np

from .detect import ChangeRegion, convex_hull
from .scene import CameraIntrinsics, Pose

# segment endpoints of the 12 box edges, indexing ChangeRegion.corners()
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


def project_region(region: ChangeRegion, pose: Pose, K: CameraIntrinsics, inflate=0.0, near=1e-3):
    """Pixel mask covered by the projection of a region's box.

    Box edges crossing the near plane are clipped there; the projected hull of
    what remains is filled and cut to the image.
    """
    cam = pose.to_camera(region.corners(inflate))
    pts = [p for p in cam if p[2] >= near]
    for a, b in _EDGES:
        za, zb = cam[a, 2], cam[b, 2]
        if (za - near) * (zb - near) < 0:
            s = (near - za) / (zb - za)
            pts.append(cam[a] + s * (cam[b] - cam[a]))
    mask = np.zeros((K.height, K.width), dtype=bool)
    if not pts:
        return mask
    pts = np.array(pts)
    uv = np.stack([K.fx * pts[:, 0] / pts[:, 2] + K.cx, K.fy * pts[:, 1] / pts[:, 2] + K.cy], axis=1)
    hull = convex_hull(uv)
    if len(hull) < 3:
        return mask
    lo = np.floor(hull.min(0)).astype(int)
    hi = np.ceil(hull.max(0)).astype(int)
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0], K.width - 1), min(hi[1], K.height - 1)
    if c0 > c1 or r0 > r1:
        return mask
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    inside = np.ones(rr.shape, dtype=bool)
    nxt = np.roll(hull, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(hull, nxt):
        inside &= (x1 - x0) * (rr - y0) - (y1 - y0) * (cc - x0) >= -1e-9
    mask[r0 : r1 + 1, c0 : c1 + 1] = inside
    return mask


class MaskLedger:
    """Per-frame stale-pixel masks; wraps the observations the trainer samples from."""

    def __init__(self, observations=()):
        self.frames = {}
        for obs in observations:
            self.register(obs)

    def register(self, obs):
        self.frames[obs.frame_id] = obs

    def __len__(self):
        return len(self.frames)

    def mask(self, frame_id):
        return self.frames[frame_id].mask

    def period(self, frame_id):
        return self.frames[frame_id].period

    def masked_count(self, frame_id):
        return int(self.frames[frame_id].mask.sum())

    def snapshot(self):
        return {fid: obs.mask.copy() for fid, obs in self.frames.items()}


def apply_masks(ledger: MaskLedger, regions, current_period, inflate=0.05):
    """OR each region's projection into every frame from an earlier period."""
    for obs in ledger.frames.values():
        if obs.period >= current_period:
            continue
        for region in regions:
            obs.mask |= project_region(region, obs.pose, obs.intrinsics, inflate)
    return ledger


def pixel_mask_ratio(ledger: MaskLedger):
    total = sum(obs.mask.size for obs in ledger.frames.values())
    if total == 0:
        return 0.0
    return sum(int(obs.mask.sum()) for obs in ledger.frames.values()) / total


def decide_remap(regions):
    """Remap when the probe batch produced at least one change region."""
    return len(regions) > 0
