"""On-disk formats: observation datasets, field checkpoints, heatmaps, regions.

All binary layouts are little-endian.

Dataset (``LLRF``)::

    magic "LLRF" | version u16 | n_frames u32 | n_frames x record

Observation record::

    frame_id u32 | period u16 | pose 12 x f64 (R row-major, then t)
    intrinsics 6 x f64 (fx fy cx cy width height)
    H u32 | W u32 | H' u32 | W' u32 | d u32 | scale f64 | stride u32
    depth f32[H*W] | semantic f32[H*W*d] | features f32[H'*W'*d] | mask bits

``H' = W' = 0`` means no feature map.  The mask is packed LSB-first,
``ceil(H*W / 8)`` bytes.

Checkpoint (``LLFF``)::

    magic "LLFF" | version u16 | dtype u8 (4 = f32, 8 = f64) | d u32
    n_levels u32 | resolutions u32[n_levels] | scene box 6 x f64 (lo, hi)
    parameter blocks, one per level, raw
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .detect import ChangeRegion
from .errors import BadMagic, FormatError, NeedMoreBytes
from .field import FeatureField, SceneBox
from .scene import CameraIntrinsics, Observation, Pose

DATASET_MAGIC = b"LLRF"
CHECKPOINT_MAGIC = b"LLFF"
FORMAT_VERSION = 1

_RECORD_HEAD = struct.Struct("<IH12d6d5IdI")
_FILE_HEAD = struct.Struct("<4sHI")
_CKPT_HEAD = struct.Struct("<4sHBII")


class _Reader:
    def __init__(self, buf, offset=0):
        self.buf = memoryview(buf)
        self.pos = offset

    def take(self, n):
        end = self.pos + n
        if end > len(self.buf):
            raise NeedMoreBytes(end - len(self.buf))
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def array(self, dtype, count):
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)


# ----------------------------------------------------------------------------
# observations


def encode_observation(obs: Observation) -> bytes:
    H, W = obs.depth.shape
    d = obs.semantic.shape[-1]
    fm = obs.feature_map
    fh, fw = (0, 0) if fm is None else fm.shape[:2]
    K = obs.intrinsics
    head = _RECORD_HEAD.pack(obs.frame_id, obs.period, *obs.pose.as_array(), *K.as_array(),
                             H, W, fh, fw, d, float(obs.scale), obs.stride)
    parts = [head, np.asarray(obs.depth, "<f4").tobytes(), np.asarray(obs.semantic, "<f4").tobytes()]
    if fm is not None:
        parts.append(np.asarray(fm, "<f4").tobytes())
    parts.append(np.packbits(np.asarray(obs.mask, bool).ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def decode_observation(buf, offset=0):
    """Parse one record; returns (observation, offset past the record)."""
    r = _Reader(buf, offset)
    head = r.unpack(_RECORD_HEAD)
    frame_id, period = head[0], head[1]
    pose = Pose.from_array(head[2:14])
    K = CameraIntrinsics.from_array(head[14:20])
    H, W, fh, fw, d = head[20:25]
    scale, stride = head[25], head[26]
    depth = r.array("f4", H * W).reshape(H, W).astype(np.float32)
    semantic = r.array("f4", H * W * d).reshape(H, W, d).astype(np.float32)
    fm = None
    if fh and fw:
        fm = r.array("f4", fh * fw * d).reshape(fh, fw, d).astype(np.float32)
    nbytes = (H * W + 7) // 8
    bits = np.frombuffer(r.take(nbytes), dtype=np.uint8)
    mask = np.unpackbits(bits, count=H * W, bitorder="little").astype(bool).reshape(H, W)
    obs = Observation(frame_id, period, pose, K, depth, semantic, fm, mask, scale, stride)
    return obs, r.pos


def save_dataset(path, observations):
    observations = list(observations)
    body = [_FILE_HEAD.pack(DATASET_MAGIC, FORMAT_VERSION, len(observations))]
    body += [encode_observation(o) for o in observations]
    _atomic_write(path, b"".join(body))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    try:
        magic, version, n = r.unpack(_FILE_HEAD)
    except NeedMoreBytes as exc:
        raise FormatError("dataset header truncated") from exc
    if magic != DATASET_MAGIC:
        raise BadMagic(f"expected {DATASET_MAGIC!r}, got {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    out, pos = [], r.pos
    for _ in range(n):
        obs, pos = decode_observation(buf, pos)
        out.append(obs)
    return out


# ----------------------------------------------------------------------------
# field checkpoints


def encode_checkpoint(field: FeatureField) -> bytes:
    dt = np.dtype(field.params.dtype)
    if dt.itemsize not in (4, 8) or dt.kind != "f":
        raise FormatError(f"cannot store parameters of dtype {dt}")
    n = len(field.res)
    parts = [
        _CKPT_HEAD.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, dt.itemsize, field.feature_dim, n),
        np.asarray(field.res, "<u4").tobytes(),
        np.concatenate([field.scene_box.lo, field.scene_box.hi]).astype("<f8").tobytes(),
        field.params.astype(dt.newbyteorder("<"), copy=False).tobytes(),
    ]
    return b"".join(parts)


def decode_checkpoint(buf) -> FeatureField:
    r = _Reader(buf)
    magic, version, itemsize, d, n = r.unpack(_CKPT_HEAD)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if itemsize not in (4, 8):
        raise FormatError(f"bad parameter width {itemsize}")
    res = r.array("u4", n).astype(np.int64)
    box = r.array("f8", 6)
    dtype = np.float32 if itemsize == 4 else np.float64
    field = FeatureField(SceneBox(box[:3].copy(), box[3:].copy()), tuple(int(x) for x in res), d,
                         dtype=dtype, init_feature_std=0.0)
    count = field.params.size
    field.params = r.array(dtype, count).astype(dtype)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint")
    return field


def save_checkpoint(path, field):
    _atomic_write(path, encode_checkpoint(field))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------------
# inspection outputs


def write_pgm(path, image, lo=None, hi=None):
    """Binary 8-bit PGM; values are scaled from [lo, hi] (default data range).  NaN maps to 0."""
    img = np.asarray(image, dtype=np.float64)
    finite = np.isfinite(img)
    lo = float(np.min(img[finite])) if lo is None and finite.any() else (lo or 0.0)
    hi = float(np.max(img[finite])) if hi is None and finite.any() else (hi if hi is not None else 1.0)
    span = hi - lo if hi > lo else 1.0
    scaled = np.where(finite, np.clip((img - lo) / span, 0.0, 1.0) * 255.0, 0.0)
    data = np.round(scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise BadMagic("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


REGION_FIELDS = ("center_x", "center_y", "center_z", "yaw", "half_x", "half_y", "half_z", "count")


def write_regions(path, regions, metadata=None):
    """Regions as JSON (``.json``) or whitespace text with a header line."""
    path = os.fspath(path)
    if path.endswith(".json"):
        doc = {"metadata": metadata or {}, "regions": [r.as_dict() for r in regions]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
        return
    with open(path, "w") as fh:
        for k, v in (metadata or {}).items():
            fh.write(f"# {k}: {v}\n")
        fh.write("# " + " ".join(REGION_FIELDS) + "\n")
        for r in regions:
            vals = [*r.center, r.yaw, *r.half_extents]
            fh.write(" ".join(repr(float(v)) for v in vals) + f" {int(r.count)}\n")


def read_regions(path):
    path = os.fspath(path)
    if path.endswith(".json"):
        with open(path) as fh:
            return [ChangeRegion.from_dict(d) for d in json.load(fh)["regions"]]
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            v = line.split()
            out.append(ChangeRegion(np.array(v[0:3], float), float(v[3]), np.array(v[4:7], float), int(v[7])))
    return out
