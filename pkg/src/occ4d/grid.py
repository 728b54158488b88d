"""Semantic occupancy grids: metadata, label standardisation, resampling, BEV.

Voxel storage is one unsigned byte per voxel, frame-major then x, y, z.
Index ``i`` along an axis addresses the voxel whose lower corner sits at
``range_min + i * voxel_size``; metric queries return voxel centres.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    FormatError,
    IndexOutOfBounds,
    PaletteSizeMismatch,
    UnknownSourceLabel,
)

UNIFIED_CLASSES = (
    "General Object",
    "Vehicle",
    "Bicycle",
    "Motorcycle",
    "Pedestrian",
    "Traffic Cone",
    "Vegetation",
    "Road",
    "Walkable/Terrain",
    "Building",
    "Free",
)
VEHICLE, PEDESTRIAN, ROAD, WALKABLE, FREE = 1, 4, 7, 8, 10

# one RGB triple per unified class, index-aligned with UNIFIED_CLASSES
PALETTE = np.array(
    [
        (255, 120, 50),   # general object
        (100, 150, 245),  # vehicle
        (100, 230, 245),  # bicycle
        (30, 60, 150),    # motorcycle
        (255, 30, 30),    # pedestrian
        (255, 240, 150),  # traffic cone
        (0, 175, 0),      # vegetation
        (255, 0, 255),    # road
        (150, 240, 80),   # walkable / terrain
        (230, 230, 250),  # building
        (0, 0, 0),        # free
    ],
    dtype=np.uint8,
)


def _f32(v):
    return float(np.float32(v))


@dataclass(frozen=True)
class GridSpec:
    """Voxel counts, metric extent and label space of a grid.

    ``voxel_size`` may be a scalar (isotropic) or an (x, y, z) triple; it is
    stored as a triple.  Defaults are the 200x200x16, 0.4 m standard grid.
    """

    size_x: int = 200
    size_y: int = 200
    size_z: int = 16
    voxel_size: tuple = 0.4
    x_range: tuple = (-40.0, 40.0)
    y_range: tuple = (-40.0, 40.0)
    z_range: tuple = (-3.2, 3.2)
    rate_hz: float = 2.0
    num_classes: int = 11

    def __post_init__(self):
        vs = self.voxel_size
        if np.isscalar(vs):
            vs = (vs, vs, vs)
        # metadata is stored as float32 on disk; canonicalise so files round-trip
        object.__setattr__(self, "voxel_size", tuple(_f32(v) for v in vs))
        for name in ("x_range", "y_range", "z_range"):
            object.__setattr__(self, name, tuple(_f32(v) for v in getattr(self, name)))
        object.__setattr__(self, "rate_hz", _f32(self.rate_hz))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for n, v, (lo, hi), axis in zip(self.sizes, self.voxel_size, self.ranges, "xyz"):
            if n < 1 or v <= 0:
                raise ValueError(f"bad {axis} axis: size {n}, voxel {v}")
            if not math.isclose(n * v, hi - lo, rel_tol=1e-5):
                raise ValueError(f"{axis}: {n} voxels x {v} m does not cover [{lo}, {hi}]")

    @classmethod
    def desk(cls):
        """32x32x8 grid at 0.4 m used for CPU-scale experiments."""
        return cls(32, 32, 8, 0.4, (-6.4, 6.4), (-6.4, 6.4), (-1.6, 1.6))

    @property
    def sizes(self):
        return (self.size_x, self.size_y, self.size_z)

    @property
    def ranges(self):
        return (self.x_range, self.y_range, self.z_range)

    @property
    def free_id(self):
        return self.num_classes - 1

    def with_xy(self, n):
        """Same metric extent resampled to ``n`` x ``n`` columns."""
        return replace(
            self,
            size_x=n,
            size_y=n,
            voxel_size=(
                (self.x_range[1] - self.x_range[0]) / n,
                (self.y_range[1] - self.y_range[0]) / n,
                self.voxel_size[2],
            ),
        )


@dataclass
class SemanticGrid:
    spec: GridSpec
    ids: np.ndarray  # (F, X, Y, Z) uint8

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim == 3:
            ids = ids[None]
        if ids.ndim != 4 or ids.shape[1:] != self.spec.sizes:
            raise ValueError(f"ids shape {ids.shape} does not match grid {self.spec.sizes}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.spec.num_classes):
            raise ValueError(f"class ids must lie in [0, {self.spec.num_classes - 1}]")
        self.ids = np.ascontiguousarray(ids, dtype=np.uint8)

    @property
    def frames(self):
        return self.ids.shape[0]

    @classmethod
    def empty(cls, spec, frames=1):
        return cls(spec, np.full((frames,) + spec.sizes, spec.free_id, dtype=np.uint8))

    def __eq__(self, other):
        return (
            isinstance(other, SemanticGrid)
            and self.spec == other.spec
            and np.array_equal(self.ids, other.ids)
        )


# ---------------------------------------------------------------- label maps

def _key(label):
    return str(label).strip().lower()


@dataclass
class LabelMap:
    source_name: str
    entries: list = field(default_factory=list)  # [(source_label, unified_id)]

    def __post_init__(self):
        self.entries = [(str(s), int(u)) for s, u in self.entries]
        for s, u in self.entries:
            if not 0 <= u <= 10:
                raise ValueError(f"unified id {u} for {s!r} outside [0, 10]")
        self._lookup = {_key(s): u for s, u in self.entries}

    def __getitem__(self, label):
        try:
            return self._lookup[_key(label)]
        except KeyError:
            raise UnknownSourceLabel(label) from None

    def __contains__(self, label):
        return _key(label) in self._lookup

    @classmethod
    def identity(cls, num_classes=11):
        return cls("unified", [(str(i), i) for i in range(num_classes)])

    def to_json(self):
        return json.dumps(
            {
                "source_name": self.source_name,
                "entries": [{"source": s, "unified_id": u} for s, u in self.entries],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
            entries = [(e["source"], e["unified_id"]) for e in doc["entries"]]
            return cls(doc["source_name"], entries)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed label map: {exc}") from None


def _table(name, rows):
    return LabelMap(name, [(label, uid) for uid, labels in rows.items() for label in labels])


UNIOCC = LabelMap("uniocc", [(n, i) for i, n in enumerate(UNIFIED_CLASSES)])
NUSCENES = _table("nuscenes", {
    0: ["General object", "Barrier"],
    1: ["Bus", "Car", "Construction vehicle", "Trailer", "Truck"],
    2: ["Bicycle"],
    3: ["Motorcycle"],
    4: ["Pedestrian"],
    5: ["Traffic cone"],
    6: ["Vegetation"],
    7: ["Drivable surface"],
    8: ["Sidewalk", "Terrain", "Other flat"],
    9: ["Manmade"],
    10: ["Free"],
})
WAYMO = _table("waymo", {
    0: ["General object", "Pole", "Sign"],
    1: ["Vehicle"],
    2: ["Bicycle"],
    3: ["Motorcycle"],
    4: ["Pedestrian", "Cyclist"],
    5: ["Traffic light", "Construction cone"],
    6: ["Vegetation", "Tree trunk"],
    7: ["Road"],
    8: ["Walkable"],
    9: ["Building"],
    10: ["Free"],
})
CARLA = _table("carla", {
    0: ["Fences", "Other", "Poles", "Walls", "Traffic signs"],
    1: ["Vehicles"],
    4: ["Pedestrians"],
    6: ["Vegetation"],
    7: ["Roadlines", "Roads"],
    8: ["Sidewalks", "Ground"],
    9: ["Buildings"],
    10: ["Free", "Sky"],
})
BUILTIN_MAPS = {m.source_name: m for m in (UNIOCC, NUSCENES, WAYMO, CARLA)}


def map_labels(raw, label_map, spec=None, vocabulary=None):
    """Translate source-labelled voxels to unified class ids.

    ``raw`` is an (F, X, Y, Z) (or (X, Y, Z)) array of label strings or of
    integer source ids.  Integer ids are looked up through ``vocabulary``
    (id -> label name) when given, otherwise by their decimal string.
    """
    raw = np.asarray(raw)
    uniq, inverse = np.unique(raw, return_inverse=True)
    lut = np.empty(len(uniq), dtype=np.uint8)
    for i, label in enumerate(uniq):
        if vocabulary is not None and np.issubdtype(raw.dtype, np.integer):
            label = vocabulary[int(label)]
        lut[i] = label_map[label]
    ids = lut[inverse.reshape(raw.shape)]
    if spec is None:
        shape = ids.shape[-3:]
        spec = GridSpec(*shape) if shape == (200, 200, 16) else None
        if spec is None:
            raise ValueError("spec is required for non-standard grid shapes")
    return SemanticGrid(spec, ids)


# ---------------------------------------------------------------- geometry

def voxel_to_metric(index, spec):
    """Centre of voxel ``(ix, iy, iz)`` in metres."""
    out = []
    for i, n, v, (lo, _) in zip(index, spec.sizes, spec.voxel_size, spec.ranges):
        if not 0 <= i < n:
            raise IndexOutOfBounds(f"index {tuple(index)} outside grid {spec.sizes}")
        out.append(lo + (i + 0.5) * v)
    return tuple(out)


def metric_to_voxel(point, spec):
    """Index of the voxel containing ``point``."""
    out = []
    for x, n, v, (lo, _) in zip(point, spec.sizes, spec.voxel_size, spec.ranges):
        i = int(math.floor((x - lo) / v))
        if not 0 <= i < n:
            raise IndexOutOfBounds(f"point {tuple(point)} outside grid")
        out.append(i)
    return tuple(out)


def nearest_indices(src, dst):
    """Nearest-neighbour source index for each of ``dst`` output cells."""
    return np.floor((np.arange(dst) + 0.5) * src / dst).astype(np.intp)


def resample_ids(grid, target_xy):
    """Resample the x/y axes to ``target_xy`` cells by nearest neighbour.

    Class ids are categorical, so no blending happens; z and frames are kept.
    """
    if target_xy < 1:
        raise ValueError("target_xy must be >= 1")
    spec = grid.spec
    if target_xy == spec.size_x == spec.size_y:
        return SemanticGrid(spec, grid.ids.copy())
    ix = nearest_indices(spec.size_x, target_xy)
    iy = nearest_indices(spec.size_y, target_xy)
    ids = grid.ids[:, ix][:, :, iy]
    return SemanticGrid(spec.with_xy(target_xy), ids)


def render_bev(frame, palette=PALETTE, free_id=None):
    """Top-down RGB image (X, Y, 3): colour of the highest non-free voxel per column."""
    ids = np.asarray(frame)
    palette = np.asarray(palette, dtype=np.uint8)
    if free_id is None:
        free_id = len(palette) - 1
    if ids.ndim != 3:
        raise ValueError("render_bev expects a single (X, Y, Z) frame")
    if ids.size and int(ids.max()) >= len(palette):
        raise PaletteSizeMismatch(f"palette has {len(palette)} colours, grid uses id {ids.max()}")
    return palette[bev_classes(ids, free_id)]


def bev_classes(ids, free_id):
    """Class id of the topmost non-free voxel of every column (free if none)."""
    occupied = ids != free_id
    nz = ids.shape[-1]
    top = nz - 1 - np.argmax(occupied[..., ::-1], axis=-1)
    cls = np.take_along_axis(ids, top[..., None], axis=-1)[..., 0]
    return np.where(occupied.any(axis=-1), cls, free_id).astype(np.uint8)


def render_grid_bev(grid, palette=PALETTE):
    """BEV images for every frame, shape (F, X, Y, 3)."""
    if len(palette) != grid.spec.num_classes:
        raise PaletteSizeMismatch(f"palette has {len(palette)} colours, grid has {grid.spec.num_classes} classes")
    return np.stack([render_bev(f, palette, grid.spec.free_id) for f in grid.ids])


# ---------------------------------------------------------------- image io

def encode_ppm(img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def decode_ppm(data):
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise FormatError("not a binary 8-bit PPM")
    w, h = int(parts[1]), int(parts[2])
    pix = parts[4]
    if len(pix) != w * h * 3:
        raise FormatError("PPM payload size mismatch")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_png(path, img):
    from PIL import Image  # optional dependency

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------- OCCG v1

OCCG_MAGIC = b"OCCG"
OCCG_VERSION = 1
_OCCG_HEAD = struct.Struct("<4sI8x")
_OCCG_DIMS = struct.Struct("<5I")
_OCCG_META = struct.Struct("<10f")


def encode_grid(grid):
    s = grid.spec
    meta = s.voxel_size + s.x_range + s.y_range + s.z_range + (s.rate_hz,)
    return b"".join([
        _OCCG_HEAD.pack(OCCG_MAGIC, OCCG_VERSION),
        _OCCG_DIMS.pack(grid.frames, s.size_x, s.size_y, s.size_z, s.num_classes),
        _OCCG_META.pack(*meta),
        grid.ids.tobytes(),
    ])


def decode_grid(data):
    head = _OCCG_HEAD.size + _OCCG_DIMS.size + _OCCG_META.size
    if len(data) < head:
        raise FormatError("OCCG file truncated in header")
    magic, version = _OCCG_HEAD.unpack_from(data, 0)
    if magic != OCCG_MAGIC or version != OCCG_VERSION:
        raise FormatError(f"not an OCCG v1 file (magic {magic!r}, version {version})")
    f, x, y, z, k = _OCCG_DIMS.unpack_from(data, _OCCG_HEAD.size)
    m = _OCCG_META.unpack_from(data, _OCCG_HEAD.size + _OCCG_DIMS.size)
    payload = data[head:]
    if len(payload) != f * x * y * z:
        raise FormatError(f"OCCG payload has {len(payload)} bytes, expected {f * x * y * z}")
    spec = GridSpec(x, y, z, m[0:3], m[3:5], m[5:7], m[7:9], m[9], k)
    ids = np.frombuffer(payload, dtype=np.uint8).reshape(f, x, y, z)
    return SemanticGrid(spec, ids.copy())


def save_grid(path, grid):
    with open(path, "wb") as fh:
        fh.write(encode_grid(grid))


def load_grid(path):
    with open(path, "rb") as fh:
        return decode_grid(fh.read())
