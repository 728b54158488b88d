"""Synthetic driving scenarios, dataset assembly and the training harness.

Scenes are ego-centric: a two-lane road band along x at z=0, walkable
margins either side, buildings on the outer edge, and agents as solid boxes
translated frame by frame by a small integer motion program.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as B
from . import flow
from .codec import ReferenceCodec
from .errors import AgentOutOfBounds, ScoreOutOfRange
from .grid import FREE, PEDESTRIAN, ROAD, VEHICLE, WALKABLE, GridSpec, SemanticGrid, load_grid, save_grid
from .text import stub_encode

TEMPLATES = ("cruise", "stop_at_line", "lead_follow", "cut_in", "turn_left", "turn_right",
             "pedestrian_cross")
BANDS = {"cruise": "low", "lead_follow": "low", "stop_at_line": "medium", "turn_left": "medium",
         "turn_right": "medium", "cut_in": "high", "pedestrian_cross": "high"}
BAND_PEAKS = {"low": 1.0, "medium": 4.0, "high": 7.0}
BAND_EDGES = ((0.0, 2.5, "low"), (2.5, 5.5, "medium"), (5.5, 10.0, "high"))

GENERAL, BICYCLE, MOTORCYCLE, CONE, VEGETATION, BUILDING = 0, 2, 3, 5, 6, 9
VEHICLE_SIZE = (6, 5, 3)
PEDESTRIAN_SIZE = (2, 2, 4)
EGO_LANE_Y = 12      # voxel y-centroid of the ego lane (lanes span y 8..16 and 16..24)
OTHER_LANE_Y = 20


@dataclass
class ScenarioSpec:
    template: str
    params: dict
    caption: str = ""
    criticality: float = 0.0

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if not self.caption:
            self.caption = caption_for(self.template, self.params)
        if not 0.0 <= self.criticality <= 10.0:
            raise ScoreOutOfRange(f"criticality {self.criticality} outside [0, 10]")


@dataclass
class CorpusRecord:
    grid: SemanticGrid
    caption: str
    criticality: float
    split: str = "train"
    template: str = ""
    params: dict = field(default_factory=dict)


def criticality_bin(s):
    if not 0.0 <= s <= 10.0:
        raise ScoreOutOfRange(f"criticality {s} outside [0, 10]")
    for lo, hi, name in BAND_EDGES:
        if lo <= s < hi:
            return name
    return "high"


# ---------------------------------------------------------------- captions

def _dir_word(d):
    return "positive" if d > 0 else "negative"


def caption_for(template, params):
    """Captions are a pure function of (template, params)."""
    d = params.get("direction", 1)
    if template == "cruise":
        if params.get("speed", 1) == 0:
            return "a vehicle stands still"
        return f"a vehicle moves toward {_dir_word(d)} x"
    if template == "stop_at_line":
        return f"a vehicle moving toward {_dir_word(d)} x stops at the line"
    if template == "lead_follow":
        return "the ego vehicle follows a lead car, no other traffic"
    if template == "cut_in":
        return "a car cuts in from the adjacent lane"
    if template in ("turn_left", "turn_right"):
        return f"a vehicle turns {template[5:]} at the junction"
    if template == "pedestrian_cross":
        side = "left" if params.get("side", 1) > 0 else "right"
        return f"a pedestrian crosses the road from the {side}"
    raise ValueError(template)


# ---------------------------------------------------------------- motion programs

def _track(x0, y0, vx, vy, frames, start=0, stop=None):
    """Integer positions: constant velocity between frames ``start`` and ``stop``."""
    out = []
    for f in range(frames):
        k = min(max(f - start, 0), (stop if stop is not None else frames) - start)
        out.append((x0 + vx * k, y0 + vy * k))
    return out


def sample_params(template, rng, frames=8, spec=None):
    """Draw template parameters that keep every agent inside the grid."""
    spec = spec or GridSpec.desk()
    X = spec.size_x
    sx = VEHICLE_SIZE[0]
    travel = lambda v: v * (frames - 1)
    d = int(rng.choice([-1, 1]))
    if template == "cruise":
        v = int(rng.integers(1, 3))
        lane = int(rng.choice([EGO_LANE_Y, OTHER_LANE_Y]))
        lo, hi = (0, X - sx - travel(v)) if d > 0 else (travel(v), X - sx)
        return {"direction": d, "speed": v, "lane_y": lane, "x0": int(rng.integers(lo, hi + 1))}
    if template == "stop_at_line":
        stop = int(rng.integers(2, max(3, frames - 1)))
        v = 2
        lo, hi = (0, X - sx - v * stop) if d > 0 else (v * stop, X - sx)
        return {"direction": d, "speed": v, "stop_frame": stop, "lane_y": EGO_LANE_Y,
                "x0": int(rng.integers(lo, hi + 1))}
    if template == "lead_follow":
        v = int(rng.integers(1, 3))
        gap = int(rng.integers(2, 5))
        lo, hi = 0, X - 2 * sx - gap - travel(v)
        return {"direction": 1, "speed": v, "gap": gap, "lane_y": EGO_LANE_Y,
                "x0": int(rng.integers(lo, hi + 1))}
    if template == "cut_in":
        f0 = int(rng.integers(0, max(1, frames - 4)))
        return {"direction": 1, "speed": 1, "start_frame": f0, "lateral_speed": 2,
                "x0": int(rng.integers(0, X - sx - travel(1) + 1))}
    if template in ("turn_left", "turn_right"):
        turn = int(rng.integers(2, max(3, frames - 2)))
        return {"direction": 1, "speed": 2, "turn_frame": turn, "lane_y": EGO_LANE_Y,
                "x0": int(rng.integers(0, X - sx - 2 * turn + 1))}
    if template == "pedestrian_cross":
        side = int(rng.choice([-1, 1]))
        return {"side": side, "speed": 2, "x_ped": int(rng.integers(12, 18)),
                "vehicle_x0": int(rng.integers(0, 4))}
    raise ValueError(template)


def agents_for(template, params, frames):
    """List of (class id, (sx, sy, sz), per-frame integer (x, y) lower corners)."""
    sx, sy, _ = VEHICLE_SIZE
    half = (sy - 1) // 2
    p = params
    if template == "cruise":
        track = _track(p["x0"], p["lane_y"] - half, p["direction"] * p["speed"], 0, frames)
        return [(VEHICLE, VEHICLE_SIZE, track)]
    if template == "stop_at_line":
        track = _track(p["x0"], p["lane_y"] - half, p["direction"] * p["speed"], 0, frames,
                       stop=p["stop_frame"])
        return [(VEHICLE, VEHICLE_SIZE, track)]
    if template == "lead_follow":
        follower = _track(p["x0"], p["lane_y"] - half, p["speed"], 0, frames)
        lead = _track(p["x0"] + sx + p["gap"], p["lane_y"] - half, p["speed"], 0, frames)
        return [(VEHICLE, VEHICLE_SIZE, follower), (VEHICLE, VEHICLE_SIZE, lead)]
    if template == "cut_in":
        f0 = p["start_frame"]
        lat = p["lateral_speed"]
        n_lat = (OTHER_LANE_Y - EGO_LANE_Y) // lat
        track = []
        for f in range(frames):
            k = min(max(f - f0, 0), n_lat)
            track.append((p["x0"] + p["speed"] * f, OTHER_LANE_Y - half - lat * k))
        return [(VEHICLE, VEHICLE_SIZE, track)]
    if template in ("turn_left", "turn_right"):
        vy = p["speed"] if template == "turn_left" else -p["speed"]
        y0 = p["lane_y"] - half
        track = []
        for f in range(frames):
            k = min(f, p["turn_frame"])
            track.append((p["x0"] + p["speed"] * k, y0 + vy * (f - k)))
        return [(VEHICLE, VEHICLE_SIZE, track)]
    if template == "pedestrian_cross":
        y0 = 4 if p["side"] > 0 else 26
        ped = _track(p["x_ped"], y0, 0, p["side"] * p["speed"], frames)
        car = _track(p["vehicle_x0"], EGO_LANE_Y - half, 1, 0, frames)
        return [(PEDESTRIAN, PEDESTRIAN_SIZE, ped), (VEHICLE, VEHICLE_SIZE, car)]
    raise ValueError(template)


def static_layout(spec, template):
    """Road band with walkable margins, buildings on the outer edge, a few props."""
    X, Y, Z = spec.sizes
    base = np.full((X, Y, Z), FREE, np.uint8)
    base[:, :, 0] = WALKABLE
    base[:, 8:24, 0] = ROAD
    base[:, :2, : min(Z, 5)] = BUILDING
    base[:, Y - 2:, : min(Z, 5)] = BUILDING
    base[2:4, 3:5, 1:4] = VEGETATION
    base[X - 4:X - 2, Y - 5:Y - 3, 1:4] = VEGETATION
    base[X - 9:X - 7, 4:5, 1:3] = BICYCLE        # parked two-wheelers on the margins
    base[6:9, Y - 5:Y - 4, 1:3] = MOTORCYCLE
    if template == "stop_at_line":
        base[X // 2, 6:8, 1] = CONE
        base[X // 2, 24:26, 1] = CONE
    if template == "pedestrian_cross":
        base[X - 6:X - 5, 5:6, 1:2] = GENERAL
    return base


def gen_scene(spec, gridspec=None, rng=None, frames=8):
    """Render a :class:`ScenarioSpec` into a :class:`CorpusRecord`."""
    gridspec = gridspec or GridSpec.desk()
    X, Y, Z = gridspec.sizes
    base = static_layout(gridspec, spec.template)
    ids = np.repeat(base[None], frames, axis=0)
    for cls, (sx, sy, sz), track in agents_for(spec.template, spec.params, frames):
        for f, (x, y) in enumerate(track):
            if x < 0 or y < 0 or x + sx > X or y + sy > Y or 1 + sz > Z:
                raise AgentOutOfBounds(
                    f"{spec.template}: agent box at ({x}, {y}) leaves the grid in frame {f}")
            ids[f, x:x + sx, y:y + sy, 1:1 + sz] = cls
    return CorpusRecord(SemanticGrid(gridspec, ids), spec.caption, spec.criticality,
                        template=spec.template, params=dict(spec.params))


def make_scenario(template, rng, frames=8, gridspec=None):
    params = sample_params(template, rng, frames, gridspec)
    band = BANDS[template]
    lo, hi = next((lo, hi) for lo, hi, name in BAND_EDGES if name == band)
    s = float(np.clip(BAND_PEAKS[band] + 0.5 * rng.standard_normal(), lo, np.nextafter(hi, lo)))
    return ScenarioSpec(template, params, criticality=round(s, 3))


def _split_rank(seed, i):
    return hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()


def make_dataset(n, gridspec=None, seed=0, templates=TEMPLATES, frames=8):
    """``n`` records cycling through ``templates``; the n//10 lowest-hash indices are val.

    An entry of ``templates`` may be a ``(name, overrides)`` pair that forces
    some parameters (e.g. the direction); the start position is then redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gridspec = gridspec or GridSpec.desk()
    val = set(sorted(range(n), key=lambda i: _split_rank(seed, i))[: n // 10])
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        tmpl = templates[i % len(templates)]
        name, overrides = (tmpl, {}) if isinstance(tmpl, str) else tmpl
        sc = make_scenario(name, rng, frames, gridspec)
        if overrides:
            sc = ScenarioSpec(name, _refit(name, {**sc.params, **overrides}, gridspec, frames, rng),
                              criticality=sc.criticality)
        rec = gen_scene(sc, gridspec, frames=frames)
        rec.split = "val" if i in val else "train"
        out.append(rec)
    return out


def _refit(template, params, spec, frames, rng):
    # re-draw the start position so forced overrides stay in bounds
    if template == "cruise":
        sx = VEHICLE_SIZE[0]
        travel = params["speed"] * (frames - 1)
        lo, hi = (0, spec.size_x - sx - travel) if params["direction"] > 0 else (travel, spec.size_x - sx)
        band = params.get("start_band")
        if band is not None:
            # start within `band` voxels of the trailing edge
            lo, hi = (lo, min(hi, lo + band)) if params["direction"] > 0 else (max(lo, hi - band), hi)
        params["x0"] = int(rng.integers(lo, hi + 1))
    return params


DIRECTION_PROMPTS = ("a vehicle moves toward positive x", "a vehicle moves toward negative x")


def make_direction_corpus(n=512, gridspec=None, seed=0, frames=8):
    """Two-template corpus: one vehicle cruising toward +x or toward -x.

    Each vehicle starts near the edge it drives away from, so the prompt
    also fixes where the motion begins.
    """
    templates = (("cruise", {"direction": 1, "start_band": 3}),
                 ("cruise", {"direction": -1, "start_band": 3}))
    return make_dataset(n, gridspec, seed, templates, frames)


# ---------------------------------------------------------------- manifest

def write_corpus(records, out_dir):
    """Save grids as OCCG files plus a JSON-lines manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.jsonl")
    with open(path, "w") as fh:
        for i, rec in enumerate(records):
            name = f"grid_{i:05d}.occg"
            save_grid(os.path.join(out_dir, name), rec.grid)
            row = {"grid_path": name, "caption": rec.caption, "criticality": rec.criticality,
                   "split": rec.split, "template": rec.template}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_corpus(manifest):
    base = os.path.dirname(os.path.abspath(manifest))
    out = []
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            grid = load_grid(os.path.join(base, row["grid_path"]))
            out.append(CorpusRecord(grid, row["caption"], row["criticality"], row["split"],
                                    row.get("template", "")))
    return out


# ---------------------------------------------------------------- latent statistics

@dataclass
class LatentStats:
    """Standardisation of codec latents.

    The mean is either per channel, shape (C,), or per channel and map
    cell, shape (C, H, W).  The second form removes the layout every clip
    shares, which a model that only sees relative positions cannot place
    on its own.  The scale is always per channel.

    Channels that are constant over the whole fitting set carry no
    information; they are dropped by :meth:`normalize` and restored with
    their constant value by :meth:`denormalize`.
    """

    mean: np.ndarray   # (C,) or (C, H, W)
    std: np.ndarray    # (C,)
    keep: np.ndarray = None  # (C,) bool

    def __post_init__(self):
        self.mean = np.asarray(self.mean, np.float32)
        self.std = np.asarray(self.std, np.float32)
        if self.mean.ndim not in (1, 3) or len(self.mean) != len(self.std):
            raise ValueError(f"mean shape {self.mean.shape} does not fit std shape {self.std.shape}")
        self.keep = np.ones(len(self.std), bool) if self.keep is None else np.asarray(self.keep, bool)

    @classmethod
    def fit(cls, latents, floor=0.05, per_cell=False):
        x = np.asarray(latents, np.float64)          # N, C, F, H, W
        axes = (0,) + tuple(range(2, x.ndim))
        if per_cell:
            mean = x.mean(axis=(0, 2))
            r = x - mean[:, None]
        else:
            mean = x.mean(axis=axes)
            r = x - mean[:, None, None, None]
        keep = (r.max(axis=axes) - r.min(axis=axes)) > 1e-6
        return cls(mean, np.maximum(r.std(axis=axes), floor), keep)

    @classmethod
    def identity(cls, channels):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    @property
    def channels(self):
        return len(self.std)

    def _mean(self, k):
        m = self.mean[k]
        return m[:, None, None, None] if m.ndim == 1 else m[:, None]

    @property
    def active(self):
        return int(self.keep.sum())

    def normalize(self, x):
        """(..., C, F, H, W) codec latents -> (..., active, F, H, W) model latents."""
        x = np.asarray(x, np.float32)
        k = self.keep
        sel = x[..., k, :, :, :]
        return ((sel - self._mean(k)) / self.std[k, None, None, None]).astype(np.float32)

    def denormalize(self, z):
        z = np.asarray(z, np.float32)
        k = self.keep
        shape = z.shape[:-4] + (self.channels,) + z.shape[-3:]
        out = np.broadcast_to(self._mean(slice(None)), shape).astype(np.float32)
        out[..., k, :, :, :] = z * self.std[k, None, None, None] + self._mean(k)
        return out

    def arrays(self):
        return {"norm.mean": self.mean, "norm.std": self.std, "norm.keep": self.keep.astype(np.float32)}

    @classmethod
    def from_arrays(cls, arrays):
        keep = arrays.get("norm.keep")
        return cls(arrays["norm.mean"], arrays["norm.std"], None if keep is None else keep > 0.5)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.95)
    checkpoint_every: int = 500
    downsample: int = 4
    seed: int = 0
    per_cell_mean: bool = True   # centre latents per map cell, see LatentStats


@dataclass
class TrainResult:
    losses: list
    checkpoints: list
    stats: LatentStats
    params: dict
    baseline: float = float("nan")
    model_cfg: B.ModelConfig = None


def encode_records(records, codec):
    return np.stack([codec.encode(r.grid) for r in records])


def zero_predictor_loss(batch):
    """Masked MSE of a model that always predicts zero velocity."""
    return float(flow.anchored_loss(np.zeros_like(batch.x0), batch.x0, batch.x1, batch.h).data)


def _ckpt_path(out_dir, it):
    return os.path.join(out_dir, f"ckpt_{it:06d}.occw")


def train_loop(records, model_cfg, scfg, tcfg, out_dir=None, resume=None, log_every=0, progress=None):
    """Run flow-matching training on the train split.

    Each iteration draws from ``default_rng([seed, iteration])`` so a run
    resumed from a checkpoint continues bit-identically.  Checkpoints hold
    parameters, AdamW moments, latent statistics and the iteration counter.
    """
    train = [r for r in records if r.split == "train"] or list(records)
    if not train:
        raise ValueError("corpus is empty")
    gridspec = train[0].grid.spec
    codec = ReferenceCodec(gridspec, tcfg.downsample)
    latents = encode_records(train, codec)
    feats_cache = {}
    feats = []
    for r in train:
        if r.caption not in feats_cache:
            feats_cache[r.caption] = stub_encode(r.caption, model_cfg.d_text, seed=tcfg.seed)
        feats.append(feats_cache[r.caption])

    opt = flow.AdamW(tcfg.lr, tcfg.betas, weight_decay=tcfg.weight_decay)
    start = 0
    if resume is not None:
        cfg_r, arrays = B.load_checkpoint(resume)
        if replace(cfg_r, latent_channels=model_cfg.latent_channels) != model_cfg:
            raise ValueError("checkpoint config differs from the requested model config")
        model_cfg = cfg_r
        params = B.as_params(_model_arrays(arrays))
        opt.load_state_arrays(arrays)
        stats = LatentStats.from_arrays(arrays)
        start = int(arrays["train.iteration"][0])
    else:
        stats = LatentStats.fit(latents, per_cell=tcfg.per_cell_mean)
        if model_cfg.latent_channels != stats.active:
            # the model sees only the channels that vary over the corpus
            model_cfg = replace(model_cfg, latent_channels=stats.active)
        params = B.init_params(model_cfg, tcfg.seed)
    data = stats.normalize(latents)

    losses, ckpts = [], []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss_log.csv")
        fresh = resume is None or not os.path.exists(log_path)
        log_fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(["iteration", "loss", "anchored_flag_rate", "cfg_flag_rate"])
    baseline = float("nan")
    try:
        for it in range(start, tcfg.iterations):
            rng = np.random.default_rng([tcfg.seed, it])
            idx = rng.integers(0, len(train), size=tcfg.batch_size)
            # a NumericalFailure propagates; checkpoints are written atomically,
            # so the last good one on disk stays intact
            loss, batch = flow.training_step(params, model_cfg, opt, data[idx],
                                             [feats[i] for i in idx], rng, scfg)
            if it == start:
                baseline = zero_predictor_loss(batch)
            losses.append(loss)
            if log_fh is not None:
                writer.writerow([it + 1, f"{loss:.6f}", f"{batch.anchor_flag.mean():.4f}",
                                 f"{batch.cfg_drop_flag.mean():.4f}"])
            if progress is not None and log_every and (it + 1) % log_every == 0:
                progress(it + 1, float(np.mean(losses[-log_every:])))
            done = it + 1
            if out_dir is not None and (done % tcfg.checkpoint_every == 0 or done == tcfg.iterations):
                path = _ckpt_path(out_dir, done)
                save_training_checkpoint(path, model_cfg, params, opt, stats, done)
                ckpts.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(losses, ckpts, stats, params, baseline, model_cfg)


def save_training_checkpoint(path, model_cfg, params, opt, stats, iteration):
    arrays = dict(B.param_arrays(params))
    arrays.update(stats.arrays())
    arrays.update(opt.state_arrays())
    arrays["train.iteration"] = np.array([iteration], np.float32)
    B.save_checkpoint(path, model_cfg, arrays)


def _model_arrays(arrays):
    return {k: v for k, v in arrays.items() if not k.startswith(("adam.", "norm.", "train."))}


def load_model(path):
    """(config, params, latent stats) from a checkpoint written by :func:`train_loop`."""
    cfg, arrays = B.load_checkpoint(path)
    params = B.as_params(_model_arrays(arrays))
    stats = LatentStats.from_arrays(arrays) if "norm.mean" in arrays else LatentStats.identity(cfg.latent_channels)
    return cfg, params, stats
