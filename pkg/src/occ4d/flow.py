"""Flow matching with history-prefix anchoring, CFG dropout, the anchored Euler sampler.

Convention: ``x_t = (1 - t) x0 + t x1`` with t=0 clean and t=1 noise, so the
regression target is ``x1 - x0`` and sampling integrates from t=1 down to 0.
Frames live on axis -3 of every latent array, batched or not.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .backbone import Condition, model_forward
from .errors import HorizonOutOfRange, NumericalFailure, ShapeMismatch

FRAME_AXIS = -3


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    cfg_scale: float = 7.5
    p_anchor: float = 0.5
    p_cfg: float = 0.15

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        for name in ("p_anchor", "p_cfg"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class FlowBatch:
    x0: np.ndarray            # (B, C, F, H, W)
    x1: np.ndarray
    t: np.ndarray             # (B,)
    h: np.ndarray             # (B,) horizon used for input replacement and loss
    anchor_flag: np.ndarray   # (B,) bool
    cfg_drop_flag: np.ndarray  # (B,) bool

    @property
    def x_t(self):
        return make_path(self.x0, self.x1, self.t)

    @property
    def model_input(self):
        return replace_history(self.x_t, self.x0, self.h)


def _time_shape(t, ndim):
    t = np.asarray(t, np.float32)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def make_path(x0, x1, t):
    """Linear path (1 - t) x0 + t x1; ``t`` is a scalar or one value per batch row."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs x1 {x1.shape}")
    t = _time_shape(t, x0.ndim)
    return ((1 - t) * x0 + t * x1).astype(np.float32)


def _horizons(h, batch_shape):
    h = np.asarray(h, dtype=np.int64)
    return h.reshape(batch_shape) if h.ndim else np.broadcast_to(h, batch_shape)


def frame_mask(shape, h):
    """Boolean mask over ``shape`` that is True on frames >= h (the future)."""
    frames = shape[FRAME_AXIS]
    lead = shape[: len(shape) - 4]
    hs = _horizons(h, lead)
    if np.any(hs < 0) or np.any(hs > frames):
        raise HorizonOutOfRange(f"horizon {h} outside [0, {frames}]")
    future = np.arange(frames) >= hs[..., None]           # lead + (F,)
    future = future.reshape(lead + (1, frames, 1, 1))
    return np.broadcast_to(future, shape)


def replace_history(x_t, x0, h):
    """Frames before ``h`` come from ``x0``, the rest from ``x_t``.

    ``x0`` may be a full clip or just the history prefix (at least ``max(h)``
    frames).  A fresh array is returned; inputs are never mutated.
    """
    x_t = np.asarray(x_t)
    x0 = np.asarray(x0)
    future = frame_mask(x_t.shape, h)
    frames = x_t.shape[FRAME_AXIS]
    if x0.shape[FRAME_AXIS] < frames:
        if x0.shape[FRAME_AXIS] < int(np.max(h, initial=0)):
            raise HorizonOutOfRange(f"history has {x0.shape[FRAME_AXIS]} frames, h={h}")
        x0 = np.broadcast_to(x0, x_t.shape[:-4] + x0.shape[-4:])
        pad = [(0, 0)] * x0.ndim
        pad[FRAME_AXIS] = (0, frames - x0.shape[FRAME_AXIS])
        x0 = np.pad(x0, pad)
    return np.where(future, x_t, np.broadcast_to(x0, x_t.shape)).astype(x_t.dtype)


def anchored_loss(v_pred, x0, x1, h=0):
    """Mean squared error to ``x1 - x0`` over future frames only (>= h).

    ``v_pred`` may be a Tensor (loss is differentiable) or an array.  An
    empty mask (h = F) gives 0.
    """
    target = np.asarray(x1, np.float32) - np.asarray(x0, np.float32)
    v_pred = T.as_tensor(v_pred)
    if v_pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {v_pred.shape} vs target {target.shape}")
    mask = frame_mask(target.shape, h).astype(np.float32)
    count = float(mask.sum())
    if count == 0:
        return T.mul(T.sum_(v_pred), 0.0)
    err = T.square(T.sub(v_pred, target))
    return T.scale(T.sum_(T.mul(err, mask)), 1.0 / count)


def cfg_velocity(v_cond, v_uncond, s):
    """Classifier-free guidance blend v_u + s (v_c - v_u).

    Written as s v_c + (1 - s) v_u so that s=1 and s=0 return the inputs bit-exactly.
    """
    v_cond = np.asarray(v_cond)
    v_uncond = np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ShapeMismatch(f"{v_cond.shape} vs {v_uncond.shape}")
    if s == 1:
        return v_cond.copy()
    if s == 0:
        return v_uncond.copy()
    return (s * v_cond + (1 - s) * v_uncond).astype(v_cond.dtype)


# ---------------------------------------------------------------- training

def sample_flags(rng, batch, frames, scfg):
    """Independent draws of t, anchor/CFG flags and horizons (order is fixed)."""
    t = rng.random(batch).astype(np.float32)
    anchor = rng.random(batch) < scfg.p_anchor
    drop = rng.random(batch) < scfg.p_cfg
    if frames >= 2:
        h = rng.integers(1, frames, size=batch)
    else:
        h = np.zeros(batch, np.int64)
    return t, anchor, drop, np.where(anchor, h, 0)


def make_batch(x0, rng, scfg):
    x0 = np.asarray(x0, np.float32)
    b, frames = x0.shape[0], x0.shape[FRAME_AXIS]
    t, anchor, drop, h = sample_flags(rng, b, frames, scfg)
    x1 = rng.standard_normal(x0.shape).astype(np.float32)
    return FlowBatch(x0, x1, t, h, anchor, drop)


class AdamW:
    """Adam with decoupled weight decay; state is plain numpy for checkpointing."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m, self.v = {}, {}
        self.step_count = 0

    def step(self, params):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)
            p.grad = None

    def state_arrays(self):
        out = {"adam.step": np.array([self.step_count], np.float32)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["adam.step"][0])
        self.m = {k[7:]: np.array(v) for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[7:]: np.array(v) for k, v in arrays.items() if k.startswith("adam.v.")}


def training_step(params, cfg, opt, x0, features, rng, scfg):
    """One flow-matching update on a batch of clean latents.

    ``features`` holds one TextFeatures per row.  Returns (loss, FlowBatch).
    """
    batch = make_batch(x0, rng, scfg)
    cond = Condition.from_features(features, null_flags=batch.cfg_drop_flag)
    for p in params.values():
        p.grad = None
    with T.finite_checks(False):
        pred = model_forward(params, cfg, batch.model_input, batch.t, cond)
        loss = anchored_loss(pred, batch.x0, batch.x1, batch.h)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalFailure(f"non-finite training loss {value}")
    loss.backward()
    opt.step(params)
    return value, batch


# ---------------------------------------------------------------- sampling

def euler_sample(v_cond, v_uncond, shape, scfg, rng, history=None, h=0, on_step=None):
    """Anchored Euler integration from t=1 to t=0 with CFG blending.

    ``v_cond(x, t)`` / ``v_uncond(x, t)`` return velocities for a batch of
    latents; only the branches the guidance scale needs are evaluated.
    ``history`` holds at least ``h`` clean frames; they replace the first
    ``h`` frames of the network input and of the state after every step.
    ``on_step(k, x)`` is called after every update, for auditing.
    """
    frames = shape[FRAME_AXIS]
    if not 0 <= h <= frames:
        raise HorizonOutOfRange(f"h={h} outside [0, {frames}]")
    if h:
        if history is None:
            raise HorizonOutOfRange("a history is required when h > 0")
        history = np.asarray(history, np.float32)
        if history.shape[FRAME_AXIS] < h:
            raise HorizonOutOfRange(f"history has {history.shape[FRAME_AXIS]} frames, h={h}")
        history = np.broadcast_to(history, shape[:-4] + history.shape[-4:])
        idx = [slice(None)] * len(shape)
        idx[FRAME_AXIS] = slice(0, h)
        history = np.array(history[tuple(idx)])
    x = rng.standard_normal(shape).astype(np.float32)
    if h == frames:
        return history
    s = scfg.cfg_scale
    dt = np.float32(1.0 / scfg.steps)
    for k in range(scfg.steps):
        t = np.float32(1.0 - k / scfg.steps)
        x_in = replace_history(x, history, h) if h else x
        if s == 1:
            v = v_cond(x_in, t)
        elif s == 0:
            v = v_uncond(x_in, t)
        else:
            v = cfg_velocity(v_cond(x_in, t), v_uncond(x_in, t), s)
        x = (x_in - dt * v).astype(np.float32)
        if h:
            x = replace_history(x, history, h)
        if on_step is not None:
            on_step(k, x)
    return x


def sample(params, cfg, features, frames, scfg, rng, history=None, h=0, on_step=None):
    """Generate one latent clip per entry of ``features`` (TextFeatures).

    ``history`` is (B, C, h', H, W) or (C, h', H, W) with h' >= h.
    Returns (B, C, F, H, W) float32 latents.
    """
    features = list(features)
    b = len(features)
    cond = Condition.from_features(features)
    uncond = Condition.null(b, cond.values.shape[-1])

    def v_cond(x, t):
        with T.no_grad():
            return model_forward(params, cfg, x, t, cond).data

    def v_uncond(x, t):
        with T.no_grad():
            return model_forward(params, cfg, x, t, uncond).data

    shape = (b, cfg.latent_channels, frames, cfg.latent_h, cfg.latent_w)
    return euler_sample(v_cond, v_uncond, shape, scfg, rng, history, h, on_step)


def sample_record(seed, steps, cfg_scale, h, prompt, checkpoint_path, output_path):
    return {"seed": seed, "steps": steps, "cfg_scale": cfg_scale, "h": h, "prompt": prompt,
            "checkpoint_path": checkpoint_path, "output_path": output_path}


def write_sample_record(path, **fields):
    with open(path, "w") as fh:
        json.dump(sample_record(**fields), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- cost model

def flops_model(F, S, L, d, num_heads, mode="stsa"):
    """Analytic attention score work (MACs) and peak attention-map elements.

    STSA: per-frame joint maps of (L+S)^2 plus per-tube temporal maps of F^2.
    Full: one (F*S + L)^2 map.  The peak is the largest single map set
    materialised at once, times the head count.
    """
    for v in (F, S, L, d, num_heads):
        if v <= 0:
            raise ValueError("dimensions must be positive")
    if mode == "stsa":
        spatial = F * (L + S) ** 2 * d
        temporal = S * F ** 2 * d
        peak = num_heads * max(F * (L + S) ** 2, S * F ** 2)
        return {"mode": mode, "spatial_macs": spatial, "temporal_macs": temporal,
                "attention_macs": spatial + temporal, "peak_activation": peak,
                "spatial_peak": num_heads * F * (L + S) ** 2, "temporal_peak": num_heads * S * F ** 2}
    if mode == "full":
        n = F * S + L
        return {"mode": mode, "attention_macs": n * n * d, "peak_activation": num_heads * n * n}
    raise ValueError(f"unknown mode {mode!r}")


def config_dict(scfg):
    return asdict(scfg)
