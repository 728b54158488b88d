"""Spatio-temporal dual-stream diffusion transformer.

Each block runs, in order:

1. per-stream modulation from the timestep embedding (AdaLN),
2. frame-wise joint attention over ``[text; occupancy_f]`` with 2D RoPE on
   the occupancy queries/keys, gated residuals (text gets the frame mean),
3. tube-wise temporal self-attention on the occupancy stream with 1D RoPE,
   scaled by a scalar gate,
4. second modulation and gated MLP residuals for both streams.

Shapes: occupancy tokens ``(B, F, S, d)``, text tokens ``(B, L, d)``.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from . import tensor as T
from .codec import patchify_t, unpatchify_t
from .errors import FormatError, HeadDimIndivisible, WidthMismatch
from .text import init_refiner, pad_features, refine


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    depth: int = 2
    num_heads: int = 4
    head_dim: int = 16
    n_ref: int = 1
    latent_channels: int = 4
    latent_h: int = 8
    latent_w: int = 8
    patch: int = 2
    mlp_ratio: int = 4
    d_text: int = 32
    ref_heads: int = 4
    freq_dim: int = 256

    def __post_init__(self):
        if self.num_heads * self.head_dim != self.d_model:
            raise WidthMismatch(f"{self.num_heads} heads x {self.head_dim} != d_model {self.d_model}")
        if self.head_dim % 4:
            raise HeadDimIndivisible(f"head_dim {self.head_dim} must be divisible by 4 for 2D RoPE")
        if self.latent_h % self.patch or self.latent_w % self.patch:
            raise ValueError(f"patch {self.patch} does not divide {self.latent_h}x{self.latent_w}")
        if self.d_model % self.ref_heads:
            raise WidthMismatch("refiner heads must divide d_model")

    @classmethod
    def paper(cls, **kw):
        base = dict(d_model=896, depth=14, num_heads=14, head_dim=64, n_ref=2,
                    latent_channels=16, latent_h=28, latent_w=28, patch=2, mlp_ratio=4,
                    d_text=2048, ref_heads=14)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def preset(cls, name, **kw):
        return {"paper": cls.paper, "desk": cls.desk}[name](**kw)

    @property
    def tokens_per_frame(self):
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)

    @property
    def token_width(self):
        return self.latent_channels * self.patch ** 2

    @property
    def grid_hw(self):
        return self.latent_h // self.patch, self.latent_w // self.patch

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- parameters

def init_params(cfg, seed=0):
    """Fresh parameters; modulation outputs, gates and the output head start at zero."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    hidden = cfg.mlp_ratio * d
    p = {}
    nn.add_linear(p, "in_proj", rng, cfg.token_width, d)
    nn.add_linear(p, "time.fc1", rng, cfg.freq_dim, d)
    nn.add_linear(p, "time.fc2", rng, d, d)
    p.update(init_refiner(rng, cfg.d_text, d, cfg.n_ref, mlp_ratio=4))
    for l in range(cfg.depth):
        b = f"blocks.{l}"
        nn.add_linear(p, f"{b}.mod_occ", rng, d, 6 * d, zero=True)
        nn.add_linear(p, f"{b}.mod_txt", rng, d, 6 * d, zero=True)
        for stream in ("occ", "txt"):
            for proj in ("q", "k", "v", "o"):
                nn.add_linear(p, f"{b}.attn.{stream}.{proj}", rng, d, d)
        for proj in ("q", "k", "v", "o"):
            nn.add_linear(p, f"{b}.tmp.{proj}", rng, d, d)
        p[f"{b}.tmp.gamma"] = np.zeros(1, np.float32)
        nn.add_mlp(p, f"{b}.mlp_occ", rng, d, hidden)
        nn.add_mlp(p, f"{b}.mlp_txt", rng, d, hidden)
    nn.add_linear(p, "final.mod", rng, d, 2 * d, zero=True)
    nn.add_linear(p, "final.out", rng, d, cfg.token_width, zero=True)
    return as_params(p)


def as_params(arrays):
    return {k: T.Tensor(np.array(v, dtype=np.float32), requires_grad=True) for k, v in arrays.items()}


def param_arrays(params):
    return {k: np.array(T.as_tensor(v).data) for k, v in params.items()}


def gate_names(cfg):
    """Names of every parameter that feeds a residual gate (zero => identity)."""
    return [f"blocks.{l}.tmp.gamma" for l in range(cfg.depth)]


# ---------------------------------------------------------------- timestep

def timestep_features(t, dim=256, max_period=10000.0):
    """Sinusoidal features of ``1000 * t``: first half sin, second half cos."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(np.float32)


def timestep_embed(params, t, freq_dim=256):
    """s(t): sinusoidal features followed by a two-layer SiLU MLP -> (B, d)."""
    feats = timestep_features(t, freq_dim)
    return nn.lin(params, "time.fc2", T.silu(nn.lin(params, "time.fc1", feats)))


def adaln(x, alpha, beta):
    return nn.modulate(x, alpha, beta)


# ---------------------------------------------------------------- rotary embeddings

def rope_1d_angles(positions, head_dim, base=10000.0):
    """(N, head_dim/2) rotation angles for integer positions."""
    if head_dim % 2:
        raise HeadDimIndivisible(f"head_dim {head_dim} must be even for RoPE")
    n = head_dim // 2
    inv = base ** (-np.arange(n) / n)
    return np.asarray(positions, np.float64)[:, None] * inv[None]


def rope_2d_angles(coords, head_dim, base=10000.0):
    """(N, head_dim/2) angles: first half of the pairs encode h, second half w."""
    if head_dim % 4:
        raise HeadDimIndivisible(f"head_dim {head_dim} must be divisible by 4 for 2D RoPE")
    coords = np.asarray(coords, np.float64)
    m = head_dim // 4
    inv = base ** (-np.arange(m) / m)
    return np.concatenate([coords[:, :1] * inv, coords[:, 1:2] * inv], axis=-1)


def grid_coords(gh, gw):
    """Row-major (h, w) coordinates of a gh x gw token grid."""
    hh, ww = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([hh.ravel(), ww.ravel()], axis=-1)


def apply_rope(x, angles):
    return T.rotate_pairs(x, np.cos(angles), np.sin(angles))


def rope_1d(x, positions):
    """Rotate (..., N, head_dim) vectors by their 1D positions."""
    return apply_rope(x, rope_1d_angles(positions, T.as_tensor(x).shape[-1]))


def rope_2d(x, coords):
    """Rotate (..., N, head_dim) vectors by their (h, w) grid coordinates."""
    return apply_rope(x, rope_2d_angles(coords, T.as_tensor(x).shape[-1]))


# ---------------------------------------------------------------- attention stages

def _qkv(params, name, x, heads):
    return tuple(nn.heads_first(nn.lin(params, f"{name}.{k}", x), heads) for k in "qkv")


def spatial_joint_attention(params, name, c_hat, h_hat, text_mask, heads, angles):
    """Frame-wise attention over [text; occupancy_f].

    c_hat: (B, L, d), h_hat: (B, F, S, d), text_mask: (B, L) bool,
    angles: (S, head_dim/2) 2D RoPE angles for the occupancy tokens.
    Returns (dC, dH) with shapes (B, F, L, d) and (B, F, S, d).
    """
    b, f, s, d = h_hat.shape
    n_txt = c_hat.shape[1]
    dh = d // heads
    qo, ko, vo = _qkv(params, f"{name}.occ", h_hat, heads)      # B, F, h, S, dh
    qo, ko = apply_rope(qo, angles), apply_rope(ko, angles)
    qt, kt, vt = _qkv(params, f"{name}.txt", c_hat, heads)      # B, h, L, dh
    shape_t = (b, f, heads, n_txt, dh)

    def per_frame(x):
        return T.broadcast_to(T.reshape(x, (b, 1, heads, n_txt, dh)), shape_t)

    q = T.concat([per_frame(qt), qo], axis=-2)
    k = T.concat([per_frame(kt), ko], axis=-2)
    v = T.concat([per_frame(vt), vo], axis=-2)
    mask = np.concatenate([np.asarray(text_mask, bool), np.ones((b, s), bool)], axis=1)
    bias = nn.key_padding_bias(mask)[:, None]                    # B, 1, 1, 1, L+S
    out = T.attention(q, k, v, bias)                             # B, F, h, L+S, dh
    out_t, out_o = T.split(out, [n_txt, s], axis=-2)
    d_c = nn.lin(params, f"{name}.txt.o", nn.heads_last(out_t))  # B, F, L, d
    d_h = nn.lin(params, f"{name}.occ.o", nn.heads_last(out_o))  # B, F, S, d
    return d_c, d_h


def temporal_attention(params, name, h, heads, angles):
    """Tube-wise self-attention across frames, residual scaled by the scalar gate.

    h: (B, F, S, d); angles: (F, head_dim/2) 1D RoPE angles.
    """
    tubes = T.transpose(h, (0, 2, 1, 3))                         # B, S, F, d
    q, k, v = _qkv(params, name, tubes, heads)                   # B, S, h, F, dh
    q, k = apply_rope(q, angles), apply_rope(k, angles)
    out = nn.lin(params, f"{name}.o", nn.heads_last(T.attention(q, k, v)))
    out = T.transpose(out, (0, 2, 1, 3))
    return T.add(h, T.mul(params[f"{name}.gamma"], out))


def _chunks(x, n):
    return T.split(x, [x.shape[-1] // n] * n, axis=-1)


def block_forward(params, l, h, c, s_emb, text_mask, cfg, rope_s=None, rope_t=None):
    """One backbone block.  h: (B, F, S, d), c: (B, L, d), s_emb: (B, d)."""
    b = f"blocks.{l}"
    f = h.shape[1]
    if rope_s is None:
        rope_s = rope_2d_angles(grid_coords(*cfg.grid_hw), cfg.head_dim)
    if rope_t is None:
        rope_t = rope_1d_angles(np.arange(f), cfg.head_dim)
    act = T.silu(s_emb)
    mo = _chunks(nn.lin(params, f"{b}.mod_occ", act), 6)
    mt = _chunks(nn.lin(params, f"{b}.mod_txt", act), 6)
    bsz, d = s_emb.shape
    mo = [T.reshape(m, (bsz, 1, 1, d)) for m in mo]
    mt = [T.reshape(m, (bsz, 1, d)) for m in mt]
    a_o1, b_o1, g_o1, a_o2, b_o2, g_o2 = mo
    a_t1, b_t1, g_t1, a_t2, b_t2, g_t2 = mt

    # (I) pre-modulation
    h_hat = nn.modulate(h, a_o1, b_o1)
    c_hat = nn.modulate(c, a_t1, b_t1)
    # (II) frame-wise joint attention
    d_c, d_h = spatial_joint_attention(params, f"{b}.attn", c_hat, h_hat, text_mask,
                                       cfg.num_heads, rope_s)
    h1 = T.add(h, T.mul(g_o1, d_h))
    c1 = T.add(c, T.mul(g_t1, T.mean(d_c, axis=1)))
    # (III) temporal attention, occupancy only
    h2 = temporal_attention(params, f"{b}.tmp", h1, cfg.num_heads, rope_t)
    # (IV) post-modulation + gated MLPs
    h_out = T.add(h2, T.mul(g_o2, nn.mlp(params, f"{b}.mlp_occ", nn.modulate(h2, a_o2, b_o2))))
    c_out = T.add(c1, T.mul(g_t2, nn.mlp(params, f"{b}.mlp_txt", nn.modulate(c1, a_t2, b_t2))))
    return h_out, c_out


# ---------------------------------------------------------------- conditioning

@dataclass
class Condition:
    """Padded raw text features for a batch plus null (CFG-dropped) flags."""

    values: np.ndarray       # (B, L, d_text)
    mask: np.ndarray         # (B, L) bool
    null_flags: np.ndarray   # (B,) bool

    @classmethod
    def from_features(cls, features, null_flags=None, d_text=None):
        """``features``: list of TextFeatures, with ``None`` meaning unconditional."""
        features = list(features)
        nulls = np.array([f is None for f in features], bool)
        if null_flags is not None:
            nulls |= np.asarray(null_flags, bool)
        width = next((f.width for f in features if f is not None), d_text)
        if width is None:
            raise ValueError("d_text is required when every row is unconditional")
        from .text import TextFeatures

        filled = [f if f is not None else TextFeatures(np.zeros((1, width), np.float32))
                  for f in features]
        vals, mask, nulls = pad_features(filled, nulls)
        return cls(vals, mask, nulls)

    @classmethod
    def null(cls, batch, d_text):
        return cls(np.zeros((batch, 1, d_text), np.float32), np.ones((batch, 1), bool),
                   np.ones(batch, bool))

    def __len__(self):
        return len(self.null_flags)


def encode_condition(params, cfg, cond):
    return refine(params, cond.values, cond.mask, cond.null_flags, heads=cfg.ref_heads)


def model_forward(params, cfg, x, t, cond, return_streams=False):
    """Velocity prediction for latent clips.

    x: (B, C, F, H, W) latents (a single (C, F, H, W) clip is promoted),
    t: scalar or (B,) flow times, cond: :class:`Condition`.
    Returns a Tensor with the shape of ``x``.
    """
    x = T.as_tensor(x)
    squeeze = x.ndim == 4
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    bsz, c, f, hh, ww = x.shape
    if (c, hh, ww) != (cfg.latent_channels, cfg.latent_h, cfg.latent_w):
        raise WidthMismatch(f"latent {x.shape} does not match config")
    t = np.broadcast_to(np.asarray(t, np.float32), (bsz,))
    tokens = patchify_t(x, cfg.patch)
    h = nn.lin(params, "in_proj", tokens)
    ctx = encode_condition(params, cfg, cond)
    s_emb = timestep_embed(params, t, cfg.freq_dim)
    rope_s = rope_2d_angles(grid_coords(*cfg.grid_hw), cfg.head_dim)
    rope_t = rope_1d_angles(np.arange(f), cfg.head_dim)
    for l in range(cfg.depth):
        h, ctx = block_forward(params, l, h, ctx, s_emb, cond.mask, cfg, rope_s, rope_t)
    if return_streams:
        return h, ctx
    scale_, shift = _chunks(nn.lin(params, "final.mod", T.silu(s_emb)), 2)
    d = cfg.d_model
    h = nn.modulate(h, T.reshape(scale_, (bsz, 1, 1, d)), T.reshape(shift, (bsz, 1, 1, d)))
    out = unpatchify_t(nn.lin(params, "final.out", h), cfg.patch, hh, ww)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def velocity(params, cfg, x, t, cond):
    """Gradient-free :func:`model_forward` returning a numpy array."""
    with T.no_grad():
        return model_forward(params, cfg, x, t, cond).data


# ---------------------------------------------------------------- OCCW v1 checkpoints

OCCW_MAGIC = b"OCCW"
OCCW_VERSION = 1
_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def encode_checkpoint(cfg, arrays):
    """Serialise config + named float32 arrays (insertion order is kept)."""
    out = [struct.pack("<4sII", OCCW_MAGIC, OCCW_VERSION, len(_CONFIG_FIELDS))]
    out.append(struct.pack(f"<{len(_CONFIG_FIELDS)}I", *(getattr(cfg, k) for k in _CONFIG_FIELDS)))
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(T.as_tensor(arr).data, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(data):
    try:
        magic, version, n_fields = struct.unpack_from("<4sII", data, 0)
        if magic != OCCW_MAGIC or version != OCCW_VERSION or n_fields != len(_CONFIG_FIELDS):
            raise FormatError("not an OCCW v1 checkpoint")
        pos = 12
        vals = struct.unpack_from(f"<{n_fields}I", data, pos)
        pos += 4 * n_fields
        cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, vals)))
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4: pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(data):
                raise FormatError(f"section {name!r} truncated")
            arrays[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated OCCW checkpoint: {exc}") from None
    if pos != len(data):
        raise FormatError("trailing bytes after last OCCW section")
    return cfg, arrays


def save_checkpoint(path, cfg, arrays):
    """Atomic write: a crash never leaves a half-written checkpoint behind."""
    data = encode_checkpoint(cfg, arrays)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
