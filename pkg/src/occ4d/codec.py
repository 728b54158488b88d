"""Occupancy <-> latent conversion.

Layouts used throughout:

* folded volume: ``(D * e, F, X, Y)``, channel ``iz * e + j``
* latent clip:   ``(C, F, H, W)`` (optionally with leading batch dims)
* tokens:        ``(F, S, C * p * p)``, token ``s = i * (W // p) + j`` covers
  latent tile ``(i, j)``; its feature ``c * p * p + a * p + b`` holds
  ``latent[c, :, i * p + a, j * p + b]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ChannelLayoutMismatch,
    FormatError,
    NumericalFailure,
    PatchSizeIndivisible,
    ShapeMismatch,
    TableShapeMismatch,
)
from .grid import SemanticGrid


@dataclass
class EmbeddingTable:
    table: np.ndarray  # (K, e)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float32)
        if self.table.ndim != 2 or not np.all(np.isfinite(self.table)):
            raise TableShapeMismatch("embedding table must be a finite (K, e) matrix")

    @property
    def num_classes(self):
        return self.table.shape[0]

    @property
    def e(self):
        return self.table.shape[1]

    @classmethod
    def semi_orthogonal(cls, num_classes=11, e=8, seed=0):
        """Random table with orthonormal columns (orthonormal rows when K <= e)."""
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((max(num_classes, e), max(num_classes, e)))
        q, _ = np.linalg.qr(a)
        return cls(q[:num_classes, :e])


def embed_fold(grid, table):
    """Look up every voxel's embedding and fold depth into channels.

    Returns ``(D * e, F, X, Y)`` float32 with channel ``iz * e + j`` equal to
    ``table[id(ix, iy, iz), j]``.
    """
    if table.num_classes != grid.spec.num_classes:
        raise TableShapeMismatch(
            f"table has {table.num_classes} rows, grid has {grid.spec.num_classes} classes")
    f, x, y, d = grid.ids.shape
    e = table.e
    cols = np.ascontiguousarray(table.table.T, dtype=np.float32)    # e, K
    out = np.empty((d * e, f, x, y), np.float32)
    # one depth bin at a time lands each lookup directly in channel-first layout
    for iz in range(d):
        out[iz * e:(iz + 1) * e] = np.take(cols, grid.ids[..., iz], axis=1)
    return out


def reparameterize(mu, sigma, noise):
    """z = mu + sigma * noise (works on arrays and Tensors)."""
    shapes = {np.shape(getattr(a, "data", a)) for a in (mu, sigma, noise)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"reparameterize: shapes differ {shapes}")
    if any(isinstance(a, T.Tensor) for a in (mu, sigma, noise)):
        return T.add(mu, T.mul(sigma, noise))
    return np.asarray(mu) + np.asarray(sigma) * np.asarray(noise)


# ---------------------------------------------------------------- patchify

def _check_patch(h, w, p):
    if p < 1 or h % p or w % p:
        raise PatchSizeIndivisible(f"patch size {p} does not divide {h}x{w}")


def patchify(latent, p):
    """(..., C, F, H, W) -> (..., F, S, C*p*p)."""
    x = np.asarray(latent)
    *lead, c, f, h, w = x.shape
    _check_patch(h, w, p)
    n = len(lead)
    x = x.reshape(*lead, c, f, h // p, p, w // p, p)
    # -> lead, F, H/p, W/p, C, p, p
    perm = list(range(n)) + [n + 1, n + 2, n + 4, n, n + 3, n + 5]
    x = x.transpose(perm)
    return np.ascontiguousarray(x).reshape(*lead, f, (h // p) * (w // p), c * p * p)


def unpatchify(tokens, p, h, w):
    """Inverse of :func:`patchify`; ``h``, ``w`` are the latent spatial sizes."""
    x = np.asarray(tokens)
    *lead, f, s, width = x.shape
    _check_patch(h, w, p)
    if s != (h // p) * (w // p) or width % (p * p):
        raise ShapeMismatch(f"tokens {x.shape} do not tile a {h}x{w} latent with p={p}")
    c = width // (p * p)
    n = len(lead)
    x = x.reshape(*lead, f, h // p, w // p, c, p, p)
    perm = list(range(n)) + [n + 3, n, n + 1, n + 4, n + 2, n + 5]
    x = x.transpose(perm)
    return np.ascontiguousarray(x).reshape(*lead, c, f, h, w)


def patchify_t(latent, p):
    """Differentiable patchify for Tensors of shape (B, C, F, H, W)."""
    b, c, f, h, w = latent.shape
    _check_patch(h, w, p)
    x = T.reshape(latent, (b, c, f, h // p, p, w // p, p))
    x = T.transpose(x, (0, 2, 3, 5, 1, 4, 6))
    return T.reshape(x, (b, f, (h // p) * (w // p), c * p * p))


def unpatchify_t(tokens, p, h, w):
    b, f, s, width = tokens.shape
    c = width // (p * p)
    x = T.reshape(tokens, (b, f, h // p, w // p, c, p, p))
    x = T.transpose(x, (0, 4, 1, 2, 5, 3, 6))
    return T.reshape(x, (b, c, f, h, w))


# ---------------------------------------------------------------- reference codec

class ReferenceCodec:
    """Lossless-at-downsample-1 one-hot codec standing in for a pretrained VAE.

    Latent channel ``iz * K + k`` holds the fraction of voxels in each
    ``downsample x downsample`` tile at depth ``iz`` whose class is ``k``.
    Decoding takes the per-(tile, depth) argmax, i.e. a majority vote (ties
    go to the lower class id); it is exact when ``downsample == 1``.
    """

    def __init__(self, spec, downsample=1):
        if spec.size_x % downsample or spec.size_y % downsample:
            raise PatchSizeIndivisible(f"downsample {downsample} does not divide {spec.sizes[:2]}")
        self.spec = spec
        self.downsample = downsample

    @property
    def channels(self):
        return self.spec.size_z * self.spec.num_classes

    def latent_shape(self, frames):
        ds = self.downsample
        return (self.channels, frames, self.spec.size_x // ds, self.spec.size_y // ds)

    def encode(self, grid):
        s, ds = self.spec, self.downsample
        if grid.spec.sizes != s.sizes or grid.spec.num_classes != s.num_classes:
            raise ChannelLayoutMismatch("grid does not match the codec's grid spec")
        f = grid.frames
        k = s.num_classes
        onehot = np.eye(k, dtype=np.float32)[grid.ids]            # F, X, Y, D, K
        x = onehot.reshape(f, s.size_x // ds, ds, s.size_y // ds, ds, s.size_z, k)
        x = x.mean(axis=(2, 4))                                   # F, h, w, D, K
        x = x.transpose(3, 4, 0, 1, 2).reshape(s.size_z * k, f, s.size_x // ds, s.size_y // ds)
        return np.ascontiguousarray(x, dtype=np.float32)

    def decode(self, latent):
        s, ds = self.spec, self.downsample
        latent = np.asarray(latent)
        c, f, h, w = latent.shape
        if c != self.channels or (h, w) != (s.size_x // ds, s.size_y // ds):
            raise ChannelLayoutMismatch(
                f"latent {latent.shape} does not match layout {self.latent_shape(f)}")
        x = latent.reshape(s.size_z, s.num_classes, f, h, w)
        ids = x.argmax(axis=1).astype(np.uint8)                   # D, F, h, w
        ids = ids.transpose(1, 2, 3, 0)                           # F, h, w, D
        if ds > 1:
            ids = ids.repeat(ds, axis=1).repeat(ds, axis=2)
        return SemanticGrid(s, ids)


# ---------------------------------------------------------------- tiny VAE

@dataclass
class VAEConfig:
    depth_bins: int = 8       # D
    num_classes: int = 11     # K
    expansion: int = 8        # e
    downsample: int = 2
    latent_channels: int = 4  # C
    hidden: int = 64

    @property
    def in_width(self):
        return self.depth_bins * self.expansion * self.downsample ** 2

    @property
    def out_width(self):
        return self.depth_bins * self.num_classes * self.downsample ** 2

    @classmethod
    def paper(cls):
        return cls(depth_bins=16, num_classes=11, expansion=8, downsample=8,
                   latent_channels=16, hidden=64)


def init_vae(cfg, seed=0):
    rng = np.random.default_rng(seed)

    def lin(n_in, n_out):
        return rng.standard_normal((n_in, n_out)).astype(np.float32) / np.sqrt(n_in)

    p = {
        "enc.w1": lin(cfg.in_width, cfg.hidden),
        "enc.b1": np.zeros(cfg.hidden, np.float32),
        "enc.w2": lin(cfg.hidden, 2 * cfg.latent_channels),
        "enc.b2": np.zeros(2 * cfg.latent_channels, np.float32),
        "dec.w1": lin(cfg.latent_channels, cfg.hidden),
        "dec.b1": np.zeros(cfg.hidden, np.float32),
        "dec.w2": lin(cfg.hidden, cfg.out_width),
        "dec.b2": np.zeros(cfg.out_width, np.float32),
    }
    return {k: T.Tensor(v, requires_grad=True) for k, v in p.items()}


def vae_encode(x, params, cfg):
    """Folded volume (D*e, F, X, Y) -> (mu, sigma), each (C, F, X/ds, Y/ds).

    The encoder is a stride-``ds`` patch convolution followed by a 1x1 MLP;
    sigma is exp(logvar / 2).
    """
    x = np.asarray(x, dtype=np.float32)
    _, f, xs, ys = x.shape
    ds = cfg.downsample
    tok = T.Tensor(patchify(x, ds))                                # F, S, D*e*ds^2
    hid = T.gelu(T.linear(tok, params["enc.w1"], params["enc.b1"]))
    out = T.linear(hid, params["enc.w2"], params["enc.b2"])        # F, S, 2C
    c = cfg.latent_channels
    mu, logvar = T.split(out, [c, c], axis=-1)
    sigma = T.exp(T.scale(logvar, 0.5))

    def to_latent(t):
        return T.reshape(T.transpose(T.reshape(t, (f, xs // ds, ys // ds, c)), (3, 0, 1, 2)),
                         (c, f, xs // ds, ys // ds))

    return to_latent(mu), to_latent(sigma)


def vae_decode(z, params, cfg):
    """Latent (C, F, h, w) -> per-voxel class logits (F, X, Y, D, K)."""
    z = T.as_tensor(z)
    c, f, h, w = z.shape
    ds, d, k = cfg.downsample, cfg.depth_bins, cfg.num_classes
    tok = T.reshape(T.transpose(z, (1, 2, 3, 0)), (f, h * w, c))
    hid = T.gelu(T.linear(tok, params["dec.w1"], params["dec.b1"]))
    out = T.linear(hid, params["dec.w2"], params["dec.b2"])        # F, h*w, ds*ds*D*K
    out = T.reshape(out, (f, h, w, ds, ds, d, k))
    out = T.transpose(out, (0, 1, 3, 2, 4, 5, 6))
    return T.reshape(out, (f, h * ds, w * ds, d, k))


def kl_standard_normal(mu, sigma):
    """Elementwise KL(N(mu, sigma^2) || N(0, 1))."""
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    return T.scale(T.sub(T.add(T.square(mu), T.square(sigma)),
                         T.add(T.log(T.square(sigma)), 1.0)), 0.5)


def vae_loss(logits, target, mu, sigma, beta):
    """Mean voxel cross-entropy + beta * mean KL to the standard normal."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    logits = T.as_tensor(logits)
    ids = np.asarray(target.ids if isinstance(target, SemanticGrid) else target)
    k = logits.shape[-1]
    onehot = np.eye(k, dtype=np.float32)[ids]
    if onehot.shape != logits.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target one-hot {onehot.shape}")
    ce = T.scale(T.mean(T.sum_(T.mul(T.log_softmax(logits), onehot), axis=-1)), -1.0)
    loss = T.add(ce, T.scale(T.mean(kl_standard_normal(mu, sigma)), beta)) if beta else ce
    if not np.isfinite(loss.data):
        raise NumericalFailure("VAE loss is not finite")
    return loss


def vae_decode_grid(z, params, cfg, spec):
    with T.no_grad():
        logits = vae_decode(z, params, cfg)
    return SemanticGrid(spec, logits.data.argmax(axis=-1).astype(np.uint8))


# ---------------------------------------------------------------- OCCL v1

OCCL_MAGIC = b"OCCL"
_OCCL_HEAD = struct.Struct("<4s4I")


def encode_latent(latent):
    x = np.asarray(latent, dtype="<f4")
    if x.ndim != 4:
        raise ShapeMismatch("OCCL stores a single (C, F, H, W) latent clip")
    return _OCCL_HEAD.pack(OCCL_MAGIC, *x.shape) + x.tobytes()


def decode_latent(data):
    if len(data) < _OCCL_HEAD.size:
        raise FormatError("OCCL file truncated in header")
    magic, c, f, h, w = _OCCL_HEAD.unpack_from(data, 0)
    if magic != OCCL_MAGIC:
        raise FormatError("not an OCCL v1 file")
    payload = data[_OCCL_HEAD.size:]
    if len(payload) != 4 * c * f * h * w:
        raise FormatError("OCCL payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(c, f, h, w).astype(np.float32)


def save_latent(path, latent):
    with open(path, "wb") as fh:
        fh.write(encode_latent(latent))


def load_latent(path):
    with open(path, "rb") as fh:
        return decode_latent(fh.read())
