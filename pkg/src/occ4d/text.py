"""Text-condition pathway: raw feature sources, the token refiner, the null condition."""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import EmptyPrompt, MalformedFeatureFile, WidthMismatch

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass
class TextFeatures:
    values: np.ndarray  # (L, d_text)
    prompt: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise WidthMismatch("text features must be an (L >= 1, d_text) matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("text features must be finite")

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def tokenize(prompt):
    return _TOKEN_RE.findall(prompt.lower())


def _token_vector(token, d_text, seed):
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(d_text)


def sinusoid_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def stub_encode(prompt, d_text=32, seed=0, positions=True):
    """Deterministic hashed bag of token vectors plus sinusoidal positions.

    Stands in for a frozen language encoder: identical ``(prompt, seed)``
    always gives bit-identical features.
    """
    tokens = tokenize(prompt or "")
    if not tokens:
        raise EmptyPrompt("prompt has no tokens")
    vals = np.stack([_token_vector(t, d_text, seed) for t in tokens])
    if positions:
        vals = vals + sinusoid_positions(len(tokens), d_text)
    return TextFeatures(vals.astype(np.float32), prompt)


# ---------------------------------------------------------------- refiner

def init_refiner(rng, d_text, d_model, n_ref, mlp_ratio=4, prefix="ref"):
    p = {}
    nn.add_linear(p, f"{prefix}.w_in", rng, d_text, d_model, bias=False)
    for i in range(n_ref):
        b = f"{prefix}.blocks.{i}"
        for ln in ("ln1", "ln2"):
            p[f"{b}.{ln}.g"] = np.ones(d_model, np.float32)
            p[f"{b}.{ln}.b"] = np.zeros(d_model, np.float32)
        for proj in ("q", "k", "v", "o"):
            nn.add_linear(p, f"{b}.attn.{proj}", rng, d_model, d_model)
        nn.add_mlp(p, f"{b}.mlp", rng, d_model, mlp_ratio * d_model)
    p[f"{prefix}.null"] = (0.02 * rng.standard_normal((1, d_model))).astype(np.float32)
    return p


def refiner_depth(params, prefix="ref"):
    n = 0
    while f"{prefix}.blocks.{n}.ln1.g" in params:
        n += 1
    return n


def pad_features(features, null_flags=None):
    """Stack variable-length features into (B, L, d_text) plus a validity mask.

    Rows whose null flag is set keep a single valid position (the null slot).
    """
    b = len(features)
    null_flags = np.zeros(b, bool) if null_flags is None else np.asarray(null_flags, bool)
    width = {f.width for f in features}
    if len(width) != 1:
        raise WidthMismatch(f"mixed text widths {width}")
    n = max(f.length for f in features)
    vals = np.zeros((b, n, width.pop()), np.float32)
    mask = np.zeros((b, n), bool)
    for i, f in enumerate(features):
        vals[i, : f.length] = f.values
        mask[i, : 1 if null_flags[i] else f.length] = True
    return vals, mask, null_flags


def refine(params, features, mask=None, null_flags=None, heads=4, prefix="ref"):
    """Project raw text features to the model width and run the refiner blocks.

    ``features`` is (L, d_text) or batched (B, L, d_text); ``mask`` marks valid
    positions; rows with ``null_flags`` set start from the learned null vector
    instead (one valid position).  Returns (B, L, d_model).
    """
    x = np.asarray(getattr(features, "values", features), dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    b, n, d_text = x.shape
    w_in = params[f"{prefix}.w_in.w"]
    if d_text != w_in.shape[0]:
        raise WidthMismatch(f"features have width {d_text}, refiner expects {w_in.shape[0]}")
    if mask is None:
        mask = np.ones((b, n), bool)
    c = T.linear(x, w_in)
    if null_flags is not None and np.any(null_flags):
        nf = np.asarray(null_flags, np.float32)[:, None, None]
        c = T.add(T.mul(c, 1.0 - nf), T.mul(T.broadcast_to(params[f"{prefix}.null"], c.shape), nf))
    return refine_tokens(params, c, mask, heads, prefix)


def refine_tokens(params, c, mask, heads, prefix="ref"):
    """Refiner blocks on already-projected tokens ``c`` (B, L, d_model)."""
    bias = nn.key_padding_bias(mask)
    for i in range(refiner_depth(params, prefix)):
        b = f"{prefix}.blocks.{i}"
        h = nn.affine_norm(params, f"{b}.ln1", c)
        q = nn.heads_first(nn.lin(params, f"{b}.attn.q", h), heads)
        k = nn.heads_first(nn.lin(params, f"{b}.attn.k", h), heads)
        v = nn.heads_first(nn.lin(params, f"{b}.attn.v", h), heads)
        att = nn.heads_last(T.attention(q, k, v, bias))
        c = T.add(c, nn.lin(params, f"{b}.attn.o", att))
        c = T.add(c, nn.mlp(params, f"{b}.mlp", nn.affine_norm(params, f"{b}.ln2", c)))
    return c


def null_condition(params, prefix="ref"):
    """The learned null vector as a length-1 token sequence (1, d_model)."""
    return np.array(T.as_tensor(params[f"{prefix}.null"]).data)


# ---------------------------------------------------------------- TXTF v1

TXTF_MAGIC = b"TXTF"
_TXTF_HEAD = struct.Struct("<4s2I")


def encode_features(features):
    vals = np.asarray(getattr(features, "values", features), dtype="<f4")
    return _TXTF_HEAD.pack(TXTF_MAGIC, *vals.shape) + vals.tobytes()


def decode_features(data):
    if len(data) < _TXTF_HEAD.size:
        raise MalformedFeatureFile("TXTF header truncated")
    magic, n, d = _TXTF_HEAD.unpack_from(data, 0)
    if magic != TXTF_MAGIC:
        raise MalformedFeatureFile(f"bad magic {magic!r}")
    payload = data[_TXTF_HEAD.size:]
    if n < 1 or len(payload) != 4 * n * d:
        raise MalformedFeatureFile(f"payload has {len(payload)} bytes, header declares {n}x{d} floats")
    return TextFeatures(np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32))


def save_features(path, features):
    with open(path, "wb") as fh:
        fh.write(encode_features(features))


def load_features(path):
    with open(path, "rb") as fh:
        return decode_features(fh.read())
