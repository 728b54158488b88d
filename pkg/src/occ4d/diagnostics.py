"""Finite-difference audits of the autodiff engine and of one backbone block."""
from __future__ import annotations

import numpy as np

from . import backbone as B
from . import flow
from . import tensor as T


def randomize_params(params, seed=0, scale=0.1):
    """Give zero-initialised tensors (gates, modulation, head) small random values.

    At init those paths are switched off, which would make a gradient check
    vacuous for most of the block.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        if not np.any(p.data):
            p.data = (scale * rng.standard_normal(p.shape)).astype(np.float32)
    return params


def block_gradcheck(seed=0, frames=2, eps=1e-3, cfg=None):
    """Max relative error of d(anchored loss)/d(input latent) through one full block.

    Uses the desk widths with a single block and four latent channels so the
    float64 finite-difference sweep stays cheap.
    """
    cfg = cfg or B.ModelConfig.desk(depth=1)
    params = randomize_params(B.init_params(cfg, seed), seed)
    rng = np.random.default_rng(seed)
    shape = (cfg.latent_channels, frames, cfg.latent_h, cfg.latent_w)
    x0 = rng.standard_normal(shape).astype(np.float32)
    x1 = rng.standard_normal(shape).astype(np.float32)
    xt = flow.make_path(x0, x1, 0.4)
    text = rng.standard_normal((3, cfg.d_text)).astype(np.float32)
    cond = B.Condition(text[None], np.ones((1, 3), bool), np.zeros(1, bool))
    h = 1 if frames > 1 else 0

    def f(x):
        v = B.model_forward(params, cfg, x, 0.4, cond)
        return flow.anchored_loss(v, x0, x1, h)

    return T.grad_check(f, xt, eps)


def _op_cases(rng):
    """(name, scalar function of one tensor, input) for every differentiable op."""
    a = lambda *s: rng.standard_normal(s).astype(np.float32)
    w = a(4, 3)
    other = a(3, 4)
    other3 = a(2, 3, 4)
    b = a(3)
    idx = np.array([2, 0, 2])
    angles = rng.uniform(-3, 3, (3, 2))
    bias = np.where(rng.random((3, 3)) < 0.3, -1e9, 0.0).astype(np.float32)
    bias[:, 0] = 0.0
    proj = {}

    def wsum(t):
        # fixed random projection to a scalar, one per output shape
        if t.shape not in proj:
            proj[t.shape] = a(*t.shape)
        return T.sum_(T.mul(t, proj[t.shape]))

    return [
        ("add", lambda x: wsum(T.add(x, other)), a(3, 4)),
        ("sub", lambda x: wsum(T.sub(other, x)), a(3, 4)),
        ("mul", lambda x: wsum(T.mul(x, x)), a(3, 4)),
        ("broadcast_add", lambda x: wsum(T.add(x, other3)), a(3, 4)),
        ("scale", lambda x: wsum(T.scale(x, -2.5)), a(3, 4)),
        ("square", lambda x: wsum(T.square(x)), a(3, 4)),
        ("exp", lambda x: wsum(T.exp(x)), a(3, 4)),
        ("log", lambda x: wsum(T.log(T.add(T.square(x), 1.0))), a(3, 4)),
        ("gelu", lambda x: wsum(T.gelu(x)), a(3, 4)),
        ("silu", lambda x: wsum(T.silu(x)), a(3, 4)),
        ("matmul", lambda x: wsum(T.matmul(x, w)), a(2, 3, 4)),
        ("linear", lambda x: wsum(T.linear(x, w, b)), a(5, 4)),
        ("reshape", lambda x: wsum(T.reshape(x, (4, 3))), a(3, 4)),
        ("transpose", lambda x: wsum(T.transpose(x, (2, 0, 1))), a(2, 3, 4)),
        ("swapaxes", lambda x: wsum(T.swapaxes(x, 0, 2)), a(2, 3, 4)),
        ("broadcast_to", lambda x: wsum(T.broadcast_to(x, (2, 3, 4))), a(3, 1)),
        ("concat", lambda x: wsum(T.concat([x, T.square(x)], axis=1)), a(3, 4)),
        ("narrow", lambda x: wsum(T.narrow(x, 1, 1, 3)), a(3, 4)),
        ("split", lambda x: wsum(T.mul(*T.split(x, [2, 2], axis=1))), a(3, 4)),
        ("select", lambda x: wsum(T.select(x, 0, idx)), a(3, 4)),
        ("assign", lambda x: wsum(T.assign(x, 0, np.array([1]), T.square(T.narrow(x, 0, 0, 1)))), a(3, 4)),
        ("sum", lambda x: T.sum_(T.square(T.sum_(x, axis=0))), a(3, 4)),
        ("mean", lambda x: T.sum_(T.square(T.mean(x, axis=1, keepdims=True))), a(3, 4)),
        ("softmax", lambda x: wsum(T.softmax(x)), a(3, 4)),
        ("log_softmax", lambda x: wsum(T.log_softmax(x)), a(3, 4)),
        ("layer_norm", lambda x: wsum(T.layer_norm(x)), a(3, 4)),
        ("rotate_pairs", lambda x: wsum(T.rotate_pairs(x, np.cos(angles), np.sin(angles))), a(3, 4)),
        ("attention", lambda x: wsum(T.attention(x, T.scale(x, 0.5), T.square(x))), a(2, 3, 4)),
        ("attention_bias", lambda x: wsum(T.attention(x, x, x, bias)), a(3, 4)),
    ]


def op_gradchecks(seed=0, eps=1e-3):
    """{op name: max relative error} over randomised small inputs."""
    rng = np.random.default_rng(seed)
    return {name: T.grad_check(f, x, eps) for name, f, x in _op_cases(rng)}


def direction_accuracy(params, cfg, stats, gridspec, n=64, cfg_scale=4.0, steps=20, seed=0,
                       downsample=4, prompts=None, frames=8):
    """Share of generated clips whose vehicle moves the way the prompt says.

    ``prompts`` maps prompt text to the expected sign of the x velocity; the
    default is the two direction-corpus prompts.  Clips are sampled from
    noise, decoded with the reference codec and classified by
    :func:`metrics.motion_direction`.  Returns (overall, {prompt: accuracy}).
    """
    from .codec import ReferenceCodec
    from .corpus import DIRECTION_PROMPTS
    from .metrics import motion_direction
    from .text import stub_encode

    if prompts is None:
        prompts = dict(zip(DIRECTION_PROMPTS, (1, -1)))
    codec = ReferenceCodec(gridspec, downsample)
    scfg = flow.SamplerConfig(steps=steps, cfg_scale=cfg_scale)
    per = {}
    for i, (prompt, sign) in enumerate(prompts.items()):
        feats = stub_encode(prompt, cfg.d_text)
        z = flow.sample(params, cfg, [feats] * n, frames, scfg, np.random.default_rng([seed, i]))
        clips = stats.denormalize(z)
        per[prompt] = float(np.mean([motion_direction(codec.decode(c)) == sign for c in clips]))
    return float(np.mean(list(per.values()))), per
