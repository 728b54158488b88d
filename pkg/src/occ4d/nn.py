"""Parameter initialisers and the small layers shared by the refiner and backbone."""
import numpy as np

from . import tensor as T


def dense(rng, n_in, n_out, zero=False):
    if zero:
        return np.zeros((n_in, n_out), np.float32)
    return (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(np.float32)


def add_linear(p, name, rng, n_in, n_out, zero=False, bias=True):
    p[name + ".w"] = dense(rng, n_in, n_out, zero)
    if bias:
        p[name + ".b"] = np.zeros(n_out, np.float32)


def add_mlp(p, name, rng, d, hidden, zero_out=False):
    add_linear(p, name + ".fc1", rng, d, hidden)
    add_linear(p, name + ".fc2", rng, hidden, d, zero=zero_out)


def lin(params, name, x):
    return T.linear(x, params[name + ".w"], params.get(name + ".b"))


def mlp(params, name, x):
    return lin(params, name + ".fc2", T.gelu(lin(params, name + ".fc1", x)))


def affine_norm(params, name, x):
    """Layer norm with learned gain/bias."""
    return T.add(T.mul(T.layer_norm(x), params[name + ".g"]), params[name + ".b"])


def modulate(x, scale, shift):
    """AdaLN: LN(x) * (1 + scale) + shift."""
    return T.add(T.mul(T.layer_norm(x), T.add(scale, 1.0)), shift)


def heads_first(x, heads):
    """(..., N, d) -> (..., h, N, d/h)."""
    *lead, n, d = x.shape
    x = T.reshape(x, tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    return T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def heads_last(x):
    """(..., h, N, dh) -> (..., N, h*dh)."""
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return T.reshape(x, tuple(lead) + (n, h * dh))


def key_padding_bias(mask):
    """(B, N) boolean validity mask -> additive bias (B, 1, 1, N)."""
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, -1e9).astype(np.float32)[:, None, None, :]
