"""Transformer building blocks on top of the autodiff engine.

Parameters are plain dicts of named Tensors so that EMA updates,
optimizers and checkpointing can treat every model uniformly.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

LN_EPS = 1e-6


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, as in ViT-style inits."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def linear_params(
    rng: np.random.Generator, fan_in: int, fan_out: int, std: float | None = None,
    zero: bool = False,
) -> dict[str, Tensor]:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.normal(0.0, std if std is not None else 1.0 / math.sqrt(fan_in),
                       size=(fan_in, fan_out))
    return {"w": param(w), "b": param(np.zeros(fan_out))}


def linear(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return ad.affine(x, p["w"], p["b"])


def ln_params(dim: int) -> dict[str, Tensor]:
    return {"g": param(np.ones(dim)), "b": param(np.zeros(dim))}


def attn_params(rng: np.random.Generator, dim: int, heads: int) -> dict[str, Tensor]:
    """Multi-head attention weights, all scaled by 1/sqrt(fan_in).

    The output projection must not start at zero: a network whose residual
    branches all vanish is a constant function of its input, which is a
    fixed point of self-distillation (the teacher's targets carry no
    per-sample signal, so training never leaves it).
    """
    if dim % heads != 0:
        raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
    std = 1.0 / math.sqrt(dim)
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"w{name}"] = param(rng.normal(0.0, std, size=(dim, dim)))
        p[f"b{name}"] = param(np.zeros(dim))
    return p


def mlp_params(rng: np.random.Generator, dim: int, ratio: int) -> dict[str, Tensor]:
    hidden = ratio * dim
    return {
        "w1": param(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden))),
        "b1": param(np.zeros(hidden)),
        "w2": param(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, dim))),
        "b2": param(np.zeros(dim)),
    }


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    # (..., T, D) -> (..., heads, T, head_dim)
    new_shape = x.shape[:-1] + (heads, head_dim)
    x = x.reshape(new_shape)
    return x.swapaxes(-3, -2)


def mha(x_q: Tensor, x_kv: Tensor, heads: int, p: dict[str, Tensor]):
    """Multi-head attention over the last two axes; any leading axes are
    treated as batch. Returns (output, attention) with attention shaped
    (..., heads, T, S).
    """
    dim = x_q.shape[-1]
    if dim % heads != 0:
        raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
    head_dim = dim // heads

    q = _split_heads(ad.affine(x_q, p["wq"], p["bq"]), heads, head_dim)
    k = _split_heads(ad.affine(x_kv, p["wk"], p["bk"]), heads, head_dim)
    v = _split_heads(ad.affine(x_kv, p["wv"], p["bv"]), heads, head_dim)

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    attn = ad.softmax(scores, axis=-1)  # (..., heads, T, S)

    out = attn @ v  # (..., heads, T, head_dim)
    out = out.swapaxes(-3, -2).reshape(x_q.shape[:-1] + (dim,))
    return ad.affine(out, p["wo"], p["bo"]), attn


def mlp_block(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Two-layer feed-forward: linear -> GELU -> linear."""
    return ad.affine(ad.gelu(ad.affine(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def transformer_block(x: Tensor, heads: int, p: dict[str, dict[str, Tensor]]):
    """Pre-norm residual block: x + MSA(LN(x)), then x + MLP(LN(x))."""
    h = ad.layer_norm(x, p["ln1"]["g"], p["ln1"]["b"], LN_EPS)
    a, attn = mha(h, h, heads, p["attn"])
    x = x + a
    h = ad.layer_norm(x, p["ln2"]["g"], p["ln2"]["b"], LN_EPS)
    return x + mlp_block(h, p["mlp"]), attn
