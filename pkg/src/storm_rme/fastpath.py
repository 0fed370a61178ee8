"""Lean numpy-only inference forward, equivalent to the tape-based path.

Used for evaluation loops and timing, where autodiff bookkeeping is pure
overhead.  All heads of a block are evaluated through stacked projection
matrices and a single batched matmul; additive mask matrices are cached by
(kind, split, column count).  Results match ``model.forward_columns``
(without a tape) to float64 round-off.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import erf

from .attention import MaskKind
from .model import StormModel

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@lru_cache(maxsize=64)
def _mask_matrix(kind: str, split: int | None, m: int):
    mat = MaskKind(kind, split).matrix(m)
    if mat is not None:
        mat.setflags(write=False)
    return mat


class FastModel:
    """Read-only snapshot of a model's parameters as plain arrays."""

    def __init__(self, model: StormModel):
        cfg = model.config
        self.config = cfg
        self.power_mean = model.power_mean
        self.power_std = model.power_std
        self.embed_w = model.embed_w.data
        self.embed_b = model.embed_b.data
        self.head_w = model.head_w.data
        self.head_b = model.head_b.data
        self.blocks = []
        h, d = cfg.heads, cfg.dim
        for blk in model.blocks:
            self.blocks.append({
                "w_v": np.concatenate([hd.w_v.data for hd in blk.heads]),
                "w_k": np.concatenate([hd.w_k.data for hd in blk.heads]),
                "w_q": np.concatenate([hd.w_q.data for hd in blk.heads]),
                "w_o": blk.w_o.data, "b_o": blk.b_o.data,
                "ln1": (blk.ln1.a.data, blk.ln1.b.data, blk.ln1.epsilon),
                "ln2": (blk.ln2.a.data, blk.ln2.b.data, blk.ln2.epsilon),
                "w1": blk.mlp.w1.data, "b1": blk.mlp.b1.data,
                "w2": blk.mlp.w2.data, "b2": blk.mlp.b2.data,
                "activation": blk.mlp.activation,
            })
        self.heads = h
        self.dim = d
        self.dk = d // h


def _layer_norm(x, params):
    a, b, eps = params
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    return a * (xc / np.sqrt(var + eps)) + b


def _activate(x, kind):
    if kind == "gelu":
        return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))
    return np.maximum(x, 0.0)


def _block(x, blk, heads, dk, mask_mat):
    xn = _layer_norm(x, blk["ln1"])
    lead = xn.shape[:-2]
    n = xn.shape[-1]
    v = np.matmul(blk["w_v"], xn).reshape(lead + (heads, dk, n))
    k = np.matmul(blk["w_k"], xn).reshape(lead + (heads, dk, n))
    q = np.matmul(blk["w_q"], xn).reshape(lead + (heads, dk, n))
    logits = np.matmul(np.swapaxes(k, -1, -2), q)
    if mask_mat is not None:
        logits = logits + mask_mat
    logits -= logits.max(axis=-2, keepdims=True)
    e = np.exp(logits)
    att = e / e.sum(axis=-2, keepdims=True)
    out = np.matmul(v, att).reshape(lead + (heads * dk, n))
    x = x + np.matmul(blk["w_o"], out) + blk["b_o"]
    xn = _layer_norm(x, blk["ln2"])
    hid = _activate(np.matmul(blk["w1"], xn) + blk["b1"], blk["activation"])
    return x + np.matmul(blk["w2"], hid) + blk["b2"]


def fast_forward_columns(fm: FastModel, columns: np.ndarray,
                         mask: MaskKind | None = None) -> np.ndarray:
    """Normalized-unit estimates for feature columns (..., F, N)."""
    if mask is None:
        mask = MaskKind.causal() if fm.config.mask == "causal" else MaskKind.none()
    n = columns.shape[-1]
    mask_mat = _mask_matrix(mask.kind, mask.split, n)
    x = np.matmul(fm.embed_w, columns) + fm.embed_b
    for blk in fm.blocks:
        x = _block(x, blk, fm.heads, fm.dk, mask_mat)
    out = np.matmul(fm.head_w, x) + fm.head_b
    return out.reshape(out.shape[:-2] + (n,))
