"""Attention operators: cross/self attention, layer norm, attention blocks.

Matrix convention: feature/embedding vectors are columns, so an input is a
``(D, M)`` matrix (optionally with leading batch axes).  Softmax therefore
normalizes over rows within each column.  Three masking modes are
supported: unmasked, causal (output column m attends to columns 1..m) and
modified-causal (columns past a split index N attend to the first N
columns plus themselves only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class MaskKind:
    """Attention mask selector: unmasked, causal, or modified-causal."""

    kind: str = "none"
    split: int | None = None  # measurement count for modified-causal

    @staticmethod
    def none() -> "MaskKind":
        return MaskKind("none")

    @staticmethod
    def causal() -> "MaskKind":
        return MaskKind("causal")

    @staticmethod
    def modified_causal(split: int) -> "MaskKind":
        if split < 0:
            raise ValueError("modified-causal split must be >= 0")
        return MaskKind("modified", split)

    def matrix(self, m: int) -> np.ndarray | None:
        """Additive (key, query) mask of shape (m, m), or None if unmasked."""
        if self.kind == "none":
            return None
        keys = np.arange(m)[:, None]
        queries = np.arange(m)[None, :]
        if self.kind == "causal":
            return np.where(keys > queries, NEG_INF, 0.0)
        if self.kind == "modified":
            n = self.split
            if n is None or n > m:
                raise ShapeError(f"modified-causal split {n} exceeds column count {m}")
            blocked = keys > queries  # causal part for the first n columns
            cand_q = queries >= n
            # candidate queries: allow the n measurement keys and the
            # candidate's own column, nothing else
            blocked_cand = (keys >= n) & (keys != queries)
            return np.where(np.where(cand_q, blocked_cand, blocked), NEG_INF, 0.0)
        raise ValueError(f"unknown mask kind {self.kind!r}")


@dataclass
class AttentionHeadParams:
    """Linear value/key/query maps; the 1/sqrt(d_k) factor lives in w_q."""

    w_v: Tensor  # (d_v, d_in)
    w_k: Tensor  # (d_k, d_in)
    w_q: Tensor  # (d_k, d_in)


@dataclass
class LayerNormParams:
    a: Tensor  # scale, (d, 1)
    b: Tensor  # shift, (d, 1)
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("layer-norm epsilon must be positive")


@dataclass
class MlpParams:
    """Two-layer perceptron applied independently to each column."""

    w1: Tensor  # (hidden, d)
    b1: Tensor  # (hidden, 1)
    w2: Tensor  # (d, hidden)
    b2: Tensor  # (d, 1)
    activation: str = "gelu"


@dataclass
class AttentionBlockParams:
    heads: list[AttentionHeadParams]
    w_o: Tensor  # (d, d) output projection over concatenated head values
    b_o: Tensor  # (d, 1)
    ln1: LayerNormParams
    ln2: LayerNormParams
    mlp: MlpParams

    def tensors(self) -> list[Tensor]:
        out = []
        for h in self.heads:
            out += [h.w_v, h.w_k, h.w_q]
        out += [self.w_o, self.b_o, self.ln1.a, self.ln1.b, self.ln2.a, self.ln2.b]
        out += [self.mlp.w1, self.mlp.b1, self.mlp.w2, self.mlp.b2]
        return out


def cross_attention(refs: Tensor, query: Tensor, params: AttentionHeadParams) -> Tensor:
    """Single-query cross attention: V softmax(K^T q(x)).

    ``refs`` is (D_s, M) with M >= 1, ``query`` a (D_x,) vector; returns a
    (d_v,) vector inside the convex hull of the value vectors.
    """
    refs = ad._as_tensor(refs)
    query = ad._as_tensor(query)
    if refs.ndim != 2 or refs.shape[1] < 1:
        raise ShapeError("cross_attention needs a (D, M) reference matrix with M >= 1")
    x = ad.reshape(query, (query.shape[0], 1))
    v = ad.matmul(params.w_v, refs)
    k = ad.matmul(params.w_k, refs)
    q = ad.matmul(params.w_q, x)
    weights = ad.softmax_columns(ad.matmul(ad.transpose(k), q))
    return ad.reshape(ad.matmul(v, weights), (params.w_v.shape[0],))


def self_attention(x: Tensor, params: AttentionHeadParams, mask: MaskKind) -> Tensor:
    """Self attention over the columns of ``x`` ((..., D, M))."""
    x = ad._as_tensor(x)
    m = x.shape[-1]
    if m < 1:
        raise ShapeError("self_attention needs at least one column")
    v = ad.matmul(params.w_v, x)
    k = ad.matmul(params.w_k, x)
    q = ad.matmul(params.w_q, x)
    logits = ad.matmul(ad.transpose(k), q)
    mask_mat = mask.matrix(m)
    if mask_mat is not None:
        logits = ad.add(logits, Tensor(mask_mat))
    return ad.matmul(v, ad.softmax_columns(logits))


def multi_head(
    x: Tensor,
    heads: list[AttentionHeadParams],
    w_o: Tensor,
    b_o: Tensor,
    mask: MaskKind,
) -> Tensor:
    """Concatenate per-head attention outputs and project back to D."""
    outs = [self_attention(x, h, mask) for h in heads]
    cat = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-2)
    return ad.add(ad.matmul(w_o, cat), b_o)


def layer_norm(x: Tensor, params: LayerNormParams) -> Tensor:
    """Column-wise standardization with learnable per-coordinate affine."""
    x = ad._as_tensor(x)
    if x.shape[-2] < 2:
        raise ShapeError("layer_norm needs at least 2 coordinates per column")
    m = ad.reduce_mean(x, axis=-2, keepdims=True)
    centered = ad.sub(x, m)
    var = ad.reduce_mean(ad.square(centered), axis=-2, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, params.epsilon)))
    return ad.add(ad.mul(params.a, normed), params.b)


def _mlp(x: Tensor, params: MlpParams) -> Tensor:
    h = ad.add(ad.matmul(params.w1, x), params.b1)
    if params.activation == "gelu":
        h = ad.gelu(h)
    elif params.activation == "relu":
        h = ad.relu(h)
    else:
        raise ValueError(f"unknown activation {params.activation!r}")
    return ad.add(ad.matmul(params.w2, h), params.b2)


def attention_block(x: Tensor, params: AttentionBlockParams, mask: MaskKind) -> Tensor:
    """Pre-norm residual block: x' = x + MHA(LN1 x); out = x' + MLP(LN2 x')."""
    x = ad._as_tensor(x)
    if x.shape[-2] != params.w_o.shape[0]:
        raise ShapeError(
            f"block expects {params.w_o.shape[0]} rows, got {x.shape[-2]}"
        )
    normed = layer_norm(x, params.ln1)
    x1 = ad.add(x, multi_head(normed, params.heads, params.w_o, params.b_o, mask))
    return ad.add(x1, _mlp(layer_norm(x1, params.ln2), params.mlp))
