"""Central finite-difference audit of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-5


def check_gradients(loss_fn, params: list[Tensor], step: float = DEFAULT_STEP,
                    max_coords: int = 200, rng=None) -> float:
    """Max relative error between reverse-mode and central differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter
    values; parameter data is perturbed in place for the differences.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = grad.ravel()
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = loss_fn().item()
            flat[i] = old - step
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd) + abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
        p.grad = None
    return worst


def run_gradcheck(seed: int = 0, tol: float = DEFAULT_TOL):
    """Battery of gradient checks on tiny configurations.

    Returns a list of (name, max_rel_err, passed) tuples.
    """
    from .active import loss_active
    from .attention import MaskKind, attention_block
    from .model import ModelConfig, StormModel, loss_causal, loss_mean_reduce

    rng = np.random.default_rng(seed)
    results = []

    def record(name, worst, tolerance=tol):
        results.append((name, worst, worst < tolerance))

    # primitive: matmul chain
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    record("matmul", check_gradients(
        lambda: ad.reduce_sum(ad.square(ad.matmul(a, b))), [a, b], rng=rng))

    # primitive: column softmax
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 4)))
    record("softmax_columns", check_gradients(
        lambda: ad.reduce_sum(ad.mul(w, ad.softmax_columns(x))), [x], rng=rng))

    # primitive: gelu
    x2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    record("gelu", check_gradients(
        lambda: ad.reduce_sum(ad.square(ad.gelu(x2))), [x2], rng=rng))

    tiny_cfg = ModelConfig(dim=8, heads=2, blocks=2, mlp_mult=2)
    model = StormModel(tiny_cfg, seed=seed)
    n, q, t = 5, 3, 2
    f = tiny_cfg.feature_dim

    # attention block under each mask
    blk = model.blocks[0]
    xb = Tensor(rng.normal(size=(8, n)), requires_grad=True)
    for mask_name, mask in (("none", MaskKind.none()),
                            ("causal", MaskKind.causal()),
                            ("modified", MaskKind.modified_causal(3))):
        record(f"attention_block[{mask_name}]", check_gradients(
            lambda: ad.reduce_sum(ad.square(attention_block(xb, blk, mask))),
            [xb] + blk.tensors(), rng=rng))

    cols = rng.normal(size=(t, f, n))
    targets = rng.normal(size=t)
    params = model.parameters()

    record("loss_mean_reduce", check_gradients(
        lambda: loss_mean_reduce(model, list(zip(cols, targets))),
        params, rng=rng))
    record("loss_causal", check_gradients(
        lambda: loss_causal(model, cols, targets), params, rng=rng))

    full = rng.normal(size=(t, f, n + q))
    cand = rng.normal(size=(t, f - 1, q))
    record("loss_active", check_gradients(
        lambda: loss_active(model, full, cand, n, targets), params, rng=rng))

    return results
