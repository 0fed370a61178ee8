"""Gridless attention estimator: embedding, block stack, scalar head.

The estimator maps an invariant feature matrix (one column per
measurement) through a linear embedding, a stack of masked attention
blocks and a linear scalar head, giving one running estimate per prefix of
the measurement sequence under the causal mask.  Training minimizes either
the per-prefix squared error ("causal" loss) or the squared error of the
column-averaged estimate ("mean" loss).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .attention import (
    AttentionBlockParams,
    AttentionHeadParams,
    LayerNormParams,
    MaskKind,
    MlpParams,
    attention_block,
)
from .features import FeatureConfig, FeatureMatrix, build_features, feature_dim

CHECKPOINT_MAGIC = b"STORMRME\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 48               # embedding dimension D
    heads: int = 2
    blocks: int = 4
    mlp_mult: int = 2
    activation: str = "gelu"    # or "relu"
    mask: str = "causal"        # or "none" (mean-reduce variant)
    polar: bool = True
    length_scale: float = 32.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ValueError("need at least one attention block")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def feature_dim(self) -> int:
        return 6 if self.polar else 3

    @property
    def hidden(self) -> int:
        return self.mlp_mult * self.dim


def _linear(rng, rows, cols, scale=None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(cols)
    return Tensor(rng.normal(0.0, scale, size=(rows, cols)), requires_grad=True)


def _zeros(rows, cols) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True)


def _init_block(rng, cfg: ModelConfig) -> AttentionBlockParams:
    d, h = cfg.dim, cfg.heads
    dv = d // h
    heads = [
        AttentionHeadParams(
            w_v=_linear(rng, dv, d),
            w_k=_linear(rng, dv, d),
            w_q=_linear(rng, dv, d, scale=1.0 / np.sqrt(d * np.sqrt(dv))),
        )
        for _ in range(h)
    ]
    return AttentionBlockParams(
        heads=heads,
        w_o=_linear(rng, d, d),
        b_o=_zeros(d, 1),
        ln1=LayerNormParams(a=Tensor(np.ones((d, 1)), requires_grad=True),
                            b=_zeros(d, 1)),
        ln2=LayerNormParams(a=Tensor(np.ones((d, 1)), requires_grad=True),
                            b=_zeros(d, 1)),
        mlp=MlpParams(
            w1=_linear(rng, cfg.hidden, d),
            b1=_zeros(cfg.hidden, 1),
            w2=_linear(rng, d, cfg.hidden),
            b2=_zeros(d, 1),
            activation=cfg.activation,
        ),
    )


class StormModel:
    """All learnable parameters plus power-normalization statistics."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, f = config.dim, config.feature_dim
        self.embed_w = _linear(rng, d, f)
        self.embed_b = _zeros(d, 1)
        self.blocks = [_init_block(rng, config) for _ in range(config.blocks)]
        self.head_w = _linear(rng, 1, d)
        self.head_b = _zeros(1, 1)
        # candidate branch (quality scores for active sensing)
        self.cand_embed_w = _linear(rng, d, f - 1)
        self.cand_embed_b = _zeros(d, 1)
        self.cand_attn = AttentionHeadParams(
            w_v=_linear(rng, d, d),
            w_k=_linear(rng, d, d),
            w_q=_linear(rng, d, d, scale=1.0 / np.sqrt(d * np.sqrt(d))),
        )
        self.g_mlp_w1 = _linear(rng, config.hidden, d)
        self.g_mlp_b1 = _zeros(config.hidden, 1)
        self.g_head_w = _linear(rng, 1, config.hidden)
        self.g_head_b = _zeros(1, 1)
        self.power_mean = 0.0
        self.power_std = 1.0
        self.trained_n_max: int | None = None

    # ------------------------------------------------------------------
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            polar=self.config.polar,
            length_scale=self.config.length_scale,
            power_mean=self.power_mean,
            power_std=self.power_std,
        )

    def set_power_stats(self, mean: float, std: float) -> None:
        self.power_mean = float(mean)
        self.power_std = float(std)

    def named_parameters(self):
        yield "embed.w", self.embed_w
        yield "embed.b", self.embed_b
        for i, blk in enumerate(self.blocks):
            for h, head in enumerate(blk.heads):
                yield f"block{i}.head{h}.w_v", head.w_v
                yield f"block{i}.head{h}.w_k", head.w_k
                yield f"block{i}.head{h}.w_q", head.w_q
            yield f"block{i}.w_o", blk.w_o
            yield f"block{i}.b_o", blk.b_o
            yield f"block{i}.ln1.a", blk.ln1.a
            yield f"block{i}.ln1.b", blk.ln1.b
            yield f"block{i}.ln2.a", blk.ln2.a
            yield f"block{i}.ln2.b", blk.ln2.b
            yield f"block{i}.mlp.w1", blk.mlp.w1
            yield f"block{i}.mlp.b1", blk.mlp.b1
            yield f"block{i}.mlp.w2", blk.mlp.w2
            yield f"block{i}.mlp.b2", blk.mlp.b2
        yield "head.w", self.head_w
        yield "head.b", self.head_b
        yield "cand_embed.w", self.cand_embed_w
        yield "cand_embed.b", self.cand_embed_b
        yield "cand_attn.w_v", self.cand_attn.w_v
        yield "cand_attn.w_k", self.cand_attn.w_k
        yield "cand_attn.w_q", self.cand_attn.w_q
        yield "g_mlp.w1", self.g_mlp_w1
        yield "g_mlp.b1", self.g_mlp_b1
        yield "g_head.w", self.g_head_w
        yield "g_head.b", self.g_head_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def mask(self, split: int | None = None) -> MaskKind:
        if split is not None:
            return MaskKind.modified_causal(split)
        if self.config.mask == "causal":
            return MaskKind.causal()
        return MaskKind.none()


def count_parameters(model: StormModel) -> int:
    return sum(t.size for t in model.parameters())


# ---------------------------------------------------------------------------
# forward passes

def forward_columns(model: StormModel, columns, mask: MaskKind | None = None) -> Tensor:
    """Estimates in normalized power units for feature columns (..., F, N)."""
    if mask is None:
        mask = model.mask()
    x = ad.add(ad.matmul(model.embed_w, ad._as_tensor(columns)), model.embed_b)
    for blk in model.blocks:
        x = attention_block(x, blk, mask)
    out = ad.add(ad.matmul(model.head_w, x), model.head_b)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-1],))


def forward(model: StormModel, features: FeatureMatrix) -> np.ndarray:
    """Per-prefix estimates in dB for one feature matrix.

    Under the causal mask, entry n is the estimate given the first n
    measurement columns only.
    """
    if features.columns.shape[0] != model.config.feature_dim:
        raise ad.ShapeError(
            f"feature dim {features.columns.shape[0]} != "
            f"model feature dim {model.config.feature_dim}"
        )
    f = forward_columns(model, features.columns).data
    return f * model.power_std + model.power_mean


def estimate_batch(model: StormModel, locations, powers, targets) -> np.ndarray:
    """Estimate the map at each target given one shared measurement set.

    Returns one dB value per target: the full-prefix estimate under the
    causal mask, or the column average for the unmasked variant.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    fc = model.feature_config()
    cols = np.stack(
        [build_features(locations, powers, t, fc).columns for t in targets]
    )
    f = forward_columns(model, cols).data
    if model.config.mask == "causal":
        vals = f[:, -1]
    else:
        vals = f.mean(axis=1)
    return vals * model.power_std + model.power_mean


# ---------------------------------------------------------------------------
# losses

def _normalize_targets(model: StormModel, targets) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    return (y - model.power_mean) / model.power_std


def loss_causal(model: StormModel, batch_columns, targets) -> Tensor:
    """Mean over examples and prefixes of the squared prefix-estimate error.

    ``batch_columns`` is (T, F, N) — every example in a batch shares N —
    and ``targets`` holds the T target powers in dB.
    """
    batch_columns = np.asarray(batch_columns, dtype=np.float64)
    if batch_columns.ndim != 3 or batch_columns.shape[0] == 0:
        raise ValueError("loss_causal needs a nonempty (T, F, N) batch")
    y = _normalize_targets(model, targets)[:, None]
    f = forward_columns(model, batch_columns, mask=MaskKind.causal())
    return ad.reduce_mean(ad.square(ad.sub(Tensor(y), f)))


def loss_mean_reduce(model: StormModel, batches) -> Tensor:
    """Squared error of the column-averaged estimate, mean over examples.

    ``batches`` is a list of ((F, N) columns, target) pairs; N may vary
    per example.
    """
    if not batches:
        raise ValueError("loss_mean_reduce needs a nonempty batch")
    terms = []
    for columns, target in batches:
        y = float(_normalize_targets(model, target))
        f = forward_columns(model, np.asarray(columns, dtype=np.float64),
                            mask=MaskKind.none())
        terms.append(ad.square(ad.sub(y, ad.reduce_mean(f))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms)))


# ---------------------------------------------------------------------------
# optimization

@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    loss: str = "causal"        # or "mean"
    cosine_decay: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class AdamOptimizer:
    def __init__(self, params: list[Tensor], cfg: TrainingConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        cfg = self.cfg
        if lr is None:
            lr = cfg.learning_rate
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        if cfg.grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
        b1, b2 = cfg.beta1, cfg.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train(model: StormModel, dataset, cfg: TrainingConfig) -> list[float]:
    """Adam training loop; returns the per-step loss trace.

    ``dataset`` must provide ``sample_batch(rng, batch_size)`` returning a
    ``(columns, targets)`` pair with columns shaped (T, F, N) (fixed N per
    batch) and targets in dB.  Deterministic given ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamOptimizer(params, cfg)
    trace: list[float] = []
    for step in range(cfg.steps):
        columns, targets = dataset.sample_batch(rng, cfg.batch_size)
        with Tape() as tape:
            if cfg.loss == "causal":
                loss = loss_causal(model, columns, targets)
            elif cfg.loss == "mean":
                loss = loss_mean_reduce(model, list(zip(columns, targets)))
            else:
                raise ValueError(f"unknown loss variant {cfg.loss!r}")
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"training diverged: loss={value} at step {step}"
                )
            opt.zero_grad()
            tape.backward(loss)
        lr = cfg.learning_rate
        if cfg.cosine_decay:
            lr *= 0.5 * (1.0 + np.cos(np.pi * step / max(cfg.steps - 1, 1)))
        opt.step(lr)
        trace.append(value)
    return trace


# ---------------------------------------------------------------------------
# checkpointing

def _config_dict(model: StormModel) -> dict:
    d = asdict(model.config)
    d["power_mean"] = model.power_mean
    d["power_std"] = model.power_std
    d["trained_n_max"] = model.trained_n_max
    return d


def save_checkpoint(model: StormModel, path) -> None:
    """Write magic, version, JSON config block, then named float64 arrays."""
    names, tensors = zip(*model.named_parameters())
    header = {
        "config": _config_dict(model),
        "arrays": [{"name": n, "shape": list(t.shape)} for n, t in
                   zip(names, tensors)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> StormModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic header")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg_dict = dict(header["config"])
        power_mean = cfg_dict.pop("power_mean")
        power_std = cfg_dict.pop("power_std")
        trained_n_max = cfg_dict.pop("trained_n_max", None)
        model = StormModel(ModelConfig(**cfg_dict), seed=0)
        model.set_power_stats(power_mean, power_std)
        model.trained_n_max = trained_n_max
        params = dict(model.named_parameters())
        for entry in header["arrays"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in params:
                raise CheckpointError(f"{path}: unknown array {name!r}")
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            if arr.shape != params[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for {name!r}")
            params[name].data = arr.copy()
    return model
