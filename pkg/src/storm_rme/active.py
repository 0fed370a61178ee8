"""Active sensing: candidate scoring and next-measurement selection.

The block stack is split into an encoder (all blocks but the last) and a
decoder (last block plus the scalar head).  Candidate locations are
embedded from power-free geometric features, cross-attend to the
measurement latents, and a softmax head turns the resulting scalars into
a probability vector g over candidates.  During training the full input
additionally carries the candidate measurements, processed under the
modified-causal mask so each candidate column sees the real measurements
and itself only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import MaskKind, attention_block
from .data import MeasurementSet, sample_patch
from .features import FeatureConfig, build_candidate_features, build_features
from .model import StormModel, forward_columns

__all__ = [
    "CandidateSet",
    "ActiveOutput",
    "encode_measurements",
    "decode_estimates",
    "score_candidates",
    "candidate_estimates",
    "loss_active",
    "select_next",
    "make_candidate_set",
    "ActiveSampler",
]


@dataclass
class CandidateSet:
    locations: np.ndarray   # (Q, 2)
    encoded: np.ndarray     # (feature_dim - 1, Q), measurement-frame geometry

    @property
    def count(self) -> int:
        return self.locations.shape[0]


@dataclass
class ActiveOutput:
    """Per-prefix estimates plus candidate quality scores.

    ``estimates`` holds N per-prefix dB estimates, extended by Q candidate
    estimates when candidate powers were supplied (training-time scenes).
    """

    estimates: np.ndarray       # (N,) or (N + Q,) dB
    quality: np.ndarray         # (Q,) probability vector g


def make_candidate_set(model: StormModel, measurements: np.ndarray,
                       powers: np.ndarray, candidates: np.ndarray,
                       target) -> tuple["CandidateSet", np.ndarray]:
    """Build measurement features and candidate geometry in a shared frame.

    The rotation frame comes from the measurements only; candidates never
    enter the direction sum.
    """
    fc = model.feature_config()
    feats = build_features(measurements, powers, target, fc)
    encoded = build_candidate_features(candidates, feats.frame, target, fc)
    return CandidateSet(np.asarray(candidates, dtype=np.float64), encoded), \
        feats.columns


def encode_measurements(model: StormModel, columns,
                        mask: MaskKind | None = None) -> Tensor:
    """Latent matrix after the encoder blocks (all but the last)."""
    if mask is None:
        mask = MaskKind.causal()
    x = ad.add(ad.matmul(model.embed_w, ad._as_tensor(columns)), model.embed_b)
    for blk in model.blocks[:-1]:
        x = attention_block(x, blk, mask)
    return x


def decode_estimates(model: StormModel, latent: Tensor,
                     mask: MaskKind | None = None) -> Tensor:
    """Last block plus scalar head, giving normalized-unit estimates."""
    if mask is None:
        mask = MaskKind.causal()
    x = attention_block(latent, model.blocks[-1], mask)
    out = ad.add(ad.matmul(model.head_w, x), model.head_b)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-1],))


def score_candidates(model: StormModel, measurement_latent: Tensor,
                     encoded_candidates) -> Tensor:
    """Quality probability vector g over candidates.

    ``measurement_latent`` is the encoder output over the measurement
    columns only ((..., D, N)); ``encoded_candidates`` the power-free
    candidate features ((..., F-1, Q)).  No measured power at a candidate
    location can reach g: candidates enter only through their geometry.
    """
    c = ad._as_tensor(encoded_candidates)
    if c.shape[-1] < 1:
        raise ValueError("score_candidates needs at least one candidate")
    c_lat = ad.add(ad.matmul(model.cand_embed_w, c), model.cand_embed_b)
    k = ad.matmul(model.cand_attn.w_k, measurement_latent)
    v = ad.matmul(model.cand_attn.w_v, measurement_latent)
    q = ad.matmul(model.cand_attn.w_q, c_lat)
    att = ad.softmax_columns(ad.matmul(ad.transpose(k), q))
    h = ad.add(c_lat, ad.matmul(v, att))
    hid = ad.gelu(ad.add(ad.matmul(model.g_mlp_w1, h), model.g_mlp_b1))
    logits = ad.add(ad.matmul(model.g_head_w, hid), model.g_head_b)
    g = ad.softmax(logits, axis=-1)
    return ad.reshape(g, g.shape[:-2] + (g.shape[-1],))


def candidate_estimates(model: StormModel, full_columns, split: int) -> Tensor:
    """Normalized estimates for measurement + candidate columns.

    ``full_columns`` is (..., F, N+Q) including candidate powers (training
    time); column N+l is the estimate given the N measurements plus
    candidate l alone.
    """
    mask = MaskKind.modified_causal(split)
    return forward_columns(model, full_columns, mask=mask)


def active_forward(model: StormModel, measurements, powers, candidates,
                   target, candidate_powers=None) -> ActiveOutput:
    """Per-prefix estimates plus quality scores for one scene.

    With ``candidate_powers`` (training-time scenes) the estimate vector is
    extended by the Q candidate estimates under the modified-causal mask.
    """
    cand_set, meas_columns = make_candidate_set(
        model, measurements, powers, candidates, target)
    latent = encode_measurements(model, meas_columns)
    f = decode_estimates(model, latent).data
    g = score_candidates(model, latent, cand_set.encoded).data
    if candidate_powers is not None:
        fc = model.feature_config()
        c_pow = (np.asarray(candidate_powers, dtype=np.float64)
                 - fc.power_mean) / fc.power_std
        cand_full = np.vstack([c_pow[None, :], cand_set.encoded])
        full = np.concatenate([meas_columns, cand_full], axis=1)
        n = meas_columns.shape[1]
        f = candidate_estimates(model, full, n).data
    estimates = f * model.power_std + model.power_mean
    return ActiveOutput(estimates, g)


def select_next(model: StormModel, measurements, powers, candidates,
                target) -> int:
    """Index of the best candidate: argmax of g, lowest index on ties."""
    out = active_forward(model, measurements, powers, candidates, target)
    return int(np.argmax(out.quality))


# ---------------------------------------------------------------------------
# training

def loss_active(model: StormModel, full_columns, cand_columns, split: int,
                targets) -> Tensor:
    """Combined loss: per-prefix errors plus the convex-combination term.

    ``full_columns`` is (T, F, N+Q) with candidate powers included,
    ``cand_columns`` (T, F-1, Q) the power-free candidate features,
    ``split`` = N, ``targets`` the T target powers in dB.
    """
    full_columns = np.asarray(full_columns, dtype=np.float64)
    if full_columns.ndim != 3 or full_columns.shape[0] == 0:
        raise ValueError("loss_active needs a nonempty (T, F, N+Q) batch")
    n = split
    q = full_columns.shape[-1] - n
    if q < 1:
        raise ValueError("active loss needs at least one candidate column")
    y = (np.asarray(targets, dtype=np.float64) - model.power_mean) / model.power_std
    mask = MaskKind.modified_causal(n)
    latent = encode_measurements(model, full_columns, mask=mask)
    f = decode_estimates(model, latent, mask=mask)          # (T, N+Q)
    f_meas = ad.slice_axis(f, -1, 0, n)
    f_cand = ad.slice_axis(f, -1, n, n + q)
    meas_latent = ad.slice_axis(latent, -1, 0, n)
    g = score_candidates(model, meas_latent, cand_columns)  # (T, Q)
    combined = ad.reduce_sum(ad.mul(g, f_cand), axis=-1)    # (T,)
    y_col = Tensor(y[:, None])
    term1 = ad.reduce_mean(ad.square(ad.sub(y_col, f_meas)), axis=-1)
    term2 = ad.square(ad.sub(Tensor(y), combined))
    per_example = ad.add(ad.mul(0.5, term1), ad.mul(0.5, term2))
    return ad.reduce_mean(per_example)


def train_active(model: StormModel, sampler: "ActiveSampler", cfg) -> list[float]:
    """Adam loop on the combined active loss; returns the loss trace."""
    from .autodiff import Tape
    from .model import AdamOptimizer

    rng = np.random.default_rng(cfg.seed)
    opt = AdamOptimizer(model.parameters(), cfg)
    trace: list[float] = []
    for step in range(cfg.steps):
        full, cand, split, targets = sampler.sample_batch(rng, cfg.batch_size)
        with Tape() as tape:
            loss = loss_active(model, full, cand, split, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"active training diverged: loss={value} at step {step}"
                )
            opt.zero_grad()
            tape.backward(loss)
        lr = cfg.learning_rate
        if cfg.cosine_decay:
            lr *= 0.5 * (1.0 + np.cos(np.pi * step / max(cfg.steps - 1, 1)))
        opt.step(lr)
        trace.append(value)
    return trace


class ActiveSampler:
    """Training batches for the active loss: N inputs plus Q candidates."""

    def __init__(self, sets: list[MeasurementSet], patch_side: float,
                 n_min: int, n_max: int, q: int,
                 feature_config: FeatureConfig, grid_aligned: bool = True):
        if q < 1:
            raise ValueError("need at least one candidate")
        self.sets = sets
        self.patch_side = patch_side
        self.n_min = n_min
        self.n_max = n_max
        self.q = q
        self.feature_config = feature_config
        self.grid_aligned = grid_aligned

    def sample_batch(self, rng, batch_size: int):
        n = int(rng.integers(self.n_min, self.n_max + 1))
        q = self.q
        full, cand, targets = [], [], []
        for _ in range(batch_size):
            patch = None
            for _ in range(100):
                ms = self.sets[rng.integers(0, len(self.sets))]
                p = sample_patch(ms, self.patch_side, rng, self.grid_aligned)
                if p.count >= n + q + 1:
                    patch = p
                    break
            if patch is None:
                raise RuntimeError("no patch large enough for active batch")
            chosen = rng.choice(patch.count, size=n + q + 1, replace=False)
            t_idx, m_idx, c_idx = chosen[0], chosen[1:n + 1], chosen[n + 1:]
            target = patch.locations[t_idx]
            feats = build_features(patch.locations[m_idx], patch.powers[m_idx],
                                   target, self.feature_config)
            c_geom = build_candidate_features(
                patch.locations[c_idx], feats.frame, target, self.feature_config)
            fc = self.feature_config
            c_pow = (patch.powers[c_idx] - fc.power_mean) / fc.power_std
            cand_full = np.vstack([c_pow[None, :], c_geom])
            full.append(np.concatenate([feats.columns, cand_full], axis=1))
            cand.append(c_geom)
            targets.append(patch.powers[t_idx])
        return (np.stack(full), np.stack(cand), n,
                np.asarray(targets, dtype=np.float64))
