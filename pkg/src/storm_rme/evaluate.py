"""Monte-Carlo RMSE evaluation: observed/unobserved splits, sweeps, reports.

Each iteration samples a patch from a test measurement set, splits its
indices into an observed set of fixed size and the complement, feeds the
observed measurements to every estimator on identical splits, and scores
estimates at the complement locations.  Results aggregate into RMSE-vs-N
curves with standard errors, written as delimited text plus a rendered
figure and a machine-readable metadata file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import KnnEstimator, KrigingEstimator, KrrEstimator
from .data import MeasurementSet, sample_patch
from .fastpath import FastModel, fast_forward_columns
from .features import build_features
from .model import StormModel

__all__ = [
    "rmse",
    "EvalReport",
    "StormEstimator",
    "TruthEstimator",
    "run_rmse_sweep",
    "run_active_comparison",
    "write_report",
]


def rmse(truth, estimates) -> float:
    """Root of the mean squared difference, in the input (dB) units."""
    truth = np.asarray(truth, dtype=np.float64)
    estimates = np.asarray(estimates, dtype=np.float64)
    if truth.shape != estimates.shape:
        raise ValueError(f"length mismatch: {truth.shape} vs {estimates.shape}")
    if truth.size == 0:
        raise ValueError("rmse of empty sequences")
    return float(np.sqrt(np.mean((truth - estimates) ** 2)))


class StormEstimator:
    """Adapter presenting a trained model through the common interface."""

    def __init__(self, model: StormModel):
        self.model = model
        self.fast = FastModel(model)
        self.feature_config = model.feature_config()

    def predict(self, locations, powers, queries) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        cols = np.stack([
            build_features(locations, powers, q, self.feature_config).columns
            for q in queries
        ])
        f = fast_forward_columns(self.fast, cols)
        vals = f[:, -1] if self.model.config.mask == "causal" else f.mean(axis=1)
        return vals * self.fast.power_std + self.fast.power_mean


class TruthEstimator:
    """Ground-truth oracle; its RMSE is the measurement-noise floor."""

    def __init__(self, truth_map):
        self.truth_map = truth_map

    def predict(self, locations, powers, queries) -> np.ndarray:
        return self.truth_map(np.atleast_2d(np.asarray(queries)))


@dataclass
class EvalReport:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        cols = list(self.rows[0].keys())
        lines = []
        for key in ("config_hash", "seed"):
            if key in self.metadata:
                lines.append(f"# {key} {self.metadata[key]}")
        lines.append(",".join(cols))
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _split_hash(entries) -> str:
    h = hashlib.sha256()
    for e in entries:
        h.update(np.ascontiguousarray(e).tobytes())
    return h.hexdigest()[:16]


def _draw_scene(sets, patch_side, n, rng, grid_aligned):
    """One evaluation scene: patch plus an observed/complement index split."""
    patch = None
    for _ in range(100):
        ms = sets[rng.integers(0, len(sets))]
        cand = sample_patch(ms, patch_side, rng, grid_aligned)
        if cand.count >= n + 1:
            patch = cand
            break
    if patch is None:
        raise RuntimeError(
            f"no patch with more than {n} measurements after 100 draws"
        )
    order = rng.permutation(patch.count)
    obs, rest = order[:n], order[n:]
    return (patch.locations[obs], patch.powers[obs],
            patch.locations[rest], patch.powers[rest],
            np.concatenate([[n], obs, rest]))


def _score_scenes(estimator, scenes):
    """Squared errors of one estimator over a list of drawn scenes."""
    return [
        (estimator.predict(obs_loc, obs_pow, q_loc) - q_pow) ** 2
        for obs_loc, obs_pow, q_loc, q_pow in scenes
    ]


def run_rmse_sweep(
    sets: list[MeasurementSet],
    estimators: dict[str, object],
    n_values: list[int],
    iterations: int,
    patch_side: float,
    seed: int = 0,
    grid_aligned: bool = True,
    workers: int = 1,
    metadata: dict | None = None,
) -> EvalReport:
    """RMSE-vs-N curves; every estimator consumes identical splits.

    All patches and splits are drawn up front from one seeded stream, so
    results are byte-identical for any worker count.
    """
    if not sets:
        raise ValueError("no measurement sets to evaluate on")
    if not estimators:
        raise ValueError("no estimators given")
    rows = []
    split_entries = []
    rng = np.random.default_rng(seed)
    scenes = {n: [] for n in n_values}
    for n in n_values:
        for _ in range(iterations):
            obs_loc, obs_pow, q_loc, q_pow, entry = _draw_scene(
                sets, patch_side, n, rng, grid_aligned)
            split_entries.append(entry)
            scenes[n].append((obs_loc, obs_pow, q_loc, q_pow))
    pooled = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(name, n) for name in estimators for n in n_values]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                _score_scenes,
                [estimators[name] for name, _ in jobs],
                [scenes[n] for _, n in jobs],
            ))
        pooled = dict(zip(jobs, results))
    else:
        for name, est in estimators.items():
            for n in n_values:
                pooled[(name, n)] = _score_scenes(est, scenes[n])
    for name in estimators:
        for n in n_values:
            per_iter = [sq.mean() for sq in pooled[(name, n)]]
            sq = np.concatenate(pooled[(name, n)])
            value = float(np.sqrt(sq.mean()))
            iters = np.asarray(per_iter)
            se_mse = iters.std(ddof=1) / np.sqrt(len(iters)) if len(iters) > 1 else 0.0
            stderr = float(se_mse / (2.0 * value)) if value > 0 else 0.0
            rows.append({
                "estimator": name, "n": n, "rmse_db": value,
                "stderr_db": stderr, "iterations": iterations,
            })
    meta = dict(metadata or {})
    meta.update({
        "seed": seed,
        "patch_side_m": patch_side,
        "iterations": iterations,
        "n_values": list(n_values),
        "split_hash": _split_hash(split_entries),
    })
    return EvalReport(rows, meta)


def run_active_comparison(
    model: StormModel,
    sets: list[MeasurementSet],
    n_values: list[int],
    scenes: int,
    patch_side: float,
    seed: int = 0,
    grid_aligned: bool = True,
    max_candidates: int | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    """Quality-score-guided vs uniformly random next-measurement refinement.

    Each scene fixes one evaluation location; both strategies refine with
    one extra measurement and re-estimate, giving paired squared errors.
    """
    from .active import active_forward

    estimator = StormEstimator(model)
    rng = np.random.default_rng(seed)
    rows = []
    paired = {}
    for n in n_values:
        err_sel, err_rnd = [], []
        for _ in range(scenes):
            patch = None
            for _ in range(100):
                ms = sets[rng.integers(0, len(sets))]
                cand = sample_patch(ms, patch_side, rng, grid_aligned)
                if cand.count >= n + 2:
                    patch = cand
                    break
            if patch is None:
                raise RuntimeError("no patch large enough for active scene")
            order = rng.permutation(patch.count)
            t_idx, m_idx, c_idx = order[0], order[1:n + 1], order[n + 1:]
            if max_candidates is not None and len(c_idx) > max_candidates:
                c_idx = c_idx[:max_candidates]
            target = patch.locations[t_idx]
            y_true = patch.powers[t_idx]
            m_loc, m_pow = patch.locations[m_idx], patch.powers[m_idx]
            c_loc, c_pow = patch.locations[c_idx], patch.powers[c_idx]
            out = active_forward(model, m_loc, m_pow, c_loc, target)
            pick_sel = int(np.argmax(out.quality))
            pick_rnd = int(rng.integers(0, len(c_idx)))
            for pick, sink in ((pick_sel, err_sel), (pick_rnd, err_rnd)):
                loc2 = np.vstack([m_loc, c_loc[pick]])
                pow2 = np.append(m_pow, c_pow[pick])
                est = estimator.predict(loc2, pow2, target)[0]
                sink.append((est - y_true) ** 2)
        err_sel = np.asarray(err_sel)
        err_rnd = np.asarray(err_rnd)
        for name, err in (("selected", err_sel), ("random", err_rnd)):
            value = float(np.sqrt(err.mean()))
            se = float(err.std(ddof=1) / np.sqrt(len(err)) / (2 * value)) \
                if value > 0 else 0.0
            rows.append({
                "estimator": name, "n": n, "rmse_db": value,
                "stderr_db": se, "iterations": scenes,
            })
        # paired difference of squared errors, mapped onto the RMSE scale
        diff = err_rnd - err_sel
        mean_rmse = 0.5 * (np.sqrt(err_sel.mean()) + np.sqrt(err_rnd.mean()))
        diff_rmse = float(np.sqrt(err_rnd.mean()) - np.sqrt(err_sel.mean()))
        se_diff = float(diff.std(ddof=1) / np.sqrt(len(diff))
                        / (2 * mean_rmse)) if mean_rmse > 0 else 0.0
        paired[str(n)] = {
            "rmse_gain_db": diff_rmse,
            "stderr_db": se_diff,
            "scenes": scenes,
        }
    meta = dict(metadata or {})
    meta.update({
        "seed": seed,
        "patch_side_m": patch_side,
        "scenes": scenes,
        "n_values": list(n_values),
        "paired": paired,
    })
    return EvalReport(rows, meta)


# ---------------------------------------------------------------------------
# report output: CSV + JSON metadata + rendered figure

def write_report(report: EvalReport, out_dir, name: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    meta_path = out_dir / f"{name}.meta.json"
    fig_path = out_dir / f"{name}.png"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    meta_path.write_text(
        json.dumps(report.metadata, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    _render_figure(report, fig_path)
    return {"csv": csv_path, "metadata": meta_path, "figure": fig_path}


def _render_figure(report: EvalReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    names = []
    for row in report.rows:
        if row["estimator"] not in names:
            names.append(row["estimator"])
    for name in names:
        pts = [(r["n"], r["rmse_db"], r["stderr_db"])
               for r in report.rows if r["estimator"] == name]
        pts.sort()
        ns = [p[0] for p in pts]
        vals = [p[1] for p in pts]
        errs = [p[2] for p in pts]
        ax.errorbar(ns, vals, yerr=errs, marker="o", capsize=3, label=name)
    ax.set_xlabel("observed measurements N")
    ax.set_ylabel("RMSE (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    meta = {"Software": "storm-rme"}
    if "config_hash" in report.metadata:
        meta["Description"] = (
            f"config_hash={report.metadata['config_hash']} "
            f"seed={report.metadata.get('seed')}"
        )
    fig.savefig(path, dpi=120, metadata=meta)
    plt.close(fig)
