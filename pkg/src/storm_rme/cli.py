"""Command-line entry point: generate, train, eval, active, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_sets(data_dir: Path, prefix: str):
    from .data import read_ms_file

    paths = sorted(data_dir.glob(f"{prefix}_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.csv files in {data_dir}")
    return [read_ms_file(p) for p in paths]


def cmd_generate(cfg: RunConfig) -> None:
    from .data import SyntheticMapConfig, generate_synthetic_ms, write_ms_file

    mp = cfg["map"]
    data_dir = cfg.path("data_dir")
    data_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    written = []
    for prefix, count in (("train", mp["train_sets"]), ("test", mp["test_sets"])):
        for i in range(count):
            tx = (float(rng.uniform(0.0, mp["extent_x"])),
                  float(rng.uniform(0.0, mp["extent_y"])))
            map_cfg = SyntheticMapConfig(
                tx_location=tx,
                p0_db=mp["p0_db"], d0_m=mp["d0_m"], gamma=mp["gamma"],
                shadow_std_db=mp["shadow_std_db"],
                shadow_corr_m=mp["shadow_corr_m"],
                noise_std_db=mp["noise_std_db"],
                extent=(mp["extent_x"], mp["extent_y"]),
                grid_spacing=mp["grid_spacing"],
                shadow_resolution=mp["shadow_resolution"],
                seed=int(rng.integers(0, 2**31 - 1)),
            )
            name = f"{prefix}_{i:03d}"
            ms, _ = generate_synthetic_ms(map_cfg, identifier=name)
            path = data_dir / f"{name}.csv"
            write_ms_file(ms, path)
            written.append(path.name)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "files": written}
    (data_dir / "generation.meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _log(f"generate: wrote {len(written)} measurement sets to {data_dir}")


def cmd_train(cfg: RunConfig) -> None:
    from .data import ExampleSampler, power_statistics
    from .model import (ModelConfig, StormModel, TrainingConfig,
                        count_parameters, save_checkpoint, train)

    tr = cfg["train"]
    mc = cfg["model"]
    sets = _read_sets(cfg.path("data_dir"), "train")
    model = StormModel(
        ModelConfig(
            dim=mc["dim"], heads=mc["heads"], blocks=mc["blocks"],
            mlp_mult=mc["mlp_mult"], activation=mc["activation"],
            mask=mc["mask"], polar=mc["polar"],
            length_scale=mc["length_scale"], dropout=mc["dropout"],
        ),
        seed=cfg.seed,
    )
    model.set_power_stats(*power_statistics(sets))
    model.trained_n_max = tr["n_max"]
    train_cfg = TrainingConfig(
        learning_rate=tr["learning_rate"], batch_size=tr["batch_size"],
        steps=tr["steps"], grad_clip=tr["grad_clip"], seed=cfg.seed,
        loss=tr["loss"],
    )
    _log(f"train: {count_parameters(model)} parameters, mode={tr['mode']}")
    if tr["mode"] == "storm":
        sampler = ExampleSampler(
            sets, tr["patch_side"], tr["n_min"], tr["n_max"],
            model.feature_config(),
        )
        trace = train(model, sampler, train_cfg)
    elif tr["mode"] == "active":
        from .active import ActiveSampler, train_active

        sampler = ActiveSampler(
            sets, tr["patch_side"], tr["n_min"], tr["n_max"],
            tr["candidates"], model.feature_config(),
        )
        trace = train_active(model, sampler, train_cfg)
    else:
        raise ConfigError(f"unknown train.mode {tr['mode']!r}")
    ckpt = cfg.path("checkpoint")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    report_dir = cfg.path("report_dir")
    report_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash {cfg.hash()}", f"# seed {cfg.seed}", "step,loss"]
    lines += [f"{i},{v!r}" for i, v in enumerate(trace)]
    (report_dir / "loss_trace.csv").write_text("\n".join(lines) + "\n",
                                               encoding="utf-8")
    _log(f"train: checkpoint -> {ckpt}, final loss {trace[-1]:.6f}")


def _tuning_scenes(sets, patch_side: float, n: int, count: int, rng):
    from .data import sample_patch

    scenes = []
    while len(scenes) < count:
        ms = sets[rng.integers(0, len(sets))]
        patch = sample_patch(ms, patch_side, rng)
        if patch.count < n + 2:
            continue
        order = rng.permutation(patch.count)
        obs, rest = order[:n], order[n:]
        scenes.append((patch.locations[obs], patch.powers[obs],
                       patch.locations[rest], patch.powers[rest]))
    return scenes


def _build_estimators(cfg: RunConfig, model, train_sets, rng):
    from .baselines import (KnnEstimator, KrigingEstimator, KrrEstimator,
                            fit_variogram, tune_baselines)
    from .evaluate import StormEstimator

    ev = cfg["eval"]
    wanted = ev["estimators"]
    estimators = {}
    tuned = {}
    needs_tuning = {"knn", "krr"} & set(wanted)
    if needs_tuning:
        n_tune = int(np.median(ev["n_values"]))
        scenes = _tuning_scenes(train_sets, ev["patch_side"], n_tune,
                                ev["tuning_scenes"], rng)
        tuned = tune_baselines(scenes)
    for name in wanted:
        if name == "storm":
            if model is None:
                raise ConfigError("estimator 'storm' needs a checkpoint")
            estimators[name] = StormEstimator(model)
        elif name == "knn":
            estimators[name] = KnnEstimator(tuned["knn_k"])
        elif name == "krr":
            estimators[name] = KrrEstimator(tuned["krr_width"],
                                            tuned["krr_ridge"])
        elif name == "kriging":
            ms = train_sets[rng.integers(0, len(train_sets))]
            take = rng.choice(ms.count, size=min(2000, ms.count),
                              replace=False)
            params = fit_variogram(ms.locations[take], ms.powers[take])
            estimators[name] = KrigingEstimator(params)
            tuned["variogram"] = {
                "nugget": params.nugget, "sill": params.sill,
                "range_m": params.range_m,
            }
    return estimators, tuned


def cmd_eval(cfg: RunConfig, workers: int) -> None:
    from .evaluate import run_rmse_sweep, write_report
    from .model import load_checkpoint

    ev = cfg["eval"]
    train_sets = _read_sets(cfg.path("data_dir"), "train")
    test_sets = _read_sets(cfg.path("data_dir"), "test")
    model = None
    if "storm" in ev["estimators"]:
        model = load_checkpoint(cfg.path("checkpoint"))
    rng = np.random.default_rng(cfg.seed + 1)
    estimators, tuned = _build_estimators(cfg, model, train_sets, rng)
    meta = {"config_hash": cfg.hash(), "tuned": tuned}
    if model is not None and model.trained_n_max is not None:
        extrapolated = [n for n in ev["n_values"] if n > model.trained_n_max]
        meta["trained_n_max"] = model.trained_n_max
        if extrapolated:
            meta["extrapolated_n"] = extrapolated
    report = run_rmse_sweep(
        test_sets, estimators, ev["n_values"], ev["iterations"],
        ev["patch_side"], seed=cfg.seed, workers=workers, metadata=meta,
    )
    paths = write_report(report, cfg.path("report_dir"), "rmse_sweep")
    _log(f"eval: report -> {paths['csv']}")


def cmd_active(cfg: RunConfig, workers: int) -> None:
    from .evaluate import run_active_comparison, write_report
    from .model import load_checkpoint

    ac = cfg["active"]
    test_sets = _read_sets(cfg.path("data_dir"), "test")
    model = load_checkpoint(cfg.path("checkpoint"))
    meta = {"config_hash": cfg.hash()}
    report = run_active_comparison(
        model, test_sets, ac["n_values"], ac["scenes"], ac["patch_side"],
        seed=cfg.seed,
        max_candidates=ac["max_candidates"] or None,
        metadata=meta,
    )
    paths = write_report(report, cfg.path("report_dir"), "active_comparison")
    _log(f"active: report -> {paths['csv']}")


def cmd_gradcheck(cfg: RunConfig) -> int:
    """Finite-difference audit of the autodiff suite; prints one line each."""
    from .gradcheck import run_gradcheck

    results = run_gradcheck(seed=cfg.seed)
    failed = 0
    for name, max_rel, ok in results:
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name} max_rel_err={max_rel:.3e}")
        if not ok:
            failed += 1
    print(f"gradcheck: {len(results) - failed}/{len(results)} passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storm-rme",
        description="Gridless attention-based radio map estimation toolkit",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="INI configuration file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    parser.add_argument("--workers", type=int, default=1,
                        help="bound on internal parallel workers")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value (section.key=value)")
    parser.add_argument("--out", type=Path, default=Path("."),
                        help="base directory for data/checkpoint/report paths")
    parser.add_argument("command",
                        choices=["generate", "train", "eval", "active",
                                 "gradcheck"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.set, seed=args.seed,
                          base_dir=args.out)
        _log(f"{args.command}: config_hash={cfg.hash()} seed={cfg.seed}")
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, workers=args.workers)
        elif args.command == "active":
            cmd_active(cfg, workers=args.workers)
        elif args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return 0
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
