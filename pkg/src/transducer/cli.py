"""Command-line entry point: ``transducer <command> ...``.

Configuration precedence is flags, then a JSON ``--config`` file, then the
built-in defaults. The effective configuration is echoed into every output.
``TDX_SEED`` supplies the seed when ``--seed`` is absent.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .baselines import (
    KNNRegressor,
    RidgeRegressor,
    TransducerRegressor,
    contaminate,
    evaluate_model,
    outlier_detect,
)
from .model import ModelConfig
from .pde import MetaConfig, MetaDataset, generate_meta_dataset
from .random_fields import RngStream
from .spectral import IdentityCodec, SpectralCodec
from .training import TrainConfig, TrainingCurve, encode_meta, fit, operator_sampler

CONTAMINATE_STREAM = 0xC0
EVAL_COLUMNS = ["regressor", "n", "mean_rmse", "ci_rmse", "mean_mse", "ci_mse", "seconds"]


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("TDX_SEED")
    return int(env) if env else 0


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _layered(args, defaults: dict, names: dict[str, str]) -> dict:
    """Merge defaults < config file < explicit flags. ``names`` maps flag dest to config key."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        cfg.update(json.loads(Path(args.config).read_text()))
    for dest, key in names.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    return cfg


def codec_from_header(d: dict | None):
    if not d or d.get("kind") == "identity":
        return IdentityCodec(d["dim"]) if d else None
    return SpectralCodec(d["n"], d["modes"])


def _codec_dict(codec) -> dict:
    if isinstance(codec, SpectralCodec):
        return {"kind": "spectral", "n": codec.n, "modes": codec.modes}
    return {"kind": "identity", "dim": codec.dim}


def _load_transducer(path):
    params, config, header, _ = io.load_checkpoint(path)
    codec = codec_from_header(header.get("codec"))
    if codec is None or isinstance(codec, IdentityCodec):
        raise SystemExit(f"{path} is not an operator-regression checkpoint")
    return TransducerRegressor(params, config, codec), header


# -- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _layered(args, MetaConfig().to_dict(),
                   {"n_datasets": "n_datasets", "pairs": "pairs", "grid": "grid_n", "t": "t",
                    "l": "length_scale", "state_l": "state_length_scale", "dt": "dt"})
    if args.seed is not None or not args.config or "seed" not in json.loads(Path(args.config).read_text()):
        cfg["seed"] = _seed(args)
    if args.reaction_max is not None:
        cfg["reaction_range"] = [0.0, args.reaction_max]
    try:
        config = MetaConfig.from_dict(cfg)
    except TypeError as exc:
        raise SystemExit(f"invalid config: {exc}")
    meta = generate_meta_dataset(config, args.split, workers=args.workers)
    io.save_meta_dataset(args.out, meta)
    resampled = sum(ds.resampled for ds in meta.datasets)
    print(f"wrote {len(meta)} datasets x {config.pairs} pairs on n={config.grid_n} to {args.out}; "
          f"{resampled} trajectories resampled for stability")
    return 0


def _model_config(args, in_dim: int, out_dim: int) -> ModelConfig:
    d = _layered(args, {}, {"depth": "depth", "heads": "heads", "head_dim": "head_dim",
                            "value_dim": "value_dim", "mlp": "mlp_dim", "kernel": "kernel",
                            "temperature": "temperature"})
    d = {k: v for k, v in d.items() if k in ModelConfig.__dataclass_fields__}
    if args.tie_weights:
        d["tie_weights"] = True
    if args.no_g:
        d["use_G"] = False
    if args.no_self_attention:
        d["self_attention"] = False
    return ModelConfig(in_dim=in_dim, out_dim=out_dim, **d)


def _train_config(args, seed: int) -> TrainConfig:
    d = _layered(args, {}, {"steps": "steps", "epochs": "epochs", "batch": "batch_operators",
                            "queries": "query_count", "lr": "lr", "loss_space": "loss_space"})
    d = {k: v for k, v in d.items() if k in TrainConfig.__dataclass_fields__}
    if args.context_min is not None or args.context_max is not None:
        lo, hi = d.get("context_range", TrainConfig().context_range)
        d["context_range"] = (args.context_min or lo, args.context_max or hi)
    if args.milestones is not None:
        d["milestones"] = _ints(args.milestones)
    return TrainConfig(seed=seed, **d)


def _run_training(args, sample, mc: ModelConfig, tc: TrainConfig, total: int, codec) -> int:
    params = state = None
    start = 0
    curve = TrainingCurve()
    curve_path = Path(args.curve) if args.curve else Path(args.out).with_suffix(".curve.csv")
    if args.resume and Path(args.out).exists():
        params, saved_cfg, header, state = io.load_checkpoint(args.out)
        if saved_cfg != mc:
            raise SystemExit("checkpoint config differs from the requested model; refusing to resume")
        start = header["provenance"].get("steps", 0)
        if curve_path.exists():
            curve = TrainingCurve.from_csv(curve_path)
            keep = [i for i, s in enumerate(curve.steps) if s < start]
            curve = TrainingCurve(*[[col[i] for i in keep] for col in
                                    (curve.steps, curve.losses, curve.lrs, curve.seconds)])

    def save(res):
        prov = {"steps": res.step, "total_steps": total, "seed": tc.seed,
                "final_loss": res.curve.losses[-1] if res.curve.losses else None,
                "train_config": tc.to_dict()}
        # curve first: the checkpoint is the commit point a resume starts from
        full = TrainingCurve(list(curve.steps), list(curve.losses), list(curve.lrs), list(curve.seconds))
        full.extend(res.curve)
        full.to_csv(curve_path)
        io.save_checkpoint(args.out, res.params, mc, prov, res.state, _codec_dict(codec))

    res = fit(sample, mc, tc, total, params=params, state=state, start_step=start,
              callback=save, callback_every=args.checkpoint_every or 0)
    save(res)
    print(f"trained steps {start}..{res.step} of {total}; final loss "
          f"{res.curve.losses[-1] if res.curve.losses else float('nan'):.6g}; checkpoint {args.out}")
    return 0


def cmd_train(args) -> int:
    meta = io.load_meta_dataset(args.meta)
    codec = SpectralCodec(meta.grid.n, args.modes)
    mc = _model_config(args, codec.dim, codec.dim)
    tc = _train_config(args, _seed(args))
    sample = operator_sampler(encode_meta(meta, codec), codec, tc)
    return _run_training(args, sample, mc, tc, tc.total_steps(len(meta)), codec)


def _report_rows(reports) -> list[list]:
    return [[r.regressor, r.context_n, r.mean_rmse, r.ci_rmse, r.mean_mse, r.ci_mse, r.seconds]
            for r in reports]


def _baseline(name: str, args):
    if name == "knn":
        return KNNRegressor(args.knn_k, args.knn_metric)
    if name == "ridge":
        return RidgeRegressor(args.ridge_lambda, cv=args.ridge_cv)
    raise ValueError(f"unknown baseline {name!r}; expected knn or ridge")


def _baseline_flags(p) -> None:
    p.add_argument("--knn-k", type=int, default=5)
    p.add_argument("--knn-metric", choices=["grid", "modes"], default="grid")
    p.add_argument("--ridge-lambda", type=float, default=1e-3)
    p.add_argument("--ridge-cv", action="store_true", help="leave-one-out bandwidth instead of the median heuristic")


def cmd_evaluate(args) -> int:
    meta = io.load_meta_dataset(args.meta_test)
    model, _ = _load_transducer(args.checkpoint)
    regressors = [model]
    for name in [b for b in args.baselines.split(",") if b]:
        regressors.append(_baseline(name, args))
    seed = _seed(args)
    reports = [evaluate_model(reg, meta, n, args.queries, seed)
               for n in _ints(args.contexts) for reg in regressors]
    io.write_csv(args.out, EVAL_COLUMNS, _report_rows(reports))
    if args.json:
        io.write_json(args.json, [r.to_dict() for r in reports])
    for r in reports:
        print(f"{r.regressor:>10} n={r.context_n:<4d} RMSE {r.mean_rmse:.4g} +- {r.ci_rmse:.3g}  "
              f"MSE {r.mean_mse:.4g}")
    return 0


def cmd_extrapolate(args) -> int:
    model, _ = _load_transducer(args.checkpoint)
    seed = _seed(args)
    rows = []
    for l in _floats(args.l):
        for t in _floats(args.t):
            cfg = MetaConfig(n_datasets=args.n_datasets, pairs=args.pairs, t=t, length_scale=l,
                             grid_n=model.codec.n, seed=seed)
            rep = evaluate_model(model, generate_meta_dataset(cfg, "meta-test-ood"), args.context,
                                 args.queries, seed)
            rows.append([l, t, rep.mean_rmse, rep.ci_rmse, rep.mean_mse, rep.ci_mse])
            print(f"l={l:g} t={t:g}: RMSE {rep.mean_rmse:.4g} +- {rep.ci_rmse:.3g}  MSE {rep.mean_mse:.4g}")
    io.write_csv(args.out, ["l", "t", "mean_rmse", "ci_rmse", "mean_mse", "ci_mse"], rows)
    return 0


def _histogram_rows(report, bins: int) -> list[list]:
    vals = np.asarray(report.element_mean_rmse)
    labels = np.asarray(report.labels if report.labels is not None else np.zeros(len(vals), int), bool)
    edges = np.histogram_bin_edges(vals, bins=bins)
    counts, _ = np.histogram(vals, edges)
    outl, _ = np.histogram(vals[labels], edges)
    return [[float(edges[i]), float(edges[i + 1]), int(counts[i]), int(outl[i])] for i in range(bins)]


def cmd_outliers(args) -> int:
    meta = io.load_meta_dataset(args.dataset)
    data = meta.datasets[args.index]
    labels = None
    if args.contaminate:
        if not args.source:
            raise SystemExit("--contaminate needs --source")
        source = io.load_meta_dataset(args.source).datasets[args.source_index]
        data, labels = contaminate(data, source, args.contaminate,
                                   RngStream(_seed(args), (CONTAMINATE_STREAM,)))
    if args.regressor == "transducer":
        if not args.checkpoint:
            raise SystemExit("the transducer regressor needs --checkpoint")
        reg, _ = _load_transducer(args.checkpoint)
    else:
        reg = _baseline(args.regressor, args)
    report = outlier_detect(data, reg, args.regressions, args.split, _seed(args), labels,
                            args.n_sigma, args.score)
    io.write_json(args.out, report.to_dict())
    hist = args.hist or str(Path(args.out).with_suffix(".hist.csv"))
    io.write_csv(hist, ["bin_lo", "bin_hi", "count", "outliers"], _histogram_rows(report, args.bins))
    flagged = set(report.flagged)
    labels_out = report.labels or [""] * report.n_elements
    io.write_csv(str(Path(args.out).with_suffix(".elements.csv")),
                 ["index", "mean_rmse", "count", "flagged", "label"],
                 [[i, m, c, int(i in flagged), labels_out[i]]
                  for i, (m, c) in enumerate(zip(report.element_mean_rmse, report.element_counts))])
    msg = f"flagged {len(report.flagged)} of {report.n_elements}: {report.flagged}"
    if report.precision is not None:
        msg += f"; precision {report.precision:.3f} recall {report.recall:.3f}"
    print(msg)
    return 0


def cmd_classify(args) -> int:
    from .classification import (
        digits_model_config,
        evaluate_classifier,
        load_digits_task,
        load_idx_task,
        permuted_sampler,
    )

    task = load_idx_task(args.images, args.labels) if args.images else load_digits_task()
    seed = _seed(args)
    if args.mode == "train":
        if args.holdout:
            task, _ = task.split(len(task) - args.holdout, seed)
        overrides = _layered(args, {}, {"depth": "depth", "heads": "heads", "head_dim": "head_dim",
                                        "value_dim": "value_dim", "mlp": "mlp_dim", "kernel": "kernel"})
        mc = digits_model_config(task.dim, task.n_classes, **overrides)
        tc = _train_config(args, seed)
        return _run_training(args, permuted_sampler(task, tc), mc, tc, tc.steps, IdentityCodec(task.dim))
    params, mc, header, _ = io.load_checkpoint(args.checkpoint)
    if args.holdout:
        _, task = task.split(len(task) - args.holdout, seed)
    rep = evaluate_classifier(params, mc, task, args.context, args.queries or 50, args.episodes, seed,
                              args.pixel_perm_seed, args.class_perm_seed)
    io.write_json(args.out, rep.to_dict())
    print(f"accuracy {rep.accuracy:.4f} over {rep.episodes} episodes (chance {rep.chance:.2f})")
    return 0


def cmd_inspect(args) -> int:
    info = io.read_header(args.path)
    if not args.full:
        h = info["header"]
        for key in ("datasets", "params"):
            if key in h:
                h[key] = f"<{len(h[key])} entries>"
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# -- parser ------------------------------------------------------------------

def _model_flags(p) -> None:
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--value-dim", type=int)
    p.add_argument("--mlp", type=int)
    p.add_argument("--kernel", choices=["exp_dot", "rbf", "l2"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--tie-weights", action="store_true")
    p.add_argument("--no-g", action="store_true", help="drop the output-stream block")
    p.add_argument("--no-self-attention", action="store_true")


def _train_flags(p) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="operators per step")
    p.add_argument("--queries", type=int)
    p.add_argument("--context-min", type=int)
    p.add_argument("--context-max", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--milestones", help="comma-separated steps where the learning rate halves")
    p.add_argument("--loss-space", choices=["grid", "modes"])
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    p.add_argument("--curve", help="training curve CSV (default: next to the checkpoint)")
    p.add_argument("--config", help="JSON file with model and training settings")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transducer", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate an ADR meta-dataset")
    p.add_argument("--n-datasets", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--t", type=float)
    p.add_argument("--l", type=float, help="coefficient length scale")
    p.add_argument("--state-l", type=float, help="initial-state length scale")
    p.add_argument("--dt", type=float)
    p.add_argument("--reaction-max", type=float)
    p.add_argument("--split", default="meta-train")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train on a meta-dataset")
    p.add_argument("--meta", required=True)
    p.add_argument("--modes", type=int, default=25)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE versus context size, with baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--meta-test", required=True)
    p.add_argument("--contexts", default="10,20,32")
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--baselines", default="knn,ridge")
    _baseline_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extrapolate", help="RMSE on out-of-distribution length scales and times")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--l", default="0.1,0.2,0.3")
    p.add_argument("--t", default="0.5,1.0,2.0")
    p.add_argument("--n-datasets", type=int, default=16)
    p.add_argument("--pairs", type=int, default=42)
    p.add_argument("--context", type=int, default=32)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("outliers", help="repeated-split outlier detection")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--regressor", choices=["transducer", "knn", "ridge"], default="transducer")
    p.add_argument("--contaminate", type=float, default=0.0)
    p.add_argument("--source")
    p.add_argument("--source-index", type=int, default=0)
    p.add_argument("--regressions", type=int, default=500)
    p.add_argument("--split", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--n-sigma", type=float, default=3.0)
    p.add_argument("--score", choices=["rmse", "relative"], default="rmse")
    _baseline_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--hist")
    p.set_defaults(func=cmd_outliers)

    p = sub.add_parser("classify", help="finite-dimensional in-context classification")
    p.add_argument("mode", choices=["train", "test"])
    p.add_argument("--images", help="IDX image file (default: bundled 8x8 digits)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--holdout", type=int, default=597, help="images held out for meta-testing")
    p.add_argument("--checkpoint")
    p.add_argument("--context", type=int, default=100)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--pixel-perm-seed", type=int)
    p.add_argument("--class-perm-seed", type=int)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("inspect", help="print a container header")
    p.add_argument("path")
    p.add_argument("--full", action="store_true", help="include per-dataset and per-parameter tables")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "classify" and args.mode == "test" and not args.checkpoint:
        raise SystemExit("classify test needs --checkpoint")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
