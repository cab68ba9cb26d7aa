"""Command-line entry point: ``dynafs <verb> [--config FILE] [--seed N] [--out-dir DIR]``.

Exit codes: 0 success, 2 configuration error, 3 policy did not converge,
4 data error. ``DYNAFS_THREADS`` caps the threads used by the linear-algebra
backend.
"""
from __future__ import annotations

import os

_threads = os.environ.get("DYNAFS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import RunConfig  # noqa: E402
from .errors import ConfigError, DataError, NotConvergedError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_DATA = 0, 2, 3, 4
log = logging.getLogger("dynafs")


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out_dir}
    if args.config:
        cfg = RunConfig.load(args.config, **overrides)
    else:
        cfg = RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    if cfg.out_dir is None:
        cfg = cfg.replace(out_dir="runs/default")
    return cfg


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _splits(cfg):
    from .data import prepare_splits
    from .trainer import load_dataset
    return prepare_splits(load_dataset(cfg), cfg.seed, cfg.fractions)


def _write_json(path: Path, obj) -> None:
    from .trainer import _jsonable
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _pretrain_from_file(cfg, splits, path: Path):
    from .predictor import load_predictor
    from .trainer import PretrainResult, full_states, predict_columns, score_states
    from .env import column_targets
    pred = load_predictor(path)
    cache = None
    if splits.task != "classification":
        cache = {}
        for name in ("train", "val"):
            eps = getattr(splits, name)
            preds = predict_columns(pred, [full_states(e) for e in eps])
            cache[name] = [np.abs(p - column_targets(e.y, cfg.reveal_current_tick)) for p, e in zip(preds, eps)]
    val_loss = score_states(pred, [full_states(e) for e in splits.val], splits.val, splits.task,
                            cfg.reveal_current_tick)
    return PretrainResult(pred, cache, val_loss)


def _load_actor(path: Path):
    from .rl import ActorNet
    return ActorNet.from_dict(json.loads(path.read_text())["actor"])


# ----------------------------------------------------------------------- verbs


def cmd_gen_data(cfg, args):
    from .data import write_events_csv, write_schema
    from .trainer import load_dataset
    out = _out(cfg)
    data = load_dataset(cfg)
    write_events_csv(data, out / "events.csv", out / "labels.csv", cfg.tick_hours)
    write_schema(data.specs, out / "schema.csv")
    meta = {"n_subjects": len(data), "n_features": len(data.specs), "task": data.task, **data.meta}
    _write_json(out / "dataset.json", meta)
    print(f"wrote {len(data)} subjects to {out}")
    return EXIT_OK


def cmd_train_predictor(cfg, args):
    from .predictor import save_predictor
    from .trainer import predictor_config, pretrain_predictor
    out = _out(cfg)
    splits = _splits(cfg)
    pre = pretrain_predictor(splits, predictor_config(cfg), cfg.reveal_current_tick, cfg.seed)
    save_predictor(pre.predictor, out / "predictor_pretrained.json")
    _write_json(out / "predictor_metrics.json", {"val_loss": pre.val_loss, "kind": cfg.predictor_kind})
    print(f"validation loss {pre.val_loss:.4f}")
    return EXIT_OK


def cmd_train_policy(cfg, args):
    from .rl import DiagnosticsWriter
    from .trainer import ablation_flags, ppo_config, reward_config, train_policy
    out = _out(cfg)
    splits = _splits(cfg)
    pre = _pretrain_from_file(cfg, splits, Path(args.predictor or out / "predictor_pretrained.json"))
    res = train_policy(splits, pre, cfg.c_max, cfg.cost_mode, reward_config(cfg), ppo_config(cfg),
                       ablation_flags(cfg), cfg.reveal_current_tick, cfg.eval_every,
                       DiagnosticsWriter(out / "history.jsonl"))
    (out / "policy.json").write_text(json.dumps({"actor": res.actor.to_dict(), "critic": res.critic.to_dict()}))
    _write_json(out / "policy_metrics.json", {"converged": res.converged, "steps": res.state.step,
                                              "final_beta": res.state.beta,
                                              "last_valid_cost": res.state.c_valid[-1]})
    print(f"converged={res.converged} steps={res.state.step} validation cost {res.state.c_valid[-1]:.4f}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_retrain_predictor(cfg, args):
    from .predictor import save_predictor
    from .trainer import ablation_flags, predictor_config, retrain_predictor
    out = _out(cfg)
    splits = _splits(cfg)
    pre = _pretrain_from_file(cfg, splits, Path(args.predictor or out / "predictor_pretrained.json"))
    actor = _load_actor(Path(args.policy or out / "policy.json"))
    pred = retrain_predictor(splits, actor, pre, predictor_config(cfg), ablation_flags(cfg),
                             cfg.reveal_current_tick, cfg.retrain_mode, cfg.seed)
    save_predictor(pred, out / "predictor.json")
    print(f"wrote {out / 'predictor.json'}")
    return EXIT_OK


def cmd_run(cfg, args):
    from .trainer import run_pipeline
    res = run_pipeline(cfg)
    m = res.metrics
    print(f"test cost {m['test']['cost']:.4f} test loss {m['test']['loss']:.4f} converged={m['converged']}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_baseline(cfg, args):
    from .baselines import (compute_importance, expected_tick_costs, select_knapsack, select_topk,
                            sequence_costs, train_baseline, write_selection_csv)
    from .predictor import PredictorConfig
    from .trainer import predictor_config, pretrain_predictor
    out = _out(cfg)
    splits = _splits(cfg)
    pcfg = predictor_config(cfg)
    pre = pretrain_predictor(splits, pcfg, cfg.reveal_current_tick, cfg.seed) if args.method == "permutation" else None
    imp = compute_importance(args.method, splits, pre.predictor if pre else None, cfg.reveal_current_tick, cfg.seed)
    mean_t = splits.mean_train_ticks()
    if args.selector == "knapsack":
        costs = sequence_costs(splits.specs, mean_t, cfg.cost_mode)
        subset = select_knapsack(imp, costs, cfg.c_max * mean_t)
    else:
        costs = expected_tick_costs(splits.specs, mean_t, cfg.cost_mode)
        subset = select_topk(imp, splits.specs, cfg.c_max, mean_t, cfg.cost_mode)
    kind = args.predictor or {"lasso": "linear", "l1_svm": "logistic"}.get(args.method, cfg.predictor_kind)
    res = train_baseline(subset, splits, PredictorConfig(kind=kind, gbdt=pcfg.gbdt, recurrent=pcfg.recurrent),
                         cfg.cost_mode, cfg.reveal_current_tick, cfg.seed, args.method, imp)
    write_selection_csv(out / f"baseline_{args.method}.csv", splits.specs, imp, subset, costs)
    _write_json(out / f"baseline_{args.method}.json",
                {"method": args.method, "selector": args.selector, "predictor": kind,
                 "selected": [splits.specs[k].name for k in subset.indices],
                 "test": {"cost": res.test_cost, "loss": res.test_loss}, "val_loss": res.val_loss})
    print(f"{args.method}: {len(subset.indices)} features, test cost {res.test_cost:.4f} loss {res.test_loss:.4f}")
    return EXIT_OK


def cmd_sweep(cfg, args):
    from .evaluation import CurvePoint, assemble_curve, curve_svg, write_curve
    from .trainer import sweep
    out = _out(cfg)
    values = [float(v) for v in args.c_max.split(",")]
    results = sweep(cfg, values)
    pts = [CurvePoint("rl", r.config.c_max, r.metrics["test"]["cost"], r.metrics["test"]["loss"], cfg.seed)
           for r in results]
    curves = assemble_curve(pts)
    write_curve(curves, out / "curve.csv")
    (out / "curve.svg").write_text(curve_svg(curves))
    ok = all(r.converged for r in results)
    for r in results:
        print(f"c_max {r.config.c_max:g}: cost {r.metrics['test']['cost']:.4f} loss {r.metrics['test']['loss']:.4f}"
              f" converged={r.converged}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def cmd_viz(cfg, args):
    from .evaluation import activation_map, activation_svg, assemble_curve, curve_svg, read_curve
    out = _out(cfg)
    policy_path = Path(args.policy or out / "policy.json")
    if policy_path.exists():
        splits = _splits(cfg)
        actor = _load_actor(policy_path)
        amap = activation_map(actor, splits.test, cfg.t_max, args.mode, cfg.seed, cfg.activation_rollouts,
                              [s.name for s in splits.specs])
        amap.to_csv(out / "activation.csv")
        (out / "activation.svg").write_text(activation_svg(amap))
        print(f"wrote {out / 'activation.csv'} and activation.svg")
    curve_path = out / "curve.csv"
    if curve_path.exists():
        (out / "curve.svg").write_text(curve_svg(assemble_curve(read_curve(curve_path))))
        print(f"wrote {out / 'curve.svg'}")
    if not policy_path.exists() and not curve_path.exists():
        raise DataError(f"nothing to visualize: no {policy_path} and no {curve_path}")
    return EXIT_OK


VERBS = {
    "gen-data": (cmd_gen_data, "write a synthetic dataset as events/labels/schema CSVs"),
    "train-predictor": (cmd_train_predictor, "pre-train the label predictor on fully observed data"),
    "train-policy": (cmd_train_policy, "optimize the acquisition policy against a frozen predictor"),
    "retrain-predictor": (cmd_retrain_predictor, "refit the predictor on policy-masked states"),
    "run": (cmd_run, "full pipeline with test evaluation"),
    "baseline": (cmd_baseline, "static feature-selection baseline"),
    "sweep": (cmd_sweep, "pipeline over several cost targets, writes a cost-loss curve"),
    "viz": (cmd_viz, "activation map and curve renderings"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", help="artifact directory (default runs/default)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dynafs", description="cost-aware dynamic feature acquisition")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, (_, help_text) in VERBS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("train-policy", "retrain-predictor"):
            p.add_argument("--predictor", help="pre-trained predictor file")
        if name in ("retrain-predictor", "viz"):
            p.add_argument("--policy", help="policy file")
        if name == "baseline":
            p.add_argument("--method", choices=("permutation", "lasso", "l1_svm"), default="permutation")
            p.add_argument("--selector", choices=("topk", "knapsack"), default="topk")
            p.add_argument("--predictor", choices=("gbdt", "recurrent", "linear", "logistic"))
        if name == "sweep":
            p.add_argument("--c-max", required=True, help="comma-separated cost targets, e.g. 8,4,2,1")
        if name == "viz":
            p.add_argument("--mode", choices=("sample", "deterministic"), default="sample")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return VERBS[args.verb][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotConvergedError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # stage failures wrap data errors
        cause = getattr(exc, "cause", None)
        if isinstance(cause, ConfigError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(cause, DataError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
