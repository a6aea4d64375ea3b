"""Command-line front end.

Every successful command prints one JSON report
``{"schema_version": "1", "command": ..., "payload": ...}`` with sorted keys.
Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import tensorstore
from .contribution import DEFAULT_THRESHOLDS, SimilarityProfile, similarity_profile
from .encoder import EncoderConfig, ModelError, config_from_checkpoint, load_batches, load_weights
from .finetune import (
    SyntheticTask,
    TrainConfig,
    compare_strategies,
    drop_after_finetune,
    finetune,
    gradual_drop_finetune,
    prune_model,
)
from .strategies import POSITIONAL, DropPlan, PlanError, Strategy, make_plan, select_by_threshold
from .surgery import apply_plan, max_droppable_within, reduction_report
from .tensorstore import CheckpointError
from .topology import BERT_SCHEME, NamingScheme, TopologyError, count_parameters, infer_topology

SCHEMA_VERSION = "1"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def render(command: str, payload: dict) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "command": command, "payload": payload},
                      sort_keys=True, indent=2)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None


def _payload(doc):
    """Accept either a full report or a bare payload."""
    if isinstance(doc, dict) and "schema_version" in doc and "payload" in doc:
        return doc["payload"]
    return doc


def read_plan(path) -> DropPlan:
    doc = _payload(_read_json(path))
    return DropPlan.from_dict(doc.get("plan", doc))


def read_profile(path) -> SimilarityProfile:
    return SimilarityProfile.from_dict(_payload(_read_json(path)))


def _scheme(args) -> NamingScheme:
    return NamingScheme.from_file(args.scheme) if getattr(args, "scheme", None) else BERT_SCHEME


def _model(ckpt, args):
    scheme = _scheme(args)
    cfg = EncoderConfig.from_file(args.config) if args.config else config_from_checkpoint(ckpt, scheme)
    return load_weights(ckpt, cfg, scheme)


def _task_spec(path):
    doc = _read_json(path)
    unknown = set(doc) - {"task", "train"}
    if unknown:
        raise CheckpointError(f"{path}: unknown task-spec keys {sorted(unknown)}")
    return SyntheticTask(**doc.get("task", {})), TrainConfig(**doc.get("train", {}))


# ---------------------------------------------------------------------------
# commands


def cmd_inspect(args):
    ckpt = tensorstore.load(args.checkpoint)
    topo = infer_topology(ckpt, _scheme(args))
    return {
        "num_layers": topo.num_layers,
        "num_tensors": len(ckpt),
        "embedding_tensors": list(topo.embedding_tensors),
        "tensors_per_layer": [len(names) for names in topo.layer_tensors],
        "other_tensors": list(topo.other_tensors),
        "params": count_parameters(ckpt, topo).to_dict(),
        "metadata": dict(ckpt.metadata),
    }


def cmd_plan(args):
    strategy = Strategy(args.strategy)
    if strategy is Strategy.CONTRIBUTION:
        if args.k is not None:
            raise UsageError("--k does not apply to the contribution strategy; use --threshold")
        if args.threshold is None:
            raise UsageError("contribution planning needs --threshold")
        if bool(args.profile) == bool(args.data):
            raise UsageError("give exactly one of --profile or --checkpoint/--data")
        if args.profile:
            profile = read_profile(args.profile)
        else:
            if not args.checkpoint:
                raise UsageError("--data needs --checkpoint")
            model = _model(tensorstore.load(args.checkpoint), args)
            profile = similarity_profile(model, load_batches(args.data, args.batch_size))
        if args.layers is not None and args.layers != profile.num_layers:
            raise UsageError(f"--layers {args.layers} disagrees with the profile's {profile.num_layers} layers")
        plan = select_by_threshold(profile, args.threshold)
        payload = {"plan": plan.to_dict(), "threshold": args.threshold}
    else:
        if args.layers is None or args.k is None:
            raise UsageError(f"strategy {strategy.value} needs --layers and --k")
        if args.threshold is not None or args.profile or args.data:
            raise UsageError("--threshold/--profile/--data only apply to the contribution strategy")
        plan = make_plan(strategy, args.layers, args.k)
        payload = {"plan": plan.to_dict()}
    if args.figure:
        from .plotting import plot_strategies
        payload["figure"] = str(plot_strategies(plan.num_layers, plan.k, args.figure))
    return payload


def cmd_apply(args):
    src, dst = Path(args.checkpoint), Path(args.out)
    if dst.absolute() == src.absolute() or (dst.exists() and dst.resolve() == src.resolve()):
        raise UsageError("--out must differ from the input checkpoint")
    ckpt = tensorstore.load(src)
    topo = infer_topology(ckpt, _scheme(args))
    plan = read_plan(args.plan)
    pruned = apply_plan(ckpt, topo, plan)
    after_topo = infer_topology(pruned, _scheme(args))
    report = reduction_report(count_parameters(ckpt, topo), count_parameters(pruned, after_topo), plan)
    tensorstore.save(pruned, dst)
    return {"plan": plan.to_dict(), "reduction": report.to_dict(), "out": str(dst)}


def _thresholds(text):
    try:
        values = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad --thresholds {text!r}") from None
    if not values or any(not 0 <= t <= 1 for t in values):
        raise UsageError("thresholds must be comma-separated values in [0, 1]")
    return values


def cmd_score(args):
    thresholds = _thresholds(args.thresholds)
    model = _model(tensorstore.load(args.checkpoint), args)
    profile = similarity_profile(model, load_batches(args.data, args.batch_size))
    payload = profile.to_dict(thresholds)
    if args.figure:
        from .plotting import plot_similarity_profile
        payload["figure"] = str(plot_similarity_profile(profile, thresholds, args.figure))
    return payload


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_finetune(args):
    if args.gradual and args.drop_after_finetune:
        raise UsageError("--gradual and --drop-after-finetune are mutually exclusive")
    if (args.gradual or args.drop_after_finetune) and not args.plan:
        raise UsageError("--gradual/--drop-after-finetune need --plan")
    task, train_cfg = _task_spec(args.task)
    model = _model(tensorstore.load(args.checkpoint), args)
    plan = read_plan(args.plan) if args.plan else None

    payload = {"task": task.to_dict(), "train": train_cfg.to_dict()}
    if plan is not None:
        payload["plan"] = plan.to_dict()
    if args.gradual:
        trained, metrics = gradual_drop_finetune(model, task, plan, train_cfg)
        payload["mode"] = "gradual"
    elif args.drop_after_finetune:
        trained, stages = drop_after_finetune(model, task, plan, train_cfg)
        payload["mode"] = "drop-after-finetune"
        payload["before_drop"] = stages["before_drop"].summary()
        metrics = stages["after_drop"]
    else:
        if plan is not None:
            model = prune_model(model, plan)
        trained, metrics = finetune(model, task, train_cfg)
        payload["mode"] = "drop-then-finetune" if plan is not None else "finetune"
    payload["summary"] = metrics.summary()
    payload["epochs"] = metrics.epochs
    payload["events"] = metrics.events
    payload["layers_after"] = trained.config.num_layers
    if args.metrics_out:
        _write_jsonl(args.metrics_out, metrics.records())
        payload["metrics_out"] = args.metrics_out
    if args.out:
        if Path(args.out).absolute() == Path(args.checkpoint).absolute():
            raise UsageError("--out must differ from the input checkpoint")
        tensorstore.save(trained.to_checkpoint(), args.out)
        payload["out"] = args.out
    if args.figure:
        from .plotting import plot_training
        payload["figure"] = str(plot_training(metrics, args.figure, title=payload["mode"]))
    return payload


def cmd_compare(args):
    task, train_cfg = _task_spec(args.task)
    model = _model(tensorstore.load(args.checkpoint), args)
    seeds = [int(s) for s in args.seeds.split(",")]
    strategies = args.strategies.split(",")
    table = compare_strategies(model, task, args.k, strategies, seeds, train_cfg)
    payload = {"k": args.k, "seeds": seeds, "table": table}
    if args.figure:
        from .plotting import plot_strategy_comparison
        payload["figure"] = str(plot_strategy_comparison(table, args.figure))
    return payload


def cmd_report(args):
    doc = _payload(_read_json(args.scores))
    if not isinstance(doc, dict):
        raise CheckpointError("scores file must hold a JSON object")
    full = args.full_score
    if "scores" in doc:
        full = doc.get("full_score", full) if full is None else full
        doc = doc["scores"]
    try:
        scores = {int(k): float(v) for k, v in doc.items()}
    except (TypeError, ValueError):
        raise CheckpointError("scores must map layer counts to numbers") from None
    k = max_droppable_within(scores, full, args.threshold_points)
    full = scores[0] if full is None else full
    payload = {
        "scores": {str(kk): scores[kk] for kk in sorted(scores)},
        "full_score": full,
        "threshold_points": args.threshold_points,
        "max_droppable": k,
    }
    if args.figure:
        from .plotting import plot_drop_curve
        payload["figure"] = str(plot_drop_curve(scores, full, args.threshold_points, k, args.figure))
    return payload


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerprune", description="Drop encoder layers from transformer checkpoints.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def scheme_opt(sp):
        sp.add_argument("--scheme", help="JSON naming scheme (embedding_prefixes, layer_pattern, other_prefixes)")

    sp = sub.add_parser("inspect", help="topology and parameter counts")
    sp.add_argument("checkpoint")
    scheme_opt(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("plan", help="compute a drop plan")
    sp.add_argument("--strategy", required=True, choices=[s.value for s in POSITIONAL] + ["contribution"])
    sp.add_argument("--layers", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--profile", help="similarity profile report (from `score`)")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--checkpoint", help="score inline: checkpoint to profile")
    sp.add_argument("--data", help="score inline: JSON-lines token records")
    sp.add_argument("--config")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--figure", help="write a strategy illustration to this path")
    scheme_opt(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("apply", help="drop a plan's layers from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", required=True)
    scheme_opt(sp)
    sp.set_defaults(func=cmd_apply)

    sp = sub.add_parser("score", help="per-layer CLS similarity profile")
    sp.add_argument("checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--thresholds", default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS))
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--figure")
    scheme_opt(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("finetune", help="fine-tune on a synthetic task")
    sp.add_argument("checkpoint")
    sp.add_argument("--task", required=True, help='JSON {"task": {...}, "train": {...}}')
    sp.add_argument("--config")
    sp.add_argument("--plan")
    sp.add_argument("--gradual", action="store_true")
    sp.add_argument("--drop-after-finetune", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--metrics-out")
    sp.add_argument("--figure")
    scheme_opt(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("compare", help="compare positional strategies over seeds")
    sp.add_argument("checkpoint")
    sp.add_argument("--task", required=True)
    sp.add_argument("--config")
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--strategies", default=",".join(s.value for s in POSITIONAL))
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--figure")
    scheme_opt(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("report", help="largest K within a score-loss threshold")
    sp.add_argument("--scores", required=True, help='JSON {"0": 92.43, "2": 92.2, ...}')
    sp.add_argument("--threshold-points", type=float, required=True)
    sp.add_argument("--full-score", type=float)
    sp.add_argument("--figure")
    sp.set_defaults(func=cmd_report)
    return p


def _component(exc) -> str:
    tb = exc.__traceback__
    name = "cli"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("layerprune.") and not mod.endswith(".cli"):
            name = mod.rsplit(".", 1)[1]
        tb = tb.tb_next
    return name


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        payload = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=stderr)
        return EXIT_USAGE
    except PlanError as exc:
        print(f"usage error [{_component(exc)}]: {exc}", file=stderr)
        return EXIT_USAGE
    except (CheckpointError, TopologyError, ModelError, OSError, ValueError, KeyError, TypeError,
            FloatingPointError) as exc:
        print(f"data error [{_component(exc)}]: {exc}", file=stderr)
        return EXIT_DATA
    print(render(args.command, payload), file=stdout)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
