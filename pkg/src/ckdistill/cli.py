"""Command-line entry point.

Every stage of the pipeline is a subcommand so runs can be partial,
resumed, or replayed; ``run-all`` chains the distillation stages end to
end. Exit codes: 0 success, 1 pipeline failure, 2 configuration or input
problems. Each successful invocation writes a machine-readable summary
under ``<workspace>/runs/`` (timestamp-free, so reruns stay diffable).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .distiller import (
    build_tail_request,
    derive_rng,
    distill_heads,
    enumerate_tail_tasks,
    run_tail_stage,
    sample_seeds,
)
from .errors import ConfigError, PipelineError, PlanError, SchemaError
from .evalsvc import (
    AnnotationStore,
    EvalSample,
    EvalService,
    build_eval_sample,
    make_server,
)
from .filtering import (
    FeatureSpec,
    TrainSettings,
    apply_filter,
    judge,
    sample_for_judging,
    save_judged_samples,
    save_model,
    train_filter,
)
from .schema import (
    FilterStatus,
    KnowledgeType,
    RELATION_ORDER,
    load_head_seeds,
    load_triple_seeds,
    render_head_prompt,
    render_judge_prompt,
)
from .store import EDITIONS, TripleStore

log = logging.getLogger(__name__)


def _write_summary(cfg: PipelineConfig, command: str, payload: dict) -> Path:
    cfg.runs_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.runs_dir / f"{command}-summary.json"
    path.write_text(
        json.dumps({"command": command, "ok": True, **payload}, ensure_ascii=False, indent=2)
        + "\n",
        encoding="utf-8",
    )
    return path


def _load_cfg(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "workspace", None):
        overrides["workspace"] = args.workspace
    if getattr(args, "rng_seed", None) is not None:
        overrides["plan.rng_seed"] = args.rng_seed
    return load_config(args.config, overrides)


# -- seed-check ------------------------------------------------------------


def _do_seed_check(cfg: PipelineConfig) -> dict:
    heads = load_head_seeds(cfg.assets.head_seeds)
    triples = load_triple_seeds(cfg.assets.triple_seeds)
    names = cfg.load_names()
    cfg.load_templates()

    per_type = {kt.value: 0 for kt in KnowledgeType}
    for h in heads:
        per_type[h.knowledge_type.value] += 1
    need = cfg.plan.head_spec.example_count
    for kt, count in per_type.items():
        if count < need:
            raise ConfigError(
                f"head seeds: type {kt} has {count} items, prompts need {need}"
            )
    per_rel = {name: 0 for name in RELATION_ORDER}
    for t in triples:
        per_rel[t.relation.name] += 1
    need = cfg.plan.tail_spec.example_count
    for rel, count in per_rel.items():
        if count < need:
            raise ConfigError(
                f"triple seeds: relation {rel} has {count} items, prompts need {need}"
            )
    return {
        "head_seeds": {"total": len(heads), "per_type": per_type},
        "triple_seeds": {"total": len(triples), "per_relation": per_rel},
        "name_pool": len(names),
    }


def cmd_seed_check(args) -> int:
    cfg = _load_cfg(args)
    payload = _do_seed_check(cfg)
    print(
        f"seed files ok: {payload['head_seeds']['total']} head seeds, "
        f"{payload['triple_seeds']['total']} triple seeds, "
        f"{payload['name_pool']} names"
    )
    _write_summary(cfg, "seed-check", payload)
    return 0


# -- distill-heads -----------------------------------------------------------


def _do_distill_heads(cfg: PipelineConfig, gateway) -> dict:
    seeds = load_head_seeds(cfg.assets.head_seeds)
    templates = cfg.load_templates()
    summary: dict = {"per_type": {}}
    new_items = []
    with TripleStore(cfg.store_path) as store:
        for kt in KnowledgeType:
            typed = [s for s in seeds if s.knowledge_type == kt]
            result = distill_heads(kt, typed, cfg.plan, gateway, templates)
            inserted, duplicates = store.insert_heads(result.items)
            new_items.extend(result.items)
            summary["per_type"][kt.value] = {
                "collected": len(result.items),
                "inserted": inserted,
                "already_stored": duplicates,
                "cycles": result.cycles,
                "requests": result.requests,
                "stalled": result.stalled,
                "parsed_lines": result.parse.parsed_count,
                "rejected_lines": len(result.parse.rejected_lines),
                "duplicate_lines": result.parse.duplicate_count,
                "warnings": result.warnings,
            }
        summary["store_heads"] = len(store.head_items())
    with cfg.heads_path.open("w", encoding="utf-8") as f:
        for item in new_items:
            f.write(
                json.dumps(
                    {"text": item.text, "knowledge_type": item.knowledge_type.value},
                    ensure_ascii=False,
                )
                + "\n"
            )
    return summary


def _dry_run_heads(cfg: PipelineConfig) -> None:
    seeds = load_head_seeds(cfg.assets.head_seeds)
    templates = cfg.load_templates()
    for kt in KnowledgeType:
        typed = [s for s in seeds if s.knowledge_type == kt]
        rng = derive_rng(cfg.plan.rng_seed, "heads", kt.value)
        sample = sample_seeds(typed, cfg.plan.head_spec.example_count, rng)
        prompt = render_head_prompt(
            sample, kt, templates, cfg.plan.head_spec, cfg.plan.items_per_head_request
        )
        print(f"--- first head prompt for {kt.value} ---")
        print(prompt)
        print()


def cmd_distill_heads(args) -> int:
    cfg = _load_cfg(args)
    if args.dry_run:
        _dry_run_heads(cfg)
        return 0
    summary = _do_distill_heads(cfg, cfg.build_gateway())
    for kt, row in summary["per_type"].items():
        print(
            f"{kt}: {row['collected']} items in {row['requests']} requests"
            + (" (stalled)" if row["stalled"] else "")
        )
    print(f"store now holds {summary['store_heads']} head items")
    _write_summary(cfg, "distill-heads", summary)
    return 0


# -- distill-tails -----------------------------------------------------------


def _do_distill_tails(cfg: PipelineConfig, gateway) -> dict:
    triple_seeds = load_triple_seeds(cfg.assets.triple_seeds)
    names = cfg.load_names()
    templates = cfg.load_templates()
    with TripleStore(cfg.store_path) as store:
        heads = store.head_items()
        if not heads:
            raise PipelineError("store has no head items; run distill-heads first")
        report = run_tail_stage(
            heads,
            triple_seeds,
            cfg.plan,
            gateway,
            names,
            templates,
            sink=store.insert_triples,
            checkpoint_path=cfg.checkpoint_path,
        )
        stored = len(store)
    return {
        "tasks_total": report.tasks_total,
        "tasks_done": report.tasks_done,
        "tasks_failed": report.tasks_failed,
        "resumed_from": report.resumed_from,
        "requests": report.requests,
        "triples_produced": report.triples_produced,
        "store_triples": stored,
    }


def _dry_run_tails(cfg: PipelineConfig) -> None:
    triple_seeds = load_triple_seeds(cfg.assets.triple_seeds)
    names = cfg.load_names()
    templates = cfg.load_templates()
    with TripleStore(cfg.store_path) as store:
        heads = store.head_items()
    if not heads:
        raise PipelineError("store has no head items; run distill-heads first")
    head, rel = enumerate_tail_tasks(heads)[0]
    req, name = build_tail_request(
        head, rel, triple_seeds, cfg.plan, names, templates, cfg.gateway.config.model_id
    )
    print(f"--- first tail prompt ({head.text} / {rel.name}, name {name}) ---")
    print(req.text)


def cmd_distill_tails(args) -> int:
    cfg = _load_cfg(args)
    if args.dry_run:
        _dry_run_tails(cfg)
        return 0
    summary = _do_distill_tails(cfg, cfg.build_gateway())
    print(
        f"tail stage: {summary['tasks_done']}/{summary['tasks_total']} tasks, "
        f"{summary['triples_produced']} new triples, "
        f"{len(summary['tasks_failed'])} failures"
    )
    _write_summary(cfg, "distill-tails", summary)
    return 0


# -- filter ------------------------------------------------------------------


def _do_filter(cfg: PipelineConfig, gateway) -> dict:
    templates = cfg.load_templates()
    with TripleStore(cfg.store_path) as store:
        pool = [
            t
            for t in store.triples("raw")
            if t.relation.name == "HinderedBy" and t.filter_status == FilterStatus.RAW
        ]
        if not pool:
            return {"skipped": "no unfiltered HinderedBy triples in the store"}
        n = cfg.filter.judge_sample_n
        if len(pool) < n:
            log.warning(
                "judge sample size %d exceeds the pool (%d); judging everything",
                n,
                len(pool),
            )
            n = len(pool)
        sample = sample_for_judging(pool, n, derive_rng(cfg.plan.rng_seed, "judge-sample"))
        outcome = judge(sample, gateway, templates)
        if not outcome.samples:
            raise PipelineError("judging produced no usable labels")
        save_judged_samples(outcome.samples, cfg.judged_samples_path)

        settings = TrainSettings(
            epochs=cfg.filter.epochs,
            learning_rate=cfg.filter.learning_rate,
            l2=cfg.filter.l2,
            feature_spec=FeatureSpec(hash_size=cfg.filter.hash_size),
            language=cfg.assets.language,
            calibrate_threshold=cfg.filter.calibrate_threshold,
        )
        model, accuracy = train_filter(
            outcome.samples,
            cfg.filter.holdout_fraction,
            derive_rng(cfg.plan.rng_seed, "filter-train"),
            settings,
        )
        save_model(model, cfg.filter_model_path)

        kept, removed, report = apply_filter(pool, model)
        store.update_filter_status(kept, FilterStatus.KEPT)
        store.update_filter_status(removed, FilterStatus.REMOVED)
    return {
        "judged": len(outcome.samples),
        "judge_failures": len(outcome.skipped),
        "unmappable": sum(1 for s in outcome.samples if s.unmappable),
        "labels": {
            "valid": sum(1 for s in outcome.samples if s.label == "valid"),
            "invalid": sum(1 for s in outcome.samples if s.label == "invalid"),
        },
        "holdout_accuracy": accuracy,
        "threshold": model.threshold,
        "filtered": report.to_dict(),
    }


def _dry_run_filter(cfg: PipelineConfig) -> None:
    templates = cfg.load_templates()
    with TripleStore(cfg.store_path) as store:
        pool = [
            t
            for t in store.triples("raw")
            if t.relation.name == "HinderedBy" and t.filter_status == FilterStatus.RAW
        ]
    if not pool:
        print("no unfiltered HinderedBy triples in the store")
        return
    n = min(cfg.filter.judge_sample_n, len(pool))
    sample = sample_for_judging(pool, n, derive_rng(cfg.plan.rng_seed, "judge-sample"))
    print(f"--- first judge prompt (of {n}) ---")
    print(render_judge_prompt(sample[0], templates))


def cmd_filter(args) -> int:
    cfg = _load_cfg(args)
    if args.dry_run:
        _dry_run_filter(cfg)
        return 0
    summary = _do_filter(cfg, cfg.build_gateway())
    if "skipped" in summary:
        print(summary["skipped"])
    else:
        print(
            f"judged {summary['judged']} triples "
            f"(holdout accuracy {summary['holdout_accuracy']:.3f}); "
            f"kept {summary['filtered']['kept']}, removed {summary['filtered']['removed']}"
        )
    _write_summary(cfg, "filter", summary)
    return 0


# -- stats / export ----------------------------------------------------------


def _do_stats(cfg: PipelineConfig, editions) -> dict:
    payload = {}
    with TripleStore(cfg.store_path) as store:
        for edition in editions:
            stats = store.compute_stats(edition).to_dict()
            out = Path(cfg.workspace) / f"stats.{edition}.json"
            out.write_text(
                json.dumps(stats, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
            )
            payload[edition] = stats
    return payload


def cmd_stats(args) -> int:
    cfg = _load_cfg(args)
    editions = EDITIONS if args.edition == "both" else (args.edition,)
    payload = _do_stats(cfg, editions)
    for edition, stats in payload.items():
        print(
            f"[{edition}] heads {stats['unique_heads']}, "
            f"tails {stats['unique_tails']}, triples {stats['triples']}"
        )
        for rel, row in stats["per_relation"].items():
            print(f"  {rel}: {row['triples']} triples, {row['unique_tails']} unique tails")
    _write_summary(cfg, "stats", payload)
    return 0


def _do_export(cfg: PipelineConfig, edition: str, format: str, split, out_dir) -> dict:
    rng = derive_rng(cfg.plan.rng_seed, "export", edition, format) if split else None
    with TripleStore(cfg.store_path) as store:
        manifest = store.export(
            out_dir or cfg.export_dir,
            edition=edition,
            format=format,
            split=split,
            rng=rng,
            basename=f"{edition}",
        )
    return manifest


def cmd_export(args) -> int:
    cfg = _load_cfg(args)
    split = None
    if args.split:
        try:
            split = tuple(float(x) for x in args.split.split(","))
        except ValueError:
            raise ConfigError(f"--split must be three comma-separated fractions: {args.split}")
    manifest = _do_export(cfg, args.edition, args.format, split, args.out)
    for row in manifest["files"]:
        print(f"wrote {row['name']}: {row['count']} triples")
    _write_summary(cfg, "export", manifest)
    return 0


# -- eval --------------------------------------------------------------------


def _do_eval_sample(cfg: PipelineConfig) -> dict:
    with TripleStore(cfg.store_path) as store:
        sample = build_eval_sample(
            store, cfg.eval.per_stratum_n, derive_rng(cfg.plan.rng_seed, "eval-sample")
        )
    sample.save(cfg.eval_sample_path)
    strata: dict = {}
    for item in sample.items:
        strata[item.stratum] = strata.get(item.stratum, 0) + 1
    return {"items": len(sample), "per_stratum_n": cfg.eval.per_stratum_n, "strata": strata}


def cmd_eval_sample(args) -> int:
    cfg = _load_cfg(args)
    payload = _do_eval_sample(cfg)
    print(f"sampled {payload['items']} triples across {len(payload['strata'])} strata")
    _write_summary(cfg, "eval-sample", payload)
    return 0


def cmd_serve(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.eval_sample_path.is_file():
        raise PipelineError(
            f"no eval sample at {cfg.eval_sample_path}; run eval-sample first"
        )
    sample = EvalSample.load(cfg.eval_sample_path)
    service = EvalService(
        sample,
        AnnotationStore(cfg.annotations_path),
        cfg.eval.annotators,
        language=cfg.assets.language,
        order_seed=cfg.eval.order_seed,
    )
    host = args.host or cfg.eval.host
    port = cfg.eval.port if args.port is None else args.port
    server = make_server(service, host, port, ui_dir=args.ui_dir or cfg.eval.ui_dir)
    actual_port = server.server_address[1]
    print(f"annotation service listening on http://{host}:{actual_port}/", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        server.server_close()
    return 0


# -- run-all -------------------------------------------------------------------


def cmd_run_all(args) -> int:
    cfg = _load_cfg(args)
    gateway = cfg.build_gateway()
    aggregate = {"seed_check": _do_seed_check(cfg)}
    print("seeds ok")
    aggregate["distill_heads"] = _do_distill_heads(cfg, gateway)
    print(f"heads: {aggregate['distill_heads']['store_heads']} in store")
    aggregate["distill_tails"] = _do_distill_tails(cfg, gateway)
    print(f"tails: {aggregate['distill_tails']['store_triples']} triples in store")
    aggregate["filter"] = _do_filter(cfg, gateway)
    if "filtered" in aggregate["filter"]:
        print(
            f"filter: kept {aggregate['filter']['filtered']['kept']}, "
            f"removed {aggregate['filter']['filtered']['removed']}"
        )
    aggregate["stats"] = _do_stats(cfg, EDITIONS)
    for edition in EDITIONS:
        aggregate[f"export_{edition}"] = _do_export(cfg, edition, "tsv", None, None)
    print(
        f"stats: raw {aggregate['stats']['raw']['triples']} triples, "
        f"high {aggregate['stats']['high']['triples']} triples"
    )
    _write_summary(cfg, "run-all", aggregate)
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=True, help="pipeline config (YAML)")
    common.add_argument("--workspace", help="override the workspace directory")
    common.add_argument("--rng-seed", type=int, help="override plan.rng_seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="ckdistill",
        description="Distill, filter, store and evaluate a commonsense triple graph.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("seed-check", parents=[common]).set_defaults(func=cmd_seed_check)

    p = sub.add_parser("distill-heads", parents=[common])
    p.add_argument("--dry-run", action="store_true", help="print prompts, call nothing")
    p.set_defaults(func=cmd_distill_heads)

    p = sub.add_parser("distill-tails", parents=[common])
    p.add_argument("--dry-run", action="store_true", help="print prompts, call nothing")
    p.set_defaults(func=cmd_distill_tails)

    p = sub.add_parser("filter", parents=[common])
    p.add_argument("--dry-run", action="store_true", help="print prompts, call nothing")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("stats", parents=[common])
    p.add_argument("--edition", choices=EDITIONS + ("both",), default="both")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export", parents=[common])
    p.add_argument("--edition", choices=EDITIONS, default="high")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--split", help="train,dev,test fractions, e.g. 0.8,0.1,0.1")
    p.add_argument("--out", help="output directory (default <workspace>/exports)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval-sample", parents=[common])
    p.set_defaults(func=cmd_eval_sample)

    p = sub.add_parser("serve", parents=[common])
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--ui-dir", help="directory with the annotation UI bundle")
    p.set_defaults(func=cmd_serve)

    sub.add_parser("run-all", parents=[common]).set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args) or 0
    except (ConfigError, SchemaError, PlanError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
