"""Command-line entry point: behavior-tune <command> [options]."""

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from behavior_data import FrequencyProfile, SyntheticSpec, generate_synthetic_dataset, load_events, \
    load_label_map, read_samples, write_events, write_samples
from config import PipelineConfig, RunConfig, config_hash, load_run_config
from difficulty_selector import score_pool, select_balanced_subset, write_difficulty_records, write_selection_report
from errors import BehaviorTuningError, DataFormatError, PipelineStageError
from evaluation import BALANCED, REAL_DISTRIBUTION, compare_reports, evaluate, load_report, render_table, write_report
from log_config import configure_logging
from prompt_builder import (
    export_instruction_jsonl,
    generate_auxiliary_corpus,
    load_auxiliary_corpus,
    mix_auxiliary,
    render_samples,
    write_auxiliary_corpus,
)
from reference_model import load_checkpoint, save_checkpoint
from seeding import substream
from tuning_orchestrator import (
    ABLATION_VARIANTS,
    build_preference_pairs,
    partition_log,
    read_pairs,
    run_a_tuning,
    run_ablation,
    run_b_tuning,
    run_pipeline,
    run_sweep,
    stage_a_samples,
    with_overrides,
    write_pairs,
    write_partition,
)

logger = logging.getLogger("behavior-tune")


# --- helpers ---------------------------------------------------------------

def _base_config(args) -> RunConfig:
    """Config file (or defaults on synthetic data) with --seed / --out-dir applied."""
    if args.config:
        run_config = load_run_config(args.config)
    else:
        run_config = RunConfig(pipeline=PipelineConfig(synthetic=SyntheticSpec()))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    run_config = with_overrides(run_config, **overrides) if overrides else run_config
    if args.out_dir is not None:
        payload = run_config.model_dump()
        payload["paths"]["out_dir"] = args.out_dir
        run_config = RunConfig.model_validate(payload)
    return run_config


def _pipeline(args, **overrides) -> PipelineConfig:
    """Pipeline config with every non-None flag override re-validated."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return with_overrides(args.run_config, **overrides).pipeline if overrides else args.run_config.pipeline


def _out_dir(args) -> Path:
    path = Path(args.run_config.paths.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_profile(path):
    path = Path(path)
    try:
        return FrequencyProfile.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataFormatError(f"invalid profile: {e}", path=str(path)) from e


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(args, command: str, outputs: dict, extra: Optional[dict] = None) -> Path:
    """Per-command manifest; the only file that carries a timestamp."""
    manifest = {
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": args.run_config.pipeline.seed,
        "config_hash": config_hash(args.run_config),
        "outputs": {name: str(path) for name, path in outputs.items()},
    }
    manifest.update(extra or {})
    path = _out_dir(args) / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_behaviors=args.behaviors,
        num_users=args.users,
        num_samples=args.samples,
        zipf_exponent=args.zipf,
        markov_coherence=args.coherence,
        rule_sharing=args.sharing,
        history_length=args.history_length,
        rng_seed=args.run_config.pipeline.seed,
    )
    log, rules = generate_synthetic_dataset(spec)
    out = _out_dir(args)
    events_path, rules_path, aux_path = out / "events.jsonl", out / "rules.json", out / "aux_corpus.jsonl"
    write_events(log, events_path)
    rules_path.write_text(json.dumps(rules.to_dict(log.vocabulary)) + "\n", encoding="utf-8")
    corpus = generate_auxiliary_corpus(args.aux_size, substream(spec.rng_seed, "aux", "corpus"))
    write_auxiliary_corpus(corpus, aux_path)
    _write_manifest(args, "synth", {"events": events_path, "rules": rules_path, "aux_corpus": aux_path},
                    {"synthetic": spec.model_dump(), "events_sha256": _sha256(events_path)})
    _print_json({"events": str(events_path), "users": log.num_users, "events_written": log.num_events,
                 "sha256": _sha256(events_path)})
    return 0


def cmd_partition(args) -> int:
    config = _pipeline(args, anchor_threshold=args.anchor_threshold, head_threshold=args.head_threshold,
                       medium_threshold=args.medium_threshold, balanced_per_class=args.balanced_per_class)
    label_map = load_label_map(args.label_map) if args.label_map else None
    log = load_events(args.events, label_map=label_map)
    data = partition_log(log, config)
    out = _out_dir(args)
    artifacts = write_partition(data, out)
    _write_manifest(args, "partition", {k: out / v for k, v in artifacts.items()})
    profile = data.profile
    _print_json({
        "anchor": {data.vocabulary.name_of(i): round(profile.proportions[i], 6) for i in sorted(profile.anchor_set)},
        "tail": {data.vocabulary.name_of(i): round(profile.proportions[i], 6) for i in sorted(profile.tail_set)},
        "samples": {"train": len(data.train), "validation": len(data.validation),
                    "test_real": len(data.test_real), "test_balanced": len(data.test_balanced)},
    })
    return 0


def cmd_export_prompts(args) -> int:
    config = _pipeline(args, epsilon=args.epsilon, aux_max_len=args.max_len)
    _, vocabulary = _load_profile(args.profile)
    samples = read_samples(args.samples, vocabulary)
    rng = substream(config.seed, "prompts")
    records = render_samples(samples, vocabulary, rng, template_override=args.template,
                             include_target_context=not args.no_target_context)
    corpus = load_auxiliary_corpus(args.aux_corpus) if args.aux_corpus else None
    if corpus is None and config.epsilon > 0:
        corpus = generate_auxiliary_corpus(config.aux_corpus_size, substream(config.seed, "aux", "corpus"))
    mixed = mix_auxiliary(records, corpus, config.epsilon, config.aux_max_len, rng)
    output = Path(args.output) if args.output else _out_dir(args) / "instructions.jsonl"
    count = export_instruction_jsonl(mixed.records, output)
    _write_manifest(args, "export-prompts", {"instructions": output},
                    {"auxiliary": mixed.auxiliary_count, "with_replacement": mixed.with_replacement})
    _print_json({"written": count, "auxiliary": mixed.auxiliary_count, "with_replacement": mixed.with_replacement})
    return 0


def cmd_train_a(args) -> int:
    config = _pipeline(args, epsilon=args.epsilon, stage_a_source=args.source)
    profile, vocabulary = _load_profile(args.profile)
    train = read_samples(args.train, vocabulary)
    validation = read_samples(args.validation, vocabulary) if args.validation else []
    corpus = load_auxiliary_corpus(args.aux_corpus) if args.aux_corpus else None
    if corpus is None and config.epsilon > 0:
        corpus = generate_auxiliary_corpus(config.aux_corpus_size, substream(config.seed, "aux", "corpus"))
    result = run_a_tuning(stage_a_samples(train, profile, config.stage_a_source), corpus, config.epsilon,
                          config, vocabulary, validation)
    output = _out_dir(args) / "stage_a" / "model.json"
    checksum = save_checkpoint(result.params, output, metadata={"stage": "stage_a", "source": config.stage_a_source})
    _write_manifest(args, "train-a", {"model": output}, {"checksum": checksum,
                                                         "epoch_losses": result.training.epoch_losses})
    _print_json({"model": str(output), "behavior_samples": result.behavior_count,
                 "auxiliary_samples": result.auxiliary_count, "epoch_losses": result.training.epoch_losses})
    return 0


def cmd_score(args) -> int:
    config = _pipeline(args, balance_lambda=args.balance)
    profile, vocabulary = _load_profile(args.profile)
    reference = load_checkpoint(args.checkpoint, vocabulary)
    pool = read_samples(args.pool, vocabulary)
    records, degenerate = score_pool(reference, pool, profile, config.balance_lambda,
                                     invert_penalty=args.invert_penalty or config.invert_penalty)
    output = _out_dir(args) / "difficulty.jsonl"
    write_difficulty_records(records, output)
    _write_manifest(args, "score", {"difficulty": output}, {"degenerate_labels": degenerate})
    _print_json({"scored": len(records), "degenerate_labels": degenerate})
    return 0


def cmd_select(args) -> int:
    config = _pipeline(args, balance_lambda=args.balance, samples_per_class=args.per_class,
                       selection=args.strategy, on_correct=args.on_correct)
    profile, vocabulary = _load_profile(args.profile)
    reference = load_checkpoint(args.checkpoint, vocabulary)
    pool = read_samples(args.pool, vocabulary)
    selection = select_balanced_subset(
        pool, profile, reference, config.balance_lambda, config.samples_per_class, config.seed,
        strategy=config.selection, invert_penalty=args.invert_penalty or config.invert_penalty,
        threads=args.threads,
    )
    out = _out_dir(args)
    selected = [pool[i] for i in selection.indices]
    write_selection_report(selection, out / "selection.json")
    write_samples(selected, vocabulary, out / "selected.jsonl")
    pairs = build_preference_pairs(selected, reference, on_correct=config.on_correct)
    write_pairs(pairs, vocabulary, out / "pairs.jsonl")
    _write_manifest(args, "select", {"selection": out / "selection.json", "selected": out / "selected.jsonl",
                                     "pairs": out / "pairs.jsonl"})
    _print_json({"selected": selection.total, "pairs": len(pairs)})
    return 0


def cmd_pairs(args) -> int:
    config = _pipeline(args, on_correct=args.on_correct)
    _, vocabulary = _load_profile(args.profile)
    reference = load_checkpoint(args.checkpoint, vocabulary)
    samples = read_samples(args.samples, vocabulary)
    pairs = build_preference_pairs(samples, reference, on_correct=config.on_correct)
    output = _out_dir(args) / "pairs.jsonl"
    write_pairs(pairs, vocabulary, output)
    _write_manifest(args, "pairs", {"pairs": output})
    _print_json({"pairs": len(pairs)})
    return 0


def cmd_train_b(args) -> int:
    config = _pipeline(args, beta=args.beta, b_loss=args.loss)
    profile, vocabulary = _load_profile(args.profile)
    reference = load_checkpoint(args.reference, vocabulary)
    pairs = read_pairs(args.pairs, vocabulary)
    validation = read_samples(args.validation, vocabulary) if args.validation else []
    result = run_b_tuning(reference, pairs, config.beta, config, validation, loss=config.b_loss, profile=profile)
    output = _out_dir(args) / "stage_b" / "model.json"
    checksum = save_checkpoint(result.params, output, metadata={"stage": "stage_b", "loss": config.b_loss})
    _write_manifest(args, "train-b", {"model": output}, {"checksum": checksum})
    _print_json({"model": str(output), "pairs": len(pairs), "epoch_losses": result.epoch_losses})
    return 0


def cmd_run(args) -> int:
    result = run_pipeline(args.run_config, threads=args.threads)
    rows = [(key, report) for key, report in sorted(result.reports.items())]
    print(render_table(rows))
    return 0


def cmd_eval(args) -> int:
    config = args.run_config.pipeline
    profile, vocabulary = _load_profile(args.profile)
    params = load_checkpoint(args.checkpoint, vocabulary)
    testset = read_samples(args.testset, vocabulary)
    report = evaluate(params, testset, profile, args.protocol, precision_weighting=config.precision_weighting,
                      model_name=args.name or Path(args.checkpoint).parent.name)
    output = Path(args.output) if args.output else _out_dir(args) / "reports" / f"eval_{args.protocol}.json"
    write_report(report, output)
    print(render_table([(report.model_name, report)]))
    return 0


def cmd_compare(args) -> int:
    base, other = load_report(args.base), load_report(args.other)
    comparison = compare_reports(base, other)
    if args.output:
        Path(args.output).write_text(comparison.model_dump_json(indent=2) + "\n", encoding="utf-8")
    print(render_table([(base.model_name or "base", base), (other.model_name or "other", other)]))
    _print_json(comparison.model_dump())
    return 0


def cmd_ablate(args) -> int:
    summary = run_ablation(args.run_config, args.seeds, _out_dir(args) / "ablation", variants=args.variants,
                           protocol=args.protocol, threads=args.threads)
    output = _out_dir(args) / "ablation.json"
    output.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(args, "ablate", {"summary": output})
    _print_json(summary)
    return 0


def cmd_sweep(args) -> int:
    rows = run_sweep(args.run_config, _out_dir(args) / "sweep", epsilons=args.epsilons,
                     anchor_thresholds=args.anchor_thresholds, per_class=args.per_class,
                     protocol=args.protocol, threads=args.threads)
    output = _out_dir(args) / "sweep.json"
    output.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(args, "sweep", {"rows": output})
    _print_json(rows)
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="behavior-tune", description="Long-tailed next-behavior tuning pipeline")
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out-dir", help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for per-behavior selection")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic long-tailed event log")
    p.add_argument("--behaviors", type=int, default=30)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--zipf", type=float, default=1.2)
    p.add_argument("--coherence", type=float, default=0.8)
    p.add_argument("--sharing", type=float, default=0.8)
    p.add_argument("--history-length", type=int, default=20)
    p.add_argument("--aux-size", type=int, default=2000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="profile frequencies and split users")
    p.add_argument("--events", required=True)
    p.add_argument("--label-map")
    p.add_argument("--anchor-threshold", type=float)
    p.add_argument("--head-threshold", type=float)
    p.add_argument("--medium-threshold", type=float)
    p.add_argument("--balanced-per-class", type=int)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("export-prompts", help="render samples into instruction JSONL")
    p.add_argument("--samples", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--aux-corpus")
    p.add_argument("--max-len", type=int)
    p.add_argument("--template", type=int, choices=[1, 2, 3])
    p.add_argument("--no-target-context", action="store_true")
    p.add_argument("--output")
    p.set_defaults(func=cmd_export_prompts)

    p = sub.add_parser("train-a", help="stage one: SFT on anchor data plus auxiliary records")
    p.add_argument("--profile", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--validation")
    p.add_argument("--aux-corpus")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--source", choices=["anchor", "all", "tail"])
    p.set_defaults(func=cmd_train_a)

    for name, func, help_text in (("score", cmd_score, "difficulty-score a pool"),
                                  ("select", cmd_select, "select a balanced subset and build pairs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--pool", required=True)
        p.add_argument("--profile", required=True)
        p.add_argument("--lambda", dest="balance", type=float)
        p.add_argument("--invert-penalty", action="store_true")
        if name == "select":
            p.add_argument("--per-class", type=int)
            p.add_argument("--strategy", choices=["kmeans", "random", "topk"])
            p.add_argument("--on-correct", choices=["runner_up", "drop"])
        p.set_defaults(func=func)

    p = sub.add_parser("pairs", help="build preference pairs for given samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--on-correct", choices=["runner_up", "drop"])
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train-b", help="stage two: preference tuning against the frozen reference")
    p.add_argument("--reference", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--validation")
    p.add_argument("--beta", type=float)
    p.add_argument("--loss", choices=["dpo", "sft"])
    p.set_defaults(func=cmd_train_b)

    p = sub.add_parser("run", help="run the whole pipeline from a config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--protocol", choices=[REAL_DISTRIBUTION, BALANCED], default=REAL_DISTRIBUTION)
    p.add_argument("--name")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="per-metric deltas between two reports")
    p.add_argument("base")
    p.add_argument("other")
    p.add_argument("--output")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="run ablation variants over several seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", choices=list(ABLATION_VARIANTS))
    p.add_argument("--protocol", choices=[REAL_DISTRIBUTION, BALANCED], default=BALANCED)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over epsilon, anchor threshold and per-class count")
    p.add_argument("--epsilons", type=float, nargs="+")
    p.add_argument("--anchor-thresholds", type=float, nargs="+")
    p.add_argument("--per-class", type=int, nargs="+")
    p.add_argument("--protocol", choices=[REAL_DISTRIBUTION, BALANCED], default=BALANCED)
    p.set_defaults(func=cmd_sweep)
    return parser


def exit_code_for(error: BaseException) -> int:
    """2 for validation-class failures (also when wrapped by a stage error), 3 otherwise."""
    if isinstance(error, PipelineStageError) and error.__cause__ is not None:
        return exit_code_for(error.__cause__)
    if isinstance(error, BehaviorTuningError):
        return error.exit_code
    if isinstance(error, (ValidationError, FileNotFoundError)):
        return 2
    return 3


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or "INFO")
    try:
        args.run_config = _base_config(args)
        if args.log_level is None:
            logging.getLogger().setLevel(args.run_config.log_level)
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        path = getattr(e, "path", None) or getattr(e, "filename", None)
        logger.error(f"{args.command} failed: {e}",
                     extra={"event": "command_failed", "code": code, "path": str(path) if path else None})
        return code


if __name__ == "__main__":
    sys.exit(main())
