"""Two-stage tuning: anchor SFT with auxiliary data, then balanced preference tuning."""

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from behavior_data import (
    HEAD_CATEGORY,
    EventLog,
    FrequencyProfile,
    Sample,
    TransitionRules,
    Vocabulary,
    build_balanced_testset,
    build_samples,
    compute_frequency_profile,
    generate_synthetic_dataset,
    load_events,
    load_label_map,
    sample_from_dict,
    sample_to_dict,
    split_by_category,
    split_users,
    write_samples,
)
from config import PipelineConfig, RunConfig, config_hash
from difficulty_selector import select_balanced_subset, write_difficulty_records, write_selection_report
from errors import ConfigError, DataFormatError, PipelineStageError
from evaluation import (
    BALANCED,
    REAL_DISTRIBUTION,
    MetricsReport,
    compare_reports,
    confusion_counts,
    evaluate,
    macro_accuracies,
    overall_macro_accuracy,
    predict_labels,
    report_summary,
    write_report,
)
from prompt_builder import (
    AuxiliaryCorpus,
    auxiliary_count,
    auxiliary_to_sample,
    export_instruction_jsonl,
    generate_auxiliary_corpus,
    load_auxiliary_corpus,
    mix_auxiliary,
    render_samples,
    sample_auxiliary,
)
from reference_model import (
    ModelParams,
    PreferencePair,
    TrainResult,
    init_model,
    predict_arrays,
    save_checkpoint,
    train,
)
from seeding import derive_seed, substream

logger = logging.getLogger(__name__)

__all__ = [
    "PreferencePair",
    "PipelineData",
    "PipelineResult",
    "ABLATION_VARIANTS",
    "partition_log",
    "prepare_data",
    "stage_a_samples",
    "run_a_tuning",
    "build_preference_pairs",
    "run_b_tuning",
    "run_pipeline",
    "run_ablation",
    "run_sweep",
]

ABLATION_VARIANTS: Dict[str, dict] = {
    "full": {},
    "w/o DDS": {"selection": "random"},
    "w/o A-Tuning": {"skip_stage_a": True},
    "w/o DPO": {"b_loss": "sft"},
    "w/o Aux. Task": {"epsilon": 0.0},
    "w/o KMeans": {"selection": "topk"},
}


@dataclass
class PipelineData:
    """Everything the stages read: splits, the training profile and test sets."""

    vocabulary: Vocabulary
    train: List[Sample]
    validation: List[Sample]
    test_real: List[Sample]
    test_balanced: List[Sample]
    profile: FrequencyProfile
    splits: Dict[str, List[str]]
    shortfall: Dict[int, int] = field(default_factory=dict)
    rules: Optional[TransitionRules] = None
    aux_corpus: Optional[AuxiliaryCorpus] = None


@dataclass
class PipelineResult:
    reference: ModelParams
    policy: Optional[ModelParams]
    records: list
    pairs: List[PreferencePair]
    reports: Dict[str, MetricsReport]
    manifest: dict

    @property
    def final_stage(self) -> str:
        return "stage_b" if self.policy is not None else "stage_a"

    def final_report(self, protocol: str = BALANCED) -> MetricsReport:
        return self.reports[f"{self.final_stage}/{protocol}"]


# --- data ------------------------------------------------------------------

def partition_log(log: EventLog, config: PipelineConfig) -> PipelineData:
    """Split users 8:1:1, profile the training targets and build both test sets."""
    train_log, val_log, test_log = split_users(log, config.split_ratios, config.seed)
    L = config.history_length
    train = build_samples(train_log, L)
    validation = build_samples(val_log, L)
    test = build_samples(test_log, L)
    if not train:
        raise ConfigError(f"no training samples: every training user has fewer than {L + 1} events")
    if not test:
        raise ConfigError("no test samples after the user split")
    profile = compute_frequency_profile(
        train, log.vocabulary, config.anchor_threshold, config.head_threshold, config.medium_threshold)

    # the real-distribution set is the whole test split; it may share samples with the balanced draw
    balanced, shortfall = build_balanced_testset(test, config.balanced_per_class, config.seed)
    return PipelineData(
        vocabulary=log.vocabulary,
        train=train,
        validation=validation,
        test_real=list(test),
        test_balanced=balanced,
        profile=profile,
        splits={name: sorted(part.streams) for name, part in
                (("train", train_log), ("validation", val_log), ("test", test_log))},
        shortfall=shortfall,
    )


def prepare_data(run_config: RunConfig) -> PipelineData:
    """Load or synthesize the event log, partition it and attach the auxiliary corpus."""
    pipeline, paths = run_config.pipeline, run_config.paths
    rules = None
    if paths.events is not None:
        label_map = load_label_map(paths.label_map) if paths.label_map else None
        log = load_events(paths.events, label_map=label_map)
    else:
        log, rules = generate_synthetic_dataset(pipeline.synthetic)

    data = partition_log(log, pipeline)
    data.rules = rules
    if paths.aux_corpus is not None:
        data.aux_corpus = load_auxiliary_corpus(paths.aux_corpus)
    elif pipeline.epsilon > 0:
        data.aux_corpus = generate_auxiliary_corpus(pipeline.aux_corpus_size, substream(pipeline.seed, "aux", "corpus"))
    return data


def stage_a_samples(samples: Sequence[Sample], profile: FrequencyProfile, source: str) -> List[Sample]:
    """Stage-one training data: anchor targets, all targets, or non-head targets."""
    if source == "anchor":
        return split_by_category(samples, profile)[0]
    if source == "tail":
        return [s for s in samples if profile.frequency_category[s.target] != HEAD_CATEGORY]
    if source == "all":
        return list(samples)
    raise ConfigError(f"unknown stage-one source '{source}'")


def _validator(validation: Sequence[Sample], num_classes: int):
    if not validation:
        return None
    return lambda params: overall_macro_accuracy(params, validation, num_classes)


def _head_guarded_validator(
    validation: Sequence[Sample], reference: ModelParams, profile: FrequencyProfile, tolerance: float
):
    """Overall macro accuracy, or -inf once Head macro accuracy drops more than
    ``tolerance`` (relative) below the reference's on the same samples."""
    if not validation:
        return None
    labels = [s.target for s in validation]

    def macro(params: ModelParams):
        counts = confusion_counts(predict_labels(params, validation), labels, profile.size)
        return macro_accuracies(counts, profile.frequency_category)

    floor = macro(reference)["head"]
    if floor is not None:
        floor *= 1.0 - tolerance

    def score(params: ModelParams) -> float:
        result = macro(params)
        if floor is not None and result["head"] is not None and result["head"] < floor:
            return -math.inf
        return result["overall"]

    return score


# --- stages ----------------------------------------------------------------

@dataclass
class StageAResult:
    params: ModelParams
    training: TrainResult
    behavior_count: int
    auxiliary_count: int
    auxiliary_with_replacement: bool


def run_a_tuning(
    behavior_samples: Sequence[Sample],
    aux_corpus: Optional[AuxiliaryCorpus],
    epsilon: float,
    config: PipelineConfig,
    vocabulary: Vocabulary,
    validation: Sequence[Sample] = (),
    stage: str = "stage_a",
) -> StageAResult:
    """SFT on the stage-one samples mixed with floor(epsilon * n) auxiliary records.

    Auxiliary pairs are projected onto samples and enter the loss exactly like
    behavior samples. Validation uses behavior samples only.
    """
    if not behavior_samples:
        raise ConfigError("stage one has no training samples")
    count = auxiliary_count(epsilon, len(behavior_samples))
    if epsilon > 0 and (aux_corpus is None or len(aux_corpus) == 0):
        raise ConfigError("epsilon > 0 needs a non-empty auxiliary corpus")
    drawn, with_replacement, _ = sample_auxiliary(
        aux_corpus, count, config.aux_max_len, substream(config.seed, "aux", stage))
    aux_samples = [auxiliary_to_sample(record, vocabulary, config.history_length) for record in drawn]

    params = init_model(vocabulary, config.model, substream(config.seed, "init"))
    logger.info(f"{stage}: SFT on {len(behavior_samples)} behavior + {len(aux_samples)} auxiliary samples",
                extra={"event": "stage_start", "stage": stage, "auxiliary": len(aux_samples)})
    training = train(
        params, list(behavior_samples) + aux_samples, "sft", config.stage_a,
        substream(config.seed, "train", stage), validate=_validator(validation, vocabulary.size), stage=stage,
    )
    return StageAResult(training.params, training, len(behavior_samples), len(aux_samples), with_replacement)


def build_preference_pairs(
    samples: Sequence[Sample], reference: ModelParams, on_correct: str = "runner_up"
) -> List[PreferencePair]:
    """chosen = ground truth; rejected = the reference's wrong guess or its runner-up."""
    if reference.vocabulary.size < 2:
        raise ValueError("preference pairs need at least 2 behaviors")
    if on_correct not in ("runner_up", "drop"):
        raise ConfigError(f"unknown on_correct policy '{on_correct}'")
    if not samples:
        return []
    log_probs, _ = predict_arrays(reference, samples)
    pairs = []
    for sample, row in zip(samples, log_probs):
        predicted = int(np.argmax(row))
        if predicted != sample.target:
            pairs.append(PreferencePair(sample, sample.target, predicted))
        elif on_correct == "runner_up":
            masked = row.copy()
            masked[sample.target] = -np.inf
            pairs.append(PreferencePair(sample, sample.target, int(np.argmax(masked))))
    dropped = len(samples) - len(pairs)
    logger.info(f"Built {len(pairs)} preference pairs ({dropped} correct predictions dropped)",
                extra={"event": "pairs_built", "pairs": len(pairs), "dropped": dropped})
    return pairs


def run_b_tuning(
    reference: ModelParams,
    pairs: Sequence[PreferencePair],
    beta: float,
    config: PipelineConfig,
    validation: Sequence[Sample] = (),
    loss: str = "dpo",
    stage: str = "stage_b",
    profile: Optional[FrequencyProfile] = None,
) -> TrainResult:
    """Tune a copy of the reference on the pairs; the reference itself stays frozen.

    With a profile and ``config.head_tolerance`` set, an epoch only counts on
    validation while its Head macro accuracy stays within the tolerance of the
    reference's; the reference itself is always a candidate.
    """
    if not pairs:
        raise ConfigError("stage two has no preference pairs")
    before = reference.checksum()
    rng = substream(config.seed, "train", stage)
    validate = _validator(validation, reference.vocabulary.size)
    if profile is not None and config.head_tolerance is not None:
        validate = _head_guarded_validator(validation, reference, profile, config.head_tolerance)
    if loss == "dpo":
        result = train(reference, list(pairs), "dpo", config.stage_b, rng,
                       reference=reference, beta=beta, validate=validate, stage=stage)
    elif loss == "sft":
        result = train(reference, [pair.sample for pair in pairs], "sft", config.stage_b, rng,
                       validate=validate, stage=stage)
    else:
        raise ConfigError(f"unknown stage-two loss '{loss}'")
    if reference.checksum() != before:
        raise RuntimeError("reference model changed during stage two")
    return result


# --- artifacts -------------------------------------------------------------

def write_pairs(pairs: Iterable[PreferencePair], vocabulary: Vocabulary, path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for pair in pairs:
            handle.write(json.dumps({
                "sample": sample_to_dict(pair.sample, vocabulary),
                "chosen": vocabulary.name_of(pair.chosen),
                "rejected": vocabulary.name_of(pair.rejected),
            }) + "\n")
            count += 1
    return count


def read_pairs(path, vocabulary: Vocabulary) -> List[PreferencePair]:
    path = Path(path)
    pairs = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append(PreferencePair(
                    sample_from_dict(obj["sample"], vocabulary),
                    vocabulary.id_of(obj["chosen"]),
                    vocabulary.id_of(obj["rejected"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"invalid preference pair: {e}", path=str(path), line=line_no) from e
    return pairs


def write_partition(data: PipelineData, out_dir) -> Dict[str, str]:
    """Persist the profile, user splits and every sample set; returns relative paths."""
    out_dir = Path(out_dir)
    artifacts = {}
    profile_path = out_dir / "profile.json"
    profile_path.parent.mkdir(parents=True, exist_ok=True)
    profile_path.write_text(json.dumps(data.profile.to_dict(data.vocabulary), indent=2) + "\n", encoding="utf-8")
    artifacts["profile"] = "profile.json"
    (out_dir / "splits.json").write_text(
        json.dumps({"users": data.splits, "balanced_shortfall": {str(k): v for k, v in data.shortfall.items()}},
                   indent=2) + "\n", encoding="utf-8")
    artifacts["splits"] = "splits.json"
    for name, samples in (("train", data.train), ("validation", data.validation),
                          ("test_real", data.test_real), ("test_balanced", data.test_balanced)):
        write_samples(samples, data.vocabulary, out_dir / "samples" / f"{name}.jsonl")
        artifacts[f"samples_{name}"] = f"samples/{name}.jsonl"
    if data.rules is not None:
        (out_dir / "rules.json").write_text(json.dumps(data.rules.to_dict(data.vocabulary)) + "\n", encoding="utf-8")
        artifacts["rules"] = "rules.json"
    return artifacts


def _evaluate_stage(
    params: ModelParams, stage: str, data: PipelineData, config: PipelineConfig, out_dir: Path,
    reports: Dict[str, MetricsReport], artifacts: Dict[str, str],
) -> None:
    for protocol, testset in ((REAL_DISTRIBUTION, data.test_real), (BALANCED, data.test_balanced)):
        report = evaluate(params, testset, data.profile, protocol,
                          precision_weighting=config.precision_weighting, model_name=stage)
        key = f"{stage}/{protocol}"
        reports[key] = report
        relative = f"reports/{stage}_{protocol}.json"
        write_report(report, out_dir / relative)
        artifacts[f"report_{stage}_{protocol}"] = relative


# --- pipeline --------------------------------------------------------------

def run_pipeline(run_config: RunConfig, out_dir=None, threads: int = 1) -> PipelineResult:
    """Run both stages in order, persisting every artifact and a run manifest.

    A failing stage raises PipelineStageError; files written before it stay.
    """
    config = run_config.pipeline
    out_dir = Path(out_dir or run_config.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: Dict[str, str] = {}
    reports: Dict[str, MetricsReport] = {}
    stage = "data"

    try:
        data = prepare_data(run_config)
        artifacts.update(write_partition(data, out_dir))

        stage = "prompts"
        prompts_rng = substream(config.seed, "prompts")
        instructions = render_samples(data.train, data.vocabulary, prompts_rng,
                                      include_target_context=config.include_target_context)
        mixed = mix_auxiliary(instructions, data.aux_corpus, config.epsilon, config.aux_max_len, prompts_rng)
        export_instruction_jsonl(mixed.records, out_dir / "instructions.jsonl")
        artifacts["instructions"] = "instructions.jsonl"

        stage = "stage_a"
        source = "all" if config.skip_stage_a else config.stage_a_source
        stage_a = run_a_tuning(stage_a_samples(data.train, data.profile, source), data.aux_corpus,
                               config.epsilon, config, data.vocabulary, data.validation)
        reference = stage_a.params
        reference_sum = save_checkpoint(reference, out_dir / "stage_a" / "model.json",
                                        metadata={"stage": "stage_a", "source": source})
        artifacts["stage_a_model"] = "stage_a/model.json"
        _evaluate_stage(reference, "stage_a", data, config, out_dir, reports, artifacts)

        policy, pairs, records, selection = None, [], [], None
        if not config.skip_stage_a:
            stage = "selection"
            selection = select_balanced_subset(
                data.train, data.profile, reference, config.balance_lambda, config.samples_per_class, config.seed,
                strategy=config.selection, invert_penalty=config.invert_penalty, threads=threads,
            )
            records = selection.records
            write_difficulty_records(records, out_dir / "difficulty.jsonl")
            write_selection_report(selection, out_dir / "selection.json")
            artifacts.update(difficulty="difficulty.jsonl", selection="selection.json")

            stage = "pairs"
            pairs = build_preference_pairs([data.train[i] for i in selection.indices], reference,
                                           on_correct=config.on_correct)
            write_pairs(pairs, data.vocabulary, out_dir / "pairs.jsonl")
            artifacts["pairs"] = "pairs.jsonl"

            stage = "stage_b"
            result = run_b_tuning(reference, pairs, config.beta, config, data.validation, loss=config.b_loss,
                                  profile=data.profile)
            policy = result.params
            save_checkpoint(policy, out_dir / "stage_b" / "model.json",
                            metadata={"stage": "stage_b", "loss": config.b_loss})
            artifacts["stage_b_model"] = "stage_b/model.json"
            _evaluate_stage(policy, "stage_b", data, config, out_dir, reports, artifacts)
    except PipelineStageError:
        raise
    except Exception as e:
        logger.error(f"Pipeline stage {stage} failed: {e}", extra={"event": "stage_failed", "stage": stage})
        raise PipelineStageError(stage, str(e), artifacts) from e

    manifest = _build_manifest(run_config, reports, artifacts, reference_sum, policy, selection, pairs, stage_a)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Pipeline finished; artifacts in {out_dir}", extra={"event": "pipeline_done"})
    return PipelineResult(reference, policy, records, pairs, reports, manifest)


def _build_manifest(run_config, reports, artifacts, reference_sum, policy, selection, pairs, stage_a) -> dict:
    config = run_config.pipeline
    deltas = {}
    for protocol in (REAL_DISTRIBUTION, BALANCED):
        base, other = reports.get(f"stage_a/{protocol}"), reports.get(f"stage_b/{protocol}")
        if base is not None and other is not None:
            deltas[protocol] = {k: v.delta for k, v in compare_reports(base, other).metrics.items()}
    return {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config_hash": config_hash(run_config),
        "config": run_config.model_dump(mode="json"),
        "seeds": {
            "master": config.seed,
            "init": derive_seed(config.seed, "init"),
            "train/stage_a": derive_seed(config.seed, "train", "stage_a"),
            "train/stage_b": derive_seed(config.seed, "train", "stage_b"),
        },
        "artifacts": artifacts,
        "checksums": {
            "stage_a": reference_sum,
            "stage_b": policy.checksum() if policy is not None else None,
        },
        "counts": {
            "stage_a_behavior": stage_a.behavior_count,
            "stage_a_auxiliary": stage_a.auxiliary_count,
            "auxiliary_with_replacement": stage_a.auxiliary_with_replacement,
            "selected": selection.total if selection is not None else 0,
            "pairs": len(pairs),
        },
        "metrics": {key: report_summary(report) for key, report in reports.items()},
        "deltas": deltas,
    }


# --- ablations and sweeps --------------------------------------------------

def with_overrides(run_config: RunConfig, **overrides) -> RunConfig:
    """Copy of the run config with pipeline fields replaced and re-validated."""
    payload = run_config.model_dump()
    payload["pipeline"].update(overrides)
    return RunConfig.model_validate(payload)


def _relative_drop(full: Optional[float], variant: Optional[float]) -> Optional[float]:
    if full is None or variant is None or full == 0:
        return None
    return 100.0 * (variant - full) / full


def run_ablation(
    run_config: RunConfig,
    seeds: Sequence[int],
    out_dir,
    variants: Optional[Sequence[str]] = None,
    protocol: str = BALANCED,
    threads: int = 1,
) -> dict:
    """Run the full pipeline and each ablation variant for every master seed.

    Reports mean metrics per variant, the mean relative change (%) against
    the full pipeline and how often the variant lost on Tail.
    """
    names = list(variants or ABLATION_VARIANTS)
    if "full" not in names:
        names.insert(0, "full")
    unknown = [n for n in names if n not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants: {unknown}")
    out_dir = Path(out_dir)
    metrics: Dict[str, List[dict]] = {name: [] for name in names}
    for seed in seeds:
        for name in names:
            variant_config = with_overrides(run_config, seed=seed, **ABLATION_VARIANTS[name])
            slug = name.replace("/", "").replace(".", "").replace(" ", "_").lower()
            result = run_pipeline(variant_config, out_dir / f"seed{seed}" / slug, threads=threads)
            metrics[name].append(report_summary(result.final_report(protocol)))

    summary = {"protocol": protocol, "seeds": list(seeds), "variants": {}}
    for name in names:
        runs = metrics[name]
        row = {"mean": {}, "relative_change_pct": {}, "tail_losses": 0}
        for key in runs[0]:
            values = [r[key] for r in runs if r[key] is not None]
            row["mean"][key] = float(np.mean(values)) if values else None
            changes = [_relative_drop(f[key], r[key]) for f, r in zip(metrics["full"], runs)]
            changes = [c for c in changes if c is not None]
            row["relative_change_pct"][key] = float(np.mean(changes)) if changes else None
        row["tail_losses"] = sum(
            1 for f, r in zip(metrics["full"], runs)
            if f["tail"] is not None and r["tail"] is not None and r["tail"] < f["tail"]
        )
        summary["variants"][name] = row
    logger.info(f"Ablation finished over {len(seeds)} seeds and {len(names)} variants",
                extra={"event": "ablation_done"})
    return summary


def run_sweep(
    run_config: RunConfig,
    out_dir,
    epsilons: Sequence[float] = (),
    anchor_thresholds: Sequence[float] = (),
    per_class: Sequence[int] = (),
    protocol: str = BALANCED,
    threads: int = 1,
) -> List[dict]:
    """Grid over auxiliary ratio, anchor threshold and per-class count; one row per point."""
    base = run_config.pipeline
    grid = [
        (eps, anchor, f)
        for eps in (epsilons or [base.epsilon])
        for anchor in (anchor_thresholds or [base.anchor_threshold])
        for f in (per_class or [base.samples_per_class])
    ]
    rows = []
    for i, (eps, anchor, f) in enumerate(grid):
        point = with_overrides(run_config, epsilon=eps, anchor_threshold=anchor, samples_per_class=f)
        result = run_pipeline(point, Path(out_dir) / f"point{i:03d}", threads=threads)
        rows.append({
            "epsilon": eps,
            "anchor_threshold": anchor,
            "samples_per_class": f,
            "stage_a": report_summary(result.reports[f"stage_a/{protocol}"]),
            "final": report_summary(result.final_report(protocol)),
        })
    return rows
