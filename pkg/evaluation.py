"""Top-1 metrics under the real-distribution and balanced protocols."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from behavior_data import HEAD_CATEGORY, MEDIUM_CATEGORY, TAIL_CATEGORY, FrequencyProfile, Sample, Vocabulary
from errors import ConfigError
from reference_model import ModelParams, predict_arrays

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
REAL_DISTRIBUTION = "real-distribution"
BALANCED = "balanced"
Protocol = Literal["real-distribution", "balanced"]

METRIC_COLUMNS = (
    ("prec_w", "Prec_w"),
    ("rec_w", "Rec_w"),
    ("overall", "Overall"),
    ("head", "Head"),
    ("medium", "Medium"),
    ("tail", "Tail"),
)


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest counts per behavior id."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def predicted(self) -> np.ndarray:
        return self.tp + self.fp

    @property
    def num_samples(self) -> int:
        return int(self.support.sum())


def confusion_counts(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionCounts:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ValueError("cannot count an empty evaluation set")
    if min(predictions.min(), labels.min()) < 0 or max(predictions.max(), labels.max()) >= num_classes:
        raise ValueError(f"behavior ids must lie in [0, {num_classes})")
    correct = predictions == labels
    return ConfusionCounts(
        tp=np.bincount(labels[correct], minlength=num_classes),
        fp=np.bincount(predictions[~correct], minlength=num_classes),
        fn=np.bincount(labels[~correct], minlength=num_classes),
    )


def per_class_precision(counts: ConfusionCounts) -> np.ndarray:
    """TP / (TP + FP); zero for classes that were never predicted."""
    predicted = counts.predicted
    return np.divide(counts.tp, predicted, out=np.zeros(predicted.shape), where=predicted > 0)


def per_class_recall(counts: ConfusionCounts) -> np.ndarray:
    """TP / (TP + FN); NaN for classes without test support."""
    support = counts.support
    return np.divide(counts.tp, support, out=np.full(support.shape, np.nan), where=support > 0)


def weighted_precision(counts: ConfusionCounts, weighting: str = "support") -> Optional[float]:
    """Average per-class precision weighted by support (or by prediction count)."""
    if weighting not in ("support", "predicted"):
        raise ValueError(f"unknown precision weighting '{weighting}'")
    weights = counts.support if weighting == "support" else counts.predicted
    total = weights.sum()
    if total == 0:
        return None
    return float((weights * per_class_precision(counts)).sum() / total)


def weighted_recall(counts: ConfusionCounts) -> Optional[float]:
    """Support-weighted recall, which reduces to sum(TP) / n."""
    n = counts.num_samples
    return float(counts.tp.sum() / n) if n else None


def macro_accuracies(counts: ConfusionCounts, frequency_category: Sequence[str]) -> Dict[str, Optional[float]]:
    """Mean per-class recall overall and within head/medium/tail.

    Only classes with test support count; a category with none is None.
    """
    recall = per_class_recall(counts)
    supported = counts.support > 0
    categories = np.asarray(frequency_category)
    result = {}
    for key, mask in (
        ("overall", supported),
        ("head", supported & (categories == HEAD_CATEGORY)),
        ("medium", supported & (categories == MEDIUM_CATEGORY)),
        ("tail", supported & (categories == TAIL_CATEGORY)),
    ):
        result[key] = float(recall[mask].mean()) if mask.any() else None
    return result


class ClassMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    behavior: str
    frequency_category: str
    support: int
    predicted: int
    true_positives: int
    precision: float
    recall: Optional[float]


class MetricsReport(BaseModel):
    """Six top-1 metrics plus the per-class table they came from."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = REPORT_SCHEMA_VERSION
    protocol: Protocol
    model_name: Optional[str] = None
    num_samples: int
    precision_weighting: Literal["support", "predicted"] = "support"
    prec_w: Optional[float]
    rec_w: Optional[float]
    overall: Optional[float]
    head: Optional[float]
    medium: Optional[float]
    tail: Optional[float]
    per_class: List[ClassMetrics]

    def metric(self, key: str) -> Optional[float]:
        return getattr(self, key)


def evaluate_predictions(
    predictions: Sequence[int],
    labels: Sequence[int],
    profile: FrequencyProfile,
    vocabulary: Vocabulary,
    protocol: str,
    *,
    precision_weighting: str = "support",
    model_name: Optional[str] = None,
) -> MetricsReport:
    """Score fixed predictions; categories come from the training profile."""
    if protocol not in (REAL_DISTRIBUTION, BALANCED):
        raise ConfigError(f"unknown protocol '{protocol}'")
    counts = confusion_counts(predictions, labels, vocabulary.size)
    precision = per_class_precision(counts)
    recall = per_class_recall(counts)
    macro = macro_accuracies(counts, profile.frequency_category)
    per_class = [
        ClassMetrics(
            behavior=vocabulary.name_of(i),
            frequency_category=profile.frequency_category[i],
            support=int(counts.support[i]),
            predicted=int(counts.predicted[i]),
            true_positives=int(counts.tp[i]),
            precision=float(precision[i]),
            recall=None if np.isnan(recall[i]) else float(recall[i]),
        )
        for i in range(vocabulary.size)
    ]
    return MetricsReport(
        protocol=protocol,
        model_name=model_name,
        num_samples=counts.num_samples,
        precision_weighting=precision_weighting,
        prec_w=weighted_precision(counts, precision_weighting),
        rec_w=weighted_recall(counts),
        per_class=per_class,
        **macro,
    )


def predict_labels(params: ModelParams, samples: Sequence[Sample]) -> np.ndarray:
    log_probs, _ = predict_arrays(params, samples)
    return np.argmax(log_probs, axis=1)


def evaluate(
    params: ModelParams,
    testset: Sequence[Sample],
    profile: FrequencyProfile,
    protocol: str,
    *,
    precision_weighting: str = "support",
    model_name: Optional[str] = None,
) -> MetricsReport:
    """Argmax predictions (lowest id on ties) scored into a MetricsReport."""
    if not testset:
        raise ConfigError("cannot evaluate on an empty test set")
    report = evaluate_predictions(
        predict_labels(params, testset), [s.target for s in testset], profile, params.vocabulary, protocol,
        precision_weighting=precision_weighting, model_name=model_name,
    )
    logger.info(f"Evaluated {model_name or 'model'} on {len(testset)} samples ({protocol}): "
                f"overall={_fmt(report.overall)} tail={_fmt(report.tail)}",
                extra={"event": "evaluated", "protocol": protocol, "overall": report.overall, "tail": report.tail})
    return report


def overall_macro_accuracy(params: ModelParams, samples: Sequence[Sample], num_classes: int) -> float:
    """Model-selection score: mean recall over supported classes."""
    counts = confusion_counts(predict_labels(params, samples), [s.target for s in samples], num_classes)
    recall = per_class_recall(counts)
    return float(np.nanmean(recall))


# --- reports ---------------------------------------------------------------

def write_report(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_report(path) -> MetricsReport:
    return MetricsReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


class MetricDelta(BaseModel):
    base: Optional[float]
    other: Optional[float]
    delta: Optional[float]
    ratio: Optional[float]


class ComparisonReport(BaseModel):
    base_name: Optional[str]
    other_name: Optional[str]
    protocol: str
    metrics: Dict[str, MetricDelta]


def compare_reports(base: MetricsReport, other: MetricsReport) -> ComparisonReport:
    """Per-metric raw delta (other - base) and ratio (other / base)."""
    if base.protocol != other.protocol:
        logger.warning(f"Comparing reports from different protocols ({base.protocol} vs {other.protocol})")
    metrics = {}
    for key, _ in METRIC_COLUMNS:
        a, b = base.metric(key), other.metric(key)
        delta = None if a is None or b is None else b - a
        ratio = None if a is None or b is None or a == 0 else b / a
        metrics[key] = MetricDelta(base=a, other=b, delta=delta, ratio=ratio)
    return ComparisonReport(base_name=base.model_name, other_name=other.model_name,
                            protocol=base.protocol, metrics=metrics)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_table(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Aligned text table: Model | Prec_w | Rec_w | Overall | Head | Medium | Tail."""
    header = ["Model"] + [label for _, label in METRIC_COLUMNS]
    body = [[name] + [_fmt(report.metric(key)) for key, _ in METRIC_COLUMNS] for name, report in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def report_summary(report: MetricsReport) -> Dict[str, Optional[float]]:
    return {key: report.metric(key) for key, _ in METRIC_COLUMNS}
