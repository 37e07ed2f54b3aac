"""Difficulty scoring and class-balanced, difficulty-weighted K-Means++ selection."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from behavior_data import FrequencyProfile, Sample
from errors import ConfigError
from reference_model import ModelParams, predict_arrays
from seeding import substream

logger = logging.getLogger(__name__)

Strategy = Literal["kmeans", "random", "topk"]


@dataclass(frozen=True)
class DifficultyRecord:
    index: int
    target: int
    predicted: int
    confidence: float
    d_confusion: int
    difficulty: float
    normalized: float
    embedding: np.ndarray

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "target": self.target,
            "predicted": self.predicted,
            "confidence": self.confidence,
            "d_confusion": self.d_confusion,
            "difficulty": self.difficulty,
            "normalized": self.normalized,
        }


def confusion_penalty(
    predicted: int, truth: int, category_of: Callable[[int], str], invert: bool = False
) -> int:
    """0 for a wrong prediction inside the truth's anchor/tail group, 1 otherwise."""
    same_group_miss = predicted != truth and category_of(predicted) == category_of(truth)
    penalty = 0 if same_group_miss else 1
    return 1 - penalty if invert else penalty


def difficulty_score(confidence: float, d_confusion: int, balance: float) -> float:
    """balance * (1 - p) + (1 - balance) * d_confusion."""
    if not 0.0 <= balance <= 1.0:
        raise ConfigError(f"balance weight must be in [0, 1], got {balance}")
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {confidence}")
    return balance * (1.0 - confidence) + (1.0 - balance) * d_confusion


def normalize_difficulty(scores: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """Divide by the maximum; an all-zero pool stays zero and is flagged degenerate."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot normalize an empty score list")
    top = scores.max()
    if top <= 0:
        return np.zeros_like(scores), True
    return scores / top, False


def weighted_kmeanspp_select(
    embeddings: np.ndarray, weights: Sequence[float], count: int, rng: np.random.Generator
) -> List[int]:
    """K-Means++ seeding where every pick probability is scaled by the point's weight.

    The first pick is drawn proportional to weight, each later one proportional
    to weight times squared distance to the nearest pick. The seeds are the
    selection; no Lloyd iterations follow.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    if count < 1:
        raise ValueError("count must be >= 1")
    if count >= n:
        return list(range(n))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights < 0):
        raise ValueError("weights must be one non-negative value per embedding")
    if weights.sum() <= 0:
        logger.warning("All selection weights are zero; falling back to uniform weights",
                       extra={"event": "uniform_fallback"})
        weights = np.ones(n)

    first = int(rng.choice(n, p=weights / weights.sum()))
    selected = [first]
    taken = np.zeros(n, dtype=bool)
    taken[first] = True
    nearest = ((embeddings - embeddings[first]) ** 2).sum(axis=1)

    while len(selected) < count:
        scores = weights * nearest
        scores[taken] = 0.0
        if scores.sum() <= 0:
            # remaining points coincide with picks or carry no weight
            scores = np.where(taken, 0.0, weights)
            if scores.sum() <= 0:
                scores = (~taken).astype(np.float64)
        pick = int(rng.choice(n, p=scores / scores.sum()))
        selected.append(pick)
        taken[pick] = True
        nearest = np.minimum(nearest, ((embeddings - embeddings[pick]) ** 2).sum(axis=1))
    return selected


def score_pool(
    params: ModelParams,
    pool: Sequence[Sample],
    profile: FrequencyProfile,
    balance: float,
    *,
    invert_penalty: bool = False,
) -> Tuple[List[DifficultyRecord], List[int]]:
    """Score every pool sample with the reference model.

    Normalization runs within each target-label pool. Returns the records and
    the labels whose pool was all-zero (degenerate).
    """
    if not pool:
        raise ValueError("cannot score an empty pool")
    log_probs, hidden = predict_arrays(params, pool)
    predicted = np.argmax(log_probs, axis=1)
    targets = np.array([s.target for s in pool], dtype=np.int64)
    confidence = np.exp(log_probs[np.arange(len(pool)), targets])
    penalties = [confusion_penalty(int(p), int(t), profile.category_of, invert_penalty)
                 for p, t in zip(predicted, targets)]
    raw = np.array([difficulty_score(float(min(c, 1.0)), d, balance) for c, d in zip(confidence, penalties)])

    normalized = np.zeros_like(raw)
    degenerate = []
    for label in np.unique(targets):
        members = np.flatnonzero(targets == label)
        normalized[members], flagged = normalize_difficulty(raw[members])
        if flagged:
            degenerate.append(int(label))

    records = [
        DifficultyRecord(
            index=i,
            target=int(targets[i]),
            predicted=int(predicted[i]),
            confidence=float(confidence[i]),
            d_confusion=penalties[i],
            difficulty=float(raw[i]),
            normalized=float(normalized[i]),
            embedding=hidden[i],
        )
        for i in range(len(pool))
    ]
    logger.info(f"Scored {len(records)} pool samples; mean difficulty {raw.mean():.4f}",
                extra={"event": "pool_scored", "degenerate_labels": degenerate})
    return records, degenerate


class CategoryReport(BaseModel):
    behavior: int
    pool_size: int
    selected: int
    degenerate: bool = False
    skipped: bool = False


@dataclass(frozen=True)
class SelectionResult:
    selected: Dict[int, List[int]]
    records: List[DifficultyRecord]
    report: List[CategoryReport]

    @property
    def indices(self) -> List[int]:
        """Selected pool indices, grouped by behavior id in ascending order."""
        return [i for label in sorted(self.selected) for i in self.selected[label]]

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.selected.values())


def _select_category(
    members: np.ndarray, records: Sequence[DifficultyRecord], count: int, strategy: str, rng: np.random.Generator
) -> List[int]:
    weights = np.array([records[i].normalized for i in members])
    if strategy == "kmeans":
        embeddings = np.stack([records[i].embedding for i in members])
        local = weighted_kmeanspp_select(embeddings, weights, count, rng)
    elif strategy == "random":
        local = list(range(len(members))) if count >= len(members) else \
            [int(i) for i in rng.choice(len(members), size=count, replace=False)]
    elif strategy == "topk":
        local = [int(i) for i in np.argsort(-weights, kind="stable")[:count]]
    else:
        raise ValueError(f"unknown selection strategy '{strategy}'")
    return [int(members[i]) for i in local]


def select_balanced_subset(
    pool: Sequence[Sample],
    profile: FrequencyProfile,
    params: ModelParams,
    balance: float,
    per_class: int,
    seed: int,
    *,
    strategy: str = "kmeans",
    invert_penalty: bool = False,
    threads: int = 1,
) -> SelectionResult:
    """Pick min(per_class, n_c) samples of every behavior c from the pool.

    Each behavior uses its own stream ``select/<id>``, so the result does not
    depend on the number of threads.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    records, degenerate = score_pool(params, pool, profile, balance, invert_penalty=invert_penalty)
    targets = np.array([r.target for r in records], dtype=np.int64)
    labels = list(range(profile.size))

    def run(label: int) -> List[int]:
        members = np.flatnonzero(targets == label)
        if members.size == 0:
            return []
        return _select_category(members, records, per_class, strategy, substream(seed, "select", label))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        picks = list(executor.map(run, labels))

    selected: Dict[int, List[int]] = {}
    report = []
    for label, chosen in zip(labels, picks):
        pool_size = int((targets == label).sum())
        if pool_size == 0:
            report.append(CategoryReport(behavior=label, pool_size=0, selected=0, skipped=True))
            continue
        selected[label] = chosen
        report.append(CategoryReport(behavior=label, pool_size=pool_size, selected=len(chosen),
                                     degenerate=label in degenerate))
    skipped = sum(1 for r in report if r.skipped)
    total = sum(len(v) for v in selected.values())
    logger.info(f"Selected {total} samples over {len(selected)} behaviors ({strategy}); {skipped} empty",
                extra={"event": "selection_done", "selected": total, "skipped": skipped})
    return SelectionResult(selected, records, report)


def write_difficulty_records(records: Sequence[DifficultyRecord], path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_dict()) + "\n")
    return len(records)


def write_selection_report(result: SelectionResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "total": result.total,
        "indices": result.indices,
        "categories": [entry.model_dump() for entry in result.report],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
