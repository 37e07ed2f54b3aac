"""Behavior events, samples, frequency profiles and the synthetic generator."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from behavior_catalog import get_behavior_names, get_locations_for_bucket
from errors import ConfigError, DataFormatError
from seeding import substream

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HOUR_BUCKETS = 4
HOURS_PER_WEEK = 7 * 24

ANCHOR = "anchor"
TAIL = "tail"
HEAD_CATEGORY = "head"
MEDIUM_CATEGORY = "medium"
TAIL_CATEGORY = "tail"


def hour_bucket(hour: int) -> int:
    """Bucket an hour into 0-5, 6-11, 12-17, 18-23."""
    return hour // 6


@dataclass(frozen=True, slots=True)
class BehaviorEvent:
    location: str
    day_of_week: int
    hour: int
    behavior: int

    def __post_init__(self):
        if not 1 <= self.day_of_week <= 7:
            raise ValueError(f"day_of_week must be in 1..7, got {self.day_of_week}")
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour must be in 0..23, got {self.hour}")
        if self.behavior < 0:
            raise ValueError(f"behavior id must be non-negative, got {self.behavior}")

    @property
    def time_key(self) -> Tuple[int, int]:
        return (self.day_of_week, self.hour)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered, unique behavior labels; a label's position is its behavior id."""

    names: Tuple[str, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("vocabulary needs at least 2 behaviors")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(names)})

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown behavior label '{name}'") from None

    def name_of(self, behavior_id: int) -> str:
        if not 0 <= behavior_id < len(self.names):
            raise KeyError(f"unknown behavior id {behavior_id}")
        return self.names[behavior_id]

    def digest(self) -> str:
        """SHA-256 over the ordered labels; identifies the vocabulary in checkpoints."""
        return hashlib.sha256("\n".join(self.names).encode("utf-8")).hexdigest()


@dataclass(frozen=True, slots=True)
class TargetContext:
    day_of_week: int
    hour: int
    location: str


@dataclass(frozen=True, slots=True)
class Sample:
    history: Tuple[BehaviorEvent, ...]
    target: int
    target_context: TargetContext
    user: Optional[str] = None

    def __post_init__(self):
        keys = [event.time_key for event in self.history]
        if any(a > b for a, b in zip(keys, keys[1:])):
            raise ValueError("sample history must be chronologically non-decreasing")


@dataclass(frozen=True)
class EventLog:
    """Per-user chronological event streams over one vocabulary."""

    streams: Dict[str, Tuple[BehaviorEvent, ...]]
    vocabulary: Vocabulary

    @property
    def num_users(self) -> int:
        return len(self.streams)

    @property
    def num_events(self) -> int:
        return sum(len(stream) for stream in self.streams.values())

    def subset(self, users: Sequence[str]) -> "EventLog":
        return EventLog({user: self.streams[user] for user in sorted(users)}, self.vocabulary)


@dataclass(frozen=True)
class FrequencyProfile:
    """Target-label counts and the anchor/tail and head/medium/tail assignments."""

    counts: Tuple[int, ...]
    proportions: Tuple[float, ...]
    anchor_set: frozenset
    tail_set: frozenset
    frequency_category: Tuple[str, ...]
    anchor_threshold: float
    head_threshold: float
    medium_threshold: float

    @property
    def size(self) -> int:
        return len(self.counts)

    def category_of(self, behavior_id: int) -> str:
        """Anchor/tail membership of a behavior id."""
        return ANCHOR if behavior_id in self.anchor_set else TAIL

    def ids_in(self, frequency_category: str) -> List[int]:
        return [i for i, c in enumerate(self.frequency_category) if c == frequency_category]

    def to_dict(self, vocabulary: Vocabulary) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "vocabulary": list(vocabulary.names),
            "thresholds": {
                "anchor": self.anchor_threshold,
                "head": self.head_threshold,
                "medium": self.medium_threshold,
            },
            "behaviors": [
                {
                    "behavior": vocabulary.name_of(i),
                    "count": self.counts[i],
                    "proportion": self.proportions[i],
                    "partition": self.category_of(i),
                    "frequency_category": self.frequency_category[i],
                }
                for i in range(self.size)
            ],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> Tuple["FrequencyProfile", Vocabulary]:
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise DataFormatError(f"unsupported profile schema version {payload.get('schema_version')!r}")
        vocabulary = Vocabulary(tuple(payload["vocabulary"]))
        rows = payload["behaviors"]
        thresholds = payload["thresholds"]
        profile = cls(
            counts=tuple(int(r["count"]) for r in rows),
            proportions=tuple(float(r["proportion"]) for r in rows),
            anchor_set=frozenset(i for i, r in enumerate(rows) if r["partition"] == ANCHOR),
            tail_set=frozenset(i for i, r in enumerate(rows) if r["partition"] == TAIL),
            frequency_category=tuple(r["frequency_category"] for r in rows),
            anchor_threshold=float(thresholds["anchor"]),
            head_threshold=float(thresholds["head"]),
            medium_threshold=float(thresholds["medium"]),
        )
        return profile, vocabulary


class SyntheticSpec(BaseModel):
    """Parameters of the synthetic long-tailed behavior generator."""

    model_config = ConfigDict(extra="forbid")

    num_behaviors: int = Field(30, ge=2)
    num_users: int = Field(200, ge=1)
    num_samples: int = Field(20000, ge=1)
    zipf_exponent: float = Field(1.2, gt=0)
    markov_coherence: float = Field(0.8, ge=0, le=1)
    rule_sharing: float = Field(0.8, ge=0, le=1)
    history_length: int = Field(20, ge=1)
    rng_seed: int = 0


@dataclass(frozen=True)
class TransitionRules:
    """Hidden per-user preferred next behavior, indexed [hour bucket, previous behavior]."""

    tables: Dict[str, np.ndarray]

    def lookup(self, user: str, bucket: int, previous: int) -> int:
        return int(self.tables[user][bucket, previous])

    def to_dict(self, vocabulary: Vocabulary) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "vocabulary": list(vocabulary.names),
            "rules": {
                user: [[vocabulary.name_of(int(b)) for b in row] for row in table]
                for user, table in sorted(self.tables.items())
            },
        }

    @classmethod
    def from_dict(cls, payload: Mapping, vocabulary: Vocabulary) -> "TransitionRules":
        return cls({
            user: np.array([[vocabulary.id_of(name) for name in row] for row in table], dtype=np.int64)
            for user, table in payload["rules"].items()
        })


class EventRecord(BaseModel):
    """One line of the event JSONL file."""

    model_config = ConfigDict(extra="forbid")

    user: str
    day: int = Field(ge=1, le=7)
    hour: int = Field(ge=0, le=23)
    location: str
    behavior: str


# --- ingestion -------------------------------------------------------------

def load_label_map(path) -> Dict[str, str]:
    """Read a raw-label -> merged-label JSON object."""
    path = Path(path)
    try:
        mapping = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"label map is not valid JSON: {e}", path=str(path)) from e
    if not isinstance(mapping, dict) or not all(isinstance(v, str) for v in mapping.values()):
        raise DataFormatError("label map must be a JSON object of strings", path=str(path))
    return mapping


def load_events(path, *, strict_order: bool = False, label_map: Optional[Mapping[str, str]] = None) -> EventLog:
    """Read an event JSONL file into per-user chronological streams.

    The vocabulary is the sorted set of distinct (mapped) behavior labels.
    With ``strict_order`` every user's events must already be in time order.
    """
    path = Path(path)
    raw: Dict[str, List[Tuple[int, EventRecord]]] = {}
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"malformed JSON: {e.msg}", path=str(path), line=line_no) from e
            if isinstance(obj, dict) and "schema_version" in obj:
                if obj["schema_version"] != SCHEMA_VERSION:
                    raise DataFormatError(
                        f"unknown schema version {obj['schema_version']!r}", path=str(path), line=line_no)
                continue
            try:
                record = EventRecord.model_validate(obj)
            except ValidationError as e:
                problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
                raise DataFormatError(f"invalid event ({problems})", path=str(path), line=line_no) from e
            if label_map is not None:
                record = record.model_copy(update={"behavior": label_map.get(record.behavior, record.behavior)})
            stream = raw.setdefault(record.user, [])
            if strict_order and stream and (stream[-1][1].day, stream[-1][1].hour) > (record.day, record.hour):
                raise DataFormatError(f"events of user '{record.user}' out of order", path=str(path), line=line_no)
            stream.append((line_no, record))

    if not raw:
        raise DataFormatError("empty log", path=str(path))

    labels = sorted({record.behavior for stream in raw.values() for _, record in stream})
    try:
        vocabulary = Vocabulary(tuple(labels))
    except ValueError as e:
        raise DataFormatError(str(e), path=str(path)) from e

    streams = {}
    for user in sorted(raw):
        # stable sort keeps file order for events sharing (day, hour)
        ordered = sorted(raw[user], key=lambda item: (item[1].day, item[1].hour))
        streams[user] = tuple(
            BehaviorEvent(r.location, r.day, r.hour, vocabulary.id_of(r.behavior)) for _, r in ordered
        )
    log = EventLog(streams, vocabulary)
    logger.info(f"Loaded {log.num_events} events for {log.num_users} users from {path}",
                extra={"event": "events_loaded", "users": log.num_users, "behaviors": vocabulary.size})
    return log


def write_events(log: EventLog, path) -> int:
    """Write the log as event JSONL, sorted by user then time."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps({"schema_version": SCHEMA_VERSION}) + "\n")
        for user in sorted(log.streams):
            for event in log.streams[user]:
                handle.write(json.dumps({
                    "user": user,
                    "day": event.day_of_week,
                    "hour": event.hour,
                    "location": event.location,
                    "behavior": log.vocabulary.name_of(event.behavior),
                }) + "\n")
                count += 1
    return count


# --- samples ---------------------------------------------------------------

def build_samples(log: EventLog, history_length: int) -> List[Sample]:
    """Slide a window of ``history_length`` events over every user stream."""
    if history_length < 1:
        raise ValueError("history_length must be >= 1")
    samples: List[Sample] = []
    short_users = 0
    for user, events in log.streams.items():
        if len(events) < history_length + 1:
            short_users += 1
            continue
        for i in range(history_length, len(events)):
            target = events[i]
            samples.append(Sample(
                history=tuple(events[i - history_length:i]),
                target=target.behavior,
                target_context=TargetContext(target.day_of_week, target.hour, target.location),
                user=user,
            ))
    logger.info(f"Built {len(samples)} samples (L={history_length}); {short_users} users too short",
                extra={"event": "samples_built", "samples": len(samples), "short_users": short_users})
    return samples


def _event_to_dict(event: BehaviorEvent, vocabulary: Vocabulary) -> dict:
    return {"day": event.day_of_week, "hour": event.hour, "location": event.location,
            "behavior": vocabulary.name_of(event.behavior)}


def sample_to_dict(sample: Sample, vocabulary: Vocabulary) -> dict:
    ctx = sample.target_context
    return {
        "user": sample.user,
        "history": [_event_to_dict(e, vocabulary) for e in sample.history],
        "target": vocabulary.name_of(sample.target),
        "target_context": {"day": ctx.day_of_week, "hour": ctx.hour, "location": ctx.location},
    }


def sample_from_dict(obj: Mapping, vocabulary: Vocabulary) -> Sample:
    ctx = obj["target_context"]
    return Sample(
        history=tuple(
            BehaviorEvent(e["location"], int(e["day"]), int(e["hour"]), vocabulary.id_of(e["behavior"]))
            for e in obj["history"]
        ),
        target=vocabulary.id_of(obj["target"]),
        target_context=TargetContext(int(ctx["day"]), int(ctx["hour"]), ctx["location"]),
        user=obj.get("user"),
    )


def write_samples(samples: Sequence[Sample], vocabulary: Vocabulary, path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for sample in samples:
            handle.write(json.dumps(sample_to_dict(sample, vocabulary)) + "\n")
    return len(samples)


def read_samples(path, vocabulary: Vocabulary) -> List[Sample]:
    path = Path(path)
    samples = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_dict(json.loads(line), vocabulary))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"invalid sample: {e}", path=str(path), line=line_no) from e
    return samples


# --- frequency analysis ----------------------------------------------------

def compute_frequency_profile(
    samples: Sequence[Sample],
    vocabulary: Vocabulary,
    anchor_threshold: float = 0.01,
    head_threshold: float = 0.05,
    medium_threshold: float = 0.01,
) -> FrequencyProfile:
    """Count target labels and assign anchor/tail and head/medium/tail.

    Lower bounds are closed: head >= head_threshold, medium in
    [medium_threshold, head_threshold), tail below medium_threshold.
    """
    if not samples:
        raise ValueError("cannot profile an empty sample list")
    if not (0 < medium_threshold < head_threshold < 1 and 0 < anchor_threshold < 1):
        raise ConfigError(
            "thresholds must satisfy 0 < medium < head < 1 and 0 < anchor < 1 "
            f"(got medium={medium_threshold}, anchor={anchor_threshold}, head={head_threshold})")

    counts = np.bincount([s.target for s in samples], minlength=vocabulary.size)
    if counts.size > vocabulary.size:
        raise ValueError("sample targets fall outside the vocabulary")
    proportions = counts / counts.sum()

    anchor = frozenset(int(i) for i in np.flatnonzero(proportions >= anchor_threshold))
    categories = []
    for p in proportions:
        if p >= head_threshold:
            categories.append(HEAD_CATEGORY)
        elif p >= medium_threshold:
            categories.append(MEDIUM_CATEGORY)
        else:
            categories.append(TAIL_CATEGORY)
    return FrequencyProfile(
        counts=tuple(int(c) for c in counts),
        proportions=tuple(float(p) for p in proportions),
        anchor_set=anchor,
        tail_set=frozenset(range(vocabulary.size)) - anchor,
        frequency_category=tuple(categories),
        anchor_threshold=anchor_threshold,
        head_threshold=head_threshold,
        medium_threshold=medium_threshold,
    )


def split_by_category(samples: Sequence[Sample], profile: FrequencyProfile) -> Tuple[List[Sample], List[Sample]]:
    """Partition samples by whether their target is an anchor behavior."""
    anchor_samples, tail_samples = [], []
    for sample in samples:
        (anchor_samples if sample.target in profile.anchor_set else tail_samples).append(sample)
    return anchor_samples, tail_samples


def build_balanced_testset(
    samples: Sequence[Sample], per_class: int, rng_seed: int
) -> Tuple[List[Sample], Dict[int, int]]:
    """Draw ``per_class`` samples per behavior without replacement.

    Returns the test set (grouped by behavior id) and a shortfall report
    mapping each under-represented behavior id to the count it got.
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    rng = substream(rng_seed, "balanced")
    by_label: Dict[int, List[int]] = {}
    for i, sample in enumerate(samples):
        by_label.setdefault(sample.target, []).append(i)

    chosen: List[Sample] = []
    shortfall: Dict[int, int] = {}
    for label in sorted(by_label):
        indices = by_label[label]
        if len(indices) >= per_class:
            picked = np.sort(rng.choice(len(indices), size=per_class, replace=False))
            chosen.extend(samples[indices[j]] for j in picked)
        else:
            shortfall[label] = len(indices)
            chosen.extend(samples[j] for j in indices)
    if shortfall:
        logger.warning(f"{len(shortfall)} behaviors have fewer than {per_class} samples",
                       extra={"event": "balanced_shortfall", "shortfall": shortfall})
    return chosen, shortfall


def split_users(
    log: EventLog, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> Tuple[EventLog, EventLog, EventLog]:
    """Split users into train/validation/test logs (8:1:1 by default)."""
    users = sorted(log.streams)
    order = substream(seed, "split").permutation(len(users))
    shuffled = [users[i] for i in order]
    n = len(users)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    if n >= 3:
        n_val, n_test = max(1, n_val), max(1, n_test)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"not enough users ({n}) for a train/validation/test split")
    return (
        log.subset(shuffled[:n_train]),
        log.subset(shuffled[n_train:n_train + n_val]),
        log.subset(shuffled[n_train + n_val:]),
    )


# --- synthetic data --------------------------------------------------------

def zipf_probabilities(size: int, exponent: float) -> np.ndarray:
    """Normalized p_k proportional to k^-exponent for ranks k = 1..size."""
    weights = np.arange(1, size + 1, dtype=np.float64) ** (-exponent)
    return weights / weights.sum()


# continuation probability when growing a rule cycle
_CYCLE_CONTINUE = 0.7


def build_rule_table(probs: np.ndarray, coherence: float, rng: np.random.Generator) -> np.ndarray:
    """One rule permutation per hour bucket, indexed [bucket, previous behavior].

    Every permutation is a set of cycles that start at their most frequent
    member and step to behaviors at most a factor ``coherence`` less frequent
    before closing back up. No behavior then receives more rule mass than its
    own share, which is what lets the noise draws restore the marginal exactly.
    At coherence 1 only equal-share behaviors can cycle, so rules repeat.
    """
    n = probs.size
    table = np.tile(np.arange(n), (HOUR_BUCKETS, 1))
    by_share = np.argsort(-probs, kind="stable")
    for bucket in range(HOUR_BUCKETS):
        free = np.ones(n, dtype=bool)
        for start in by_share:
            if not free[start]:
                continue
            free[start] = False
            cycle = [int(start)]
            while rng.random() < _CYCLE_CONTINUE:
                current = cycle[-1]
                candidates = np.flatnonzero(free & (probs <= probs[current]) & (coherence * probs[current] <= probs))
                if candidates.size == 0:
                    break
                nxt = int(rng.choice(candidates))
                free[nxt] = False
                cycle.append(nxt)
            for a, b in zip(cycle, cycle[1:] + cycle[:1]):
                table[bucket, a] = b
    return table


def noise_distributions(table: np.ndarray, probs: np.ndarray, coherence: float) -> np.ndarray:
    """Per-bucket distribution of non-rule draws that keeps the marginal at ``probs``.

    Behavior y gets ``(p(y) - coherence * p(pred(y))) / (1 - coherence)`` where
    pred(y) is the behavior whose rule leads to y in that bucket.
    """
    if coherence >= 1.0:
        return np.tile(probs, (HOUR_BUCKETS, 1))
    noise = np.empty((HOUR_BUCKETS, probs.size))
    for bucket in range(HOUR_BUCKETS):
        predecessor = np.empty(probs.size, dtype=np.int64)
        predecessor[table[bucket]] = np.arange(probs.size)
        noise[bucket] = np.maximum(probs - coherence * probs[predecessor], 0.0) / (1.0 - coherence)
    return noise / noise.sum(axis=1, keepdims=True)


def generate_synthetic_dataset(spec: SyntheticSpec) -> Tuple[EventLog, TransitionRules]:
    """Generate a long-tailed event log with learnable per-user transition rules.

    Behavior ranks follow Zipf(spec.zipf_exponent). Each next event follows the
    user's rule for (hour bucket, previous behavior) with probability
    ``markov_coherence``; otherwise it is drawn from the bucket's noise
    distribution. Both keep the Zipf law stationary, and first events are
    stratified across users, so every event's expected marginal is Zipf for any
    coherence. A user keeps the shared rule table with probability
    ``rule_sharing`` and gets a private one otherwise.
    """
    rng = substream(spec.rng_seed, "synthetic")
    n = spec.num_behaviors
    c = spec.markov_coherence
    vocabulary = Vocabulary(tuple(sorted(get_behavior_names(n))))

    rank_of_id = rng.permutation(n)
    probs = zipf_probabilities(n, spec.zipf_exponent)[rank_of_id]
    cdf = np.cumsum(probs)
    quantiles = (rng.permutation(spec.num_users) + rng.random(spec.num_users)) / spec.num_users
    first_behaviors = np.minimum(np.searchsorted(cdf, quantiles, side="right"), n - 1)

    shared_table = build_rule_table(probs, c, rng)
    shared_noise = np.cumsum(noise_distributions(shared_table, probs, c), axis=1)
    per_user = spec.num_samples // spec.num_users
    remainder = spec.num_samples % spec.num_users

    streams: Dict[str, Tuple[BehaviorEvent, ...]] = {}
    tables: Dict[str, np.ndarray] = {}
    for u in range(spec.num_users):
        user = f"user{u:05d}"
        if rng.random() < spec.rule_sharing:
            table, noise_cdf = shared_table, shared_noise
        else:
            table = build_rule_table(probs, c, rng)
            noise_cdf = np.cumsum(noise_distributions(table, probs, c), axis=1)
        tables[user] = table

        places = [
            get_locations_for_bucket(b)[int(rng.integers(len(get_locations_for_bucket(b))))]
            for b in range(HOUR_BUCKETS)
        ]
        n_samples = per_user + (1 if u < remainder else 0)
        if n_samples == 0:
            continue
        n_events = spec.history_length + n_samples
        times = np.sort(rng.integers(0, HOURS_PER_WEEK, size=n_events))
        follow_rule = rng.random(n_events) < c
        draws = rng.random(n_events)

        events = []
        previous = int(first_behaviors[u])
        for i, t in enumerate(times):
            day, hour = int(t) // 24 + 1, int(t) % 24
            bucket = hour_bucket(hour)
            if i == 0:
                behavior = previous
            elif follow_rule[i]:
                behavior = int(table[bucket, previous])
            else:
                behavior = min(int(np.searchsorted(noise_cdf[bucket], draws[i], side="right")), n - 1)
            events.append(BehaviorEvent(places[bucket], day, hour, behavior))
            previous = behavior
        streams[user] = tuple(events)

    log = EventLog(streams, vocabulary)
    logger.info(f"Generated {log.num_events} synthetic events for {log.num_users} users",
                extra={"event": "synthetic_generated", "behaviors": n, "seed": spec.rng_seed})
    return log, TransitionRules(tables)


def rule_oracle_predict(rules: TransitionRules, sample: Sample) -> int:
    """Predict with the hidden rule table (requires the sample's user)."""
    if sample.user is None:
        raise ValueError("oracle prediction needs the sample's user")
    previous = sample.history[-1].behavior
    return rules.lookup(sample.user, hour_bucket(sample.target_context.hour), previous)
