"""Desk-scale categorical sequence predictor with SFT and DPO training.

The model pools per-event embeddings (behavior + hour bucket + day + hashed
location) with learned position weights, adds the target-context embedding,
and maps the result through one tanh layer to a softmax over behaviors.
A zero-initialized context adapter adds one logit offset per (last behavior,
target hour bucket); which arrays a stage updates is set by its optimizer
config, so preference tuning can leave the base weights frozen.

Gradients are written out by hand and checked against finite differences.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from behavior_data import Sample, Vocabulary, hour_bucket
from config import ModelConfig, OptimizerConfig
from errors import CheckpointError, TrainingDivergenceError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "behavior-tune-reference-model"
CHECKPOINT_VERSION = 2

PARAM_NAMES = (
    "behavior_emb",
    "hour_emb",
    "day_emb",
    "location_emb",
    "position_weights",
    "hidden_w",
    "hidden_b",
    "output_w",
    "output_b",
    "context_adapter",
)
ADAPTER_PARAM_NAMES = ("context_adapter",)
BASE_PARAM_NAMES = tuple(name for name in PARAM_NAMES if name not in ADAPTER_PARAM_NAMES)

Grads = Dict[str, np.ndarray]


@lru_cache(maxsize=4096)
def location_bucket(location: str, buckets: int) -> int:
    digest = hashlib.blake2b(location.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % buckets


@dataclass
class ModelParams:
    """All trainable arrays plus the vocabulary and shape config they belong to."""

    vocabulary: Vocabulary
    config: ModelConfig
    arrays: Dict[str, np.ndarray]

    def __post_init__(self):
        missing = set(PARAM_NAMES) - set(self.arrays)
        if missing:
            raise ValueError(f"missing parameter arrays: {sorted(missing)}")
        expected = _expected_shapes(self.vocabulary.size, self.config)
        for name in PARAM_NAMES:
            if self.arrays[name].shape != expected[name]:
                raise ValueError(f"{name} has shape {self.arrays[name].shape}, expected {expected[name]}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.vocabulary, self.config, {k: v.copy() for k, v in self.arrays.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def checksum(self) -> str:
        """SHA-256 over the raw float64 bytes of every array, in parameter order."""
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.arrays[name], dtype=np.float64).tobytes())
        return h.hexdigest()


def _expected_shapes(num_behaviors: int, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d_e, d_h = config.embedding_dim, config.hidden_dim
    return {
        "behavior_emb": (num_behaviors, d_e),
        "hour_emb": (4, d_e),
        "day_emb": (7, d_e),
        "location_emb": (config.location_buckets, d_e),
        "position_weights": (config.history_length,),
        "hidden_w": (d_h, d_e),
        "hidden_b": (d_h,),
        "output_w": (num_behaviors, d_h),
        "output_b": (num_behaviors,),
        "context_adapter": (num_behaviors, 4, num_behaviors),
    }


def init_model(vocabulary: Vocabulary, config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases and adapter, unit position weights."""
    if vocabulary.size < 2:
        raise ValueError("the model needs at least 2 behaviors")
    shapes = _expected_shapes(vocabulary.size, config)
    d_e, d_h = config.embedding_dim, config.hidden_dim
    fan_in = {"hidden_w": d_e, "output_w": d_h}
    arrays = {}
    for name in PARAM_NAMES:
        if name.endswith("_b") or name in ADAPTER_PARAM_NAMES:
            arrays[name] = np.zeros(shapes[name])
        elif name == "position_weights":
            arrays[name] = np.ones(shapes[name])
        else:
            scale = 1.0 / math.sqrt(fan_in.get(name, d_e))
            arrays[name] = rng.uniform(-scale, scale, size=shapes[name])
    return ModelParams(vocabulary, config, arrays)


# --- encoding --------------------------------------------------------------

@dataclass(frozen=True)
class EncodedSamples:
    """Integer index arrays for a batch of samples."""

    behaviors: np.ndarray
    hours: np.ndarray
    days: np.ndarray
    locations: np.ndarray
    ctx_hour: np.ndarray
    ctx_day: np.ndarray
    ctx_location: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def take(self, index: np.ndarray) -> "EncodedSamples":
        return EncodedSamples(*(getattr(self, f)[index] for f in self.__dataclass_fields__))


def encode_samples(samples: Sequence[Sample], num_behaviors: int, config: ModelConfig) -> EncodedSamples:
    if not samples:
        raise ValueError("cannot encode an empty batch")
    L, n_loc = config.history_length, config.location_buckets
    n = len(samples)
    behaviors = np.empty((n, L), dtype=np.int64)
    hours = np.empty((n, L), dtype=np.int64)
    days = np.empty((n, L), dtype=np.int64)
    locations = np.empty((n, L), dtype=np.int64)
    ctx = np.empty((n, 3), dtype=np.int64)
    targets = np.empty(n, dtype=np.int64)
    for i, sample in enumerate(samples):
        if len(sample.history) != L:
            raise ValueError(f"sample {i} has history length {len(sample.history)}, model expects {L}")
        for j, event in enumerate(sample.history):
            behaviors[i, j] = event.behavior
            hours[i, j] = hour_bucket(event.hour)
            days[i, j] = event.day_of_week - 1
            locations[i, j] = location_bucket(event.location, n_loc)
        c = sample.target_context
        ctx[i] = (hour_bucket(c.hour), c.day_of_week - 1, location_bucket(c.location, n_loc))
        targets[i] = sample.target
    if behaviors.max() >= num_behaviors or targets.max() >= num_behaviors:
        raise ValueError("behavior id outside the model vocabulary")
    return EncodedSamples(behaviors, hours, days, locations, ctx[:, 0], ctx[:, 1], ctx[:, 2], targets)


def _as_encoded(params: ModelParams, data: Union[EncodedSamples, Sequence[Sample]]) -> EncodedSamples:
    if isinstance(data, EncodedSamples):
        return data
    return encode_samples(data, params.vocabulary.size, params.config)


# --- forward / backward ----------------------------------------------------

@dataclass
class _Cache:
    features: np.ndarray
    pooled: np.ndarray
    hidden: np.ndarray


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(params: ModelParams, enc: EncodedSamples) -> Tuple[np.ndarray, _Cache]:
    p = params.arrays
    L = params.config.history_length
    features = (p["behavior_emb"][enc.behaviors] + p["hour_emb"][enc.hours]
                + p["day_emb"][enc.days] + p["location_emb"][enc.locations])
    pooled = (np.einsum("l,nld->nd", p["position_weights"], features) / L
              + p["hour_emb"][enc.ctx_hour] + p["day_emb"][enc.ctx_day] + p["location_emb"][enc.ctx_location])
    hidden = np.tanh(pooled @ p["hidden_w"].T + p["hidden_b"])
    logits = (hidden @ p["output_w"].T + p["output_b"]
              + p["context_adapter"][enc.behaviors[:, -1], enc.ctx_hour])
    return _log_softmax(logits), _Cache(features, pooled, hidden)


def _backward(params: ModelParams, enc: EncodedSamples, cache: _Cache, dlogits: np.ndarray) -> Grads:
    p = params.arrays
    L = params.config.history_length
    grads = {name: np.zeros_like(p[name]) for name in PARAM_NAMES}

    grads["output_w"] = dlogits.T @ cache.hidden
    grads["output_b"] = dlogits.sum(axis=0)
    np.add.at(grads["context_adapter"], (enc.behaviors[:, -1], enc.ctx_hour), dlogits)
    dz = (dlogits @ p["output_w"]) * (1.0 - cache.hidden ** 2)
    grads["hidden_w"] = dz.T @ cache.pooled
    grads["hidden_b"] = dz.sum(axis=0)
    dpooled = dz @ p["hidden_w"]

    np.add.at(grads["hour_emb"], enc.ctx_hour, dpooled)
    np.add.at(grads["day_emb"], enc.ctx_day, dpooled)
    np.add.at(grads["location_emb"], enc.ctx_location, dpooled)

    grads["position_weights"] = np.einsum("nd,nld->l", dpooled, cache.features) / L
    dfeatures = p["position_weights"][None, :, None] * dpooled[:, None, :] / L
    np.add.at(grads["behavior_emb"], enc.behaviors, dfeatures)
    np.add.at(grads["hour_emb"], enc.hours, dfeatures)
    np.add.at(grads["day_emb"], enc.days, dfeatures)
    np.add.at(grads["location_emb"], enc.locations, dfeatures)
    return grads


@dataclass(frozen=True)
class PredictionOutput:
    log_probs: np.ndarray
    embedding: np.ndarray
    predicted: int

    def confidence(self, behavior_id: int) -> float:
        """p(y|x) for the queried behavior."""
        return float(np.exp(self.log_probs[behavior_id]))


def predict_arrays(params: ModelParams, data, chunk_size: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    """Log-probabilities (n, |B|) and embeddings (n, d_h) for a batch."""
    enc = _as_encoded(params, data)
    log_probs, hidden = [], []
    for start in range(0, len(enc), chunk_size):
        lp, cache = _forward(params, enc.take(np.arange(start, min(start + chunk_size, len(enc)))))
        log_probs.append(lp)
        hidden.append(cache.hidden)
    return np.concatenate(log_probs), np.concatenate(hidden)


def predict_batch(params: ModelParams, samples) -> List[PredictionOutput]:
    """Vectorized forward; np.argmax breaks ties towards the lowest behavior id."""
    log_probs, hidden = predict_arrays(params, samples)
    predicted = np.argmax(log_probs, axis=1)
    return [PredictionOutput(log_probs[i], hidden[i], int(predicted[i])) for i in range(len(predicted))]


def forward(params: ModelParams, sample: Sample) -> PredictionOutput:
    return predict_batch(params, [sample])[0]


# --- losses ----------------------------------------------------------------

def sft_loss(params: ModelParams, batch) -> Tuple[float, Grads]:
    """Mean negative log-likelihood of the targets and its gradient."""
    enc = _as_encoded(params, batch)
    n = len(enc)
    log_probs, cache = _forward(params, enc)
    rows = np.arange(n)
    loss = -float(log_probs[rows, enc.targets].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, enc.targets] -= 1.0
    dlogits /= n
    return loss, _backward(params, enc, cache, dlogits)


@dataclass(frozen=True)
class PreferencePair:
    """A DPO pair: chosen is the ground truth, rejected a competing behavior."""

    sample: Sample
    chosen: int
    rejected: int

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError(f"chosen and rejected must differ (both {self.chosen})")


@dataclass(frozen=True)
class PreferenceBatch:
    encoded: EncodedSamples
    chosen: np.ndarray
    rejected: np.ndarray
    reference_log_probs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.encoded)

    def take(self, index: np.ndarray) -> "PreferenceBatch":
        ref = None if self.reference_log_probs is None else self.reference_log_probs[index]
        return PreferenceBatch(self.encoded.take(index), self.chosen[index], self.rejected[index], ref)


def encode_pairs(params: ModelParams, pairs: Sequence[PreferencePair]) -> PreferenceBatch:
    if not pairs:
        raise ValueError("cannot encode an empty pair list")
    enc = encode_samples([pair.sample for pair in pairs], params.vocabulary.size, params.config)
    chosen = np.array([pair.chosen for pair in pairs], dtype=np.int64)
    rejected = np.array([pair.rejected for pair in pairs], dtype=np.int64)
    return PreferenceBatch(enc, chosen, rejected)


def _as_pair_batch(params: ModelParams, pairs) -> PreferenceBatch:
    return pairs if isinstance(pairs, PreferenceBatch) else encode_pairs(params, pairs)


def _reference_log_probs(reference: ModelParams, batch: PreferenceBatch) -> np.ndarray:
    if batch.reference_log_probs is not None:
        return batch.reference_log_probs
    return predict_arrays(reference, batch.encoded)[0]


def dpo_margins(policy: ModelParams, reference: ModelParams, pairs, beta: float) -> np.ndarray:
    """Implicit reward margin beta * (chosen log-ratio - rejected log-ratio) per pair."""
    batch = _as_pair_batch(policy, pairs)
    log_probs = predict_arrays(policy, batch.encoded)[0]
    return _margins(log_probs, _reference_log_probs(reference, batch), batch, beta)


def _margins(log_probs: np.ndarray, ref_log_probs: np.ndarray, batch: PreferenceBatch, beta: float) -> np.ndarray:
    rows = np.arange(len(batch))
    chosen_ratio = log_probs[rows, batch.chosen] - ref_log_probs[rows, batch.chosen]
    rejected_ratio = log_probs[rows, batch.rejected] - ref_log_probs[rows, batch.rejected]
    return beta * (chosen_ratio - rejected_ratio)


def dpo_loss(policy: ModelParams, reference: ModelParams, pairs, beta: float) -> Tuple[float, Grads]:
    """-mean log sigmoid(margin), with the gradient w.r.t. the policy only."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    batch = _as_pair_batch(policy, pairs)
    if np.any(batch.chosen == batch.rejected):
        raise ValueError("every pair needs chosen != rejected")
    n = len(batch)
    log_probs, cache = _forward(policy, batch.encoded)
    margins = _margins(log_probs, _reference_log_probs(reference, batch), batch, beta)
    loss = float(np.logaddexp(0.0, -margins).mean())

    # d loss / d margin = -sigmoid(-margin) / n
    dmargin = -np.exp(-np.logaddexp(0.0, margins)) / n
    rows = np.arange(n)
    dlog_probs = np.zeros_like(log_probs)
    dlog_probs[rows, batch.chosen] += beta * dmargin
    dlog_probs[rows, batch.rejected] -= beta * dmargin
    dlogits = dlog_probs - np.exp(log_probs) * dlog_probs.sum(axis=1, keepdims=True)
    return loss, _backward(policy, batch.encoded, cache, dlogits)


# --- gradient check --------------------------------------------------------

def gradient_check(
    loss_fn: Callable[[ModelParams], Tuple[float, Grads]],
    params: ModelParams,
    step: float = 1e-5,
    max_entries_per_array: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error is |a - b| / max(|a| + |b|, 1e-5).
    """
    _, analytic = loss_fn(params)
    worst = 0.0
    for name in PARAM_NAMES:
        array = params.arrays[name] = np.ascontiguousarray(params.arrays[name])
        flat = array.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_array is not None and flat.size > max_entries_per_array:
            chooser = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(chooser.choice(flat.size, size=max_entries_per_array, replace=False))
        grad = analytic[name].reshape(-1)
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            plus, _ = loss_fn(params)
            flat[i] = original - step
            minus, _ = loss_fn(params)
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            error = abs(grad[i] - numeric) / max(abs(grad[i]) + abs(numeric), 1e-5)
            worst = max(worst, error)
    return worst


# --- training --------------------------------------------------------------

def learning_rate_at(step: int, total_steps: int, config: OptimizerConfig) -> float:
    """Linear warm-up over warmup_ratio of the steps, then cosine decay (or constant)."""
    warmup_steps = int(round(config.warmup_ratio * total_steps))
    if step < warmup_steps:
        return config.learning_rate * (step + 1) / warmup_steps
    if config.schedule == "constant":
        return config.learning_rate
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def trainable_names(config: OptimizerConfig) -> Tuple[str, ...]:
    if config.parameters == "adapter":
        return ADAPTER_PARAM_NAMES
    if config.parameters == "base":
        return BASE_PARAM_NAMES
    return PARAM_NAMES


class SGD:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.names = trainable_names(config)

    def apply(self, params: ModelParams, grads: Grads, lr: float) -> None:
        for name in self.names:
            params.arrays[name] -= lr * grads[name]


class Adam:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.names = trainable_names(config)
        self.t = 0
        self.m: Grads = {}
        self.v: Grads = {}

    def apply(self, params: ModelParams, grads: Grads, lr: float) -> None:
        c = self.config
        self.t += 1
        for name in self.names:
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = c.adam_beta1 * m + (1 - c.adam_beta1) * g
            v = c.adam_beta2 * v + (1 - c.adam_beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - c.adam_beta1 ** self.t)
            v_hat = v / (1 - c.adam_beta2 ** self.t)
            params.arrays[name] -= lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def make_optimizer(config: OptimizerConfig):
    return Adam(config) if config.kind == "adam" else SGD(config)


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    validation_scores: List[float] = field(default_factory=list)
    initial_score: Optional[float] = None
    best_epoch: Optional[int] = None


def train(
    params: ModelParams,
    data,
    loss_kind: str,
    config: OptimizerConfig,
    rng: np.random.Generator,
    *,
    reference: Optional[ModelParams] = None,
    beta: float = 0.1,
    validate: Optional[Callable[[ModelParams], float]] = None,
    stage: str = "train",
) -> TrainResult:
    """Mini-batch training; returns the epoch with the best validation score.

    ``data`` is a list of Samples for ``sft`` and of PreferencePairs for
    ``dpo``. The input params are never modified. The starting params compete
    as epoch -1, so a stage that only hurts validation returns them unchanged.
    Without ``validate`` the final epoch is returned.
    """
    if loss_kind not in ("sft", "dpo"):
        raise ValueError(f"unknown loss kind '{loss_kind}'")
    model = params.copy()
    result = TrainResult(params=model)
    if config.epochs == 0:
        return result

    if loss_kind == "sft":
        dataset = _as_encoded(model, data)
        step_fn = lambda p, batch: sft_loss(p, batch)  # noqa: E731
    else:
        if reference is None:
            raise ValueError("dpo training needs a reference model")
        dataset = _as_pair_batch(model, data)
        frozen = predict_arrays(reference, dataset.encoded)[0]
        dataset = PreferenceBatch(dataset.encoded, dataset.chosen, dataset.rejected, frozen)
        step_fn = lambda p, batch: dpo_loss(p, reference, batch, beta)  # noqa: E731

    n = len(dataset)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = batches_per_epoch * config.epochs
    optimizer = make_optimizer(config)
    best_score, best_params = -math.inf, None
    if validate is not None:
        result.initial_score = best_score = validate(model)
        best_params, result.best_epoch = model.copy(), -1
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_total = 0.0
        for start in range(0, n, config.batch_size):
            index = order[start:start + config.batch_size]
            loss, grads = step_fn(model, dataset.take(index))
            if not math.isfinite(loss):
                logger.error(f"{stage}: non-finite loss at step {step}", extra={"event": "divergence"})
                raise TrainingDivergenceError(f"{stage} diverged at epoch {epoch} step {step}",
                                              trace=result.loss_trace)
            result.loss_trace.append(loss)
            epoch_total += loss * len(index)
            optimizer.apply(model, grads, learning_rate_at(step, total_steps, config))
            step += 1
        if not model.is_finite():
            raise TrainingDivergenceError(f"{stage} produced non-finite parameters in epoch {epoch}",
                                          trace=result.loss_trace)
        epoch_loss = epoch_total / n
        result.epoch_losses.append(epoch_loss)

        score = validate(model) if validate is not None else None
        if score is not None:
            result.validation_scores.append(score)
            if score > best_score:
                best_score, best_params, result.best_epoch = score, model.copy(), epoch
        logger.info(f"{stage} epoch {epoch + 1}/{config.epochs}: loss={epoch_loss:.4f}"
                    + (f" val={score:.4f}" if score is not None else ""),
                    extra={"event": "epoch_end", "stage": stage, "epoch": epoch, "loss": epoch_loss})

    if best_params is None:
        result.best_epoch = config.epochs - 1
    else:
        result.params = best_params
        if result.best_epoch == -1:
            logger.warning(f"{stage}: no epoch beat the starting parameters on validation; keeping them",
                           extra={"event": "kept_initial", "stage": stage, "score": best_score})
    return result


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(params: ModelParams, path, metadata: Optional[dict] = None) -> str:
    """Write a JSON checkpoint; returns the parameter checksum."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.model_dump(),
        "vocabulary": list(params.vocabulary.names),
        "vocabulary_sha256": params.vocabulary.digest(),
        "checksum": params.checksum(),
        "metadata": metadata or {},
        "params": {
            name: {"shape": list(params.arrays[name].shape), "data": params.arrays[name].reshape(-1).tolist()}
            for name in PARAM_NAMES
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload), encoding="utf-8")
    return payload["checksum"]


def load_checkpoint(path, vocabulary: Optional[Vocabulary] = None) -> ModelParams:
    """Read a checkpoint; a given vocabulary must hash to the stored one."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has unsupported format/version")
    stored = Vocabulary(tuple(payload["vocabulary"]))
    if stored.digest() != payload["vocabulary_sha256"]:
        raise CheckpointError(f"checkpoint {path} vocabulary does not match its hash")
    if vocabulary is not None and vocabulary.digest() != payload["vocabulary_sha256"]:
        raise CheckpointError(f"checkpoint {path} was trained on a different vocabulary")
    try:
        config = ModelConfig.model_validate(payload["config"])
        arrays = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
        return ModelParams(vocabulary or stored, config, arrays)
    except Exception as e:
        logger.error(f"Checkpoint load failed: {e}")
        raise CheckpointError(f"checkpoint {path} is corrupt: {e}") from e
