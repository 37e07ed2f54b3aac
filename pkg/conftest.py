import json

import numpy as np
import pytest

from behavior_data import BehaviorEvent, Sample, SyntheticSpec, TargetContext, Vocabulary
from config import ModelConfig, OptimizerConfig, PipelineConfig, RunConfig
from reference_model import init_model

LOCATIONS = ("home", "work", "gym", "cafe")


def make_sample(behaviors, target, *, day=1, start_hour=8, location="home", user=None):
    """Sample whose history events are one hour apart on the same day."""
    history = tuple(
        BehaviorEvent(location, day, min(start_hour + i, 22), int(b)) for i, b in enumerate(behaviors)
    )
    context = TargetContext(day, 23, location)
    return Sample(history=history, target=int(target), target_context=context, user=user)


def random_samples(rng, n, num_behaviors, history_length):
    samples = []
    for _ in range(n):
        day = int(rng.integers(1, 8))
        hours = np.sort(rng.integers(0, 24, size=history_length))
        history = tuple(
            BehaviorEvent(LOCATIONS[int(rng.integers(len(LOCATIONS)))], day, int(h), int(rng.integers(num_behaviors)))
            for h in hours
        )
        context = TargetContext(day, int(rng.integers(0, 24)), LOCATIONS[int(rng.integers(len(LOCATIONS)))])
        samples.append(Sample(history, int(rng.integers(num_behaviors)), context))
    return samples


def randomize(params, rng, scale=0.5):
    """Replace every array (biases and position weights included) with random values."""
    for name, array in params.arrays.items():
        params.arrays[name] = rng.normal(0.0, scale, size=array.shape)
    return params


@pytest.fixture
def tiny_vocab():
    return Vocabulary(("A", "B", "C", "D", "E"))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(embedding_dim=4, hidden_dim=5, location_buckets=3, history_length=3)


@pytest.fixture
def tiny_params(tiny_vocab, tiny_model_config):
    rng = np.random.default_rng(11)
    return randomize(init_model(tiny_vocab, tiny_model_config, rng), rng)


@pytest.fixture
def small_run_config(tmp_path):
    """Pipeline small enough to run in a few seconds on synthetic data."""
    pipeline = PipelineConfig(
        seed=5,
        anchor_threshold=0.05,
        head_threshold=0.1,
        medium_threshold=0.03,
        epsilon=0.05,
        aux_corpus_size=50,
        samples_per_class=5,
        balanced_per_class=5,
        model=ModelConfig(embedding_dim=8, hidden_dim=16, location_buckets=8, history_length=4),
        stage_a=OptimizerConfig(kind="adam", learning_rate=0.02, epochs=2, batch_size=16),
        stage_b=OptimizerConfig(learning_rate=20.0, epochs=3, batch_size=8, parameters="adapter"),
        synthetic=SyntheticSpec(num_behaviors=12, num_users=40, num_samples=2000, zipf_exponent=1.5,
                                history_length=4, rng_seed=3),
    )
    return RunConfig(pipeline=pipeline, paths={"out_dir": str(tmp_path / "run")})


@pytest.fixture
def config_file(tmp_path, small_run_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_run_config.model_dump(mode="json")), encoding="utf-8")
    return path
