from collections import Counter

import numpy as np
import pytest

from behavior_data import BehaviorEvent, Sample, TargetContext, Vocabulary
from errors import DataFormatError
from prompt_builder import (
    CONTEXT_SLOT,
    PLACEHOLDERS,
    TEMPLATE_TEXTS,
    TEMPLATES,
    AuxiliaryCorpus,
    AuxiliaryRecord,
    InstructionRecord,
    PromptTemplate,
    auxiliary_count,
    auxiliary_to_sample,
    export_instruction_jsonl,
    generate_auxiliary_corpus,
    load_auxiliary_corpus,
    mix_auxiliary,
    read_instruction_jsonl,
    render_prompt,
    sample_template,
)

VOCAB = Vocabulary(("Exercise", "Gaming", "Video"))


@pytest.fixture
def gaming_sample():
    history = (BehaviorEvent("home", 1, 16, 0), BehaviorEvent("home", 1, 20, 2))
    return Sample(history=history, target=1, target_context=TargetContext(1, 21, "home"))


def _behavior_records(n):
    return [InstructionRecord(instruction="i", input_text=f"prompt {i}", output_text="Video", task_tag="behavior")
            for i in range(n)]


def _corpus(n, words=3):
    return AuxiliaryCorpus(tuple(
        AuxiliaryRecord(input=" ".join(["word"] * words) + f" {i}", output="answer") for i in range(n)
    ))


def test_every_template_has_each_placeholder_once():
    for template in TEMPLATES.values():
        for slot in PLACEHOLDERS:
            assert template.text.count(slot) == 1


def test_template_rejects_missing_placeholder():
    with pytest.raises(ValueError):
        PromptTemplate(1, TEMPLATE_TEXTS[1].replace(CONTEXT_SLOT, ""))


def test_render_first_template(gaming_sample):
    record = render_prompt(gaming_sample, 1, VOCAB)
    assert record.input_text.startswith("This user has done behaviors (1,16,home,Exercise),(1,20,home,Video)")
    assert "are 1, 21, home, respectively" in record.input_text
    assert "candidate set: Exercise, Gaming, Video." in record.input_text
    assert record.input_text.endswith("The answer is")
    assert record.output_text == "Gaming"
    assert record.task_tag == "behavior"
    assert "[" not in record.input_text


def test_templates_share_the_label(gaming_sample):
    first = render_prompt(gaming_sample, 1, VOCAB)
    second = render_prompt(gaming_sample, 2, VOCAB)
    assert first.output_text == second.output_text
    assert first.input_text != second.input_text


def test_two_behavior_vocabulary_lists_both_candidates():
    vocab = Vocabulary(("Music", "Reading"))
    sample = Sample((BehaviorEvent("cafe", 3, 9, 1),), 0, TargetContext(3, 10, "cafe"))
    record = render_prompt(sample, 3, vocab)
    assert "candidate set: Music, Reading." in record.input_text


def test_target_context_can_be_dropped(gaming_sample):
    record = render_prompt(gaming_sample, 2, VOCAB, include_target_context=False)
    assert "Day of the week" not in record.input_text
    assert "1, 21, home" not in record.input_text


def test_unknown_behavior_id_is_an_error():
    sample = Sample((BehaviorEvent("home", 1, 8, 7),), 0, TargetContext(1, 9, "home"))
    with pytest.raises(KeyError):
        render_prompt(sample, 1, VOCAB)


def test_unknown_template_id(gaming_sample):
    with pytest.raises(ValueError):
        render_prompt(gaming_sample, 4, VOCAB)


def test_sample_template_is_seeded_and_uniform():
    a, b = np.random.default_rng(3), np.random.default_rng(3)
    assert [sample_template(a) for _ in range(20)] == [sample_template(b) for _ in range(20)]

    rng = np.random.default_rng(0)
    draws = Counter(sample_template(rng) for _ in range(30000))
    assert set(draws) == {1, 2, 3}
    sigma = (30000 * (1 / 3) * (2 / 3)) ** 0.5
    assert all(abs(count - 10000) <= 3 * sigma for count in draws.values())


def test_sample_template_override():
    rng = np.random.default_rng(0)
    assert {sample_template(rng, override=2) for _ in range(50)} == {2}


def test_auxiliary_count_is_floor():
    assert auxiliary_count(0.05, 1000) == 50
    assert auxiliary_count(0.1, 999) == 99
    assert auxiliary_count(0.0, 1000) == 0
    assert auxiliary_count(1.0, 7) == 7


def test_mix_without_auxiliary_reorders_only():
    records = _behavior_records(20)
    mix = mix_auxiliary(records, None, 0.0, 512, np.random.default_rng(1))
    assert mix.auxiliary_count == 0
    assert sorted(r.input_text for r in mix.records) == sorted(r.input_text for r in records)


def test_mix_adds_exact_auxiliary_fraction():
    mix = mix_auxiliary(_behavior_records(1000), _corpus(200), 0.05, 512, np.random.default_rng(2))
    tags = Counter(r.task_tag for r in mix.records)
    assert tags == {"behavior": 1000, "auxiliary": 50}
    assert not mix.with_replacement
    aux_inputs = [r.input_text for r in mix.records if r.task_tag == "auxiliary"]
    assert len(set(aux_inputs)) == 50


def test_mix_with_small_corpus_draws_with_replacement():
    mix = mix_auxiliary(_behavior_records(1000), _corpus(10), 1.0, 512, np.random.default_rng(3))
    assert mix.auxiliary_count == 1000
    assert mix.with_replacement
    assert len(mix.records) == 2000


def test_mix_filters_long_auxiliary_records():
    corpus = AuxiliaryCorpus(_corpus(5, words=2).records + _corpus(5, words=50).records)
    mix = mix_auxiliary(_behavior_records(100), corpus, 0.05, 10, np.random.default_rng(4))
    assert mix.filtered_out == 5
    assert all(len(r.input_text.split()) < 10 for r in mix.records if r.task_tag == "auxiliary")


def test_mix_needs_a_corpus_when_epsilon_positive():
    with pytest.raises(ValueError):
        mix_auxiliary(_behavior_records(10), None, 0.5, 512, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mix_auxiliary(_behavior_records(10), _corpus(3), -0.1, 512, np.random.default_rng(0))


def test_export_empty_file(tmp_path):
    path = tmp_path / "out.jsonl"
    assert export_instruction_jsonl([], path) == 0
    assert path.read_text() == ""


def test_export_round_trip(tmp_path, gaming_sample):
    records = [render_prompt(gaming_sample, t, VOCAB) for t in (1, 2, 3)]
    records.append(InstructionRecord(instruction="", input_text="How?", output_text="Like this.",
                                     task_tag="auxiliary"))
    path = tmp_path / "out.jsonl"
    export_instruction_jsonl(records, path)
    assert read_instruction_jsonl(path) == records
    first_line = path.read_text().splitlines()[0]
    assert '"input"' in first_line and '"output"' in first_line and '"task_tag"' in first_line


def test_export_mixed_batch_line_count(tmp_path):
    mix = mix_auxiliary(_behavior_records(1000), _corpus(100), 0.05, 512, np.random.default_rng(5))
    path = tmp_path / "mixed.jsonl"
    assert export_instruction_jsonl(mix.records, path) == 1050
    assert len(path.read_text().splitlines()) == 1050


def test_load_auxiliary_corpus(tmp_path):
    path = tmp_path / "aux.jsonl"
    path.write_text('{"input": "hi there", "output": "hello"}\n\n{"input": "a", "output": "b"}\n')
    corpus = load_auxiliary_corpus(path)
    assert len(corpus) == 2
    assert corpus.lengths == [3, 2]

    path.write_text('{"input": "hi", "output": "x"}\n{"prompt": "missing"}\n')
    with pytest.raises(DataFormatError) as info:
        load_auxiliary_corpus(path)
    assert info.value.line == 2


def test_generated_corpus_has_positive_lengths():
    corpus = generate_auxiliary_corpus(40, np.random.default_rng(9))
    assert len(corpus) == 40
    assert min(corpus.lengths) > 0


def test_auxiliary_projection_is_deterministic():
    record = AuxiliaryRecord(input="What should I cook tonight?", output="Try a vegetable curry.")
    first = auxiliary_to_sample(record, VOCAB, 6)
    second = auxiliary_to_sample(record, VOCAB, 6)
    assert first == second
    assert len(first.history) == 6
    assert 0 <= first.target < VOCAB.size
    keys = [e.time_key for e in first.history]
    assert keys == sorted(keys)
