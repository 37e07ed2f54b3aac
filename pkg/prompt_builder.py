"""Instruction prompts for next-behavior prediction and auxiliary-task mixing."""

import hashlib
import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from behavior_catalog import get_behavior_domain, get_supported_behaviors
from behavior_data import HOURS_PER_WEEK, BehaviorEvent, Sample, TargetContext, Vocabulary
from errors import DataFormatError

logger = logging.getLogger(__name__)

HISTORY_SLOT = "[HistoryHere]"
CONTEXT_SLOT = "[next-intent-info]"
CANDIDATE_SLOT = "[CansHere]"
OUTPUT_SLOT = "[Output]"
PLACEHOLDERS = (HISTORY_SLOT, CONTEXT_SLOT, CANDIDATE_SLOT, OUTPUT_SLOT)

TASK_DEFINITION = "Predict the next behavior the user will do from the candidate set."
ROLE_INSTRUCTION = (
    "You are a smart mobile phone assistant that infers the user's behavior preferences "
    "from the user's historical behavior sequence."
)
CONTEXT_SENTENCE = (
    f"Day of the week, the hour, and the place of the next behavior are {CONTEXT_SLOT}, respectively. "
)

TEMPLATE_TEXTS = {
    1: (f"This user has done behaviors {HISTORY_SLOT} in the previous. {CONTEXT_SENTENCE}"
        f"Choose the answer from the following behavior candidate set: {CANDIDATE_SLOT}. "
        f"The answer is {OUTPUT_SLOT}."),
    2: (f"The user's historical behavior information sequence is: {HISTORY_SLOT}. {CONTEXT_SENTENCE}"
        f"Given the following behavior candidate set: {CANDIDATE_SLOT}, recommend one intention for "
        f"this user to do next. The intent you recommend is {OUTPUT_SLOT}."),
    3: (f"The behavior history of this user is: {HISTORY_SLOT}. {CONTEXT_SENTENCE}"
        f"Recommend a next intention for this user to do from the following behavior candidate set: "
        f"{CANDIDATE_SLOT}. The recommendation is {OUTPUT_SLOT}."),
}

AUX_LOCATIONS = ("chat", "forum", "notes", "search")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    text: str

    def __post_init__(self):
        if self.template_id not in TEMPLATE_TEXTS:
            raise ValueError(f"template_id must be one of {sorted(TEMPLATE_TEXTS)}")
        for slot in PLACEHOLDERS:
            if self.text.count(slot) != 1:
                raise ValueError(f"template {self.template_id} must contain {slot} exactly once")

    def fill(self, history: str, context: Optional[str], candidates: str) -> str:
        """Render everything before the output slot."""
        text = self.text
        if context is None:
            text = text.replace(CONTEXT_SENTENCE, "")
        else:
            text = text.replace(CONTEXT_SLOT, context)
        text = text.replace(HISTORY_SLOT, history).replace(CANDIDATE_SLOT, candidates)
        return text.split(OUTPUT_SLOT)[0].rstrip()


TEMPLATES = {tid: PromptTemplate(tid, text) for tid, text in TEMPLATE_TEXTS.items()}


class InstructionRecord(BaseModel):
    """One instruction-tuning example (export names: instruction/input/output/task_tag)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    instruction: str
    input_text: str = Field(alias="input")
    output_text: str = Field(alias="output")
    task_tag: Literal["behavior", "auxiliary"]


class AuxiliaryRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input: str
    output: str

    @property
    def length(self) -> int:
        """Whitespace token estimate of the whole exchange."""
        return len(self.input.split()) + len(self.output.split())


@dataclass(frozen=True)
class AuxiliaryCorpus:
    records: Tuple[AuxiliaryRecord, ...]

    def __post_init__(self):
        for i, record in enumerate(self.records):
            if record.length <= 0:
                raise ValueError(f"auxiliary record {i} is empty")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def lengths(self) -> List[int]:
        return [record.length for record in self.records]


@dataclass(frozen=True)
class AuxiliaryMix:
    records: List[InstructionRecord]
    auxiliary_count: int
    with_replacement: bool
    filtered_out: int


# --- rendering -------------------------------------------------------------

def format_event(event: BehaviorEvent, vocabulary: Vocabulary) -> str:
    return f"({event.day_of_week},{event.hour},{event.location},{vocabulary.name_of(event.behavior)})"


def format_context(context: TargetContext) -> str:
    return f"{context.day_of_week}, {context.hour}, {context.location}"


def render_prompt(
    sample: Sample, template_id: int, vocabulary: Vocabulary, *, include_target_context: bool = True
) -> InstructionRecord:
    """Render a sample through one of the three instruction templates."""
    template = TEMPLATES.get(template_id)
    if template is None:
        raise ValueError(f"unknown template id {template_id}")
    history = ",".join(format_event(event, vocabulary) for event in sample.history)
    context = format_context(sample.target_context) if include_target_context else None
    candidates = ", ".join(vocabulary.names)
    return InstructionRecord(
        instruction=f"{TASK_DEFINITION} {ROLE_INSTRUCTION}",
        input_text=template.fill(history, context, candidates),
        output_text=vocabulary.name_of(sample.target),
        task_tag="behavior",
    )


def sample_template(rng: np.random.Generator, override: Optional[int] = None) -> int:
    """Uniform draw over the template ids unless a single template is forced."""
    if override is not None:
        if override not in TEMPLATES:
            raise ValueError(f"unknown template id {override}")
        return override
    return int(rng.integers(1, len(TEMPLATES) + 1))


def render_samples(
    samples: Sequence[Sample],
    vocabulary: Vocabulary,
    rng: np.random.Generator,
    *,
    template_override: Optional[int] = None,
    include_target_context: bool = True,
) -> List[InstructionRecord]:
    return [
        render_prompt(sample, sample_template(rng, template_override), vocabulary,
                      include_target_context=include_target_context)
        for sample in samples
    ]


# --- auxiliary task --------------------------------------------------------

def auxiliary_count(epsilon: float, num_behavior_records: int) -> int:
    """floor(epsilon * n), computed exactly on the decimal value of epsilon."""
    return int(Fraction(str(epsilon)) * num_behavior_records)


def sample_auxiliary(
    corpus: Optional[AuxiliaryCorpus], count: int, max_len: int, rng: np.random.Generator
) -> Tuple[List[AuxiliaryRecord], bool, int]:
    """Draw ``count`` auxiliary records of length <= max_len.

    Returns (records, drawn_with_replacement, number_filtered_out).
    """
    if count == 0:
        return [], False, 0
    if corpus is None or len(corpus) == 0:
        raise ValueError("auxiliary data requested but the corpus is empty")
    eligible = [record for record in corpus.records if record.length <= max_len]
    filtered_out = len(corpus) - len(eligible)
    if not eligible:
        raise ValueError(f"no auxiliary record is at most {max_len} tokens long")
    with_replacement = count > len(eligible)
    picks = rng.choice(len(eligible), size=count, replace=with_replacement)
    if with_replacement:
        logger.warning(f"Auxiliary corpus has {len(eligible)} eligible records for {count} draws; "
                       f"sampling with replacement", extra={"event": "aux_with_replacement"})
    return [eligible[int(i)] for i in picks], with_replacement, filtered_out


def mix_auxiliary(
    behavior_records: Sequence[InstructionRecord],
    corpus: Optional[AuxiliaryCorpus],
    epsilon: float,
    max_len: int,
    rng: np.random.Generator,
) -> AuxiliaryMix:
    """Add floor(epsilon * |behavior_records|) auxiliary records and shuffle."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if epsilon > 0 and (corpus is None or len(corpus) == 0):
        raise ValueError("epsilon > 0 needs a non-empty auxiliary corpus")
    count = auxiliary_count(epsilon, len(behavior_records))
    drawn, with_replacement, filtered_out = sample_auxiliary(corpus, count, max_len, rng)
    auxiliary = [
        InstructionRecord(instruction="", input_text=r.input, output_text=r.output, task_tag="auxiliary")
        for r in drawn
    ]
    combined = list(behavior_records) + auxiliary
    order = rng.permutation(len(combined))
    return AuxiliaryMix([combined[int(i)] for i in order], count, with_replacement, filtered_out)


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def auxiliary_to_sample(record: AuxiliaryRecord, vocabulary: Vocabulary, history_length: int) -> Sample:
    """Project an auxiliary text pair onto the sample space of the surrogate model.

    Tokens of the input hash to history events and the output hashes to the
    target, so the pair is deterministic and carries no behavior signal.
    """
    tokens = record.input.split() or [record.input]
    timed = []
    for i in range(history_length):
        d = _digest(f"{i}\x1f{tokens[i % len(tokens)]}")
        t = (d >> 16) % HOURS_PER_WEEK
        timed.append((t, i, d))
    timed.sort()
    history = tuple(
        BehaviorEvent(AUX_LOCATIONS[(d >> 40) % len(AUX_LOCATIONS)], t // 24 + 1, t % 24, d % vocabulary.size)
        for t, _, d in timed
    )
    d = _digest(record.output)
    t = (d >> 16) % HOURS_PER_WEEK
    context = TargetContext(t // 24 + 1, t % 24, AUX_LOCATIONS[(d >> 40) % len(AUX_LOCATIONS)])
    return Sample(history=history, target=d % vocabulary.size, target_context=context, user="auxiliary")


_QUESTIONS = (
    "I want to spend more time on {topic} this week. Any tips?",
    "What is a good way to fit {topic} into a busy {part} routine?",
    "My friend says {topic} is a waste of time. How would you respond?",
    "Can you suggest a simple plan for {topic} on weekends?",
    "How do I stop {topic} from taking over my {part}?",
)
_ANSWERS = (
    "Start small: reserve a short slot for {topic} in your {part} and keep it consistent for a week.",
    "Pair {topic} with something you already do every {part}, so it becomes a habit rather than a chore.",
    "It depends on your goals. {Domain} activities like {topic} are worthwhile when they fit your priorities.",
    "Set a clear limit, track how long {topic} takes each {part}, and adjust after a few days.",
)
_PARTS = ("morning", "afternoon", "evening", "day")


def generate_auxiliary_corpus(size: int, rng: np.random.Generator) -> AuxiliaryCorpus:
    """Conversation-style (question, answer) pairs about everyday activities."""
    topics = get_supported_behaviors()
    records = []
    for _ in range(size):
        topic = topics[int(rng.integers(len(topics)))]
        part = _PARTS[int(rng.integers(len(_PARTS)))]
        fields = {"topic": topic.lower(), "part": part, "Domain": get_behavior_domain(topic).capitalize()}
        records.append(AuxiliaryRecord(
            input=_QUESTIONS[int(rng.integers(len(_QUESTIONS)))].format(**fields),
            output=_ANSWERS[int(rng.integers(len(_ANSWERS)))].format(**fields),
        ))
    return AuxiliaryCorpus(tuple(records))


# --- files -----------------------------------------------------------------

def load_auxiliary_corpus(path) -> AuxiliaryCorpus:
    """Read an auxiliary JSONL file with ``input`` and ``output`` fields."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = AuxiliaryRecord.model_validate_json(line)
            except ValidationError as e:
                raise DataFormatError(f"invalid auxiliary record: {e.errors()[0]['msg']}",
                                      path=str(path), line=line_no) from e
            if record.length == 0:
                raise DataFormatError("empty auxiliary record", path=str(path), line=line_no)
            records.append(record)
    return AuxiliaryCorpus(tuple(records))


def write_auxiliary_corpus(corpus: AuxiliaryCorpus, path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in corpus.records:
            handle.write(record.model_dump_json() + "\n")
    return len(corpus)


def export_instruction_jsonl(records: Sequence[InstructionRecord], path) -> int:
    """Write instruction/input/output/task_tag objects, one per line."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record.model_dump(by_alias=True), ensure_ascii=False) + "\n")
    except OSError as e:
        logger.error(f"Instruction export failed: {e}")
        raise OSError(f"cannot write instruction file {path}: {e}") from e
    logger.info(f"Exported {len(records)} instruction records to {path}",
                extra={"event": "instructions_exported", "count": len(records)})
    return len(records)


def read_instruction_jsonl(path) -> List[InstructionRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(InstructionRecord.model_validate_json(line))
            except ValidationError as e:
                raise DataFormatError("invalid instruction record", path=str(path), line=line_no) from e
    return records
