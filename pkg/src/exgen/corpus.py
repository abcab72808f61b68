"""Dataset schemas, record serialization, and the synthetic toy corpus.

Three record kinds flow through the training pipeline:

* instruction triplets (instruction, constraints, reference exercise) for
  supervised fine-tuning,
* preference pairs (prompt, chosen, rejected) for reward modeling,
* bare prompts for the PPO stage.

Dataset files are UTF-8 JSON-lines, one record per line.  Exercises are
serialized to a flat marker format (``[PASSAGE]``, ``[Q1]``, ``A.`` option
labels, ``[ANSWER] B``, ``[EXPLAIN]``) that survives whitespace
normalization, so model output can be parsed back into a structured
document even though the tokenizer discards line breaks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DIFFICULTY_LEVELS = ("basic", "intermediate", "advanced")

#: Synthetic stand-in for a toxic word.  The corpus generator plants it in
#: low-quality responses so that toxicity is measurable at desk scale.
DEFAULT_MARKER = "toxmark"

DEFAULT_INSTRUCTION = (
    "Generate an English reading comprehension exercise with a passage, "
    "questions, answer keys, and explanations."
)


class DatasetError(ValueError):
    """A dataset file could not be parsed.

    ``line`` is the 1-based line number of the offending record when the
    problem is local to one record.
    """

    def __init__(self, message: str, *, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}: "
        if line is not None:
            prefix += f"line {line}: "
        super().__init__(prefix + message)


class ExerciseFormatError(ValueError):
    """Exercise text does not follow the marker serialization."""


@dataclass(frozen=True)
class ContentConstraints:
    """Content controls attached to every generation request.

    All numeric fields are strictly positive and ``num_options`` is at
    least 2; ``difficulty`` is one of :data:`DIFFICULTY_LEVELS`.
    """

    theme: str
    style: str
    word_count: int
    num_questions: int
    num_options: int
    difficulty: str

    def __post_init__(self) -> None:
        if not self.theme or not self.style:
            raise ValueError("theme and style must be non-empty")
        for name in ("word_count", "num_questions", "num_options"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.num_options < 2:
            raise ValueError(f"num_options must be >= 2, got {self.num_options}")
        if self.difficulty not in DIFFICULTY_LEVELS:
            raise ValueError(
                f"difficulty must be one of {DIFFICULTY_LEVELS}, got {self.difficulty!r}"
            )

    def to_dict(self) -> dict:
        return {
            "theme": self.theme,
            "style": self.style,
            "word_count": self.word_count,
            "num_questions": self.num_questions,
            "num_options": self.num_options,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ContentConstraints":
        missing = [k for k in ("theme", "style", "word_count", "num_questions",
                               "num_options", "difficulty") if k not in data]
        if missing:
            raise KeyError(missing[0])
        return cls(
            theme=data["theme"],
            style=data["style"],
            word_count=int(data["word_count"]),
            num_questions=int(data["num_questions"]),
            num_options=int(data["num_options"]),
            difficulty=data["difficulty"],
        )


def render_prompt(instruction: str, constraints: ContentConstraints) -> str:
    """Render the generation prompt: instruction, then one constraint per line.

    The key order is fixed (theme, style, word_count, num_questions,
    num_options, difficulty) so identical inputs always produce identical
    prompt text.
    """
    if not instruction:
        raise ValueError("instruction must be non-empty")
    lines = [
        instruction,
        f"theme: {constraints.theme}",
        f"style: {constraints.style}",
        f"word_count: {constraints.word_count}",
        f"num_questions: {constraints.num_questions}",
        f"num_options: {constraints.num_options}",
        f"difficulty: {constraints.difficulty}",
    ]
    return "\n".join(lines)


@dataclass(frozen=True)
class Question:
    stem: str
    options: tuple[str, ...]
    answer_index: int
    explanation: str

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValueError("a question needs at least 2 options")
        if not (0 <= self.answer_index < len(self.options)):
            raise ValueError(
                f"answer_index {self.answer_index} out of range for "
                f"{len(self.options)} options"
            )


@dataclass(frozen=True)
class ExerciseDocument:
    """Structured exercise: passage plus at least one question."""

    passage: str
    questions: tuple[Question, ...]

    def __post_init__(self) -> None:
        if not self.passage.strip():
            raise ValueError("passage must be non-empty")
        if not self.questions:
            raise ValueError("questions list must be non-empty")

    def to_dict(self) -> dict:
        return {
            "passage": self.passage,
            "questions": [
                {
                    "stem": q.stem,
                    "options": list(q.options),
                    "answer_index": q.answer_index,
                    "explanation": q.explanation,
                }
                for q in self.questions
            ],
        }


def answer_letter(index: int) -> str:
    if not (0 <= index < 26):
        raise ValueError(f"answer index {index} cannot be labelled A-Z")
    return chr(ord("A") + index)


def serialize_exercise(doc: ExerciseDocument) -> str:
    """Serialize a document to the canonical marker format."""
    lines = ["[PASSAGE]", doc.passage.strip()]
    for qnum, q in enumerate(doc.questions, start=1):
        lines.append(f"[Q{qnum}]")
        lines.append(q.stem.strip())
        for i, option in enumerate(q.options):
            lines.append(f"{answer_letter(i)}. {option.strip()}")
        lines.append(f"[ANSWER] {answer_letter(q.answer_index)}")
        lines.append("[EXPLAIN]")
        lines.append(q.explanation.strip())
    return "\n".join(lines)


_SECTION_RE = re.compile(r"^\[(PASSAGE|Q\d+|ANSWER|EXPLAIN)\]$")
_OPTION_LABEL_RE = re.compile(r"^([A-Z])\.$")


def parse_exercise(text: str) -> ExerciseDocument:
    """Parse marker-formatted exercise text into an :class:`ExerciseDocument`.

    Parsing is whitespace-insensitive: the text is split into tokens, so
    both the canonical newline form and detokenized single-line model
    output are accepted.  Answer letters resolve to 0-based indices.

    Raises :class:`ExerciseFormatError` when the passage section is
    missing, a question has fewer than 2 options, the answer letter is out
    of range, or there are no questions.
    """
    tokens = text.split()
    try:
        start = tokens.index("[PASSAGE]")
    except ValueError:
        raise ExerciseFormatError("missing [PASSAGE] section") from None
    tokens = tokens[start + 1:]

    # Cut the stream at section markers, keeping the markers.
    sections: list[tuple[str, list[str]]] = [("PASSAGE", [])]
    for tok in tokens:
        m = _SECTION_RE.match(tok)
        if m:
            sections.append((m.group(1), []))
        else:
            sections[-1][1].append(tok)

    passage = " ".join(sections[0][1])
    if not passage:
        raise ExerciseFormatError("empty passage")

    questions: list[Question] = []
    i = 1
    while i < len(sections):
        name, body = sections[i]
        if not name.startswith("Q"):
            raise ExerciseFormatError(f"unexpected [{name}] outside a question")
        stem_words: list[str] = []
        options: list[str] = []
        current: list[str] | None = None
        for tok in body:
            m = _OPTION_LABEL_RE.match(tok)
            if m:
                expected = answer_letter(len(options))
                if m.group(1) != expected:
                    raise ExerciseFormatError(
                        f"option labels out of order: expected {expected}., got {tok}"
                    )
                if current is not None:
                    options[-1] = " ".join(current)
                current = []
                options.append("")
            elif current is None:
                stem_words.append(tok)
            else:
                current.append(tok)
        if current is not None:
            options[-1] = " ".join(current)
        if len(options) < 2:
            raise ExerciseFormatError(
                f"question {len(questions) + 1} has {len(options)} options, need >= 2"
            )

        i += 1
        if i >= len(sections) or sections[i][0] != "ANSWER":
            raise ExerciseFormatError(f"question {len(questions) + 1} missing [ANSWER]")
        answer_body = sections[i][1]
        if len(answer_body) != 1 or not re.fullmatch(r"[A-Z]", answer_body[0]):
            raise ExerciseFormatError(
                f"[ANSWER] must carry a single letter, got {' '.join(answer_body)!r}"
            )
        answer_index = ord(answer_body[0]) - ord("A")
        if answer_index >= len(options):
            raise ExerciseFormatError(
                f"answer letter {answer_body[0]} out of range for {len(options)} options"
            )

        i += 1
        if i >= len(sections) or sections[i][0] != "EXPLAIN":
            raise ExerciseFormatError(f"question {len(questions) + 1} missing [EXPLAIN]")
        explanation = " ".join(sections[i][1])
        i += 1

        questions.append(
            Question(
                stem=" ".join(stem_words),
                options=tuple(options),
                answer_index=answer_index,
                explanation=explanation,
            )
        )

    if not questions:
        raise ExerciseFormatError("exercise has zero questions")
    return ExerciseDocument(passage=passage, questions=tuple(questions))


@dataclass(frozen=True)
class InstructionTriplet:
    """One SFT unit: instruction, content constraints, reference exercise."""

    instruction: str
    constraints: ContentConstraints
    reference: str

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")
        if not self.reference.strip():
            raise ValueError("reference must be non-empty")
        parse_exercise(self.reference)  # must be a valid exercise

    def prompt(self) -> str:
        return render_prompt(self.instruction, self.constraints)


@dataclass(frozen=True)
class PreferencePair:
    """One reward-model unit: a prompt with a chosen and a rejected response."""

    prompt: str
    chosen: str
    rejected: str

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise ValueError("prompt must be non-empty")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")


def _triplet_from_json(data: dict) -> InstructionTriplet:
    return InstructionTriplet(
        instruction=data["instruction"],
        constraints=ContentConstraints.from_dict(data["constraints"]),
        reference=data["reference"],
    )


def _pair_from_json(data: dict) -> PreferencePair:
    return PreferencePair(
        prompt=data["prompt"], chosen=data["chosen"], rejected=data["rejected"]
    )


def load_dataset(kind: str, path: str | Path):
    """Load a JSONL dataset file.

    ``kind`` selects the schema: ``"sft"`` yields
    :class:`InstructionTriplet` records, ``"preference"`` yields
    :class:`PreferencePair` records.  Records come back in file order;
    blank lines are skipped; an empty file is an empty list.  Malformed
    JSON, missing fields, and invariant violations raise
    :class:`DatasetError` carrying the line number.
    """
    if kind not in ("sft", "preference"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    build = _triplet_from_json if kind == "sft" else _pair_from_json
    records = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed record: {exc.msg}",
                                   line=lineno, path=str(path)) from exc
            try:
                records.append(build(data))
            except KeyError as exc:
                raise DatasetError(f"missing required field {exc.args[0]!r}",
                                   line=lineno, path=str(path)) from exc
            except (ValueError, ExerciseFormatError) as exc:
                raise DatasetError(str(exc), line=lineno, path=str(path)) from exc
    return records


def save_dataset(kind: str, records: Sequence, path: str | Path) -> None:
    """Write records to a JSONL file (inverse of :func:`load_dataset`)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            if kind == "sft":
                row = {
                    "instruction": rec.instruction,
                    "constraints": rec.constraints.to_dict(),
                    "reference": rec.reference,
                }
            elif kind == "preference":
                row = {"prompt": rec.prompt, "chosen": rec.chosen, "rejected": rec.rejected}
            else:
                raise ValueError(f"unknown dataset kind {kind!r}")
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_prompts(path: str | Path) -> list[str]:
    """Load the PPO prompt file (JSONL with a single ``prompt`` field)."""
    prompts = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                prompts.append(data["prompt"])
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed record: {exc.msg}",
                                   line=lineno, path=str(path)) from exc
            except KeyError as exc:
                raise DatasetError("missing required field 'prompt'",
                                   line=lineno, path=str(path)) from exc
    return prompts


def save_prompts(prompts: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps({"prompt": p}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Synthetic toy corpus
# ---------------------------------------------------------------------------

_THEME_BANK: dict[str, dict[str, tuple[str, ...]]] = {
    "space travel": {
        "nouns": ("crew", "station", "rocket", "comet", "orbit", "signal",
                  "module", "probe"),
        "verbs": ("studied", "launched", "tracked", "repaired", "observed"),
        "adjectives": ("distant", "silent", "bright", "frozen", "vast"),
    },
    "ocean life": {
        "nouns": ("reef", "current", "whale", "kelp", "tide", "shell",
                  "diver", "lagoon"),
        "verbs": ("followed", "circled", "measured", "sheltered", "watched"),
        "adjectives": ("deep", "calm", "shimmering", "salty", "hidden"),
    },
    "ancient history": {
        "nouns": ("temple", "scroll", "merchant", "empire", "road", "coin",
                  "scribe", "harbor"),
        "verbs": ("recorded", "traded", "guarded", "restored", "mapped"),
        "adjectives": ("ancient", "crumbling", "famous", "quiet", "golden"),
    },
    "city parks": {
        "nouns": ("fountain", "bench", "gardener", "lawn", "path", "kiosk",
                  "statue", "pond"),
        "verbs": ("planted", "cleaned", "painted", "crossed", "visited"),
        "adjectives": ("shady", "green", "busy", "narrow", "peaceful"),
    },
    "mountain hiking": {
        "nouns": ("trail", "summit", "ridge", "cabin", "valley", "glacier",
                  "hiker", "pass"),
        "verbs": ("climbed", "marked", "reached", "descended", "explored"),
        "adjectives": ("steep", "rocky", "misty", "remote", "windy"),
    },
    "desert storms": {
        "nouns": ("dune", "caravan", "oasis", "wind", "canyon", "tent",
                  "scout", "mirage"),
        "verbs": ("crossed", "survived", "predicted", "sheltered", "charted"),
        "adjectives": ("dry", "endless", "sudden", "scorching", "pale"),
    },
}

DEFAULT_THEMES = tuple(_THEME_BANK)

_STYLES = ("narrative", "expository", "descriptive")

_INSTRUCTIONS = (
    DEFAULT_INSTRUCTION,
    "Write an English reading comprehension exercise containing a short "
    "passage followed by multiple choice questions with explanations.",
    "Create a reading comprehension task: one passage, multiple choice "
    "questions, answer keys, and a short explanation for each answer.",
)


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs for :func:`synthesize_toy_corpus`.

    ``toxic_marker_rate`` controls marker contamination: it is the
    probability that an SFT reference carries marker tokens (so a tuned
    model emits them at a measurable rate) and scales how many markers are
    planted in each rejected response.  At 0.0 no marker appears anywhere.
    """

    num_sft: int = 2000
    num_pref: int = 200
    num_prompts: int = 200
    vocab_themes: tuple[str, ...] = DEFAULT_THEMES
    toxic_marker_rate: float = 0.3
    marker: str = DEFAULT_MARKER

    def __post_init__(self) -> None:
        if min(self.num_sft, self.num_pref, self.num_prompts) <= 0:
            raise ValueError("record counts must be positive")
        if not 0.0 <= self.toxic_marker_rate <= 1.0:
            raise ValueError("toxic_marker_rate must lie in [0, 1]")
        unknown = [t for t in self.vocab_themes if t not in _THEME_BANK]
        if unknown:
            raise ValueError(f"unknown themes: {unknown}; available: {list(_THEME_BANK)}")
        if not self.vocab_themes:
            raise ValueError("vocab_themes must be non-empty")


def _sentence(bank: dict[str, tuple[str, ...]], rng: np.random.Generator) -> list[str]:
    adj = rng.choice
    words = ["the", str(adj(bank["adjectives"])), str(adj(bank["nouns"])),
             str(adj(bank["verbs"])), "the", str(adj(bank["adjectives"])),
             str(adj(bank["nouns"]))]
    if rng.random() < 0.5:
        words += ["near", "the", str(adj(bank["nouns"]))]
    words[0] = "The"
    return words + ["."]


def _make_passage(bank, word_count: int, rng: np.random.Generator) -> str:
    # Periods are standalone tokens so whitespace tokenization keeps
    # sentence boundaries visible to the model and to corrupt_reference.
    words: list[str] = []
    while len([w for w in words if w != "."]) < word_count:
        words.extend(_sentence(bank, rng))
    return " ".join(words)


def _make_document(constraints: ContentConstraints,
                   rng: np.random.Generator) -> ExerciseDocument:
    bank = _THEME_BANK[constraints.theme]
    passage = _make_passage(bank, constraints.word_count, rng)
    questions = []
    for _ in range(constraints.num_questions):
        nouns = list(bank["nouns"])
        rng.shuffle(nouns)
        options = tuple(nouns[: constraints.num_options])
        answer_index = int(rng.integers(0, constraints.num_options))
        verb = str(rng.choice(bank["verbs"]))
        stem = f"What was {verb} in the passage ?"
        explanation = (
            f"The passage mentions the {options[answer_index]} so option "
            f"{answer_letter(answer_index)} is correct ."
        )
        questions.append(Question(stem=stem, options=options,
                                  answer_index=answer_index,
                                  explanation=explanation))
    return ExerciseDocument(passage=passage, questions=tuple(questions))


def _random_constraints(config: CorpusConfig, rng: np.random.Generator) -> ContentConstraints:
    return ContentConstraints(
        theme=str(rng.choice(list(config.vocab_themes))),
        style=str(rng.choice(_STYLES)),
        word_count=int(rng.integers(18, 37)),
        num_questions=int(rng.integers(1, 3)),
        num_options=int(rng.integers(3, 5)),
        difficulty=str(rng.choice(list(DIFFICULTY_LEVELS))),
    )


def inject_marker(text: str, marker: str, count: int, rng: np.random.Generator) -> str:
    """Insert ``count`` marker tokens at random word positions."""
    words = text.split()
    for _ in range(max(1, count)):
        pos = int(rng.integers(0, len(words) + 1))
        words.insert(pos, marker)
    return " ".join(words)


def corrupt_reference(reference: str, marker: str, marker_rate: float,
                      rng: np.random.Generator) -> str:
    """Derive a low-quality response from a clean reference.

    Fixed recipe: shuffle the sentence-level chunks, truncate to 60% of the
    words, then (when ``marker_rate`` > 0) inject at least one marker
    token.  Deterministic for a fixed generator state.
    """
    sentences = [s.strip() for s in reference.split(" . ") if s.strip()]
    order = rng.permutation(len(sentences))
    shuffled = " . ".join(sentences[i] for i in order)
    words = shuffled.split()
    keep = max(4, int(len(words) * 0.6))
    truncated = " ".join(words[:keep])
    if marker_rate > 0:
        n = 1 + int(rng.binomial(6, marker_rate))
        truncated = inject_marker(truncated, marker, n, rng)
    return truncated


def synthesize_toy_corpus(config: CorpusConfig, seed: int,
                          out_dir: str | Path) -> dict[str, Path]:
    """Generate the sft / preference / ppo-prompt files.

    Byte-identical output for a fixed (config, seed).  Preference pairs
    corrupt a clean reference into the rejected side; chosen responses
    never contain the marker, and every rejected response carries at least
    one when ``toxic_marker_rate`` > 0.

    Returns a mapping from file kind to the written path.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    triplets = []
    for _ in range(config.num_sft):
        constraints = _random_constraints(config, rng)
        doc = _make_document(constraints, rng)
        reference = serialize_exercise(doc)
        if config.toxic_marker_rate > 0 and rng.random() < config.toxic_marker_rate:
            count = 2 + int(rng.integers(0, 3))
            passage = inject_marker(doc.passage, config.marker, count, rng)
            reference = serialize_exercise(
                ExerciseDocument(passage=passage, questions=doc.questions)
            )
        triplets.append(
            InstructionTriplet(
                instruction=str(rng.choice(_INSTRUCTIONS)),
                constraints=constraints,
                reference=reference,
            )
        )

    pairs = []
    for _ in range(config.num_pref):
        constraints = _random_constraints(config, rng)
        doc = _make_document(constraints, rng)
        chosen = serialize_exercise(doc)
        rejected = corrupt_reference(chosen, config.marker,
                                     config.toxic_marker_rate, rng)
        if rejected == chosen:  # tiny references can survive corruption
            rejected = " ".join(chosen.split()[:-1])
        prompt = render_prompt(str(rng.choice(_INSTRUCTIONS)), constraints)
        pairs.append(PreferencePair(prompt=prompt, chosen=chosen, rejected=rejected))

    prompts = [
        render_prompt(str(rng.choice(_INSTRUCTIONS)), _random_constraints(config, rng))
        for _ in range(config.num_prompts)
    ]

    paths = {
        "sft": out_dir / "sft.jsonl",
        "preference": out_dir / "preference.jsonl",
        "ppo_prompts": out_dir / "ppo_prompts.jsonl",
    }
    save_dataset("sft", triplets, paths["sft"])
    save_dataset("preference", pairs, paths["preference"])
    save_prompts(prompts, paths["ppo_prompts"])
    return paths
