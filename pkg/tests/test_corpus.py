import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exgen.corpus import (ContentConstraints, CorpusConfig, DatasetError,
                          ExerciseDocument, ExerciseFormatError,
                          InstructionTriplet, PreferencePair, Question,
                          load_dataset, parse_exercise, render_prompt,
                          serialize_exercise, synthesize_toy_corpus)

CONSTRAINTS = ContentConstraints(theme="space travel", style="narrative",
                                 word_count=24, num_questions=2,
                                 num_options=4, difficulty="basic")

DOC = ExerciseDocument(
    passage="The crew studied the distant station .",
    questions=(
        Question(stem="What was studied ?", options=("station", "comet", "moon"),
                 answer_index=0, explanation="The passage says station ."),
        Question(stem="Who studied it ?", options=("crew", "probe"),
                 answer_index=0, explanation="The crew did ."),
    ),
)


def _write_lines(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


def _triplet_row(reference=None):
    return {
        "instruction": "Write an exercise.",
        "constraints": CONSTRAINTS.to_dict(),
        "reference": reference or serialize_exercise(DOC),
    }


class TestLoadDataset:
    def test_three_wellformed_lines_in_order(self, tmp_path):
        rows = [_triplet_row() for _ in range(3)]
        rows[1]["instruction"] = "Second instruction."
        path = tmp_path / "sft.jsonl"
        _write_lines(path, rows)
        triplets = load_dataset("sft", path)
        assert len(triplets) == 3
        assert triplets[1].instruction == "Second instruction."

    def test_missing_reference_names_line_and_field(self, tmp_path):
        rows = [_triplet_row(), _triplet_row()]
        del rows[1]["reference"]
        path = tmp_path / "sft.jsonl"
        _write_lines(path, rows)
        with pytest.raises(DatasetError) as err:
            load_dataset("sft", path)
        assert err.value.line == 2
        assert "reference" in str(err.value)

    def test_chosen_equals_rejected_rejected(self, tmp_path):
        rows = [{"prompt": "p", "chosen": "same text", "rejected": "same text"}]
        path = tmp_path / "pref.jsonl"
        _write_lines(path, rows)
        with pytest.raises(DatasetError) as err:
            load_dataset("preference", path)
        assert err.value.line == 1

    def test_malformed_json_is_parse_error(self, tmp_path):
        path = tmp_path / "sft.jsonl"
        path.write_text("not json at all\n")
        with pytest.raises(DatasetError):
            load_dataset("sft", path)

    def test_empty_file_is_empty_list(self, tmp_path):
        path = tmp_path / "sft.jsonl"
        path.write_text("")
        assert load_dataset("sft", path) == []

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "pref.jsonl"
        row = json.dumps({"prompt": "p", "chosen": "a", "rejected": "b"})
        path.write_text(f"{row}\n\n{row}\n")
        assert len(load_dataset("preference", path)) == 2


class TestRenderPrompt:
    def test_deterministic(self):
        a = render_prompt("Do it.", CONSTRAINTS)
        b = render_prompt("Do it.", CONSTRAINTS)
        assert a == b

    def test_difficulty_changes_only_its_line(self):
        other = ContentConstraints(**{**CONSTRAINTS.to_dict(),
                                      "difficulty": "advanced"})
        lines_a = render_prompt("Do it.", CONSTRAINTS).splitlines()
        lines_b = render_prompt("Do it.", other).splitlines()
        diffs = [i for i, (x, y) in enumerate(zip(lines_a, lines_b)) if x != y]
        assert diffs == [6]
        assert lines_b[6] == "difficulty: advanced"

    def test_values_echoed_verbatim(self):
        text = render_prompt("Do it.", CONSTRAINTS)
        assert "num_options: 4" in text
        assert "num_questions: 2" in text


class TestParseExercise:
    def test_round_trip(self):
        assert parse_exercise(serialize_exercise(DOC)) == DOC

    def test_flat_text_parses_to_canonical(self):
        canonical = serialize_exercise(DOC)
        flat = " ".join(canonical.split())
        assert serialize_exercise(parse_exercise(flat)) == canonical

    def test_answer_letter_out_of_range(self):
        text = serialize_exercise(DOC).replace("[ANSWER] A", "[ANSWER] E", 1)
        with pytest.raises(ExerciseFormatError, match="out of range"):
            parse_exercise(text)

    def test_zero_questions_rejected(self):
        with pytest.raises(ExerciseFormatError):
            parse_exercise("[PASSAGE]\nJust a passage .")

    def test_missing_passage_section(self):
        with pytest.raises(ExerciseFormatError, match="PASSAGE"):
            parse_exercise("[Q1] What ? A. x B. y [ANSWER] A [EXPLAIN] ok")

    def test_single_option_rejected(self):
        text = "[PASSAGE]\np\n[Q1]\nstem ?\nA. only\n[ANSWER] A\n[EXPLAIN]\ne"
        with pytest.raises(ExerciseFormatError, match="option"):
            parse_exercise(text)


WORDS = st.sampled_from(["cat", "dog", "sun", "moon", "river", "blue", "stone"])
PHRASES = st.lists(WORDS, min_size=1, max_size=6).map(" ".join)


@st.composite
def documents(draw):
    questions = []
    for _ in range(draw(st.integers(1, 3))):
        options = draw(st.lists(PHRASES, min_size=2, max_size=5))
        questions.append(Question(
            stem=draw(PHRASES),
            options=tuple(options),
            answer_index=draw(st.integers(0, len(options) - 1)),
            explanation=draw(PHRASES),
        ))
    return ExerciseDocument(passage=draw(PHRASES), questions=tuple(questions))


@settings(max_examples=60, deadline=None)
@given(documents())
def test_serialize_parse_identity(doc):
    assert parse_exercise(serialize_exercise(doc)) == doc


class TestTripletInvariants:
    def test_reference_must_parse(self):
        with pytest.raises(ExerciseFormatError):
            InstructionTriplet(instruction="i", constraints=CONSTRAINTS,
                               reference="not an exercise")

    def test_preference_pair_prompt_required(self):
        with pytest.raises(ValueError):
            PreferencePair(prompt="  ", chosen="a", rejected="b")

    def test_constraint_validation(self):
        with pytest.raises(ValueError):
            ContentConstraints(theme="t", style="s", word_count=10,
                               num_questions=1, num_options=1,
                               difficulty="basic")
        with pytest.raises(ValueError):
            ContentConstraints(theme="t", style="s", word_count=0,
                               num_questions=1, num_options=2,
                               difficulty="basic")


class TestSynthesizeToyCorpus:
    def test_deterministic_bytes(self, tmp_path):
        config = CorpusConfig(num_sft=25, num_pref=10, num_prompts=5)
        paths_a = synthesize_toy_corpus(config, 7, tmp_path / "a")
        paths_b = synthesize_toy_corpus(config, 7, tmp_path / "b")
        for kind in paths_a:
            assert paths_a[kind].read_bytes() == paths_b[kind].read_bytes()

    def test_zero_marker_rate_has_no_markers(self, tmp_path):
        config = CorpusConfig(num_sft=15, num_pref=15, num_prompts=5,
                              toxic_marker_rate=0.0)
        paths = synthesize_toy_corpus(config, 3, tmp_path)
        for pair in load_dataset("preference", paths["preference"]):
            assert config.marker not in pair.rejected.split()
        for triplet in load_dataset("sft", paths["sft"]):
            assert config.marker not in triplet.reference.split()

    def test_counts_and_pair_invariant(self, tiny_corpus):
        config = tiny_corpus["config"]
        assert len(tiny_corpus["triplets"]) == config.num_sft
        assert len(tiny_corpus["pairs"]) == config.num_pref
        assert len(tiny_corpus["prompts"]) == config.num_prompts
        for pair in tiny_corpus["pairs"]:
            assert pair.chosen != pair.rejected

    def test_marker_placement(self, tiny_corpus):
        marker = tiny_corpus["config"].marker
        for pair in tiny_corpus["pairs"]:
            assert marker in pair.rejected.split()
            assert marker not in pair.chosen.split()

    def test_emitted_records_reload(self, tiny_corpus):
        # load_dataset in the fixture already validated every record; spot
        # check that references parse and prompts render non-empty.
        for triplet in tiny_corpus["triplets"][:10]:
            parse_exercise(triplet.reference)
        assert all(tiny_corpus["prompts"])

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            CorpusConfig(num_sft=0)
        with pytest.raises(ValueError):
            CorpusConfig(toxic_marker_rate=1.5)
        with pytest.raises(ValueError):
            CorpusConfig(vocab_themes=("no such theme",))
