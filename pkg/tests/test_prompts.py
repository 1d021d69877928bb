"""Template loading, rendering, dialogue threading, ablation nesting."""

import re

import pytest

from sleepdistill.assess import assess, render_description
from sleepdistill.prompts import (
    ABLATION_VARIANTS,
    COT_DIRECTIVE,
    QUESTION_CATEGORIES,
    DialogueState,
    MissingPlaceholderError,
    default_templates,
    estimate_units,
    load_templates,
    parse_question_lines,
    render_fewshot_cot,
    render_pr1,
    render_pr2,
    render_pr3,
    render_template,
    render_variant,
)


class TestLoader:
    def test_all_template_ids_present(self):
        ts = default_templates()
        for tid in ("Pr1", "Pr2", "Pr3", "FewShotCoT", "PlainQA", "CoTOnly",
                    "JudgeRubric", "JudgeFormatReminder", "ReportRepair"):
            assert tid in ts

    def test_declared_placeholders_must_occur(self, tmp_path):
        (tmp_path / "m.txt").write_text("no placeholders here")
        (tmp_path / "manifest.cfg").write_text(
            "[Bad]\nfile = m.txt\nplaceholders = missing_one\n"
        )
        with pytest.raises(MissingPlaceholderError):
            load_templates(tmp_path)

    def test_unbound_marker_rejected_at_render(self):
        ts = default_templates()
        with pytest.raises(MissingPlaceholderError):
            render_template(ts["Pr2"], report="text only")

    def test_empty_binding_rejected(self, exemplar):
        with pytest.raises(MissingPlaceholderError):
            render_pr2(exemplar, "")


class TestPr1:
    def test_contains_required_pieces(self, exemplar, rule_set):
        out = render_pr1(exemplar, rule_set, 100)
        assert "generate 100 similar data" in out
        assert "realistic and plausible" in out
        assert "Do not omit the HRV parameters" in out
        assert 'starts with "Sleep Quality Report:"' in out
        assert exemplar.rendered_text in out

    def test_rule_text_embedded(self, exemplar, rule_set):
        out = render_pr1(exemplar, rule_set, 5)
        assert "sdnn stays within 20 to 220 ms" in out

    def test_deterministic(self, exemplar, rule_set):
        assert render_pr1(exemplar, rule_set, 7) == render_pr1(exemplar, rule_set, 7)

    def test_count_precondition(self, exemplar, rule_set):
        with pytest.raises(ValueError):
            render_pr1(exemplar, rule_set, 0)


class TestPr2:
    def test_shape(self, exemplar, thresholds):
        desc = render_description(assess(exemplar, thresholds), exemplar)
        out = render_pr2(exemplar, desc)
        assert out.startswith("You are a sleep expert.")
        assert "SDNN: [53, 55, 54, 56, 53, 54]" in out
        assert "Comprehensive Impact Analysis" in out


class TestPr3:
    def test_instruction_content(self, exemplar):
        prompt, _ = render_pr3(exemplar, 150, DialogueState())
        assert "generate 150 questions" in prompt
        assert "specific numerical values should not be included" in prompt
        assert "start with Question 1:" in prompt

    def test_dialogue_threads_previous_reports(self, exemplar, rule_set):
        from sleepdistill.reports import generate_report, sample_profiles

        second = generate_report(sample_profiles(1, seed=77)[0], rule_set)
        prompt1, state = render_pr3(exemplar, 10, DialogueState())
        state = state.append("assistant", "Question 1: Is my sleep okay?")
        prompt2, state = render_pr3(second, 10, state)
        assert state.turns[0] == ("user", prompt1)
        assert state.turns[1][0] == "assistant"
        assert state.turns[2] == ("user", prompt2)

    def test_budget_evicts_oldest_whole_turns(self, exemplar, rule_set):
        from sleepdistill.reports import generate_report, sample_profiles

        second = generate_report(sample_profiles(1, seed=78)[0], rule_set)
        # Each prompt is ~570 units; a 700-unit budget cannot hold two.
        _, state = render_pr3(exemplar, 10, DialogueState(token_budget=700))
        state = state.append("assistant", "Question 1: A?")
        prompt2, state = render_pr3(second, 10, state)
        assert state.turns == ((("user", prompt2)),)
        assert state.units() <= 700

    def test_question_exemplars_carry_no_digits(self, exemplar):
        prompt, _ = render_pr3(exemplar, 150, DialogueState())
        instructions = prompt[: prompt.index("Sleep Quality Report:")]
        questions = re.findall(
            r"\b(?:Is|Will|Do|Does|How|What|Should|Can)\b[^?.]*\?", instructions
        )
        assert questions, "expected question exemplars in the instruction text"
        for q in questions:
            assert not re.search(r"\d", q), q


class TestFewShot:
    def test_embeds_all_three_categories_once(self, exemplar):
        out = render_fewshot_cot(exemplar, "Is my SDNN value normal?")
        for cat in QUESTION_CATEGORIES:
            assert out.count(cat.exemplar_text) == 1

    def test_question_comes_last(self, exemplar):
        out = render_fewshot_cot(exemplar, "Is my SDNN value normal?")
        assert out.rstrip().endswith("Question: Is my SDNN value normal?")
        assert out.index("Sleep Quality Report:") < out.index(
            "Question: Is my SDNN value normal?"
        )

    def test_directive_present(self, exemplar):
        assert COT_DIRECTIVE in render_fewshot_cot(exemplar, "Is my sleep okay?")

    def test_empty_question_rejected(self, exemplar):
        with pytest.raises(ValueError):
            render_fewshot_cot(exemplar, "  ")


class TestAblationNesting:
    QUESTION = "Is my deep sleep sufficient?"

    def render_all(self, exemplar):
        return {
            v: render_variant(v, exemplar.rendered_text, self.QUESTION)
            for v in ABLATION_VARIANTS
        }

    def test_plain_omits_directive_and_examples(self, exemplar):
        out = self.render_all(exemplar)
        assert COT_DIRECTIVE not in out["PlainQA"]
        for cat in QUESTION_CATEGORIES:
            assert cat.exemplar_text not in out["PlainQA"]

    def test_cot_only_keeps_directive_omits_examples(self, exemplar):
        out = self.render_all(exemplar)
        assert COT_DIRECTIVE in out["CoTOnly"]
        for cat in QUESTION_CATEGORIES:
            assert cat.exemplar_text not in out["CoTOnly"]

    def test_fewshot_keeps_both(self, exemplar):
        out = self.render_all(exemplar)
        assert COT_DIRECTIVE in out["FewShotCoT"]
        for cat in QUESTION_CATEGORIES:
            assert cat.exemplar_text in out["FewShotCoT"]

    def test_content_nesting(self, exemplar):
        out = self.render_all(exemplar)
        # Report and question from the plain variant appear verbatim upward.
        for bigger in ("CoTOnly", "FewShotCoT"):
            assert exemplar.rendered_text in out[bigger]
            assert f"Question: {self.QUESTION}" in out[bigger]
        assert COT_DIRECTIVE in out["FewShotCoT"]

    def test_unknown_variant_rejected(self, exemplar):
        with pytest.raises(ValueError):
            render_variant("Pr1", exemplar.rendered_text, self.QUESTION)


class TestDialogueState:
    def test_roles_must_alternate(self):
        with pytest.raises(ValueError):
            DialogueState((("user", "a"), ("user", "b")))
        with pytest.raises(ValueError):
            DialogueState((("assistant", "a"),))

    def test_system_only_first(self):
        with pytest.raises(ValueError):
            DialogueState((("user", "a"), ("system", "s")))
        state = DialogueState((("system", "s"), ("user", "a")))
        assert state.turns[0][0] == "system"

    def test_system_turn_survives_eviction(self):
        state = DialogueState((("system", "keep me"),), token_budget=30)
        for i in range(5):
            state = state.append("user", f"question number {i} " + "pad " * 10)
            state = state.append("assistant", f"answer {i}")
        assert state.turns[0] == ("system", "keep me")

    def test_unit_estimate(self):
        assert estimate_units("one two three") == pytest.approx(3.9)


class TestQuestionParsing:
    def test_parses_conforming_lines_and_counts_drops(self):
        text = (
            "Question 1: Is my SDNN value normal?\n"
            "not a question line\n"
            "Question 2: How is my deep sleep?\n"
            "\n"
            "Q3: malformed prefix\n"
        )
        questions, dropped = parse_question_lines(text)
        assert questions == ["Is my SDNN value normal?", "How is my deep sleep?"]
        assert dropped == 2
