import pytest
from hypothesis import given
from hypothesis import strategies as st

from reasonuq.parsing import (
    JudgeConfig,
    JudgeConfigError,
    ParseFailure,
    VoteFailure,
    extract_tagged,
    judge_correct,
    majority_vote,
    normalize_answer,
)


def test_think_and_answer():
    p = extract_tagged("<think>abc</think><answer>cat</answer>")
    assert (p.think_text, p.answer_text) == ("abc", "cat")
    assert not p.tag_violation


def test_answer_without_think():
    p = extract_tagged("<answer>42</answer>")
    assert p.think_text is None and p.answer_text == "42"


def test_unclosed_answer_fails():
    with pytest.raises(ParseFailure):
        extract_tagged("<answer>cat")


def test_last_pair_wins_and_flags_violation():
    raw = "<answer>dog</answer> hmm <answer> cat </answer>"
    p = extract_tagged(raw)
    assert p.answer_text == "cat" and p.tag_violation
    assert raw[slice(*p.answer_char_range)] == "cat"


def test_empty_answer_fails():
    with pytest.raises(ParseFailure):
        extract_tagged("<answer>   </answer>")


@given(st.text(alphabet="ab<>/answerthik ", max_size=60))
def test_answer_never_contains_delimiters(raw):
    try:
        p = extract_tagged(raw)
    except ParseFailure:
        return
    assert "<answer>" not in p.answer_text and "</answer>" not in p.answer_text


@pytest.mark.parametrize("raw, expected", [
    ("The Cat.", "cat"),
    ("firetruck", "firetruck"),
    ("  23 ", "23"),
    ("4.5", "4.5"),
    ("An Apple, please!", "apple please"),
])
def test_normalize_examples(raw, expected):
    assert normalize_answer(raw) == expected


@given(st.text(max_size=40))
def test_normalize_is_idempotent(text):
    once = normalize_answer(text)
    assert normalize_answer(once) == once


def test_judge_open_ended():
    assert judge_correct("cat", ["cat"]) == 1.0
    assert judge_correct("dog", ["cat"]) == 0.0
    assert judge_correct("", ["cat"]) == 0.0


def test_judge_vqa_soft_counts_annotators():
    gold = ["cat", "cat"] + ["dog"] * 8
    assert judge_correct("cat", gold, judge=JudgeConfig(kind="vqa_soft")) == pytest.approx(2 / 3)
    assert judge_correct("dog", gold, judge=JudgeConfig(kind="vqa_soft")) == 1.0


def test_judge_exact_mc():
    mc = JudgeConfig(kind="exact_mc")
    assert judge_correct("b", ["B"], ["A", "B", "C"], mc) == 1.0
    assert judge_correct("d", ["d"], ["A", "B", "C"], mc) == 0.0
    with pytest.raises(JudgeConfigError):
        judge_correct("b", ["b"], None, mc)


def test_unknown_judge_kind():
    with pytest.raises(JudgeConfigError):
        JudgeConfig(kind="fuzzy")


@given(st.sampled_from(["cat", "Cat", "CAT.", "the cat", " cat! "]))
def test_judge_invariant_under_surface_changes(pred):
    assert judge_correct(normalize_answer(pred), ["cat"]) == 1.0


def test_majority_examples():
    assert majority_vote(["a", "a", "a", "b"], [0, 0, 0, 0]) == ("a", 3)
    assert majority_vote(["a", "b"], [-2, -1]) == ("b", 1)
    with pytest.raises(VoteFailure):
        majority_vote([None, None], [-1, -1])


def test_majority_tie_falls_back_to_index():
    assert majority_vote(["b", "a"], [-1, -1]) == ("b", 1)


@given(st.lists(st.one_of(st.none(), st.sampled_from("abc")), min_size=1, max_size=12).filter(
    lambda xs: any(x is not None for x in xs)))
def test_majority_count_bounds(answers):
    winner, count = majority_vote(answers, [-1.0] * len(answers))
    parsed = [a for a in answers if a is not None]
    assert winner is not None
    assert -(-len(parsed) // len(set(parsed))) <= count <= len(answers)
    assert parsed.count(winner) == count
