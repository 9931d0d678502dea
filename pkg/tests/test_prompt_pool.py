import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vadprompt.errors import EmptyClassList, MalformedFile, MissingClass, NoQuestions
from vadprompt.prompt_pool import (
    UCF_CRIME_CLASSES,
    UCF_SEEN_CLASSES,
    GuidingQuestion,
    PromptPool,
    dumps_pool,
    load_pool,
    load_preset_pool,
    normalize_question,
    parse_generated_pool,
    read_pool,
    render_full_pool_prompt,
    render_generation_metaprompt,
    save_pool,
    write_pool,
)

UCF_WITH_NORMAL = UCF_CRIME_CLASSES + ["Normal Event"]


def test_generation_metaprompt_states_range_and_class():
    text = render_generation_metaprompt(["Arson"], 3, 5)
    assert "Arson" in text
    assert "3-5" in text
    assert "Yes/No" in text
    assert "Step 1" in text and "Step 2" in text


def test_generation_metaprompt_rejects_empty_list():
    with pytest.raises(EmptyClassList):
        render_generation_metaprompt([], 3, 5)


def test_generation_metaprompt_bad_range():
    with pytest.raises(ValueError):
        render_generation_metaprompt(["Arson"], 4, 2)


def test_generation_metaprompt_lists_each_ucf_class_once():
    text = render_generation_metaprompt(UCF_WITH_NORMAL, 3, 5)
    assert len(UCF_WITH_NORMAL) == 14
    for name in UCF_WITH_NORMAL:
        assert text.count(name) == 1, name


def test_generation_metaprompt_is_pure():
    assert render_generation_metaprompt(["A", "B"], 3, 5) == render_generation_metaprompt(["A", "B"], 3, 5)


def test_parse_generated_pool_example():
    pool = parse_generated_pool(
        "Arson:\n1. Is there any fire or smoke?\n2. Do you see deliberate ignition?", ["Arson"]
    )
    assert pool.to_dict() == {"Arson": ["Is there any fire or smoke?", "Do you see deliberate ignition?"]}


def test_parse_generated_pool_missing_class():
    with pytest.raises(MissingClass) as info:
        parse_generated_pool("Arson:\n1. Is there fire?", ["Arson", "Robbery"])
    assert info.value.name == "Robbery"


def test_parse_generated_pool_header_without_questions():
    with pytest.raises(NoQuestions):
        parse_generated_pool("Arson:\n1. Is there fire?\nRobbery:\n", ["Arson", "Robbery"])


def test_parse_generated_pool_tolerates_markdown_and_case():
    text = (
        "Here are the questions.\n\n"
        "**1. ARSON:**\n"
        "- Is there any fire or smoke\n"
        "- *Is someone pouring liquid?*\n"
        "Some commentary without a question mark\n"
        "### road   accidents\n"
        "1) Do vehicles collide?\n"
        "\nStep 2: Summarize\nGroup 1: Hazards\n1. Ignored?\n"
    )
    pool = parse_generated_pool(text, ["Arson", "Road Accidents"])
    assert pool.classes == ["Arson", "Road Accidents"]
    assert pool.to_dict()["Arson"] == ["Is there any fire or smoke?", "Is someone pouring liquid?"]
    assert pool.to_dict()["Road Accidents"] == ["Do vehicles collide?"]


def test_normalize_question_appends_mark():
    assert normalize_question("3. Is there smoke.") == "Is there smoke?"
    assert normalize_question("Q2: **Do you see a gun?**") == "Do you see a gun?"


def test_parse_of_canonical_serialization_round_trips():
    pool = load_preset_pool("ucf_crime_q")
    assert parse_generated_pool(dumps_pool(pool), pool.classes) == pool


def test_parse_save_parse_is_idempotent():
    text = "Arson:\n1. fire visible\n2. Is smoke rising?\nStealing:\n- Is an item hidden?\n"
    once = parse_generated_pool(text, ["Arson", "Stealing"])
    twice = parse_generated_pool(save_pool(once).decode(), ["Arson", "Stealing"])
    assert once == twice


def test_ucf_preset_shape():
    pool = load_preset_pool("ucf_crime_q")
    assert pool.classes == UCF_WITH_NORMAL
    assert all(len(pool.questions[c]) == 3 for c in pool.classes)
    assert len(pool) == 42


def test_save_load_round_trip_ucf():
    pool = load_preset_pool("ucf_crime_q")
    assert load_pool(save_pool(pool)) == pool


def test_load_duplicate_header_reports_line():
    with pytest.raises(MalformedFile) as info:
        load_pool("## Arson\nIs there fire?\n\n## arson\nIs there smoke?\n")
    assert info.value.line == 4


def test_load_empty_class():
    with pytest.raises(NoQuestions):
        load_pool("## Arson\nIs there fire?\n## Robbery\n")


def test_load_question_before_header():
    with pytest.raises(MalformedFile) as info:
        load_pool("Is there fire?\n## Arson\n")
    assert info.value.line == 1


def test_write_pool_emits_json_mirror(tmp_path):
    pool = PromptPool.from_dict({"Arson": ["Is there fire?"], "Robbery": ["Is a weapon shown?"]})
    path = write_pool(pool, tmp_path / "pool.txt")
    mirror = json.loads(path.with_suffix(".json").read_text())
    assert mirror == pool.to_dict()
    assert read_pool(path) == pool
    assert read_pool(path.with_suffix(".json")) == pool


def test_pool_rejects_duplicates_and_empty_classes():
    with pytest.raises(MalformedFile):
        PromptPool(["A", "a"], {"A": [GuidingQuestion("x?")], "a": [GuidingQuestion("y?")]})
    with pytest.raises(NoQuestions):
        PromptPool(["A"], {"A": []})


def test_subset_unknown_class():
    pool = load_preset_pool("ucf_crime_q")
    with pytest.raises(MissingClass):
        pool.subset(["Arson", "Piracy"])


def test_seen_preset_is_subset_of_ucf():
    assert set(UCF_SEEN_CLASSES) <= set(UCF_CRIME_CLASSES)
    assert len(UCF_SEEN_CLASSES) == 7


def test_full_pool_prompt_contains_every_question_once():
    pool = load_preset_pool("ucf_crime_q")
    text = render_full_pool_prompt(pool)
    questions = [q.text for q in pool.flat()]
    assert len(questions) == 42
    for q in questions:
        assert text.count(q) == 1, q
    assert "raw JSON" in text
    assert '"final_label"' in text
    assert "THREE class-specific" in text


def test_full_pool_prompt_single_class():
    pool = PromptPool.from_dict({"Robbery": ["Is a weapon shown?", "Is property taken by force?"]})
    text = render_full_pool_prompt(pool)
    assert "1) Robbery\nQ1: Is a weapon shown?\nQ2: Is property taken by force?" in text
    assert "2)" not in text
    assert "final_label" in text


_names = st.text(alphabet=st.characters(whitelist_categories=("Lu", "Ll")), min_size=1, max_size=12)
_questions = st.text(alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"), whitelist_characters=" ,'"),
                     min_size=1, max_size=40).map(lambda s: s.strip()).filter(bool).map(lambda s: s + "?")


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(_names, st.lists(_questions, min_size=1, max_size=5), min_size=1, max_size=6))
def test_save_load_round_trip_property(mapping):
    keys = {" ".join(k.split()).casefold() for k in mapping}
    if len(keys) != len(mapping):
        return
    pool = PromptPool.from_dict(mapping)
    assert load_pool(save_pool(pool)) == pool
