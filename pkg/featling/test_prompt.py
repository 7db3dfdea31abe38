import pytest

from featling.conftest import read_fixture
from featling.prompt import (STEP_1, PromptConfig, TrialContext, build_parse_prompt, build_rule_prompt,
                             estimate_tokens, full_context, parse_function_name, render_feature_lines)
from featling.ruledsl import extract_class_blocks
from featling.schema import SchemaError


def test_heart_prompt_matches_golden(heart, heart_prompt):
    schema, task, shots = heart
    prompt = build_rule_prompt(task, schema, shots, full_context(schema, shots))
    assert prompt == heart_prompt


def test_without_descriptions_only_feature_lines_change(heart, heart_prompt):
    schema, task, shots = heart
    prompt = build_rule_prompt(task, schema, shots, full_context(schema, shots),
                               PromptConfig(include_descriptions=False))
    golden, plain = heart_prompt.split("\n"), prompt.split("\n")
    assert len(golden) == len(plain)
    changed = [(g, p) for g, p in zip(golden, plain) if g != p]
    assert len(changed) == len(schema)
    assert changed[0] == ("- Age: age of the patient (numerical variable)", "- Age (numerical variable)")
    assert changed[1][1] == "- Sex (categorical variable with categories [M, F])"


def test_without_reasoning_drops_step_one(heart, heart_prompt):
    schema, task, shots = heart
    prompt = build_rule_prompt(task, schema, shots, full_context(schema, shots),
                               PromptConfig(include_reasoning_step1=False))
    expected = heart_prompt.replace(STEP_1 + "\n", "", 1)
    assert expected.endswith("Answer:\nStep 1.")
    expected = expected[:-len("\nStep 1.")]
    assert prompt == expected
    assert prompt.endswith("Answer:")


def test_trial_context_orders_and_bags(heart):
    schema, task, shots = heart
    ctx = TrialContext(example_order=(3, 2, 1, 0), feature_subset=('Sex', 'Age'), sample_subset=(3, 0))
    prompt = build_rule_prompt(task, schema, shots, ctx)
    examples = prompt.split("Examples:\n")[1].split("\n\n")[0].split("\n")
    assert examples == [
        "Age is 55. Sex is M.", "Answer: yes",
        "Age is 63. Sex is M.", "Answer: no",
    ]
    assert "- Cholesterol" not in prompt
    assert TrialContext.from_dict(ctx.to_dict()) == ctx


def test_rule_prompt_rejects_bad_samples(heart):
    schema, task, shots = heart
    ctx = TrialContext(example_order=(0, 9), feature_subset=tuple(schema.names), sample_subset=(0, 9))
    with pytest.raises(SchemaError, match="out of range"):
        build_rule_prompt(task, schema, shots, ctx)
    with pytest.raises(SchemaError):
        build_rule_prompt(task, schema, shots.take([]), full_context(schema, shots.take([])))


def test_more_rules_changes_counts(heart):
    schema, task, shots = heart
    prompt = build_rule_prompt(task, schema, shots, full_context(schema, shots), PromptConfig(num_rules_per_class=3))
    assert 'infer 3 different conditions per answer' in prompt
    assert '3 different conditions for class "yes":' in prompt


def test_parse_prompt_matches_golden(heart_schema, heart_response):
    rules = extract_class_blocks(heart_response, ('no', 'yes'))['no']
    prompt = build_parse_prompt(rules, heart_schema, parse_function_name('no'))
    assert prompt == read_fixture("heart_parse_prompt_no.txt")


def test_parse_prompt_needs_rules(heart_schema):
    with pytest.raises(ValueError):
        build_parse_prompt([], heart_schema, 'f')


def test_feature_lines_follow_schema_order(heart_schema):
    lines = render_feature_lines(heart_schema, subset=['ST_Slope', 'Age']).split("\n")
    assert lines[0].startswith("- Age:")
    assert lines[1].startswith("- ST_Slope:")


def test_estimate_tokens_rounds_up():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
