import math

import numpy as np
import pytest

from featling.ruledsl import (EMPTY_LIST, MALFORMED, TYPE_MISMATCH, UNKNOWN_CATEGORY, UNKNOWN_FEATURE, And, Binary,
                              CatIn, Cmp, Const, FeatureMatrix, FeatureRef, MissingStrategy, NumRange, Or,
                              ParseError, RuleSet, build_feature_matrix, evaluate_rule, extract_class_blocks,
                              impute_missing, parse_rule, parse_ruleset, print_rule, referenced_features)
from featling.schema import FeatureDesc, FeatureSchema, Row
from featling.synthetic import MIXTURE_EXPR, SEQUENCE_RULES, sequence_type_schema, solution_mix_schema


def heart_blocks(response):
    return extract_class_blocks(response, ('no', 'yes'))


def test_response_blocks_parse_completely(heart_schema, heart_response):
    blocks = heart_blocks(heart_response)
    for label in ('no', 'yes'):
        assert len(blocks[label]) == 10
        ruleset = parse_ruleset(blocks[label], label, heart_schema)
        assert len(ruleset.rules) == 10
        assert ruleset.skipped == 0
        for rule in ruleset.rules:
            assert parse_rule(print_rule(rule), heart_schema) == rule


def test_no_rules_on_first_example(heart, heart_response):
    schema, _, shots = heart
    ruleset = parse_ruleset(heart_blocks(heart_response)['no'], 'no', schema)
    matrix = build_feature_matrix(ruleset, shots.rows[:1])
    assert matrix.values[0].tolist() == [0, 0, 1, 1, 1, 0, 0, 1, 1, 0]


def brute_force_no_rules(v):
    """The class-"no" response rules written out by hand."""
    return [
        40 <= v['Age'] <= 60,
        v['Sex'] == 'F',
        v['ChestPainType'] in ('ATA', 'NAP'),
        v['RestingBP'] < 140,
        v['Cholesterol'] < 200,
        v['FastingBS'] == 0,
        v['RestingECG'] == 'Normal',
        v['MaxHR'] > 140,
        v['ExerciseAngina'] == 'N',
        v['Oldpeak'] < 1.0,
    ]


def test_feature_matrix_matches_hand_written_rules(heart, heart_response):
    schema, _, shots = heart
    ruleset = parse_ruleset(heart_blocks(heart_response)['no'], 'no', schema)
    matrix = build_feature_matrix(ruleset, shots.rows)
    expected = [[float(x) for x in brute_force_no_rules(row.values)] for row in shots.rows]
    assert matrix.values.tolist() == expected


@pytest.mark.parametrize("text, expected", [
    ("Age is within range of [40, 60]", NumRange('Age', 40.0, 60.0)),
    ("- Age is within range of [60, 40]", NumRange('Age', 40.0, 60.0)),
    ("Age between 40 and 60", NumRange('Age', 40.0, 60.0)),
    ("Age is within [40, 60].", NumRange('Age', 40.0, 60.0)),
    ("RestingBP (< 140)", Cmp(FeatureRef('RestingBP'), '<', Const(140.0))),
    ("MaxHR is greater than 150", Cmp(FeatureRef('MaxHR'), '>', Const(150.0))),
    ("Oldpeak >= -0.5", Cmp(FeatureRef('Oldpeak'), '>=', Const(-0.5))),
    ("FastingBS is in [0]", Cmp(FeatureRef('FastingBS'), '=', Const(0.0))),
    ("FastingBS is in [0, 1]",
     Or((Cmp(FeatureRef('FastingBS'), '=', Const(0.0)), Cmp(FeatureRef('FastingBS'), '=', Const(1.0))))),
    ("ChestPainType is in [NAP, ATA]", CatIn('ChestPainType', ('ATA', 'NAP'))),
    ("chestpaintype is in ['asy']", CatIn('ChestPainType', ('ASY',))),
    ("ChestPainType is not in [TA]", CatIn('ChestPainType', ('TA',), negated=True)),
    ("ExerciseAngina = N", CatIn('ExerciseAngina', ('N',))),
    ('Sex is "M"', CatIn('Sex', ('M',))),
    ("Sex != F", CatIn('Sex', ('F',), negated=True)),
    ("ChestPainType is in [ATA, XYZ]", CatIn('ChestPainType', ('ATA',))),
    ("40 <= Age <= 60",
     And((Cmp(Const(40.0), '<=', FeatureRef('Age')), Cmp(FeatureRef('Age'), '<=', Const(60.0))))),
    ("Sex is in [M] and (Age > 50 or MaxHR < 120)",
     And((CatIn('Sex', ('M',)),
          Or((Cmp(FeatureRef('Age'), '>', Const(50.0)), Cmp(FeatureRef('MaxHR'), '<', Const(120.0))))))),
    ("**Cholesterol / RestingBP > 1.5**",
     Cmp(Binary('/', FeatureRef('Cholesterol'), FeatureRef('RestingBP')), '>', Const(1.5))),
])
def test_rule_spellings(heart_schema, text, expected):
    assert parse_rule(text, heart_schema) == expected


@pytest.mark.parametrize("text, reason", [
    ("Weight > 70", UNKNOWN_FEATURE),
    ("Sex > 1", TYPE_MISMATCH),
    ("Age is in [old]", TYPE_MISMATCH),
    ("Sex + 1 > 2", TYPE_MISMATCH),
    ("ChestPainType is in []", EMPTY_LIST),
    ("ChestPainType is in [XYZ]", UNKNOWN_CATEGORY),
    ("Age >", MALFORMED),
    ("Age is within range of [40, 60", MALFORMED),
    ("(Age > 40", MALFORMED),
    ("", MALFORMED),
])
def test_noise_becomes_parse_error(heart_schema, text, reason):
    parsed = parse_rule(text, heart_schema)
    assert isinstance(parsed, ParseError)
    assert parsed.reason == reason


def test_ruleset_skips_and_counts(heart_schema):
    ruleset = parse_ruleset(["- Age > 50", "- Weight > 70", "- Sex is in [M]"], 'yes', heart_schema)
    assert len(ruleset.rules) == 2
    assert ruleset.skipped == 1
    assert ruleset.errors[0].reason == UNKNOWN_FEATURE
    restored = RuleSet.from_dict(ruleset.to_dict(), heart_schema)
    assert restored == ruleset


def test_blocks_tolerate_markdown_and_case():
    response = "\n".join([
        "Sure! Here are the rules.",
        "**3 different conditions for class “Yes”:**",
        "1. Age > 50",
        "* Sex is in [M]",
        "some commentary",
        "3 different conditions for class 'no':",
        "- Age <= 50",
    ])
    blocks = extract_class_blocks(response, ('no', 'yes'))
    assert blocks == {'yes': ["1. Age > 50", "* Sex is in [M]"], 'no': ["- Age <= 50"]}


def test_printed_rules_round_trip(heart_schema):
    texts = [
        "Age is within range of [40.5, 60]",
        "ChestPainType is not in [ATA, TA]",
        "(Age + MaxHR) / 2 > 100",
        "Age - (MaxHR - RestingBP) < 0",
        "Sex is in [M] and (Age > 50 or Oldpeak >= 1.2)",
        "Age > 50 or Sex is in [F] and MaxHR < 100",
    ]
    for text in texts:
        rule = parse_rule(text, heart_schema)
        assert not isinstance(rule, ParseError), text
        assert parse_rule(print_rule(rule), heart_schema) == rule


def test_referenced_features(heart_schema):
    rule = parse_rule("Sex is in [M] and (Age + Age) / MaxHR > 1", heart_schema)
    assert referenced_features(rule) == ['Sex', 'Age', 'MaxHR']


def numeric_schema():
    return FeatureSchema((FeatureDesc('a', 'numerical'), FeatureDesc('b', 'numerical'),
                          FeatureDesc('c', 'categorical', categories=('x', 'y'))))


@pytest.mark.parametrize("strategy, fill, expected", [
    (MissingStrategy.FILL_ZERO, None, 0.0),
    (MissingStrategy.FILL_HALF, None, 0.5),
    (MissingStrategy.IMPUTE, 0.7, 0.7),
])
def test_missing_operands(strategy, fill, expected):
    schema = numeric_schema()
    rule = parse_rule("a > 1", schema)
    assert evaluate_rule(rule, Row(values={'a': None, 'b': 1.0, 'c': 'x'}), strategy, fill) == expected


def test_impute_without_fill_value_is_nan():
    schema = numeric_schema()
    rule = parse_rule("c is in [x]", schema)
    assert math.isnan(evaluate_rule(rule, Row(values={'a': 1.0, 'b': 1.0, 'c': None}), MissingStrategy.IMPUTE))


def test_kleene_logic_with_missing():
    schema = numeric_schema()
    row = Row(values={'a': None, 'b': 2.0, 'c': 'x'})
    assert evaluate_rule(parse_rule("a > 1 or b > 1", schema), row) == 1.0
    assert evaluate_rule(parse_rule("a > 1 and b > 5", schema), row) == 0.0
    assert evaluate_rule(parse_rule("a > 1 and b > 1", schema), row, MissingStrategy.FILL_HALF) == 0.5


def test_division_by_zero_is_unsatisfied():
    schema = numeric_schema()
    row = Row(values={'a': 3.0, 'b': 0.0, 'c': 'x'})
    assert evaluate_rule(parse_rule("a / b > 1", schema), row, MissingStrategy.FILL_HALF) == 0.0
    assert evaluate_rule(parse_rule("a % b == 0", schema), row, MissingStrategy.FILL_HALF) == 0.0


def test_equality_tolerates_float_noise():
    schema = numeric_schema()
    row = Row(values={'a': 0.1 + 0.2, 'b': 7.0, 'c': 'y'})
    assert evaluate_rule(parse_rule("a == 0.3", schema), row) == 1.0
    assert evaluate_rule(parse_rule("b % 2 == 1", schema), row) == 1.0
    assert evaluate_rule(parse_rule("-b % 2 == 1", schema), row) == 1.0


def test_impute_missing_uses_known_cells():
    matrix = FeatureMatrix('yes', np.array([[1.0, np.nan], [0.0, np.nan], [np.nan, np.nan], [1.0, np.nan]]))
    assert impute_missing(matrix).tolist() == [2 / 3, 0.5]


def test_sequence_rules_recognize_their_class():
    schema, _ = sequence_type_schema()
    sequences = {
        'arithmetic': [3, 7, 11, 15, 19],
        'geometric': [5, 10, 20, 40, 80],
        'fibonacci': [2, 5, 7, 12, 19],
        'collatz': [7, 22, 11, 34, 17],
    }
    for label, seq in sequences.items():
        ruleset = parse_ruleset(SEQUENCE_RULES[label], label, schema)
        assert ruleset.skipped == 0
        row = Row(values={f"num{i + 1}": float(x) for i, x in enumerate(seq)})
        # the recurrence rules (everything but collatz's parity hints) hold on their own class
        z = build_feature_matrix(ruleset, [row]).values[0]
        assert z[:2].tolist() == [1.0, 1.0], label


def test_mixture_rule_parses_and_prints():
    schema, _ = solution_mix_schema()
    rule = parse_rule(f"{MIXTURE_EXPR} > 0.5", schema)
    assert isinstance(rule, Cmp)
    assert print_rule(rule) == f"{MIXTURE_EXPR} > 0.5"


HEART_NUMERIC = ['Age', 'RestingBP', 'Cholesterol', 'FastingBS', 'MaxHR', 'Oldpeak']
PARSE_REASONS = {UNKNOWN_FEATURE, TYPE_MISMATCH, MALFORMED, EMPTY_LIST, UNKNOWN_CATEGORY}


def random_number(rng):
    if rng.random() < 0.5:
        return float(rng.integers(-50, 300))
    return round(float(rng.uniform(-10, 10)), 2)


def random_expr(rng, depth):
    if depth == 0 or rng.random() < 0.4:
        if rng.random() < 0.7:
            return FeatureRef(HEART_NUMERIC[int(rng.integers(len(HEART_NUMERIC)))])
        return Const(random_number(rng))
    op = str(rng.choice(['+', '-', '*', '/', '%']))
    return Binary(op, random_expr(rng, depth - 1), random_expr(rng, depth - 1))


def random_leaf(rng, schema):
    roll = rng.random()
    if roll < 0.4:
        op = str(rng.choice(['<', '<=', '>', '>=', '=', '!=']))
        return Cmp(random_expr(rng, 2), op, random_expr(rng, 1))
    if roll < 0.6:
        lo, hi = sorted([random_number(rng), random_number(rng)])
        return NumRange(HEART_NUMERIC[int(rng.integers(len(HEART_NUMERIC)))], lo, hi)
    feature = [f for f in schema if f.is_categorical][int(rng.integers(5))]
    picked = rng.random(len(feature.categories)) < 0.5
    picked[int(rng.integers(len(picked)))] = True
    values = tuple(c for c, keep in zip(feature.categories, picked) if keep)
    return CatIn(feature.name, values, negated=bool(rng.random() < 0.3))


def random_rule(rng, schema, depth=3):
    if depth == 0 or rng.random() < 0.5:
        return random_leaf(rng, schema)
    members = tuple(random_rule(rng, schema, depth - 1) for _ in range(int(rng.integers(2, 4))))
    return And(members) if rng.random() < 0.5 else Or(members)


def random_row(rng, schema, missing=0.3):
    values = {}
    for feature in schema:
        if rng.random() < missing:
            values[feature.name] = None
        elif feature.is_categorical:
            values[feature.name] = feature.categories[int(rng.integers(len(feature.categories)))]
        else:
            values[feature.name] = float(rng.integers(0, 4)) if rng.random() < 0.3 else random_number(rng)
    return Row(values=values)


@pytest.mark.parametrize("seed", range(5))
def test_random_rules_round_trip(heart_schema, seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        rule = random_rule(rng, heart_schema)
        text = print_rule(rule)
        assert parse_rule(text, heart_schema) == rule, text


GARBLE = list("()[]<>=!&|+-*/%,.'\"“”0123456789eE ") + ["1e999", "inf", "nan", " and ", " or ", " is in ",
                                                        " between ", "Age", "Sex", "ſ", "İ", "≥", "−", "**"]


def garble(rng, text):
    chars = list(text)
    for _ in range(int(rng.integers(1, 6))):
        roll = rng.random()
        at = int(rng.integers(len(chars) + 1))
        if roll < 0.4 and chars:
            del chars[min(at, len(chars) - 1)]
        elif roll < 0.8:
            chars.insert(at, GARBLE[int(rng.integers(len(GARBLE)))])
        else:
            chars = chars[:at]
    return ''.join(chars)


@pytest.mark.parametrize("seed", range(5))
def test_garbled_lines_never_raise(heart_schema, seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(300):
        text = garble(rng, print_rule(random_rule(rng, heart_schema)))
        parsed = parse_rule(text, heart_schema)
        if isinstance(parsed, ParseError):
            assert parsed.reason in PARSE_REASONS, text
        else:
            # whatever was accepted prints back to the same rule
            assert parse_rule(print_rule(parsed), heart_schema) == parsed, text


@pytest.mark.parametrize("text", ["Age > 1e999", "Age is within range of [1e999, 2e999]", "MaxHR is in [inf]",
                                  "Oldpeak between 0 and nan", "Cholesterol < " + "9" * 400])
def test_non_finite_literals_are_rejected(heart_schema, text):
    parsed = parse_rule(text, heart_schema)
    assert isinstance(parsed, ParseError)
    assert parsed.reason in (MALFORMED, TYPE_MISMATCH)


def test_rule_with_huge_finite_literal_survives_storage(heart_schema):
    ruleset = parse_ruleset(["- Age > 1e300", "- Age > 1e999"], 'yes', heart_schema)
    assert ruleset.skipped == 1
    assert RuleSet.from_dict(ruleset.to_dict(), heart_schema) == ruleset


@pytest.mark.parametrize("seed", range(3))
def test_growing_a_category_set_never_lowers_the_output(heart_schema, seed):
    rng = np.random.default_rng(200 + seed)
    categorical = [f for f in heart_schema if f.is_categorical]
    for _ in range(200):
        feature = categorical[int(rng.integers(len(categorical)))]
        mask = rng.random(len(feature.categories)) < 0.5
        grown = mask | (rng.random(len(mask)) < 0.5)
        small = tuple(c for c, keep in zip(feature.categories, mask) if keep)
        large = tuple(c for c, keep in zip(feature.categories, grown) if keep)
        if not small:
            continue
        row = random_row(rng, heart_schema)
        for strategy in (MissingStrategy.FILL_ZERO, MissingStrategy.FILL_HALF):
            assert evaluate_rule(CatIn(feature.name, small), row, strategy) <= \
                evaluate_rule(CatIn(feature.name, large), row, strategy)
            # "not in" admits the complement, so the order flips
            assert evaluate_rule(CatIn(feature.name, large, negated=True), row, strategy) <= \
                evaluate_rule(CatIn(feature.name, small, negated=True), row, strategy)


@pytest.mark.parametrize("strategy", [MissingStrategy.FILL_ZERO, MissingStrategy.FILL_HALF])
def test_and_is_min_and_or_is_max(heart_schema, strategy):
    rng = np.random.default_rng(7)
    for _ in range(300):
        a, b = random_rule(rng, heart_schema, 2), random_rule(rng, heart_schema, 2)
        row = random_row(rng, heart_schema)
        left, right = evaluate_rule(a, row, strategy), evaluate_rule(b, row, strategy)
        assert evaluate_rule(And((a, b)), row, strategy) == min(left, right)
        assert evaluate_rule(Or((a, b)), row, strategy) == max(left, right)
