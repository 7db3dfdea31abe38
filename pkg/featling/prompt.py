"""
Rule-extraction prompt and the code-generation parse prompt.

Template text is fixed; slots are filled by substitution only.
"""

import hashlib
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from featling.schema import FeatureSchema, LabeledSet, SchemaError, TaskSpec, serialize_example

PREAMBLE = (
    "You are an expert. Given the task description and the list of features and data examples, "
    "you are extracting conditions for each answer class to solve the task."
)
REASONING_INTRO = "Let's first understand the problem and solve the problem step by step."
STEP_1 = (
    "Step 1. Analyze the causal relationship or tendency between each feature and task description "
    "based on general knowledge and common sense within a short sentence."
)
STEP_2 = (
    "Step 2. Based on the above examples and Step 1's results, infer {n} different conditions per answer, "
    "following the format below. The condition should make sense, well match examples, and must match "
    "the format for [condition] according to value type."
)
CLASS_SCAFFOLD = '{n} different conditions for class "{label}":\n- [Condition]\n...'
CONDITION_FORMAT = "\n".join([
    "Format for [Condition]:",
    "For the categorical variable only,",
    "- [Feature] is in [List of categories]",
    "For the numerical variable only,",
    "- [Feature] (> or >= or < or <=) [Value]",
    "- [Feature] is within range of [Value_start, Value_end]",
])

PARSE_TEMPLATE = """Provide me a python code for function, given description below.

Function name: {function_name}

Input: Dataframe df_input

Input Features:
{feature_lines}

Output: Dataframe df_output. Create a new dataframe df_output. Each column in df_output refers whether the selected column in df_input follows the condition (1) or not (0). Be sure that the function code well matches with its feature type (i.e., numerical, categorical).

Conditions:
{conditions}

Wrap only the function part with <start> and <end>, and do not add any comments, descriptions, and package importing lines in the code."""


@dataclass(frozen=True)
class PromptConfig:
    num_rules_per_class: int = 10
    include_descriptions: bool = True
    include_reasoning_step1: bool = True


@dataclass(frozen=True)
class TrialContext:
    """Per-trial randomization: example order and the bagged feature/sample subsets."""
    example_order: Tuple[int, ...]
    feature_subset: Tuple[str, ...]
    sample_subset: Tuple[int, ...]
    seed: int = 0
    attempt: int = 0

    def ordered_samples(self) -> List[int]:
        chosen = set(self.sample_subset)
        return [i for i in self.example_order if i in chosen]

    def to_dict(self) -> Dict:
        return {
            'example_order': list(self.example_order),
            'feature_subset': list(self.feature_subset),
            'sample_subset': list(self.sample_subset),
            'seed': self.seed,
            'attempt': self.attempt,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrialContext':
        return cls(
            example_order=tuple(int(i) for i in data['example_order']),
            feature_subset=tuple(data['feature_subset']),
            sample_subset=tuple(int(i) for i in data['sample_subset']),
            seed=int(data.get('seed', 0)),
            attempt=int(data.get('attempt', 0)),
        )


def full_context(schema: FeatureSchema, shots: LabeledSet, seed: int = 0) -> TrialContext:
    """Context with every feature and every shot in stored order."""
    indices = tuple(range(len(shots)))
    return TrialContext(example_order=indices, feature_subset=tuple(schema.names),
                        sample_subset=indices, seed=seed)


def render_feature_lines(schema: FeatureSchema, subset: Optional[Sequence[str]] = None,
                         include_descriptions: bool = True) -> str:
    """
    One "- <name>: <description> (<type>)" line per feature, schema order.

    Args:
        schema: feature schema
        subset: names to render (None: all)
        include_descriptions: False gives "- <name> (<type>)"

    Returns:
        Newline-joined feature lines
    """
    selected = schema.subset(subset) if subset is not None else schema
    lines = []
    for feature in selected:
        if feature.is_categorical:
            kind = f"categorical variable with categories [{', '.join(feature.categories)}]"
        else:
            kind = "numerical variable"
        if include_descriptions and feature.description:
            lines.append(f"- {feature.name}: {feature.description} ({kind})")
        else:
            lines.append(f"- {feature.name} ({kind})")
    return "\n".join(lines)


def build_rule_prompt(task: TaskSpec, schema: FeatureSchema, shots: LabeledSet,
                      ctx: TrialContext, cfg: PromptConfig = PromptConfig()) -> str:
    if len(shots) == 0:
        raise SchemaError("Rule prompt needs at least one example")
    bad = [i for i in ctx.sample_subset if not 0 <= i < len(shots)]
    if bad:
        raise SchemaError(f"Sample indices out of range: {bad}")

    sub_schema = schema.subset(ctx.feature_subset)
    examples = [
        serialize_example(shots.rows[i], shots.labels[i], sub_schema)
        for i in ctx.ordered_samples()
    ]
    n = cfg.num_rules_per_class
    scaffold = "\n\n".join(CLASS_SCAFFOLD.format(n=n, label=label) for label in task.classes)

    parts = [
        PREAMBLE,
        "",
        f"Task: {task.question}",
        "",
        "Features:",
        render_feature_lines(schema, ctx.feature_subset, cfg.include_descriptions),
        "",
        "Examples:",
        *examples,
        "",
        REASONING_INTRO,
    ]
    if cfg.include_reasoning_step1:
        parts.append(STEP_1)
    parts += [
        STEP_2.format(n=n),
        "",
        "Format for Response:",
        scaffold,
        "",
        CONDITION_FORMAT,
        "",
        "Answer:\nStep 1." if cfg.include_reasoning_step1 else "Answer:",
    ]
    return "\n".join(parts)


def estimate_tokens(text: str) -> int:
    """Rough token count, ceil(chars / 4)."""
    return -(-len(text) // 4)


def prompt_digest(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def parse_function_name(label: str) -> str:
    return "extracting_features_" + re.sub(r'\W+', '_', label).strip('_').lower()


def build_parse_prompt(rules: Sequence[str], schema: FeatureSchema, function_name: str) -> str:
    """Code-generation prompt for external parsers. Never executed here."""
    if not rules:
        raise ValueError("Parse prompt needs at least one rule")
    conditions = []
    for rule in rules:
        text = rule.strip()
        if text.startswith('-'):
            text = text[1:].strip()
        conditions.append(f"- {text}")
    return PARSE_TEMPLATE.format(
        function_name=function_name,
        feature_lines=render_feature_lines(schema),
        conditions="\n".join(conditions),
    )
