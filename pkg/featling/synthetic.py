"""
Synthetic datasets (solution_mix, sequence_type) and scripted rule
responders that answer the rule-extraction prompt for them offline.
"""

import json
import logging
import math
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from featling.config import ConfigError
from featling.schema import (NUMERICAL, FeatureDesc, FeatureSchema, LabeledSet, Row, SchemaError, TaskSpec,
                             format_number)

logger = logging.getLogger(__name__)

MIN_ROWS = 20
MIX_CLASS_SHARES = {'no': 0.52, 'yes': 0.48}
SEQUENCE_CLASS_SHARES = {'arithmetic': 0.4, 'geometric': 0.4, 'fibonacci': 0.1, 'collatz': 0.1}

MIX_TASK = ("Given the volumes and concentrations of four solutions, does the percent concentration "
            "of the mixed solution over 0.5? Yes or no?")
SEQUENCE_TASK = "What is the type of following sequence? Arithmetic, geometric, fibonacci, or collatz?"

MIX_FEATURES = [f"Volume{i}" for i in range(1, 5)] + [f"Concentration{i}" for i in range(1, 5)]
MIX_SHIFTED_SHARE = 2 / 3  # distractors that reuse the mixture expression
MIXTURE_EXPR = ("(Concentration1 * Volume1 + Concentration2 * Volume2 + Concentration3 * Volume3 + "
                "Concentration4 * Volume4) / (Volume1 + Volume2 + Volume3 + Volume4)")


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _quotas(shares: Dict[str, float], n: int) -> Dict[str, int]:
    """Largest-remainder split of n rows; ties go to earlier classes."""
    exact = {c: n * p for c, p in shares.items()}
    counts = {c: int(math.floor(x)) for c, x in exact.items()}
    leftover = n - sum(counts.values())
    by_remainder = sorted(shares, key=lambda c: -(exact[c] - counts[c]))
    for c in by_remainder[:leftover]:
        counts[c] += 1
    return counts


def mixture(volumes: List[float], concentrations: List[float]) -> float:
    """Percent concentration of the mixed solution, evaluated left to right like the rule."""
    total = concentrations[0] * volumes[0]
    for c, v in zip(concentrations[1:], volumes[1:]):
        total = total + c * v
    volume = volumes[0]
    for v in volumes[1:]:
        volume = volume + v
    return total / volume


def solution_mix_schema() -> Tuple[FeatureSchema, TaskSpec]:
    features = [FeatureDesc(f"Volume{i}", NUMERICAL, f"volume of solution {i}") for i in range(1, 5)]
    features += [FeatureDesc(f"Concentration{i}", NUMERICAL, f"concentration of solution {i}") for i in range(1, 5)]
    return FeatureSchema(tuple(features)), TaskSpec(MIX_TASK, tuple(MIX_CLASS_SHARES))


def _solution_mix(n: int, rng: np.random.Generator) -> Tuple[List[Row], List[str]]:
    quotas = _quotas(MIX_CLASS_SHARES, n)
    rows, labels = [], []
    while len(rows) < n:
        volumes = [round(float(rng.uniform(0.01, 1.0)), 2) for _ in range(4)]
        concentrations = [round(float(rng.uniform(0.0, 1.0)), 2) for _ in range(4)]
        label = 'yes' if mixture(volumes, concentrations) > 0.5 else 'no'
        if quotas[label] == 0:
            continue
        quotas[label] -= 1
        values = {f"Volume{i + 1}": v for i, v in enumerate(volumes)}
        values.update({f"Concentration{i + 1}": c for i, c in enumerate(concentrations)})
        rows.append(Row(values=values))
        labels.append(label)
    return rows, labels


def sequence_type_schema() -> Tuple[FeatureSchema, TaskSpec]:
    ordinals = ['1st', '2nd', '3rd', '4th', '5th']
    features = [FeatureDesc(f"num{i + 1}", NUMERICAL, f"{ordinals[i]} number of the sequence") for i in range(5)]
    return FeatureSchema(tuple(features)), TaskSpec(SEQUENCE_TASK, tuple(SEQUENCE_CLASS_SHARES))


def collatz_step(x: int) -> int:
    return x // 2 if x % 2 == 0 else 3 * x + 1


def is_arithmetic(seq: List[int]) -> bool:
    return len({b - a for a, b in zip(seq, seq[1:])}) == 1


def is_geometric(seq: List[int]) -> bool:
    if any(x == 0 for x in seq):
        return False
    return all(b * seq[0] == a * seq[1] for a, b in zip(seq, seq[1:]))


def is_fibonacci(seq: List[int]) -> bool:
    return all(seq[i] + seq[i + 1] == seq[i + 2] for i in range(len(seq) - 2))


def is_collatz(seq: List[int]) -> bool:
    return all(seq[0] > 0 and collatz_step(a) == b for a, b in zip(seq, seq[1:]))


_SEQUENCE_CHECKS = {
    'arithmetic': is_arithmetic,
    'geometric': is_geometric,
    'fibonacci': is_fibonacci,
    'collatz': is_collatz,
}


def _draw_sequence(kind: str, rng: np.random.Generator) -> List[int]:
    if kind == 'arithmetic':
        nonzero = [x for x in range(-10, 11) if x != 0]
        a, d = int(rng.choice(nonzero)), int(rng.choice(nonzero))
        return [a + i * d for i in range(5)]
    if kind == 'geometric':
        a, r = int(rng.integers(1, 10)), int(rng.choice([2, 3]))
        return [a * r ** i for i in range(5)]
    if kind == 'fibonacci':
        seq = [int(rng.integers(1, 21)), int(rng.integers(1, 21))]
        while len(seq) < 5:
            seq.append(seq[-2] + seq[-1])
        return seq
    seq = [int(rng.integers(3, 201))]
    while len(seq) < 5:
        seq.append(collatz_step(seq[-1]))
    return seq


def _sequence_type(n: int, rng: np.random.Generator) -> Tuple[List[Row], List[str]]:
    drawn = []
    for kind, count in _quotas(SEQUENCE_CLASS_SHARES, n).items():
        while count > 0:
            seq = _draw_sequence(kind, rng)
            # exactly one definition may hold
            if sum(check(seq) for check in _SEQUENCE_CHECKS.values()) != 1:
                continue
            drawn.append((seq, kind))
            count -= 1
    order = rng.permutation(len(drawn))
    rows = [Row(values={f"num{i + 1}": float(x) for i, x in enumerate(drawn[j][0])}) for j in order]
    labels = [drawn[j][1] for j in order]
    return rows, labels


_GENERATORS = {
    'solution_mix': (solution_mix_schema, _solution_mix),
    'sequence_type': (sequence_type_schema, _sequence_type),
}


def generate_synthetic(kind: str, n: int, seed: int) -> Tuple[FeatureSchema, TaskSpec, LabeledSet]:
    """
    Generate a synthetic dataset.

    Args:
        kind: solution_mix | sequence_type
        n: number of rows (>= 20)
        seed: generator seed

    Returns:
        (FeatureSchema, TaskSpec, LabeledSet)
    """
    if kind not in _GENERATORS:
        raise SchemaError(f"Unknown synthetic dataset '{kind}' (expected one of: {', '.join(_GENERATORS)})")
    if n < MIN_ROWS:
        raise SchemaError(f"Synthetic datasets need n >= {MIN_ROWS}, got {n}")
    make_schema, make_rows = _GENERATORS[kind]
    schema, task = make_schema()
    rows, labels = make_rows(n, np.random.default_rng(seed))
    data = LabeledSet(rows=tuple(rows), labels=tuple(labels), classes=task.classes)
    logger.info(f"Generated {kind}: {n} rows, classes {data.class_counts()}")
    return schema, task, data


def write_synthetic(kind: str, n: int, seed: int, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write <kind>.csv and <kind>.json (metadata) so the dataset loads like any other."""
    schema, task, data = generate_synthetic(kind, n, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    label_column = 'label'
    records = []
    for row, label in zip(data.rows, data.labels):
        record = {name: format_number(row.values[name]) for name in schema.names}
        record[label_column] = label
        records.append(record)
    data_path = out / f"{kind}.csv"
    pd.DataFrame(records, columns=schema.names + [label_column]).to_csv(data_path, index=False)

    metadata_path = out / f"{kind}.json"
    meta = {
        'task': task.question,
        'classes': list(task.classes),
        'label_column': label_column,
        'features': schema.to_dict(),
    }
    with open(metadata_path, 'w', encoding='utf-8') as f:
        json.dump(meta, f, ensure_ascii=False, indent=2)
    return data_path, metadata_path


# ---------------------------------------------------------------------------
# Scripted responders
# ---------------------------------------------------------------------------

_SCAFFOLD_RE = re.compile(r'^(\d+) different conditions for class "(.+)":$', re.MULTILINE)

Responder = Callable[[str, Optional[int]], str]


def read_scaffold(prompt: str) -> Tuple[int, List[str]]:
    """(rules per class, class labels) requested by a rule-extraction prompt."""
    found = _SCAFFOLD_RE.findall(prompt)
    if not found:
        return 10, []
    return int(found[0][0]), [label for _, label in found]


def _format_blocks(n: int, blocks: Dict[str, List[str]]) -> str:
    lines = ["Step 1. Each feature relates to the answer through the rules below.", "",
             "Step 2. Inferred conditions for each answer class:", ""]
    for label, rules in blocks.items():
        lines.append(f'{n} different conditions for class "{label}":')
        lines.extend(f"- {rule}" for rule in rules)
        lines.append("")
    return "\n".join(lines)


def _distractor(rng: np.random.Generator, label: str) -> str:
    """A noisy rule: the mixture against a shifted threshold, or one feature against a uniform one."""
    if rng.random() < MIX_SHIFTED_SHARE:
        t = round(float(rng.uniform(0.3, 0.7)), 2)
        return f"{MIXTURE_EXPR} {'>' if label == 'yes' else '<='} {format_number(t)}"
    feature = MIX_FEATURES[int(rng.integers(len(MIX_FEATURES)))]
    t = round(float(rng.uniform(0.05, 0.95)), 2)
    return f"{feature} {'>' if rng.random() < 0.5 else '<='} {format_number(t)}"


def solution_mix_responder(prompt: str, seed: Optional[int]) -> str:
    """True mixture rule plus n-1 seeded distractors per class."""
    rng = np.random.default_rng(seed or 0)
    n, classes = read_scaffold(prompt)
    blocks = {}
    for label in classes or ['no', 'yes']:
        rules = [f"{MIXTURE_EXPR} {'>' if label == 'yes' else '<='} 0.5"]
        while len(rules) < n:
            rules.append(_distractor(rng, label))
        blocks[label] = rules
    return _format_blocks(n, blocks)


def weak_solution_mix_responder(prompt: str, seed: Optional[int]) -> str:
    """Only partial single-solution rules: each trial sees a random slice of the signal."""
    rng = np.random.default_rng(seed or 0)
    n, classes = read_scaffold(prompt)
    blocks = {}
    for label in classes or ['no', 'yes']:
        op = '>' if label == 'yes' else '<='
        picks = rng.choice(np.arange(1, 5), size=2, replace=False)
        rules = [f"Concentration{int(i)} {op} 0.5" for i in picks]
        blocks[label] = rules[:n]
    return _format_blocks(min(n, 2), blocks)


SEQUENCE_RULES = {
    'arithmetic': [
        "(num2 + (num2 - num1)) == num3",
        "(num3 + (num3 - num2)) == num4",
        "(num4 + (num4 - num3)) == num5",
        "(num3 - (num2 - num1)) == num2",
    ],
    'geometric': [
        "(num1 * (num3 / num2)) == num2",
        "(num2 * (num4 / num3)) == num3",
        "(num3 * (num2 / num1)) == num4",
    ],
    'fibonacci': [
        "(num1 + num2) == num3",
        "(num2 + num3) == num4",
        "(num3 + num4) == num5",
    ],
    'collatz': [
        "(num1 % 2 == 0 and num2 * 2 == num1) or (num1 % 2 == 1 and num2 == 3 * num1 + 1)",
        "(num2 % 2 == 0 and num3 * 2 == num2) or (num2 % 2 == 1 and num3 == 3 * num2 + 1)",
        "num2 % 2 == 0",
        "num4 % 2 == 0",
        "num1 > num2",
    ],
}


def sequence_type_responder(prompt: str, seed: Optional[int]) -> str:
    """Recurrence rules per sequence type, shuffled by seed."""
    rng = np.random.default_rng(seed or 0)
    n, classes = read_scaffold(prompt)
    blocks = {}
    for label in classes or list(SEQUENCE_RULES):
        rules = list(SEQUENCE_RULES.get(label.lower(), []))
        blocks[label] = [rules[i] for i in rng.permutation(len(rules))][:n]
    return _format_blocks(n, blocks)


RESPONDERS: Dict[str, Responder] = {
    'solution_mix': solution_mix_responder,
    'solution_mix_weak': weak_solution_mix_responder,
    'sequence_type': sequence_type_responder,
}


def get_responder(name: str) -> Responder:
    if name not in RESPONDERS:
        raise ConfigError(f"Unknown scripted responder '{name}' (expected one of: {', '.join(RESPONDERS)})")
    return RESPONDERS[name]
