"""
Dataset and task metadata: loading, splitting, k-shot sampling and
serialization of rows into the "<feature> is <value>." text form.
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CATEGORICAL = 'categorical'
NUMERICAL = 'numerical'
KINDS = (CATEGORICAL, NUMERICAL)

MISSING_TOKEN = 'unknown'
STRICT_MAX_MISSING = 0.2  # strict ingestion drops columns above this missing share

Value = Union[str, float, None]  # None is Missing


class SchemaError(ValueError):
    """Malformed metadata, data file or dataset operation."""


class InsufficientDataError(SchemaError):
    """Not enough rows of some class for a split or k-shot quota."""


@dataclass(frozen=True)
class FeatureDesc:
    name: str
    kind: str
    description: Optional[str] = None
    categories: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise SchemaError("Feature name must be non-empty")
        if self.kind not in KINDS:
            raise SchemaError(f"Feature '{self.name}': unknown kind '{self.kind}'")
        if self.kind == CATEGORICAL and not self.categories:
            raise SchemaError(f"Categorical feature '{self.name}' needs a category list")
        if self.kind == NUMERICAL and self.categories:
            raise SchemaError(f"Numerical feature '{self.name}' must not carry categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def match_category(self, value: str) -> Optional[str]:
        """Return the canonical category for a case-insensitive match, or None."""
        wanted = value.strip().lower()
        for category in self.categories:
            if category.lower() == wanted:
                return category
        return None

    def to_dict(self) -> Dict:
        data = {'name': self.name, 'kind': self.kind}
        if self.description:
            data['description'] = self.description
        if self.categories:
            data['categories'] = list(self.categories)
        return data


@dataclass(frozen=True)
class FeatureSchema:
    features: Tuple[FeatureDesc, ...]

    def __post_init__(self):
        seen = set()
        for feature in self.features:
            if feature.name in seen:
                raise SchemaError(f"Duplicate feature name '{feature.name}'")
            seen.add(feature.name)

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[FeatureDesc]:
        return iter(self.features)

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    def get(self, name: str) -> FeatureDesc:
        for feature in self.features:
            if feature.name == name:
                return feature
        raise SchemaError(f"Unknown feature '{name}'")

    def lookup(self, name: str) -> Optional[FeatureDesc]:
        """Case-insensitive lookup; None when absent."""
        wanted = name.strip().lower()
        for feature in self.features:
            if feature.name.lower() == wanted:
                return feature
        return None

    def subset(self, names: Sequence[str]) -> 'FeatureSchema':
        """Features named in `names`, kept in schema order."""
        wanted = set(names)
        unknown = wanted - set(self.names)
        if unknown:
            raise SchemaError(f"Unknown feature(s): {', '.join(sorted(unknown))}")
        return FeatureSchema(tuple(f for f in self.features if f.name in wanted))

    def to_dict(self) -> List[Dict]:
        return [f.to_dict() for f in self.features]


@dataclass(frozen=True)
class TaskSpec:
    question: str
    classes: Tuple[str, ...]

    def __post_init__(self):
        if len(self.classes) < 2:
            raise SchemaError("A task needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise SchemaError(f"Duplicate class labels in {list(self.classes)}")


@dataclass(frozen=True)
class Row:
    values: Mapping[str, Value]
    raw: Mapping[str, str] = field(default_factory=dict)  # source text of numeric cells


@dataclass(frozen=True)
class LabeledSet:
    rows: Tuple[Row, ...]
    labels: Tuple[str, ...]
    classes: Tuple[str, ...]
    unknown_values: int = 0

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise SchemaError(f"{len(self.rows)} rows but {len(self.labels)} labels")
        for label in self.labels:
            if label not in self.classes:
                raise SchemaError(f"Label '{label}' is not one of {list(self.classes)}")

    def __len__(self) -> int:
        return len(self.rows)

    def class_indices(self, label: str) -> List[int]:
        return [i for i, y in enumerate(self.labels) if y == label]

    def class_counts(self) -> Dict[str, int]:
        counts = Counter(self.labels)
        return {c: counts.get(c, 0) for c in self.classes}

    def take(self, indices: Sequence[int]) -> 'LabeledSet':
        return LabeledSet(
            rows=tuple(self.rows[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
            classes=self.classes,
        )

    def label_indices(self) -> np.ndarray:
        """Labels as integer class positions."""
        position = {c: i for i, c in enumerate(self.classes)}
        return np.array([position[y] for y in self.labels], dtype=np.int64)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def parse_metadata(meta: Dict) -> Tuple[FeatureSchema, TaskSpec, str]:
    """
    Build schema, task and label column name from a metadata dict.

    Args:
        meta: {"task", "classes", "label_column", "features": [...]}

    Returns:
        (FeatureSchema, TaskSpec, label_column)
    """
    if not isinstance(meta, dict):
        raise SchemaError("Metadata must be a JSON object")
    for key in ('task', 'classes', 'label_column', 'features'):
        if key not in meta:
            raise SchemaError(f"Metadata is missing '{key}'")
    if not isinstance(meta['features'], list) or not meta['features']:
        raise SchemaError("Metadata 'features' must be a non-empty list")

    features = []
    for entry in meta['features']:
        if not isinstance(entry, dict) or 'name' not in entry or 'kind' not in entry:
            raise SchemaError(f"Malformed feature entry: {entry!r}")
        features.append(FeatureDesc(
            name=str(entry['name']),
            kind=str(entry['kind']),
            description=entry.get('description') or None,
            categories=tuple(str(c) for c in entry.get('categories') or ()),
        ))

    schema = FeatureSchema(tuple(features))
    task = TaskSpec(question=str(meta['task']), classes=tuple(str(c) for c in meta['classes']))
    label_column = str(meta['label_column'])
    if label_column in schema.names:
        raise SchemaError(f"Label column '{label_column}' is also a feature")
    return schema, task, label_column


def load_metadata(metadata_path: Union[str, Path]) -> Tuple[FeatureSchema, TaskSpec, str]:
    path = Path(metadata_path)
    if not path.exists():
        raise SchemaError(f"Metadata file '{path}' not found")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"Malformed metadata {path}: {e}")
    return parse_metadata(meta)


def _read_cells(data_path: Path) -> Tuple[List[str], List[List[str]]]:
    try:
        frame = pd.read_csv(data_path, header=None, dtype=str, keep_default_na=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise SchemaError(f"Data file '{data_path}' is empty")
    except pd.errors.ParserError as e:
        raise SchemaError(f"Malformed CSV {data_path}: {e}")

    header = [str(h).strip() for h in frame.iloc[0].tolist()]
    body = [[str(cell) for cell in row] for row in frame.iloc[1:].itertuples(index=False)]
    return header, body


def _parse_number(text: str, feature: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(f"Line {line}: '{text}' is not a number for feature '{feature}'")
    if not math.isfinite(value):
        raise SchemaError(f"Line {line}: non-finite value '{text}' for feature '{feature}'")
    return value


def build_labeled_set(schema: FeatureSchema, task: TaskSpec, header: List[str],
                      body: List[List[str]], label_column: str) -> LabeledSet:
    """Type raw CSV cells per schema."""
    counts = Counter(header)
    duplicates = sorted(name for name, n in counts.items() if n > 1)
    if duplicates:
        raise SchemaError(f"Duplicate column(s): {', '.join(duplicates)}")
    allowed = set(schema.names) | {label_column}
    unknown = [name for name in header if name not in allowed]
    if unknown:
        raise SchemaError(f"Unknown column(s): {', '.join(unknown)}")
    absent = [name for name in schema.names + [label_column] if name not in header]
    if absent:
        raise SchemaError(f"Missing column(s): {', '.join(absent)}")

    position = {name: i for i, name in enumerate(header)}
    rows, labels = [], []
    unknown_values = 0

    for offset, cells in enumerate(body):
        line = offset + 2  # 1-based, after the header
        label = cells[position[label_column]].strip()
        if label not in task.classes:
            raise SchemaError(f"Line {line}: label '{label}' is not one of {list(task.classes)}")

        values: Dict[str, Value] = {}
        raw: Dict[str, str] = {}
        for feature in schema:
            text = cells[position[feature.name]].strip()
            if text == '':
                values[feature.name] = None
            elif feature.is_categorical:
                category = feature.match_category(text)
                if category is None:
                    logger.warning(f"Line {line}: unknown category '{text}' for '{feature.name}', treated as missing")
                    unknown_values += 1
                values[feature.name] = category
            else:
                values[feature.name] = _parse_number(text, feature.name, line)
                raw[feature.name] = text
        rows.append(Row(values=values, raw=raw))
        labels.append(label)

    return LabeledSet(rows=tuple(rows), labels=tuple(labels), classes=task.classes,
                      unknown_values=unknown_values)


def apply_strict(schema: FeatureSchema, data: LabeledSet) -> Tuple[FeatureSchema, LabeledSet]:
    """Drop columns with more than 20% missing, then rows with any remaining missing value."""
    n = len(data)
    keep = []
    for feature in schema:
        missing = sum(1 for row in data.rows if row.values[feature.name] is None)
        if n and missing / n > STRICT_MAX_MISSING:
            logger.info(f"Strict mode: dropping column '{feature.name}' ({missing}/{n} missing)")
        else:
            keep.append(feature.name)
    if not keep:
        raise SchemaError("Strict mode dropped every feature")
    schema = schema.subset(keep)

    rows, labels = [], []
    for row, label in zip(data.rows, data.labels):
        if any(row.values[name] is None for name in keep):
            continue
        rows.append(Row(values={k: row.values[k] for k in keep},
                        raw={k: v for k, v in row.raw.items() if k in keep}))
        labels.append(label)
    logger.info(f"Strict mode: kept {len(rows)}/{n} rows")
    return schema, LabeledSet(rows=tuple(rows), labels=tuple(labels), classes=data.classes,
                              unknown_values=data.unknown_values)


def load_dataset(data_path: Union[str, Path], metadata_path: Union[str, Path],
                 strict: bool = False) -> Tuple[FeatureSchema, TaskSpec, LabeledSet]:
    """
    Load a CSV data file typed by its JSON metadata.

    Args:
        data_path: CSV with a header naming every feature plus the label column
        metadata_path: JSON metadata (task, classes, label_column, features)
        strict: drop sparse columns and incomplete rows

    Returns:
        (FeatureSchema, TaskSpec, LabeledSet)
    """
    schema, task, label_column = load_metadata(metadata_path)
    path = Path(data_path)
    if not path.exists():
        raise SchemaError(f"Data file '{path}' not found")

    header, body = _read_cells(path)
    data = build_labeled_set(schema, task, header, body, label_column)
    if data.unknown_values:
        logger.warning(f"{data.unknown_values} unknown categorical value(s) marked missing in {path.name}")
    if strict:
        schema, data = apply_strict(schema, data)

    logger.info(f"Loaded {len(data)} rows, {len(schema)} features, classes {data.class_counts()}")
    return schema, task, data


# ---------------------------------------------------------------------------
# Splitting and sampling
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(data: LabeledSet, test_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Stratified (train, test) index lists, each sorted ascending."""
    if not 0.0 < test_fraction < 1.0:
        raise SchemaError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in data.classes:
        members = data.class_indices(label)
        if len(members) < 2:
            raise InsufficientDataError(f"Class '{label}' has {len(members)} row(s), need at least 2 to split")
        n_test = max(1, _round_half_up(len(members) * test_fraction))
        n_test = min(n_test, len(members) - 1)
        order = rng.permutation(members)
        test.extend(int(i) for i in order[:n_test])
        train.extend(int(i) for i in order[n_test:])
    return sorted(train), sorted(test)


def stratified_split(data: LabeledSet, test_fraction: float, seed: int) -> Tuple[LabeledSet, LabeledSet]:
    train, test = split_indices(data, test_fraction, seed)
    return data.take(train), data.take(test)


def shot_quotas(classes: Sequence[str], k: int) -> Dict[str, int]:
    """floor(k / C) per class, remainder one each in class order."""
    if k < len(classes):
        raise SchemaError(f"k={k} is smaller than the number of classes ({len(classes)})")
    base, extra = divmod(k, len(classes))
    return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}


def sample_k_shot_indices(pool: LabeledSet, k: int, seed: int) -> List[int]:
    rng = np.random.default_rng(seed)
    chosen = []
    for label, quota in shot_quotas(pool.classes, k).items():
        members = pool.class_indices(label)
        if len(members) < quota:
            raise InsufficientDataError(f"Class '{label}' has {len(members)} row(s), k-shot quota is {quota}")
        picked = rng.choice(members, size=quota, replace=False)
        chosen.extend(int(i) for i in picked)
    return sorted(chosen)


def sample_k_shot(pool: LabeledSet, k: int, seed: int) -> LabeledSet:
    """Balanced k-shot sample drawn without replacement per class."""
    return pool.take(sample_k_shot_indices(pool, k, seed))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def format_number(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def format_value(row: Row, feature: FeatureDesc) -> str:
    value = row.values.get(feature.name)
    if value is None:
        return MISSING_TOKEN
    if feature.is_categorical:
        return str(value)
    raw = row.raw.get(feature.name)
    if raw:
        return raw
    return format_number(value)


def serialize_example(row: Row, label: Optional[str], schema: FeatureSchema) -> str:
    """'<f1> is <v1>. <f2> is <v2>.' in schema order, plus '\\nAnswer: <label>' when labeled."""
    text = ' '.join(f"{f.name} is {format_value(row, f)}." for f in schema)
    if label is not None:
        text += f"\nAnswer: {label}"
    return text
