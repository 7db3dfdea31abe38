"""
Rule DSL: AST, a noise-tolerant parser for LLM rule lines, a canonical
printer, and evaluation of rules into binary feature matrices.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from featling.schema import FeatureDesc, FeatureSchema, Row, format_number

logger = logging.getLogger(__name__)

# ParseError reasons
UNKNOWN_FEATURE = 'unknown feature'
TYPE_MISMATCH = 'type mismatch'
MALFORMED = 'malformed syntax'
EMPTY_LIST = 'empty membership list'
UNKNOWN_CATEGORY = 'unknown category'

EQ_RTOL = 1e-9


class MissingStrategy(str, Enum):
    FILL_ZERO = 'fill_zero'
    FILL_HALF = 'fill_half'
    IMPUTE = 'impute'


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class FeatureRef:
    name: str


@dataclass(frozen=True)
class Binary:
    op: str  # + - * / %
    left: 'Expr'
    right: 'Expr'


Expr = Union[Const, FeatureRef, Binary]


@dataclass(frozen=True)
class CatIn:
    """
    Categorical membership. With negated=True the admitted set is the
    complement of values, so growing values can only lower the output.
    """
    feature: str
    values: Tuple[str, ...]  # schema category order
    negated: bool = False


@dataclass(frozen=True)
class Cmp:
    left: Expr
    op: str  # < <= > >= = !=
    right: Expr


@dataclass(frozen=True)
class NumRange:
    feature: str
    lo: float
    hi: float


@dataclass(frozen=True)
class And:
    members: Tuple['Rule', ...]


@dataclass(frozen=True)
class Or:
    members: Tuple['Rule', ...]


Rule = Union[CatIn, Cmp, NumRange, And, Or]


@dataclass(frozen=True)
class ParseError:
    reason: str
    message: str
    text: str = ''


@dataclass(frozen=True)
class RuleSet:
    class_label: str
    rules: Tuple[Rule, ...]
    skipped: int = 0
    errors: Tuple[ParseError, ...] = field(default=(), compare=False)

    def to_dict(self) -> Dict:
        return {
            'class': self.class_label,
            'rules': [print_rule(r) for r in self.rules],
            'skipped': self.skipped,
        }

    @classmethod
    def from_dict(cls, data: Dict, schema: FeatureSchema) -> 'RuleSet':
        rules = []
        for text in data['rules']:
            parsed = parse_rule(text, schema)
            if isinstance(parsed, ParseError):
                raise ValueError(f"Cached rule '{text}' no longer parses: {parsed.reason}")
            rules.append(parsed)
        return cls(class_label=data['class'], rules=tuple(rules), skipped=int(data.get('skipped', 0)))


@dataclass(frozen=True)
class FeatureMatrix:
    class_label: str
    values: np.ndarray  # N x R

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

class _Fail(Exception):
    def __init__(self, reason: str, message: str, pos: int = 0):
        super().__init__(message)
        self.reason = reason
        self.message = message
        self.pos = pos


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    value: object = None


_PHRASES = {
    'is within range of': ('RANGE', None),
    'within range of': ('RANGE', None),
    'is within the range of': ('RANGE', None),
    'within the range of': ('RANGE', None),
    'is in the range of': ('RANGE', None),
    'in the range of': ('RANGE', None),
    'is in range of': ('RANGE', None),
    'in range of': ('RANGE', None),
    'is within': ('RANGE', None),
    'within': ('RANGE', None),
    'is between': ('BETWEEN', None),
    'between': ('BETWEEN', None),
    'is not in': ('NOTIN', None),
    'not in': ('NOTIN', None),
    'is not one of': ('NOTIN', None),
    'not one of': ('NOTIN', None),
    'is in': ('IN', None),
    'in': ('IN', None),
    'is one of': ('IN', None),
    'one of': ('IN', None),
    'is greater than or equal to': ('OP', '>='),
    'greater than or equal to': ('OP', '>='),
    'is less than or equal to': ('OP', '<='),
    'less than or equal to': ('OP', '<='),
    'is greater than': ('OP', '>'),
    'greater than': ('OP', '>'),
    'is more than': ('OP', '>'),
    'more than': ('OP', '>'),
    'is higher than': ('OP', '>'),
    'higher than': ('OP', '>'),
    'is above': ('OP', '>'),
    'above': ('OP', '>'),
    'exceeds': ('OP', '>'),
    'is less than': ('OP', '<'),
    'less than': ('OP', '<'),
    'is lower than': ('OP', '<'),
    'lower than': ('OP', '<'),
    'is below': ('OP', '<'),
    'below': ('OP', '<'),
    'is at least': ('OP', '>='),
    'at least': ('OP', '>='),
    'is at most': ('OP', '<='),
    'at most': ('OP', '<='),
    'is not equal to': ('OP', '!='),
    'not equal to': ('OP', '!='),
    'does not equal': ('OP', '!='),
    'is not': ('OP', '!='),
    'is equal to': ('OP', '='),
    'equal to': ('OP', '='),
    'equals': ('OP', '='),
    'is': ('OP', '='),
    'and': ('AND', None),
    'or': ('OR', None),
}
_PHRASE_RE = re.compile(
    r'(?:' + '|'.join(
        r'\s+'.join(re.escape(word) for word in phrase.split())
        for phrase in sorted(_PHRASES, key=len, reverse=True)
    ) + r')(?!\w)',
    re.IGNORECASE,
)

# longest first
_SYMBOLS = [
    ('&&', 'AND', None), ('||', 'OR', None),
    ('>=', 'OP', '>='), ('=>', 'OP', '>='), ('<=', 'OP', '<='), ('=<', 'OP', '<='),
    ('==', 'OP', '='), ('!=', 'OP', '!='), ('<>', 'OP', '!='),
    ('≥', 'OP', '>='), ('≤', 'OP', '<='), ('≠', 'OP', '!='),
    ('>', 'OP', '>'), ('<', 'OP', '<'), ('=', 'OP', '='),
    ('&', 'AND', None), ('|', 'OR', None),
    ('+', 'ARITH', '+'), ('-', 'ARITH', '-'), ('−', 'ARITH', '-'),
    ('*', 'ARITH', '*'), ('×', 'ARITH', '*'), ('/', 'ARITH', '/'), ('÷', 'ARITH', '/'),
    ('%', 'ARITH', '%'),
    ('(', 'LPAREN', None), (')', 'RPAREN', None), (',', 'COMMA', None),
]
_NUMBER_RE = re.compile(r'(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?')
_WORD_RE = re.compile(r'[^\W\d]\w*')
_BULLET_RE = re.compile(r'^\s*(?:[-*•](?!\d)|\d+[.)](?=\s))\s*')
_CLOSING_QUOTE = {'"': '"', "'": "'", '“': '”', '‘': '’'}
_QUOTE_CHARS = '"\'“”‘’`«»'


def normalize_line(line: str) -> str:
    """Strip bullets, markdown emphasis and trailing punctuation."""
    text = line.replace('**', '').replace('`', '')
    text = _BULLET_RE.sub('', text, count=1)
    return text.strip().rstrip(' .;,').strip()


def _split_list(body: str) -> List[str]:
    items, current, quote = [], [], None
    for ch in body:
        if quote:
            if ch == quote:
                quote = None
            else:
                current.append(ch)
        elif ch in _CLOSING_QUOTE:
            quote = _CLOSING_QUOTE[ch]
        elif ch == ',':
            items.append(''.join(current).strip())
            current = []
        else:
            current.append(ch)
    items.append(''.join(current).strip())
    return [item for item in items if item]


def _read_bracket(text: str, start: int) -> Tuple[str, int]:
    """Body of a [...] list starting at text[start] == '[', and the index after ']'."""
    quote = None
    for i in range(start + 1, len(text)):
        ch = text[i]
        if quote:
            if ch == quote:
                quote = None
        elif ch in _CLOSING_QUOTE:
            quote = _CLOSING_QUOTE[ch]
        elif ch == ']':
            return text[start + 1:i], i + 1
    raise _Fail(MALFORMED, "unclosed '['")


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == '_'


def tokenize(text: str, schema: FeatureSchema) -> List[_Token]:
    names = sorted(schema.names, key=len, reverse=True)
    tokens: List[_Token] = []
    pos = 0
    while pos < len(text):
        ch = text[pos]
        if ch.isspace():
            pos += 1
            continue

        if ch == '[':
            body, pos = _read_bracket(text, pos)
            tokens.append(_Token('LIST', body, _split_list(body)))
            continue

        if ch in _CLOSING_QUOTE:
            end = text.find(_CLOSING_QUOTE[ch], pos + 1)
            if end < 0 and ch in '“‘':
                end = text.find('"' if ch == '“' else "'", pos + 1)
            if end < 0:
                raise _Fail(MALFORMED, "unclosed quote", len(tokens))
            tokens.append(_Token('STR', text[pos:end + 1], text[pos + 1:end]))
            pos = end + 1
            continue

        matched = None
        lowered = text[pos:].lower()
        for name in names:
            n = len(name)
            if lowered.startswith(name.lower()):
                after = pos + n
                if after < len(text) and _is_word_char(name[-1]) and _is_word_char(text[after]):
                    continue
                matched = name
                break
        if matched:
            tokens.append(_Token('FEAT', text[pos:pos + len(matched)], matched))
            pos += len(matched)
            continue

        m = _PHRASE_RE.match(text, pos)
        # unicode case folding can match text whose lower() is no phrase ('ſ' ~ 's')
        phrase = _PHRASES.get(' '.join(m.group(0).lower().split())) if m else None
        if phrase:
            kind, value = phrase
            tokens.append(_Token(kind, m.group(0), value))
            pos = m.end()
            continue

        for symbol, kind, value in _SYMBOLS:
            if text.startswith(symbol, pos):
                tokens.append(_Token(kind, symbol, value))
                pos += len(symbol)
                break
        else:
            m = _NUMBER_RE.match(text, pos)
            if m:
                value = float(m.group(0))
                if not math.isfinite(value):
                    raise _Fail(MALFORMED, f"number '{m.group(0)}' is out of range", len(tokens))
                tokens.append(_Token('NUM', m.group(0), value))
                pos = m.end()
                continue
            m = _WORD_RE.match(text, pos)
            if m:
                tokens.append(_Token('WORD', m.group(0), m.group(0)))
                pos = m.end()
                continue
            raise _Fail(MALFORMED, f"unexpected character '{ch}'", len(tokens))

    tokens.append(_Token('END', ''))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _RuleParser:
    """Recursive descent over tokens; Or < And < atom, with backtracking on '('."""

    def __init__(self, tokens: List[_Token], schema: FeatureSchema):
        self.tokens = tokens
        self.schema = schema
        self.pos = 0

    def peek(self, offset: int = 0) -> _Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        token = self.peek()
        self.pos += 1
        return token

    def fail(self, reason: str, message: str):
        raise _Fail(reason, message, self.pos)

    def expect(self, kind: str) -> _Token:
        token = self.peek()
        if token.kind != kind:
            self.fail(MALFORMED, f"expected {kind}, got '{token.text or 'end of rule'}'")
        return self.advance()

    def parse(self) -> Rule:
        rule = self.parse_or()
        self.expect('END')
        return rule

    def parse_or(self) -> Rule:
        members = [self.parse_and()]
        while self.peek().kind == 'OR':
            self.advance()
            members.append(self.parse_and())
        return members[0] if len(members) == 1 else Or(tuple(members))

    def parse_and(self) -> Rule:
        members = [self.parse_atom()]
        while self.peek().kind == 'AND':
            self.advance()
            members.append(self.parse_atom())
        return members[0] if len(members) == 1 else And(tuple(members))

    def parse_atom(self) -> Rule:
        if self.peek().kind != 'LPAREN':
            return self.parse_condition()

        start = self.pos
        try:
            self.advance()
            rule = self.parse_or()
            self.expect('RPAREN')
            if self.peek().kind not in ('AND', 'OR', 'RPAREN', 'END'):
                self.fail(MALFORMED, "unexpected text after ')'")
            return rule
        except _Fail as grouped:
            self.pos = start
            try:
                return self.parse_condition()
            except _Fail as plain:
                raise grouped if grouped.pos > plain.pos else plain

    def parse_condition(self) -> Rule:
        token = self.peek()
        if token.kind == 'FEAT' and self.schema.get(token.value).is_categorical:
            return self.parse_categorical(self.schema.get(token.value))
        left = self.parse_expr()
        return self.parse_tail(left)

    # numeric conditions

    def parse_tail(self, left: Expr) -> Rule:
        token = self.peek()
        if token.kind in ('IN', 'NOTIN'):
            self.advance()
            values = self.membership_values()
            return self.numeric_membership(left, values, negated=token.kind == 'NOTIN')
        if token.kind == 'RANGE':
            self.advance()
            body = self.expect('LIST')
            if len(body.value) != 2:
                self.fail(MALFORMED, f"range needs 2 values, got [{body.text}]")
            lo, hi = (self.list_number(item) for item in body.value)
            return self.make_range(left, lo, hi)
        if token.kind == 'BETWEEN':
            self.advance()
            if self.peek().kind == 'LIST':
                body = self.advance()
                if len(body.value) != 2:
                    self.fail(MALFORMED, f"range needs 2 values, got [{body.text}]")
                lo, hi = (self.list_number(item) for item in body.value)
            else:
                lo = self.signed_number()
                self.expect('AND')
                hi = self.signed_number()
            return self.make_range(left, lo, hi)
        if token.kind == 'LPAREN' and self.peek(1).kind == 'OP':
            self.advance()
            op = self.advance().value
            right = self.parse_expr()
            self.expect('RPAREN')
            return Cmp(left, op, right)
        if token.kind == 'OP':
            comparisons = []
            while self.peek().kind == 'OP':
                op = self.advance().value
                right = self.parse_expr()
                comparisons.append(Cmp(left, op, right))
                left = right
            return comparisons[0] if len(comparisons) == 1 else And(tuple(comparisons))
        self.fail(MALFORMED, f"expected a comparison, got '{token.text or 'end of rule'}'")

    def membership_values(self) -> List[str]:
        token = self.peek()
        if token.kind == 'LIST':
            self.advance()
            return list(token.value)
        if token.kind in ('STR', 'NUM', 'WORD'):
            self.advance()
            return [str(token.value) if token.kind == 'STR' else token.text]
        self.fail(MALFORMED, "expected a list of values")

    def list_number(self, text: str) -> float:
        try:
            value = float(text.replace('−', '-'))
        except ValueError:
            self.fail(TYPE_MISMATCH, f"'{text}' is not a number")
        if not math.isfinite(value):
            self.fail(TYPE_MISMATCH, f"'{text}' is not a finite number")
        return value

    def signed_number(self) -> float:
        sign = 1.0
        while self.peek().kind == 'ARITH' and self.peek().value in ('-', '+'):
            if self.advance().value == '-':
                sign = -sign
        return sign * self.expect('NUM').value

    def make_range(self, left: Expr, lo: float, hi: float) -> Rule:
        if lo > hi:
            logger.warning(f"Range [{lo}, {hi}] reversed, swapping endpoints")
            lo, hi = hi, lo
        if isinstance(left, FeatureRef):
            return NumRange(left.name, lo, hi)
        return And((Cmp(left, '>=', Const(lo)), Cmp(left, '<=', Const(hi))))

    def numeric_membership(self, left: Expr, values: List[str], negated: bool) -> Rule:
        if not values:
            self.fail(EMPTY_LIST, "empty membership list")
        numbers = [self.list_number(v) for v in values]
        op = '!=' if negated else '='
        comparisons = tuple(Cmp(left, op, Const(n)) for n in numbers)
        if len(comparisons) == 1:
            return comparisons[0]
        return And(comparisons) if negated else Or(comparisons)

    # categorical conditions

    def parse_categorical(self, feature: FeatureDesc) -> Rule:
        self.advance()
        wrapped = self.peek().kind == 'LPAREN' and self.peek(1).kind in ('OP', 'IN', 'NOTIN')
        if wrapped:
            self.advance()

        token = self.peek()
        if token.kind in ('IN', 'NOTIN'):
            self.advance()
            raw = self.membership_values()
            negated = token.kind == 'NOTIN'
        elif token.kind == 'OP' and token.value in ('=', '!='):
            self.advance()
            raw = self.equality_values()
            negated = token.value == '!='
        elif token.kind in ('OP', 'RANGE', 'BETWEEN'):
            self.fail(TYPE_MISMATCH, f"'{feature.name}' is categorical, '{token.text}' needs a number")
        elif token.kind == 'ARITH':
            self.fail(TYPE_MISMATCH, f"'{feature.name}' is categorical and cannot be used in arithmetic")
        else:
            self.fail(MALFORMED, f"expected 'is in' after '{feature.name}'")

        if wrapped:
            self.expect('RPAREN')
        return CatIn(feature.name, self.resolve_categories(feature, raw), negated)

    def equality_values(self) -> List[str]:
        token = self.peek()
        if token.kind == 'LIST':
            self.advance()
            return list(token.value)
        if token.kind == 'STR':
            self.advance()
            return [token.value]
        words = []
        while self.peek().kind in ('WORD', 'NUM', 'FEAT', 'ARITH'):
            words.append(self.advance().text)
        if not words:
            self.fail(MALFORMED, "expected a category value")
        return [' '.join(words)]

    def resolve_categories(self, feature: FeatureDesc, raw: List[str]) -> Tuple[str, ...]:
        if not raw:
            self.fail(EMPTY_LIST, f"empty category list for '{feature.name}'")
        found = set()
        for value in raw:
            category = feature.match_category(value.strip(_QUOTE_CHARS + ' '))
            if category is None:
                logger.warning(f"Unknown category '{value}' for '{feature.name}', dropped")
            else:
                found.add(category)
        if not found:
            self.fail(UNKNOWN_CATEGORY, f"none of {raw} are categories of '{feature.name}'")
        return tuple(c for c in feature.categories if c in found)

    # arithmetic

    def parse_expr(self) -> Expr:
        left = self.parse_term()
        while self.peek().kind == 'ARITH' and self.peek().value in ('+', '-'):
            op = self.advance().value
            left = Binary(op, left, self.parse_term())
        return left

    def parse_term(self) -> Expr:
        left = self.parse_unary()
        while self.peek().kind == 'ARITH' and self.peek().value in ('*', '/', '%'):
            op = self.advance().value
            left = Binary(op, left, self.parse_unary())
        return left

    def parse_unary(self) -> Expr:
        token = self.peek()
        if token.kind == 'ARITH' and token.value in ('-', '+'):
            self.advance()
            operand = self.parse_unary()
            if token.value == '+':
                return operand
            if isinstance(operand, Const):
                return Const(-operand.value)
            return Binary('-', Const(0.0), operand)
        return self.parse_primary()

    def parse_primary(self) -> Expr:
        token = self.peek()
        if token.kind == 'NUM':
            self.advance()
            return Const(token.value)
        if token.kind == 'FEAT':
            feature = self.schema.get(token.value)
            if feature.is_categorical:
                self.fail(TYPE_MISMATCH, f"categorical feature '{feature.name}' used as a number")
            self.advance()
            return FeatureRef(feature.name)
        if token.kind == 'WORD':
            self.fail(UNKNOWN_FEATURE, f"unknown feature '{token.text}'")
        if token.kind == 'LPAREN':
            self.advance()
            inner = self.parse_expr()
            self.expect('RPAREN')
            return inner
        self.fail(MALFORMED, f"expected a value, got '{token.text or 'end of rule'}'")


def parse_rule(line: str, schema: FeatureSchema) -> Union[Rule, ParseError]:
    """
    Parse one rule line into an AST.

    Never raises on bad input: noise comes back as a ParseError value.
    """
    text = normalize_line(line)
    if not text:
        return ParseError(MALFORMED, "empty rule", line)
    try:
        tokens = tokenize(text, schema)
        return _RuleParser(tokens, schema).parse()
    except _Fail as e:
        return ParseError(e.reason, e.message, line)
    except RecursionError:
        return ParseError(MALFORMED, "rule nested too deeply", line)


def parse_ruleset(lines: Sequence[str], class_label: str, schema: FeatureSchema) -> RuleSet:
    rules, errors = [], []
    for line in lines:
        parsed = parse_rule(line, schema)
        if isinstance(parsed, ParseError):
            logger.warning(f"Class '{class_label}': skipped rule '{line.strip()}' ({parsed.reason}: {parsed.message})")
            errors.append(parsed)
        else:
            rules.append(parsed)
    return RuleSet(class_label=class_label, rules=tuple(rules), skipped=len(errors), errors=tuple(errors))


# ---------------------------------------------------------------------------
# Response blocks
# ---------------------------------------------------------------------------

_HEADER = 'conditions for class'
_RULE_LINE_RE = re.compile(r'^\s*(?:-|[*•](?=\s)|\d+[.)](?=\s))')


def _plain(text: str) -> str:
    for ch in _QUOTE_CHARS + '*':
        text = text.replace(ch, '')
    return ' '.join(text.split()).strip(' :').lower()


def _match_class(remainder: str, classes: Sequence[str]) -> Optional[str]:
    name = _plain(remainder)
    for label in classes:
        if _plain(label) == name:
            return label
    for label in sorted(classes, key=len, reverse=True):
        if re.search(r'(?<!\w)' + re.escape(_plain(label)) + r'(?!\w)', name):
            return label
    return None


def extract_class_blocks(response: str, classes: Sequence[str]) -> Dict[str, List[str]]:
    """Rule lines per class, read from '... conditions for class "<label>":' blocks."""
    blocks: Dict[str, List[str]] = {label: [] for label in classes}
    current = None
    for line in response.splitlines():
        lowered = line.lower()
        at = lowered.find(_HEADER)
        if at >= 0:
            current = _match_class(line[at + len(_HEADER):], classes)
            if current is None:
                logger.warning(f"Header names no known class: '{line.strip()}'")
            continue
        if current is not None and _RULE_LINE_RE.match(line):
            blocks[current].append(line.strip())
    return blocks


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

_PRECEDENCE = {'+': 1, '-': 1, '*': 2, '/': 2, '%': 2}
_OP_TEXT = {'<': '<', '<=': '<=', '>': '>', '>=': '>=', '=': '==', '!=': '!='}


def _expr_precedence(expr: Expr) -> int:
    return _PRECEDENCE[expr.op] if isinstance(expr, Binary) else 3


def print_expr(expr: Expr) -> str:
    if isinstance(expr, Const):
        return format_number(expr.value)
    if isinstance(expr, FeatureRef):
        return expr.name
    prec = _PRECEDENCE[expr.op]
    left = print_expr(expr.left)
    right = print_expr(expr.right)
    if _expr_precedence(expr.left) < prec:
        left = f"({left})"
    if _expr_precedence(expr.right) <= prec:
        right = f"({right})"
    return f"{left} {expr.op} {right}"


def _quote(value: str) -> str:
    if any(ch in value for ch in ',[]') or value != value.strip():
        return f"'{value}'" if '"' in value else f'"{value}"'
    return value


def print_rule(rule: Rule) -> str:
    """Canonical text; parse_rule(print_rule(r)) == r."""
    if isinstance(rule, CatIn):
        keyword = 'is not in' if rule.negated else 'is in'
        return f"{rule.feature} {keyword} [{', '.join(_quote(v) for v in rule.values)}]"
    if isinstance(rule, NumRange):
        return f"{rule.feature} is within range of [{format_number(rule.lo)}, {format_number(rule.hi)}]"
    if isinstance(rule, Cmp):
        return f"{print_expr(rule.left)} {_OP_TEXT[rule.op]} {print_expr(rule.right)}"
    if isinstance(rule, And):
        return ' and '.join(
            f"({print_rule(m)})" if isinstance(m, (And, Or)) else print_rule(m) for m in rule.members
        )
    if isinstance(rule, Or):
        return ' or '.join(
            f"({print_rule(m)})" if isinstance(m, Or) else print_rule(m) for m in rule.members
        )
    raise TypeError(f"Not a rule: {rule!r}")


def referenced_features(rule: Union[Rule, Expr]) -> List[str]:
    if isinstance(rule, (CatIn, NumRange)):
        return [rule.feature]
    if isinstance(rule, FeatureRef):
        return [rule.name]
    if isinstance(rule, Const):
        return []
    if isinstance(rule, (Binary, Cmp)):
        names = referenced_features(rule.left) + referenced_features(rule.right)
    else:
        names = [n for m in rule.members for n in referenced_features(m)]
    return list(dict.fromkeys(names))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class _Columns:
    """Column arrays built on demand from rows: float with NaN, or object with None."""

    def __init__(self, rows: Sequence[Row]):
        self.rows = rows
        self.n = len(rows)
        self._numeric: Dict[str, np.ndarray] = {}
        self._categorical: Dict[str, np.ndarray] = {}

    def numeric(self, name: str) -> np.ndarray:
        if name not in self._numeric:
            values = [row.values.get(name) for row in self.rows]
            self._numeric[name] = np.array(
                [np.nan if v is None else float(v) for v in values], dtype=float
            )
        return self._numeric[name]

    def categorical(self, name: str) -> np.ndarray:
        if name not in self._categorical:
            column = np.empty(self.n, dtype=object)
            column[:] = [row.values.get(name) for row in self.rows]
            self._categorical[name] = column
        return self._categorical[name]


def _eval_expr(expr: Expr, cols: _Columns) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(values, missing mask, division-by-zero mask)."""
    if isinstance(expr, Const):
        return np.full(cols.n, expr.value), np.zeros(cols.n, bool), np.zeros(cols.n, bool)
    if isinstance(expr, FeatureRef):
        values = cols.numeric(expr.name)
        return values, np.isnan(values), np.zeros(cols.n, bool)

    left, lmiss, lzero = _eval_expr(expr.left, cols)
    right, rmiss, rzero = _eval_expr(expr.right, cols)
    missing = lmiss | rmiss
    divzero = lzero | rzero
    with np.errstate(all='ignore'):
        if expr.op == '+':
            values = left + right
        elif expr.op == '-':
            values = left - right
        elif expr.op == '*':
            values = left * right
        else:
            divzero = divzero | (right == 0)
            # np.mod follows Python's sign convention
            values = left / right if expr.op == '/' else np.mod(left, right)
    divzero = divzero & ~missing
    values = np.where(missing | divzero, np.nan, values)
    return values, missing, divzero


def _is_integral(values: np.ndarray) -> np.ndarray:
    with np.errstate(invalid='ignore'):
        return np.isfinite(values) & (np.floor(values) == values)


def _compare(left: np.ndarray, op: str, right: np.ndarray) -> np.ndarray:
    with np.errstate(invalid='ignore'):
        if op in ('=', '!='):
            exact = left == right
            close = np.isclose(left, right, rtol=EQ_RTOL, atol=0.0)
            equal = np.where(_is_integral(left) & _is_integral(right), exact, close)
            return equal if op == '=' else ~equal
        if op == '<':
            return left < right
        if op == '<=':
            return left <= right
        if op == '>':
            return left > right
        return left >= right


def _truth(rule: Rule, cols: _Columns) -> np.ndarray:
    """Kleene truth values: 1, 0 or NaN (unknown because of a Missing operand)."""
    if isinstance(rule, CatIn):
        column = cols.categorical(rule.feature)
        allowed = set(rule.values)
        missing = np.array([v is None for v in column], dtype=bool)
        hit = np.array([v in allowed for v in column], dtype=bool) ^ rule.negated
        return np.where(missing, np.nan, hit.astype(float))
    if isinstance(rule, NumRange):
        column = cols.numeric(rule.feature)
        with np.errstate(invalid='ignore'):
            inside = (column >= rule.lo) & (column <= rule.hi)
        return np.where(np.isnan(column), np.nan, inside.astype(float))
    if isinstance(rule, Cmp):
        left, lmiss, lzero = _eval_expr(rule.left, cols)
        right, rmiss, rzero = _eval_expr(rule.right, cols)
        missing = lmiss | rmiss
        result = _compare(left, rule.op, right).astype(float)
        result = np.where(lzero | rzero, 0.0, result)
        return np.where(missing, np.nan, result)
    if isinstance(rule, (And, Or)):
        members = np.vstack([_truth(m, cols) for m in rule.members])
        unknown = np.isnan(members).any(axis=0)
        if isinstance(rule, And):
            decided = (members == 0).any(axis=0)
            return np.where(decided, 0.0, np.where(unknown, np.nan, 1.0))
        decided = (members == 1).any(axis=0)
        return np.where(decided, 1.0, np.where(unknown, np.nan, 0.0))
    raise TypeError(f"Not a rule: {rule!r}")


def _fill(values: np.ndarray, strategy: MissingStrategy, fill_value: Optional[float]) -> np.ndarray:
    strategy = MissingStrategy(strategy)
    if strategy is MissingStrategy.FILL_ZERO:
        fill = 0.0
    elif strategy is MissingStrategy.FILL_HALF:
        fill = 0.5
    elif fill_value is None:
        return values  # NaN sentinel, resolved by impute_missing
    else:
        fill = float(fill_value)
    return np.where(np.isnan(values), fill, values)


def evaluate_rule(rule: Rule, row: Row, strategy: MissingStrategy = MissingStrategy.FILL_ZERO,
                  fill_value: Optional[float] = None) -> float:
    """
    Satisfaction of one rule by one row.

    Args:
        rule: parsed rule
        row: data row
        strategy: how Missing operands resolve
        fill_value: this rule's imputed value (impute strategy only)

    Returns:
        1.0, 0.0, the fill value, or NaN under impute without a fill value
    """
    return float(_fill(_truth(rule, _Columns([row])), strategy, fill_value)[0])


def build_feature_matrix(ruleset: RuleSet, rows: Sequence[Row],
                         strategy: MissingStrategy = MissingStrategy.FILL_ZERO,
                         fill_table: Optional[Sequence[float]] = None) -> FeatureMatrix:
    cols = _Columns(list(rows))
    values = np.zeros((len(rows), len(ruleset.rules)), dtype=float)
    for j, rule in enumerate(ruleset.rules):
        fill_value = None if fill_table is None else fill_table[j]
        values[:, j] = _fill(_truth(rule, cols), strategy, fill_value)
    return FeatureMatrix(class_label=ruleset.class_label, values=values)


def impute_missing(train_matrix: FeatureMatrix) -> np.ndarray:
    """Per-rule satisfaction rate over non-missing (non-NaN) training cells; 0.5 for all-missing columns."""
    values = train_matrix.values
    known = ~np.isnan(values)
    counts = known.sum(axis=0)
    sums = np.where(known, values, 0.0).sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        means = sums / counts
    return np.where(counts > 0, means, 0.5)
