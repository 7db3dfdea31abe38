"""
Trial orchestration: plan -> prompt -> LLM -> parse -> features -> train,
repeated over T trials and averaged.

All randomness derives from (seed, trial index, attempt), so a manifest of
trial contexts reproduces every prompt.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from featling.config import (MAX_BAGGED_EXAMPLES, MAX_TOKENS, MODEL_NAME, NUM_RULES, NUM_TRIALS,
                             PROMPT_BUDGET_TOKENS, RETRY_PER_TRIAL, TEMPERATURE, TOP_P, WORKERS)
from featling.llm import CompletionRequest, LLMClient, LLMError
from featling.model import TrainConfig, TrialModel, predict_proba, train_trial, untrained_model
from featling.prompt import PromptConfig, TrialContext, build_rule_prompt, estimate_tokens, prompt_digest
from featling.ruledsl import (FeatureMatrix, MissingStrategy, RuleSet, build_feature_matrix, extract_class_blocks,
                              impute_missing, parse_ruleset)
from featling.schema import FeatureSchema, LabeledSet, Row, TaskSpec

logger = logging.getLogger(__name__)

MIN_BAGGED_FEATURES = 3

# TrialFailure reasons
LLM_ERROR = 'llm_error'
NO_RULES_FOR_CLASS = 'no_rules_for_class'
ALL_RULES_UNPARSEABLE = 'all_rules_unparseable'


class EnsembleError(RuntimeError):
    """No usable trial."""


@dataclass(frozen=True)
class EnsembleConfig:
    num_trials: int = NUM_TRIALS
    num_rules: int = NUM_RULES
    temperature: float = TEMPERATURE
    top_p: float = TOP_P
    max_tokens: int = MAX_TOKENS
    model_name: str = MODEL_NAME
    prompt_budget_tokens: int = PROMPT_BUDGET_TOKENS
    max_bagged_examples: int = MAX_BAGGED_EXAMPLES
    retry_per_trial: int = RETRY_PER_TRIAL
    seed: int = 0
    workers: int = WORKERS
    missing: MissingStrategy = MissingStrategy.FILL_ZERO
    include_descriptions: bool = True
    include_reasoning: bool = True
    tuning: bool = True
    shuffle_examples: bool = True
    bagging: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def prompt(self) -> PromptConfig:
        return PromptConfig(
            num_rules_per_class=self.num_rules,
            include_descriptions=self.include_descriptions,
            include_reasoning_step1=self.include_reasoning,
        )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['missing'] = MissingStrategy(self.missing).value
        return data


@dataclass(frozen=True)
class TrialFailure:
    index: int
    reason: str
    message: str
    attempts: int
    context: Optional[TrialContext] = None

    def to_dict(self) -> Dict:
        return {
            'index': self.index,
            'reason': self.reason,
            'message': self.message,
            'attempts': self.attempts,
            'context': self.context.to_dict() if self.context else None,
        }


@dataclass(frozen=True)
class TrialExtraction:
    """Output of the LLM half of a trial: parsed rules and the context that produced them."""
    index: int
    context: TrialContext
    rulesets: Tuple[RuleSet, ...]
    prompt_sha256: str
    attempts: int = 1

    @property
    def parse_stats(self) -> Dict:
        return {
            'parsed': sum(len(rs.rules) for rs in self.rulesets),
            'skipped': sum(rs.skipped for rs in self.rulesets),
            'per_class': {rs.class_label: {'parsed': len(rs.rules), 'skipped': rs.skipped}
                          for rs in self.rulesets},
        }


@dataclass
class TrialRecord:
    extraction: TrialExtraction
    model: TrialModel
    fill_tables: Optional[List[np.ndarray]] = None  # impute strategy only

    @property
    def index(self) -> int:
        return self.extraction.index

    @property
    def rulesets(self) -> Tuple[RuleSet, ...]:
        return self.extraction.rulesets


@dataclass
class EnsembleModel:
    classes: Tuple[str, ...]
    trials: List[TrialRecord]
    failures: List[TrialFailure] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    missing: MissingStrategy = MissingStrategy.FILL_ZERO

    def __post_init__(self):
        if not self.trials:
            raise EnsembleError("An ensemble needs at least one successful trial")


TrialOutcome = Union[TrialRecord, TrialFailure]


def trial_seed(seed: int, t: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, t, attempt]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def _stratified_cap(shots: LabeledSet, cap: int, rng: np.random.Generator) -> List[int]:
    """At most `cap` shot indices, balanced across classes."""
    by_class = [shots.class_indices(c) for c in shots.classes]
    quotas = [0] * len(by_class)
    remaining = cap
    while remaining > 0:
        progressed = False
        for c, members in enumerate(by_class):
            if remaining > 0 and quotas[c] < len(members):
                quotas[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    chosen = []
    for members, quota in zip(by_class, quotas):
        chosen.extend(int(i) for i in rng.choice(members, size=quota, replace=False))
    return sorted(chosen)


def plan_trial(t: int, task: TaskSpec, schema: FeatureSchema, shots: LabeledSet,
               cfg: EnsembleConfig, attempt: int = 0) -> TrialContext:
    """
    Randomize example order and bag features/examples when the prompt is over budget.

    Args:
        t: trial index
        task: task description and classes
        schema: full feature schema
        shots: k-shot training examples
        cfg: ensemble settings
        attempt: retry number (fresh seed per attempt)

    Returns:
        TrialContext for this trial/attempt
    """
    seed = trial_seed(cfg.seed, t, attempt)
    rng = np.random.default_rng(seed)
    n = len(shots)
    order = tuple(int(i) for i in rng.permutation(n)) if cfg.shuffle_examples else tuple(range(n))
    names = list(schema.names)
    ctx = TrialContext(example_order=order, feature_subset=tuple(names),
                       sample_subset=tuple(range(n)), seed=seed, attempt=attempt)

    def tokens(context: TrialContext) -> int:
        return estimate_tokens(build_rule_prompt(task, schema, shots, context, cfg.prompt))

    if not cfg.bagging or tokens(ctx) <= cfg.prompt_budget_tokens:
        return ctx

    samples = tuple(range(n))
    if n > cfg.max_bagged_examples:
        samples = tuple(_stratified_cap(shots, cfg.max_bagged_examples, rng))
    ctx = replace(ctx, sample_subset=samples)

    keep = set(names)
    for idx in rng.permutation(len(names)):
        if len(keep) <= MIN_BAGGED_FEATURES or tokens(ctx) <= cfg.prompt_budget_tokens:
            break
        keep.discard(names[idx])
        ctx = replace(ctx, feature_subset=tuple(name for name in names if name in keep))

    estimate = tokens(ctx)
    if estimate > cfg.prompt_budget_tokens:
        logger.warning(f"Trial {t}: prompt still ~{estimate} tokens with {len(keep)} features")
    logger.info(f"Trial {t}: bagged {len(ctx.feature_subset)}/{len(names)} features, "
                f"{len(ctx.sample_subset)}/{n} examples")
    return ctx


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def _classify_blocks(blocks: Dict[str, List[str]], rulesets: Sequence[RuleSet]) -> Optional[str]:
    if any(not lines for lines in blocks.values()):
        return NO_RULES_FOR_CLASS
    if any(not rs.rules for rs in rulesets):
        return ALL_RULES_UNPARSEABLE
    return None


def extract_trial(t: int, client: LLMClient, task: TaskSpec, schema: FeatureSchema, shots: LabeledSet,
                  cfg: EnsembleConfig) -> Union[TrialExtraction, TrialFailure]:
    """Prompt the LLM and parse its rules; retries with a fresh seed when a class gets no rules."""
    failure = None
    for attempt in range(cfg.retry_per_trial + 1):
        ctx = plan_trial(t, task, schema, shots, cfg, attempt)
        prompt = build_rule_prompt(task, schema, shots, ctx, cfg.prompt)
        request = CompletionRequest(
            prompt=prompt,
            temperature=cfg.temperature,
            top_p=cfg.top_p,
            max_tokens=cfg.max_tokens,
            model_name=cfg.model_name,
            seed=ctx.seed,
        )
        try:
            response = client.complete(request)
        except LLMError as e:
            logger.error(f"Trial {t}: LLM request failed: {e}")
            return TrialFailure(t, LLM_ERROR, str(e), attempt + 1, ctx)

        blocks = extract_class_blocks(response.text, task.classes)
        rulesets = tuple(parse_ruleset(blocks[label], label, schema) for label in task.classes)
        for rs in rulesets:
            logger.info(f"Trial {t}: parsed {len(rs.rules)}/{len(rs.rules) + rs.skipped} rules "
                        f"for class '{rs.class_label}'")

        reason = _classify_blocks(blocks, rulesets)
        if reason is None:
            return TrialExtraction(t, ctx, rulesets, prompt_digest(prompt), attempt + 1)
        logger.warning(f"Trial {t} attempt {attempt + 1}: {reason}")
        failure = TrialFailure(t, reason, f"{reason} after {attempt + 1} attempt(s)", attempt + 1, ctx)
    return failure


def shot_rows(shots: LabeledSet, ctx: TrialContext) -> Tuple[List[Row], np.ndarray]:
    """Training rows of a trial: the bagged sample subset in index order."""
    indices = sorted(ctx.sample_subset)
    rows = [shots.rows[i] for i in indices]
    labels = shots.label_indices()[indices]
    return rows, labels


def trial_matrices(rulesets: Sequence[RuleSet], rows: Sequence[Row], strategy: MissingStrategy,
                   fill_tables: Optional[Sequence[np.ndarray]] = None) -> List[FeatureMatrix]:
    return [
        build_feature_matrix(rs, rows, strategy, None if fill_tables is None else fill_tables[k])
        for k, rs in enumerate(rulesets)
    ]


def train_extraction(extraction: TrialExtraction, task: TaskSpec, shots: LabeledSet,
                     cfg: EnsembleConfig) -> TrialRecord:
    rows, labels = shot_rows(shots, extraction.context)
    strategy = MissingStrategy(cfg.missing)

    fill_tables = None
    if strategy is MissingStrategy.IMPUTE:
        sentinel = trial_matrices(extraction.rulesets, rows, strategy)
        fill_tables = [impute_missing(m) for m in sentinel]
    matrices = trial_matrices(extraction.rulesets, rows, strategy, fill_tables)

    if cfg.tuning:
        train_cfg = replace(cfg.train, seed=extraction.context.seed)
        model = train_trial(matrices, labels, train_cfg, classes=task.classes)
    else:
        model = untrained_model(matrices, task.classes)
    return TrialRecord(extraction=extraction, model=model, fill_tables=fill_tables)


def run_trial(t: int, client: LLMClient, task: TaskSpec, schema: FeatureSchema, shots: LabeledSet,
              cfg: EnsembleConfig) -> TrialOutcome:
    extraction = extract_trial(t, client, task, schema, shots, cfg)
    if isinstance(extraction, TrialFailure):
        return extraction
    return train_extraction(extraction, task, shots, cfg)


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

def _run_pool(fn, count: int, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(fn, range(count)))
    return sorted(results, key=lambda r: r.index)


def extract_ensemble(client: LLMClient, task: TaskSpec, schema: FeatureSchema, shots: LabeledSet,
                     cfg: EnsembleConfig) -> Tuple[List[TrialExtraction], List[TrialFailure]]:
    outcomes = _run_pool(lambda t: extract_trial(t, client, task, schema, shots, cfg), cfg.num_trials, cfg.workers)
    extractions = [o for o in outcomes if isinstance(o, TrialExtraction)]
    failures = [o for o in outcomes if isinstance(o, TrialFailure)]
    logger.info(f"Extraction: {len(extractions)}/{cfg.num_trials} trials usable")
    return extractions, failures


def train_ensemble(extractions: Sequence[TrialExtraction], failures: Sequence[TrialFailure], task: TaskSpec,
                   shots: LabeledSet, cfg: EnsembleConfig) -> EnsembleModel:
    if not extractions:
        reasons = ', '.join(sorted({f.reason for f in failures})) or 'no trials'
        raise EnsembleError(f"All {cfg.num_trials} trial(s) failed ({reasons})")
    records = [train_extraction(e, task, shots, cfg) for e in sorted(extractions, key=lambda e: e.index)]
    return EnsembleModel(classes=task.classes, trials=records, failures=list(failures),
                         config=cfg.to_dict(), missing=MissingStrategy(cfg.missing))


def fit_ensemble(client: LLMClient, task: TaskSpec, schema: FeatureSchema, shots: LabeledSet,
                 cfg: EnsembleConfig) -> EnsembleModel:
    """
    Run every trial and keep the successful ones.

    Args:
        client: LLM client (only used here, never at prediction time)
        task: task description and classes
        schema: feature schema
        shots: k-shot training set
        cfg: ensemble settings

    Returns:
        EnsembleModel with trials ordered by index
    """
    extractions, failures = extract_ensemble(client, task, schema, shots, cfg)
    return train_ensemble(extractions, failures, task, shots, cfg)


def trial_probabilities(record: TrialRecord, rows: Sequence[Row], strategy: MissingStrategy) -> np.ndarray:
    matrices = trial_matrices(record.rulesets, rows, strategy, record.fill_tables)
    return predict_proba(record.model, matrices)


def aggregate(per_trial: Sequence[np.ndarray]) -> np.ndarray:
    """Mean class probability over trials, independent of trial order."""
    if len(per_trial) == 0:
        raise EnsembleError("No successful trial to aggregate")
    stacked = np.sort(np.stack([np.asarray(p, dtype=float) for p in per_trial]), axis=0)
    mean = stacked.sum(axis=0) / len(per_trial)
    unanimous = stacked[0] == stacked[-1]
    return np.where(unanimous, stacked[0], mean)


def predict(model: EnsembleModel, rows: Sequence[Row]) -> Tuple[np.ndarray, List[str]]:
    """Probabilities (N x C) and argmax labels. Uses no LLM client."""
    per_trial = [trial_probabilities(record, rows, model.missing) for record in model.trials]
    probs = aggregate(per_trial)
    labels = [model.classes[i] for i in np.argmax(probs, axis=1)] if len(rows) else []
    return probs, labels
