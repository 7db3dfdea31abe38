"""
AUC metrics, rule diversity, and the repeated split / k-shot / fit / score
experiment protocol with its ablations and report.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from featling.config import REPEATS, SHOTS, TEST_FRACTION, RunConfig
from featling.ensemble import EnsembleConfig, EnsembleModel, TrialRecord, fit_ensemble, predict, trial_matrices
from featling.llm import LLMClient
from featling.model import TrainConfig
from featling.ruledsl import FeatureMatrix, MissingStrategy
from featling.schema import FeatureSchema, LabeledSet, Row, TaskSpec, sample_k_shot_indices, split_indices

logger = logging.getLogger(__name__)

BASELINE = 'none'


class MetricError(ValueError):
    """Metric undefined for the given input."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auc_binary(scores: Sequence[float], labels: Sequence) -> float:
    """
    Mann-Whitney AUC from rank sums; ties count one half.

    Args:
        scores: higher means more likely positive
        labels: truthy for positives

    Returns:
        AUC in [0, 1]
    """
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(labels).astype(bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_multiclass(probs: np.ndarray, labels: Sequence[str], classes: Sequence[str]) -> float:
    """Macro one-vs-rest AUC over the classes present in labels."""
    probs = np.asarray(probs, dtype=float)
    position = {c: i for i, c in enumerate(classes)}
    y = np.array([position[label] for label in labels])
    present = sorted(set(y.tolist()))
    if len(present) < 2:
        raise MetricError(f"AUC needs at least 2 classes in the labels, got {len(present)}")
    if len(classes) == 2:
        return auc_binary(probs[:, 1], y == 1)
    return float(np.mean([auc_binary(probs[:, k], y == k) for k in present]))


def abs_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|Pearson| between every column of a and every column of b; constant columns correlate 0."""
    def standardize(m: np.ndarray) -> np.ndarray:
        centered = m - m.mean(axis=0)
        std = m.std(axis=0)
        out = np.zeros_like(centered)
        ok = std > 0
        out[:, ok] = centered[:, ok] / std[ok]
        return out

    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise MetricError(f"Matrices cover {a.shape[0]} and {b.shape[0]} rows")
    corr = standardize(a).T @ standardize(b) / a.shape[0]
    return np.clip(np.abs(corr), 0.0, 1.0)


def matched_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Mean |correlation| over the maximum-weight matching of a's rules to b's."""
    weights = abs_correlation(a, b)
    rows, cols = linear_sum_assignment(weights, maximize=True)
    return float(weights[rows, cols].mean())


def rule_diversity(matrices: Sequence[Union[FeatureMatrix, np.ndarray]]) -> Tuple[float, float]:
    """
    Similarity of rules across trials.

    Args:
        matrices: one N x R_t rule-satisfaction matrix per trial, same N rows

    Returns:
        (mean, variance) of matched correlation over all trial pairs
    """
    arrays = [np.asarray(m.values if isinstance(m, FeatureMatrix) else m, dtype=float) for m in matrices]
    usable = [a for a in arrays if a.size]
    if len(usable) < 2:
        raise MetricError(f"Rule diversity needs at least 2 trials, got {len(usable)}")
    scores = [matched_correlation(usable[i], usable[j])
              for i in range(len(usable)) for j in range(i + 1, len(usable))]
    return float(np.mean(scores)), float(np.var(scores))


def trial_feature_block(record: TrialRecord, rows: Sequence[Row], strategy: MissingStrategy) -> np.ndarray:
    """All of a trial's rule columns side by side, NaN imputations filled as the model sees them."""
    matrices = trial_matrices(record.rulesets, rows, strategy, record.fill_tables)
    return np.hstack([m.values for m in matrices])


def ensemble_diversity(model: EnsembleModel, rows: Sequence[Row]) -> Tuple[float, float]:
    return rule_diversity([trial_feature_block(r, rows, model.missing) for r in model.trials])


# ---------------------------------------------------------------------------
# Experiment protocol
# ---------------------------------------------------------------------------

def ensemble_config_from(config: RunConfig) -> EnsembleConfig:
    ens, llm, train = config.ensemble, config.llm, config.train
    return EnsembleConfig(
        num_trials=ens.trials,
        num_rules=ens.rules,
        temperature=llm.temperature,
        top_p=llm.top_p,
        max_tokens=llm.max_tokens,
        model_name=llm.model_name,
        prompt_budget_tokens=ens.prompt_budget_tokens,
        max_bagged_examples=ens.max_bagged_examples,
        retry_per_trial=ens.retry_per_trial,
        seed=ens.seed,
        workers=ens.workers,
        missing=MissingStrategy(config.eval.missing),
        shuffle_examples=ens.shuffle_examples,
        bagging=ens.bagging,
        train=TrainConfig(learning_rate=train.learning_rate, max_epochs=train.epochs, folds=train.folds),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    shots: int = SHOTS
    repeats: int = REPEATS
    seed: int = 0
    ablations: Tuple[str, ...] = ()
    test_fraction: float = TEST_FRACTION
    record_timing: bool = True
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)

    @classmethod
    def from_run_config(cls, config: RunConfig, ablations: Optional[Sequence[str]] = None) -> 'ExperimentConfig':
        chosen = config.eval.ablations if ablations is None else ablations
        return cls(
            dataset=config.name,
            shots=config.eval.shots,
            repeats=config.eval.repeats,
            seed=config.ensemble.seed,
            ablations=tuple(sorted(set(chosen))),
            test_fraction=config.eval.test_fraction,
            record_timing=config.eval.record_timing,
            ensemble=ensemble_config_from(config),
        )

    @property
    def ablation_label(self) -> str:
        return '+'.join(self.ablations) or BASELINE

    def ensemble_for(self, repeat: int) -> EnsembleConfig:
        """Ensemble settings of one repeat, ablations applied."""
        cfg = replace(self.ensemble, seed=self.seed + repeat)
        if 'no_ensemble' in self.ablations:
            cfg = replace(cfg, num_trials=1)
        if 'no_description' in self.ablations:
            cfg = replace(cfg, include_descriptions=False)
        if 'no_reasoning' in self.ablations:
            cfg = replace(cfg, include_reasoning=False)
        if 'no_tuning' in self.ablations:
            cfg = replace(cfg, tuning=False)
        return cfg

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['ablations'] = list(self.ablations)
        data['ensemble'] = self.ensemble.to_dict()
        return data


@dataclass(frozen=True)
class RepeatPlan:
    repeat: int
    seed: int
    train_indices: Tuple[int, ...]
    test_indices: Tuple[int, ...]
    shot_indices: Tuple[int, ...]  # positions within the train split

    def shots(self, data: LabeledSet) -> LabeledSet:
        return data.take(self.train_indices).take(self.shot_indices)

    def test(self, data: LabeledSet) -> LabeledSet:
        return data.take(self.test_indices)

    def to_dict(self) -> Dict:
        return {
            'repeat': self.repeat,
            'seed': self.seed,
            'train_indices': list(self.train_indices),
            'test_indices': list(self.test_indices),
            'shot_indices': list(self.shot_indices),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'RepeatPlan':
        return cls(
            repeat=int(data['repeat']),
            seed=int(data['seed']),
            train_indices=tuple(data['train_indices']),
            test_indices=tuple(data['test_indices']),
            shot_indices=tuple(data['shot_indices']),
        )


def plan_repeat(data: LabeledSet, cfg: ExperimentConfig, repeat: int) -> RepeatPlan:
    seed = cfg.seed + repeat
    train, test = split_indices(data, cfg.test_fraction, seed)
    shots = sample_k_shot_indices(data.take(train), cfg.shots, seed)
    return RepeatPlan(repeat, seed, tuple(train), tuple(test), tuple(shots))


@dataclass(frozen=True)
class RepeatSummary:
    repeat: int
    auc: float
    trials_ok: int
    trials_failed: int
    rules_parsed: int
    rules_skipped: int
    wall_seconds: float = 0.0


@dataclass
class RepeatResult:
    plan: RepeatPlan
    model: EnsembleModel
    probs: np.ndarray
    predicted: List[str]
    summary: RepeatSummary


def score_repeat(plan: RepeatPlan, model: EnsembleModel, data: LabeledSet,
                 wall_seconds: float = 0.0) -> RepeatResult:
    """Predict the test split with a fitted ensemble and measure AUC."""
    test = plan.test(data)
    probs, predicted = predict(model, test.rows)
    auc = auc_multiclass(probs, test.labels, model.classes)
    parsed = sum(r.extraction.parse_stats['parsed'] for r in model.trials)
    skipped = sum(r.extraction.parse_stats['skipped'] for r in model.trials)
    summary = RepeatSummary(plan.repeat, auc, len(model.trials), len(model.failures), parsed, skipped,
                            wall_seconds)
    logger.info(f"Repeat {plan.repeat}: AUC {auc:.4f} on {len(test)} test rows "
                f"({len(model.trials)} trials ok, {len(model.failures)} failed)")
    return RepeatResult(plan, model, probs, predicted, summary)


def run_repeat(client: LLMClient, schema: FeatureSchema, task: TaskSpec, data: LabeledSet,
               cfg: ExperimentConfig, repeat: int) -> RepeatResult:
    start = time.perf_counter()
    plan = plan_repeat(data, cfg, repeat)
    model = fit_ensemble(client, task, schema, plan.shots(data), cfg.ensemble_for(repeat))
    wall = time.perf_counter() - start if cfg.record_timing else 0.0
    return score_repeat(plan, model, data, wall)


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    shots: int
    ablation: str
    mean_auc: float
    std_auc: float
    trials_ok: int
    trials_failed: int
    parse_error_rate: float
    wall_seconds: float

    def to_dict(self) -> Dict:
        return asdict(self)


REPORT_COLUMNS = [
    'dataset', 'shots', 'ablation', 'mean_auc', 'std_auc',
    'trials_ok', 'trials_failed', 'parse_error_rate', 'wall_seconds',
]


def summarize(cfg: ExperimentConfig, summaries: Sequence[RepeatSummary]) -> ReportRow:
    aucs = np.array([s.auc for s in summaries], dtype=float)
    parsed = sum(s.rules_parsed for s in summaries)
    skipped = sum(s.rules_skipped for s in summaries)
    return ReportRow(
        dataset=cfg.dataset,
        shots=cfg.shots,
        ablation=cfg.ablation_label,
        mean_auc=float(aucs.mean()),
        std_auc=float(aucs.std()),  # population std: 0 for a single repeat
        trials_ok=sum(s.trials_ok for s in summaries),
        trials_failed=sum(s.trials_failed for s in summaries),
        parse_error_rate=skipped / (parsed + skipped) if parsed + skipped else 0.0,
        wall_seconds=float(sum(s.wall_seconds for s in summaries)) if cfg.record_timing else 0.0,
    )


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = [
            "| dataset | shots | ablation | AUC | trials ok | trials failed | parse error rate | wall seconds |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            lines.append(f"| {r.dataset} | {r.shots} | {r.ablation} | {r.mean_auc:.4f} ± {r.std_auc:.4f} | "
                         f"{r.trials_ok} | {r.trials_failed} | {r.parse_error_rate:.4f} | {r.wall_seconds:.2f} |")
        return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    repeats: List[RepeatResult]
    row: ReportRow


def run_experiment(cfg: ExperimentConfig, client: LLMClient, schema: FeatureSchema, task: TaskSpec,
                   data: LabeledSet, on_repeat: Optional[Callable[[RepeatResult], None]] = None
                   ) -> ExperimentResult:
    """
    Repeat split -> k-shot -> fit -> score and aggregate AUC.

    Args:
        cfg: experiment settings (ablations applied per repeat)
        client: LLM client used for rule extraction
        schema: feature schema
        task: task description and classes
        data: full labeled dataset
        on_repeat: called with each finished repeat (artifact writing)

    Returns:
        ExperimentResult with per-repeat results and the report row
    """
    logger.info(f"Experiment {cfg.dataset}: k={cfg.shots}, {cfg.repeats} repeat(s), ablation {cfg.ablation_label}")
    results = []
    for r in range(cfg.repeats):
        result = run_repeat(client, schema, task, data, cfg, r)
        if on_repeat is not None:
            on_repeat(result)
        results.append(result)
    row = summarize(cfg, [r.summary for r in results])
    logger.info(f"Experiment {cfg.dataset}: AUC {row.mean_auc:.4f} ± {row.std_auc:.4f}")
    return ExperimentResult(cfg, results, row)
