import itertools
from dataclasses import replace

import numpy as np
import pytest

from featling.ensemble import EnsembleConfig, fit_ensemble
from featling.evaluation import (ExperimentConfig, MetricError, Report, RepeatSummary, auc_binary, auc_multiclass,
                                 ensemble_diversity, matched_correlation, plan_repeat, rule_diversity,
                                 run_experiment, summarize)
from featling.llm import ScriptedClient
from featling.model import TrainConfig
from featling.synthetic import generate_synthetic, solution_mix_responder, weak_solution_mix_responder


def pairwise_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_pairwise_counting():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 201))
        positive = rng.integers(0, 2, size=n).astype(bool)
        if positive.all() or not positive.any():
            positive[0] = not positive[0]
        scores = rng.integers(0, 6, size=n).astype(float)  # plenty of ties
        assert auc_binary(scores, positive) == pairwise_auc(scores, positive)


def test_auc_reference_points():
    labels = [0, 0, 1, 1]
    assert auc_binary([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert auc_binary([0.5, 0.5, 0.5, 0.5], labels) == 0.5

    rng = np.random.default_rng(1)
    scores = rng.random(30)
    y = np.arange(30) % 2
    assert auc_binary(scores, y) + auc_binary(scores, 1 - y) == pytest.approx(1.0)
    assert auc_binary(scores, y) == auc_binary(np.exp(3 * scores) - 7, y)


def test_auc_needs_both_classes():
    with pytest.raises(MetricError):
        auc_binary([0.1, 0.9], [1, 1])
    with pytest.raises(MetricError):
        auc_multiclass(np.array([[0.2, 0.8], [0.6, 0.4]]), ['b', 'b'], ('a', 'b'))


def test_multiclass_auc_is_macro_one_vs_rest():
    rng = np.random.default_rng(2)
    classes = ('a', 'b', 'c')
    for _ in range(30):
        probs = rng.dirichlet(np.ones(3), size=25)
        labels = [classes[i] for i in rng.integers(0, 3, size=25)]
        present = [k for k, c in enumerate(classes) if c in labels]
        if len(present) < 2:
            continue
        expected = np.mean([pairwise_auc(probs[:, k], [y == classes[k] for y in labels]) for k in present])
        assert auc_multiclass(probs, labels, classes) == pytest.approx(expected)


def test_two_class_auc_uses_second_column():
    probs = np.array([[0.9, 0.1], [0.4, 0.6], [0.3, 0.7], [0.8, 0.2]])
    labels = ['no', 'yes', 'no', 'yes']
    assert auc_multiclass(probs, labels, ('no', 'yes')) == auc_binary(probs[:, 1], [0, 1, 0, 1])


def test_identical_trials_have_full_similarity():
    rng = np.random.default_rng(3)
    z = rng.integers(0, 2, size=(60, 5)).astype(float)
    assert rule_diversity([z, z, z]) == (pytest.approx(1.0), pytest.approx(0.0))
    # column order does not matter
    assert matched_correlation(z, z[:, ::-1]) == pytest.approx(1.0)


def test_matching_is_the_best_permutation():
    rng = np.random.default_rng(4)
    for _ in range(50):
        r = int(rng.integers(1, 7))
        a = rng.integers(0, 2, size=(20, r)).astype(float)
        b = rng.integers(0, 2, size=(20, r)).astype(float)
        corr = np.zeros((r, r))
        for i in range(r):
            for j in range(r):
                if a[:, i].std() > 0 and b[:, j].std() > 0:
                    corr[i, j] = abs(np.corrcoef(a[:, i], b[:, j])[0, 1])
        best = max(np.mean([corr[i, p[i]] for i in range(r)]) for p in itertools.permutations(range(r)))
        assert matched_correlation(a, b) == pytest.approx(best)


def test_independent_rules_are_dissimilar():
    rng = np.random.default_rng(5)
    matrices = [rng.integers(0, 2, size=(1000, 10)).astype(float) for _ in range(3)]
    mean, _ = rule_diversity(matrices)
    assert mean < 0.15


def test_diversity_needs_two_trials():
    with pytest.raises(MetricError):
        rule_diversity([np.ones((5, 2))])


@pytest.fixture
def solution_mix():
    return generate_synthetic('solution_mix', 200, seed=7)


def mix_experiment(**kwargs):
    base = dict(dataset='solution_mix', shots=4, repeats=3, seed=0, record_timing=False,
                ensemble=EnsembleConfig(num_trials=20, workers=2))
    base.update(kwargs)
    return ExperimentConfig(**base)


def test_true_rule_reaches_perfect_auc(solution_mix, mix_client):
    schema, task, data = solution_mix
    seen = []
    result = run_experiment(mix_experiment(), mix_client, schema, task, data, on_repeat=seen.append)
    assert [r.plan.repeat for r in seen] == [0, 1, 2]
    assert result.row.mean_auc >= 0.99
    assert result.row.trials_ok == 60
    assert result.row.trials_failed == 0
    assert result.row.parse_error_rate == 0.0
    assert result.row.wall_seconds == 0.0


def test_tuning_does_not_lose_to_rule_counting(solution_mix):
    schema, task, data = solution_mix
    tuned = run_experiment(mix_experiment(), ScriptedClient(solution_mix_responder), schema, task, data)
    counted = run_experiment(mix_experiment(ablations=('no_tuning',)), ScriptedClient(solution_mix_responder),
                             schema, task, data)
    assert counted.row.ablation == 'no_tuning'
    assert counted.row.mean_auc <= tuned.row.mean_auc + 0.02


def test_single_repeat_has_zero_spread(solution_mix, mix_client):
    schema, task, data = solution_mix
    cfg = mix_experiment(repeats=1, ensemble=EnsembleConfig(num_trials=2, workers=1))
    result = run_experiment(cfg, mix_client, schema, task, data)
    assert result.row.std_auc == 0.0


def test_repeat_plans_are_reproducible(solution_mix):
    _, _, data = solution_mix
    cfg = mix_experiment()
    plan = plan_repeat(data, cfg, 1)
    assert plan == plan_repeat(data, cfg, 1)
    assert plan.seed == 1
    assert not set(plan.train_indices) & set(plan.test_indices)
    assert plan.shots(data).class_counts() == {'no': 2, 'yes': 2}
    assert type(plan).from_dict(plan.to_dict()) == plan


def test_ablations_change_the_ensemble_settings():
    cfg = mix_experiment(seed=10, ablations=('no_description', 'no_ensemble', 'no_reasoning'))
    ens = cfg.ensemble_for(2)
    assert ens.seed == 12
    assert ens.num_trials == 1
    assert not ens.include_descriptions and not ens.include_reasoning
    assert ens.tuning
    assert cfg.ablation_label == 'no_description+no_ensemble+no_reasoning'
    assert mix_experiment().ablation_label == 'none'


def test_summary_and_markdown():
    cfg = mix_experiment()
    row = summarize(cfg, [
        RepeatSummary(0, 0.8, 20, 0, 30, 10, 1.5),
        RepeatSummary(1, 1.0, 19, 1, 40, 0, 2.5),
    ])
    assert row.mean_auc == pytest.approx(0.9)
    assert row.std_auc == pytest.approx(0.1)
    assert (row.trials_ok, row.trials_failed) == (39, 1)
    assert row.parse_error_rate == pytest.approx(10 / 80)
    assert row.wall_seconds == 0.0

    markdown = Report([row]).to_markdown()
    lines = markdown.splitlines()
    assert lines[0] == ("| dataset | shots | ablation | AUC | trials ok | trials failed | parse error rate "
                        "| wall seconds |")
    assert lines[2] == "| solution_mix | 4 | none | 0.9000 ± 0.1000 | 39 | 1 | 0.1250 | 0.00 |"


def test_solution_mix_ensemble_is_diverse_but_agrees_on_the_signal(solution_mix, mix_client):
    schema, task, data = solution_mix
    plan = plan_repeat(data, mix_experiment(), 0)
    model = fit_ensemble(mix_client, task, schema, plan.shots(data),
                         EnsembleConfig(num_trials=4, workers=1, train=TrainConfig(max_epochs=10)))
    mean, variance = ensemble_diversity(model, plan.test(data).rows)
    assert 0.0 < mean <= 1.0
    assert variance >= 0.0


def test_distractor_weights_are_trained(solution_mix, mix_client):
    schema, task, data = solution_mix
    plan = plan_repeat(data, mix_experiment(), 0)
    model = fit_ensemble(mix_client, task, schema, plan.shots(data), EnsembleConfig(num_trials=4, workers=1))
    start = 1.0 / 10
    for record in model.trials:
        assert record.model.trained_epochs >= 1
        # the mixture rule separates every shot, so it only ever grows
        assert all(w[0] > start for w in record.model.weights)
        assert any(np.any(np.abs(w[1:] - start) > 1e-3) for w in record.model.weights)


def test_more_trials_beat_one_on_partial_rules(solution_mix):
    schema, task, data = solution_mix
    client = ScriptedClient(weak_solution_mix_responder)
    cfg = mix_experiment(repeats=10, ensemble=EnsembleConfig(num_trials=20, workers=2,
                                                             train=TrainConfig(max_epochs=50)))
    ensemble = run_experiment(cfg, client, schema, task, data)
    single = run_experiment(replace(cfg, ablations=('no_ensemble',)), client, schema, task, data)
    assert (ensemble.row.trials_ok, single.row.trials_ok) == (200, 10)
    assert ensemble.row.mean_auc >= single.row.mean_auc
