"""
featling command line.

    python -m featling run --config solution_mix.json --llm scripted
    python -m featling extract|train|predict --config ...
    python -m featling eval --config ...          (baseline + each ablation)
    python -m featling inspect prompt|rules|weights --config ...

Exit codes: 0 success, 1 configuration or missing-artifact error, 2 pipeline failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from featling.artifacts import ArtifactMissingError, ArtifactStore, find_repeat, load_classes
from featling.config import ABLATIONS, WEIGHT_THRESHOLD, ConfigError, RunConfig, load_run_config, setup_logging
from featling.ensemble import extract_ensemble, plan_trial, train_ensemble
from featling.evaluation import (BASELINE, ExperimentConfig, RepeatResult, Report, RepeatPlan, plan_repeat,
                                 run_experiment, score_repeat, summarize)
from featling.llm import LLMClient, make_client
from featling.prompt import build_rule_prompt, full_context
from featling.schema import FeatureSchema, LabeledSet, SchemaError, TaskSpec, load_dataset
from featling.synthetic import generate_synthetic, get_responder

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2

# may differ between extract and the later stages
STAGE_FREE_SETTINGS = ('ensemble.workers',)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        'shots': args.shots,
        'trials': args.trials,
        'seed': args.seed,
        'ablations': args.ablation,
        'missing': args.missing,
        'llm': args.llm,
        'output': args.output,
        'repeats': args.repeats,
        'data': getattr(args, 'shots_csv', None) or args.data,
        'metadata': args.metadata,
    }
    return load_run_config(args.config, overrides)


def load_data(config: RunConfig) -> Tuple[FeatureSchema, TaskSpec, LabeledSet]:
    if config.data.synthetic and not config.data.data_path:
        return generate_synthetic(config.data.synthetic, config.data.n, config.data.seed)
    return load_dataset(config.data.data_path, config.data.metadata_path, strict=config.data.strict)


def build_client(config: RunConfig) -> LLMClient:
    responder = None
    script = config.llm.script or config.data.synthetic
    wants_script = config.llm.kind == 'scripted' or (
        config.llm.kind == 'replay' and config.llm.replay_mode == 'record' and config.llm.record_with == 'scripted')
    if wants_script:
        if not script:
            raise ConfigError("Scripted client needs llm.script (or a synthetic dataset)")
        responder = get_responder(script)
    return make_client(config.llm, responder)


def write_repeat(store: ArtifactStore, result: RepeatResult, data: LabeledSet) -> Dict:
    """Rule caches, model files and predictions of one repeat; returns its manifest entry."""
    model = result.model
    for record in model.trials:
        store.write_rules(result.plan.repeat, record.extraction)
    store.write_ensemble(result.plan.repeat, model)
    store.write_predictions(result.plan, result.plan.test(data), result.probs, result.predicted)
    return store.repeat_entry(result.plan, model.config, [r.extraction for r in model.trials], model.failures)


def execute(config: RunConfig, exp: ExperimentConfig, store: ArtifactStore, client: LLMClient,
            schema: FeatureSchema, task: TaskSpec, data: LabeledSet):
    entries: List[Dict] = []

    def on_repeat(result: RepeatResult) -> None:
        entries.append(write_repeat(store, result, data))
        store.write_manifest(config.to_dict(), exp.to_dict(), task.classes, entries)

    result = run_experiment(exp, client, schema, task, data, on_repeat=on_repeat)
    store.write_report(Report([result.row]))
    return result.row


def changed_settings(recorded: Dict, current: Dict, prefix: str = '') -> List[str]:
    """Dotted keys whose values differ between two nested settings dicts."""
    changed = []
    for key in sorted(set(recorded) | set(current)):
        path = f"{prefix}{key}"
        a, b = recorded.get(key), current.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            changed.extend(changed_settings(a, b, f"{path}."))
        elif a != b and path not in STAGE_FREE_SETTINGS:
            changed.append(path)
    return changed


def read_stage(config: RunConfig, store: ArtifactStore) -> Tuple[Dict, ExperimentConfig]:
    """Manifest and experiment settings for train/predict; they must match what extract recorded."""
    manifest = store.read_manifest()
    exp = ExperimentConfig.from_run_config(config)
    changed = changed_settings(manifest['experiment'], json.loads(json.dumps(exp.to_dict())))
    if changed:
        raise ConfigError(f"Settings differ from {store.manifest_path}: {', '.join(changed)} "
                          f"(use the flags extract ran with, or extract again)")
    return manifest, exp


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args)
    schema, task, data = load_data(config)
    client = build_client(config)
    exp = ExperimentConfig.from_run_config(config)
    row = execute(config, exp, ArtifactStore(config.output_dir), client, schema, task, data)
    print(f"{row.dataset} k={row.shots} {row.ablation}: AUC {row.mean_auc:.4f} ± {row.std_auc:.4f}")
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    config = load_config(args)
    schema, task, data = load_data(config)
    client = build_client(config)
    exp = ExperimentConfig.from_run_config(config)
    store = ArtifactStore(config.output_dir)

    entries = []
    for r in range(exp.repeats):
        plan = plan_repeat(data, exp, r)
        cfg = exp.ensemble_for(r)
        extractions, failures = extract_ensemble(client, task, schema, plan.shots(data), cfg)
        for extraction in extractions:
            store.write_rules(r, extraction)
        entries.append(store.repeat_entry(plan, cfg.to_dict(), extractions, failures))
    store.write_manifest(config.to_dict(), exp.to_dict(), task.classes, entries)
    logger.info(f"Extracted rules for {exp.repeats} repeat(s) into {store.root}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args)
    schema, task, data = load_data(config)
    store = ArtifactStore(config.output_dir)
    manifest, exp = read_stage(config, store)

    for entry in manifest['repeats']:
        plan = RepeatPlan.from_dict(entry)
        extractions, failures = store.read_repeat_extractions(entry, schema)
        model = train_ensemble(extractions, failures, task, plan.shots(data), exp.ensemble_for(plan.repeat))
        store.write_ensemble(plan.repeat, model)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    """Score every repeat from stored models; never builds an LLM client."""
    config = load_config(args)
    schema, task, data = load_data(config)
    store = ArtifactStore(config.output_dir)
    manifest, exp = read_stage(config, store)
    classes = load_classes(manifest)

    summaries = []
    for entry in manifest['repeats']:
        plan = RepeatPlan.from_dict(entry)
        model = store.read_ensemble(entry, schema, classes)
        result = score_repeat(plan, model, data)
        store.write_predictions(plan, plan.test(data), result.probs, result.predicted)
        summaries.append(result.summary)
    row = summarize(exp, summaries)
    store.write_report(Report([row]))
    print(f"{row.dataset} k={row.shots} {row.ablation}: AUC {row.mean_auc:.4f} ± {row.std_auc:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Baseline plus one run per ablation, each under <output>/<ablation>/."""
    config = load_config(args)
    schema, task, data = load_data(config)
    client = build_client(config)
    root = Path(config.output_dir)

    ablations = config.eval.ablations or list(ABLATIONS)
    rows = []
    for chosen in [()] + [(a,) for a in ablations]:
        exp = ExperimentConfig.from_run_config(config, ablations=chosen)
        store = ArtifactStore(root / exp.ablation_label)
        rows.append(execute(config, exp, store, client, schema, task, data))

    report = Report(rows)
    ArtifactStore(root).write_report(report)
    sys.stdout.write(report.to_markdown())
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    config = load_config(args)
    if args.subject == 'prompt':
        return inspect_prompt(config, args)
    schema, task, _ = load_data(config)
    store = ArtifactStore(config.output_dir)
    manifest = store.read_manifest()
    entry = find_repeat(manifest, args.repeat)
    if entry is None:
        raise ArtifactMissingError(f"Repeat {args.repeat} not in {store.manifest_path}")
    if args.subject == 'rules':
        return inspect_rules(store, entry, schema, args)
    return inspect_weights(store, entry, schema, load_classes(manifest), args)


def inspect_prompt(config: RunConfig, args: argparse.Namespace) -> int:
    schema, task, data = load_data(config)
    exp = ExperimentConfig.from_run_config(config)
    if args.shots_csv:
        shots = data
    else:
        shots = plan_repeat(data, exp, args.repeat).shots(data)
    cfg = exp.ensemble_for(args.repeat)
    if args.keep_order:
        ctx = full_context(schema, shots)
    else:
        ctx = plan_trial(args.trial, task, schema, shots, cfg)
    sys.stdout.write(build_rule_prompt(task, schema, shots, ctx, cfg.prompt) + "\n")
    return EXIT_OK


def inspect_rules(store: ArtifactStore, entry: Dict, schema: FeatureSchema, args: argparse.Namespace) -> int:
    extractions, failures = store.read_repeat_extractions(entry, schema)
    for extraction in extractions:
        if args.trial is not None and extraction.index != args.trial:
            continue
        print(f"# trial {extraction.index}")
        for rs in extraction.rulesets:
            print(f'class "{rs.class_label}": {len(rs.rules)} rule(s), {rs.skipped} skipped')
            for rule in rs.to_dict()['rules']:
                print(f"- {rule}")
    for failure in failures:
        if args.trial is None or failure.index == args.trial:
            print(f"# trial {failure.index} failed: {failure.reason}")
    return EXIT_OK


def ranked_rules(rules: Sequence[str], weights: np.ndarray, threshold: float) -> List[Tuple[int, float, str]]:
    """(index, projected weight, rule) by descending weight, ties by index, weight >= threshold."""
    projected = np.maximum(np.asarray(weights, dtype=float), 0.0)
    ranked = sorted(range(len(rules)), key=lambda j: (-projected[j], j))
    return [(j, float(projected[j]), rules[j]) for j in ranked if projected[j] >= threshold]


def inspect_weights(store: ArtifactStore, entry: Dict, schema: FeatureSchema, classes: Sequence[str],
                    args: argparse.Namespace) -> int:
    model = store.read_ensemble(entry, schema, classes)
    for record in model.trials:
        if args.trial is not None and record.index != args.trial:
            continue
        print(f"# trial {record.index} ({record.model.trained_epochs} epochs)")
        for rs, w in zip(record.rulesets, record.model.weights):
            print(f'class "{rs.class_label}":')
            for j, weight, rule in ranked_rules(rs.to_dict()['rules'], w, args.threshold):
                print(f"  {weight:.4f}  [{j}] {rule}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--data", help="CSV data file")
    parser.add_argument("--metadata", help="JSON metadata file")
    parser.add_argument("--shots", type=int)
    parser.add_argument("--trials", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--ablation", action="append", default=[],
                        help=f"repeatable: {', '.join(a.replace('_', '-') for a in ABLATIONS)}")
    parser.add_argument("--missing", choices=["zero", "half", "impute"])
    parser.add_argument("--llm", choices=["http", "replay", "scripted"])
    parser.add_argument("--output", help="output directory")
    parser.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featling", description="Few-shot tabular classification with LLM rules")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_text in [
        ("run", cmd_run, "extract, train, predict and report"),
        ("extract", cmd_extract, "query the LLM and cache parsed rules"),
        ("train", cmd_train, "train trial models from cached rules"),
        ("predict", cmd_predict, "score the test splits from stored models"),
        ("eval", cmd_eval, f"baseline plus each ablation ({BASELINE} first)"),
    ]:
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        p.set_defaults(func=fn)

    inspect = sub.add_parser("inspect", help="print a prompt, cached rules or trained weights")
    inspect.add_argument("subject", choices=["prompt", "rules", "weights"])
    add_common(inspect)
    inspect.add_argument("--repeat", type=int, default=0)
    inspect.add_argument("--trial", type=int)
    inspect.add_argument("--shots-csv", dest="shots_csv", help="use every row of this CSV as the shots")
    inspect.add_argument("--keep-order", action="store_true", help="no shuffling or bagging")
    inspect.add_argument("--threshold", type=float, default=WEIGHT_THRESHOLD)
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    if args.command == 'inspect' and args.subject == 'prompt' and args.trial is None:
        args.trial = 0

    try:
        return args.func(args)
    except (ConfigError, SchemaError, ArtifactMissingError) as e:
        logger.debug("Configuration error", exc_info=True)
        print(f"featling: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.verbose)
        print(f"featling: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
