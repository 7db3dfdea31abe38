"""
On-disk artifacts of a run: manifest, per-trial rule caches and model files,
per-repeat predictions, and the report.

JSON is written sorted and indented so identical runs produce identical bytes.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from featling.ensemble import EnsembleModel, TrialExtraction, TrialFailure, TrialRecord
from featling.evaluation import REPORT_COLUMNS, RepeatPlan, Report
from featling.model import TrialModel
from featling.prompt import TrialContext
from featling.ruledsl import MissingStrategy, RuleSet
from featling.schema import FeatureSchema, LabeledSet

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
REPORT_CSV = 'report.csv'
REPORT_MD = 'report.md'


class ArtifactMissingError(FileNotFoundError):
    """A stage needs files an earlier stage has not written."""


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write('\n')


def read_json(path: Path, hint: str = '') -> Any:
    if not path.exists():
        raise ArtifactMissingError(f"Missing {path}{f' (run {hint} first)' if hint else ''}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def extraction_entry(extraction: TrialExtraction) -> Dict:
    return {
        'index': extraction.index,
        'status': 'ok',
        'attempts': extraction.attempts,
        'prompt_sha256': extraction.prompt_sha256,
        'context': extraction.context.to_dict(),
        'parse_stats': extraction.parse_stats,
    }


def failure_entry(failure: TrialFailure) -> Dict:
    entry = failure.to_dict()
    entry['status'] = 'failed'
    return entry


def failure_from_entry(entry: Dict) -> TrialFailure:
    context = entry.get('context')
    return TrialFailure(
        index=int(entry['index']),
        reason=entry['reason'],
        message=entry['message'],
        attempts=int(entry['attempts']),
        context=TrialContext.from_dict(context) if context else None,
    )


class ArtifactStore:
    """Paths and readers/writers for everything under one output directory."""

    def __init__(self, out_dir: Union[str, Path]):
        self.root = Path(out_dir)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def repeat_dir(self, repeat: int) -> Path:
        return self.root / f"repeat{repeat}"

    def rules_path(self, repeat: int, trial: int) -> Path:
        return self.repeat_dir(repeat) / 'rules' / f"trial{trial}.json"

    def model_path(self, repeat: int, trial: int) -> Path:
        return self.repeat_dir(repeat) / 'models' / f"trial{trial}.json"

    def predictions_path(self, repeat: int) -> Path:
        return self.repeat_dir(repeat) / 'predictions.csv'

    # -- manifest ----------------------------------------------------------

    def write_manifest(self, run_config: Dict, experiment: Dict, classes: Sequence[str],
                       repeats: List[Dict]) -> Path:
        write_json(self.manifest_path, {
            'classes': list(classes),
            'experiment': experiment,
            'repeats': repeats,
            'run_config': run_config,
        })
        return self.manifest_path

    def read_manifest(self) -> Dict:
        return read_json(self.manifest_path, hint='extract')

    @staticmethod
    def repeat_entry(plan: RepeatPlan, ensemble_config: Dict, extractions: Sequence[TrialExtraction],
                     failures: Sequence[TrialFailure]) -> Dict:
        trials = [extraction_entry(e) for e in extractions] + [failure_entry(f) for f in failures]
        entry = plan.to_dict()
        entry['ensemble'] = ensemble_config
        entry['trials'] = sorted(trials, key=lambda t: t['index'])
        return entry

    # -- rules -------------------------------------------------------------

    def write_rules(self, repeat: int, extraction: TrialExtraction) -> Path:
        path = self.rules_path(repeat, extraction.index)
        write_json(path, {
            'trial': extraction.index,
            'attempts': extraction.attempts,
            'context': extraction.context.to_dict(),
            'prompt_sha256': extraction.prompt_sha256,
            'rulesets': [rs.to_dict() for rs in extraction.rulesets],
        })
        return path

    def read_extraction(self, repeat: int, trial: int, schema: FeatureSchema) -> TrialExtraction:
        data = read_json(self.rules_path(repeat, trial), hint='extract')
        return TrialExtraction(
            index=int(data['trial']),
            context=TrialContext.from_dict(data['context']),
            rulesets=tuple(RuleSet.from_dict(rs, schema) for rs in data['rulesets']),
            prompt_sha256=data['prompt_sha256'],
            attempts=int(data.get('attempts', 1)),
        )

    def read_repeat_extractions(self, entry: Dict, schema: FeatureSchema
                                ) -> Tuple[List[TrialExtraction], List[TrialFailure]]:
        repeat = int(entry['repeat'])
        extractions = [self.read_extraction(repeat, int(t['index']), schema)
                       for t in entry['trials'] if t['status'] == 'ok']
        failures = [failure_from_entry(t) for t in entry['trials'] if t['status'] == 'failed']
        return extractions, failures

    # -- models ------------------------------------------------------------

    def write_model(self, repeat: int, record: TrialRecord) -> Path:
        data = record.model.to_dict()
        data['trial'] = record.index
        data['fill_tables'] = (None if record.fill_tables is None
                               else [[float(x) for x in table] for table in record.fill_tables])
        path = self.model_path(repeat, record.index)
        write_json(path, data)
        return path

    def write_ensemble(self, repeat: int, model: EnsembleModel) -> None:
        for record in model.trials:
            self.write_model(repeat, record)
        logger.info(f"Repeat {repeat}: wrote {len(model.trials)} model file(s)")

    def read_ensemble(self, entry: Dict, schema: FeatureSchema, classes: Sequence[str]) -> EnsembleModel:
        """Rebuild a repeat's ensemble from its rule caches and model files."""
        repeat = int(entry['repeat'])
        extractions, failures = self.read_repeat_extractions(entry, schema)
        records = []
        for extraction in extractions:
            data = read_json(self.model_path(repeat, extraction.index), hint='train')
            tables = data.get('fill_tables')
            records.append(TrialRecord(
                extraction=extraction,
                model=TrialModel.from_dict(data),
                fill_tables=None if tables is None else [np.asarray(t, dtype=float) for t in tables],
            ))
        config = entry['ensemble']
        return EnsembleModel(classes=tuple(classes), trials=records, failures=failures, config=config,
                             missing=MissingStrategy(config['missing']))

    # -- predictions and report -------------------------------------------

    def write_predictions(self, plan: RepeatPlan, test: LabeledSet, probs: np.ndarray,
                          predicted: Sequence[str]) -> Path:
        frame = pd.DataFrame({'row': list(plan.test_indices), 'label': list(test.labels)})
        for k, label in enumerate(test.classes):
            frame[f"p_{label}"] = [float(p) for p in probs[:, k]]
        frame['predicted'] = list(predicted)
        path = self.predictions_path(plan.repeat)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    def write_report(self, report: Report) -> Tuple[Path, Path]:
        self.root.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame([row.to_dict() for row in report.rows], columns=REPORT_COLUMNS)
        csv_path, md_path = self.root / REPORT_CSV, self.root / REPORT_MD
        frame.to_csv(csv_path, index=False)
        md_path.write_text(report.to_markdown(), encoding='utf-8')
        logger.info(f"Report written to {csv_path} and {md_path}")
        return csv_path, md_path


def load_classes(manifest: Dict) -> Tuple[str, ...]:
    return tuple(manifest['classes'])


def find_repeat(manifest: Dict, repeat: int) -> Optional[Dict]:
    for entry in manifest['repeats']:
        if int(entry['repeat']) == repeat:
            return entry
    return None
