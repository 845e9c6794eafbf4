"""
Segmentation and grading metrics: Dice, average symmetric surface distance (ASSD) and the macro-averaged
mean squared error of Koos grades (MAMSE), plus per-case / aggregate reports in the layout of the
method comparison table.

Conventions:
- dice of two empty masks is 1.0.
- ASSD boundary voxels are foreground voxels with at least one face-adjacent background voxel (6-connectivity,
  outside the grid counts as background). ASSD is the mean of the two directional mean boundary-to-boundary
  distances in mm, and NaN (reported as missing) when either mask is empty.
- MAMSE = mean over the grades present in the truth of the MSE of the subjects with that true grade.
"""
import json
import logging
import math
import os
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from vsadapt.errors import ArgumentError, EvaluationError, VsAdaptError
from vsadapt.volume import LabeledVolume

logger = logging.getLogger("vsadapt.evalmetrics")

STRUCTURES = {"VS": 1, "Cochlea": 2}
METRICS = ("dice", "assd")
GRADES = (1, 2, 3, 4)
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _binary_pair(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ArgumentError(f'mask shapes differ: {pred.shape} vs {truth.shape}')
    return pred, truth


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _binary_pair(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    structure = _SIX_CONNECTED if mask.ndim == 3 else ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def assd(pred: np.ndarray, truth: np.ndarray, spacing: Sequence[float]) -> float:
    pred, truth = _binary_pair(pred, truth)
    if len(spacing) != pred.ndim:
        raise ArgumentError(f'spacing {tuple(spacing)} does not match mask rank {pred.ndim}')
    if not pred.any() or not truth.any():
        return float('nan')
    pred_edge, truth_edge = boundary(pred), boundary(truth)
    to_truth = ndimage.distance_transform_edt(~truth_edge, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~pred_edge, sampling=spacing)
    return 0.5 * (float(to_truth[pred_edge].mean()) + float(to_pred[truth_edge].mean()))


def _grades(values: Sequence[int], name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    if values.ndim != 1:
        raise ArgumentError(f'{name} must be a vector')
    if not np.isin(values, GRADES).all():
        raise ArgumentError(f'{name} must hold grades in {GRADES}, got {np.unique(values).tolist()}')
    return values


def per_grade_mse(pred_grades: Sequence[int], true_grades: Sequence[int]) -> Dict[int, float]:
    pred, truth = _grades(pred_grades, 'pred_grades'), _grades(true_grades, 'true_grades')
    if pred.shape != truth.shape:
        raise ArgumentError(f'{len(pred)} predictions for {len(truth)} true grades')
    if len(truth) == 0:
        raise ArgumentError('cannot compute MAMSE of an empty cohort')
    return {int(k): float(np.mean((pred[truth == k] - k) ** 2)) for k in np.unique(truth)}


def mamse(pred_grades: Sequence[int], true_grades: Sequence[int]) -> float:
    return float(np.mean(list(per_grade_mse(pred_grades, true_grades).values())))


def confusion(pred_grades: Sequence[int], true_grades: Sequence[int]) -> List[List[int]]:
    """4x4 counts, rows are true grades and columns predicted grades."""
    counts = np.zeros((len(GRADES), len(GRADES)), dtype=int)
    for p, t in zip(_grades(pred_grades, 'pred_grades'), _grades(true_grades, 'true_grades')):
        counts[t - 1, p - 1] += 1
    return counts.tolist()


@dataclass(frozen=True)
class CaseMetrics:
    subject_id: str
    structure: str
    dice: float
    assd: float


@dataclass
class KoosMetrics:
    mamse: float
    per_grade: Dict[int, float]
    confusion: List[List[int]]
    n_subjects: int


def aggregate(per_case: Sequence[CaseMetrics]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """structure -> metric -> {mean, std, n}; NaN values (undefined ASSD) are left out; std has ddof 0."""
    result: Dict[str, Dict[str, Dict[str, float]]] = {}
    if not per_case:
        return result
    frame = pd.DataFrame([asdict(c) for c in per_case])
    for structure, rows in frame.groupby('structure', sort=False):
        result[structure] = {}
        for metric in METRICS:
            values = rows[metric].dropna()
            result[structure][metric] = {
                'mean': float(values.mean()) if len(values) else float('nan'),
                'std': float(values.std(ddof=0)) if len(values) else float('nan'),
                'n': int(len(values)),
            }
    return result


def _close(a: float, b: float, tol: float) -> bool:
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return abs(a - b) <= tol


@dataclass
class MetricReport:
    name: str
    per_case: List[CaseMetrics] = field(default_factory=list)
    aggregate: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)
    koos: Optional[KoosMetrics] = None
    missing: List[str] = field(default_factory=list)

    def verify(self, tol: float = 1e-9) -> None:
        """Raise EvaluationError unless `aggregate` equals the recomputation from `per_case`."""
        expected = aggregate(self.per_case)
        if set(expected) != set(self.aggregate):
            raise EvaluationError(f'{self.name}: aggregate structures {sorted(self.aggregate)} '
                                  f'differ from per-case structures {sorted(expected)}')
        for structure, metrics in expected.items():
            for metric, stats in metrics.items():
                stored = self.aggregate[structure][metric]
                if stored['n'] != stats['n'] or not all(_close(stored[k], stats[k], tol) for k in ('mean', 'std')):
                    raise EvaluationError(f'{self.name}: aggregate {structure}/{metric} {stored} does not match '
                                          f'per-case recomputation {stats}')

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(c) for c in self.per_case], columns=['subject_id', 'structure', 'dice', 'assd'])

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'per_case': [asdict(c) for c in self.per_case],
            'aggregate': self.aggregate,
            'koos': None if self.koos is None else {**asdict(self.koos),
                                                     'per_grade': {str(k): v for k, v in self.koos.per_grade.items()}},
            'missing': self.missing,
        }

    def table_row(self) -> Dict[str, str]:
        """One row of the comparison table: `mean±std` per structure and metric."""
        row = {'variant': self.name}
        for structure in STRUCTURES:
            for metric, label in (('dice', 'Dice'), ('assd', 'ASSD')):
                stats = self.aggregate.get(structure, {}).get(metric)
                row[f'{structure} {label}'] = '' if stats is None else f"{stats['mean']:.4f}±{stats['std']:.4f}"
        row['Koos MAMSE'] = '' if self.koos is None else f'{self.koos.mamse:.4f}'
        return row

    def write(self, out_dir: Union[str, os.PathLike]) -> Path:
        """Writes per_case.csv, aggregate.csv and report.json into `out_dir`; returns the JSON path."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / 'per_case.csv', index=False)
        rows = [{'structure': s, 'metric': m, **stats}
                for s, metrics in self.aggregate.items() for m, stats in metrics.items()]
        pd.DataFrame(rows, columns=['structure', 'metric', 'mean', 'std', 'n']).to_csv(out_dir / 'aggregate.csv',
                                                                                        index=False)
        path = out_dir / 'report.json'
        tmp = path.with_name(path.name + '.tmp')
        tmp.write_text(json.dumps(self.to_dict(), indent=2))
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, path: Union[str, os.PathLike]) -> "MetricReport":
        try:
            data = json.loads(Path(path).read_text())
            koos = data.get('koos')
            report = cls(
                name=data['name'],
                per_case=[CaseMetrics(**row) for row in data['per_case']],
                aggregate=data['aggregate'],
                koos=None if koos is None else KoosMetrics(
                    mamse=koos['mamse'], per_grade={int(k): v for k, v in koos['per_grade'].items()},
                    confusion=koos['confusion'], n_subjects=koos['n_subjects']),
                missing=list(data.get('missing', [])),
            )
        except (OSError, ValueError, KeyError, TypeError) as e:
            logger.error(f'Could not read report {path}: ' + traceback.format_exc())
            raise EvaluationError(f'unreadable report {path}: {e}') from e
        report.verify()
        return report


def case_metrics(subject_id: str, pred: np.ndarray, truth: LabeledVolume) -> List[CaseMetrics]:
    pred = np.asarray(pred)
    if pred.shape != truth.vs_mask.shape:
        raise ArgumentError(f'{subject_id}: prediction shape {pred.shape} differs from truth {truth.vs_mask.shape}')
    return [CaseMetrics(subject_id, structure, dice(pred == label, truth.vs_mask == label),
                        assd(pred == label, truth.vs_mask == label, truth.image.spacing))
            for structure, label in STRUCTURES.items()]


def report(preds: Mapping[str, np.ndarray], truths: Mapping[str, LabeledVolume], name: str = 'msfnet',
           koos_preds: Optional[Mapping[str, int]] = None, koos_truths: Optional[Mapping[str, int]] = None,
           out_dir: Optional[Union[str, os.PathLike]] = None) -> MetricReport:
    """
    Metrics for every subject present in both `preds` and `truths`. Subjects without a prediction are
    listed in `missing` and excluded; an empty overlap raises EvaluationError.
    """
    logger.info(f'report({name}: {len(preds)} predictions, {len(truths)} references)')
    missing = sorted(set(truths) - set(preds))
    if missing:
        logger.warning(f'{len(missing)} subjects have no prediction: {missing}')
    evaluated = [s for s in truths if s in preds]
    if not evaluated:
        raise EvaluationError('no predictions for any reference subject', missing=missing)

    result = MetricReport(name=name, missing=missing)
    for subject_id in evaluated:
        try:
            result.per_case.extend(case_metrics(subject_id, preds[subject_id], truths[subject_id]))
        except VsAdaptError:
            logger.error(f'Evaluation failed for {subject_id}: ' + traceback.format_exc())
            result.missing.append(subject_id)
    result.aggregate = aggregate(result.per_case)

    if koos_preds and koos_truths:
        graded = [s for s in koos_truths if s in koos_preds]
        if graded:
            p = [koos_preds[s] for s in graded]
            t = [koos_truths[s] for s in graded]
            result.koos = KoosMetrics(mamse=mamse(p, t), per_grade=per_grade_mse(p, t), confusion=confusion(p, t),
                                      n_subjects=len(graded))
    if out_dir is not None:
        result.write(out_dir)
    return result


def write_table(reports: Sequence[MetricReport], out_dir: Union[str, os.PathLike]) -> Path:
    """table.csv and table.md with one row per report; returns the CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.table_row() for r in reports],
                         columns=['variant'] + [f'{s} {m}' for s in STRUCTURES for m in ('Dice', 'ASSD')]
                         + ['Koos MAMSE'])
    frame.to_csv(out_dir / 'table.csv', index=False)
    lines = ['| ' + ' | '.join(frame.columns) + ' |', '|' + '---|' * len(frame.columns)]
    lines += ['| ' + ' | '.join(str(v) for v in row) + ' |' for row in frame.itertuples(index=False)]
    (out_dir / 'table.md').write_text('\n'.join(lines) + '\n')
    return out_dir / 'table.csv'
