"""
Experiment driver: case-level splits, training, evaluation and the Report.

A run trains the EEM/lumen pair federated or centralized on the training
cases of every split (five folds or one holdout), segments the held-out
cases and scores them against the phantom ground truth.
"""
from dataclasses import dataclass, field, replace
import logging
import time
from typing import Optional, Sequence

import numpy as np

from fedseg.config_loader import config_to_dict
from fedseg.data_processing import (
    INDICATORS, aggregate_folds, band_confusion, build_frame_dataset, summarize_folds,
)
from fedseg.errors import ConfigError, PartitionError
from fedseg.fedavg import RoundLog, TrainingTask, server_run, train_centralized
from fedseg.losses import STRUCTURES, BlandAltmanResult, MetricsRecord, bland_altman, overlap_counts, scores_from_counts
from fedseg.models import AppConfig, BurdenBand, CoordinateMode, PipelineConfig, PolarGrid, UNetConfig
from fedseg.params import ModelParams
from fedseg.phantom import DatasetManifest, PhantomCase, load_manifest_cases, partition_clients
from fedseg.pipeline import case_volumes, frame_areas, resolve_pipeline, segment_frames
from fedseg.run_clock import RunClock
from fedseg.unet import SegmentationPair, initial_global_params, parameter_layout
from fedseg.utils import derive_seed, package_versions, timed

logger = logging.getLogger(__name__)

REFERENCE_DSC = {
    'note': 'not comparable (different data)',
    'expert_annotations': {'eem': 0.753, 'lumen': 0.793, 'plaque': 0.778},
    'proposed_approach': {'eem': 0.890, 'lumen': 0.877, 'plaque': 0.706},
}


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FoldPlan:
    """Case-level fold assignment; fold sizes differ by at most one."""

    assignments: dict[str, int]
    k: int
    seed: int

    def fold_cases(self, fold: int, order: Sequence[str]) -> list[str]:
        return [case_id for case_id in order if self.assignments[case_id] == fold]

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for fold in self.assignments.values():
            sizes[fold] += 1
        return sizes

    def to_dict(self) -> dict:
        return {'k': self.k, 'seed': self.seed, 'assignments': dict(self.assignments)}

    @classmethod
    def from_dict(cls, data: dict) -> 'FoldPlan':
        return cls(assignments={k: int(v) for k, v in data['assignments'].items()},
                   k=int(data['k']), seed=int(data['seed']))


def make_folds(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """
    Seeded shuffle of the cases, then dealt round-robin into ``k`` folds.

    Raises:
        ConfigError: k < 2, fewer cases than folds or duplicate case ids
    """
    ids = list(case_ids)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise ConfigError(f"{len(ids)} cases cannot fill {k} folds")
    if len(set(ids)) != len(ids):
        raise ConfigError("case ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[index]: position % k for position, index in enumerate(order)}
    return FoldPlan(assignments=assignments, k=k, seed=seed)


def holdout_split(case_ids: Sequence[str], fraction: float, seed: int,
                  min_train: int = 1) -> tuple[list[str], list[str]]:
    """
    Seeded train/holdout split; the holdout gets round(n * fraction) cases, at least one.

    Both lists keep the input order.
    """
    ids = list(case_ids)
    n_hold = max(1, int(round(len(ids) * fraction)))
    if len(ids) - n_hold < min_train:
        raise ConfigError(
            f"{len(ids)} cases leave {len(ids) - n_hold} for training, need {min_train}"
        )
    held = set(ids[i] for i in np.random.default_rng(seed).permutation(len(ids))[:n_hold])
    return [c for c in ids if c not in held], [c for c in ids if c in held]


@dataclass(frozen=True)
class Split:
    fold: int
    train_ids: list[str]
    test_ids: list[str]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
@dataclass
class CaseEvaluation:
    """Scores of one case plus its manual and automatic indicator values."""

    case_id: str
    records: dict[str, MetricsRecord]
    manual: dict[str, float]
    auto: dict[str, float]
    n_frames: int
    inference_s: float


def _indicators(areas_mm2: np.ndarray, burdens: np.ndarray, frame_spacing_mm: float) -> dict[str, float]:
    eem_vol, lumen_vol, plaque_vol = case_volumes(areas_mm2.tolist(), frame_spacing_mm)
    means = areas_mm2.mean(axis=0)
    return {
        'eem_area': float(means[0]),
        'lumen_area': float(means[1]),
        'plaque_area': float(means[2]),
        'burden_index': float(burdens.mean()),
        'eem_volume': eem_vol,
        'lumen_volume': lumen_vol,
        'plaque_volume': plaque_vol,
    }


def evaluate_case(case: PhantomCase, pair: SegmentationPair, pipeline: PipelineConfig) -> CaseEvaluation:
    """
    Segment every frame of ``case`` and score it.

    Overlap counts are pooled over the case's frames before DSC, recall and
    precision are computed; areas are per-frame means and volumes use
    disc summation over the frame spacing.
    """
    start = time.perf_counter()
    results = segment_frames(case.frames, pair.eem, pair.lumen, pipeline)
    elapsed = time.perf_counter() - start

    pixel_area = case.pixel_spacing_mm ** 2
    truth = {
        'eem': case.eem_masks,
        'lumen': case.lumen_masks & case.eem_masks,
        'plaque': case.plaque_masks,
    }
    counts = {structure: np.zeros(3, dtype=np.int64) for structure in STRUCTURES}
    auto_px, manual_px, auto_burden, manual_burden = [], [], [], []
    for index, result in enumerate(results):
        predicted = {'eem': result.eem_mask, 'lumen': result.lumen_mask, 'plaque': result.plaque_mask}
        for structure in STRUCTURES:
            counts[structure] += overlap_counts(predicted[structure], truth[structure][index])
        auto = frame_areas(result.eem_mask, result.lumen_mask, result.plaque_mask)
        manual = frame_areas(truth['eem'][index], truth['lumen'][index], truth['plaque'][index])
        auto_px.append((auto.eem_px, auto.lumen_px, auto.plaque_px))
        manual_px.append((manual.eem_px, manual.lumen_px, manual.plaque_px))
        auto_burden.append(auto.burden_index)
        manual_burden.append(manual.burden_index)

    auto_px_arr = np.asarray(auto_px, dtype=np.float64)
    auto_values = _indicators(auto_px_arr * pixel_area, np.asarray(auto_burden), case.frame_spacing_mm)
    manual_values = _indicators(np.asarray(manual_px, dtype=np.float64) * pixel_area,
                                np.asarray(manual_burden), case.frame_spacing_mm)
    mean_px = auto_px_arr.mean(axis=0)
    records = {}
    for column, structure in enumerate(STRUCTURES):
        dice, recall, precision = scores_from_counts(*(int(v) for v in counts[structure]))
        records[structure] = MetricsRecord(
            case_id=case.case_id,
            structure=structure,
            dsc=dice,
            recall=recall,
            precision=precision,
            area_mm2=auto_values[f'{structure}_area'],
            volume_mm3=auto_values[f'{structure}_volume'],
            burden_index=auto_values['burden_index'],
            area_px=float(mean_px[column]),
        )
    return CaseEvaluation(case.case_id, records, manual_values, auto_values, case.n_frames, elapsed)


def evaluate_cases(params: ModelParams, cases: Sequence[PhantomCase], unet: UNetConfig,
                   pipeline: PipelineConfig) -> list[CaseEvaluation]:
    pair = SegmentationPair.from_params(unet, params)
    return [evaluate_case(case, pair, pipeline) for case in cases]


def mean_dsc(evaluations: Sequence[CaseEvaluation]) -> dict[str, float]:
    """Mean DSC per structure over cases, keyed '<structure>_dsc'."""
    if not evaluations:
        return {}
    return {
        f'{structure}_dsc': float(np.mean([e.records[structure].dsc for e in evaluations]))
        for structure in STRUCTURES
    }


def agreement(evaluations: Sequence[CaseEvaluation]) -> dict[str, BlandAltmanResult]:
    """Bland-Altman result per indicator; empty when fewer than two cases were scored."""
    if len(evaluations) < 2:
        if evaluations:
            logger.warning("Bland-Altman needs at least two cases, got %d; skipped", len(evaluations))
        return {}
    return {
        name: bland_altman([e.manual[name] for e in evaluations], [e.auto[name] for e in evaluations])
        for name in INDICATORS
    }


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------
@dataclass
class ExperimentSpec:
    """One training/evaluation run."""

    manifest: DatasetManifest
    config: AppConfig = field(default_factory=AppConfig)
    mode: str = 'federated'
    coords: str = 'cartesian'
    post: bool = True
    partition_mode: str = 'iid'
    transport: str = 'in_process'
    protocol: Optional[str] = None

    def validate(self) -> None:
        if self.mode not in ('federated', 'centralized'):
            raise ConfigError(f"mode must be 'federated' or 'centralized', got {self.mode!r}")
        if self.coords not in ('cartesian', 'polar'):
            raise ConfigError(f"coords must be 'cartesian' or 'polar', got {self.coords!r}")
        if self.resolved_protocol not in ('holdout', 'cv'):
            raise ConfigError(f"protocol must be 'holdout' or 'cv', got {self.resolved_protocol!r}")

    @property
    def resolved_protocol(self) -> str:
        return self.protocol or self.config.experiment.protocol

    @property
    def image_size(self) -> int:
        return self.manifest.phantom.image_size

    def pipeline_config(self) -> PipelineConfig:
        grid = self.config.pipeline.grid or PolarGrid.desk(self.image_size)
        return resolve_pipeline(self.coords, self.post, grid, self.config.pipeline.binarize_threshold)

    def task(self) -> TrainingTask:
        pipeline = self.pipeline_config()
        fed = self.config.fed
        if self.mode == 'centralized':
            fed = replace(fed, n_clients=1)
        return TrainingTask(fed=fed, unet=unet_for_pipeline(self.config.unet, pipeline, self.image_size))

    def describe(self) -> dict:
        return {
            'mode': self.mode,
            'coords': self.coords,
            'post': self.post,
            'protocol': self.resolved_protocol,
            'partition_mode': self.partition_mode,
            'transport': self.transport,
        }


def unet_for_pipeline(unet: UNetConfig, pipeline: PipelineConfig, image_size: int) -> UNetConfig:
    """Network config whose input matches the pipeline's model space."""
    if pipeline.coordinate_mode is CoordinateMode.POLAR:
        rows, cols = pipeline.grid.shape
        return replace(unet, input_shape=(1, rows, cols))
    return replace(unet, input_shape=(1, image_size, image_size))


def pair_param_count(unet: UNetConfig) -> int:
    return 2 * sum(int(np.prod(shape)) for _, shape in parameter_layout(unet))


@dataclass
class Report:
    """Everything a run produced, in report.json form."""

    spec: dict
    fold_records: dict[int, list[MetricsRecord]] = field(default_factory=dict)
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)
    baseline: dict[str, dict[str, float]] = field(default_factory=dict)
    bland_altman: dict[str, BlandAltmanResult] = field(default_factory=dict)
    band_confusion: list[list[int]] = field(default_factory=list)
    band_accuracy: Optional[float] = None
    fold_plan: dict = field(default_factory=dict)
    round_logs: dict[int, list[RoundLog]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    weights: dict[int, ModelParams] = field(default_factory=dict, repr=False)

    @property
    def records(self) -> list[MetricsRecord]:
        return [record for fold in sorted(self.fold_records) for record in self.fold_records[fold]]

    def to_dict(self) -> dict:
        return {
            'spec': dict(self.spec),
            'fold_records': {str(k): [r.to_dict() for r in v] for k, v in sorted(self.fold_records.items())},
            'aggregates': self.aggregates,
            'baseline': self.baseline,
            'bland_altman': {k: v.to_dict() for k, v in self.bland_altman.items()},
            'band_confusion': self.band_confusion,
            'band_accuracy': self.band_accuracy,
            'fold_plan': self.fold_plan,
            'round_logs': {str(k): [log.to_dict() for log in v] for k, v in sorted(self.round_logs.items())},
            'metadata': self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Report':
        return cls(
            spec=dict(data.get('spec', {})),
            fold_records={int(k): [MetricsRecord(**r) for r in v]
                          for k, v in data.get('fold_records', {}).items()},
            aggregates=data.get('aggregates', {}),
            baseline=data.get('baseline', {}),
            bland_altman={k: BlandAltmanResult.from_dict(v) for k, v in data.get('bland_altman', {}).items()},
            band_confusion=data.get('band_confusion', []),
            band_accuracy=data.get('band_accuracy'),
            fold_plan=data.get('fold_plan', {}),
            round_logs={int(k): [RoundLog.from_dict(log) for log in v]
                        for k, v in data.get('round_logs', {}).items()},
            metadata=data.get('metadata', {}),
        )


def plan_splits(spec: ExperimentSpec) -> tuple[list[Split], dict]:
    """Training/test case lists per split plus the plan as stored in the report."""
    case_ids = spec.manifest.case_ids
    settings = spec.config.experiment
    seed = spec.config.fed.seed
    min_train = spec.config.fed.n_clients if spec.mode == 'federated' else 1
    if spec.resolved_protocol == 'cv':
        plan = make_folds(case_ids, settings.folds, derive_seed(seed, 'folds'))
        splits = []
        for fold in range(plan.k):
            test_ids = plan.fold_cases(fold, case_ids)
            train_ids = [c for c in case_ids if plan.assignments[c] != fold]
            if len(train_ids) < min_train:
                raise PartitionError(f"fold {fold} leaves {len(train_ids)} training cases for {min_train} clients")
            splits.append(Split(fold, train_ids, test_ids))
        return splits, {'protocol': 'cv', **plan.to_dict()}
    holdout_seed = derive_seed(seed, 'holdout')
    train_ids, test_ids = holdout_split(case_ids, settings.holdout_fraction, holdout_seed, min_train)
    return [Split(0, train_ids, test_ids)], {
        'protocol': 'holdout', 'seed': holdout_seed, 'train': train_ids, 'holdout': test_ids,
    }


def _train(spec: ExperimentSpec, task: TrainingTask, pipeline: PipelineConfig,
           cases: dict[str, PhantomCase], split: Split) -> tuple[ModelParams, list[RoundLog]]:
    test_cases = [cases[c] for c in split.test_ids]

    def evaluate(params: ModelParams) -> dict[str, float]:
        return mean_dsc(evaluate_cases(params, test_cases, task.unet, pipeline))

    train_entries = [spec.manifest.entry(c) for c in split.train_ids]
    if spec.mode == 'centralized':
        dataset = build_frame_dataset([cases[e.case_id] for e in train_entries], pipeline)
        return train_centralized(dataset, task, evaluate)
    partitions = partition_clients(train_entries, task.fed.n_clients, spec.partition_mode)
    datasets = [build_frame_dataset([cases[e.case_id] for e in bucket], pipeline) for bucket in partitions]
    logger.info("Fold %d: %s frames per client", split.fold, [len(d) for d in datasets])
    return server_run(datasets, task, transport=spec.transport, evaluate=evaluate)


def run_experiment(spec: ExperimentSpec) -> Report:
    """
    Train and evaluate per ``spec``.

    Returns:
        Report with per-case records per fold, fold-mean aggregates, the
        untrained baseline, Bland-Altman agreement of all indicators,
        risk-band confusion and run metadata

    Raises:
        ConfigError: Invalid spec or configuration
        PartitionError: Too few training cases for the client count
    """
    clock = RunClock()
    spec.validate()
    pipeline = spec.pipeline_config()
    pipeline.validate()
    task = spec.task()
    task.validate()
    splits, plan = plan_splits(spec)
    logger.info("Experiment %s started: %d split(s), %d cases", spec.describe(), len(splits),
                len(spec.manifest.cases))

    timings: dict[str, float] = {}
    with timed('load_s', timings):
        cases = load_manifest_cases(spec.manifest)

    report = Report(spec=spec.describe(), fold_plan=plan)
    evaluations: list[CaseEvaluation] = []
    baseline_records: dict[int, list[MetricsRecord]] = {}
    for split in splits:
        with timed('train_s', timings):
            params, logs = _train(spec, task, pipeline, cases, split)
        test_cases = [cases[c] for c in split.test_ids]
        with timed('eval_s', timings):
            fold_evals = evaluate_cases(params, test_cases, task.unet, pipeline)
        if spec.config.experiment.include_baseline:
            with timed('baseline_s', timings):
                untrained = evaluate_cases(initial_global_params(task.unet), test_cases, task.unet, pipeline)
            baseline_records[split.fold] = [r for e in untrained for r in e.records.values()]
        report.fold_records[split.fold] = [r for e in fold_evals for r in e.records.values()]
        report.round_logs[split.fold] = logs
        report.weights[split.fold] = params
        evaluations.extend(fold_evals)
        logger.info("Fold %d done: %s", split.fold, mean_dsc(fold_evals))

    report.baseline = aggregate_folds(summarize_folds(baseline_records))
    finalize_report(report, evaluations)
    report.metadata = run_metadata(spec, task, pipeline, timings, evaluations, clock.finish(), plan.get('seed'))
    logger.info("Experiment finished: train %.1fs, eval %.1fs, %s", timings.get('train_s', 0.0),
                timings.get('eval_s', 0.0), {s: round(v['dsc'], 4) for s, v in report.aggregates.items()})
    return report


def finalize_report(report: Report, evaluations: Sequence[CaseEvaluation]) -> Report:
    """Fill aggregates, Bland-Altman agreement and risk-band confusion from the evaluated cases."""
    report.aggregates = aggregate_folds(summarize_folds(report.fold_records))
    report.bland_altman = agreement(evaluations)
    manual_bands = [BurdenBand.classify(e.manual['burden_index']).value for e in evaluations]
    auto_bands = [BurdenBand.classify(e.auto['burden_index']).value for e in evaluations]
    confusion = band_confusion(manual_bands, auto_bands)
    report.band_confusion = confusion.values.tolist()
    report.band_accuracy = (float(np.trace(confusion.values)) / len(evaluations)) if evaluations else None
    return report


def run_metadata(spec: ExperimentSpec, task: TrainingTask, pipeline: PipelineConfig,
                 timings: dict[str, float], evaluations: Sequence[CaseEvaluation], clock: RunClock,
                 split_seed: Optional[int] = None) -> dict:
    """Run stamps, config snapshot, seeds, versions, timings and parameter counts for run.json."""
    total_frames = sum(e.n_frames for e in evaluations)
    timings = dict(timings)
    timings['inference_per_frame_s'] = (
        sum(e.inference_s for e in evaluations) / total_frames if total_frames else 0.0
    )
    image_size = spec.image_size
    grid = spec.config.pipeline.grid or PolarGrid.desk(image_size)
    return {
        **clock.to_dict(),
        'config': config_to_dict(replace(spec.config, fed=task.fed, unet=task.unet, pipeline=pipeline)),
        'seeds': {
            'fed': task.fed.seed,
            'unet': task.unet.seed,
            'dataset': spec.manifest.seed,
            'splits': split_seed,
        },
        'versions': package_versions(),
        'timings': timings,
        'param_counts': {
            'cartesian': pair_param_count(unet_for_pipeline(
                spec.config.unet, resolve_pipeline('cartesian', False), image_size)),
            'polar': pair_param_count(unet_for_pipeline(
                spec.config.unet, resolve_pipeline('polar', False, grid), image_size)),
        },
        'reference_dsc': REFERENCE_DSC,
    }


def evaluate_weights(spec: ExperimentSpec, params: ModelParams,
                     case_ids: Optional[Sequence[str]] = None) -> Report:
    """
    Score saved weights on ``case_ids`` (every manifest case by default).

    Raises:
        ShapeMismatchError: The weights do not fit the spec's network
    """
    clock = RunClock()
    spec.validate()
    pipeline = spec.pipeline_config()
    task = spec.task()
    params.require_layout(initial_global_params(task.unet), 'weights')
    timings: dict[str, float] = {}
    with timed('load_s', timings):
        cases = load_manifest_cases(spec.manifest, case_ids)
    with timed('eval_s', timings):
        evaluations = evaluate_cases(params, list(cases.values()), task.unet, pipeline)
    report = Report(spec={**spec.describe(), 'protocol': 'eval'},
                    fold_records={0: [r for e in evaluations for r in e.records.values()]},
                    fold_plan={'protocol': 'eval', 'cases': list(cases)})
    finalize_report(report, evaluations)
    report.metadata = run_metadata(spec, task, pipeline, timings, evaluations, clock.finish())
    return report
