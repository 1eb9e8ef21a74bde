"""
Data processing for training sets and evaluation tables.
"""

from dataclasses import dataclass
import logging
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from fedseg.errors import EmptyDatasetError, ShapeMismatchError
from fedseg.losses import STRUCTURES, BlandAltmanResult, MetricsRecord
from fedseg.models import BAND_ORDER, PipelineConfig
from fedseg.phantom import PhantomCase
from fedseg.pipeline import model_input, model_target

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    'case_id', 'structure', 'dsc', 'recall', 'precision',
    'area_mm2', 'volume_mm3', 'burden_index', 'area_px',
]
SCORE_COLUMNS = ['dsc', 'recall', 'precision']
BLAND_ALTMAN_COLUMNS = [
    'indicator', 'n', 'mean_diff', 'sd_diff', 'lower_limit', 'upper_limit', 'fraction_within',
]
INDICATORS = (
    'eem_area', 'lumen_area', 'plaque_area', 'burden_index',
    'eem_volume', 'lumen_volume', 'plaque_volume',
)


@dataclass
class FrameDataset:
    """Model-space images and targets, stacked as N x 1 x H x W float32."""

    images: np.ndarray
    eem_targets: np.ndarray
    lumen_targets: np.ndarray

    def __post_init__(self):
        if not (self.images.shape == self.eem_targets.shape == self.lumen_targets.shape):
            raise ShapeMismatchError(
                f"images {self.images.shape}, eem {self.eem_targets.shape} and "
                f"lumen {self.lumen_targets.shape} targets differ"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices: np.ndarray) -> 'FrameDataset':
        return FrameDataset(self.images[indices], self.eem_targets[indices], self.lumen_targets[indices])


def build_frame_dataset(cases: Sequence[PhantomCase], config: PipelineConfig) -> FrameDataset:
    """
    Stack every frame of ``cases``, in order, in the coordinate space of ``config``.

    Args:
        cases: Cases to include
        config: Pipeline settings; polar mode resamples images and masks

    Returns:
        FrameDataset with one row per frame

    Raises:
        EmptyDatasetError: No frames at all
    """
    images, eem, lumen = [], [], []
    for case in cases:
        for index in range(case.n_frames):
            images.append(model_input(case.frames[index], config))
            eem.append(model_target(case.eem_masks[index], config))
            lumen.append(model_target(case.lumen_masks[index] & case.eem_masks[index], config))
    if not images:
        raise EmptyDatasetError("no frames to build a dataset from")
    return FrameDataset(
        images=np.stack(images)[:, None].astype(np.float32),
        eem_targets=np.stack(eem)[:, None].astype(np.float32),
        lumen_targets=np.stack(lumen)[:, None].astype(np.float32),
    )


def records_to_frame(records: Iterable[MetricsRecord]) -> pd.DataFrame:
    """Metric records as a DataFrame with the metrics.csv column order."""
    rows = [record.to_dict() for record in records]
    if not rows:
        return pd.DataFrame(columns=METRIC_COLUMNS)
    return pd.DataFrame(rows)[METRIC_COLUMNS]


def frame_to_records(df: pd.DataFrame) -> list[MetricsRecord]:
    def clean(value):
        return None if pd.isna(value) else float(value)

    return [
        MetricsRecord(
            case_id=str(row.case_id),
            structure=str(row.structure),
            dsc=clean(row.dsc),
            recall=clean(row.recall),
            precision=clean(row.precision),
            area_mm2=float(row.area_mm2),
            volume_mm3=clean(row.volume_mm3),
            burden_index=float(row.burden_index),
            area_px=float(row.area_px),
        )
        for row in df.itertuples(index=False)
    ]


def summarize_folds(fold_records: dict[int, list[MetricsRecord]]) -> pd.DataFrame:
    """
    Mean DSC/recall/precision per fold and structure.

    Returns:
        DataFrame with columns fold, structure, dsc, recall, precision, n_cases
    """
    frames = []
    for fold, records in sorted(fold_records.items()):
        df = records_to_frame(records)
        if df.empty:
            continue
        df.insert(0, 'fold', fold)
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=['fold', 'structure', *SCORE_COLUMNS, 'n_cases'])
    combined = pd.concat(frames, ignore_index=True)
    combined[SCORE_COLUMNS] = combined[SCORE_COLUMNS].astype(float)
    summary = (
        combined.groupby(['fold', 'structure'], sort=False)
        .agg(dsc=('dsc', 'mean'), recall=('recall', 'mean'),
             precision=('precision', 'mean'), n_cases=('case_id', 'nunique'))
        .reset_index()
    )
    summary['structure'] = pd.Categorical(summary['structure'], categories=list(STRUCTURES), ordered=True)
    summary = summary.sort_values(['fold', 'structure']).reset_index(drop=True)
    summary['structure'] = summary['structure'].astype(str)
    return summary


def aggregate_folds(summary: pd.DataFrame) -> dict[str, dict[str, float]]:
    """Per-structure mean of the fold means."""
    if summary.empty:
        return {}
    grouped = summary.groupby('structure')[SCORE_COLUMNS].mean()
    return {
        structure: {metric: float(grouped.loc[structure, metric]) for metric in SCORE_COLUMNS}
        for structure in STRUCTURES if structure in grouped.index
    }


def bland_altman_frame(results: dict[str, BlandAltmanResult]) -> pd.DataFrame:
    rows = [
        {
            'indicator': name,
            'n': result.n,
            'mean_diff': result.mean_diff,
            'sd_diff': result.sd_diff,
            'lower_limit': result.lower_limit,
            'upper_limit': result.upper_limit,
            'fraction_within': result.fraction_within,
        }
        for name, result in results.items()
    ]
    return pd.DataFrame(rows, columns=BLAND_ALTMAN_COLUMNS)


def band_confusion(manual: Sequence[str], auto: Sequence[str]) -> pd.DataFrame:
    """3x3 counts of manual (rows) against automatic (columns) risk bands."""
    labels = [band.value for band in BAND_ORDER]
    if len(manual) != len(auto):
        raise ShapeMismatchError(f"{len(manual)} manual bands vs {len(auto)} automatic bands")
    if not manual:
        empty = pd.DataFrame(0, index=labels, columns=labels)
        empty.index.name, empty.columns.name = 'manual', 'auto'
        return empty
    table = pd.crosstab(
        pd.Categorical(list(manual), categories=labels),
        pd.Categorical(list(auto), categories=labels),
        dropna=False,
    )
    table = table.reindex(index=labels, columns=labels, fill_value=0)
    table.index.name = 'manual'
    table.columns.name = 'auto'
    return table.astype(int)
