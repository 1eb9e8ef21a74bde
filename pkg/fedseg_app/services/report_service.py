"""
Report output: CSV tables, Bland-Altman SVGs, JSON documents and weights.
"""
import json
import logging
import os
from pathlib import Path
from typing import Union

import pandas as pd

from fedseg.data_processing import (
    bland_altman_frame, frame_to_records, records_to_frame, summarize_folds,
)
from fedseg.losses import MetricsRecord
from fedseg.models import BAND_ORDER
from fedseg.params import save_params
from fedseg.visualization import write_bland_altman_svg
from fedseg_app.services.experiment_service import Report
from fedseg_app.services.log_service import get_logs

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
BLAND_ALTMAN_FILE = 'bland_altman.csv'
FOLD_SUMMARY_FILE = 'fold_summary.csv'
BAND_CONFUSION_FILE = 'band_confusion.csv'
REPORT_FILE = 'report.json'
RUN_FILE = 'run.json'


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def svg_name(indicator: str) -> str:
    return f'bland_altman_{indicator}.svg'


def weights_name(fold: int, n_folds: int) -> str:
    return 'weights.ivwt' if n_folds == 1 else f'weights_fold{fold}.ivwt'


def emit_report(report: Report, out_dir: Union[str, os.PathLike], include_warnings: bool = True) -> list[Path]:
    """
    Write every output of ``report`` into ``out_dir``.

    metrics.csv has one row per case and structure (header only when there
    are none); each Bland-Altman indicator gets an SVG drawn from the same
    values as its bland_altman.csv row. report.json holds the results and
    run.json the run metadata, so report.json is reproducible across runs.

    Returns:
        Paths written, in order
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    metrics_path = out / METRICS_FILE
    records_to_frame(report.records).to_csv(metrics_path, index=False)
    written.append(metrics_path)

    summary_path = out / FOLD_SUMMARY_FILE
    summarize_folds(report.fold_records).to_csv(summary_path, index=False)
    written.append(summary_path)

    ba_path = out / BLAND_ALTMAN_FILE
    bland_altman_frame(report.bland_altman).to_csv(ba_path, index=False)
    written.append(ba_path)
    for indicator, result in report.bland_altman.items():
        svg_path = out / svg_name(indicator)
        write_bland_altman_svg(result, indicator, str(svg_path))
        written.append(svg_path)

    if report.band_confusion:
        labels = [band.value for band in BAND_ORDER]
        confusion = pd.DataFrame(report.band_confusion, index=labels, columns=labels)
        confusion.index.name = 'manual'
        confusion_path = out / BAND_CONFUSION_FILE
        confusion.to_csv(confusion_path)
        written.append(confusion_path)

    results = report.to_dict()
    metadata = results.pop('metadata')
    report_path = out / REPORT_FILE
    _write_json(report_path, results)
    written.append(report_path)

    run = {'spec': report.spec, **metadata}
    if include_warnings:
        run['warnings'] = [
            {'timestamp': e['timestamp'], 'logger': e['logger'], 'message': e['message']}
            for e in get_logs(min_level='WARNING')
        ]
    run_path = out / RUN_FILE
    _write_json(run_path, run)
    written.append(run_path)

    for fold, params in sorted(report.weights.items()):
        written.append(save_params(params, out / weights_name(fold, len(report.weights))))

    logger.info("Wrote %d report files to %s", len(written), out)
    return written


def read_metrics_csv(path: Union[str, os.PathLike]) -> list[MetricsRecord]:
    """Parse metrics.csv back into records (floats round-trip exactly)."""
    df = pd.read_csv(path, float_precision='round_trip', dtype={'case_id': str, 'structure': str})
    return frame_to_records(df)


def load_report(in_dir: Union[str, os.PathLike]) -> Report:
    """
    Load report.json (and run.json when present) from a run directory.

    Raises:
        FileNotFoundError: No report.json in ``in_dir``
    """
    root = Path(in_dir)
    data = json.loads((root / REPORT_FILE).read_text(encoding='utf-8'))
    run_path = root / RUN_FILE
    if run_path.exists():
        run = json.loads(run_path.read_text(encoding='utf-8'))
        run.pop('spec', None)
        run.pop('warnings', None)
        data['metadata'] = run
    return Report.from_dict(data)
