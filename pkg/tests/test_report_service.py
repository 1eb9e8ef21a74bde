import json
import os
import tempfile
import unittest

import numpy as np

from fedseg.data_processing import METRIC_COLUMNS
from fedseg.fedavg import RoundLog
from fedseg.losses import MetricsRecord, bland_altman
from fedseg.params import ModelParams, load_params
from fedseg_app.services.experiment_service import Report
from fedseg_app.services.report_service import emit_report, load_report, read_metrics_csv


def _records():
    rng = np.random.default_rng(4)
    records = []
    for case in ('case_000', 'case_001'):
        for structure in ('eem', 'lumen', 'plaque'):
            records.append(MetricsRecord(
                case_id=case, structure=structure,
                dsc=float(rng.random()), recall=float(rng.random()), precision=float(rng.random()),
                area_mm2=float(rng.random() * 10), volume_mm3=float(rng.random() * 100),
                burden_index=float(rng.random()), area_px=float(rng.integers(0, 4096)),
            ))
    records.append(MetricsRecord(case_id='case_002', structure='plaque', area_mm2=0.0))
    return records


class ReportServiceTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_empty_report_writes_header_only(self):
        written = emit_report(Report(spec={'mode': 'federated'}), self.out)

        with open(os.path.join(self.out, 'metrics.csv'), encoding='utf-8') as handle:
            self.assertEqual(handle.read().strip(), ','.join(METRIC_COLUMNS))
        names = {os.path.basename(p) for p in written}
        self.assertFalse(any(name.endswith('.svg') for name in names))
        self.assertNotIn('band_confusion.csv', names)
        self.assertIn('report.json', names)
        self.assertIn('run.json', names)

    def test_metrics_csv_round_trip(self):
        records = _records()
        emit_report(Report(spec={}, fold_records={0: records}), self.out)

        self.assertEqual(read_metrics_csv(os.path.join(self.out, 'metrics.csv')), records)

    def test_full_report_outputs(self):
        params = ModelParams([('w', np.arange(3, dtype=np.float32))])
        report = Report(
            spec={'mode': 'federated', 'coords': 'polar'},
            fold_records={0: _records()[:6]},
            aggregates={'eem': {'dsc': 0.5, 'recall': 0.6, 'precision': 0.4}},
            bland_altman={
                'eem_area': bland_altman([1.0, 2.0, 3.0], [1.1, 2.2, 2.9]),
                'plaque_volume': bland_altman([5.0, 6.0], [5.5, 6.5]),
            },
            band_confusion=[[1, 0, 0], [0, 1, 0], [0, 0, 0]],
            band_accuracy=1.0,
            round_logs={0: [RoundLog(1, [4, 5], [0.7, 0.6], {'eem_dsc': 0.3})]},
            metadata={'seeds': {'fed': 1}},
            weights={0: params},
        )

        written = emit_report(report, self.out)

        names = sorted(os.path.basename(p) for p in written)
        self.assertIn('bland_altman_eem_area.svg', names)
        self.assertIn('bland_altman_plaque_volume.svg', names)
        self.assertIn('band_confusion.csv', names)
        self.assertTrue(load_params(os.path.join(self.out, 'weights.ivwt')).bit_equal(params))
        with open(os.path.join(self.out, 'run.json'), encoding='utf-8') as handle:
            run = json.load(handle)
        self.assertEqual(run['spec']['coords'], 'polar')
        self.assertEqual(run['seeds'], {'fed': 1})
        self.assertIn('warnings', run)

        loaded = load_report(self.out)
        expected = report.to_dict()
        self.assertEqual(loaded.to_dict(), expected)

    def test_report_json_excludes_run_metadata(self):
        emit_report(Report(spec={}, metadata={'started_at': '2026-01-01T00:00:00+00:00'}), self.out)

        with open(os.path.join(self.out, 'report.json'), encoding='utf-8') as handle:
            data = json.load(handle)
        self.assertNotIn('metadata', data)
        self.assertNotIn('started_at', json.dumps(data))

    def test_missing_report(self):
        with self.assertRaises(FileNotFoundError):
            load_report(self.out)


if __name__ == '__main__':
    unittest.main()
