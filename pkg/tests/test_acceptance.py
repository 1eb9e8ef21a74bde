"""
End-to-end learning runs on desk phantoms. Minutes of CPU each, so they
only run with FEDSEG_RUN_SLOW=1.
"""
import contextlib
from dataclasses import replace
import io
import logging
import os
import tempfile
import unittest

from fedseg.config_loader import load_config
from fedseg.phantom import gen_dataset
from fedseg_app import cli
from fedseg_app.services.experiment_service import ExperimentSpec, run_experiment
from fedseg_app.services.log_service import PACKAGE_LOGGERS

DESK_CONFIG = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'configs', 'desk.json')
RUN_SLOW = os.getenv('FEDSEG_RUN_SLOW') == '1'


@unittest.skipUnless(RUN_SLOW, 'set FEDSEG_RUN_SLOW=1 to run end-to-end training')
class EndToEndTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = load_config(DESK_CONFIG)
        self.saved = {}
        for name in PACKAGE_LOGGERS:
            logger = logging.getLogger(name)
            self.saved[name] = (list(logger.handlers), logger.level, logger.propagate)

    def tearDown(self):
        for name, (handlers, level, propagate) in self.saved.items():
            logger = logging.getLogger(name)
            for handler in list(logger.handlers):
                logger.removeHandler(handler)
                handler.close()
            for handler in handlers:
                logger.addHandler(handler)
            logger.setLevel(level)
            logger.propagate = propagate
        self.tmp.cleanup()

    def test_federated_training_beats_untrained_baseline(self):
        manifest = gen_dataset(0, 45, 'dataset1', self.tmp.name, self.config.phantom)

        report = run_experiment(ExperimentSpec(manifest=manifest, config=self.config, mode='federated',
                                               coords='polar', post=True, protocol='holdout'))

        self.assertGreaterEqual(report.aggregates['eem']['dsc'], 0.80)
        self.assertGreaterEqual(report.aggregates['lumen']['dsc'], 0.80)
        self.assertGreaterEqual(report.aggregates['plaque']['dsc'], 0.55)
        for structure in ('eem', 'lumen', 'plaque'):
            gain = report.aggregates[structure]['dsc'] - report.baseline[structure]['dsc']
            self.assertGreaterEqual(gain, 0.3, structure)

    def test_polar_with_postprocess_holds_up_under_dropout(self):
        phantom = replace(self.config.phantom, dropout_deg=60.0)
        for seed in range(3):
            out = os.path.join(self.tmp.name, f'seed{seed}')
            manifest = gen_dataset(seed, 15, 'dataset1', out, phantom)
            config = replace(self.config, fed=replace(self.config.fed, seed=seed))

            polar = run_experiment(ExperimentSpec(manifest=manifest, config=config, coords='polar', post=True))
            cartesian = run_experiment(ExperimentSpec(manifest=manifest, config=config, coords='cartesian',
                                                      post=True))

            self.assertGreaterEqual(polar.aggregates['eem']['dsc'], cartesian.aggregates['eem']['dsc'], seed)

    def test_training_is_reproducible(self):
        data = os.path.join(self.tmp.name, 'data')
        gen_dataset(5, 10, 'dataset1', data, self.config.phantom)
        runs = [os.path.join(self.tmp.name, name) for name in ('first', 'second')]

        for out in runs:
            with contextlib.redirect_stdout(io.StringIO()):
                code = cli.main(['--log-level', 'CRITICAL', 'train', '--manifest', data, '--config', DESK_CONFIG,
                                 '--rounds', '2', '--coords', 'polar', '--post', 'on', '--out', out])
            self.assertEqual(code, cli.EXIT_OK)

        for name in ('weights.ivwt', 'metrics.csv', 'report.json'):
            with open(os.path.join(runs[0], name), 'rb') as a, open(os.path.join(runs[1], name), 'rb') as b:
                self.assertEqual(a.read(), b.read(), name)


if __name__ == '__main__':
    unittest.main()
