import unittest

import numpy as np

from fedseg.data_processing import FrameDataset
from fedseg.errors import ConfigError, EmptyDatasetError, RoundAbortedError, ShapeMismatchError
from fedseg.fedavg import RoundLog, TrainingTask, aggregate, client_update, server_run, train_centralized
from fedseg.losses import hybrid_loss
from fedseg.models import FedConfig, UNetConfig
from fedseg.optim import AdamState, adam_step
from fedseg.params import ModelParams
from fedseg.unet import SegmentationPair, initial_global_params
from fedseg.utils import derive_seed

UNET = UNetConfig(input_shape=(1, 8, 8), depth=1, base_channels=2, seed=4)


def _dataset(n, seed=0, size=8):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 1, size, size)).astype(np.float32)
    eem = (images > 0.3).astype(np.float32)
    lumen = (images > 0.7).astype(np.float32)
    return FrameDataset(images, eem, lumen)


def _task(**fed):
    values = dict(n_clients=1, rounds=2, batch_size=2, learning_rate=1e-3, seed=1)
    values.update(fed)
    return TrainingTask(fed=FedConfig(**values), unet=UNET)


def _vector(values):
    return ModelParams([('w', np.array(values, dtype=np.float32))])


class AggregateTests(unittest.TestCase):
    def test_weighted_mean(self):
        result = aggregate([_vector([1, 3]), _vector([5, 7])], [1, 3])

        np.testing.assert_array_equal(result['w'], np.array([4, 6], dtype=np.float32))
        self.assertEqual(result['w'].dtype, np.float32)

    def test_equal_weights_give_plain_mean(self):
        result = aggregate([_vector([1, 2]), _vector([3, 6]), _vector([5, 1])], [7, 7, 7])

        np.testing.assert_allclose(result['w'], [3.0, 3.0], rtol=1e-7)

    def test_single_client_is_identity(self):
        params = initial_global_params(UNET)

        self.assertTrue(aggregate([params], [12]).bit_equal(params))

    def test_result_is_convex_combination(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n_clients = int(rng.integers(1, 6))
            clients = [_vector(rng.normal(scale=10.0, size=8)) for _ in range(n_clients)]
            weights = [int(w) for w in rng.integers(1, 200, size=n_clients)]

            result = aggregate(clients, weights)['w']

            stacked = np.stack([c['w'] for c in clients])
            self.assertTrue(np.all(result >= stacked.min(axis=0)))
            self.assertTrue(np.all(result <= stacked.max(axis=0)))

    def test_errors(self):
        with self.assertRaises(ShapeMismatchError):
            aggregate([_vector([1]), _vector([1, 2])], [1, 1])
        with self.assertRaises(ConfigError):
            aggregate([_vector([1]), _vector([2])], [1, 0])
        with self.assertRaises(ShapeMismatchError):
            aggregate([], [])


class ClientUpdateTests(unittest.TestCase):
    def setUp(self):
        self.global_params = initial_global_params(UNET)
        self.dataset = _dataset(3)

    def test_zero_learning_rate_returns_global_params(self):
        update = client_update(0, self.global_params, self.dataset, _task(learning_rate=0.0))

        self.assertTrue(update.params.bit_equal(self.global_params))
        self.assertEqual(update.sample_count, 3)

    def test_single_batch_matches_one_adam_step(self):
        task = _task(batch_size=8, rounds=1)

        update = client_update(0, self.global_params, self.dataset, task, round_index=1)

        order = np.random.default_rng(derive_seed(1, 'shuffle', 0, 1, 0)).permutation(3)
        batch = self.dataset.take(order)
        pair = SegmentationPair.from_params(UNET, self.global_params)
        probs, cache = pair.eem.forward(batch.images)
        _, grad = hybrid_loss(probs, batch.eem_targets, 0.5)
        expected = adam_step(pair.eem.params, pair.eem.backward(cache, grad),
                             AdamState(learning_rate=1e-3, l2_lambda=1e-4))
        self.assertTrue(update.params.subset('eem.').bit_equal(expected))

    def test_deterministic(self):
        task = _task()

        first = client_update(2, self.global_params, self.dataset, task, 3)
        second = client_update(2, self.global_params, self.dataset, task, 3)

        self.assertTrue(first.params.bit_equal(second.params))
        self.assertEqual(first.train_loss, second.train_loss)

    def test_empty_dataset(self):
        with self.assertRaises(EmptyDatasetError):
            client_update(0, self.global_params, _dataset(0), _task())


class ServerRunTests(unittest.TestCase):
    def test_zero_rounds_returns_initialization(self):
        params, logs = server_run([_dataset(2)], _task(rounds=0))

        self.assertTrue(params.bit_equal(initial_global_params(UNET)))
        self.assertEqual(logs, [])

    def test_single_client_equals_centralized(self):
        dataset = _dataset(5, seed=3)
        fed_rounds, central_rounds = [], []

        def recorder(seen):
            def evaluate(params):
                seen.append(params)
                return {'eem_dsc': 0.5}
            return evaluate

        task = _task(rounds=3, eval_every_round=True)
        fed_params, fed_logs = server_run([dataset], task, evaluate=recorder(fed_rounds))
        central_params, central_logs = train_centralized(dataset, task, evaluate=recorder(central_rounds))

        self.assertTrue(fed_params.bit_equal(central_params))
        self.assertEqual(len(fed_rounds), 3)
        for fed_round, central_round in zip(fed_rounds, central_rounds):
            self.assertTrue(fed_round.bit_equal(central_round))
        self.assertEqual([log.client_losses for log in fed_logs], [log.client_losses for log in central_logs])

    def test_evaluation_runs_on_last_round_only_by_default(self):
        calls = []

        def evaluate(params):
            calls.append(params)
            return {'eem_dsc': 0.5}

        params, logs = server_run([_dataset(5, seed=3)], _task(rounds=3), evaluate=evaluate)

        self.assertEqual(len(calls), 1)
        self.assertTrue(calls[0].bit_equal(params))
        self.assertEqual(logs[-1].global_metrics, {'eem_dsc': 0.5})
        self.assertEqual(logs[0].global_metrics, {})

    def test_identical_clients_share_the_global_model(self):
        task = _task(n_clients=3, rounds=3, eval_every_round=True)
        dataset = _dataset(1, seed=8)
        seen = []

        def evaluate(params):
            seen.append(params)
            return {}

        params, logs = server_run([dataset] * 3, task, evaluate=evaluate)

        expected = initial_global_params(UNET)
        for round_index in range(1, 4):
            updates = [client_update(client_id, expected, dataset, task, round_index) for client_id in range(3)]
            for update in updates:
                self.assertTrue(update.params.bit_equal(updates[0].params))
            expected = updates[0].params
            self.assertTrue(seen[round_index - 1].bit_equal(expected), round_index)
            self.assertEqual(logs[round_index - 1].sample_counts, [1, 1, 1])
            self.assertEqual(logs[round_index - 1].client_losses, [updates[0].train_loss] * 3)
        self.assertTrue(params.bit_equal(expected))
        self.assertFalse(params.bit_equal(initial_global_params(UNET)))

    def test_partition_count_must_match(self):
        with self.assertRaises(ConfigError):
            server_run([_dataset(2), _dataset(2)], _task(n_clients=3))

    def test_failing_client_aborts_round(self):
        with self.assertRaises(RoundAbortedError):
            server_run([_dataset(2), _dataset(2, size=16)], _task(n_clients=2))

    def test_unknown_transport(self):
        with self.assertRaises(ConfigError):
            server_run([_dataset(2)], _task(), transport='udp')


class RoundLogTests(unittest.TestCase):
    def test_dict_round_trip(self):
        log = RoundLog(2, [4, 6], [0.5, 0.25], {'plaque_dsc': 0.7})

        self.assertEqual(RoundLog.from_dict(log.to_dict()), log)
        self.assertEqual(log.total_samples, 10)


if __name__ == '__main__':
    unittest.main()
