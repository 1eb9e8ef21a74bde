from dataclasses import replace
import json
import os
import tempfile
import unittest

import numpy as np

from fedseg.errors import ConfigError, GeometryError, PartitionError
from fedseg.losses import dsc
from fedseg.models import BurdenBand, PhantomConfig
from fedseg.phantom import (
    CaseEntry,
    DatasetManifest,
    Ellipse,
    NoiseParams,
    VesselGeometry,
    gen_case,
    gen_dataset,
    gen_frame,
    largest_remainder,
    load_manifest_cases,
    partition_clients,
    resolve_band_mix,
)
from fedseg.utils import frame_to_uint8, read_pgm

CONFIG = PhantomConfig(image_size=64, frames_min=3, frames_max=4)


def _geometry():
    eem = Ellipse(31.5, 31.5, 22.0, 18.0, 30.0)
    lumen = Ellipse(31.5, 31.5, 12.0, 10.0, 30.0)
    return VesselGeometry(eem=eem, lumen=lumen)


def _entry(index, band):
    return CaseEntry(case_id=f'case_{index:03d}', band=band, seed=index, mean_burden=0.5,
                     frames=(), eem_masks=(), lumen_masks=(), plaque_masks=())


def _entries(low, moderate, high):
    bands = [BurdenBand.LOW] * low + [BurdenBand.MODERATE] * moderate + [BurdenBand.HIGH] * high
    order = np.random.default_rng(0).permutation(len(bands))
    return [_entry(i, bands[j]) for i, j in enumerate(order)]


class GenFrameTests(unittest.TestCase):
    def test_noise_off_gives_three_plateaus(self):
        frame, eem, lumen = gen_frame(1, _geometry(), NoiseParams.off(), CONFIG)

        self.assertEqual(len(np.unique(frame)), 3)
        self.assertEqual(frame.dtype, np.float32)
        self.assertEqual(int(np.count_nonzero(lumen & ~eem)), 0)

    def test_same_seed_is_bit_exact(self):
        noise = NoiseParams.from_config(CONFIG)

        first = gen_frame(5, _geometry(), noise, CONFIG)
        second = gen_frame(5, _geometry(), noise, CONFIG)

        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_frames_are_quantized_to_8_bit_levels(self):
        frame, _, _ = gen_frame(2, _geometry(), NoiseParams(dropout_deg=30.0), CONFIG)

        levels = np.rint(frame.astype(np.float64) * 255)
        np.testing.assert_array_equal((levels / 255.0).astype(np.float32), frame)
        self.assertTrue(0.0 <= frame.min() and frame.max() <= 1.0)

    def test_lumen_outside_eem_rejected(self):
        geometry = VesselGeometry(eem=Ellipse(31.5, 31.5, 10.0, 8.0, 0.0),
                                  lumen=Ellipse(31.5, 31.5, 12.0, 10.0, 0.0))

        with self.assertRaises(GeometryError):
            gen_frame(0, geometry, NoiseParams.off(), CONFIG)

    def test_eem_leaving_image_rejected(self):
        geometry = VesselGeometry(eem=Ellipse(60.0, 31.5, 20.0, 18.0, 0.0),
                                  lumen=Ellipse(60.0, 31.5, 5.0, 4.0, 0.0))

        with self.assertRaises(GeometryError):
            gen_frame(0, geometry, NoiseParams.off(), CONFIG)


class GenCaseTests(unittest.TestCase):
    def test_each_band_lands_inside_its_range(self):
        for seed, band in enumerate(BurdenBand):
            case = gen_case(seed, band, 6, CONFIG)

            self.assertTrue(band.contains(case.mean_burden), (band, case.mean_burden))
            self.assertTrue(np.all((case.burden_indices() >= 0) & (case.burden_indices() <= 1)))

    def test_mask_identities_hold_per_frame(self):
        case = gen_case(3, BurdenBand.MODERATE, 5, CONFIG)

        self.assertFalse(np.any(case.lumen_masks & ~case.eem_masks))
        self.assertFalse(np.any(case.plaque_masks & case.lumen_masks))
        np.testing.assert_array_equal(case.plaque_masks | case.lumen_masks, case.eem_masks)

    def test_consecutive_frames_evolve_smoothly(self):
        for seed in range(5):
            case = gen_case(100 + seed, BurdenBand.MODERATE, 8, CONFIG)
            for index in range(1, case.n_frames):
                self.assertGreaterEqual(dsc(case.eem_masks[index - 1], case.eem_masks[index]), 0.85)

    def test_single_frame_case(self):
        case = gen_case(4, BurdenBand.LOW, 1, CONFIG)

        self.assertEqual(case.frames.shape, (1, 64, 64))
        self.assertEqual(case.frame_spacing_mm, 3.0)

    def test_invalid_frame_count(self):
        with self.assertRaises(ConfigError):
            gen_case(0, BurdenBand.LOW, 0, CONFIG)


class BandMixTests(unittest.TestCase):
    def test_default_preset_for_45_cases(self):
        _, proportions = resolve_band_mix('dataset1')

        self.assertEqual(largest_remainder(45, list(proportions.values())), [10, 29, 6])

    def test_single_band(self):
        _, proportions = resolve_band_mix([1, 0, 0])

        self.assertEqual(largest_remainder(7, list(proportions.values())), [7, 0, 0])

    def test_too_few_cases_for_bands(self):
        with self.assertRaises(ConfigError):
            largest_remainder(2, [0.2, 0.5, 0.3])

    def test_unknown_preset(self):
        with self.assertRaises(ConfigError):
            resolve_band_mix('dataset9')


class GenDatasetTests(unittest.TestCase):
    def test_same_seed_gives_identical_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = gen_dataset(9, 4, 'dataset1', os.path.join(tmp, 'a'), CONFIG)
            second = gen_dataset(9, 4, 'dataset1', os.path.join(tmp, 'b'), CONFIG, workers=2)

            self.assertEqual(first.to_dict(), second.to_dict())
            for entry in first.cases:
                for rel in entry.frames + entry.plaque_masks:
                    with open(os.path.join(tmp, 'a', rel), 'rb') as a, open(os.path.join(tmp, 'b', rel), 'rb') as b:
                        self.assertEqual(a.read(), b.read())

    def test_manifest_and_cases_load_back(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = gen_dataset(1, 3, [0, 1, 0], tmp, CONFIG)

            loaded = DatasetManifest.load(tmp)
            cases = load_manifest_cases(loaded)

            self.assertEqual(loaded.case_ids, manifest.case_ids)
            self.assertTrue(all(entry.band is BurdenBand.MODERATE for entry in loaded.cases))
            for entry in loaded.cases:
                case = cases[entry.case_id]
                self.assertEqual(case.n_frames, entry.n_frames)
                self.assertAlmostEqual(case.mean_burden, entry.mean_burden, places=12)
                np.testing.assert_array_equal(case.plaque_masks, case.eem_masks & ~case.lumen_masks)
                stored = read_pgm(os.path.join(tmp, entry.frames[0]))
                np.testing.assert_array_equal(stored, frame_to_uint8(case.frames[0]))

    def test_manifest_records_spacing_at_top_level(self):
        config = replace(CONFIG, pixel_spacing_mm=0.05, frame_spacing_mm=2.5)
        with tempfile.TemporaryDirectory() as tmp:
            gen_dataset(2, 2, [1, 0, 0], tmp, config)
            with open(os.path.join(tmp, 'manifest.json'), encoding='utf-8') as handle:
                data = json.load(handle)

            self.assertEqual(data['pixel_spacing_mm'], 0.05)
            self.assertEqual(data['frame_spacing_mm'], 2.5)
            self.assertNotIn('pixel_spacing_mm', data['phantom'])
            self.assertEqual(sorted(k for k in data if k != 'preset'),
                             ['band_mix', 'cases', 'frame_spacing_mm', 'phantom', 'pixel_spacing_mm',
                              'seed', 'version'])

            case = next(iter(load_manifest_cases(DatasetManifest.load(tmp)).values()))
            self.assertEqual(case.pixel_spacing_mm, 0.05)
            self.assertEqual(case.frame_spacing_mm, 2.5)

            del data['frame_spacing_mm']
            with self.assertRaises(ConfigError):
                DatasetManifest.from_dict(data)

    def test_missing_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                DatasetManifest.load(tmp)


class PartitionTests(unittest.TestCase):
    def test_iid_split_balances_sizes_and_bands(self):
        entries = _entries(10, 29, 6)

        buckets = partition_clients(entries, 3, 'iid')

        self.assertEqual([len(b) for b in buckets], [15, 15, 15])
        for bucket in buckets:
            for band, total in ((BurdenBand.LOW, 10), (BurdenBand.MODERATE, 29), (BurdenBand.HIGH, 6)):
                count = sum(1 for e in bucket if e.band is band)
                self.assertLessEqual(abs(count - total / 3), 1.0)

    def test_partition_is_disjoint_and_exhaustive(self):
        entries = _entries(4, 7, 3)
        for mode in ('iid', 'by_band'):
            buckets = partition_clients(entries, 4, mode)
            ids = [e.case_id for bucket in buckets for e in bucket]

            self.assertEqual(sorted(ids), sorted(e.case_id for e in entries))
            self.assertEqual(len(ids), len(set(ids)))

    def test_by_band_skews_bands(self):
        buckets = partition_clients(_entries(5, 5, 5), 3, 'by_band')

        self.assertEqual([{e.band for e in b} for b in buckets],
                         [{BurdenBand.LOW}, {BurdenBand.MODERATE}, {BurdenBand.HIGH}])

    def test_single_client_keeps_input(self):
        entries = _entries(2, 3, 1)

        self.assertEqual(partition_clients(entries, 1), [entries])

    def test_errors(self):
        with self.assertRaises(PartitionError):
            partition_clients(_entries(1, 1, 0), 3)
        with self.assertRaises(PartitionError):
            partition_clients(_entries(2, 2, 2), 2, 'random')


if __name__ == '__main__':
    unittest.main()
