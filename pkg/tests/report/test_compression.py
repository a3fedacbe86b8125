import csv
import json
import tempfile
import unittest
from pathlib import Path

import jsonschema

from para.adapter.layer import LayerType
from para.errors import FormatError
from para.report.compression import (
    RANK_MATRIX_CSV_NAME, REPORT_CSV_NAME, REPORT_JSON_NAME, CompressionReport, LayerSummary, read_claimed_errors)

from ..test_utils import load_schema


def summary(layer_index: int, layer_type: LayerType, original_rank: int, new_rank: int, *, d: int = 8,
            energy: float = 10.0, error: float = 1.0) -> LayerSummary:
    return LayerSummary(
        module_path=f"model.layers.{layer_index - 1}.{layer_type.value}",
        layer_index=layer_index,
        layer_type=layer_type,
        original_rank=original_rank,
        new_rank=new_rank,
        d1=d,
        d2=d,
        energy=energy,
        retained_energy=1.0 - error ** 2 / energy if energy else 1.0,
        frobenius_error=error,
    )


class CompressionReportTest(unittest.TestCase):
    def setUp(self):
        self.report = CompressionReport.build(
            [summary(1, LayerType.Q, 4, 2), summary(1, LayerType.V, 4, 0, error=3.0),
             summary(2, LayerType.Q, 4, 4, error=0.0)],
            threshold=1.5,
            policy='gamma=0.5',
            n_layers=2,
            skipped_tensors=['lm_head.weight'],
            parent_fingerprint='0' * 32,
        )

    def test_totals(self):
        t = self.report.totals
        self.assertEqual((t.b_init, t.kept_total), (12, 6))
        self.assertEqual(t.parameter_count_before, 12 * 16)
        self.assertEqual(t.parameter_count_after, 6 * 16)
        self.assertEqual(t.reduction_fraction, 0.5)
        self.assertEqual(t.pruned_energy, 10.0)
        self.assertAlmostEqual(t.retained_energy_fraction, 2.0 / 3.0)
        self.assertEqual((t.average_rank_before, t.average_rank_after), (4.0, 2.0))

    def test_rank_matrix(self):
        self.assertEqual(self.report.rank_matrix, [[2, None, 0, None, None, None], [4, None, None, None, None, None]])
        self.assertEqual(self.report.removed_layers, ['model.layers.0.v'])

    def test_schema(self):
        jsonschema.validate(self.report.to_dict(), load_schema('compression_report'))

    def test_dict_round_trip(self):
        data = json.loads(json.dumps(self.report.to_dict()))
        self.assertEqual(CompressionReport.from_dict(data), self.report)

    def test_malformed_dict(self):
        with self.assertRaises(FormatError):
            CompressionReport.from_dict({'threshold': 1.0})

    def test_empty(self):
        report = CompressionReport.build([], threshold=None, policy=None, n_layers=0)
        self.assertEqual(report.totals.reduction_fraction, 0.0)
        self.assertEqual(report.totals.retained_energy_fraction, 1.0)
        jsonschema.validate(report.to_dict(), load_schema('compression_report'))

    def test_summary_lines(self):
        lines = self.report.summary_lines()
        self.assertIn('policy: gamma=0.5', lines)
        self.assertTrue(any('reduction 50.00%' in line for line in lines))

    def test_write_json(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = self.report.write(tmpdir)
            self.assertEqual(target.name, REPORT_JSON_NAME)
            jsonschema.validate(json.loads(target.read_text()), load_schema('compression_report'))
            with open(Path(tmpdir) / RANK_MATRIX_CSV_NAME, newline='') as f:
                rows = list(csv.reader(f))
            self.assertEqual(rows[0], ['layer_index', 'q', 'k', 'v', 'o', 'm1', 'm2'])
            self.assertEqual(rows[1], ['1', '2', '', '0', '', '', ''])

            errors, fp = read_claimed_errors(tmpdir)
            self.assertEqual(errors['model.layers.0.v'], 3.0)
            self.assertEqual(fp, '0' * 32)

    def test_write_csv(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            target = self.report.write(tmpdir, 'csv')
            self.assertEqual(target.name, REPORT_CSV_NAME)
            errors, fp = read_claimed_errors(tmpdir)
            self.assertEqual(errors, {'model.layers.0.q': 1.0, 'model.layers.0.v': 3.0, 'model.layers.1.q': 0.0})
            self.assertIsNone(fp)

    def test_write_is_deterministic(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            first = self.report.write(Path(tmpdir) / 'a').read_bytes()
            second = self.report.write(Path(tmpdir) / 'b').read_bytes()
            self.assertEqual(first, second)

    def test_unknown_format(self):
        with tempfile.TemporaryDirectory() as tmpdir, self.assertRaises(ValueError):
            self.report.write(tmpdir, 'xml')


class ReadClaimedErrorsTest(unittest.TestCase):
    def test_missing(self):
        with tempfile.TemporaryDirectory() as tmpdir, self.assertRaises(FormatError):
            read_claimed_errors(tmpdir)

    def test_malformed_json(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            (Path(tmpdir) / REPORT_JSON_NAME).write_text('{"per_layer": ')
            with self.assertRaises(FormatError):
                read_claimed_errors(tmpdir)

    def test_malformed_csv(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            (Path(tmpdir) / REPORT_CSV_NAME).write_text('module_path,frobenius_error\nx,abc\n')
            with self.assertRaises(FormatError):
                read_claimed_errors(tmpdir)


if __name__ == '__main__':
    unittest.main()
