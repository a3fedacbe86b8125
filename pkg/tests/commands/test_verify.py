import json
import tempfile
import unittest
from pathlib import Path

import jsonschema
import numpy as np

from para import Processor, Session
from para.adapter.layer import AdapterLayer, AdapterSet, LayerType, StorageDtype
from para.adapter.store import ADAPTER_WEIGHTS_NAME, load_adapter, save_adapter
from para.adapter.synthetic import PowerLaw, generate_synthetic
from para.allocation import Policy, PolicyKind
from para.commands.verify import VERIFICATION_JSON_NAME
from para.errors import FormatError, SizeGuardError, VerificationError
from para.report.compression import REPORT_JSON_NAME
from para.settings import Settings

from ..test_utils import load_schema


class VerifyCommandTest(unittest.TestCase):
    def setUp(self):
        self._tmpdir = tempfile.TemporaryDirectory()
        self.root = Path(self._tmpdir.name)
        self.parent_path = self.root / 'parent'
        self.child_path = self.root / 'child'

    def tearDown(self):
        self._tmpdir.cleanup()

    def _compress(self, policy: Policy, storage_dtype: StorageDtype = StorageDtype.F32, **kwargs):
        adapter = generate_synthetic(2, (32, 24), 8, PowerLaw(0.6), seed=21, storage_dtype=storage_dtype,
                                     **kwargs)
        save_adapter(adapter, self.parent_path)
        with Processor(2) as processor:
            return Session(processor).compress(self.parent_path, policy, self.child_path)

    def test_compressed_child_passes(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.25))
        result = Session().verify(self.parent_path, self.child_path, self.root / 'out')
        self.assertTrue(result.passed)
        self.assertTrue(result.fingerprint_matches)
        self.assertEqual(len(result.layers), 12)

        data = json.loads((self.root / 'out' / VERIFICATION_JSON_NAME).read_text())
        jsonschema.validate(data, load_schema('verification'))
        self.assertTrue(data['passed'])

    def test_removed_layers_measured_against_zero(self):
        report = self._compress(Policy(PolicyKind.GAMMA, 0.1), layer_types=[LayerType.Q, LayerType.K])
        result = Session().verify(self.parent_path, self.child_path)
        removed = {check.module_path for check in result.layers if check.new_rank == 0}
        self.assertEqual(removed, set(report.removed_layers))
        self.assertTrue(result.passed)

    def test_low_precision_tolerance(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5), storage_dtype=StorageDtype.BF16)
        result = Session().verify(self.parent_path, self.child_path)
        self.assertTrue(result.passed)
        self.assertTrue(all(check.tolerance == 1e-2 for check in result.layers))

    def test_corrupted_tensor(self):
        """Changing a stored factor makes the measured error disagree with the report."""
        self._compress(Policy(PolicyKind.GAMMA, 0.5))
        child = load_adapter(self.child_path)
        first = child.layers[0]
        corrupted = AdapterLayer(first.key, first.b * 1.5, first.a, first.scale, first.storage_dtype)
        report = (self.child_path / REPORT_JSON_NAME).read_text()
        save_adapter(AdapterSet((corrupted, *child.layers[1:]), alpha=child.alpha, init_rank=child.init_rank,
                                config=child.config), self.child_path)
        (self.child_path / REPORT_JSON_NAME).write_text(report)

        with self.assertRaises(VerificationError) as cm:
            Session().verify(self.parent_path, self.child_path, self.root / 'out')
        self.assertEqual(cm.exception.failed_layers, [first.key.module_path])
        data = json.loads((self.root / 'out' / VERIFICATION_JSON_NAME).read_text())
        self.assertFalse(data['passed'])

    def test_fingerprint_mismatch_warns(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5))
        report = json.loads((self.child_path / REPORT_JSON_NAME).read_text())
        report['parent_fingerprint'] = 'f' * 32
        (self.child_path / REPORT_JSON_NAME).write_text(json.dumps(report))
        with self.assertLogs('para.commands.verify', level='WARNING'):
            result = Session().verify(self.parent_path, self.child_path)
        self.assertFalse(result.fingerprint_matches)

    def test_unexpected_child_layer(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5), layer_types=[LayerType.Q])
        other = generate_synthetic(3, (32, 24), 2, PowerLaw(0.6), seed=3, layer_types=[LayerType.Q])
        save_adapter(other, self.child_path)
        with self.assertRaises(VerificationError):
            Session().verify(self.parent_path, self.child_path)

    def test_missing_report(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5))
        (self.child_path / REPORT_JSON_NAME).unlink()
        with self.assertRaises(FormatError):
            Session().verify(self.parent_path, self.child_path)

    def test_size_guard(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5))
        settings = Settings({'oracle': {'max_entries': 100}})
        with self.assertRaises(SizeGuardError):
            Session(settings=settings).verify(self.parent_path, self.child_path)

    def test_missing_weights(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5))
        (self.child_path / ADAPTER_WEIGHTS_NAME).unlink()
        with self.assertRaises(FormatError):
            Session().verify(self.parent_path, self.child_path)

    def test_tolerance_setting(self):
        self._compress(Policy(PolicyKind.GAMMA, 0.5))
        result = Session(settings=Settings({'verify': {'tolerance': 1e-3}})).verify(self.parent_path, self.child_path)
        self.assertTrue(np.all([check.tolerance == 1e-3 for check in result.layers]))


if __name__ == '__main__':
    unittest.main()
