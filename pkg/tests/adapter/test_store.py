import json
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np
import safetensors
from hypothesis import HealthCheck, given, settings, strategies as st

from para.adapter.layer import AdapterLayer, AdapterSet, LayerKey, LayerType, StorageDtype
from para.adapter.store import (
    ADAPTER_CONFIG_NAME, ADAPTER_WEIGHTS_NAME, decode_tensor, encode_tensor, fingerprint, load_adapter,
    read_safetensors, save_adapter)
from para.adapter.synthetic import PowerLaw, generate_synthetic
from para.errors import EmptySetError, FormatError, PairingError, UnknownLayerTypeError

from ..test_utils import make_key, random_set


def write_checkpoint(directory: Path, tensors: dict[str, np.ndarray], config: dict, dtype: str = 'float32') -> None:
    directory.mkdir(parents=True, exist_ok=True)
    payload = safetensors.serialize({
        name: {'dtype': dtype, 'shape': list(t.shape), 'data': np.ascontiguousarray(t, dtype=dtype).tobytes()}
        for name, t in tensors.items()
    })
    (directory / ADAPTER_WEIGHTS_NAME).write_bytes(payload)
    (directory / ADAPTER_CONFIG_NAME).write_text(json.dumps(config))


def lora_pair(prefix: str, d1: int, d2: int, rank: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        f"{prefix}.lora_A.weight": rng.standard_normal((rank, d2)),
        f"{prefix}.lora_B.weight": rng.standard_normal((d1, rank)),
    }


PREFIX = 'base_model.model.model.layers.{}.self_attn.{}'


class LoadAdapterTest(unittest.TestCase):
    def test_shapes_and_scale(self):
        """alpha 32 with r 16 gives scale 2 on every layer."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            tensors = {**lora_pair(PREFIX.format(0, 'q_proj'), 768, 768, 16),
                       **lora_pair(PREFIX.format(0, 'v_proj'), 768, 768, 16, seed=1)}
            write_checkpoint(path, tensors, {'r': 16, 'lora_alpha': 32})

            adapter = load_adapter(path)
            self.assertEqual(len(adapter), 2)
            for layer in adapter:
                self.assertEqual((layer.rank, layer.d1, layer.d2), (16, 768, 768))
                self.assertEqual(layer.scale, 2.0)
                self.assertEqual(layer.storage_dtype, StorageDtype.F32)
            self.assertEqual([layer.key.layer_type for layer in adapter], [LayerType.Q, LayerType.V])
            self.assertEqual(adapter.init_rank, 16)

    def test_patterns(self):
        """rank_pattern and alpha_pattern override the global r and alpha per module."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            tensors = {**lora_pair(PREFIX.format(0, 'q_proj'), 8, 8, 4),
                       **lora_pair(PREFIX.format(1, 'q_proj'), 8, 8, 2, seed=1)}
            write_checkpoint(path, tensors, {
                'r': 4, 'lora_alpha': 8,
                'rank_pattern': {'model.layers.1.self_attn.q_proj': 2},
                'alpha_pattern': {'model.layers.1.self_attn.q_proj': 6},
            })
            adapter = load_adapter(path)
            self.assertEqual([layer.scale for layer in adapter], [2.0, 3.0])

    def test_rslora(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            write_checkpoint(path, lora_pair(PREFIX.format(0, 'k_proj'), 8, 8, 4),
                             {'r': 4, 'lora_alpha': 8, 'use_rslora': True})
            self.assertEqual(load_adapter(path).layers[0].scale, 4.0)

    def test_rslora_must_be_boolean(self):
        """A string such as "false" is rejected rather than read as true."""
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            tensors = lora_pair(PREFIX.format(0, 'k_proj'), 8, 8, 4)
            for value in ('false', 1, [True]):
                write_checkpoint(path, tensors, {'r': 4, 'lora_alpha': 8, 'use_rslora': value})
                with self.subTest(value=value), self.assertRaises(FormatError):
                    load_adapter(path)
            write_checkpoint(path, tensors, {'r': 4, 'lora_alpha': 8, 'use_rslora': None})
            self.assertEqual(load_adapter(path).layers[0].scale, 2.0)

    def test_skipped_tensors(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            tensors = {**lora_pair(PREFIX.format(0, 'q_proj'), 8, 8, 2),
                       'base_model.model.lm_head.weight': np.ones((4, 8)),
                       PREFIX.format(0, 'q_proj') + '.lora_magnitude_vector': np.ones((1, 8))}
            write_checkpoint(path, tensors, {'r': 2, 'lora_alpha': 2})
            adapter = load_adapter(path)
            self.assertEqual(len(adapter), 1)
            self.assertEqual(len(adapter.skipped_tensors), 2)

    def test_unpaired(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            tensors = lora_pair(PREFIX.format(0, 'q_proj'), 8, 8, 2)
            del tensors[PREFIX.format(0, 'q_proj') + '.lora_B.weight']
            write_checkpoint(path, tensors, {'r': 2})
            with self.assertRaises(PairingError):
                load_adapter(path)

    def test_rank_mismatch(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            prefix = PREFIX.format(0, 'q_proj')
            write_checkpoint(path, {f"{prefix}.lora_A.weight": np.ones((3, 8)),
                                    f"{prefix}.lora_B.weight": np.ones((8, 2))}, {'r': 2})
            with self.assertRaises(PairingError):
                load_adapter(path)

    def test_unknown_layer_type(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / 'adapter'
            write_checkpoint(path, lora_pair('model.layers.0.mlp.gate_proj', 8, 8, 2), {'r': 2})
            with self.assertRaises(UnknownLayerTypeError):
                load_adapter(path)

    def test_missing_files(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(FormatError):
                load_adapter(tmpdir)
            (Path(tmpdir) / ADAPTER_CONFIG_NAME).write_text('{}')
            with self.assertRaises(FormatError):
                load_adapter(tmpdir)

    def test_bad_config(self):
        for config in ['[1, 2]', '{"lora_alpha": "big"}', '{"r": true}', '{"rank_pattern": [1]}', '{not json']:
            with self.subTest(config=config), tempfile.TemporaryDirectory() as tmpdir:
                path = Path(tmpdir)
                write_checkpoint(path, lora_pair(PREFIX.format(0, 'q_proj'), 4, 4, 1), {})
                (path / ADAPTER_CONFIG_NAME).write_text(config)
                with self.assertRaises(FormatError):
                    load_adapter(path)

    def test_nan_tensor(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir)
            tensors = lora_pair(PREFIX.format(0, 'q_proj'), 4, 4, 1)
            tensors[PREFIX.format(0, 'q_proj') + '.lora_A.weight'][0, 0] = np.nan
            write_checkpoint(path, tensors, {'r': 1})
            with self.assertRaises(FormatError):
                load_adapter(path)


class SaveAdapterTest(unittest.TestCase):
    def test_round_trip(self):
        """Saving and loading reproduces keys, shapes and values at the storage dtype."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            dtype = list(StorageDtype)[seed % len(StorageDtype)]
            types = [LayerType.Q, LayerType.V] if seed % 2 else list(LayerType)
            adapter = random_set(rng, 1 + seed % 3, 6 + seed % 5, 5 + seed % 4, 1 + seed % 3,
                                 layer_types=types, storage_dtype=dtype, scale=1.0)
            with self.subTest(seed=seed, dtype=dtype), tempfile.TemporaryDirectory() as tmpdir:
                save_adapter(adapter, tmpdir)
                loaded = load_adapter(tmpdir)
                self.assertEqual(loaded.keys, adapter.keys)
                for original, restored in zip(adapter, loaded):
                    self.assertEqual(restored.storage_dtype, dtype)
                    self.assertEqual(restored.scale, original.scale)
                    expected_a = decode_tensor(dtype.value, list(original.a.shape), encode_tensor(original.a, dtype))
                    np.testing.assert_array_equal(restored.a, expected_a)
                    expected_b = decode_tensor(dtype.value, list(original.b.shape), encode_tensor(original.b, dtype))
                    np.testing.assert_array_equal(restored.b, expected_b)
                save_adapter(loaded, Path(tmpdir) / 'again')
                self.assertEqual(fingerprint(load_adapter(Path(tmpdir) / 'again')), fingerprint(loaded))

    def test_heterogeneous_ranks(self):
        """Ranks {4, 7} load back with their own scales through rank_pattern and alpha_pattern."""
        rng = np.random.default_rng(5)
        layers = (
            AdapterLayer(make_key(1), rng.standard_normal((10, 4)), rng.standard_normal((4, 9)), scale=1.0),
            AdapterLayer(make_key(3), rng.standard_normal((10, 7)), rng.standard_normal((7, 9)), scale=1.0),
        )
        adapter = AdapterSet(layers, alpha=16.0, init_rank=7)
        with tempfile.TemporaryDirectory() as tmpdir:
            save_adapter(adapter, tmpdir)
            config = json.loads((Path(tmpdir) / ADAPTER_CONFIG_NAME).read_text())
            self.assertEqual(len(config['rank_pattern']), 2)
            self.assertEqual(sorted(config['rank_pattern'].values()), [4, 7])
            loaded = load_adapter(tmpdir)
            self.assertEqual([layer.rank for layer in loaded], [4, 7])
            self.assertEqual([layer.scale for layer in loaded], [1.0, 1.0])

    def test_header_shapes(self):
        """A rank-3 layer is written as [3, d2] and [d1, 3] tensors."""
        rng = np.random.default_rng(6)
        adapter = AdapterSet((AdapterLayer(make_key(), rng.standard_normal((12, 3)), rng.standard_normal((3, 5))),))
        with tempfile.TemporaryDirectory() as tmpdir:
            save_adapter(adapter, tmpdir)
            raw = (Path(tmpdir) / ADAPTER_WEIGHTS_NAME).read_bytes()
            (length,) = struct.unpack('<Q', raw[:8])
            header = json.loads(raw[8:8 + length])
            shapes = {name: info['shape'] for name, info in header.items() if name != '__metadata__'}
            self.assertEqual(sorted(shapes.values()), [[3, 5], [12, 3]])

    def test_bf16_written_back_unchanged(self):
        adapter = generate_synthetic(1, (16, 16), 4, PowerLaw(0.5), seed=3, layer_types=[LayerType.Q],
                                     storage_dtype=StorageDtype.BF16)
        with tempfile.TemporaryDirectory() as tmpdir:
            save_adapter(adapter, Path(tmpdir) / 'first')
            loaded = load_adapter(Path(tmpdir) / 'first')
            save_adapter(loaded, Path(tmpdir) / 'second')
            self.assertEqual((Path(tmpdir) / 'first' / ADAPTER_WEIGHTS_NAME).read_bytes(),
                             (Path(tmpdir) / 'second' / ADAPTER_WEIGHTS_NAME).read_bytes())

    def test_empty(self):
        with tempfile.TemporaryDirectory() as tmpdir, self.assertRaises(EmptySetError):
            save_adapter(AdapterSet(()), tmpdir)


class TensorCodecTest(unittest.TestCase):
    def test_bf16_rounding(self):
        values = np.array([1.0, -2.5, 3.14159, 1e-3])
        decoded = decode_tensor('BF16', [4], encode_tensor(values, StorageDtype.BF16))
        np.testing.assert_allclose(decoded, values, rtol=2 ** -8)
        self.assertEqual(decoded[0], 1.0)
        self.assertEqual(decoded[1], -2.5)

    def test_unsupported_dtype(self):
        with self.assertRaises(FormatError):
            decode_tensor('I32', [1], b'\0\0\0\0')

    def test_byte_count(self):
        with self.assertRaises(FormatError):
            decode_tensor('F32', [3], b'\0' * 8)


class ReadSafetensorsFuzzTest(unittest.TestCase):
    """Malformed tensor files raise FormatError and nothing else."""

    @settings(max_examples=500, deadline=None)
    @given(st.binary(max_size=256))
    def test_arbitrary_bytes(self, data):
        try:
            read_safetensors(data)
        except FormatError:
            pass

    @settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(
        st.dictionaries(
            st.sampled_from(['base_model.model.model.layers.0.self_attn.q_proj.lora_A.weight',
                             'base_model.model.model.layers.0.self_attn.q_proj.lora_B.weight',
                             'x.lora_A.weight', '__metadata__']),
            st.fixed_dictionaries({
                'dtype': st.sampled_from(['F32', 'F16', 'BF16', 'F64', 'I8', 'bogus']),
                'shape': st.lists(st.integers(min_value=-1, max_value=5), max_size=3),
                'data_offsets': st.lists(st.integers(min_value=-2, max_value=300), min_size=0, max_size=3),
            }),
            max_size=3),
        st.integers(min_value=0, max_value=300),
        st.integers(min_value=-4, max_value=4))
    def test_fuzzed_header(self, header, buffer_size, length_skew):
        """Headers with bad dtypes, shapes, offsets or length prefixes never escape as other errors."""
        text = json.dumps(header).encode('utf-8')
        data = struct.pack('<Q', max(len(text) + length_skew, 0)) + text + b'\0' * buffer_size
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir)
            (path / ADAPTER_WEIGHTS_NAME).write_bytes(data)
            (path / ADAPTER_CONFIG_NAME).write_text('{"r": 1}')
            try:
                load_adapter(path)
            except FormatError:
                pass

    def test_mutated_valid_file(self):
        """Single-byte corruptions of a valid checkpoint either load or raise FormatError."""
        adapter = random_set(np.random.default_rng(7), 1, 4, 4, 2, layer_types=[LayerType.Q, LayerType.K])
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir)
            save_adapter(adapter, path)
            original = (path / ADAPTER_WEIGHTS_NAME).read_bytes()
            rng = np.random.default_rng(8)
            for _ in range(200):
                mutated = bytearray(original)
                mutated[int(rng.integers(len(mutated)))] = int(rng.integers(256))
                (path / ADAPTER_WEIGHTS_NAME).write_bytes(bytes(mutated))
                try:
                    load_adapter(path)
                except FormatError:
                    pass

    def test_corrupted_header_bytes(self):
        """1000 corruptions inside the length prefix and JSON header are loaded or rejected with FormatError."""
        adapter = random_set(np.random.default_rng(11), 2, 6, 4, 2, layer_types=[LayerType.Q, LayerType.V])
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir)
            save_adapter(adapter, path)
            original = (path / ADAPTER_WEIGHTS_NAME).read_bytes()
            header_end = 8 + struct.unpack('<Q', original[:8])[0]
            rng = np.random.default_rng(12)
            for case in range(1000):
                mutated = bytearray(original)
                for _ in range(1 + case % 4):
                    mutated[int(rng.integers(header_end))] = int(rng.integers(256))
                (path / ADAPTER_WEIGHTS_NAME).write_bytes(bytes(mutated))
                with self.subTest(case=case):
                    try:
                        load_adapter(path)
                    except FormatError:
                        pass


class FingerprintTest(unittest.TestCase):
    def test_stable_and_sensitive(self):
        rng = np.random.default_rng(9)
        adapter = random_set(rng, 1, 4, 4, 2, layer_types=[LayerType.Q])
        self.assertEqual(fingerprint(adapter), fingerprint(adapter))
        self.assertRegex(fingerprint(adapter), r'^[0-9a-f]{32}$')
        layer = adapter.layers[0]
        b = layer.b.copy()
        b[0, 0] += 1.0
        changed = AdapterSet((AdapterLayer(layer.key, b, layer.a, layer.scale, layer.storage_dtype),))
        self.assertNotEqual(fingerprint(adapter), fingerprint(changed))

    def test_key_matters(self):
        rng = np.random.default_rng(10)
        layer = rng.standard_normal((4, 2)), rng.standard_normal((2, 4))
        first = AdapterSet((AdapterLayer(LayerKey(1, LayerType.Q, 'm.layers.0.q_proj'), *layer),))
        second = AdapterSet((AdapterLayer(LayerKey(1, LayerType.Q, 'm.layers.0.query'), *layer),))
        self.assertNotEqual(fingerprint(first), fingerprint(second))


if __name__ == '__main__':
    unittest.main()
