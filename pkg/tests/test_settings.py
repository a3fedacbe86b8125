import os
import tempfile
import unittest
from pathlib import Path

from para.settings import (
    CONFIG_ENV, DEFAULT_CONFIG_NAME, SETTING_ANALYZE_BINS, SETTING_VERIFY_TOLERANCE, Settings)


class SettingsTest(unittest.TestCase):
    def setUp(self):
        self._env = os.environ.pop(CONFIG_ENV, None)
        self._cwd = os.getcwd()
        self._tmpdir = tempfile.TemporaryDirectory()
        self.root = Path(self._tmpdir.name)

    def tearDown(self):
        os.chdir(self._cwd)
        if self._env is not None:
            os.environ[CONFIG_ENV] = self._env
        else:
            os.environ.pop(CONFIG_ENV, None)
        self._tmpdir.cleanup()

    def write(self, name: str, text: str) -> Path:
        path = self.root / name
        path.write_text(text)
        return path

    def test_dotted_get(self):
        settings = Settings({'analyze': {'bins': 32}, 'verify': 1})
        self.assertEqual(settings.get(SETTING_ANALYZE_BINS), 32)
        self.assertEqual(settings.get('analyze'), {'bins': 32})
        self.assertIsNone(settings.get('analyze.epsilons'))
        self.assertEqual(settings.get(SETTING_VERIFY_TOLERANCE, 1e-6), 1e-6)

    def test_load(self):
        path = self.write('custom.toml', '[verify]\ntolerance = 1e-4\n\n[layer_types]\ngate = ["gate_proj"]\n')
        settings = Settings.load(path)
        self.assertEqual(settings.get(SETTING_VERIFY_TOLERANCE), 1e-4)
        self.assertEqual(settings.get('layer_types.gate'), ['gate_proj'])
        self.assertEqual(settings.source, path)

    def test_locate_order(self):
        explicit = self.write('explicit.toml', '[analyze]\nbins = 1\n')
        from_env = self.write('env.toml', '[analyze]\nbins = 2\n')
        self.write(DEFAULT_CONFIG_NAME, '[analyze]\nbins = 3\n')
        os.chdir(self.root)

        self.assertEqual(Settings.locate().get(SETTING_ANALYZE_BINS), 3)
        os.environ[CONFIG_ENV] = str(from_env)
        self.assertEqual(Settings.locate().get(SETTING_ANALYZE_BINS), 2)
        self.assertEqual(Settings.locate(explicit).get(SETTING_ANALYZE_BINS), 1)

    def test_missing_file_gives_empty_settings(self):
        os.chdir(self.root)
        settings = Settings.locate()
        self.assertIsNone(settings.source)
        self.assertEqual(settings.get(SETTING_ANALYZE_BINS, 64), 64)

    def test_errors(self):
        with self.assertRaises(FileNotFoundError):
            Settings.load(self.root / 'absent.toml')
        with self.assertRaises(ValueError):
            Settings.load(self.write('bad.toml', 'bins = [\n'))


if __name__ == '__main__':
    unittest.main()
