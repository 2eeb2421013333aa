import json
import logging
import pathlib

from nosekit import core
from nosekit.sensor.dataset import SessionDataset
from nosekit.sensor.synthetic import SyntheticConfig, generate_synthetic

__all__ = ['synthetic_meta', 'load_synthetic']

synthetic_meta = [
    {'name'   : 'synthetic-base',
     'config' : {}},
    {'name'   : 'synthetic-drift',
     'config' : {'day_shift_std': 300.0, 'drift_std': 1.0}},
    {'name'   : 'synthetic-shift',
     'config' : {'shifted_day': 1}},
    {'name'   : 'synthetic-onset',
     'config' : {'onset_step': 300}},
    {'name'   : 'synthetic-mixture',
     'config' : {'flavor': 'mixture', 'num_classes': 4, 'channels': 4, 'sessions_per_class': 3,
                 'drift_std': 0.0, 'day_shift_std': 0.0}},
]

def load_synthetic(name: str, config: dict) -> SessionDataset:
    """Generate a built-in synthetic dataset on first use, then load it from disk."""
    cfg = SyntheticConfig(**config)
    root = core.output_root()/'datasets'/name
    meta = root/'synthetic.json'
    expected = json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + '\n'
    if meta.is_file() and meta.read_text() == expected:
        logging.info(f'Reuse {name} in {root}')
        return SessionDataset.from_root(root, task=cfg.flavor)
    return generate_synthetic(cfg, root, progress=True)

for x in synthetic_meta:
    SessionDataset.add(x['name'], load_synthetic, [x['name'], x['config']])


import os
import tempfile
import unittest
from unittest import mock

class TestConstructing(unittest.TestCase):
    def test_list(self):
        for x in synthetic_meta:
            self.assertIn(x['name'], SessionDataset.list())
            SyntheticConfig(**x['config'])

    def test_get(self):
        with tempfile.TemporaryDirectory() as tmp, mock.patch.dict(os.environ, {'NOSEKIT_HOME': tmp}):
            ds = SessionDataset.get('synthetic-onset')
            self.assertEqual(ds.name, 'synthetic-onset')
            self.assertEqual(len(ds), 30)
            with self.assertLogs(level='INFO') as cm:
                again = SessionDataset.get('synthetic-onset')
            self.assertTrue(any('Reuse' in m for m in cm.output))
            self.assertEqual(ds.fingerprint(), again.fingerprint())


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
