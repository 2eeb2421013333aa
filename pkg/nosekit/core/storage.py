import os
import pathlib
import tempfile
import unittest
import unittest.mock
from typing import Union

import numpy as np
import xxhash

__all__ = ['output_root', 'hash_file', 'hash_bytes',
           'hash_text', 'hash_array', 'match_hash', 'save_hash']

ENV_OUTPUT_ROOT = 'NOSEKIT_HOME'


def output_root() -> pathlib.Path:
    """Return the root directory for runs and generated datasets.

    It is ``~/.nosekit`` unless the ``NOSEKIT_HOME`` environment variable is set.
    """
    env = os.environ.get(ENV_OUTPUT_ROOT)
    return pathlib.Path(env) if env else pathlib.Path.home()/'.nosekit'


def hash_file(file_path: pathlib.Path) -> str:
    """Compute the hash of the content of file_path."""
    x = xxhash.xxh128()
    m = 2 ** 23  # read 8MB each time
    with pathlib.Path(file_path).open('rb') as f:
        while True:
            data = f.read(m)
            if not data: break
            x.update(data)
    return x.hexdigest()

def hash_bytes(data: bytes) -> str:
    return xxhash.xxh128(data).hexdigest()

def hash_text(text: str) -> str:
    return hash_bytes(text.encode('utf-8'))

def hash_array(*arrays: np.ndarray) -> str:
    """Hash arrays by dtype, shape and raw little-endian float64 bytes."""
    x = xxhash.xxh128()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype='<f8'))
        x.update(str(a.shape).encode())
        x.update(a.tobytes())
    return x.hexdigest()


def _add_suffix(file_path: pathlib.Path, suffix: str) -> pathlib.Path:
    return file_path.with_suffix(file_path.suffix+suffix)

def match_hash(file_path: Union[str, pathlib.Path], key: str = '') -> bool:
    """Return true if the saved hash sidecar matches both ``key`` and the contents of file_path.

    :param file_path: The cached output file.
    :param key: A hash of whatever produced the file, e.g. its inputs and parameters.
    """
    file_path = pathlib.Path(file_path)
    hash_file_path = _add_suffix(file_path, '.xxh')
    if hash_file_path.is_file() and file_path.is_file():
        with hash_file_path.open('r') as f:
            saved = f.read().split()
        if saved == [key or '-', hash_file(file_path)]:
            return True
    return False

def save_hash(file_path: Union[str, pathlib.Path], key: str = '') -> None:
    """Save the hash sidecar for file_path."""
    file_path = pathlib.Path(file_path)
    if not file_path.is_file(): return
    hash_file_path = _add_suffix(file_path, '.xxh')
    with hash_file_path.open('w') as f:
        f.write(f'{key or "-"} {hash_file(file_path)}\n')


class TestOutputRoot(unittest.TestCase):
    def test_output_root(self):
        with unittest.mock.patch.dict(os.environ, {ENV_OUTPUT_ROOT: '/tmp/nk'}):
            self.assertEqual(output_root(), pathlib.Path('/tmp/nk'))
        with unittest.mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(output_root().name, '.nosekit')

class TestHash(unittest.TestCase):
    def test_hash(self):
        with tempfile.TemporaryDirectory() as d:
            fn = pathlib.Path(d)/'emb.tsv'
            fn.write_bytes(b'12345678')
            self.assertEqual(match_hash(fn, 'k1'), False)
            save_hash(fn, 'k1')
            self.assertEqual(match_hash(fn, 'k1'), True)
            self.assertEqual(match_hash(fn, 'k2'), False)
            fn.write_bytes(b'changed')
            self.assertEqual(match_hash(fn, 'k1'), False)

    def test_hash_array(self):
        a = np.arange(6.0)
        self.assertEqual(hash_array(a), hash_array(a.copy()))
        self.assertNotEqual(hash_array(a), hash_array(a.reshape(2, 3)))
        self.assertNotEqual(hash_array(a), hash_array(a + 1e-12))


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
