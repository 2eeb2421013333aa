import abc
import io
import pathlib
import tarfile
import zipfile
from typing import List, Sequence, Union

from nosekit.core.errors import DataError

__all__ = ['Reader', 'EmptyReader', 'FolderReader', 'TarReader', 'ZipReader', 'create_reader', 'listify']

def listify(x):
    """Make x a list if it isn't."""
    return [] if not x else (list(x) if isinstance(x, (tuple, list)) else [x])

class Reader(abc.ABC):
    """The base class of the data reader.

    A reader hides whether a dataset root is a plain folder or an archive, so the
    ingestion code only deals with relative paths such as ``train/cashew/day1.csv``.

    :param root: The root path.
    """
    def __init__(self, root: pathlib.Path):
        root = pathlib.Path(root)
        if not root.exists():
            raise DataError(f'dataset root {root} does not exist')
        self._root = root

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self._root == other._root

    def __ne__(self, other) -> bool:
        return not self == other

    def __repr__(self) -> str:
        return f'{type(self).__name__}({str(self._root)!r})'

    @property
    def root(self) -> pathlib.Path:
        return self._root

    @abc.abstractmethod
    def open(self, path: Union[str, pathlib.Path]):
        """Open a file, given relative to the root, as a binary stream."""

    @abc.abstractmethod
    def _list_all(self) -> List[pathlib.Path]:
        pass

    def exists(self, path: Union[str, pathlib.Path]) -> bool:
        return pathlib.Path(path) in set(self._list_all())

    def read_text(self, path: Union[str, pathlib.Path]) -> str:
        """Read a whole file as UTF-8 text."""
        with self.open(path) as f:
            return f.read().decode('utf-8')

    def list_files(self, extensions: Sequence[str] = (), subfolders: Sequence[str] = ()) -> List[pathlib.Path]:
        """Relative paths of all files, sorted by their POSIX form.

        :param extensions: Keep only these suffixes, compared case-insensitively.
        :param subfolders: Keep only files below one of these top-level folders.
        """
        files = self._list_all()
        if extensions:
            suffixes = {e.lower() for e in extensions}
            files = [f for f in files if f.suffix.lower() in suffixes]
        if subfolders:
            files = [f for f in files if f.parts and f.parts[0] in set(subfolders)]
        return sorted(files, key=lambda p: p.as_posix())


class EmptyReader(Reader):
    """Backs datasets that live only in memory, such as generated ones."""
    def __init__(self):
        self._root = pathlib.Path()

    def _list_all(self):
        return []

    def open(self, path: Union[str, pathlib.Path]):
        raise DataError(f'{path}: an in-memory dataset has no files')

    def __eq__(self, other) -> bool:
        return isinstance(other, EmptyReader)

class FolderReader(Reader):
    def open(self, path: Union[str, pathlib.Path]):
        return (self._root/path).open('rb')

    def _list_all(self):
        return [p.relative_to(self._root) for p in self._root.rglob('*') if p.is_file()]

# a ZipFile handle must not be shared across worker processes
class ZipReader(Reader):
    """Reads a dataset root packed as a ``.zip`` archive."""
    def __init__(self, root: pathlib.Path):
        super().__init__(root)
        self._root_fp = zipfile.ZipFile(self._root, 'r')

    def open(self, path: Union[str, pathlib.Path]):
        return self._root_fp.open(pathlib.Path(path).as_posix())

    def _list_all(self):
        return [pathlib.Path(info.filename) for info in self._root_fp.infolist()
                if not info.is_dir() and '__MACOSX' not in info.filename]

class TarReader(Reader):
    """Reads a dataset root packed as a tarball, members are buffered in memory."""
    def __init__(self, root: pathlib.Path):
        super().__init__(root)
        self._root_fp = tarfile.open(self._root, 'r')

    def open(self, path: Union[str, pathlib.Path]):
        fp = self._root_fp.extractfile(pathlib.Path(path).as_posix())
        if fp is None:
            raise DataError(f'{path} is not a regular file in {self._root}')
        return io.BytesIO(fp.read())

    def _list_all(self):
        return [pathlib.Path(m.name) for m in self._root_fp.getmembers() if m.isfile()]

def create_reader(data_path: Union[str, pathlib.Path]) -> Reader:
    """Create a data reader for a local dataset root.

    :param data_path: A folder, a zip file or a tar file.
    :return: The created data reader
    """
    path = pathlib.Path(data_path)
    if not path.exists():
        raise DataError(f'dataset root {path} does not exist')
    if path.is_dir():
        return FolderReader(path)
    if path.suffix == '.zip':
        return ZipReader(path)
    if path.suffix in ['.tar', '.tgz', '.gz']:
        return TarReader(path)
    raise DataError(f'{path} is neither a folder nor a zip or tar archive')

import tempfile
import unittest

class TestListify(unittest.TestCase):
    def test_listify(self):
        self.assertEqual(listify(None), [])
        self.assertEqual(listify(1), [1,])
        self.assertEqual(listify([1,2,3]), [1,2,3])
        self.assertEqual(listify(('a',1,)), ['a',1])

class TestReader(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)/'data'
        for rel in ['train/cashew/day1.csv', 'train/almond/day2.csv', 'recipes.tsv']:
            (self.root/rel).parent.mkdir(parents=True, exist_ok=True)
            (self.root/rel).write_text(f'content of {rel}\n')

    def tearDown(self):
        self.tmp.cleanup()

    def test_folder(self):
        r = create_reader(self.root)
        self.assertEqual(type(r), FolderReader)
        self.assertEqual(r.list_files(['.csv']),
                         [pathlib.Path('train/almond/day2.csv'), pathlib.Path('train/cashew/day1.csv')])
        self.assertEqual(r.read_text('recipes.tsv'), 'content of recipes.tsv\n')
        self.assertTrue(r.exists('recipes.tsv'))

    def test_archives(self):
        zip_path = pathlib.Path(self.tmp.name)/'data.zip'
        with zipfile.ZipFile(zip_path, 'w') as z:
            for p in self.root.glob('**/*'):
                if p.is_file(): z.write(p, p.relative_to(self.root).as_posix())
        tar_path = pathlib.Path(self.tmp.name)/'data.tar'
        with tarfile.open(tar_path, 'w') as t:
            for p in self.root.glob('**/*'):
                if p.is_file(): t.add(p, p.relative_to(self.root).as_posix())
        for path, typ in [(zip_path, ZipReader), (tar_path, TarReader)]:
            r = create_reader(path)
            self.assertEqual(type(r), typ)
            self.assertEqual(len(r.list_files(['.csv'])), 2)
            self.assertEqual(r.read_text('train/cashew/day1.csv'), 'content of train/cashew/day1.csv\n')

    def test_missing(self):
        with self.assertRaises(DataError):
            create_reader(self.root/'nope')

    def test_equal(self):
        a = create_reader(self.root)
        b = create_reader(self.root)
        self.assertEqual(a, b)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
