import difflib
import io
import functools
import pathlib
import re
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd

from nosekit.core.errors import UnknownNameError
from nosekit.core.types import CATEGORIES, NUM_ODORANTS, SubstanceLabel

__all__ = ['Registry', 'default_registry', 'registry_lookup', 'odorants', 'odorant_index',
           'reference_statistics']

_HERE = pathlib.Path(__file__).parent
SUBSTANCES_FILE = _HERE/'substances.txt'
ODORANTS_FILE = _HERE/'odorants.txt'
REFERENCE_FILE = _HERE/'reference_stats.tsv'

def _read_manifest(path: pathlib.Path) -> Tuple[str, pd.DataFrame]:
    return _parse_manifest(path.read_text(encoding='utf-8'))

def _parse_manifest(text: str) -> Tuple[str, pd.DataFrame]:
    m = re.search(r'^#\s*version:\s*(\S+)', text, re.MULTILINE)
    version = m.group(1) if m else '0'
    df = pd.read_csv(io.StringIO(text), sep='\t', comment='#', header=None, dtype=str)
    return version, df

class Registry:
    """The label space of a classification task.

    Class indices follow the lexicographic order of the substance names. A
    registry can be narrowed with :meth:`subset`, which re-indexes the kept
    names from 0.

    :param entries: (name, category) pairs.
    :param version: The manifest version, recorded in run manifests.
    """
    def __init__(self, entries: Sequence[Tuple[str, str]], version: str = '1') -> None:
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError(f'duplicated substance names in {names}')
        for n, c in entries:
            if c not in CATEGORIES:
                raise ValueError(f'category {c!r} of {n!r} is not in {CATEGORIES}')
        self.version = version
        self._labels = [SubstanceLabel(i, n, c) for i, (n, c) in enumerate(sorted(entries))]
        self._by_name = {l.name: l for l in self._labels}

    @classmethod
    def load(cls, path: Optional[Union[str, pathlib.Path]] = None) -> 'Registry':
        """Load a registry from a ``name<TAB>category`` manifest."""
        return cls.loads((pathlib.Path(path) if path else SUBSTANCES_FILE).read_text(encoding='utf-8'))

    @classmethod
    def loads(cls, text: str) -> 'Registry':
        """Parse a registry from the text of a manifest."""
        version, df = _parse_manifest(text)
        return cls([(n.strip(), c.strip()) for n, c in zip(df[0], df[1])], version)

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self) -> Iterator[SubstanceLabel]:
        return iter(self._labels)

    def __getitem__(self, class_index: int) -> SubstanceLabel:
        return self._labels[class_index]

    def __repr__(self) -> str:
        return f'Registry({len(self)} substances, version {self.version})'

    @property
    def names(self) -> List[str]:
        return [l.name for l in self._labels]

    @property
    def categories(self) -> List[str]:
        """The category of each class, in class index order."""
        return [l.category for l in self._labels]

    def lookup(self, name: str) -> SubstanceLabel:
        key = name.strip().lower()
        if key in self._by_name:
            return self._by_name[key]
        raise UnknownNameError(name, difflib.get_close_matches(key, self.names, n=3, cutoff=0.6))

    def __contains__(self, name: str) -> bool:
        return name.strip().lower() in self._by_name

    def subset(self, names: Sequence[str]) -> 'Registry':
        """Return a registry over only ``names``, indexed from 0."""
        return Registry([(l.name, l.category) for l in map(self.lookup, names)],
                        f'{self.version}/{len(names)}')

    def to_text(self) -> str:
        """Serialize as a manifest that :meth:`loads` reads back."""
        lines = [f'# version: {self.version}'] + [f'{l.name}\t{l.category}' for l in self._labels]
        return '\n'.join(lines) + '\n'

@functools.lru_cache(maxsize=None)
def default_registry() -> Registry:
    """The 50-substance registry shipped with the package."""
    return Registry.load()

def registry_lookup(name: str, registry: Optional[Registry] = None) -> SubstanceLabel:
    """Return the label record of a substance name.

    :raise UnknownNameError: if the name is not registered, with the nearest matches.
    """
    return (registry or default_registry()).lookup(name)

@functools.lru_cache(maxsize=None)
def odorants() -> Tuple[str, ...]:
    """The mixture odorant palette in index order."""
    _, df = _read_manifest(ODORANTS_FILE)
    names = tuple(n.strip() for n in df[0])
    if len(names) != NUM_ODORANTS:
        raise ValueError(f'expect {NUM_ODORANTS} odorants in {ODORANTS_FILE}, got {len(names)}')
    return names

def odorant_index(name: str) -> int:
    key = name.strip().lower()
    if key not in odorants():
        raise UnknownNameError(name, difflib.get_close_matches(key, odorants(), n=3, cutoff=0.6))
    return odorants().index(key)

@functools.lru_cache(maxsize=None)
def reference_statistics() -> pd.DataFrame:
    """Per-ingredient channel means and stds of the raw base recordings.

    The frame is indexed by ingredient with ``<channel>_mean`` and
    ``<channel>_std`` columns.
    """
    return pd.read_csv(REFERENCE_FILE, sep='\t', index_col='ingredient')


import unittest

class TestRegistry(unittest.TestCase):
    def test_default(self):
        reg = default_registry()
        self.assertEqual(len(reg), 50)
        self.assertEqual(reg.names, sorted(reg.names))
        self.assertEqual(reg.version, '1')
        self.assertEqual(sorted(set(reg.categories)), sorted(CATEGORIES))

    def test_lookup(self):
        cashew = registry_lookup('cashew')
        self.assertEqual(cashew.category, 'nuts')
        self.assertEqual(cashew.class_index, default_registry().names.index('cashew'))
        self.assertEqual(registry_lookup('allspice').category, 'spices')
        self.assertEqual(registry_lookup('allspice').class_index, 0)
        with self.assertRaises(UnknownNameError):
            registry_lookup('')
        with self.assertRaises(UnknownNameError) as cm:
            registry_lookup('cashw')
        self.assertIn('cashew', cm.exception.suggestions)

    def test_round_trip(self):
        for label in default_registry():
            self.assertEqual(registry_lookup(label.name).class_index, label.class_index)

    def test_subset(self):
        sub = default_registry().subset(['walnuts', 'apple', 'cumin'])
        self.assertEqual(sub.names, ['apple', 'cumin', 'walnuts'])
        self.assertEqual(sub.lookup('walnuts').class_index, 2)
        self.assertEqual(sub.lookup('cumin').category, 'spices')
        self.assertEqual(Registry.loads(sub.to_text()).names, sub.names)

    def test_odorants(self):
        self.assertEqual(len(odorants()), 12)
        self.assertEqual(odorants()[0], 'almond')
        self.assertEqual(odorants()[-1], 'strawberry')
        self.assertEqual(odorant_index('orange'), 8)
        with self.assertRaises(UnknownNameError):
            odorant_index('vanilla')

    def test_reference(self):
        ref = reference_statistics()
        self.assertEqual(sorted(ref.index), default_registry().names)
        self.assertAlmostEqual(ref.loc['cashew', 'CO_mean'], 757.08)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
