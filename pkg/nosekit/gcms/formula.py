"""Elemental composition descriptors of ingredients."""
import dataclasses
import io
import logging
import pathlib
import re
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from nosekit import core
from nosekit.gcms.spectrum import GcmsEmbedding

__all__ = ['ELEMENTS', 'parse_formula', 'raw_atom_counts', 'AtomStats', 'fit_atom_stats',
           'atom_descriptor', 'read_formulas']

ELEMENTS = ('C', 'H', 'O', 'N', 'S', 'Cl')
_TOKEN = re.compile(r'([A-Z][a-z]?)(\d*)')

def parse_formula(formula: str) -> Dict[str, int]:
    """Count the atoms of a Hill-notation formula such as ``C2H6O``."""
    text = formula.strip()
    counts: Dict[str, int] = {}
    pos = 0
    for m in _TOKEN.finditer(text):
        if m.start() != pos:
            break
        counts[m.group(1)] = counts.get(m.group(1), 0) + (int(m.group(2)) if m.group(2) else 1)
        pos = m.end()
    if not text or pos != len(text):
        raise core.DataError(f'cannot parse formula {formula!r}')
    return counts

def raw_atom_counts(formulas: Sequence[str], elements: Sequence[str] = ELEMENTS) -> np.ndarray:
    """Sum element counts over the compounds of an ingredient.

    Elements outside ``elements`` are dropped with a warning.
    """
    g = np.zeros(len(elements))
    dropped = set()
    for f in formulas:
        for e, n in parse_formula(f).items():
            if e in elements:
                g[list(elements).index(e)] += n
            else:
                dropped.add(e)
    if dropped:
        logging.warning(f'Dropped elements {sorted(dropped)} outside {list(elements)}')
    return g

@dataclasses.dataclass(frozen=True)
class AtomStats:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    elements: Tuple[str, ...] = ELEMENTS

def fit_atom_stats(raw: Mapping[str, np.ndarray], elements: Sequence[str] = ELEMENTS) -> AtomStats:
    """Fit per-element mean and population std over training ingredients.

    :param raw: ingredient -> raw counts.
    :raise FitError: if an element has zero spread.
    """
    if not raw:
        raise core.FitError('no ingredient to fit atom statistics on')
    X = np.stack([raw[k] for k in sorted(raw)])
    mean, std = X.mean(axis=0), X.std(axis=0)
    for e, s in zip(elements, std):
        if s == 0:
            raise core.FitError(f'element {e} has zero spread over {len(X)} ingredients')
    return AtomStats(tuple(mean), tuple(std), tuple(elements))

def atom_descriptor(formulas: Sequence[str], stats: AtomStats, ingredient: str = '') -> GcmsEmbedding:
    g = raw_atom_counts(formulas, stats.elements)
    return GcmsEmbedding((g - np.array(stats.mean)) / np.array(stats.std), 'atom', ingredient)

def read_formulas(path: Union[str, pathlib.Path, io.StringIO]) -> Dict[str, List[str]]:
    """Read a formulas TSV with columns ``compound_id``, ``ingredient``, ``formula``.

    :return: ingredient -> formulas, one per compound.
    """
    df = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    for c in ('compound_id', 'ingredient', 'formula'):
        if c not in df.columns:
            raise core.DataError(f'formulas file {path} misses column {c}')
    df = df.drop_duplicates(['ingredient', 'compound_id'])
    out: Dict[str, List[str]] = {}
    for ingredient, formula in zip(df['ingredient'], df['formula']):
        out.setdefault(ingredient.strip().lower(), []).append(formula)
    return out


import unittest

class TestFormula(unittest.TestCase):
    def test_parse(self):
        self.assertEqual(parse_formula('C2H6O'), {'C': 2, 'H': 6, 'O': 1})
        self.assertEqual(parse_formula('CH3Cl'), {'C': 1, 'H': 3, 'Cl': 1})
        for bad in ['', 'c2h6', 'C2-H6', '2C']:
            with self.assertRaises(core.DataError):
                parse_formula(bad)

    def test_counts(self):
        self.assertEqual(raw_atom_counts(['C2H6O']).tolist(), [2, 6, 1, 0, 0, 0])
        self.assertEqual(raw_atom_counts(['C1H4', 'C2H6O']).tolist(), [3, 10, 1, 0, 0, 0])
        with self.assertLogs(level='WARNING'):
            self.assertEqual(raw_atom_counts(['C2H5Na']).tolist(), [2, 5, 0, 0, 0, 0])

    def test_standardize(self):
        rng = np.random.default_rng(0)
        raw = {f'i{k}': rng.integers(1, 20, size=6).astype(float) for k in range(8)}
        stats = fit_atom_stats(raw)
        X = np.stack([(raw[k] - np.array(stats.mean)) / np.array(stats.std) for k in raw])
        self.assertTrue(np.allclose(X.mean(axis=0), 0, atol=1e-9))
        self.assertTrue(np.allclose(X.std(axis=0), 1, atol=1e-9))
        with self.assertRaises(core.FitError):
            fit_atom_stats({'a': np.array([1., 0, 0, 0, 0, 0]), 'b': np.array([2., 0, 0, 0, 0, 1])})

    def test_descriptor(self):
        stats = AtomStats((1.0,) * 6, (2.0,) * 6)
        e = atom_descriptor(['C2H6O'], stats, 'x')
        self.assertEqual(e.kind, 'atom')
        self.assertEqual(e.vector.tolist(), [0.5, 2.5, 0.0, -0.5, -0.5, -0.5])

    def test_read(self):
        text = 'compound_id\tingredient\tformula\nc1\tapple\tC2H6O\nc1\tapple\tC2H6O\nc2\tapple\tCH4\n'
        self.assertEqual(read_formulas(io.StringIO(text)), {'apple': ['C2H6O', 'CH4']})


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
