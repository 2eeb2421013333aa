"""Precomputed GC-MS embeddings of the ingredients of a dataset.

Embeddings are computed once from the spectra and formulas files of a dataset
root and stored as a TSV file with columns ``ingredient``, ``kind`` and
``vector``. A hash sidecar keyed by the inputs lets repeated runs reuse it.
"""
import logging
import pathlib
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd

from nosekit import core
from nosekit.gcms.formula import ELEMENTS, atom_descriptor, fit_atom_stats, raw_atom_counts, read_formulas
from nosekit.gcms.spectrum import GcmsEmbedding, ingredient_spec_embedding, read_spectra

__all__ = ['KINDS', 'build_embeddings', 'write_embeddings', 'read_embeddings',
           'load_or_build_embeddings', 'embedding_matrix']

KINDS = ('spec', 'atom')

def build_embeddings(spectra_path: Union[str, pathlib.Path], formulas_path: Union[str, pathlib.Path],
                     ingredients: Sequence[str], kinds: Sequence[str] = KINDS,
                     fit_on: Optional[Sequence[str]] = None,
                     elements: Sequence[str] = ELEMENTS) -> Dict[str, Dict[str, GcmsEmbedding]]:
    """Compute the embeddings of every ingredient.

    :param ingredients: The ingredients to embed.
    :param kinds: Any of ``spec`` and ``atom``.
    :param fit_on: The training ingredients the atom statistics are fitted on,
        defaults to ``ingredients``.
    :return: kind -> ingredient -> embedding.
    :raise CoverageError: if an ingredient has no spectra or no formulas.
    """
    out: Dict[str, Dict[str, GcmsEmbedding]] = {}
    if 'spec' in kinds:
        spectra = read_spectra(spectra_path)
        out['spec'] = {}
        for name in ingredients:
            if name not in spectra:
                raise core.CoverageError(f'no spectra for ingredient {name!r} in {spectra_path}')
            out['spec'][name] = ingredient_spec_embedding(spectra[name], name)
    if 'atom' in kinds:
        formulas = read_formulas(formulas_path)
        for name in set(ingredients) | set(fit_on or ()):
            if name not in formulas:
                raise core.CoverageError(f'no formulas for ingredient {name!r} in {formulas_path}')
        raw = {n: raw_atom_counts(formulas[n], elements) for n in (fit_on or ingredients)}
        stats = fit_atom_stats(raw, elements)
        out['atom'] = {n: atom_descriptor(formulas[n], stats, n) for n in ingredients}
    return out

def write_embeddings(embeddings: Dict[str, Dict[str, GcmsEmbedding]], path: Union[str, pathlib.Path]) -> None:
    rows = [{'ingredient': e.ingredient, 'kind': kind,
             'vector': ' '.join(f'{v:.17g}' for v in e.vector)}
            for kind in sorted(embeddings) for _, e in sorted(embeddings[kind].items())]
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=['ingredient', 'kind', 'vector']).to_csv(
        path, sep='\t', index=False, lineterminator='\n')

def read_embeddings(path: Union[str, pathlib.Path]) -> Dict[str, Dict[str, GcmsEmbedding]]:
    df = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    out: Dict[str, Dict[str, GcmsEmbedding]] = {}
    for name, kind, vec in zip(df['ingredient'], df['kind'], df['vector']):
        out.setdefault(kind, {})[name] = GcmsEmbedding(np.array(vec.split(), dtype=np.float64), kind, name)
    return out

def load_or_build_embeddings(root: Union[str, pathlib.Path], ingredients: Sequence[str],
                             out_path: Optional[Union[str, pathlib.Path]] = None,
                             kinds: Sequence[str] = KINDS,
                             fit_on: Optional[Sequence[str]] = None) -> Dict[str, Dict[str, GcmsEmbedding]]:
    """Return the embeddings of a dataset root, rebuilding them only when inputs changed.

    :param root: A folder with ``spectra.tsv`` and ``formulas.tsv``.
    :param out_path: The embeddings file, defaults to ``root/embeddings.tsv``.
    """
    root = pathlib.Path(root)
    spectra_path, formulas_path = root/'spectra.tsv', root/'formulas.tsv'
    out_path = pathlib.Path(out_path) if out_path else root/'embeddings.tsv'
    for p in (spectra_path, formulas_path):
        if not p.is_file():
            raise core.DataError(f'{p} is not found')
    key = core.hash_text('|'.join([core.hash_file(spectra_path), core.hash_file(formulas_path),
                                   ','.join(sorted(ingredients)), ','.join(sorted(kinds)),
                                   ','.join(sorted(fit_on or ()))]))
    if core.match_hash(out_path, key):
        logging.info(f'Reuse GC-MS embeddings in {out_path}')
        return read_embeddings(out_path)
    embeddings = build_embeddings(spectra_path, formulas_path, ingredients, kinds, fit_on)
    write_embeddings(embeddings, out_path)
    core.save_hash(out_path, key)
    logging.info(f'Wrote {sum(len(v) for v in embeddings.values())} GC-MS embeddings to {out_path}')
    return embeddings

def embedding_matrix(embeddings: Dict[str, GcmsEmbedding], names: Sequence[str]) -> np.ndarray:
    """Stack embeddings in class index order."""
    missing = [n for n in names if n not in embeddings]
    if missing:
        raise core.CoverageError(f'no GC-MS embedding for {missing}')
    return np.stack([embeddings[n].vector for n in names])


import tempfile
import unittest

class TestEmbedding(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)
        (self.root/'spectra.tsv').write_text(
            'compound_id\tingredient\tpeaks\n'
            'a1\tapple\t50:1\na1\tapple\t50:1\na2\tapple\t60:1\nc1\tcumin\t45:2 46:1\n')
        (self.root/'formulas.tsv').write_text(
            'compound_id\tingredient\tformula\n'
            'a1\tapple\tC2H6O\na2\tapple\tCH4N\nc1\tcumin\tC10H14SCl\n')

    def tearDown(self):
        self.tmp.cleanup()

    def test_build(self):
        e = build_embeddings(self.root/'spectra.tsv', self.root/'formulas.tsv', ['apple', 'cumin'])
        self.assertAlmostEqual(e['spec']['apple'].vector[10], 0.5)
        self.assertEqual(e['spec']['cumin'].vector[5], 1.0)
        atoms = np.stack([e['atom'][n].vector for n in ['apple', 'cumin']])
        self.assertTrue(np.allclose(atoms.mean(axis=0), 0))
        self.assertEqual(embedding_matrix(e['spec'], ['cumin', 'apple']).shape, (2, 460))
        with self.assertRaises(core.CoverageError):
            build_embeddings(self.root/'spectra.tsv', self.root/'formulas.tsv', ['dill'], ['spec'])

    def test_cache(self):
        a = load_or_build_embeddings(self.root, ['apple', 'cumin'])
        self.assertTrue((self.root/'embeddings.tsv').is_file())
        with self.assertLogs(level='INFO') as cm:
            b = load_or_build_embeddings(self.root, ['apple', 'cumin'])
        self.assertIn('Reuse', cm.output[0])
        for kind in KINDS:
            for n in ['apple', 'cumin']:
                self.assertTrue(np.array_equal(a[kind][n].vector, b[kind][n].vector))


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
