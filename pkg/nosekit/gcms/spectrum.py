"""Binned EI mass spectra and the spectral GC-MS embedding of an ingredient."""
import dataclasses
import io
import pathlib
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from nosekit import core

__all__ = ['MZ_LO', 'MZ_HI', 'NUM_BINS', 'EiSpectrum', 'GcmsEmbedding', 'bin_spectrum',
           'ingredient_spec_embedding', 'CoverageCdf', 'mz_coverage_cdf', 'parse_peaks',
           'read_spectra']

# bins are half-open [m, m+1) for m = 40..499
MZ_LO = 40.0
MZ_HI = 500.0
NUM_BINS = int(MZ_HI - MZ_LO)

@dataclasses.dataclass(frozen=True)
class EiSpectrum:
    """An electron ionization mass spectrum of one compound.

    :param peaks: An (n, 2) array of (m/z, intensity) rows.
    :param compound_id: The compound the spectrum was measured for.
    """
    peaks: np.ndarray
    compound_id: str = ''

    def __post_init__(self):
        peaks = np.array(self.peaks, dtype=np.float64).reshape(-1, 2)
        if len(peaks) == 0:
            raise core.DataError(f'spectrum of {self.compound_id!r} has no peaks')
        if not np.isfinite(peaks).all():
            raise core.DataError(f'spectrum of {self.compound_id!r} has non-finite peaks')
        if (peaks[:, 0] <= 0).any() or (peaks[:, 1] < 0).any():
            raise core.DataError(f'spectrum of {self.compound_id!r} needs positive m/z '
                                 'and non-negative intensities')
        peaks.flags.writeable = False
        object.__setattr__(self, 'peaks', peaks)

    @property
    def mz(self) -> np.ndarray:
        return self.peaks[:, 0]

    @property
    def intensity(self) -> np.ndarray:
        return self.peaks[:, 1]

@dataclasses.dataclass(frozen=True)
class GcmsEmbedding:
    """A fixed GC-MS vector of an ingredient.

    :param vector: ``spec`` vectors have one entry per m/z bin in [0, 1], ``atom``
        vectors one standardized entry per element.
    :param kind: ``spec`` or ``atom``.
    :param ingredient: The ingredient name.
    """
    vector: np.ndarray
    kind: str
    ingredient: str

    def __post_init__(self):
        if self.kind not in ('spec', 'atom'):
            raise ValueError(f'kind {self.kind} should be spec or atom')
        v = np.array(self.vector, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, 'vector', v)

def bin_spectrum(spectrum: EiSpectrum, lo: float = MZ_LO, hi: float = MZ_HI,
                 bin_width: float = 1.0) -> np.ndarray:
    """Sum intensities into half-open bins over [lo, hi) and max-normalize.

    :raise EmptySpectrumError: if no peak with positive intensity lies in range.
    """
    if not lo < hi:
        raise ValueError(f'lo {lo} should be less than hi {hi}')
    if bin_width <= 0:
        raise ValueError(f'bin_width {bin_width} is not positive')
    n = int(np.ceil((hi - lo) / bin_width))
    keep = (spectrum.mz >= lo) & (spectrum.mz < hi)
    idx = np.floor((spectrum.mz[keep] - lo) / bin_width).astype(int)
    vec = np.zeros(n)
    np.add.at(vec, np.minimum(idx, n - 1), spectrum.intensity[keep])
    top = vec.max()
    if top <= 0:
        raise core.EmptySpectrumError(
            f'spectrum of {spectrum.compound_id!r} has no intensity in [{lo}, {hi})')
    return vec / top

def ingredient_spec_embedding(compounds: Mapping[str, Sequence[EiSpectrum]], ingredient: str = '',
                              lo: float = MZ_LO, hi: float = MZ_HI) -> GcmsEmbedding:
    """Average binned spectra per compound, then average across compounds.

    Spectra without in-range intensity are skipped.

    :param compounds: Spectra grouped by compound id.
    :raise CoverageError: if no compound has a usable spectrum.
    """
    means = []
    for cid in sorted(compounds):
        vecs = []
        for s in compounds[cid]:
            try:
                vecs.append(bin_spectrum(s, lo, hi))
            except core.EmptySpectrumError:
                continue
        if vecs:
            means.append(np.mean(vecs, axis=0))
    if not means:
        raise core.CoverageError(f'no usable spectrum for ingredient {ingredient!r}')
    return GcmsEmbedding(np.mean(means, axis=0), 'spec', ingredient)

class CoverageCdf:
    """The mean fraction of spectral intensity at m/z at most an upper bound.

    Peaks below ``lo`` are ignored. Spectra with no intensity from ``lo`` on do
    not contribute.
    """
    def __init__(self, spectra: Sequence[EiSpectrum], lo: float = MZ_LO) -> None:
        self.lo = lo
        self._curves: List[Tuple[np.ndarray, np.ndarray]] = []
        for s in spectra:
            keep = s.mz >= lo
            mz, w = s.mz[keep], s.intensity[keep]
            total = w.sum()
            if total <= 0:
                continue
            order = np.argsort(mz, kind='stable')
            self._curves.append((mz[order], np.cumsum(w[order]) / total))
        if not self._curves:
            raise core.CoverageError(f'no spectrum has intensity at m/z >= {lo}')

    @property
    def max_mz(self) -> float:
        return max(mz[-1] for mz, _ in self._curves)

    def __call__(self, upper_bound):
        ub = np.asarray(upper_bound, dtype=np.float64)
        out = np.zeros(ub.shape)
        for mz, cum in self._curves:
            i = np.searchsorted(mz, ub, side='right')
            out += np.where(i > 0, cum[np.maximum(i - 1, 0)], 0.0)
        out /= len(self._curves)
        return float(out) if out.ndim == 0 else out

    def curve(self, bounds: Sequence[float]) -> pd.DataFrame:
        return pd.DataFrame({'upper_bound': list(bounds), 'coverage': self(np.asarray(bounds))})

def mz_coverage_cdf(spectra: Sequence[EiSpectrum], lo: float = MZ_LO) -> CoverageCdf:
    """Return the coverage CDF of a set of spectra.

    :raise CoverageError: on empty input.
    """
    if not spectra:
        raise core.CoverageError('no spectra given')
    return CoverageCdf(spectra, lo)

def parse_peaks(text: str, compound_id: str = '') -> EiSpectrum:
    """Parse ``mz:intensity`` pairs separated by spaces."""
    try:
        peaks = [tuple(float(v) for v in p.split(':')) for p in text.split()]
    except ValueError:
        raise core.DataError(f'bad peak list {text!r} of {compound_id!r}')
    if any(len(p) != 2 for p in peaks):
        raise core.DataError(f'bad peak list {text!r} of {compound_id!r}')
    return EiSpectrum(np.array(peaks), compound_id)

def read_spectra(path: Union[str, pathlib.Path, io.StringIO]) -> Dict[str, Dict[str, List[EiSpectrum]]]:
    """Read a spectra TSV with columns ``compound_id``, ``ingredient``, ``peaks``.

    :return: ingredient -> compound id -> spectra.
    """
    df = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    for c in ('compound_id', 'ingredient', 'peaks'):
        if c not in df.columns:
            raise core.DataError(f'spectra file {path} misses column {c}')
    out: Dict[str, Dict[str, List[EiSpectrum]]] = {}
    for cid, ingredient, peaks in zip(df['compound_id'], df['ingredient'], df['peaks']):
        out.setdefault(ingredient.strip().lower(), {}).setdefault(cid, []).append(parse_peaks(peaks, cid))
    return out


import unittest

class TestSpectrum(unittest.TestCase):
    def test_bin(self):
        v = bin_spectrum(EiSpectrum([[41.3, 7]]))
        self.assertEqual(len(v), 460)
        self.assertEqual(v[1], 1.0)
        self.assertEqual(v.sum(), 1.0)
        s = EiSpectrum([[41.2, 3], [41.8, 5], [100, 16]])
        self.assertAlmostEqual(bin_spectrum(s)[1], 0.5)
        self.assertEqual(bin_spectrum(EiSpectrum([[499.99, 1], [500, 9]]))[-1], 1.0)
        with self.assertRaises(core.EmptySpectrumError):
            bin_spectrum(EiSpectrum([[520, 1]]))
        with self.assertRaises(core.DataError):
            EiSpectrum([])

    def test_embedding(self):
        a = EiSpectrum([[50, 1]], 'a')
        b = EiSpectrum([[60, 1]], 'b')
        one = ingredient_spec_embedding({'a': [a]}, 'x')
        self.assertTrue(np.array_equal(one.vector, bin_spectrum(a)))
        two = ingredient_spec_embedding({'a': [a, a], 'b': [b]})
        self.assertAlmostEqual(two.vector[10], 0.5)
        self.assertAlmostEqual(two.vector[20], 0.5)
        swapped = ingredient_spec_embedding({'b': [b], 'a': [a, a]})
        self.assertTrue(np.array_equal(two.vector, swapped.vector))
        self.assertTrue(0 <= two.vector.min() and two.vector.max() <= 1)
        with self.assertRaises(core.CoverageError):
            ingredient_spec_embedding({'a': [EiSpectrum([[600, 1]])]})

    def test_coverage(self):
        cdf = mz_coverage_cdf([EiSpectrum([[100, 3]])])
        self.assertEqual(cdf(99.9), 0.0)
        self.assertEqual(cdf(100), 1.0)
        cdf = mz_coverage_cdf([EiSpectrum([[50, 1], [150, 1], [250, 1]]), EiSpectrum([[60, 2]])])
        self.assertAlmostEqual(cdf(160), (2 / 3 + 1) / 2)
        self.assertEqual(cdf(500), 1.0)
        ys = cdf(np.arange(40, 500))
        self.assertTrue(np.all(np.diff(ys) >= 0))
        self.assertEqual(cdf.max_mz, 250)
        with self.assertRaises(core.CoverageError):
            mz_coverage_cdf([])

    def test_read(self):
        text = 'compound_id\tingredient\tpeaks\nc1\tApple\t41.3:7 50:1\nc1\tapple\t41:2\nc2\tcumin\t60:1\n'
        spectra = read_spectra(io.StringIO(text))
        self.assertEqual(sorted(spectra), ['apple', 'cumin'])
        self.assertEqual(len(spectra['apple']['c1']), 2)
        with self.assertRaises(core.DataError):
            parse_peaks('41.3-7')


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
