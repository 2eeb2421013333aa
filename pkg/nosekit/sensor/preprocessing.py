"""Temporal differencing, sliding windows and standardization.

The order is fixed: every session is differenced as a whole stream, then cut
into windows, then standardized with statistics fitted on the training
windows only. Each window records the lag, window size, stride and the id of
the statistics applied to it.
"""
import dataclasses
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from nosekit import core

__all__ = ['PreprocessConfig', 'temporal_difference', 'count_windows', 'slice_windows',
           'window_sessions', 'fit_standardizer', 'standardize', 'destandardize',
           'truncate_session', 'window_arrays']

# a channel whose std is below this share of its scale counts as constant
DEGENERATE_STD = 1e-12

@dataclasses.dataclass(frozen=True)
class PreprocessConfig:
    """
    :param diff_lag: The differencing lag p, 0 skips differencing.
    :param window: The window size w.
    :param stride: The stride s, defaults to w/2.
    :param pad_final: Keep a last partial window, padded by repeating the last row.
    """
    diff_lag: int = 25
    window: int = 100
    stride: Optional[int] = None
    pad_final: bool = False

    def __post_init__(self):
        if self.diff_lag < 0:
            raise core.ConfigError(f'{self.diff_lag} is negative', 'preprocess.diff_lag')
        if self.window < 1:
            raise core.ConfigError(f'{self.window} is not positive', 'preprocess.window')
        if self.stride is None:
            if self.window % 2:
                raise core.ConfigError(f'{self.window} must be even when stride defaults to w/2',
                                       'preprocess.window')
            object.__setattr__(self, 'stride', self.window // 2)
        if not 1 <= self.stride <= self.window:
            raise core.ConfigError(f'{self.stride} is not in [1, {self.window}]', 'preprocess.stride')


def temporal_difference(x: Union[core.SensorSession, np.ndarray], p: int) -> np.ndarray:
    """Return ``x[t+p] - x[t]`` for t in [0, T-p), or x unchanged when p is 0."""
    x = x.readings if isinstance(x, core.SensorSession) else np.asarray(x, dtype=np.float64)
    if p < 0:
        raise ValueError(f'lag {p} is negative')
    if p >= x.shape[0]:
        raise core.DataError(f'lag {p} needs more than {x.shape[0]} steps')
    if p == 0:
        return x.copy()
    return x[p:] - x[:-p]

def count_windows(T: int, w: int, s: int, pad_final: bool = False) -> int:
    """The number of windows of size w and stride s over T steps."""
    if w < 1 or s < 1:
        raise ValueError(f'window {w} and stride {s} must be positive')
    if T < w:
        return 0
    return (math.ceil((T - w) / s) if pad_final else (T - w) // s) + 1

def slice_windows(sequence: np.ndarray, config: PreprocessConfig, label, source_session: str = '',
                  ) -> List[core.Window]:
    """Cut a (differenced) sequence into windows ordered by offset."""
    sequence = np.asarray(sequence, dtype=np.float64)
    w, s = config.window, config.stride
    n = count_windows(sequence.shape[0], w, s, config.pad_final)
    prov = core.Provenance(config.diff_lag, w, s)
    windows = []
    for k in range(n):
        values = sequence[k*s:k*s+w]
        if values.shape[0] < w:
            values = np.concatenate([values, np.repeat(values[-1:], w - values.shape[0], axis=0)])
        windows.append(core.Window(values, label, source_session, k*s, prov))
    return windows

def window_sessions(sessions: Sequence[core.SensorSession], config: PreprocessConfig) -> List[core.Window]:
    """Difference and slice every session, ordered by session id then offset."""
    windows = []
    for session in sorted(sessions, key=lambda s: s.session_id):
        x = temporal_difference(session, config.diff_lag)
        windows.extend(slice_windows(x, config, session.label, session.session_id))
    return windows

def _rows(windows: Sequence[core.Window]) -> np.ndarray:
    return np.concatenate([w.values for w in windows], axis=0)

def fit_standardizer(windows: Sequence[core.Window], fitted_on: str = 'train',
                     channels: Sequence[str] = ()) -> core.StandardizationStats:
    """Fit per-channel mean and population std over all rows of the windows.

    :param channels: Channel names, used in error messages and recorded in the stats.
    """
    if not windows:
        raise core.FitError(f'no {fitted_on} window to fit standardization statistics')
    rows = _rows(windows)
    if rows.shape[0] < 2:
        raise core.FitError(f'{rows.shape[0]} row is too few to fit standardization statistics')
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    for j in range(rows.shape[1]):
        if std[j] <= DEGENERATE_STD * max(1.0, abs(mean[j])):
            name = channels[j] if len(channels) > j else f'#{j}'
            raise core.FitError(f'channel {name} has zero variance on {fitted_on}')
    return core.StandardizationStats(mean, std, fitted_on, tuple(channels))

def _check_channels(windows: Sequence[core.Window], stats: core.StandardizationStats) -> None:
    for w in windows:
        if w.values.shape[1] != stats.num_channels:
            raise core.DataError(f'{w.window_id} has {w.values.shape[1]} channels, '
                                 f'the statistics have {stats.num_channels}')

def standardize(windows: Sequence[core.Window], stats: core.StandardizationStats) -> List[core.Window]:
    """Return windows with ``(x - mean) / std`` per channel, the stats id recorded."""
    _check_channels(windows, stats)
    return [dataclasses.replace(w, values=(w.values - stats.mean) / stats.std,
                                provenance=dataclasses.replace(w.provenance, stats_id=stats.stats_id))
            for w in windows]

def destandardize(windows: Sequence[core.Window], stats: core.StandardizationStats) -> List[core.Window]:
    """The inverse of :func:`standardize`."""
    _check_channels(windows, stats)
    return [dataclasses.replace(w, values=w.values * stats.std + stats.mean,
                                provenance=dataclasses.replace(w.provenance, stats_id=None))
            for w in windows]

def truncate_session(session: core.SensorSession, n: int) -> core.SensorSession:
    """Keep only the first n steps of a session."""
    if not 1 <= n <= session.num_steps:
        raise core.DataError(f'{session.session_id}: cannot truncate {session.num_steps} steps to {n}')
    return session.replace(readings=session.readings[:n])

def window_arrays(windows: Sequence[core.Window]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack windows into model inputs.

    :return: A B-by-w-by-d input array and the targets, either class indices or a
        B-by-12 array of mixture proportions.
    """
    if not windows:
        raise core.DataError('no window to stack')
    x = np.stack([w.values for w in windows])
    if isinstance(windows[0].label, core.MixtureTarget):
        y = np.stack([w.label.proportions for w in windows])
    else:
        y = np.array([w.label.class_index for w in windows], dtype=np.int64)
    return x, y


import unittest

class TestPreprocessing(unittest.TestCase):
    def test_config(self):
        self.assertEqual(PreprocessConfig(25, 50).stride, 25)
        with self.assertRaises(core.ConfigError):
            PreprocessConfig(0, 51)
        with self.assertRaises(core.ConfigError):
            PreprocessConfig(0, 50, 60)
        self.assertEqual(PreprocessConfig(0, 51, 17).stride, 17)

    def test_temporal_difference(self):
        self.assertTrue(np.array_equal(temporal_difference(np.full((600, 6), 3.0), 25), np.zeros((575, 6))))
        ramp = np.arange(600.0)[:, None].repeat(6, axis=1)
        self.assertTrue(np.all(temporal_difference(ramp, 25) == 25))
        x = np.random.default_rng(0).normal(size=(600, 6))
        oracle = np.zeros((575, 6))
        for t in range(575):
            for j in range(6):
                oracle[t, j] = x[t + 25, j] - x[t, j]
        self.assertTrue(np.array_equal(temporal_difference(x, 25), oracle))
        self.assertTrue(np.array_equal(temporal_difference(x, 0), x))
        with self.assertRaises(core.DataError):
            temporal_difference(x[:25], 25)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=2)
            x, y = rng.normal(size=(2, 100, 3))
            p = int(rng.integers(0, 50))
            np.testing.assert_allclose(temporal_difference(a*x + b*y, p),
                                       a*temporal_difference(x, p) + b*temporal_difference(y, p),
                                       atol=1e-12)

    def test_count_windows(self):
        self.assertEqual(count_windows(600, 50, 25), 23)
        self.assertEqual(count_windows(600, 100, 50), 11)
        self.assertEqual(count_windows(49, 50, 25), 0)
        self.assertEqual(count_windows(575, 50, 25), 22)
        self.assertEqual(count_windows(580, 50, 25, pad_final=True), 23)
        self.assertEqual(count_windows(575, 50, 25, pad_final=True), 22)
        self.assertEqual(count_windows(49, 50, 25, pad_final=True), 0)

    def test_count_matches_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            T, w = int(rng.integers(1, 300)), int(rng.integers(1, 80))
            s = int(rng.integers(1, w + 1))
            starts = [o for o in range(0, T) if o + w <= T and o % s == 0]
            self.assertEqual(count_windows(T, w, s), len(starts))

    def test_slice_windows(self):
        label = core.registry_lookup('apple')
        rng = np.random.default_rng(3)
        for _ in range(50):
            T, p = int(rng.integers(30, 300)), int(rng.integers(0, 26))
            w = 2 * int(rng.integers(1, 30))
            cfg = PreprocessConfig(p, w)
            x = temporal_difference(rng.normal(size=(T, 2)), p)
            ws = slice_windows(x, cfg, label, 's')
            self.assertEqual(len(ws), count_windows(T - p, w, w // 2))
            for a, b in zip(ws, ws[1:]):
                self.assertEqual(b.offset - a.offset, w // 2)
                self.assertTrue(np.array_equal(a.values[w // 2:], b.values[:w - w // 2]))
        ws = slice_windows(np.ones((50, 6)), PreprocessConfig(25, 50), label, 's')
        self.assertEqual([(w.offset, w.provenance.diff_lag) for w in ws], [(0, 25)])
        ws = slice_windows(np.arange(60.0)[:, None], PreprocessConfig(0, 50, pad_final=True), label)
        self.assertEqual(len(ws), 2)
        self.assertEqual(ws[1].values[-1, 0], 59.0)

    def _windows(self, arrays):
        label = core.registry_lookup('apple')
        return [core.Window(np.asarray(a, dtype=float), label, 's', i, core.Provenance(0, len(a), len(a)))
                for i, a in enumerate(arrays)]

    def test_fit_standardizer(self):
        stats = fit_standardizer(self._windows([[[0], [2]], [[4], [6]]]))
        self.assertEqual(stats.mean.tolist(), [3.0])
        self.assertAlmostEqual(stats.std[0], np.sqrt(5.0))
        with self.assertRaises(core.FitError) as cm:
            fit_standardizer(self._windows([np.ones((4, 2))] * 3), channels=('NO2', 'CO'))
        self.assertIn('NO2', str(cm.exception))

    def test_standardize(self):
        rng = np.random.default_rng(4)
        train = self._windows(rng.normal(5, 3, size=(10, 20, 3)))
        stats = fit_standardizer(train)
        z = standardize(train, stats)
        refit = fit_standardizer(z)
        np.testing.assert_allclose(refit.mean, 0, atol=1e-9)
        np.testing.assert_allclose(refit.std, 1, atol=1e-9)
        self.assertTrue(all(w.provenance.stats_id == stats.stats_id for w in z))
        self.assertEqual([w.values.shape for w in z], [w.values.shape for w in train])
        self.assertEqual([w.label for w in z], [w.label for w in train])
        back = destandardize(z, stats)
        for a, b in zip(back, train):
            np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-12)
        at_mean = standardize(self._windows([np.tile(stats.mean, (4, 1))]), stats)
        self.assertTrue(np.all(at_mean[0].values == 0))
        with self.assertRaises(core.DataError):
            standardize(self._windows([np.ones((4, 2))]), stats)

    def test_truncate(self):
        s = core.SensorSession(np.arange(12.0).reshape(6, 2), core.ChannelSchema(('a', 'b'), 1.0),
                               core.registry_lookup('apple'), 's')
        self.assertEqual(truncate_session(s, 3).readings.tolist(), [[0, 1], [2, 3], [4, 5]])
        with self.assertRaises(core.DataError):
            truncate_session(s, 7)

    def test_window_arrays(self):
        x, y = window_arrays(self._windows([np.zeros((4, 2)), np.ones((4, 2))]))
        self.assertEqual(x.shape, (2, 4, 2))
        self.assertEqual(y.tolist(), [core.registry_lookup('apple').class_index] * 2)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
