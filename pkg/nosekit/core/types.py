"""Domain types shared by ingestion, preprocessing, modeling and evaluation.

All of them are frozen after construction. Array fields are copied and marked
read-only, so instances can be shared across threads.
"""
import dataclasses
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from nosekit.core.errors import DataError, InvalidTargetError
from nosekit.core.storage import hash_array

__all__ = ['SPLIT_TAGS', 'CATEGORIES', 'NUM_ODORANTS', 'MAX_PRESENT', 'ChannelSchema',
           'BASE_SCHEMA', 'MIXTURE_SCHEMA', 'SubstanceLabel', 'MixtureTarget',
           'make_mixture_target', 'SensorSession', 'Provenance', 'Window',
           'StandardizationStats']

SPLIT_TAGS = ('train', 'val', 'test', 'test-seen', 'test-unseen')
CATEGORIES = ('nuts', 'spices', 'herbs', 'fruits', 'vegetables')
NUM_ODORANTS = 12
MAX_PRESENT = 3
MAX_DAY = 6


def _frozen(x, dtype=np.float64) -> np.ndarray:
    a = np.array(x, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclasses.dataclass(frozen=True)
class ChannelSchema:
    """The ordered channel names of a sensor stream.

    :param channels: The channel names, unique.
    :param sample_rate_hz: The sampling rate.
    :param name: A short tag such as ``base``.
    """
    channels: Tuple[str, ...]
    sample_rate_hz: float
    name: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(self.channels))
        if not self.channels:
            raise ValueError('a schema needs at least one channel')
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f'duplicated channel names in {self.channels}')
        if not self.sample_rate_hz > 0:
            raise ValueError(f'sample rate {self.sample_rate_hz} is not positive')

    def __len__(self) -> int:
        return len(self.channels)

    def index(self, channel: Union[int, str]) -> int:
        """Return the position of a channel given by name or index."""
        if isinstance(channel, (int, np.integer)):
            if not 0 <= channel < len(self):
                raise ValueError(f'channel index {channel} is not in [0, {len(self)})')
            return int(channel)
        if channel not in self.channels:
            raise ValueError(f'channel {channel!r} is not in {self.channels}')
        return self.channels.index(channel)

BASE_SCHEMA = ChannelSchema(('NO2', 'C2H5OH', 'VOC', 'CO', 'Alcohol', 'LPG'), 1.0, 'base')
MIXTURE_SCHEMA = ChannelSchema(('NO2', 'C2H5OH', 'VOC', 'CO'), 10.0, 'mixture')


@dataclasses.dataclass(frozen=True)
class SubstanceLabel:
    """One entry of the substance registry, ``class_index`` is 0-based."""
    class_index: int
    name: str
    category: str


@dataclasses.dataclass(frozen=True, eq=False)
class MixtureTarget:
    """A mixture over the odorant palette.

    Use :func:`make_mixture_target` to build one from raw amounts.
    """
    proportions: np.ndarray
    presence: np.ndarray
    num_present: int

    def __post_init__(self):
        p = _frozen(self.proportions)
        r = _frozen(self.presence)
        object.__setattr__(self, 'proportions', p)
        object.__setattr__(self, 'presence', r)
        if p.shape != (NUM_ODORANTS,) or r.shape != (NUM_ODORANTS,):
            raise InvalidTargetError(f'expect {NUM_ODORANTS} proportions, got {p.shape}')
        if abs(p.sum() - 1) > 1e-9 or np.any(p < 0):
            raise InvalidTargetError(f'{p} is not a distribution')
        if not np.array_equal(r, (p > 0).astype(np.float64)) or int(r.sum()) != self.num_present:
            raise InvalidTargetError('presence does not match proportions')
        if self.num_present < 1:
            raise InvalidTargetError('a mixture needs at least one present odorant')

    def __eq__(self, other) -> bool:
        if not isinstance(other, MixtureTarget):
            return NotImplemented
        return np.array_equal(self.proportions, other.proportions)

    def __hash__(self):
        return hash(self.proportions.tobytes())


def make_mixture_target(raw: Sequence[float], max_present: int = MAX_PRESENT) -> MixtureTarget:
    """Normalize raw non-negative amounts into a mixture target.

    :param raw: 12 non-negative amounts in odorant index order.
    :param max_present: The largest number of present odorants accepted.
    :return: The target with proportions summing to 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (NUM_ODORANTS,):
        raise InvalidTargetError(f'expect {NUM_ODORANTS} raw amounts, got shape {raw.shape}')
    if not np.all(np.isfinite(raw)):
        raise InvalidTargetError(f'non-finite amount in {raw.tolist()}')
    if np.any(raw < 0):
        raise InvalidTargetError(f'negative amount in {raw.tolist()}')
    total = raw.sum()
    if total <= 0:
        raise InvalidTargetError('all amounts are zero')
    proportions = raw / total
    presence = (proportions > 0).astype(np.float64)
    num_present = int(presence.sum())
    if num_present > max_present:
        raise InvalidTargetError(f'{num_present} present odorants, at most {max_present} allowed')
    return MixtureTarget(proportions, presence, num_present)


Label = Union[SubstanceLabel, MixtureTarget]

@dataclasses.dataclass(frozen=True, eq=False)
class SensorSession:
    """One recorded stream.

    :param readings: A T-by-d matrix of raw sensor counts.
    :param schema: The channel schema, d equals its length.
    :param label: A substance label or a mixture target.
    :param session_id: ``<ingredient folder>/<file stem>``.
    :param day_index: The acquisition day in [1, 6], base sessions only.
    :param split_tag: One of :data:`SPLIT_TAGS`.
    """
    readings: np.ndarray
    schema: ChannelSchema
    label: Label
    session_id: str
    day_index: Optional[int] = None
    split_tag: str = 'train'

    def __post_init__(self):
        x = _frozen(self.readings)
        object.__setattr__(self, 'readings', x)
        if x.ndim != 2 or x.shape[1] != len(self.schema):
            raise DataError(f'{self.session_id}: readings shape {x.shape} does not match '
                            f'{len(self.schema)} channels')
        if x.shape[0] < 1:
            raise DataError(f'{self.session_id}: empty session')
        if not np.all(np.isfinite(x)):
            raise DataError(f'{self.session_id}: non-finite readings')
        if self.day_index is not None and not 1 <= self.day_index <= MAX_DAY:
            raise DataError(f'{self.session_id}: day {self.day_index} is not in [1, {MAX_DAY}]')
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f'{self.session_id}: unknown split {self.split_tag!r}')

    @property
    def num_steps(self) -> int:
        return self.readings.shape[0]

    @property
    def is_mixture(self) -> bool:
        return isinstance(self.label, MixtureTarget)

    def replace(self, **changes) -> 'SensorSession':
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class Provenance:
    """How a window was produced."""
    diff_lag: int
    window: int
    stride: int
    stats_id: Optional[str] = None


@dataclasses.dataclass(frozen=True, eq=False)
class Window:
    values: np.ndarray
    label: Label
    source_session: str
    offset: int
    provenance: Provenance

    def __post_init__(self):
        v = _frozen(self.values)
        object.__setattr__(self, 'values', v)
        if v.ndim != 2 or v.shape[0] != self.provenance.window:
            raise DataError(f'{self.source_session}@{self.offset}: window shape {v.shape} '
                            f'does not match size {self.provenance.window}')
        if not np.all(np.isfinite(v)):
            raise DataError(f'{self.source_session}@{self.offset}: non-finite window values')

    @property
    def window_id(self) -> str:
        return f'{self.source_session}@{self.offset}'


@dataclasses.dataclass(frozen=True, eq=False)
class StandardizationStats:
    """Per-channel mean and population std of the training windows.

    :param fitted_on: The split the statistics come from, e.g. ``train``.
    """
    mean: np.ndarray
    std: np.ndarray
    fitted_on: str = 'train'
    channels: Tuple[str, ...] = ()

    def __post_init__(self):
        mean, std = _frozen(self.mean), _frozen(self.std)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)
        object.__setattr__(self, 'channels', tuple(self.channels))
        if mean.ndim != 1 or mean.shape != std.shape:
            raise DataError(f'mean {mean.shape} and std {std.shape} must be matching vectors')
        if not np.all(std > 0):
            raise DataError(f'non-positive std {std.tolist()}')

    @property
    def num_channels(self) -> int:
        return self.mean.shape[0]

    @property
    def stats_id(self) -> str:
        return hash_array(self.mean, self.std)[:16]

    def to_dict(self) -> Dict[str, Any]:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist(),
                'fitted_on': self.fitted_on, 'channels': list(self.channels),
                'stats_id': self.stats_id}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'StandardizationStats':
        stats = cls(d['mean'], d['std'], d.get('fitted_on', 'train'), d.get('channels', ()))
        if 'stats_id' in d and d['stats_id'] != stats.stats_id:
            raise DataError(f'stats id {d["stats_id"]} does not match its values')
        return stats


import unittest

class TestTypes(unittest.TestCase):
    def test_schema(self):
        self.assertEqual(len(BASE_SCHEMA), 6)
        self.assertEqual(MIXTURE_SCHEMA.channels, ('NO2', 'C2H5OH', 'VOC', 'CO'))
        self.assertEqual(MIXTURE_SCHEMA.sample_rate_hz, 10.0)
        self.assertEqual(BASE_SCHEMA.index('CO'), 3)
        self.assertEqual(BASE_SCHEMA.index(5), 5)
        with self.assertRaises(ValueError):
            ChannelSchema(('a', 'a'), 1.0)
        with self.assertRaises(ValueError):
            BASE_SCHEMA.index('H2S')

    def test_make_mixture_target(self):
        t = make_mixture_target([2, 2] + [0] * 10)
        self.assertEqual(t.proportions[:2].tolist(), [0.5, 0.5])
        self.assertEqual(t.num_present, 2)
        t = make_mixture_target([1] + [0] * 11)
        self.assertEqual(t.proportions.tolist(), [1.0] + [0.0] * 11)
        self.assertEqual(t.num_present, 1)
        t = make_mixture_target([1, 3, 6] + [0] * 9)
        np.testing.assert_allclose(t.proportions[:3], [0.1, 0.3, 0.6], atol=1e-15)
        self.assertEqual(t.presence.tolist(), [1, 1, 1] + [0] * 9)

    def test_mixture_target_errors(self):
        with self.assertRaises(InvalidTargetError):
            make_mixture_target([0] * 12)
        with self.assertRaises(InvalidTargetError):
            make_mixture_target([-1, 2] + [0] * 10)
        with self.assertRaises(InvalidTargetError):
            make_mixture_target([1, 1, 1, 1] + [0] * 8)
        self.assertEqual(make_mixture_target([1, 1, 1, 1] + [0] * 8, max_present=4).num_present, 4)
        with self.assertRaises(InvalidTargetError):
            make_mixture_target([1, 1])

    def test_mixture_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            raw = np.zeros(12)
            idx = rng.choice(12, size=rng.integers(1, 4), replace=False)
            raw[idx] = rng.uniform(0.1, 10, size=len(idx))
            t = make_mixture_target(raw)
            self.assertAlmostEqual(t.proportions.sum(), 1.0, delta=1e-9)
            np.testing.assert_allclose(make_mixture_target(raw * rng.uniform(0.01, 100)).proportions,
                                       t.proportions, rtol=0, atol=1e-12)

    def test_session(self):
        label = SubstanceLabel(0, 'allspice', 'spices')
        s = SensorSession(np.ones((600, 6)), BASE_SCHEMA, label, 'allspice/day1', 1)
        self.assertEqual(s.num_steps, 600)
        self.assertFalse(s.is_mixture)
        self.assertFalse(s.readings.flags.writeable)
        self.assertEqual(s.replace(split_tag='test').split_tag, 'test')
        with self.assertRaises(DataError):
            SensorSession(np.ones((10, 5)), BASE_SCHEMA, label, 'x')
        with self.assertRaises(DataError):
            SensorSession(np.full((10, 6), np.nan), BASE_SCHEMA, label, 'x')
        with self.assertRaises(DataError):
            SensorSession(np.ones((10, 6)), BASE_SCHEMA, label, 'x', day_index=7)

    def test_window(self):
        label = SubstanceLabel(0, 'allspice', 'spices')
        w = Window(np.zeros((50, 6)), label, 'allspice/day1', 25, Provenance(25, 50, 25))
        self.assertEqual(w.window_id, 'allspice/day1@25')
        with self.assertRaises(DataError):
            Window(np.zeros((49, 6)), label, 'allspice/day1', 0, Provenance(0, 50, 25))

    def test_stats(self):
        s = StandardizationStats([1.0, 2.0], [0.5, 4.0])
        t = StandardizationStats.from_dict(s.to_dict())
        self.assertEqual(s.stats_id, t.stats_id)
        self.assertNotEqual(s.stats_id, StandardizationStats([1.0, 2.0], [0.5, 4.5]).stats_id)
        with self.assertRaises(DataError):
            StandardizationStats([0.0], [0.0])


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
