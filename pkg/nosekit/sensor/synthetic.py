"""A generator of synthetic sensor datasets in the on-disk dataset layout.

A classification class is a template made of a level signature plus a
periodic response whose direction across channels is specific to the class.
Every recorded session adds AR(1) drift, Gaussian noise, a session offset and
per-channel gains on top of the template. Differencing with a lag that is not
a multiple of the response period removes the levels but keeps the response.

A mixture session is the linear mixture of the templates of its odorants.
"""
import dataclasses
import itertools
import json
import logging
import pathlib
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from nosekit import core
from nosekit.sensor.dataset import SessionDataset, write_session_csv

__all__ = ['SyntheticConfig', 'generate_synthetic', 'pick_substances', 'mixture_grid']

FLAVORS = ('base', 'mixture')
SIGNATURE_SOURCES = ('random', 'reference')

@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """
    :param flavor: ``base`` writes classification sessions over days, ``mixture``
        writes mixtures of odorants with a train / test-seen / test-unseen placement.
    :param num_classes: Substances of a base dataset, or odorants mixed in a mixture dataset.
    :param sessions_per_class: Sessions per substance (one per day, days cycle through
        1..6), or sessions per seen mixture recipe.
    :param num_steps: Steps per session.
    :param channels: 6 for base data, 4 for mixtures.
    :param substances: Explicit substance or odorant names, overrides ``num_classes``.
    :param signatures: Explicit class-by-channel level signatures.
    :param signature_source: ``random`` draws levels in ``signature_range``,
        ``reference`` uses the per-ingredient means of the recorded base data.
    :param response_amplitude: Norm of the periodic class response across channels.
    :param response_period: Period of the response in steps.
    :param onset_step: The response is zero before this step.
    :param drift_phi: AR(1) coefficient of the drift.
    :param drift_std: Innovation std of the drift, 0 disables drift.
    :param noise_std: Std of the white measurement noise.
    :param day_shift_std: Std of the per-channel offset added to every session.
    :param day_gain_std: Log-std of per-day per-channel multiplicative gains.
    :param shifted_day: A day whose sessions get an extra gain distortion.
    :param shift_strength: Log-std of the extra gains of ``shifted_day``.
    :param ratio_step: Grid of mixture proportions.
    :param seen_recipes: Mixture recipes recorded for train and test-seen.
    :param unseen_recipes: Mixture recipes only recorded for test-unseen.
    :param compounds_per_ingredient: Synthetic GC-MS compounds per ingredient.
    :param seed: The random seed, the same seed writes byte-identical files.
    """
    flavor: str = 'base'
    num_classes: int = 5
    sessions_per_class: int = 6
    num_steps: int = 600
    channels: int = 6
    substances: Tuple[str, ...] = ()
    signatures: Optional[Tuple[Tuple[float, ...], ...]] = None
    signature_source: str = 'random'
    signature_range: Tuple[float, float] = (100.0, 900.0)
    response_amplitude: float = 15.0
    response_period: float = 40.0
    onset_step: int = 0
    drift_phi: float = 0.999
    drift_std: float = 0.5
    noise_std: float = 1.0
    day_shift_std: float = 50.0
    day_gain_std: float = 0.0
    shifted_day: Optional[int] = None
    shift_strength: float = 0.8
    ratio_step: float = 0.1
    seen_recipes: int = 24
    unseen_recipes: int = 8
    compounds_per_ingredient: int = 3
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, 'substances', tuple(self.substances))
        if self.signatures is not None:
            object.__setattr__(self, 'signatures', tuple(tuple(float(v) for v in s) for s in self.signatures))
        def _fail(msg, key):
            raise core.ConfigError(msg, f'synthetic.{key}')
        if self.flavor not in FLAVORS:
            _fail(f'{self.flavor} is not in {FLAVORS}', 'flavor')
        expected = len(core.MIXTURE_SCHEMA) if self.flavor == 'mixture' else len(core.BASE_SCHEMA)
        if self.channels != expected:
            _fail(f'{self.flavor} sessions have {expected} channels, got {self.channels}', 'channels')
        if self.signature_source not in SIGNATURE_SOURCES:
            _fail(f'{self.signature_source} is not in {SIGNATURE_SOURCES}', 'signature_source')
        if self.signature_source == 'reference' and self.flavor != 'base':
            _fail('reference signatures exist for base substances only', 'signature_source')
        if self.num_classes < 1 and not self.substances:
            _fail(f'{self.num_classes} is not positive', 'num_classes')
        if self.sessions_per_class < (2 if self.flavor == 'mixture' else 1):
            _fail(f'{self.sessions_per_class} is too small', 'sessions_per_class')
        if self.num_steps < 2:
            _fail(f'{self.num_steps} is too small', 'num_steps')
        for key in ['response_amplitude', 'drift_std', 'noise_std', 'day_shift_std',
                    'day_gain_std', 'shift_strength', 'onset_step']:
            if getattr(self, key) < 0:
                _fail(f'{getattr(self, key)} is negative', key)
        if not 0 <= self.drift_phi < 1:
            _fail(f'{self.drift_phi} is not in [0, 1)', 'drift_phi')
        if self.response_period <= 0:
            _fail(f'{self.response_period} is not positive', 'response_period')
        lo, hi = self.signature_range
        if not lo < hi:
            _fail(f'{self.signature_range} is not an interval', 'signature_range')
        if self.shifted_day is not None and not 1 <= self.shifted_day <= core.types.MAX_DAY:
            _fail(f'{self.shifted_day} is not in [1, {core.types.MAX_DAY}]', 'shifted_day')
        steps = 1 / self.ratio_step
        if not 0 < self.ratio_step <= 1 or abs(steps - round(steps)) > 1e-9:
            _fail(f'{self.ratio_step} does not divide 1', 'ratio_step')
        if self.signatures is not None and (len(self.signatures) != self.num_labels or
                                            any(len(s) != self.channels for s in self.signatures)):
            _fail(f'expect {self.num_labels} signatures of {self.channels} channels', 'signatures')

    @property
    def num_labels(self) -> int:
        return len(self.substances) if self.substances else self.num_classes

    @property
    def schema(self) -> core.ChannelSchema:
        return core.MIXTURE_SCHEMA if self.flavor == 'mixture' else core.BASE_SCHEMA

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def pick_substances(n: int, registry: Optional[core.Registry] = None) -> List[str]:
    """Pick n substances round-robin over categories, alphabetically inside each."""
    registry = registry or core.default_registry()
    by_cat = [[l.name for l in registry if l.category == c] for c in core.CATEGORIES]
    order = [name for group in itertools.zip_longest(*by_cat) for name in group if name]
    if n > len(order):
        raise core.ConfigError(f'{n} classes asked, the registry has {len(order)}', 'synthetic.num_classes')
    return order[:n]

def mixture_grid(num_odorants: int, step: float = 0.1, max_present: int = core.MAX_PRESENT) -> List[Tuple[int, ...]]:
    """All integer compositions of 1/step units over the odorants with 1..max_present parts."""
    units = int(round(1 / step))
    grid = []
    for combo in itertools.product(range(units + 1), repeat=num_odorants):
        if sum(combo) == units and 1 <= sum(c > 0 for c in combo) <= max_present:
            grid.append(combo)
    return grid


def _templates(config: SyntheticConfig, names: Sequence[str], rng: np.random.Generator):
    d = config.channels
    if config.signatures is not None:
        levels = np.array(config.signatures)
    elif config.signature_source == 'reference':
        ref = core.reference_statistics()
        levels = np.array([[ref.loc[n, f'{c}_mean'] for c in core.BASE_SCHEMA.channels] for n in names])
    else:
        lo, hi = config.signature_range
        levels = rng.uniform(lo, hi, size=(len(names), d))
    directions = rng.normal(size=(len(names), d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return levels, config.response_amplitude * directions

def _drift(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    T, d = config.num_steps, config.channels
    eta = rng.normal(0, 1, size=(T, d)) * config.drift_std
    e = np.zeros((T, d))
    for t in range(1, T):
        e[t] = config.drift_phi * e[t-1] + eta[t]
    return e

def _session(config: SyntheticConfig, level: np.ndarray, response: np.ndarray,
             gain: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    T = config.num_steps
    t = np.arange(T)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * t / config.response_period + phase) * (t >= config.onset_step)
    offset = rng.normal(0, 1, size=config.channels) * config.day_shift_std
    x = level + wave[:, None] * response + offset + _drift(config, rng)
    x = x + rng.normal(0, 1, size=x.shape) * config.noise_std
    return x * gain

def _gains(config: SyntheticConfig, rng: np.random.Generator) -> Dict[int, np.ndarray]:
    gains = {}
    for day in range(1, core.types.MAX_DAY + 1):
        g = np.exp(rng.normal(0, 1, size=config.channels) * config.day_gain_std)
        shift = np.exp(rng.normal(0, 1, size=config.channels) * config.shift_strength)
        gains[day] = g * shift if day == config.shifted_day else g
    return gains

def _hill(counts: Dict[str, int]) -> str:
    order = ['C', 'H'] + sorted(e for e in counts if e not in ('C', 'H'))
    return ''.join(f'{e}{counts[e] if counts[e] > 1 else ""}' for e in order if counts.get(e, 0) > 0)

def _write_gcms(root: pathlib.Path, names: Sequence[str], config: SyntheticConfig,
                rng: np.random.Generator) -> None:
    spectra, formulas = [], []
    for name in names:
        for k in range(config.compounds_per_ingredient):
            cid = f'{name.replace(" ", "_")}-c{k}'
            mz = np.round(rng.uniform(40, 300, size=8), 1)
            intensity = rng.uniform(1, 100, size=8)
            for r in range(2):
                jitter = intensity * np.exp(rng.normal(0, 0.1, size=8))
                peaks = ' '.join(f'{m:.1f}:{i:.4f}' for m, i in zip(mz, jitter))
                spectra.append({'compound_id': cid, 'ingredient': name, 'peaks': peaks})
            counts = {'C': int(rng.integers(2, 16)), 'H': int(rng.integers(4, 30)),
                      'O': int(rng.integers(0, 4)), 'N': int(rng.integers(0, 2)),
                      'S': int(rng.integers(0, 2))}
            formulas.append({'compound_id': cid, 'ingredient': name, 'formula': _hill(counts)})
    pd.DataFrame(spectra).to_csv(root/'spectra.tsv', sep='\t', index=False, lineterminator='\n')
    pd.DataFrame(formulas).to_csv(root/'formulas.tsv', sep='\t', index=False, lineterminator='\n')

def _generate_base(config: SyntheticConfig, root: pathlib.Path, rng: np.random.Generator,
                   progress: bool) -> List[str]:
    names = sorted(config.substances or pick_substances(config.num_classes))
    registry = core.default_registry().subset(names)
    levels, responses = _templates(config, names, rng)
    gains = _gains(config, rng)
    for c, name in enumerate(tqdm(names, disable=not progress)):
        label = registry.lookup(name)
        for k in range(config.sessions_per_class):
            day = k % core.types.MAX_DAY + 1
            x = _session(config, levels[c], responses[c], gains[day], rng)
            split = 'test' if day == core.types.MAX_DAY else 'train'
            stem = f'{name.replace(" ", "_")}_day{day}' + (f'_{k // core.types.MAX_DAY}' if k >= core.types.MAX_DAY else '')
            s = core.SensorSession(x, config.schema, label, stem, day, split)
            write_session_csv(s, root/split/name/f'{stem}.csv')
    (root/'substances.txt').write_text(registry.to_text())
    return names

def _generate_mixture(config: SyntheticConfig, root: pathlib.Path, rng: np.random.Generator,
                      progress: bool) -> List[str]:
    palette = core.odorants()
    names = list(config.substances or palette[:config.num_classes])
    idx = [core.odorant_index(n) for n in names]
    levels, responses = _templates(config, names, rng)
    grid = mixture_grid(len(names), config.ratio_step)
    order = rng.permutation(len(grid))
    if config.seen_recipes + config.unseen_recipes > len(grid):
        raise core.ConfigError(f'the grid has only {len(grid)} recipes', 'synthetic.seen_recipes')
    seen = [grid[i] for i in order[:config.seen_recipes]]
    unseen = [grid[i] for i in order[config.seen_recipes:config.seen_recipes + config.unseen_recipes]]
    no_gain = np.ones(config.channels)
    rows = []
    placements = [(r, 'seen') for r in seen] + [(r, 'unseen') for r in unseen]
    for n, (recipe, kind) in enumerate(tqdm(placements, disable=not progress)):
        raw = np.zeros(core.NUM_ODORANTS)
        raw[idx] = recipe
        target = core.make_mixture_target(raw)
        pi = np.array(recipe, dtype=np.float64) / sum(recipe)
        level, response = pi @ levels, pi @ responses
        sessions = config.sessions_per_class if kind == 'seen' else 1
        for k in range(sessions):
            if kind == 'unseen':
                split = 'test-unseen'
            else:
                split = 'test-seen' if k == sessions - 1 else 'train'
            x = _session(config, level, response, no_gain, rng)
            sid = f'{split}/mix{n:03d}/mix{n:03d}_{k}'
            write_session_csv(core.SensorSession(x, config.schema, target, sid, None, split),
                              root/f'{sid}.csv')
            rows.append({'session_id': sid, **{o: float(v) for o, v in zip(palette, raw)}})
    pd.DataFrame(rows).to_csv(root/'recipes.tsv', sep='\t', index=False, lineterminator='\n',
                              float_format='%.17g')
    return names

def generate_synthetic(config: SyntheticConfig, root: Union[str, pathlib.Path],
                       progress: bool = False) -> SessionDataset:
    """Write a synthetic dataset under root and load it back.

    Besides the session CSVs it writes ``synthetic.json`` (the config), a
    ``substances.txt`` label manifest or ``recipes.tsv``, and synthetic GC-MS
    ``spectra.tsv`` and ``formulas.tsv`` for the ingredients.

    :return: The loaded dataset.
    """
    root = pathlib.Path(root)
    rng = np.random.default_rng(config.seed)
    try:
        root.mkdir(parents=True, exist_ok=True)
        if config.flavor == 'mixture':
            names = _generate_mixture(config, root, rng, progress)
        else:
            names = _generate_base(config, root, rng, progress)
        _write_gcms(root, names, config, rng)
        (root/'synthetic.json').write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + '\n')
    except OSError as e:
        raise core.DataError(f'cannot write the synthetic dataset to {root}: {e}')
    logging.info(f'Generated a synthetic {config.flavor} dataset with {len(names)} '
                 f'{"odorants" if config.flavor == "mixture" else "classes"} under {root}')
    return SessionDataset.from_root(root, task=config.flavor, workers=1)


import tempfile
import unittest

class TestSynthetic(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _tree(self, root: pathlib.Path) -> Dict[str, bytes]:
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.glob('**/*')) if p.is_file()}

    def test_pick_substances(self):
        self.assertEqual(pick_substances(5), ['almond', 'allspice', 'angelica', 'apple', 'asparagus'])
        self.assertEqual(len(set(pick_substances(50))), 50)

    def test_determinism(self):
        cfg = SyntheticConfig(num_classes=5, sessions_per_class=6, num_steps=600, channels=6, seed=42)
        a = generate_synthetic(cfg, self.root/'a')
        generate_synthetic(cfg, self.root/'b')
        self.assertEqual(self._tree(self.root/'a'), self._tree(self.root/'b'))
        self.assertEqual(len(a), 30)
        self.assertEqual(len(a.registry), 5)
        self.assertEqual(len(a.build_splits('last-day').sessions('test')), 5)

    def test_degenerate(self):
        cfg = SyntheticConfig(num_steps=50, noise_std=0, drift_std=0, day_shift_std=0,
                              response_amplitude=0, seed=1)
        ds = generate_synthetic(cfg, self.root)
        for s in ds:
            self.assertTrue(np.all(s.readings == s.readings[0]))
        for name, g in ds.df.groupby('label'):
            first = ds.session(g.session_id.iloc[0]).readings[0]
            for sid in g.session_id:
                self.assertTrue(np.array_equal(ds.session(sid).readings[0], first))

    def test_signatures(self):
        sig = [[float(10 * c + j) for j in range(6)] for c in range(2)]
        cfg = SyntheticConfig(num_classes=2, num_steps=30, noise_std=0, drift_std=0, day_shift_std=0,
                              response_amplitude=0, signatures=sig)
        ds = generate_synthetic(cfg, self.root)
        names = sorted(pick_substances(2))
        for s in ds:
            self.assertEqual(s.readings[0].tolist(), sig[names.index(s.label.name)])

    def test_grand_means(self):
        cfg = SyntheticConfig()
        ds = generate_synthetic(cfg, self.root)
        rows = np.concatenate([s.readings for s in ds])
        means = rows.mean(axis=0)
        self.assertTrue(np.all(np.isfinite(means)))
        lo, hi = cfg.signature_range
        self.assertTrue(np.all((means > lo) & (means < hi)))

    def test_reference(self):
        cfg = SyntheticConfig(num_classes=3, num_steps=20, signature_source='reference', noise_std=0,
                              drift_std=0, day_shift_std=0, response_amplitude=0)
        ds = generate_synthetic(cfg, self.root)
        s = ds.sessions()[0]
        ref = core.reference_statistics()
        self.assertAlmostEqual(s.readings[0, 3], ref.loc[s.label.name, 'CO_mean'])

    def test_mixture(self):
        self.assertEqual(len(mixture_grid(2, 0.1)), 11)
        cfg = SyntheticConfig(flavor='mixture', num_classes=4, channels=4, num_steps=100,
                              sessions_per_class=3, seen_recipes=6, unseen_recipes=2,
                              drift_std=0, day_shift_std=0)
        ds = generate_synthetic(cfg, self.root)
        self.assertEqual(ds.task, 'mixture')
        self.assertEqual(len(ds.sessions('train')), 12)
        self.assertEqual(len(ds.sessions('test-seen')), 6)
        self.assertEqual(len(ds.sessions('test-unseen')), 2)
        seen = {ds.df.label[i] for i in range(len(ds)) if ds.df.split[i] == 'train'}
        unseen = {ds.df.label[i] for i in range(len(ds)) if ds.df.split[i] == 'test-unseen'}
        self.assertFalse(seen & unseen)
        for s in ds:
            self.assertTrue(1 <= s.label.num_present <= 3)
            self.assertTrue(np.all(s.label.proportions[4:] == 0))
        self.assertTrue((self.root/'spectra.tsv').is_file())

    def test_errors(self):
        with self.assertRaises(core.ConfigError):
            SyntheticConfig(channels=4)
        with self.assertRaises(core.ConfigError):
            SyntheticConfig(noise_std=-1)
        with self.assertRaises(core.ConfigError):
            SyntheticConfig(flavor='mixture', channels=4, signature_source='reference')
        blocker = self.root/'file'
        blocker.write_text('x')
        with self.assertRaises(core.DataError):
            generate_synthetic(SyntheticConfig(num_steps=10), blocker/'sub')


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
