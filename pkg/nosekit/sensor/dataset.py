import concurrent.futures
import io
import logging
import pathlib
import re
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from nosekit import core

__all__ = ['parse_session_csv', 'write_session_csv', 'read_days', 'read_recipes',
           'recipe_key', 'SessionDataset', 'SPLIT_POLICIES']

SPLIT_POLICIES = ('last-day', 'leave-one-day-out', 'mixture')
MIXTURE_SPLITS = ('train', 'test-seen', 'test-unseen')
_DAY_RE = re.compile(r'day[_-]?(\d+)', re.IGNORECASE)

def _parse_readings(fp, schema: core.ChannelSchema, where: str) -> np.ndarray:
    try:
        df = pd.read_csv(fp, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise core.CsvFormatError(where, 1, 'empty file')
    except pd.errors.ParserError as e:
        m = re.search(r'line (\d+)', str(e))
        raise core.CsvFormatError(where, int(m.group(1)) if m else None, 'ragged row, too many fields')
    if not isinstance(df.index, pd.RangeIndex):
        # every row is one field longer than the header, pandas took the first field as the index
        raise core.CsvFormatError(where, 2, 'ragged row, too many fields')
    df.columns = [str(c).strip() for c in df.columns]
    for c in schema.channels:
        if c not in df.columns:
            raise core.CsvFormatError(where, 1, f'missing column {c}')
    extra = [c for c in df.columns if c not in schema.channels]
    if len(extra) > 1 or (extra and df.columns[0] != extra[0]):
        raise core.CsvFormatError(where, 1, f'unexpected columns {extra}, only one leading '
                                  'non-channel column is allowed')
    if len(df) == 0:
        raise core.CsvFormatError(where, 2, 'no readings')
    cells = df[list(schema.channels)]
    short = cells.isnull().any(axis=1).to_numpy()
    if short.any():
        raise core.CsvFormatError(where, int(np.argmax(short)) + 2, 'ragged row, too few fields')
    values = np.empty(cells.shape, dtype=np.float64)
    for i, row in enumerate(cells.itertuples(index=False)):
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise core.CsvFormatError(
                    where, i + 2, f'non-numeric cell {cell!r} in column {schema.channels[j]}')
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        j = int(np.argmax(~np.isfinite(values[i])))
        raise core.CsvFormatError(where, i + 2, f'non-finite value in column {schema.channels[j]}')
    return values

def parse_session_csv(path: Union[str, pathlib.Path], schema: core.ChannelSchema = core.BASE_SCHEMA,
                      label=None, session_id: Optional[str] = None, day_index: Optional[int] = None,
                      split_tag: str = 'train', reader: Optional[core.Reader] = None) -> core.SensorSession:
    """Parse one sensor CSV file into a session.

    The header names the channels. One leading non-channel column, such as a
    timestamp, is ignored. Line numbers in errors count the header as line 1.

    :param path: The file, relative to the reader root if ``reader`` is given.
    :param schema: The expected channels.
    :param label: The session label. If None, the parent folder name is looked up
        in the substance registry.
    :param session_id: Defaults to the path without suffix.
    :param day_index: The acquisition day. If None, it is taken from a ``day<k>``
        token in the file stem when there is one.
    :param split_tag: The split this file is placed in.
    :param reader: Read through this reader instead of the local file system.
    """
    path = pathlib.Path(path)
    where = str(reader.root/path) if reader else str(path)
    if reader:
        with reader.open(path) as f:
            values = _parse_readings(io.BytesIO(f.read()), schema, where)
    else:
        if not path.is_file():
            raise core.DataError(f'{path} does not exist')
        values = _parse_readings(path, schema, where)
    if label is None:
        label = core.registry_lookup(path.parent.name)
    if day_index is None:
        m = _DAY_RE.search(path.stem)
        day_index = int(m.group(1)) if m else None
    sid = session_id or path.with_suffix('').as_posix()
    return core.SensorSession(values, schema, label, sid, day_index, split_tag)

def write_session_csv(session: core.SensorSession, path: Union[str, pathlib.Path],
                      timestamp: bool = False) -> pathlib.Path:
    """Write a session with full float precision, so parsing it back is exact.

    :param timestamp: If True, write a leading ``timestamp`` column in seconds.
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(session.readings, columns=list(session.schema.channels))
    if timestamp:
        df.insert(0, 'timestamp', np.arange(session.num_steps) / session.schema.sample_rate_hz)
    df.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    return path

def read_days(reader: core.Reader, filename: str = 'days.tsv') -> Dict[str, int]:
    """Read the optional ``session_id<TAB>day`` sidecar."""
    if not reader.exists(filename):
        return {}
    with reader.open(filename) as f:
        df = pd.read_csv(io.BytesIO(f.read()), sep='\t', dtype={'session_id': str})
    if not {'session_id', 'day'} <= set(df.columns):
        raise core.DataError(f'{filename} needs session_id and day columns, got {list(df.columns)}')
    return {sid: int(d) for sid, d in zip(df['session_id'], df['day'])}

def read_recipes(reader: core.Reader, filename: str = 'recipes.tsv') -> Dict[str, core.MixtureTarget]:
    """Read the mixture recipes, one row per session with 12 odorant amounts."""
    if not reader.exists(filename):
        raise core.DataError(f'{reader.root} has no {filename}')
    with reader.open(filename) as f:
        df = pd.read_csv(io.BytesIO(f.read()), sep='\t', dtype={'session_id': str})
    names = list(core.odorants())
    missing = [n for n in ['session_id'] + names if n not in df.columns]
    if missing:
        raise core.DataError(f'{filename} misses columns {missing}')
    recipes = {}
    for i, (sid, raw) in enumerate(zip(df['session_id'], df[names].to_numpy(dtype=np.float64))):
        try:
            recipes[sid] = core.make_mixture_target(raw)
        except core.InvalidTargetError as e:
            raise core.InvalidTargetError(f'{filename}:{i+2}: {e}')
    return recipes

def recipe_key(target: core.MixtureTarget) -> str:
    """A readable key of a mixture, e.g. ``apple=0.3,pear=0.7``."""
    return ','.join(f'{n}={p:.6g}' for n, p in zip(core.odorants(), target.proportions) if p > 0)


class SessionDataset(core.BaseDataset):
    """A set of recorded sensor sessions.

    ``df`` holds one row per session with the columns ``session_id``, ``label``
    (substance name or recipe key), ``category``, ``day`` and ``split``. The parsed
    sessions are kept in a dict keyed by session id.

    :param sessions: The parsed sessions.
    :param registry: The label space, only used by classification datasets.
    :param task: Either ``base`` or ``mixture``.
    """
    TYPE = 'sensor'

    def __init__(self, sessions: Sequence[core.SensorSession], reader: core.Reader,
                 registry: Optional[core.Registry] = None, task: str = 'base') -> None:
        if task not in ('base', 'mixture'):
            raise ValueError(f'task {task} should be base or mixture')
        sessions = sorted(sessions, key=lambda s: s.session_id)
        ids = [s.session_id for s in sessions]
        if len(set(ids)) != len(ids):
            raise core.DataError('duplicated session ids')
        schemas = {s.schema for s in sessions}
        if len(schemas) > 1:
            raise core.DataError(f'sessions mix channel schemas {schemas}')
        self.registry = registry or core.default_registry()
        self.task = task
        self._sessions = {s.session_id: s for s in sessions}
        df = pd.DataFrame({
            'session_id': ids,
            'label': [recipe_key(s.label) if s.is_mixture else s.label.name for s in sessions],
            'category': [None if s.is_mixture else s.label.category for s in sessions],
            'day': pd.array([s.day_index for s in sessions], dtype='Int64'),
            'split': [s.split_tag for s in sessions],
            'num_steps': [s.num_steps for s in sessions]})
        super().__init__(df, reader, 'label')

    @classmethod
    def from_root(cls, root: Union[str, pathlib.Path], task: str = 'base',
                  schema: Optional[core.ChannelSchema] = None, registry: Optional[core.Registry] = None,
                  workers: int = 8, progress: bool = False) -> 'SessionDataset':
        """Load sessions laid out as ``<root>/<split>/<ingredient>/<session>.csv``.

        Day indices come from ``days.tsv`` or from the file names. A classification
        root may ship its own ``substances.txt`` label manifest, a mixture root must
        have ``recipes.tsv``.

        :param root: A folder or an archive.
        :param task: ``base`` or ``mixture``.
        :param schema: Defaults to the base or mixture schema.
        :param workers: Number of threads to parse files of a folder root.
        """
        reader = core.create_reader(root)
        schema = schema or (core.MIXTURE_SCHEMA if task == 'mixture' else core.BASE_SCHEMA)
        if registry is None and task == 'base' and reader.exists('substances.txt'):
            registry = core.Registry.loads(reader.read_text('substances.txt'))
        registry = registry or core.default_registry()
        files = [f for f in reader.list_files(['.csv']) if len(f.parts) == 3]
        if not files:
            raise core.DataError(f'no <split>/<ingredient>/<session>.csv file under {reader.root}')
        days = read_days(reader)
        recipes = read_recipes(reader) if task == 'mixture' else {}

        def _parse(f: pathlib.Path) -> core.SensorSession:
            sid = f.with_suffix('').as_posix()
            split = f.parts[0]
            if task == 'mixture':
                if split not in MIXTURE_SPLITS:
                    raise core.DataError(f'{f}: mixture split folder must be one of {MIXTURE_SPLITS}')
                if sid not in recipes:
                    raise core.DataError(f'{f}: no recipe for session {sid}')
                label = recipes[sid]
            else:
                label = registry.lookup(f.parts[1])
                split = split if split in core.SPLIT_TAGS else 'train'
            return parse_session_csv(f, schema, label, sid, days.get(sid), split, reader)

        if isinstance(reader, core.FolderReader) and workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
                sessions = list(tqdm(pool.map(_parse, files), total=len(files), disable=not progress))
        else:
            sessions = [_parse(f) for f in tqdm(files, disable=not progress)]
        logging.info(f'Loaded {len(sessions)} {task} sessions from {reader.root}')
        return cls(sessions, reader, registry, task)

    def _with_df(self, df: pd.DataFrame) -> 'SessionDataset':
        ds = SessionDataset([self._sessions[i] for i in df['session_id']], self.reader,
                            self.registry, self.task)
        ds.name = self.name
        return ds

    def __iter__(self) -> Iterator[core.SensorSession]:
        return (self._sessions[i] for i in self.df['session_id'])

    def session(self, session_id: str) -> core.SensorSession:
        return self._sessions[session_id]

    @property
    def schema(self) -> core.ChannelSchema:
        return next(iter(self._sessions.values())).schema

    def sessions(self, split: Optional[Union[str, Sequence[str]]] = None) -> List[core.SensorSession]:
        """Return the sessions of one or several splits, in session id order."""
        if split is None:
            return list(self)
        splits = core.listify(split)
        return [s for s in self if s.split_tag in splits]

    def _retag(self, tags: Dict[str, str]) -> 'SessionDataset':
        ds = SessionDataset([s.replace(split_tag=tags.get(s.session_id, s.split_tag)) for s in self],
                            self.reader, self.registry, self.task)
        ds.name = self.name
        return ds

    def build_splits(self, policy: str = 'last-day', day: Optional[int] = None) -> 'SessionDataset':
        """Assign every session to a split.

        :param policy: ``last-day`` tests on day 6 and trains on days 1-5,
            ``leave-one-day-out`` tests on ``day`` and trains on the rest, ``mixture``
            keeps the folder placement (train, test-seen, test-unseen).
        :param day: The held-out day for ``leave-one-day-out``, in [1, 6].
        :return: A new dataset, sessions carry the new split tags.
        """
        if policy not in SPLIT_POLICIES:
            raise core.SplitError(f'unknown split policy {policy}, choose from {SPLIT_POLICIES}')
        if policy == 'mixture':
            if self.task != 'mixture':
                raise core.SplitError('the mixture policy needs a mixture dataset')
            return self._retag({})
        if self.task != 'base':
            raise core.SplitError(f'the {policy} policy needs a base dataset')
        if policy == 'last-day':
            day = core.types.MAX_DAY
        elif day is None or not 1 <= day <= core.types.MAX_DAY:
            raise core.SplitError(f'held-out day {day} is not in [1, {core.types.MAX_DAY}]')
        missing = self.df['session_id'][self.df['day'].isna()].tolist()
        if missing:
            raise core.SplitError(f'{len(missing)} sessions have no day metadata, e.g. {missing[0]}')
        if not (self.df['day'] == day).any():
            raise core.SplitError(f'no session was recorded on day {day}')
        for label, g in self.df.groupby('label'):
            if (g['day'] == day).sum() != 1:
                logging.warning(f'{label} has {(g["day"] == day).sum()} sessions on day {day}')
        tags = {sid: 'test' if d == day else 'train' for sid, d in zip(self.df['session_id'], self.df['day'])}
        return self._retag(tags)

    def holdout(self, val_fraction: float, seed: int = 0) -> 'SessionDataset':
        """Move a stratified share of the training sessions into the ``val`` split.

        Whole sessions are held out per label, so no window of a validation session
        is trained on.
        """
        if not 0 < val_fraction < 1:
            raise core.SplitError(f'val_fraction {val_fraction} is not in (0, 1)')
        train = self._with_df(self.df[self.df['split'] == 'train'])
        val, _ = train.split(val_fraction, seed=seed, stratify=True)
        return self._retag({sid: 'val' for sid in val.df['session_id']})

    def summarize(self) -> pd.DataFrame:
        """Per-channel descriptive statistics over all rows of every split.

        Std is the population standard deviation, as used by the standardizer.

        :return: A frame indexed by (split, statistic) with one column per channel.
        """
        frames = {}
        for split in [s for s in core.SPLIT_TAGS if s in set(self.df['split'])]:
            rows = [s.readings for s in self.sessions(split)]
            if not rows:
                raise core.DataError(f'split {split} is empty')
            values = pd.DataFrame(np.concatenate(rows), columns=list(self.schema.channels))
            d = values.describe()
            d.loc['std'] = values.std(ddof=0)
            frames[split] = d.drop(index='count').rename(index={'mean': 'Mean', 'std': 'Std',
                                                                 'min': 'Min', 'max': 'Max'})
        if not frames:
            raise core.DataError('the dataset has no session')
        return pd.concat(frames, names=['split', 'statistic'])

    def fingerprint(self) -> str:
        """A content hash over session ids, labels, days and readings."""
        parts = [f'{s.session_id}|{self.df.label[i]}|{s.day_index}|{core.hash_array(s.readings)}'
                 for i, s in enumerate(self)]
        return core.hash_text('\n'.join(parts))

    def _summary(self):
        return pd.DataFrame([{'#sessions': len(self.df),
                              '#classes': len(self.classes),
                              '#days': self.df['day'].nunique(),
                              '#steps': int(self.df['num_steps'].sum()),
                              'channels': len(self.schema)}])


import tempfile
import unittest

class TestParse(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self.tmp.name)/'train'/'cashew'
        self.dir.mkdir(parents=True)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text: str, name='day1.csv') -> pathlib.Path:
        p = self.dir/name
        p.write_text(text)
        return p

    def test_well_formed(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1000, size=(600, 6))
        s = core.SensorSession(x, core.BASE_SCHEMA, core.registry_lookup('cashew'), 'a')
        p = write_session_csv(s, self.dir/'day1.csv', timestamp=True)
        t = parse_session_csv(p)
        self.assertEqual(t.readings.shape, (600, 6))
        self.assertTrue(np.array_equal(t.readings, x))
        self.assertEqual(t.label.name, 'cashew')
        self.assertEqual(t.day_index, 1)

    def test_missing_column(self):
        p = self._write('NO2,C2H5OH,VOC,CO,Alcohol\n1,2,3,4,5\n')
        with self.assertRaises(core.CsvFormatError) as cm:
            parse_session_csv(p)
        self.assertIn('LPG', str(cm.exception))
        self.assertEqual(cm.exception.line, 1)

    def test_bad_cells(self):
        header = 'NO2,C2H5OH,VOC,CO,Alcohol,LPG\n'
        good = '1,2,3,4,5,6\n'
        p = self._write(header + good * 15 + '1,2,NaN,4,5,6\n' + good)
        with self.assertRaises(core.CsvFormatError) as cm:
            parse_session_csv(p)
        self.assertEqual(cm.exception.line, 17)
        self.assertIn('non-finite', str(cm.exception))
        p = self._write(header + good * 3 + '1,2,abc,4,5,6\n')
        with self.assertRaises(core.CsvFormatError) as cm:
            parse_session_csv(p)
        self.assertEqual(cm.exception.line, 5)
        self.assertIn('non-numeric', str(cm.exception))
        p = self._write(header + good * 2 + '1,2,3\n' + good)
        with self.assertRaises(core.CsvFormatError) as cm:
            parse_session_csv(p)
        self.assertEqual(cm.exception.line, 4)
        p = self._write(header + good * 2 + '1,2,3,4,5,6,7,8\n' + good)
        with self.assertRaises(core.CsvFormatError) as cm:
            parse_session_csv(p)
        self.assertIn('ragged', str(cm.exception))
        p = self._write(header + ''.join(f'{i},1,2,3,4,5,6\n' for i in range(3)))
        with self.assertRaises(core.CsvFormatError) as cm:
            parse_session_csv(p)
        self.assertIn('too many fields', str(cm.exception))
        self.assertEqual(cm.exception.line, 2)


def _toy_root(root: pathlib.Path, names=('apple', 'cumin'), days=6, steps=20) -> pathlib.Path:
    rng = np.random.default_rng(1)
    for n in names:
        for d in range(1, days + 1):
            s = core.SensorSession(rng.uniform(size=(steps, 6)), core.BASE_SCHEMA,
                                   core.registry_lookup(n), 'x', d)
            write_session_csv(s, root/('test' if d == days else 'train')/n/f'{n}_day{d}.csv')
    return root

class TestSessionDataset(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = _toy_root(pathlib.Path(self.tmp.name))

    def tearDown(self):
        self.tmp.cleanup()

    def test_from_root(self):
        ds = SessionDataset.from_root(self.root)
        self.assertEqual(len(ds), 12)
        self.assertEqual(ds.classes, ['apple', 'cumin'])
        self.assertEqual(ds.df.session_id[0], 'test/apple/apple_day6')
        self.assertEqual(sorted(ds.df.day.unique().tolist()), [1, 2, 3, 4, 5, 6])
        again = SessionDataset.from_root(self.root, workers=1)
        self.assertEqual(ds.fingerprint(), again.fingerprint())

    def test_last_day(self):
        ds = SessionDataset.from_root(self.root).build_splits('last-day')
        self.assertEqual(len(ds.sessions('train')), 10)
        self.assertEqual(len(ds.sessions('test')), 2)
        self.assertTrue(all(s.day_index == 6 for s in ds.sessions('test')))

    def test_leave_one_day_out(self):
        ds = SessionDataset.from_root(self.root)
        tests = []
        for k in range(1, 7):
            fold = ds.build_splits('leave-one-day-out', k)
            test = {s.session_id for s in fold.sessions('test')}
            train = {s.session_id for s in fold.sessions('train')}
            self.assertFalse(test & train)
            self.assertEqual(len(test | train), len(ds))
            tests.append(test)
        self.assertEqual(sorted(set().union(*tests)), sorted(ds.df.session_id))
        self.assertEqual(sum(len(t) for t in tests), len(ds))
        with self.assertRaises(core.SplitError):
            ds.build_splits('leave-one-day-out', 7)

    def test_missing_days(self):
        (self.root/'train'/'apple'/'apple_day1.csv').rename(self.root/'train'/'apple'/'apple_first.csv')
        ds = SessionDataset.from_root(self.root)
        with self.assertRaises(core.SplitError):
            ds.build_splits('last-day')
        (self.root/'days.tsv').write_text('session_id\tday\ntrain/apple/apple_first\t1\n')
        self.assertEqual(len(SessionDataset.from_root(self.root).build_splits('last-day').sessions('test')), 2)

    def test_holdout(self):
        ds = SessionDataset.from_root(self.root).build_splits('last-day').holdout(0.2, seed=42)
        self.assertEqual(len(ds.sessions('val')), 2)
        self.assertEqual(len(ds.sessions('train')), 8)
        self.assertEqual(sorted(s.label.name for s in ds.sessions('val')), ['apple', 'cumin'])

    def test_summarize(self):
        x = np.array([[1.0] * 6, [3.0] * 6])
        y = np.array([[5.0] * 6, [7.0] * 6])
        label = core.registry_lookup('apple')
        ds = SessionDataset([core.SensorSession(x, core.BASE_SCHEMA, label, 'a', 1),
                             core.SensorSession(y, core.BASE_SCHEMA, label, 'b', 2)],
                            core.EmptyReader())
        s = ds.summarize()
        self.assertEqual(s.loc[('train', 'Mean'), 'CO'], 4.0)
        self.assertEqual(s.loc[('train', '50%'), 'CO'], 4.0)
        self.assertEqual(s.loc[('train', '25%'), 'CO'], 2.5)
        self.assertEqual(s.loc[('train', 'Max'), 'CO'], 7.0)
        self.assertAlmostEqual(s.loc[('train', 'Std'), 'CO'], np.sqrt(5.0))
        const = SessionDataset([core.SensorSession(np.ones((5, 6)), core.BASE_SCHEMA, label, 'c')],
                               core.EmptyReader())
        self.assertTrue((const.summarize().loc[('train', 'Std')] == 0).all())

    def test_archive(self):
        import shutil
        archive = shutil.make_archive(str(pathlib.Path(self.tmp.name)/'base'), 'zip', self.root)
        ds = SessionDataset.from_root(archive)
        self.assertEqual(len(ds), 12)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
