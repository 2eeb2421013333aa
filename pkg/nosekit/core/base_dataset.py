import abc
import copy
import logging
from typing import List, Optional, Sequence, Union

import pandas as pd

from nosekit import core

__all__ = ['BaseDataset']

class BaseDataset(abc.ABC):
    """A table of examples plus the reader they were loaded through.

    Subclasses keep the heavy payload (sensor readings) themselves and index it
    from ``df``, one row per recorded session. Rows with a missing label are dropped.

    :param df: One row per example.
    :param reader: Where the files came from, :class:`EmptyReader` for generated data.
    :param label_name: The column holding labels, by name or by position.

    :ivar name: The registered name, empty for ad-hoc datasets.
    :cvar TYPE: Namespaces the registry, e.g. ``sensor``.
    """
    def __init__(self, df: pd.DataFrame, reader: core.Reader,
                 label_name: Optional[Union[str, int]] = None) -> None:
        if not isinstance(df, pd.DataFrame) or not isinstance(reader, core.Reader):
            raise TypeError(f'expected a DataFrame and a Reader, got {type(df).__name__} '
                            f'and {type(reader).__name__}')
        if isinstance(label_name, int):
            label_name = df.columns[label_name]
        if label_name is not None:
            if label_name not in df.columns:
                raise ValueError(f'no label column {label_name!r} in {list(df.columns)}')
            df = df[df[label_name].notna()]
        if len(df) == 0:
            logging.warning(f'No labeled example found under {reader!r}')
        self.df = df
        self.reader = reader
        self.label_name = label_name
        self.name = ''

    TYPE = ''
    _DATASETS = dict()  # type: ignore

    def __len__(self) -> int:
        return len(self.df)

    @property
    def labels(self):
        if self.label_name is None:
            raise ValueError('this dataset has no label column')
        return self.df[self.label_name]

    @property
    def classes(self):
        return sorted(self.labels.unique())

    def _with_df(self, df: pd.DataFrame) -> 'BaseDataset':
        self_df, self.df = self.df, None
        new_ds = copy.deepcopy(self)
        new_ds.df = df
        self.df = self_df
        return new_ds

    def split(self, frac: Union[float, Sequence[float]], shuffle: bool = True, seed: int = 0,
              stratify: bool = False) -> List['BaseDataset']:
        """Partition the rows into ``len(frac) + 1`` datasets of the same type.

        The last part takes whatever the given fractions leave, so they must sum
        below 1. Registered names get a ``.i`` suffix per part.

        :param frac: One fraction in (0, 1) or several.
        :param shuffle: Shuffle rows with ``seed`` before cutting.
        :param seed: Seeds the shuffle, the same seed gives the same parts.
        :param stratify: If True, split every label group separately with the same fractions,
            so each label keeps its share in every part. Groups with a single example stay
            in the last part.
        """
        fracs = core.listify(frac)
        if sum(fracs) >= 1:
            raise ValueError(f'fractions {fracs} leave nothing for the last part')
        for f in fracs:
            if f <= 0:
                raise ValueError(f'fraction {f} must be positive')
        fracs = fracs + [1.0 - sum(fracs)]
        if stratify:
            groups = [g for _, g in self.df.groupby(self.label_name, sort=True)]
        else:
            groups = [self.df]
        parts: List[List[pd.DataFrame]] = [[] for _ in fracs]
        for g in groups:
            g = g.sample(frac=1, random_state=seed) if shuffle else g
            s = 0
            for i in range(len(fracs)):
                if stratify and i < len(fracs) - 1:
                    # every held-out part gets at least one example while the last keeps one
                    e = s + max(1, int(round(fracs[i] * len(g)))) if len(g) > 1 else s
                    e = min(e, len(g) - 1)
                else:
                    e = int(round(sum(fracs[:(i+1)]) * len(g)))
                parts[i].append(g.iloc[s:e])
                s = e
        rets = []
        for i, dfs in enumerate(parts):
            new_ds = self._with_df(pd.concat(dfs, axis=0).reset_index(drop=True))
            if new_ds.name:
                new_ds.name += f'.{i}'
            rets.append(new_ds)
        return rets

    def merge(self, *args: 'BaseDataset') -> 'BaseDataset':
        """Concatenate the rows of datasets read through the same reader."""
        dfs = [self.df]
        for ds in args:
            if ds.reader != self.reader:
                raise ValueError(f'cannot merge {ds.reader!r} into {self.reader!r}')
            dfs.append(ds.df)
        return self._with_df(pd.concat(dfs, axis=0, ignore_index=True))

    @classmethod
    def add(cls, entry, *args) -> None:
        """Register a dataset constructor under this class's ``TYPE``.

        Used as a decorator the function name, with ``_`` turned into ``-``, is the
        dataset name. Called with a name, ``args`` is the constructor followed by
        optional positional and keyword arguments.
        """
        if callable(entry):
            cls._DATASETS[(cls.TYPE, entry.__name__.replace('_', '-'))] = (entry, [], {})
            return
        if not args:
            raise ValueError(f'no constructor given for {entry}')
        fn, fn_args, fn_kwargs = (list(args) + [[], {}])[:3]
        cls._DATASETS[(cls.TYPE, entry)] = (fn, fn_args, fn_kwargs)

    @classmethod
    def get(cls, name: str) -> 'BaseDataset':
        """Build a registered dataset, :class:`DataError` for an unknown name."""
        if (cls.TYPE, name) not in cls._DATASETS:
            raise core.DataError(f'unknown dataset {name!r}, choose from {cls.list()}')
        (fn, fn_args, fn_kwargs) = cls._DATASETS[(cls.TYPE, name)]
        ds = fn(*fn_args, **fn_kwargs)
        ds.name = name
        return ds

    @classmethod
    def list(cls) -> Sequence[str]:
        """Names registered under this class's ``TYPE``, in registration order."""
        return [name for (kind, name) in cls._DATASETS if kind == cls.TYPE]

    @abc.abstractmethod
    def _summary(self) -> pd.DataFrame:
        """A one-row frame describing this dataset."""

    def summary(self) -> pd.DataFrame:
        """The cached :meth:`_summary` for registered datasets whose output folder exists."""
        if not self.name:
            return self._summary()
        cached = core.output_root()/'datasets'/self.name/f'{self.TYPE}_summary.pkl'
        if cached.is_file():
            return pd.read_pickle(cached)
        table = self._summary()
        if cached.parent.is_dir():
            table.to_pickle(cached)
        return table

    @classmethod
    def summary_all(cls, quick: bool = False) -> pd.DataFrame:
        """One summary row per registered dataset, indexed by name.

        :param quick: Only read the summaries cached under the output root, skipping
            datasets that were never summarized. Otherwise build every dataset.
        """
        rows = {}
        for name in cls.list():
            if not quick:
                rows[name] = cls.get(name).summary().iloc[0]
                continue
            cached = core.output_root()/'datasets'/name/f'{cls.TYPE}_summary.pkl'
            if cached.is_file():
                rows[name] = pd.read_pickle(cached).iloc[0]
        missing = [n for n in cls.list() if n not in rows]
        if missing:
            logging.warning(f'No cached summary for {", ".join(missing)}, run without --quick once')
        table = pd.DataFrame(list(rows.values()), index=list(rows))
        return table.sort_index()

import os
import tempfile
import unittest
from unittest.mock import patch

class TestBaseDataset(unittest.TestCase):

    @patch.multiple(BaseDataset, __abstractmethods__=set())
    def setUp(self):
        self.df = pd.DataFrame({'session_id': [f's{i}' for i in range(12)],
                                'label': ['apple'] * 6 + ['cumin'] * 4 + ['dill'] * 2})
        self.ds = BaseDataset(self.df, core.EmptyReader(), 'label')

    @patch.multiple(BaseDataset, __abstractmethods__=set())
    def test_split(self):
        a, b = self.ds.split(0.5)
        self.assertEqual(len(a), 6)
        self.assertEqual(len(b), 6)
        c, d = self.ds.split(0.5)
        self.assertTrue(c.df.equals(a.df))
        self.assertTrue(b.df.equals(d.df))
        self.assertEqual(sorted(a.df.session_id.tolist() + b.df.session_id.tolist()),
                         sorted(self.df.session_id.tolist()))

    @patch.multiple(BaseDataset, __abstractmethods__=set())
    def test_stratified_split(self):
        val, train = self.ds.split(0.2, seed=42, stratify=True)
        self.assertEqual(val.df.label.value_counts().to_dict(), {'apple': 1, 'cumin': 1, 'dill': 1})
        self.assertEqual(len(train), 9)
        self.assertFalse(set(val.df.session_id) & set(train.df.session_id))
        self.assertEqual(train.classes, ['apple', 'cumin', 'dill'])

    @patch.multiple(BaseDataset, __abstractmethods__=set())
    def test_merge(self):
        rets = self.ds.split([0.3, 0.4], shuffle=False)
        ds = rets[0].merge(*rets[1:])
        self.assertTrue(ds.df['session_id'].equals(self.ds.df['session_id']))

    @patch.multiple(BaseDataset, __abstractmethods__=set())
    def test_add_get_list(self):
        @BaseDataset.add
        def toy_sessions():
            return BaseDataset(self.df, core.EmptyReader(), None)

        BaseDataset.add('toy-sessions2', BaseDataset, [self.df, core.EmptyReader(), None])
        self.assertTrue(BaseDataset.get('toy-sessions').df.equals(self.df))
        self.assertEqual(BaseDataset.get('toy-sessions2').name, 'toy-sessions2')
        self.assertIn('toy-sessions', BaseDataset.list())
        with self.assertRaises(core.DataError):
            BaseDataset.get('missing')

    def test_summary_all(self):
        df = self.df

        class ToyDataset(BaseDataset):
            TYPE = 'toy'

            def _summary(self):
                return pd.DataFrame([{'#sessions': len(self)}])

        ToyDataset.add('toy-a', lambda: ToyDataset(df, core.EmptyReader(), 'label'))
        ToyDataset.add('toy-b', lambda: ToyDataset(df.iloc[:4], core.EmptyReader(), 'label'))
        with tempfile.TemporaryDirectory() as tmp, \
                patch.dict(os.environ, {'NOSEKIT_HOME': tmp}):
            self.assertEqual(len(ToyDataset.summary_all(quick=True)), 0)
            table = ToyDataset.summary_all()
            self.assertEqual(list(table.index), ['toy-a', 'toy-b'])
            self.assertEqual(table['#sessions'].tolist(), [12, 4])
        self.assertNotIn('toy-a', BaseDataset.list())

    def test_labels(self):
        self.assertEqual(self.ds.labels.tolist()[:2], ['apple', 'apple'])
        self.assertEqual(self.ds.classes, ['apple', 'cumin', 'dill'])


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
