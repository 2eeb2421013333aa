import argparse
import json
import logging
import pathlib
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from nosekit import analysis, core, experiment, gcms
from nosekit.sensor import SessionDataset, SyntheticConfig, generate_synthetic

def _pairs(items: Optional[Sequence[str]], flag: str) -> Dict[str, str]:
    out = {}
    for item in items or ():
        if '=' not in item:
            raise core.ConfigError(f'{flag} {item!r} is not key=value')
        key, value = item.split('=', 1)
        out[key.strip()] = value.strip()
    return out

def _config(args) -> experiment.ExperimentConfig:
    overrides = _pairs(args.set, '--set')
    if args.config:
        return experiment.ExperimentConfig.load(args.config, overrides)
    return experiment.ExperimentConfig.loads('', overrides)

def _dataset(name: str, task: str) -> SessionDataset:
    if name in SessionDataset.list():
        return SessionDataset.get(name)
    return SessionDataset.from_root(name, task=task, progress=True)

def _print(df: pd.DataFrame, float_format: Optional[str] = None, **kwargs) -> None:
    if float_format:
        kwargs['float_format'] = lambda v: float_format % v
    with pd.option_context('display.max_rows', None, 'display.max_columns', None, 'display.width', 200):
        print(df.to_string(**kwargs))

def cmd_synth(args) -> None:
    values = experiment.parse_fields(SyntheticConfig, _pairs(args.set, '--set'), 'synthetic')
    if args.flavor == 'mixture':
        values.setdefault('channels', len(core.MIXTURE_SCHEMA))
    ds = generate_synthetic(SyntheticConfig(**{'flavor': args.flavor, **values}), args.out, progress=True)
    _print(ds.summary(), index=False)

def cmd_ingest_check(args) -> None:
    if args.root is None:
        _print(SessionDataset.summary_all(quick=args.quick))
        return
    ds = _dataset(args.root, args.task)
    _print(ds.summary(), index=False)
    _print(ds.summarize(), float_format='%.3f')
    if ds.task == 'base':
        per_day = ds.df.groupby('day', dropna=False)['session_id'].count().rename('#sessions')
        _print(per_day.to_frame())

def cmd_preprocess(args) -> None:
    config = _config(args)
    data = experiment.prepare(config, experiment.resolve_dataset(config))
    out = pathlib.Path(args.out) if args.out else None
    rows = []
    for split, (X, y, ids) in data.splits.items():
        rows.append({'split': split, '#windows': len(X), 'window': X.shape[1], 'channels': X.shape[2]})
        if out:
            out.mkdir(parents=True, exist_ok=True)
            np.savez(out/f'{split}.npz', X=X, y=y, window_id=np.array(ids))
    if out:
        (out/'stats.json').write_text(json.dumps(data.stats.to_dict(), indent=2, sort_keys=True) + '\n')
        (out/'config.ini').write_text(config.to_ini())
        logging.info(f'Wrote the standardized windows to {out}')
    _print(pd.DataFrame(rows), index=False)
    print(f'stats id: {data.stats.stats_id}')

def cmd_gcms_embed(args) -> None:
    root = pathlib.Path(args.root)
    ingredients = args.ingredients or sorted(gcms.read_spectra(root/'spectra.tsv'))
    embeddings = gcms.load_or_build_embeddings(root, ingredients, args.out, args.kinds, args.fit_on)
    rows = [{'kind': kind, '#ingredients': len(embs), 'dim': len(next(iter(embs.values())).vector)}
            for kind, embs in sorted(embeddings.items())]
    _print(pd.DataFrame(rows), index=False)

def _print_reports(reports) -> None:
    rows = [{'split': split, **rep.metrics()} for split, rep in reports.items()]
    _print(pd.DataFrame(rows), index=False, float_format='%.4f')

def cmd_train(args) -> None:
    result = experiment.run(_config(args), args.out, progress=True)
    _print_reports(result.reports)
    print(f'run directory: {result.run_dir}')

def cmd_eval(args) -> None:
    _print_reports(experiment.evaluate(args.run_dir, args.out))

def _grid(items: Optional[Sequence[str]]) -> Optional[Dict[str, List[str]]]:
    if not items:
        return None
    return {k: [v.strip() for v in values.split(',') if v.strip()]
            for k, values in _pairs(items, '--grid').items()}

def cmd_sweep(args) -> None:
    config = _config(args)
    cells = experiment.sweep(config, _grid(args.grid), args.out, args.workers, progress=True)
    _print(experiment.select_cells(cells, config.select).drop(columns=['run_dir']),
           index=False, float_format='%.4f')

def cmd_lodo(args) -> None:
    folds, summary = experiment.lodo(_config(args), args.out, args.workers, progress=True)
    _print(pd.concat([folds, summary.rename(index=str)]), float_format='%.4f')

def cmd_ablate_channels(args) -> None:
    table = analysis.ablate_run_channels(args.run_dir, args.split, out_path=args.out)
    _print(table, index=False, float_format='%.4f')

def cmd_ablate_timestamps(args) -> None:
    table = analysis.timestamp_ablation(_config(args), args.steps, args.out, progress=True)
    _print(table, index=False, float_format='%.4f')

def cmd_analyze(args) -> None:
    ds = _dataset(args.root, args.task)
    channels = list(ds.schema.channels)
    sessions = list(ds)
    rows = np.concatenate([s.readings for s in sessions])
    out = pathlib.Path(args.out or core.output_root()/'analysis'/(ds.name or pathlib.Path(args.root).name))
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    if args.by == 'category':
        if ds.task != 'base':
            raise core.ConfigError('--by category needs a base dataset')
        groups = np.concatenate([[s.label.category] * s.num_steps for s in sessions])
        for group, res in analysis.pca_by_group(rows, groups, args.k, method=args.method,
                                                standardized=args.standardized).items():
            tables[f'pca_loadings_{group}'] = analysis.loading_table(res, channels)
    else:
        res = analysis.pca(rows, args.k, args.method, args.standardized)
        tables['pca_loadings'] = analysis.loading_table(res, channels)
        ratios = pd.DataFrame({'Component': [f'PC{i + 1}' for i in range(args.k)],
                               'Explained variance ratio': res.explained_variance_ratio})
        ratios.to_csv(out/'pca_explained.tsv', sep='\t', index=False, float_format='%.6f', lineterminator='\n')
    for name, table in tables.items():
        table.to_csv(out/f'{name}.tsv', sep='\t', index=False, float_format='%.6f', lineterminator='\n')
        print(name)
        _print(table, index=False, float_format='%.4f')
    corr = analysis.correlation_table(rows, channels)
    corr.to_csv(out/'correlation.tsv', sep='\t', float_format='%.6f', lineterminator='\n')
    _print(corr, float_format='%.3f')
    logging.info(f'Wrote the analysis tables to {out}')

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='nosekit', description='''
Machine olfaction experiments: synthetic data, preprocessing, GC-MS embeddings,
training, evaluation and ablations.

Run nosekit <command> -h to get the help message for each command.
''', formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest='command', required=True)

    def _experiment(p, out_help='the output directory'):
        p.add_argument('config', nargs='?', help='an INI experiment config, defaults apply when omitted')
        p.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help='override a config value')
        p.add_argument('--out', help=out_help)

    def _root(p):
        p.add_argument('root', help='a dataset root or a built-in dataset name')
        p.add_argument('--task', choices=['base', 'mixture'], default='base')

    p = sub.add_parser('synth', help='generate a synthetic dataset')
    p.add_argument('out', help='the dataset root to write')
    p.add_argument('--flavor', choices=['base', 'mixture'], default='base')
    p.add_argument('--set', action='append', metavar='KEY=VALUE', help='a generator option')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('ingest-check', help='load a dataset and print its statistics')
    p.add_argument('root', nargs='?', help='a dataset root or a built-in dataset name, '
                   'summarize every built-in dataset when omitted')
    p.add_argument('--task', choices=['base', 'mixture'], default='base')
    p.add_argument('--quick', action='store_true', help='only read the stored built-in summaries')
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser('preprocess', help='difference, window and standardize a dataset')
    _experiment(p, 'write the windows of every split as .npz files into this directory')
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser('gcms-embed', help='compute the GC-MS embeddings of a dataset root')
    p.add_argument('root', help='a folder with spectra.tsv and formulas.tsv')
    p.add_argument('--out', help='the embeddings file, defaults to <root>/embeddings.tsv')
    p.add_argument('--kinds', nargs='+', choices=list(gcms.KINDS), default=list(gcms.KINDS))
    p.add_argument('--ingredients', nargs='+', help='defaults to every ingredient with spectra')
    p.add_argument('--fit-on', nargs='+', help='ingredients to fit the atom statistics on')
    p.set_defaults(func=cmd_gcms_embed)

    p = sub.add_parser('train', help='train and evaluate one model')
    _experiment(p, 'the run directory')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='re-evaluate a run directory')
    p.add_argument('run_dir')
    p.add_argument('--out', help='defaults to <run_dir>/eval')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sweep', help='one run per cell of a grid')
    _experiment(p, 'the sweep directory')
    p.add_argument('--grid', action='append', metavar='SECTION.KEY=V1,V2',
                   help='a grid axis, defaults to lr x window x diff_lag')
    p.add_argument('--workers', type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('lodo', help='leave-one-day-out over the 6 days')
    _experiment(p, 'the folds directory')
    p.add_argument('--workers', type=int, default=1)
    p.set_defaults(func=cmd_lodo)

    p = sub.add_parser('ablate-channels', help='mask every channel of a trained run')
    p.add_argument('run_dir')
    p.add_argument('--split', default='test')
    p.add_argument('--out', help='the table file, defaults to <run_dir>/<split>_channel_mask.tsv')
    p.set_defaults(func=cmd_ablate_channels)

    p = sub.add_parser('ablate-timestamps', help='train on the first n steps of every session')
    _experiment(p, 'the ablation directory')
    p.add_argument('--steps', type=int, nargs='+', required=True)
    p.set_defaults(func=cmd_ablate_timestamps)

    p = sub.add_parser('analyze', help='PCA loadings and channel correlation of raw readings')
    _root(p)
    p.add_argument('--k', type=int, default=2)
    p.add_argument('--method', choices=['eigh', 'power'], default='eigh')
    p.add_argument('--standardized', action='store_true')
    p.add_argument('--by', choices=['all', 'category'], default='all')
    p.add_argument('--out')
    p.set_defaults(func=cmd_analyze)
    return parser

def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        args.func(args)
    except core.NosekitError as e:
        logging.error(str(e))
        if argv is None:
            sys.exit(e.exit_code)
        return e.exit_code
    return 0

import contextlib
import io
import os
import tempfile
import unittest
from unittest import mock

class TestMain(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)
        self.env = mock.patch.dict(os.environ, {'NOSEKIT_HOME': str(self.root/'home')})
        self.env.start()

    def tearDown(self):
        self.env.stop()
        self.tmp.cleanup()

    def _main(self, *argv) -> int:
        with contextlib.redirect_stdout(io.StringIO()):
            return main([str(a) for a in argv])

    def test_synth_and_analyze(self):
        data = self.root/'data'
        self.assertEqual(self._main('synth', data, '--set', 'num_classes=3', '--set', 'num_steps=80'), 0)
        self.assertEqual(self._main('ingest-check', data), 0)
        self.assertEqual(self._main('ingest-check', '--quick'), 0)
        self.assertEqual(self._main('analyze', data, '--out', self.root/'an'), 0)
        table = pd.read_csv(self.root/'an'/'pca_loadings.tsv', sep='\t')
        self.assertEqual(list(table.columns), ['Feature', 'PC1', 'PC2', 'Magnitude'])
        self.assertEqual(self._main('analyze', data, '--by', 'category', '--out', self.root/'an'), 0)
        self.assertEqual(self._main('gcms-embed', data, '--kinds', 'spec'), 0)
        self.assertTrue((data/'embeddings.tsv').is_file())

    def test_exit_codes(self):
        with self.assertLogs(level='ERROR'):
            self.assertEqual(self._main('train', '--set', 'model.nope=1'), 2)
        with self.assertLogs(level='ERROR'):
            self.assertEqual(self._main('train', '--set', f'experiment.dataset={self.root/"missing"}'), 3)
        with self.assertLogs(level='ERROR'):
            self.assertEqual(self._main('synth', self.root/'x', '--set', 'num_classes'), 2)
        with self.assertLogs(level='ERROR'):
            self.assertEqual(self._main('eval', self.root), 3)

    def test_train_eval_ablate(self):
        data = self.root/'data'
        self._main('synth', data, '--set', 'num_classes=3', '--set', 'num_steps=80')
        cfg = self.root/'small.ini'
        cfg.write_text(f'''
[experiment]
dataset = {data}
[preprocess]
window = 20
diff_lag = 5
[model]
latent_dim = 8
num_layers = 1
num_heads = 2
[optim]
epochs = 1
''')
        run_dir = self.root/'run'
        self.assertEqual(self._main('train', cfg, '--out', run_dir), 0)
        self.assertEqual(self._main('eval', run_dir), 0)
        self.assertEqual((run_dir/'test_report.json').read_bytes(),
                         (run_dir/'eval'/'test_report.json').read_bytes())
        self.assertEqual(self._main('ablate-channels', run_dir), 0)
        table = pd.read_csv(run_dir/'test_channel_mask.tsv', sep='\t')
        self.assertEqual(len(table), 7)
        self.assertEqual(self._main('preprocess', cfg, '--out', self.root/'win'), 0)
        self.assertTrue((self.root/'win'/'train.npz').is_file())


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
