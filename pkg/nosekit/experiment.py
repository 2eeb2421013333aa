"""Config-driven experiments: single runs, re-evaluation, sweeps and leave-one-day-out.

An experiment is described by an INI file with the sections ``[experiment]``,
``[preprocess]``, ``[model]``, ``[objective]`` and ``[optim]``. Missing keys take
the protocol defaults of the task, unknown keys are errors. Every run writes a
self-describing directory::

    config.ini          the fully resolved configuration
    manifest.json       config hash, registry version, stats id, dataset fingerprint
    stats.json          the standardization statistics fitted on train
    checkpoint.npz      the final model
    trace.csv           per-epoch mean loss
    steps.csv           per-step loss breakdown
    <split>_report.*    metrics of every evaluated split
    <split>_predictions.tsv
"""
import concurrent.futures
import configparser
import dataclasses
import io
import itertools
import json
import logging
import pathlib
import typing
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from nosekit import __version__, core, metrics
from nosekit.gcms import embedding_matrix, load_or_build_embeddings, read_embeddings
from nosekit.nn import (ClassificationObjective, ContrastiveConfig, CrossModalObjective,
                        MixtureLossConfig, MixtureObjective, ModelConfig, SensorModel, TrainConfig,
                        build_model, load_checkpoint, predict, retrieval_scores, save_checkpoint, train)
from nosekit.sensor import (SPLIT_POLICIES, PreprocessConfig, SessionDataset, fit_standardizer,
                            standardize, truncate_session, window_arrays, window_sessions)

__all__ = ['TASKS', 'LR_GRID', 'DEFAULT_GRID', 'ExperimentConfig', 'PreparedData', 'RunResult',
           'parse_fields', 'resolve_dataset', 'prepare', 'make_scorer', 'stored_gcms', 'run', 'evaluate',
           'load_run', 'sweep', 'select_cells', 'lodo']

TASKS = ('base-classify', 'base-contrastive', 'mixture')
LR_GRID = (3e-4, 1e-3, 3e-3)
DEFAULT_GRID = {'optim.lr': LR_GRID, 'preprocess.window': (50, 100), 'preprocess.diff_lag': (0, 25)}
DEFAULT_VAL_FRACTION = 0.2
SELECTIONS = ('final', 'best-val')

_BASE_DEFAULTS = {'experiment': {'dataset': 'synthetic-base', 'split': 'last-day'},
                  'preprocess': {'diff_lag': 25, 'window': 100},
                  'optim': {'epochs': 90, 'batch_size': 32}}
TASK_DEFAULTS = {
    'base-classify': _BASE_DEFAULTS,
    'base-contrastive': _BASE_DEFAULTS,
    'mixture': {'experiment': {'dataset': 'synthetic-mixture', 'split': 'mixture'},
                'preprocess': {'diff_lag': 0, 'window': 100},
                'optim': {'epochs': 60, 'batch_size': 64}},
}
_OBJECTIVES = {'base-classify': None, 'base-contrastive': ContrastiveConfig, 'mixture': MixtureLossConfig}
SECTIONS = ('experiment', 'preprocess', 'model', 'objective', 'optim')
EXPERIMENT_KEYS = ('task', 'dataset', 'split', 'day', 'output', 'val_fraction', 'select')
# filled in from the dataset and the task
MODEL_DERIVED = ('input_dim', 'num_classes', 'num_odorants', 'head', 'gcms_dim')

def _fields(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]

def _unwrap_optional(hint):
    args = getattr(hint, '__args__', ())
    if getattr(hint, '__origin__', None) is Union and type(None) in args:
        return next(a for a in args if a is not type(None)), True
    return hint, False

def _convert(value: Any, hint, path: str) -> Any:
    """Parse an INI string by the annotation of its field, typed values pass through."""
    if not isinstance(value, str):
        return value
    hint, optional = _unwrap_optional(hint)
    text = value.strip()
    if optional and text.lower() in ('', 'none'):
        return None
    try:
        if hint is bool:
            if text.lower() not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if getattr(hint, '__origin__', None) is tuple and hint.__args__[0] in (int, float, str):
            item = hint.__args__[0]
            return tuple(item(t) for t in text.replace(',', ' ').split())
        if hint in (int, float, str):
            return hint(text)
        if hint is not Any:
            raise ValueError(text)
    except ValueError:
        raise core.ConfigError(f'cannot parse {value!r} as {getattr(hint, "__name__", hint)}', path)
    return text

def _format(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ', '.join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)

def parse_fields(target, values: Mapping[str, Any], section: str) -> Dict[str, Any]:
    """Parse ``key -> INI string`` into the typed fields of a dataclass."""
    hints = typing.get_type_hints(target)
    out = {}
    for key, value in values.items():
        if key not in hints:
            raise core.ConfigError(f'unknown key, expect one of {_fields(target)}', f'{section}.{key}')
        out[key] = _convert(value, hints[key], f'{section}.{key}')
    return out

def _apply(sections: Mapping[str, Mapping[str, Any]], overrides: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    out = {k: dict(v) for k, v in sections.items()}
    for path, value in overrides.items():
        if '.' not in path:
            raise core.ConfigError(f'override {path!r} is not section.key', path)
        section, key = path.split('.', 1)
        out.setdefault(section, {})[key] = value
    return out


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment.

    Build it with :meth:`load`, :meth:`loads` or :meth:`from_sections` so task
    defaults apply. ``model`` holds ModelConfig fields except those derived from
    the data.

    :param task: ``base-classify``, ``base-contrastive`` or ``mixture``.
    :param dataset: A built-in dataset name or a dataset root.
    :param split: ``last-day``, ``leave-one-day-out`` or ``mixture``.
    :param day: The held-out day of ``leave-one-day-out``.
    :param output: The run directory, defaults to a folder under the output root.
    :param val_fraction: Share of training sessions held out for validation.
    :param select: How a sweep picks the learning rate per row, ``final`` keeps
        every cell, ``best-val`` keeps the best validation score.
    """
    task: str = 'base-classify'
    dataset: str = 'synthetic-base'
    split: str = 'last-day'
    day: Optional[int] = None
    output: Optional[str] = None
    val_fraction: float = 0.0
    select: str = 'best-val'
    preprocess: PreprocessConfig = PreprocessConfig()
    model: Tuple[Tuple[str, Any], ...] = ()
    objective: Optional[Union[ContrastiveConfig, MixtureLossConfig]] = None
    optim: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.task not in TASKS:
            raise core.ConfigError(f'{self.task} is not in {TASKS}', 'experiment.task')
        if self.split not in SPLIT_POLICIES:
            raise core.ConfigError(f'{self.split} is not in {SPLIT_POLICIES}', 'experiment.split')
        if (self.task == 'mixture') != (self.split == 'mixture'):
            raise core.ConfigError(f'split {self.split} does not fit task {self.task}', 'experiment.split')
        if self.split == 'leave-one-day-out' and self.day is None:
            raise core.ConfigError('leave-one-day-out needs a day', 'experiment.day')
        if not 0 <= self.val_fraction < 1:
            raise core.ConfigError(f'{self.val_fraction} is not in [0, 1)', 'experiment.val_fraction')
        if self.select not in SELECTIONS:
            raise core.ConfigError(f'{self.select} is not in {SELECTIONS}', 'experiment.select')
        expected = _OBJECTIVES[self.task]
        if expected is None and self.objective is not None:
            raise core.ConfigError(f'{self.task} takes no objective options', 'objective')
        if expected is not None and not isinstance(self.objective, expected):
            object.__setattr__(self, 'objective', expected())
        for key, _ in self.model:
            if key in MODEL_DERIVED or key not in _fields(ModelConfig):
                raise core.ConfigError('unknown key', f'model.{key}')
        self.model_config(len(core.BASE_SCHEMA), 2)

    @classmethod
    def from_sections(cls, sections: Mapping[str, Mapping[str, Any]]) -> 'ExperimentConfig':
        """Build from section -> key -> value, values being INI strings or typed values."""
        unknown = sorted(set(sections) - set(SECTIONS))
        if unknown:
            raise core.ConfigError(f'unknown section [{unknown[0]}], expect {SECTIONS}', unknown[0])
        task = str(sections.get('experiment', {}).get('task', 'base-classify')).strip()
        if task not in TASKS:
            raise core.ConfigError(f'{task} is not in {TASKS}', 'experiment.task')
        defaults = TASK_DEFAULTS[task]

        def _read(name, target, keys):
            hints = typing.get_type_hints(target)
            out = dict(defaults.get(name, {}))
            for key, value in sections.get(name, {}).items():
                if key not in keys:
                    raise core.ConfigError(f'unknown key, expect one of {list(keys)}', f'{name}.{key}')
                out[key] = _convert(value, hints[key], f'{name}.{key}')
            return out

        experiment = _read('experiment', cls, EXPERIMENT_KEYS)
        preprocess = PreprocessConfig(**_read('preprocess', PreprocessConfig, _fields(PreprocessConfig)))
        model = _read('model', ModelConfig, [f for f in _fields(ModelConfig) if f not in MODEL_DERIVED])
        target = _OBJECTIVES[task]
        if target is None:
            if sections.get('objective'):
                key = next(iter(sections['objective']))
                raise core.ConfigError(f'{task} takes no objective options', f'objective.{key}')
            objective = None
        else:
            objective = target(**_read('objective', target, _fields(target)))
        optim = TrainConfig(**_read('optim', TrainConfig, _fields(TrainConfig)))
        return cls(preprocess=preprocess, model=tuple(sorted(model.items())), objective=objective,
                   optim=optim, **experiment)

    @classmethod
    def loads(cls, text: str, overrides: Optional[Mapping[str, Any]] = None) -> 'ExperimentConfig':
        """Parse INI text, ``overrides`` maps ``section.key`` to values."""
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise core.ConfigError(f'malformed config: {e}')
        sections = {s: dict(parser[s]) for s in parser.sections()}
        return cls.from_sections(_apply(sections, overrides or {}))

    @classmethod
    def load(cls, path: Union[str, pathlib.Path], overrides: Optional[Mapping[str, Any]] = None) -> 'ExperimentConfig':
        try:
            text = pathlib.Path(path).read_text()
        except OSError as e:
            raise core.ConfigError(f'cannot read {path}: {e}')
        return cls.loads(text, overrides)

    def model_config(self, input_dim: int, num_classes: int, gcms_dim: int = 0) -> ModelConfig:
        return ModelConfig(**dict(self.model), input_dim=input_dim, num_classes=num_classes,
                           head='mixture' if self.task == 'mixture' else 'classify', gcms_dim=gcms_dim)

    def to_sections(self) -> Dict[str, Dict[str, str]]:
        """Every resolved value as INI strings."""
        resolved_model = self.model_config(len(core.BASE_SCHEMA), 2).to_dict()
        obj = dataclasses.asdict(self.objective) if self.objective is not None else {}
        return {
            'experiment': {k: _format(getattr(self, k)) for k in EXPERIMENT_KEYS},
            'preprocess': {k: _format(v) for k, v in dataclasses.asdict(self.preprocess).items()},
            'model': {k: _format(v) for k, v in resolved_model.items() if k not in MODEL_DERIVED},
            'objective': {k: _format(v) for k, v in obj.items()},
            'optim': {k: _format(v) for k, v in dataclasses.asdict(self.optim).items()}}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, values in self.to_sections().items():
            parser[name] = values
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @property
    def config_hash(self) -> str:
        return core.hash_text(self.to_ini())[:16]

    def with_overrides(self, overrides: Mapping[str, Any]) -> 'ExperimentConfig':
        """A new config with ``section.key`` values replaced."""
        sections = self.to_sections()
        if str(overrides.get('experiment.task', self.task)) != self.task:
            sections.pop('objective')
        # derived defaults follow the overridden value unless set explicitly
        pp = self.preprocess
        if 'preprocess.window' in overrides and 'preprocess.stride' not in overrides \
                and pp.stride == pp.window // 2 and pp.window % 2 == 0:
            sections['preprocess']['stride'] = 'none'
        model = self.model_config(len(core.BASE_SCHEMA), 2)
        if 'model.family' in overrides and 'model.dropout' not in overrides \
                and model.dropout == ModelConfig(family=model.family).dropout:
            sections['model']['dropout'] = 'none'
        return self.from_sections(_apply(sections, overrides))


def resolve_dataset(config: ExperimentConfig) -> SessionDataset:
    """Return the built-in dataset of that name, or load the dataset root."""
    task = 'mixture' if config.task == 'mixture' else 'base'
    if config.dataset in SessionDataset.list():
        ds = SessionDataset.get(config.dataset)
    else:
        path = pathlib.Path(config.dataset).expanduser()
        if not path.exists():
            raise core.DataError(f'{config.dataset} is neither a built-in dataset '
                                 f'{SessionDataset.list()} nor an existing path')
        ds = SessionDataset.from_root(path, task=task)
    if ds.task != task:
        raise core.DataError(f'{config.dataset} is a {ds.task} dataset, task {config.task} needs {task}')
    return ds

@dataclasses.dataclass
class PreparedData:
    """Standardized model inputs per split: (X, y, window ids)."""
    splits: Dict[str, Tuple[np.ndarray, np.ndarray, List[str]]]
    stats: core.StandardizationStats
    dataset: SessionDataset

def prepare(config: ExperimentConfig, dataset: SessionDataset, truncate: Optional[int] = None,
            stats: Optional[core.StandardizationStats] = None) -> PreparedData:
    """Split, difference, window and standardize.

    :param truncate: Keep only the first ``truncate`` differenced steps of every session.
    :param stats: Reuse these statistics instead of fitting them on train.
    """
    pp = config.preprocess
    if truncate is not None and truncate < pp.window:
        raise core.DataError(f'cannot truncate to {truncate} steps, below the window size {pp.window}')
    if config.task == 'mixture' and pp.diff_lag != 0:
        logging.warning(f'mixture models are usually trained on raw windows, '
                        f'but preprocess.diff_lag is {pp.diff_lag}')
    ds = dataset.build_splits(config.split, config.day)
    if config.val_fraction > 0:
        ds = ds.holdout(config.val_fraction, config.optim.seed)
    windows = {}
    for split in [s for s in core.SPLIT_TAGS if s in set(ds.df['split'])]:
        sessions = ds.sessions(split)
        if truncate is not None:
            sessions = [truncate_session(s, truncate + pp.diff_lag) for s in sessions]
        ws = window_sessions(sessions, pp)
        if not ws:
            logging.warning(f'split {split} has no window of size {pp.window}')
            continue
        windows[split] = ws
    if 'train' not in windows:
        raise core.DataError(f'no training window of size {pp.window} after differencing with lag {pp.diff_lag}')
    if stats is None:
        stats = fit_standardizer(windows['train'], 'train', ds.schema.channels)
    splits = {}
    for split, ws in windows.items():
        ws = standardize(ws, stats)
        X, y = window_arrays(ws)
        splits[split] = (X, y, [w.window_id for w in ws])
    return PreparedData(splits, stats, ds)

def _gcms_matrix(config: ExperimentConfig, dataset: SessionDataset, run_dir: pathlib.Path) -> Optional[np.ndarray]:
    if config.task != 'base-contrastive':
        return None
    if not isinstance(dataset.reader, core.FolderReader):
        raise core.DataError('cross-modal training needs a folder dataset root with spectra.tsv and formulas.tsv')
    kind = config.objective.kind
    names = dataset.registry.names
    embs = load_or_build_embeddings(dataset.reader.root, names, run_dir/'gcms_embeddings.tsv', [kind])
    return embedding_matrix(embs[kind], names)

def _objective(config: ExperimentConfig, gcms: Optional[np.ndarray]):
    if config.task == 'mixture':
        return MixtureObjective(config.objective)
    if config.task == 'base-contrastive':
        return CrossModalObjective(gcms, config.objective)
    return ClassificationObjective()

def make_scorer(model: SensorModel, config: ExperimentConfig,
                gcms: Optional[np.ndarray] = None) -> Callable[[np.ndarray], np.ndarray]:
    """Map windows to class scores, or to proportions for mixtures."""
    if config.task == 'mixture':
        return lambda X: predict(model, X, 'mixture')[1]
    if config.task == 'base-contrastive' and config.objective.inference == 'retrieval':
        return lambda X: retrieval_scores(model, X, gcms)
    return lambda X: predict(model, X, 'logits')

def _evaluate(model: SensorModel, data: PreparedData, config: ExperimentConfig,
              gcms: Optional[np.ndarray], out_dir: pathlib.Path) -> Dict[str, metrics.Report]:
    scorer = make_scorer(model, config, gcms)
    mixture = config.task == 'mixture'
    registry = data.dataset.registry
    columns = list(core.odorants()) if mixture else registry.names
    reports = {}
    for split, (X, y, ids) in data.splits.items():
        if split == 'train':
            continue
        scores = scorer(X)
        rep = metrics.report(scores, y, 'mixture' if mixture else 'classification', registry)
        metrics.write_report(rep, out_dir, f'{split}_')
        metrics.write_predictions(out_dir/f'{split}_predictions.tsv', ids, scores, columns)
        reports[split] = rep
    pd.DataFrame([{'split': s, **r.metrics()} for s, r in reports.items()]).to_csv(
        out_dir/'metrics.tsv', sep='\t', index=False, float_format='%.6f', lineterminator='\n')
    return reports

@dataclasses.dataclass
class RunResult:
    run_dir: pathlib.Path
    reports: Dict[str, metrics.Report]
    trace: pd.DataFrame

def run(config: ExperimentConfig, out_dir: Optional[Union[str, pathlib.Path]] = None,
        dataset: Optional[SessionDataset] = None, truncate: Optional[int] = None,
        progress: bool = False) -> RunResult:
    """Train one model and evaluate it on every held-out split.

    :param out_dir: The run directory, defaults to ``config.output`` or
        ``<output root>/runs/<task>-<config hash>``.
    :param dataset: A loaded dataset, resolved from the config if None.
    :param truncate: Train and evaluate on the first ``truncate`` differenced steps only.
    """
    run_dir = pathlib.Path(out_dir or config.output or core.output_root()/'runs'/f'{config.task}-{config.config_hash}')
    dataset = dataset or resolve_dataset(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = prepare(config, dataset, truncate)
    gcms = _gcms_matrix(config, dataset, run_dir)
    model_config = config.model_config(len(dataset.schema), len(dataset.registry),
                                       0 if gcms is None else gcms.shape[1])
    model = build_model(model_config, config.optim.seed)
    X, y, _ = data.splits['train']
    logging.info(f'Train a {model_config.family} model with {model.num_parameters()} parameters '
                 f'on {len(X)} windows, writing to {run_dir}')
    result = train(model, _objective(config, gcms), X, y, config.optim, progress=progress)
    result.trace.to_csv(run_dir/'trace.csv', index=False, lineterminator='\n', float_format='%.17g')
    result.steps.to_csv(run_dir/'steps.csv', index=False, lineterminator='\n', float_format='%.17g')
    save_checkpoint(model, run_dir/'checkpoint.npz', {'task': config.task, 'config_hash': config.config_hash})
    (run_dir/'stats.json').write_text(json.dumps(data.stats.to_dict(), indent=2) + '\n')
    (run_dir/'config.ini').write_text(config.to_ini())
    reports = _evaluate(model, data, config, gcms, run_dir)
    manifest = {'config_hash': config.config_hash,
                'registry_version': dataset.registry.version,
                'stats_id': data.stats.stats_id,
                'dataset': config.dataset,
                'dataset_fingerprint': dataset.fingerprint(),
                'truncate': truncate,
                'num_windows': {s: len(v[0]) for s, v in data.splits.items()},
                'num_parameters': model.num_parameters(),
                'nosekit_version': __version__}
    (run_dir/'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    for split, rep in reports.items():
        logging.info(f'{split}: ' + ', '.join(f'{k} {v:.4f}' for k, v in rep.metrics().items()))
    return RunResult(run_dir, reports, result.trace)

def load_run(run_dir: Union[str, pathlib.Path]) -> Tuple[ExperimentConfig, SensorModel, core.StandardizationStats, Dict]:
    """Read the config, model, statistics and manifest of a run directory."""
    run_dir = pathlib.Path(run_dir)
    for name in ('config.ini', 'checkpoint.npz', 'stats.json', 'manifest.json'):
        if not (run_dir/name).is_file():
            raise core.DataError(f'{run_dir} is not a run directory, {name} is missing')
    config = ExperimentConfig.load(run_dir/'config.ini')
    model, _ = load_checkpoint(run_dir/'checkpoint.npz')
    stats = core.StandardizationStats.from_dict(json.loads((run_dir/'stats.json').read_text()))
    manifest = json.loads((run_dir/'manifest.json').read_text())
    return config, model, stats, manifest

def stored_gcms(config: ExperimentConfig, dataset: SessionDataset, run_dir: pathlib.Path) -> Optional[np.ndarray]:
    if config.task != 'base-contrastive':
        return None
    kind = config.objective.kind
    return embedding_matrix(read_embeddings(run_dir/'gcms_embeddings.tsv')[kind], dataset.registry.names)

def evaluate(run_dir: Union[str, pathlib.Path], out_dir: Optional[Union[str, pathlib.Path]] = None,
             dataset: Optional[SessionDataset] = None) -> Dict[str, metrics.Report]:
    """Re-evaluate a stored run from its checkpoint, statistics and config.

    Reports go to ``<run_dir>/eval`` by default and match the stored ones byte for byte.
    """
    run_dir = pathlib.Path(run_dir)
    config, model, stats, manifest = load_run(run_dir)
    dataset = dataset or resolve_dataset(config)
    if dataset.fingerprint() != manifest['dataset_fingerprint']:
        logging.warning(f'the dataset {config.dataset} changed since the run')
    data = prepare(config, dataset, manifest.get('truncate'), stats)
    out_dir = pathlib.Path(out_dir) if out_dir else run_dir/'eval'
    out_dir.mkdir(parents=True, exist_ok=True)
    return _evaluate(model, data, config, stored_gcms(config, dataset, run_dir), out_dir)


_OBJECTIVE_NAMES = {'base-classify': 'sensor-only', 'base-contrastive': 'cross-modal', 'mixture': 'mixture'}

def _flatten(reports: Dict[str, metrics.Report]) -> Dict[str, float]:
    row = {}
    for split, rep in reports.items():
        for k, v in rep.metrics().items():
            row[k if split == 'test' else f'{split} {k}'] = v
    return row

def _run_cell(config: ExperimentConfig, overrides: Dict[str, Any], cell_dir: pathlib.Path,
              dataset: Optional[SessionDataset] = None) -> Dict[str, Any]:
    values = {k: overrides.get(k) for k in ('model.family', 'preprocess.window', 'preprocess.diff_lag', 'optim.lr')}
    try:
        cfg = config.with_overrides(overrides)
        values = {'model.family': cfg.model_config(1, 2).family,
                  'preprocess.window': cfg.preprocess.window, 'preprocess.diff_lag': cfg.preprocess.diff_lag,
                  'optim.lr': cfg.optim.lr}
        task = cfg.task
        result = run(cfg, cell_dir, dataset)
        status, scores = 'ok', _flatten(result.reports)
    except (core.NosekitError, ValueError, ArithmeticError) as e:
        logging.warning(f'Sweep cell {cell_dir.name} failed: {e}')
        task = str(overrides.get('experiment.task', config.task))
        status, scores = f'failed: {e}', {}
    return {'Model': values['model.family'], 'Objective': _OBJECTIVE_NAMES.get(task, task),
            'w': values['preprocess.window'], 'p': values['preprocess.diff_lag'], 'lr': values['optim.lr'],
            'status': status, **scores, 'run_dir': str(cell_dir)}

def _map(fn, args: Sequence[tuple], workers: int, progress: bool) -> List[Any]:
    if workers > 1 and len(args) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, *a) for a in args]
            return [f.result() for f in tqdm(futures, disable=not progress)]
    return [fn(*a) for a in tqdm(args, disable=not progress)]

def _add_delta(df: pd.DataFrame, keys: Sequence[str]) -> pd.DataFrame:
    """ΔAcc@1 of cross-modal rows relative to the matching sensor-only row."""
    if 'Acc@1' not in df.columns or not {'sensor-only', 'cross-modal'} <= set(df['Objective']):
        return df
    base = df[df['Objective'] == 'sensor-only'].set_index(list(keys))['Acc@1']
    df = df.copy()
    df['ΔAcc@1'] = [r['Acc@1'] - base.get(tuple(r[k] for k in keys), np.nan)
                    if r['Objective'] == 'cross-modal' else np.nan for _, r in df.iterrows()]
    return df

def select_cells(cells: pd.DataFrame, select: str = 'best-val') -> pd.DataFrame:
    """Keep one learning rate per (model, objective, w, p).

    ``best-val`` keeps the cell with the best validation score, Acc@1 for
    classification and MAE for mixtures. ``final`` keeps every finished cell.
    """
    if select not in SELECTIONS:
        raise core.ConfigError(f'{select} is not in {SELECTIONS}', 'experiment.select')
    ok = cells[cells['status'] == 'ok']
    if select == 'final' or ok.empty:
        return ok.reset_index(drop=True)
    if 'val Acc@1' in ok.columns:
        key, best = 'val Acc@1', 'idxmax'
    elif 'val MAE' in ok.columns:
        key, best = 'val MAE', 'idxmin'
    else:
        raise core.ConfigError('best-val selection needs a validation split', 'experiment.val_fraction')
    groups = ok.groupby(['Model', 'Objective', 'w', 'p'], sort=False)[key]
    picked = ok.loc[getattr(groups, best)().values]
    return _add_delta(picked.drop(columns='ΔAcc@1', errors='ignore'), ['Model', 'w', 'p']).reset_index(drop=True)

def sweep(config: ExperimentConfig, grid: Optional[Mapping[str, Sequence[Any]]] = None,
          out_dir: Optional[Union[str, pathlib.Path]] = None, workers: int = 1,
          progress: bool = False) -> pd.DataFrame:
    """Run one experiment per grid cell and tabulate the final-checkpoint metrics.

    Failed cells are kept in the table with a ``failed: ...`` status. The table of
    every cell goes to ``sweep.tsv``, the cells kept by ``config.select`` to
    ``sweep_selected.tsv``.

    :param grid: ``section.key`` -> values, defaults to lr x w x p of the protocol.
        ``experiment.task`` may list both base tasks to get ΔAcc@1.
    :param workers: Number of processes, cells run in-process when 1.
    """
    grid = dict(DEFAULT_GRID if grid is None else grid)
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise core.ConfigError('the sweep grid is empty', 'sweep.grid')
    out_dir = pathlib.Path(out_dir or config.output or core.output_root()/'sweeps'/f'{config.task}-{config.config_hash}')
    base = {}
    if config.select == 'best-val' and config.val_fraction == 0:
        logging.info(f'Hold out {DEFAULT_VAL_FRACTION} of the training sessions to select cells')
        base['experiment.val_fraction'] = DEFAULT_VAL_FRACTION
    # generate or load the dataset once before any worker starts
    dataset = resolve_dataset(config)
    args = []
    for values in itertools.product(*grid.values()):
        overrides = {**base, **dict(zip(grid, values))}
        name = '_'.join(f'{k.split(".")[-1]}-{v}' for k, v in zip(grid, values))
        args.append((config, overrides, out_dir/name, None if workers > 1 else dataset))
    logging.info(f'Sweep {len(args)} cells into {out_dir}')
    cells = _add_delta(pd.DataFrame(_map(_run_cell, args, workers, progress)), ['Model', 'w', 'p', 'lr'])
    out_dir.mkdir(parents=True, exist_ok=True)
    cells.to_csv(out_dir/'sweep.tsv', sep='\t', index=False, float_format='%.6f', lineterminator='\n')
    failed = int((cells['status'] != 'ok').sum())
    if failed:
        logging.warning(f'{failed} of {len(cells)} sweep cells failed')
    select_cells(cells, config.select).to_csv(out_dir/'sweep_selected.tsv', sep='\t', index=False,
                                              float_format='%.6f', lineterminator='\n')
    return cells

def _run_fold(config: ExperimentConfig, day: int, fold_dir: pathlib.Path,
              dataset: Optional[SessionDataset] = None) -> Dict[str, float]:
    cfg = config.with_overrides({'experiment.split': 'leave-one-day-out', 'experiment.day': day})
    rep = run(cfg, fold_dir, dataset).reports['test']
    return {'Day': day, **rep.metrics()}

def lodo(config: ExperimentConfig, out_dir: Optional[Union[str, pathlib.Path]] = None,
         workers: int = 1, progress: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Leave-one-day-out: one run per held-out day.

    :return: The per-day table indexed by day and its mean and sample std over
        the 6 folds. Both are written to ``lodo.tsv``.
    """
    if config.task == 'mixture':
        raise core.ConfigError('leave-one-day-out needs a base task', 'experiment.task')
    out_dir = pathlib.Path(out_dir or config.output or core.output_root()/'lodo'/f'{config.task}-{config.config_hash}')
    dataset = resolve_dataset(config)
    missing = dataset.df['day'].isna().sum()
    if missing:
        raise core.SplitError(f'{missing} sessions have no day metadata')
    days = range(1, core.types.MAX_DAY + 1)
    args = [(config, day, out_dir/f'day{day}', None if workers > 1 else dataset) for day in days]
    folds = pd.DataFrame(_map(_run_fold, args, workers, progress)).set_index('Day')
    summary = folds.agg(['mean', 'std'])
    table = folds.copy().astype(object)
    table.loc['mean ± std'] = [f'{m:.4f} ± {s:.4f}' for m, s in zip(summary.loc['mean'], summary.loc['std'])]
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir/'lodo.tsv', sep='\t', lineterminator='\n')
    return folds, summary


import os
import tempfile
import unittest

from nosekit.sensor import SyntheticConfig, generate_synthetic

_SMALL = '''
[experiment]
task = {task}
dataset = {root}
select = final
[preprocess]
diff_lag = {p}
window = 20
[model]
latent_dim = 8
num_layers = 1
num_heads = 2
[optim]
epochs = 2
'''

class TestConfig(unittest.TestCase):
    def test_defaults(self):
        base = ExperimentConfig.from_sections({})
        self.assertEqual((base.optim.epochs, base.optim.batch_size, base.optim.lr, base.optim.seed),
                         (90, 32, 1e-3, 42))
        self.assertEqual((base.split, base.preprocess.diff_lag), ('last-day', 25))
        self.assertIn(base.optim.lr, LR_GRID)
        mix = ExperimentConfig.from_sections({'experiment': {'task': 'mixture'}})
        self.assertEqual((mix.optim.epochs, mix.optim.batch_size, mix.preprocess.diff_lag, mix.split),
                         (60, 64, 0, 'mixture'))
        self.assertEqual(mix.objective, MixtureLossConfig())
        con = ExperimentConfig.from_sections({'experiment': {'task': 'base-contrastive'}})
        self.assertEqual((con.objective.temperature, con.objective.weight), (0.07, 1.0))
        self.assertEqual(base.model_config(6, 50).latent_dim, 256)

    def test_errors(self):
        cases = [({'optim': {'momentum': '0.9'}}, 'optim.momentum'),
                 ({'optim': {'epochs': 'abc'}}, 'optim.epochs'),
                 ({'objective': {'temperature': '0.1'}}, 'objective.temperature'),
                 ({'model': {'input_dim': '3'}}, 'model.input_dim'),
                 ({'model': {'family': 'gru'}}, 'model.family'),
                 ({'experiment': {'split': 'leave-one-day-out'}}, 'experiment.day'),
                 ({'training': {}}, 'training')]
        for sections, field in cases:
            with self.assertRaises(core.ConfigError) as cm:
                ExperimentConfig.from_sections(sections)
            self.assertEqual(cm.exception.field, field)

    def test_ini_round_trip(self):
        cfg = ExperimentConfig.loads(_SMALL.format(task='base-contrastive', root='/data', p=5))
        again = ExperimentConfig.loads(cfg.to_ini())
        self.assertEqual(again.to_ini(), cfg.to_ini())
        self.assertEqual(again.config_hash, cfg.config_hash)
        lr = cfg.with_overrides({'optim.lr': 3e-3})
        self.assertEqual(lr.optim.lr, 3e-3)
        self.assertNotEqual(lr.config_hash, cfg.config_hash)
        self.assertEqual(cfg.with_overrides({'experiment.task': 'base-classify'}).objective, None)
        self.assertEqual(ExperimentConfig.loads(cfg.to_ini(), {'model.pooling': 'max'}).model_config(6, 5).pooling, 'max')
        self.assertEqual(cfg.with_overrides({'preprocess.window': 50}).preprocess.stride, 25)
        self.assertEqual(cfg.with_overrides({'model.family': 'cnn'}).model_config(6, 5).dropout, 0.2)


class TestRun(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        root = pathlib.Path(cls.tmp.name)
        cls.base_root = root/'base'
        generate_synthetic(SyntheticConfig(num_classes=3, num_steps=80, seed=0), cls.base_root)
        cls.mix_root = root/'mixture'
        generate_synthetic(SyntheticConfig(flavor='mixture', num_classes=3, channels=4, sessions_per_class=2,
                                           num_steps=80, seen_recipes=3, unseen_recipes=2, seed=0), cls.mix_root)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def _config(self, task='base-classify', p=5, **overrides):
        root = self.mix_root if task == 'mixture' else self.base_root
        return ExperimentConfig.loads(_SMALL.format(task=task, root=root, p=p), overrides)

    def _out(self, name):
        return pathlib.Path(self.tmp.name)/'runs'/name

    def test_run_and_evaluate(self):
        cfg = self._config()
        a = run(cfg, self._out('a'))
        b = run(cfg, self._out('b'))
        for name in ('config.ini', 'manifest.json', 'stats.json', 'checkpoint.npz', 'trace.csv',
                     'steps.csv', 'test_report.json', 'test_report.tsv', 'test_confusion.csv',
                     'test_predictions.tsv', 'metrics.tsv'):
            self.assertTrue((a.run_dir/name).is_file(), name)
        self.assertEqual((a.run_dir/'test_report.json').read_bytes(), (b.run_dir/'test_report.json').read_bytes())
        self.assertEqual(len(a.trace), 2)
        evaluate(a.run_dir)
        for name in ('test_report.json', 'test_report.tsv', 'test_predictions.tsv'):
            self.assertEqual((a.run_dir/name).read_bytes(), (a.run_dir/'eval'/name).read_bytes(), name)
        manifest = json.loads((a.run_dir/'manifest.json').read_text())
        self.assertEqual(manifest['config_hash'], cfg.config_hash)
        self.assertEqual(manifest['stats_id'], json.loads((a.run_dir/'stats.json').read_text())['stats_id'])
        self.assertEqual(manifest['nosekit_version'], __version__)

    def test_contrastive(self):
        cfg = self._config('base-contrastive', **{'objective.inference': 'retrieval', 'model.gcms_hidden': '16'})
        result = run(cfg, self._out('contrastive'))
        self.assertTrue((result.run_dir/'gcms_embeddings.tsv').is_file())
        self.assertTrue(0 <= result.reports['test'].acc1 <= 1)
        evaluate(result.run_dir)
        self.assertEqual((result.run_dir/'test_report.json').read_bytes(),
                         (result.run_dir/'eval'/'test_report.json').read_bytes())

    def test_mixture(self):
        with self.assertLogs(level='WARNING') as cm:
            result = run(self._config('mixture', p=5), self._out('mixture'))
        self.assertTrue(any('raw windows' in m for m in cm.output))
        self.assertEqual(sorted(result.reports), ['test-seen', 'test-unseen'])
        self.assertTrue((result.run_dir/'test-unseen_report.json').is_file())

    def test_truncate(self):
        cfg = self._config()
        full = run(cfg, self._out('full'))
        same = run(cfg, self._out('trunc'), truncate=80 - 5)
        self.assertEqual(full.reports['test'].to_dict(), same.reports['test'].to_dict())
        with self.assertRaises(core.DataError):
            run(cfg, self._out('short'), truncate=10)

    def test_sweep(self):
        cfg = self._config()
        cells = sweep(cfg, {'preprocess.window': [20, 200]}, self._out('sweep'))
        self.assertEqual(len(cells), 2)
        self.assertEqual(cells['status'][0], 'ok')
        self.assertTrue(cells['status'][1].startswith('failed'))
        self.assertTrue((self._out('sweep')/'sweep_selected.tsv').is_file())
        with self.assertRaises(core.ConfigError):
            sweep(cfg, {}, self._out('empty'))
        with self.assertRaises(core.ConfigError):
            sweep(cfg, {'optim.lr': []}, self._out('empty'))

    def test_sweep_delta(self):
        cfg = self._config(**{'model.gcms_hidden': '16'})
        cells = sweep(cfg, {'experiment.task': ['base-classify', 'base-contrastive']}, self._out('delta'))
        self.assertEqual(list(cells['Objective']), ['sensor-only', 'cross-modal'])
        self.assertAlmostEqual(cells['ΔAcc@1'][1], cells['Acc@1'][1] - cells['Acc@1'][0])

    def test_lodo(self):
        folds, summary = lodo(self._config(), self._out('lodo'))
        self.assertEqual(list(folds.index), [1, 2, 3, 4, 5, 6])
        self.assertAlmostEqual(summary.loc['std', 'Acc@1'], np.std(folds['Acc@1'], ddof=1))
        self.assertTrue((self._out('lodo')/'lodo.tsv').is_file())


@unittest.skipUnless(os.environ.get('NOSEKIT_SLOW'), 'set NOSEKIT_SLOW=1 to run the acceptance runs')
class TestAcceptance(unittest.TestCase):
    """Desk-scale versions of the protocol, each takes minutes on one core."""
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _base(self, name, synthetic, **overrides):
        generate_synthetic(SyntheticConfig(**synthetic), self.root/name)
        sections = {'experiment': {'dataset': str(self.root/name), 'select': 'final'},
                    'preprocess': {'window': 50, 'diff_lag': 25},
                    'model': {'latent_dim': 32, 'num_layers': 2, 'num_heads': 4},
                    'optim': {'epochs': 30}}
        return ExperimentConfig.from_sections(_apply(sections, overrides))

    def test_separable(self):
        result = run(self._base('base', {}), self.root/'run')
        self.assertGreater(result.reports['test'].acc1, 0.9)

    def test_differencing(self):
        cfg = self._base('drift', {'day_shift_std': 300.0, 'drift_std': 1.0})
        with_diff = run(cfg, self.root/'p25').reports['test'].acc1
        without = run(cfg.with_overrides({'preprocess.diff_lag': 0}), self.root/'p0').reports['test'].acc1
        self.assertGreaterEqual(with_diff - without, 0.10)

    def test_lodo_shift(self):
        folds, summary = lodo(self._base('shift', {'shifted_day': 1}, **{'optim.epochs': 15}), self.root/'lodo')
        self.assertEqual(folds['Acc@1'].idxmin(), 1)
        self.assertEqual(len(folds), 6)

    def test_mixture(self):
        generate_synthetic(SyntheticConfig(flavor='mixture', num_classes=4, channels=4, sessions_per_class=3,
                                           drift_std=0.0, day_shift_std=0.0), self.root/'mix')
        cfg = ExperimentConfig.from_sections({
            'experiment': {'task': 'mixture', 'dataset': str(self.root/'mix'), 'select': 'final'},
            'preprocess': {'window': 50},
            'model': {'latent_dim': 32, 'num_layers': 2, 'num_heads': 4},
            'optim': {'epochs': 30, 'batch_size': 32}})
        rep = run(cfg, self.root/'run').reports['test-seen']
        self.assertLess(rep.mae, 0.05)
        self.assertGreater(rep.top1_at_0_1, 0.8)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
