"""Offline analysis: PCA loadings, channel correlation and ablations.

Tables are returned as pandas frames; nothing here plots.
"""
import dataclasses
import logging
import pathlib
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd

from nosekit import core, metrics
from nosekit.experiment import (ExperimentConfig, load_run, make_scorer, prepare, resolve_dataset, run,
                                stored_gcms)
from nosekit.nn import SensorModel, predict
from nosekit.sensor import SessionDataset

__all__ = ['PcaResult', 'pca', 'pca_by_group', 'loading_table', 'pearson_correlation',
           'correlation_table', 'channel_mask_ablation', 'channel_mask_table', 'ablate_run_channels',
           'timestamp_ablation']

# an eigenvalue below this share of the largest counts as zero
RANK_TOL = 1e-12

@dataclasses.dataclass
class PcaResult:
    """
    :ivar components: k x d orthonormal loadings, rows in descending variance order.
    :ivar explained_variance_ratio: The share of total variance per component.
    :ivar projected: N x k scores of the centered rows.
    """
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    projected: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return ((np.asarray(rows, dtype=np.float64) - self.mean) / self.scale) @ self.components.T

    def inverse_transform(self, scores: np.ndarray) -> np.ndarray:
        return np.asarray(scores) @ self.components * self.scale + self.mean

def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v

def _power_iteration(cov: np.ndarray, k: int, max_iter: int, tol: float):
    rng = np.random.default_rng(0)
    A = cov.copy()
    values, vectors = [], []
    for _ in range(k):
        v = rng.normal(size=A.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = A @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ A @ v)
        values.append(lam)
        vectors.append(v)
        A = A - lam * np.outer(v, v)
    return np.array(values), np.array(vectors)

def pca(rows: np.ndarray, k: int = 2, method: str = 'eigh', standardized: bool = False,
        max_iter: int = 100000, tol: float = 1e-13) -> PcaResult:
    """Principal axes of the centered sample covariance.

    The largest-magnitude entry of every loading vector is positive.

    :param rows: N x d readings, N > d >= k >= 1.
    :param method: ``eigh`` for a full eigendecomposition, ``power`` for power
        iteration with deflation.
    :param standardized: Scale every channel to unit std first.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f'expect N x d rows, got shape {X.shape}')
    N, d = X.shape
    if not N > d >= k >= 1:
        raise core.DataError(f'PCA needs N > d >= k >= 1, got N={N}, d={d}, k={k}')
    if method not in ('eigh', 'power'):
        raise ValueError(f'unknown method {method}')
    mean = X.mean(axis=0)
    scale = np.ones(d)
    if standardized:
        scale = X.std(axis=0)
        if np.any(scale == 0):
            raise core.FitError(f'channel #{int(np.argmin(scale))} is constant')
    Xc = (X - mean) / scale
    cov = Xc.T @ Xc / (N - 1)
    total = float(np.trace(cov))
    if total <= 0:
        raise core.FitError('all rows are identical')
    if method == 'eigh':
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1][:k]
        vals, vecs = vals[order], vecs[:, order].T
    else:
        vals, vecs = _power_iteration(cov, k, max_iter, tol)
    if vals[-1] <= RANK_TOL * vals[0]:
        raise core.FitError(f'the rows have fewer than {k} non-degenerate components')
    components = np.stack([_fix_sign(v) for v in vecs])
    return PcaResult(components, vals, vals / total, Xc @ components.T, mean, scale)

def pca_by_group(rows: np.ndarray, groups: Sequence[str], k: int = 2, **kwargs) -> Dict[str, PcaResult]:
    """One PCA per group label, e.g. per substance category."""
    rows, groups = np.asarray(rows), np.asarray(groups)
    return {g: pca(rows[groups == g], k, **kwargs) for g in sorted(set(groups.tolist()))}

def loading_table(result: PcaResult, features: Sequence[str]) -> pd.DataFrame:
    """Loadings on the first two components, sorted by their magnitude."""
    comps = result.components[:2]
    df = pd.DataFrame({'Feature': list(features)})
    for i, c in enumerate(comps):
        df[f'PC{i + 1}'] = c
    df['Magnitude'] = np.sqrt((comps ** 2).sum(axis=0))
    return df.sort_values('Magnitude', ascending=False, kind='stable').reset_index(drop=True)

def pearson_correlation(rows: np.ndarray, channels: Sequence[str] = ()) -> np.ndarray:
    """The d x d Pearson correlation matrix of the columns."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise core.DataError(f'expect at least 2 rows of readings, got shape {X.shape}')
    std = X.std(axis=0)
    if np.any(std == 0):
        j = int(np.argmin(std))
        raise core.FitError(f'channel {channels[j] if len(channels) > j else f"#{j}"} is constant')
    Z = (X - X.mean(axis=0)) / std
    r = np.clip(Z.T @ Z / X.shape[0], -1.0, 1.0)
    r = (r + r.T) / 2
    np.fill_diagonal(r, 1.0)
    return r

def correlation_table(rows: np.ndarray, channels: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame(pearson_correlation(rows, channels), index=list(channels), columns=list(channels))

Scorer = Callable[[np.ndarray], np.ndarray]

def _accuracy(scorer: Scorer, X: np.ndarray, y: np.ndarray) -> float:
    return metrics.topk_accuracy(scorer(X), y, 1)

def channel_mask_ablation(model: SensorModel, X: np.ndarray, y: np.ndarray,
                          channel: Union[int, Sequence[int]], scorer: Optional[Scorer] = None) -> float:
    """Acc@1 with the channels set to 0, the training mean in standardized space,
    minus the unmasked Acc@1. The model is only evaluated.

    :param X: Standardized B x w x d windows.
    :param scorer: Maps windows to class scores, defaults to the classification head.
    """
    X = np.asarray(X, dtype=np.float64)
    channels = [channel] if np.isscalar(channel) else list(channel)
    for c in channels:
        if not 0 <= c < X.shape[2]:
            raise ValueError(f'channel {c} is not in [0, {X.shape[2]})')
    scorer = scorer or (lambda x: predict(model, x, 'logits'))
    masked = X.copy()
    masked[:, :, channels] = 0.0
    return _accuracy(scorer, masked, y) - _accuracy(scorer, X, y)

def channel_mask_table(model: SensorModel, X: np.ndarray, y: np.ndarray, channels: Sequence[str],
                       scorer: Optional[Scorer] = None) -> pd.DataFrame:
    """One row per masked channel sorted by the size of the accuracy drop,
    after a first row for the unmasked baseline."""
    scorer = scorer or (lambda x: predict(model, x, 'logits'))
    baseline = _accuracy(scorer, X, y)
    rows = []
    for c, name in enumerate(channels):
        delta = channel_mask_ablation(model, X, y, c, scorer)
        rows.append({'Masked channel': name, 'Acc@1': baseline + delta, 'ΔAcc@1': delta})
    table = pd.DataFrame(rows)
    table = table.iloc[np.argsort(-table['ΔAcc@1'].abs().values, kind='stable')]
    head = pd.DataFrame([{'Masked channel': 'none', 'Acc@1': baseline, 'ΔAcc@1': 0.0}])
    return pd.concat([head, table], ignore_index=True)

def ablate_run_channels(run_dir: Union[str, pathlib.Path], split: str = 'test',
                        dataset: Optional[SessionDataset] = None,
                        out_path: Optional[Union[str, pathlib.Path]] = None) -> pd.DataFrame:
    """The channel mask table of a stored classification run, on the windows of one split."""
    run_dir = pathlib.Path(run_dir)
    config, model, stats, manifest = load_run(run_dir)
    if config.task == 'mixture':
        raise core.ConfigError('channel masking needs a classification run', 'experiment.task')
    dataset = dataset or resolve_dataset(config)
    data = prepare(config, dataset, manifest.get('truncate'), stats)
    if split not in data.splits:
        raise core.SplitError(f'the run has no {split} split, only {sorted(data.splits)}')
    X, y, _ = data.splits[split]
    scorer = make_scorer(model, config, stored_gcms(config, dataset, run_dir))
    table = channel_mask_table(model, X, y, dataset.schema.channels, scorer)
    out_path = pathlib.Path(out_path) if out_path else run_dir/f'{split}_channel_mask.tsv'
    table.to_csv(out_path, sep='\t', index=False, float_format='%.6f', lineterminator='\n')
    return table

def timestamp_ablation(config: ExperimentConfig, steps: Sequence[int],
                       out_dir: Optional[Union[str, pathlib.Path]] = None,
                       dataset: Optional[SessionDataset] = None, progress: bool = False) -> pd.DataFrame:
    """Train and evaluate with every session cut to its first n differenced steps.

    :param steps: The truncation lengths, each at least the window size.
    :return: One row per length with the test Acc@1, Acc@5 and F1.
    """
    if config.task == 'mixture':
        raise core.ConfigError('the timestamp ablation needs a base task', 'experiment.task')
    if not steps:
        raise core.ConfigError('no truncation length given')
    short = [n for n in steps if n < config.preprocess.window]
    if short:
        raise core.DataError(f'truncation lengths {short} are below the window size {config.preprocess.window}')
    out_dir = pathlib.Path(out_dir or core.output_root()/'ablations'/f'steps-{config.config_hash}')
    rows = []
    for n in steps:
        result = run(config, out_dir/f'steps-{n}', dataset, truncate=n, progress=progress)
        rows.append({'Steps': n, **result.reports['test'].metrics()})
        logging.info(f'First {n} steps: Acc@1 {rows[-1]["Acc@1"]:.4f}')
    table = pd.DataFrame(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir/'timestamps.tsv', sep='\t', index=False, float_format='%.6f', lineterminator='\n')
    return table


import os
import tempfile
import unittest

from nosekit.nn import ModelConfig, build_model
from nosekit.sensor import SyntheticConfig, generate_synthetic

class TestPca(unittest.TestCase):
    def test_line(self):
        t = np.linspace(-1, 1, 50)
        res = pca(np.stack([t, t], axis=1), 1)
        self.assertTrue(np.allclose(res.components[0], np.ones(2) / np.sqrt(2)))
        self.assertAlmostEqual(res.explained_variance_ratio[0], 1.0)
        with self.assertRaises(core.FitError):
            pca(np.stack([t, t], axis=1), 2)

    def test_isotropic(self):
        rows = np.random.default_rng(0).normal(size=(100000, 4))
        res = pca(rows, 4)
        self.assertTrue(np.allclose(res.explained_variance_ratio, 0.25, atol=0.05))

    def test_power_matches_eigh(self):
        rows = np.random.default_rng(1).normal(size=(500, 6)) * np.array([6, 5, 4, 3, 2, 1])
        a, b = pca(rows, 6), pca(rows, 6, method='power')
        self.assertLess(np.abs(a.components - b.components).max(), 1e-8)
        self.assertTrue(np.allclose(a.explained_variance, b.explained_variance, rtol=1e-8))

    def test_properties(self):
        rows = np.random.default_rng(2).normal(size=(200, 5)) @ np.random.default_rng(3).normal(size=(5, 5))
        res = pca(rows, 5)
        self.assertTrue(np.allclose(res.components @ res.components.T, np.eye(5), atol=1e-9))
        self.assertTrue(np.all(np.diff(res.explained_variance_ratio) <= 0))
        self.assertLessEqual(res.explained_variance_ratio.sum(), 1 + 1e-9)
        self.assertTrue(np.allclose(res.inverse_transform(res.projected), rows, atol=1e-9))
        centered = rows - rows.mean(axis=0)
        eig = np.linalg.eigvalsh(centered.T @ centered / (len(rows) - 1))[::-1]
        self.assertTrue(np.allclose(res.explained_variance_ratio, eig / eig.sum(), atol=1e-12))
        for c in res.components:
            self.assertGreater(c[np.argmax(np.abs(c))], 0)
        with self.assertRaises(core.DataError):
            pca(rows[:5], 2)

    def test_loading_table(self):
        rows = np.random.default_rng(4).normal(size=(300, 3)) * np.array([1, 5, 2])
        table = loading_table(pca(rows, 2), ['NO2', 'VOC', 'CO'])
        self.assertEqual(list(table.columns), ['Feature', 'PC1', 'PC2', 'Magnitude'])
        self.assertTrue(table['Magnitude'].is_monotonic_decreasing)
        groups = pca_by_group(np.concatenate([rows, rows * 2]), ['a'] * 300 + ['b'] * 300)
        self.assertEqual(sorted(groups), ['a', 'b'])

class TestCorrelation(unittest.TestCase):
    def test_values(self):
        x = np.random.default_rng(0).normal(size=1000)
        r = pearson_correlation(np.stack([x, -x, x * 3 + 1], axis=1))
        self.assertTrue(np.allclose(r, [[1, -1, 1], [-1, 1, -1], [1, -1, 1]]))
        self.assertTrue(np.array_equal(r, r.T))

    def test_independent(self):
        r = pearson_correlation(np.random.default_rng(1).normal(size=(100000, 3)))
        self.assertLess(np.abs(r - np.eye(3)).max(), 0.02)

    def test_constant(self):
        rows = np.ones((10, 2))
        rows[:, 0] = np.arange(10)
        with self.assertRaises(core.FitError) as cm:
            pearson_correlation(rows, ['NO2', 'CO'])
        self.assertIn('CO', str(cm.exception))

class TestAblation(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.y = np.arange(30) % 3
        self.X = np.eye(3)[self.y][:, None, :] * 2 + rng.normal(0, 0.1, size=(30, 6, 3))
        cfg = ModelConfig(input_dim=3, latent_dim=8, num_layers=1, num_heads=2, num_classes=3, dropout=0.0)
        self.model = build_model(cfg, 0).eval()

    def test_dead_channel(self):
        self.model.stem.weight.data[1] = 0
        self.assertEqual(channel_mask_ablation(self.model, self.X, self.y, 1), 0.0)

    def test_all_channels(self):
        base = channel_mask_ablation(self.model, self.X, self.y, [])
        self.assertEqual(base, 0.0)
        acc = metrics.topk_accuracy(predict(self.model, self.X), self.y, 1)
        delta = channel_mask_ablation(self.model, self.X, self.y, [0, 1, 2])
        self.assertAlmostEqual(acc + delta, 1 / 3)

    def test_parameters_untouched(self):
        before = {k: v.copy() for k, v in self.model.state_dict().items()}
        table = channel_mask_table(self.model, self.X, self.y, ['a', 'b', 'c'])
        for k, v in self.model.state_dict().items():
            self.assertTrue(np.array_equal(v, before[k]))
        self.assertEqual(table['Masked channel'][0], 'none')
        self.assertEqual(len(table), 4)
        self.assertTrue(table['ΔAcc@1'][1:].abs().is_monotonic_decreasing)
        with self.assertRaises(ValueError):
            channel_mask_ablation(self.model, self.X, self.y, 3)

class TestTimestamps(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _config(self, name, synthetic, epochs=1):
        generate_synthetic(SyntheticConfig(**synthetic), self.root/name)
        return ExperimentConfig.from_sections({
            'experiment': {'dataset': str(self.root/name)},
            'preprocess': {'window': 20, 'diff_lag': 5},
            'model': {'latent_dim': 8, 'num_layers': 1, 'num_heads': 2},
            'optim': {'epochs': epochs}})

    def test_identity_and_bounds(self):
        cfg = self._config('base', {'num_classes': 3, 'num_steps': 80, 'seed': 0})
        table = timestamp_ablation(cfg, [40, 75], self.root/'abl')
        self.assertEqual(list(table.columns), ['Steps', 'Acc@1', 'Acc@5', 'F1'])
        full = run(cfg, self.root/'full').reports['test'].metrics()
        self.assertEqual(table.iloc[1][['Acc@1', 'Acc@5', 'F1']].tolist(), list(full.values()))
        with self.assertRaises(core.DataError):
            timestamp_ablation(cfg, [10], self.root/'abl')

    @unittest.skipUnless(os.environ.get('NOSEKIT_SLOW'), 'set NOSEKIT_SLOW=1 to run the acceptance runs')
    def test_late_onset(self):
        cfg = ExperimentConfig.from_sections({
            'experiment': {'dataset': str(self.root/'onset')},
            'preprocess': {'window': 50, 'diff_lag': 25},
            'model': {'latent_dim': 32, 'num_layers': 2, 'num_heads': 4},
            'optim': {'epochs': 20}})
        generate_synthetic(SyntheticConfig(onset_step=300), self.root/'onset')
        table = timestamp_ablation(cfg, [100, 575], self.root/'abl')
        self.assertGreater(table['Acc@1'][1], table['Acc@1'][0] + 0.2)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
