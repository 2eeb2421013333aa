"""Classification and mixture metrics.

Rankings break score ties by ascending class index everywhere, so metrics are
deterministic on degenerate outputs.
"""
import dataclasses
import json
import pathlib
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from nosekit import core
from nosekit.nn.losses import KL_CLAMP

__all__ = ['rank_classes', 'topk_accuracy', 'confusion_matrix', 'per_class_f1', 'macro_f1',
           'per_category_accuracy', 'mixture_mae', 'top1_at_threshold', 'dynamic_topk',
           'mixture_kl', 'mixture_cosine', 'ClassificationReport', 'MixtureReport', 'report',
           'write_report', 'write_predictions']

def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices per row from the highest score down, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f'expect B x C scores, got shape {scores.shape}')
    return np.argsort(-scores, axis=1, kind='stable')

def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError(f'{scores.shape} scores do not match {labels.shape} labels')
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f'k {k} is not in [1, {scores.shape[1]}]')
    if len(labels) == 0:
        raise ValueError('no example')
    top = rank_classes(scores)[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())

def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with true classes in rows and predicted classes in columns."""
    c = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(c, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return c

def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 per class, 0 where precision + recall is 0/0."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.size == 0:
        raise ValueError(f'expect a non-empty square confusion, got shape {c.shape}')
    if np.any(c < 0):
        raise ValueError('negative counts in confusion')
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1)
    # F1 = 2tp / (2tp + fp + fn) = 2tp / (predicted + support)
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)

def macro_f1(confusion: np.ndarray) -> float:
    """The unweighted mean of per-class F1 over every class of the confusion."""
    c = np.asarray(confusion)
    if c.size and c.sum() == 0:
        raise ValueError('empty confusion')
    return float(per_class_f1(c).mean())

def per_category_accuracy(predictions: np.ndarray, labels: np.ndarray,
                          registry: core.Registry) -> pd.Series:
    """Window-level accuracy per category, NaN for categories without a window."""
    predictions, labels = np.asarray(predictions, dtype=int), np.asarray(labels, dtype=int)
    cats = np.array([registry[int(i)].category for i in labels])
    correct = predictions == labels
    return pd.Series({c: float(correct[cats == c].mean()) if (cats == c).any() else np.nan
                      for c in core.CATEGORIES}, name='accuracy')

def _check_mixture(pred: np.ndarray, target: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f'predictions {pred.shape} do not match targets {target.shape}')
    if len(pred) == 0:
        raise ValueError('no example')
    return pred, target

def mixture_mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = _check_mixture(pred, target)
    return float(np.abs(pred - target).mean())

def top1_at_threshold(pred: np.ndarray, target: np.ndarray, thr: float = 0.1) -> float:
    """Share of examples whose every non-zero target component is predicted within thr."""
    pred, target = _check_mixture(pred, target)
    close = (np.abs(pred - target) <= thr + 1e-12) | (target <= 0)
    return float(close.all(axis=1).mean())

def dynamic_topk(pred: np.ndarray, target: np.ndarray) -> float:
    """Recall of present components within each example's top-P predictions, P its present count."""
    pred, target = _check_mixture(pred, target)
    present = target > 0
    counts = present.sum(axis=1)
    if np.any(counts == 0):
        raise core.InvalidTargetError('a mixture target has no present component')
    ranks = rank_classes(pred)
    hits = 0
    for n, k in enumerate(counts):
        hits += int(present[n, ranks[n, :k]].sum())
    return hits / int(counts.sum())

def mixture_kl(pred: np.ndarray, target: np.ndarray) -> float:
    """Batch mean of KL(target || prediction), predictions clamped as in the loss."""
    pred, target = _check_mixture(pred, target)
    present = target > 0
    log_t = np.log(np.where(present, target, 1.0))
    return float(((log_t - np.log(np.maximum(pred, KL_CLAMP))) * target).sum(axis=1).mean())

def mixture_cosine(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = _check_mixture(pred, target)
    num = (pred * target).sum(axis=1)
    den = np.linalg.norm(pred, axis=1) * np.linalg.norm(target, axis=1)
    return float(np.mean(np.divide(num, den, out=np.zeros_like(num), where=den > 0)))


@dataclasses.dataclass
class ClassificationReport:
    acc1: float
    acc5: float
    macro_f1: float
    per_class_f1: pd.Series
    per_category_acc: pd.Series
    confusion: np.ndarray
    num_examples: int

    def metrics(self) -> Dict[str, float]:
        return {'Acc@1': self.acc1, 'Acc@5': self.acc5, 'F1': self.macro_f1}

    def to_dict(self) -> Dict[str, Any]:
        return {'task': 'classification', 'num_examples': self.num_examples, **self.metrics(),
                'per_category_acc': {k: (None if np.isnan(v) else v) for k, v in self.per_category_acc.items()},
                'per_class_f1': self.per_class_f1.to_dict()}

@dataclasses.dataclass
class MixtureReport:
    mae: float
    top1_at_0_1: float
    dyn_topk: float
    kl: float
    cosine: float
    num_examples: int
    kl_direction: str = 'target||prediction'

    def metrics(self) -> Dict[str, float]:
        return {'MAE': self.mae, 'Top-1@0.1': self.top1_at_0_1, 'DynTopK': self.dyn_topk,
                'KL': self.kl, 'Cosine': self.cosine}

    def to_dict(self) -> Dict[str, Any]:
        return {'task': 'mixture', 'num_examples': self.num_examples, **self.metrics(),
                'kl_direction': self.kl_direction}

Report = Union[ClassificationReport, MixtureReport]

def report(predictions: np.ndarray, targets: np.ndarray, task: str,
           registry: Optional[core.Registry] = None) -> Report:
    """Compute every metric of a task.

    :param predictions: B x C class scores, or B x 12 predicted proportions.
    :param targets: B class indices, or B x 12 target proportions.
    :param task: ``classification`` or ``mixture``.
    :param registry: The label space of a classification task, its categories
        group the per-category accuracy.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets)
    if len(predictions) != len(targets):
        raise ValueError(f'{len(predictions)} predictions but {len(targets)} targets')
    if len(predictions) == 0:
        raise ValueError('no prediction to report')
    if task == 'mixture':
        return MixtureReport(mixture_mae(predictions, targets), top1_at_threshold(predictions, targets),
                             dynamic_topk(predictions, targets), mixture_kl(predictions, targets),
                             mixture_cosine(predictions, targets), len(predictions))
    if task != 'classification':
        raise ValueError(f'unknown task {task}')
    C = predictions.shape[1]
    registry = registry or core.default_registry()
    if len(registry) != C:
        raise ValueError(f'{C} scores per example but {len(registry)} classes in the registry')
    top1 = rank_classes(predictions)[:, 0]
    confusion = confusion_matrix(top1, targets, C)
    return ClassificationReport(
        topk_accuracy(predictions, targets, 1), topk_accuracy(predictions, targets, min(5, C)),
        macro_f1(confusion), pd.Series(per_class_f1(confusion), index=registry.names, name='f1'),
        per_category_accuracy(top1, targets, registry), confusion, len(predictions))

def write_report(rep: Report, out_dir: Union[str, pathlib.Path], prefix: str = '',
                 class_names: Sequence[str] = ()) -> List[pathlib.Path]:
    """Write ``<prefix>report.json``, ``<prefix>report.tsv`` and, for classification,
    ``<prefix>confusion.csv``. Returns the written paths."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir/f'{prefix}report.json', out_dir/f'{prefix}report.tsv']
    paths[0].write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + '\n')
    pd.DataFrame([rep.metrics()]).to_csv(paths[1], sep='\t', index=False,
                                         float_format='%.6f', lineterminator='\n')
    if isinstance(rep, ClassificationReport):
        names = list(class_names) or list(rep.per_class_f1.index)
        paths.append(out_dir/f'{prefix}confusion.csv')
        pd.DataFrame(rep.confusion, index=names, columns=names).to_csv(paths[-1], lineterminator='\n')
    return paths

def write_predictions(path: Union[str, pathlib.Path], window_ids: Sequence[str],
                      predictions: np.ndarray, columns: Sequence[str]) -> None:
    """One row per window: the window id then one column per class or odorant."""
    df = pd.DataFrame(np.asarray(predictions), columns=list(columns))
    df.insert(0, 'window_id', list(window_ids))
    df.to_csv(path, sep='\t', index=False, float_format='%.17g', lineterminator='\n')


import tempfile
import unittest

def _brute_topk(scores, labels, k):
    hits = 0
    for s, y in zip(scores, labels):
        order = sorted(range(len(s)), key=lambda c: (-s[c], c))
        hits += y in order[:k]
    return hits / len(labels)

class TestClassification(unittest.TestCase):
    def test_topk(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            B, C = rng.integers(1, 20), rng.integers(2, 8)
            # coarse scores make ties common
            scores = rng.integers(0, 3, size=(B, C)).astype(float)
            labels = rng.integers(0, C, size=B)
            for k in range(1, C + 1):
                self.assertAlmostEqual(topk_accuracy(scores, labels, k), _brute_topk(scores, labels, k))
            self.assertEqual(topk_accuracy(scores, labels, C), 1.0)
            self.assertLessEqual(topk_accuracy(scores, labels, 1), topk_accuracy(scores, labels, min(2, C)))
        self.assertEqual(topk_accuracy(np.eye(4), np.arange(4), 1), 1.0)
        with self.assertRaises(ValueError):
            topk_accuracy(np.eye(4), np.arange(4), 5)

    def test_ties(self):
        self.assertEqual(topk_accuracy(np.zeros((2, 3)), np.array([0, 1]), 1), 0.5)

    def test_macro_f1(self):
        self.assertEqual(macro_f1(np.eye(50, dtype=int)), 1.0)
        c = np.array([[8, 2], [3, 7]])
        f1 = per_class_f1(c)
        self.assertAlmostEqual(f1[0], 16 / 21)
        self.assertAlmostEqual(f1[1], 14 / 19)
        self.assertAlmostEqual(macro_f1(c), (16 / 21 + 14 / 19) / 2)
        self.assertAlmostEqual(macro_f1(np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]])), 2 / 3)
        with self.assertRaises(ValueError):
            macro_f1(np.zeros((3, 3), dtype=int))

    def test_macro_f1_brute(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            C = rng.integers(2, 6)
            y, p = rng.integers(0, C, 30), rng.integers(0, C, 30)
            f1s = []
            for c in range(C):
                tp = np.sum((p == c) & (y == c))
                fp = np.sum((p == c) & (y != c))
                fn = np.sum((p != c) & (y == c))
                prec = tp / (tp + fp) if tp + fp else 0.0
                rec = tp / (tp + fn) if tp + fn else 0.0
                f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
            self.assertAlmostEqual(macro_f1(confusion_matrix(p, y, C)), np.mean(f1s))

    def test_report(self):
        reg = core.default_registry()
        rng = np.random.default_rng(2)
        scores = rng.normal(size=(40, 50))
        labels = rng.integers(0, 50, 40)
        rep = report(scores, labels, 'classification', reg)
        self.assertEqual(rep.confusion.sum(axis=1).tolist(), np.bincount(labels, minlength=50).tolist())
        self.assertAlmostEqual(rep.acc1, np.trace(rep.confusion) / 40)
        self.assertEqual(list(rep.per_category_acc.index), list(core.CATEGORIES))
        perm = rng.permutation(40)
        self.assertEqual(report(scores[perm], labels[perm], 'classification', reg).to_dict(), rep.to_dict())
        with self.assertRaises(ValueError):
            report(scores[:0], labels[:0], 'classification', reg)
        with tempfile.TemporaryDirectory() as d:
            paths = write_report(rep, d)
            self.assertEqual([p.name for p in paths], ['report.json', 'report.tsv', 'confusion.csv'])
            self.assertEqual(json.loads(paths[0].read_text())['Acc@1'], rep.acc1)

class TestMixture(unittest.TestCase):
    def test_mae(self):
        t = np.eye(12)[:3]
        self.assertEqual(mixture_mae(t, t), 0.0)
        self.assertAlmostEqual(mixture_mae(np.full((1, 12), 1 / 12), t[:1]), 22 / 144)

    def test_threshold(self):
        t = np.zeros((1, 12))
        t[0, :2] = 0.5
        p = np.zeros((1, 12))
        p[0, :2] = [0.42, 0.58]
        self.assertEqual(top1_at_threshold(p, t), 1.0)
        p[0, :2] = [0.35, 0.65]
        self.assertEqual(top1_at_threshold(p, t), 0.0)
        self.assertEqual(top1_at_threshold(t, t), 1.0)
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(12), size=30)
        t = rng.dirichlet(np.ones(12), size=30)
        vals = [top1_at_threshold(p, t, thr) for thr in np.linspace(0, 1, 11)]
        self.assertEqual(vals, sorted(vals))

    def test_dynamic_topk(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p = rng.dirichlet(np.ones(12), size=15)
            y = rng.integers(0, 12, 15)
            t = np.eye(12)[y]
            self.assertEqual(dynamic_topk(p, t), topk_accuracy(p, y, 1))
        t = np.zeros((2, 12))
        t[0, [1, 4]] = [0.3, 0.7]
        t[1, 2] = 1
        self.assertEqual(dynamic_topk(t, t), 1.0)
        p = np.zeros((2, 12))
        p[0, [1, 5]] = [0.6, 0.4]
        p[1, 2] = 1
        self.assertAlmostEqual(dynamic_topk(p, t), 2 / 3)

    def test_kl_cosine(self):
        rng = np.random.default_rng(4)
        p = rng.dirichlet(np.ones(12), size=5)
        self.assertLess(abs(mixture_kl(p, p)), 1e-12)
        self.assertLess(abs(mixture_cosine(p, p) - 1), 1e-12)
        self.assertAlmostEqual(mixture_kl(np.full((1, 12), 1 / 12), np.eye(12)[:1]), np.log(12), places=9)

    def test_report(self):
        rng = np.random.default_rng(5)
        t = np.zeros((10, 12))
        for i in range(10):
            idx = rng.choice(12, i % 3 + 1, replace=False)
            t[i, idx] = rng.dirichlet(np.ones(len(idx)))
        p = rng.dirichlet(np.ones(12), size=10)
        rep = report(p, t, 'mixture')
        self.assertEqual(list(rep.metrics()), ['MAE', 'Top-1@0.1', 'DynTopK', 'KL', 'Cosine'])
        self.assertGreaterEqual(rep.kl, 0)
        self.assertTrue(0 <= rep.dyn_topk <= 1)
        with tempfile.TemporaryDirectory() as d:
            self.assertEqual(len(write_report(rep, d, 'test-seen_')), 2)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
