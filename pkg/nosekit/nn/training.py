import dataclasses
import logging
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from nosekit import core
from nosekit.nn.autograd import Tensor, no_grad
from nosekit.nn.losses import (ContrastiveConfig, MixtureLossConfig, cross_entropy, mixture_loss,
                               normalize_rows, symmetric_contrastive)
from nosekit.nn.models import SensorModel
from nosekit.nn.optim import Adam

__all__ = ['TrainConfig', 'ClassificationObjective', 'CrossModalObjective', 'MixtureObjective',
           'TrainResult', 'train', 'predict', 'retrieval_scores']

@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise core.ConfigError(f'{self.epochs} is not positive', 'optim.epochs')
        if self.batch_size < 1:
            raise core.ConfigError(f'{self.batch_size} is not positive', 'optim.batch_size')
        if self.lr < 0:
            raise core.ConfigError(f'{self.lr} is negative', 'optim.lr')


class ClassificationObjective:
    """Cross-entropy over class logits."""
    def __call__(self, model: SensorModel, x: np.ndarray, padding: np.ndarray,
                 y: np.ndarray) -> Tuple[Tensor, Dict[str, float]]:
        loss = cross_entropy(model.classify(x, padding), y)
        return loss, {'ce': loss.item()}

class CrossModalObjective:
    """CE + weight * symmetric contrastive between sensor embeddings and encoded GC-MS vectors.

    :param gcms: C x G GC-MS vectors in class index order.
    """
    def __init__(self, gcms: np.ndarray, config: ContrastiveConfig = ContrastiveConfig()) -> None:
        self.gcms = np.asarray(gcms, dtype=np.float64)
        self.config = config

    def __call__(self, model: SensorModel, x: np.ndarray, padding: np.ndarray,
                 y: np.ndarray) -> Tuple[Tensor, Dict[str, float]]:
        h = model.embed(x, padding)
        ce = cross_entropy(model.classifier(h), y)
        con = symmetric_contrastive(h, model.encode_gcms(self.gcms[y]), self.config.temperature)
        return ce + con * self.config.weight, {'ce': ce.item(), 'contrastive': con.item()}

class MixtureObjective:
    def __init__(self, config: MixtureLossConfig = MixtureLossConfig()) -> None:
        self.config = config

    def __call__(self, model: SensorModel, x: np.ndarray, padding: np.ndarray,
                 y: np.ndarray) -> Tuple[Tensor, Dict[str, float]]:
        presence, proportions = model.mixture_heads(x, padding)
        return mixture_loss(proportions, presence, y, self.config)

Objective = Callable[[SensorModel, np.ndarray, np.ndarray, np.ndarray], Tuple[Tensor, Dict[str, float]]]

@dataclasses.dataclass
class TrainResult:
    """Per-epoch mean losses and per-step loss breakdowns."""
    trace: pd.DataFrame
    steps: pd.DataFrame

def train(model: SensorModel, objective: Objective, X: np.ndarray, y: np.ndarray,
          config: TrainConfig = TrainConfig(), padding: Optional[np.ndarray] = None,
          progress: bool = False) -> TrainResult:
    """Train in place with Adam and return the loss trace.

    Batches are reshuffled every epoch from a generator seeded with
    ``config.seed``, so the same model, data and config give the same trace.

    :param X: N x T x d windows.
    :param y: N class indices or N x K target proportions.
    :param padding: N x T padding mask, None for full windows.
    :raise NumericError: on a non-finite loss, naming the epoch and step.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise core.DataError('no training window')
    if len(y) != len(X):
        raise ValueError(f'{len(X)} windows but {len(y)} targets')
    padding = np.zeros(X.shape[:2], dtype=bool) if padding is None else padding
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
    model.train()
    trace, steps = [], []
    for epoch in tqdm(range(1, config.epochs + 1), disable=not progress):
        order = rng.permutation(len(X))
        totals = []
        for step, s in enumerate(range(0, len(X), config.batch_size), start=1):
            idx = order[s:s + config.batch_size]
            loss, terms = objective(model, X[idx], padding[idx], y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise core.NumericError(f'loss is {value}', epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals.append(value)
            steps.append({'epoch': epoch, 'step': step, 'total': value, **terms})
        trace.append({'epoch': epoch, 'loss': float(np.mean(totals))})
        if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
            logging.info(f'Epoch {epoch}/{config.epochs}: loss {trace[-1]["loss"]:.4f}')
    model.eval()
    return TrainResult(pd.DataFrame(trace), pd.DataFrame(steps))

def predict(model: SensorModel, X: np.ndarray, what: str = 'logits', batch_size: int = 256,
            padding: Optional[np.ndarray] = None) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Run the model in evaluation mode.

    :param what: ``logits``, ``embed`` or ``mixture``, the last returns
        (presence logits, proportions).
    """
    if what not in ('logits', 'embed', 'mixture'):
        raise ValueError(f'unknown output {what}')
    X = np.asarray(X, dtype=np.float64)
    padding = np.zeros(X.shape[:2], dtype=bool) if padding is None else padding
    model.eval()
    outs = []
    with no_grad():
        for s in range(0, len(X), batch_size):
            xb, pb = X[s:s + batch_size], padding[s:s + batch_size]
            if what == 'logits':
                outs.append(model.classify(xb, pb).data)
            elif what == 'embed':
                outs.append(model.embed(xb, pb).data)
            else:
                u, z = model.mixture_heads(xb, pb)
                outs.append(np.concatenate([u.data, z.data], axis=1))
    out = np.concatenate(outs, axis=0)
    if what == 'mixture':
        k = out.shape[1] // 2
        return out[:, :k], out[:, k:]
    return out

def retrieval_scores(model: SensorModel, X: np.ndarray, gcms: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Cosine similarity of every window embedding to every encoded class GC-MS vector."""
    h = predict(model, X, 'embed', batch_size)
    with no_grad():
        zg = normalize_rows(model.encode_gcms(gcms)).data
    return normalize_rows(Tensor(h)).data @ zg.T


import unittest

from nosekit.nn.models import ModelConfig, build_model

def _toy(n=60, T=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    centers = np.array([[2.0, 0, 0], [0, 2.0, 0], [0, 0, 2.0]])
    X = centers[y][:, None, :] + rng.normal(0, 0.3, size=(n, T, 3))
    return X, y

class TestTraining(unittest.TestCase):
    def _model(self, seed=0, **kwargs):
        cfg = ModelConfig(input_dim=3, latent_dim=8, num_layers=1, num_heads=2, num_classes=3, **kwargs)
        return build_model(cfg, seed)

    def test_converge(self):
        X, y = _toy()
        model = self._model()
        result = train(model, ClassificationObjective(), X, y, TrainConfig(epochs=30, batch_size=16, lr=3e-3))
        self.assertLess(result.trace.loss.iloc[-1], 0.3 * result.trace.loss.iloc[0])
        acc = (predict(model, X).argmax(1) == y).mean()
        self.assertGreater(acc, 0.9)
        self.assertEqual(list(result.steps.columns), ['epoch', 'step', 'total', 'ce'])

    def test_determinism(self):
        X, y = _toy()
        a = train(self._model(), ClassificationObjective(), X, y, TrainConfig(epochs=2, batch_size=16))
        b = train(self._model(), ClassificationObjective(), X, y, TrainConfig(epochs=2, batch_size=16))
        self.assertTrue(a.steps.equals(b.steps))

    def test_zero_lr(self):
        X, y = _toy()
        model = self._model(dropout=0.0)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        result = train(model, ClassificationObjective(), X, y, TrainConfig(epochs=3, batch_size=20, lr=0.0))
        for k, v in model.state_dict().items():
            self.assertTrue(np.array_equal(v, before[k]), k)
        self.assertTrue(np.allclose(result.trace.loss, result.trace.loss.iloc[0], atol=1e-12))

    def test_nan(self):
        X, y = _toy()
        bad = lambda model, x, padding, y: (model.classify(x, padding).sum() * np.nan, {})
        with self.assertRaises(core.NumericError) as cm:
            train(self._model(), bad, X, y, TrainConfig(epochs=1))
        self.assertEqual((cm.exception.epoch, cm.exception.step), (1, 1))

    def test_cross_modal(self):
        X, y = _toy()
        gcms = np.random.default_rng(1).normal(size=(3, 10))
        model = self._model(gcms_dim=10, gcms_hidden=(12,))
        result = train(model, CrossModalObjective(gcms), X, y, TrainConfig(epochs=2, batch_size=16))
        self.assertIn('contrastive', result.steps.columns)
        scores = retrieval_scores(model, X, gcms)
        self.assertEqual(scores.shape, (60, 3))
        self.assertTrue(np.all(np.abs(scores) <= 1 + 1e-12))

    def test_mixture(self):
        X, _ = _toy()
        rng = np.random.default_rng(2)
        p = np.zeros((60, 12))
        p[:, :3] = rng.dirichlet(np.ones(3), size=60)
        model = self._model(head='mixture')
        result = train(model, MixtureObjective(), X, p, TrainConfig(epochs=2, batch_size=16))
        self.assertEqual(list(result.steps.columns), ['epoch', 'step', 'total', 'kl', 'hinge', 'focal'])
        u, z = predict(model, X, 'mixture')
        self.assertTrue(np.allclose(z.sum(1), 1))


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
