"""Training objectives: cross-entropy, sensor / GC-MS contrastive alignment and the mixture loss."""
import dataclasses
from typing import Dict, Tuple

import numpy as np

from nosekit import core
from nosekit.nn.autograd import Tensor, tensor

__all__ = ['KL_CLAMP', 'ContrastiveConfig', 'MixtureLossConfig', 'cross_entropy',
           'normalize_rows', 'symmetric_contrastive', 'kl_divergence', 'tolerance_hinge',
           'focal_bce', 'mixture_loss']

KL_CLAMP = 1e-12

@dataclasses.dataclass(frozen=True)
class ContrastiveConfig:
    """
    :param temperature: tau, fixed.
    :param weight: lambda in CE + lambda * contrastive.
    :param kind: The GC-MS embedding kind, ``spec`` or ``atom``.
    :param inference: ``head`` classifies with the classification head,
        ``retrieval`` ranks classes by cosine similarity to their encoded GC-MS embeddings.
    """
    temperature: float = 0.07
    weight: float = 1.0
    kind: str = 'spec'
    inference: str = 'head'

    def __post_init__(self):
        if self.temperature <= 0:
            raise core.ConfigError(f'{self.temperature} is not positive', 'objective.temperature')
        if self.weight < 0:
            raise core.ConfigError(f'{self.weight} is negative', 'objective.weight')
        if self.kind not in ('spec', 'atom'):
            raise core.ConfigError(f'{self.kind} is not spec or atom', 'objective.kind')
        if self.inference not in ('head', 'retrieval'):
            raise core.ConfigError(f'{self.inference} is not head or retrieval', 'objective.inference')

@dataclasses.dataclass(frozen=True)
class MixtureLossConfig:
    """
    :param alpha: Weight of the tolerance hinge on present components.
    :param beta: Weight of the focal presence loss.
    :param epsilon: Tolerance of the hinge.
    :param focal_alpha: Focal weight of positive entries.
    :param focal_gamma: Focusing exponent.
    """
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = 0.02
    focal_alpha: float = 0.75
    focal_gamma: float = 2.0

    def __post_init__(self):
        def _fail(msg, key):
            raise core.ConfigError(msg, f'objective.{key}')
        if self.alpha < 0: _fail(f'{self.alpha} is negative', 'alpha')
        if self.beta < 0: _fail(f'{self.beta} is negative', 'beta')
        if not 0 <= self.epsilon < 1: _fail(f'{self.epsilon} is not in [0, 1)', 'epsilon')
        if not 0 < self.focal_alpha < 1: _fail(f'{self.focal_alpha} is not in (0, 1)', 'focal_alpha')
        if self.focal_gamma < 0: _fail(f'{self.focal_gamma} is negative', 'focal_gamma')


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """The mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=int)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f'expect {B} labels, got shape {labels.shape}')
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f'labels out of range [0, {C})')
    return -logits.log_softmax(axis=-1)[np.arange(B), labels].mean()

def normalize_rows(z: Tensor) -> Tensor:
    norm2 = (z.data ** 2).sum(axis=-1)
    if (norm2 == 0).any():
        raise ValueError(f'rows {np.flatnonzero(norm2 == 0).tolist()} have zero norm')
    return z / (z * z).sum(axis=-1, keepdims=True).sqrt()

def symmetric_contrastive(z_s: Tensor, z_g: Tensor, temperature: float = 0.07) -> Tensor:
    """-(1/N) sum over pairs of the row and column log-softmax of matched pairs.

    Similarities are cosine similarities divided by the temperature.
    """
    z_s, z_g = tensor(z_s), tensor(z_g)
    if z_s.shape != z_g.shape or z_s.ndim != 2:
        raise ValueError(f'expect two N x D batches, got {z_s.shape} and {z_g.shape}')
    if temperature <= 0:
        raise ValueError(f'temperature {temperature} is not positive')
    N = z_s.shape[0]
    s = normalize_rows(z_s) @ normalize_rows(z_g).transpose() / temperature
    i = np.arange(N)
    return -(s.log_softmax(axis=1)[i, i].sum() + s.log_softmax(axis=0)[i, i].sum()) / N

def kl_divergence(p: np.ndarray, p_hat: Tensor) -> Tensor:
    """The batch mean of sum_i p_i log(p_i / p_hat_i), with 0 log 0 = 0.

    :param p: B x K targets, constants.
    :param p_hat: B x K predictions, clamped to at least 1e-12.
    """
    p = np.asarray(p, dtype=np.float64)
    present = p > 0
    log_p = np.log(np.where(present, p, 1.0))
    terms = (log_p - p_hat.clamp_min(KL_CLAMP).log()) * p
    return terms.sum(axis=-1).mean()

def tolerance_hinge(p: np.ndarray, p_hat: Tensor, epsilon: float) -> Tensor:
    """The batch mean over examples of mean_{i present} max(|p_hat_i - p_i| - eps, 0)."""
    present = (np.asarray(p) > 0).astype(np.float64)
    count = present.sum(axis=-1)
    if (count == 0).any():
        raise core.InvalidTargetError('a mixture target has no present component')
    excess = ((p_hat - p).abs() - epsilon).relu() * present
    return (excess.sum(axis=-1) / count).mean()

def focal_bce(logits: Tensor, r: np.ndarray, alpha: float = 0.75, gamma: float = 2.0) -> Tensor:
    """The mean over entries of the focal-weighted binary cross-entropy.

    For q = sigmoid(s) an entry is -alpha (1-q)^gamma log q when r = 1 and
    -(1-alpha) q^gamma log(1-q) when r = 0.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != logits.shape:
        raise ValueError(f'targets {r.shape} do not match logits {logits.shape}')
    nll_pos = (-logits).softplus()
    nll_neg = logits.softplus()
    if gamma == 0:
        pos, neg = nll_pos, nll_neg
    else:
        pos = (-logits).sigmoid() ** gamma * nll_pos
        neg = logits.sigmoid() ** gamma * nll_neg
    return (pos * (alpha * r) + neg * ((1 - alpha) * (1 - r))).mean()

def mixture_loss(proportions: Tensor, presence_logits: Tensor, targets: np.ndarray,
                 config: MixtureLossConfig = MixtureLossConfig()) -> Tuple[Tensor, Dict[str, float]]:
    """KL + alpha * hinge + beta * focal.

    :param proportions: B x K predicted proportions on the simplex.
    :param presence_logits: B x K presence logits.
    :param targets: B x K target proportions.
    :return: The total and a breakdown with ``kl``, ``hinge`` and ``focal``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    kl = kl_divergence(targets, proportions)
    hinge = tolerance_hinge(targets, proportions, config.epsilon)
    focal = focal_bce(presence_logits, targets > 0, config.focal_alpha, config.focal_gamma)
    total = kl + hinge * config.alpha + focal * config.beta
    return total, {'kl': kl.item(), 'hinge': hinge.item(), 'focal': focal.item()}


import unittest

class TestLosses(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_cross_entropy(self):
        self.assertAlmostEqual(cross_entropy(Tensor(np.zeros((4, 50))), np.arange(4)).item(),
                               np.log(50), delta=1e-9)
        logits = np.zeros((2, 50))
        logits[[0, 1], [3, 7]] = 1000
        self.assertLess(cross_entropy(Tensor(logits), np.array([3, 7])).item(), 1e-12)
        x = self.rng.normal(size=(6, 5))
        y = self.rng.integers(0, 5, size=6)
        naive = -np.mean(np.log(np.exp(x[np.arange(6), y]) / np.exp(x).sum(1)))
        self.assertAlmostEqual(cross_entropy(Tensor(x), y).item(), naive, delta=1e-10)
        with self.assertRaises(ValueError):
            cross_entropy(Tensor(x), np.array([0, 1, 2, 3, 4, 5]))

    def test_contrastive(self):
        self.assertEqual(symmetric_contrastive(Tensor([[1.0, 2.0]]), Tensor([[-3.0, 0.5]])).item(), 0.0)
        eye = np.eye(2)
        self.assertAlmostEqual(symmetric_contrastive(Tensor(eye), Tensor(eye), 1.0).item(),
                               2 * (np.log(1 + np.e) - 1), delta=1e-12)
        a, b = self.rng.normal(size=(5, 4)), self.rng.normal(size=(5, 4))
        ab = symmetric_contrastive(Tensor(a), Tensor(b)).item()
        self.assertAlmostEqual(ab, symmetric_contrastive(Tensor(b), Tensor(a)).item(), delta=1e-12)
        self.assertAlmostEqual(ab, symmetric_contrastive(Tensor(3 * a), Tensor(0.5 * b)).item(), delta=1e-10)
        perm = self.rng.permutation(5)
        self.assertAlmostEqual(ab, symmetric_contrastive(Tensor(a[perm]), Tensor(b[perm])).item(), delta=1e-10)
        with self.assertRaises(ValueError):
            symmetric_contrastive(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))

    def test_kl(self):
        p = self.rng.dirichlet(np.ones(12), size=3)
        self.assertAlmostEqual(kl_divergence(p, Tensor(p)).item(), 0.0, delta=1e-12)
        one_hot = np.eye(12)[:1]
        self.assertAlmostEqual(kl_divergence(one_hot, Tensor(np.full((1, 12), 1 / 12))).item(),
                               np.log(12), delta=1e-9)
        q = self.rng.dirichlet(np.ones(12), size=1000)
        r = self.rng.dirichlet(np.ones(12), size=1000)
        for i in range(0, 1000, 100):
            self.assertGreaterEqual(kl_divergence(q[i:i+1], Tensor(r[i:i+1])).item(), 0)

    def test_hinge(self):
        p = np.zeros((1, 12))
        p[0, 0] = 1.0
        p_hat = p.copy()
        p_hat[0, 0], p_hat[0, 1] = 0.95, 0.05
        self.assertEqual(tolerance_hinge(p, Tensor(p_hat), 0.1).item(), 0.0)
        self.assertAlmostEqual(tolerance_hinge(p, Tensor(p_hat), 0.02).item(), 0.03)

    def test_focal(self):
        s = self.rng.normal(size=(4, 12))
        r = (self.rng.random((4, 12)) > 0.5).astype(float)
        q = 1 / (1 + np.exp(-s))
        bce = -np.mean(r * np.log(q) + (1 - r) * np.log(1 - q))
        self.assertAlmostEqual(focal_bce(Tensor(s), r, 0.5, 0.0).item(), 0.5 * bce, delta=1e-10)
        naive = -np.mean(0.75 * (1 - q) ** 2 * np.log(q) * r + 0.25 * q ** 2 * np.log(1 - q) * (1 - r))
        self.assertAlmostEqual(focal_bce(Tensor(s), r).item(), naive, delta=1e-10)
        sat = np.where(r > 0, 30.0, -30.0)
        self.assertLess(focal_bce(Tensor(sat), r).item(), 1e-9)

    def test_mixture_loss(self):
        p = np.zeros((2, 12))
        p[0, :2] = 0.5
        p[1, 3] = 1.0
        z = Tensor(self.rng.dirichlet(np.ones(12), size=2))
        s = Tensor(self.rng.normal(size=(2, 12)))
        cfg = MixtureLossConfig()
        total, terms = mixture_loss(z, s, p, cfg)
        self.assertAlmostEqual(total.item(), terms['kl'] + terms['hinge'] + terms['focal'], delta=1e-12)
        self.assertGreaterEqual(total.item(), 0)
        uniform = Tensor(np.full((1, 12), 1 / 12))
        total, terms = mixture_loss(uniform, Tensor(np.zeros((1, 12))), np.eye(12)[:1],
                                    MixtureLossConfig(alpha=0, beta=0))
        self.assertAlmostEqual(total.item(), np.log(12), delta=1e-9)
        with self.assertRaises(core.ConfigError):
            MixtureLossConfig(focal_alpha=1.0)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
