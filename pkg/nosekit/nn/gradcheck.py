"""Central finite-difference checks of analytic gradients."""
from typing import Callable, Dict, Sequence

import numpy as np

from nosekit.nn.autograd import Parameter, Tensor

__all__ = ['numeric_grad', 'relative_error', 'gradcheck']

def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn / d x by central differences, perturbing x.data in place."""
    g = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn().item()
        flat[i] = old - eps
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Parameter], eps: float = 1e-5) -> Dict[str, float]:
    """Compare backward against finite differences for every input.

    :param fn: Recomputes a scalar loss from the current input values.
        It must be deterministic, so dropout has to be off.
    :return: The relative error per input, keyed by name or position.
    """
    for p in inputs:
        p.grad = None
    fn().backward()
    errors = {}
    for i, p in enumerate(inputs):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[p.name or str(i)] = relative_error(analytic, numeric_grad(fn, p, eps))
    return errors


import unittest

from nosekit.nn import layers, losses, models
from nosekit.nn.autograd import concat, conv1d, stack

class TestGradcheck(unittest.TestCase):
    TOL = 1e-3

    def _check(self, fn, inputs):
        errors = gradcheck(fn, inputs)
        self.assertLess(max(errors.values()), self.TOL, errors)

    def test_ops(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            a = Parameter(rng.normal(size=(3, 4)), 'a')
            b = Parameter(rng.normal(size=(4, 2)), 'b')
            c = Parameter(rng.uniform(0.5, 2, size=(3, 1)), 'c')
            self._check(lambda: ((a @ b).tanh() * c).sum(), [a, b, c])
            self._check(lambda: (a.gelu() / c + a.sigmoid()).mean(), [a, c])
            self._check(lambda: (a.softmax(-1) * a).sum() + a.log_softmax(0)[0].sum(), [a])
            self._check(lambda: (a.softplus() + c.log() + c.sqrt()).max(axis=1).sum(), [a, c])
            self._check(lambda: concat([a, a * 2], 1).sum() + stack([a, a], 0).transpose(1, 0, 2).reshape(-1)[:5].sum(), [a])

    def test_conv1d(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = Parameter(rng.normal(size=(2, 6, 3)), 'x')
            w = Parameter(rng.normal(size=(5, 3, 4)), 'w')
            b = Parameter(rng.normal(size=4), 'b')
            self._check(lambda: (conv1d(x, w, b, 2) ** 2).sum(), [x, w, b])

    def test_layers(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = Parameter(rng.normal(size=(2, 5, 4)), 'x')
            padding = layers.make_padding([5, 3], 5)
            lin = layers.Linear(4, 3, rng)
            self._check(lambda: (lin(x) ** 2).sum(), [x, lin.weight, lin.bias])
            ln = layers.LayerNorm(4)
            ln.gamma.data = rng.normal(size=4)
            self._check(lambda: (ln(x) * x).sum(), [x, ln.gamma, ln.beta])
            bn = layers.BatchNorm(4)
            self._check(lambda: (bn(x, padding) ** 3).sum(), [x, bn.gamma])
            attn = layers.MultiHeadAttention(4, 2, rng)
            self._check(lambda: (attn(x, padding) ** 2).sum(), [x, attn.q.weight, attn.v.weight])
            lstm = layers.LSTM(4, 3, rng)
            self._check(lambda: (lstm(x, padding)[0] ** 2).sum(),
                        [x, lstm.cells[0].w_x, lstm.cells[1].w_h, lstm.cells[0].bias])

    def test_models(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 6, 3))
        padding = layers.make_padding([6, 4], 6)
        y = np.array([1, 3])
        for family in models.FAMILIES:
            cfg = models.ModelConfig(family=family, input_dim=3, latent_dim=4, num_layers=1, num_heads=2,
                                     cnn_channels=(3, 4), mlp_hidden=(4, 4), num_classes=5, dropout=0.0)
            model = models.build_model(cfg, seed=1)
            params = model.parameters()
            picked = [params[0], params[len(params) // 2], params[-1]]
            self._check(lambda: losses.cross_entropy(model.classify(x, padding), y), picked)

    def test_objectives(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            zs = Parameter(rng.normal(size=(4, 3)), 'zs')
            zg = Parameter(rng.normal(size=(4, 3)), 'zg')
            self._check(lambda: losses.symmetric_contrastive(zs, zg, 0.5), [zs, zg])
            logits = Parameter(rng.normal(size=(4, 12)), 'logits')
            presence = Parameter(rng.normal(size=(4, 12)), 'presence')
            p = np.zeros((4, 12))
            for i in range(4):
                idx = rng.choice(12, size=i % 3 + 1, replace=False)
                p[i, idx] = rng.dirichlet(np.ones(len(idx)))
            self._check(lambda: losses.focal_bce(presence, p > 0), [presence])
            self._check(lambda: losses.mixture_loss(logits.softmax(-1), presence, p)[0], [logits, presence])
            self._check(lambda: losses.cross_entropy(logits, np.array([0, 3, 5, 11])), [logits])


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
