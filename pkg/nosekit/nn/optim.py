from typing import Sequence

import numpy as np

from nosekit.nn.autograd import Parameter

__all__ = ['Adam']

class Adam:
    """Adam with bias correction.

    :param params: The parameters to update in place.
    :param lr: The learning rate, 0 leaves parameters unchanged.
    """
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        if lr < 0:
            raise ValueError(f'lr {lr} is negative')
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


import unittest

class TestAdam(unittest.TestCase):
    def test_quadratic(self):
        x = Parameter(np.array([3.0, -2.0]))
        opt = Adam([x], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            (x * x).sum().backward()
            opt.step()
        self.assertLess(np.abs(x.data).max(), 1e-2)

    def test_zero_lr(self):
        x = Parameter(np.array([1.0, 2.0]))
        opt = Adam([x], lr=0.0)
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
        self.assertEqual(x.data.tolist(), [1.0, 2.0])


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
