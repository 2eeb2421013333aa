"""A small reverse-mode automatic differentiation engine on numpy arrays.

Every :class:`Tensor` holds float64 data. Operations on tensors that require
gradients record a closure that maps the output gradient to the gradients of
the inputs. :meth:`Tensor.backward` visits the graph once in topological order.

Gradients of leaf tensors accumulate across backward calls: calling backward
twice on the same graph without :meth:`Tensor.zero_grad` doubles them.
Intermediate gradients never persist between calls.
"""
import contextvars
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = ['Tensor', 'Parameter', 'no_grad', 'is_grad_enabled', 'tensor', 'concat', 'stack',
           'conv1d', 'dropout']

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]

_grad_enabled = contextvars.ContextVar('grad_enabled', default=True)

class no_grad():
    """A context in which operations record no graph."""
    def __enter__(self):
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, ptype, value, trace):
        _grad_enabled.reset(self._token)

def is_grad_enabled() -> bool:
    return _grad_enabled.get()

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes that broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)

def _expand(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))

_GELU_C = np.sqrt(2 / np.pi)

class Tensor:
    """A float64 array that can record how it was computed.

    :param data: The values, copied into a float64 array.
    :param requires_grad: Whether gradients flow into this tensor.
    """
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = '') -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence['Tensor'], backward: Callable) -> 'Tensor':
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad, out.grad, out.name = False, None, ''
        out._parents, out._backward = (), None
        if _grad_enabled.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}{", requires_grad" if self.requires_grad else ""})'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Backpropagate from this scalar into every leaf that requires gradients."""
        if self.data.size != 1:
            raise ValueError(f'backward needs a scalar, got shape {self.shape}')
        if not self.requires_grad:
            return
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=np.float64), p.shape)
                grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg

    # arithmetic

    def __add__(self, other: ArrayLike) -> 'Tensor':
        other = tensor(other)
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self) -> 'Tensor':
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        other = tensor(other)
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return tensor(other) - self

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        other = tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        other = tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other: ArrayLike) -> 'Tensor':
        return tensor(other) / self

    def __pow__(self, exponent: float) -> 'Tensor':
        if isinstance(exponent, Tensor):
            raise TypeError('only constant exponents are supported')
        a = self.data
        return Tensor._make(a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: ArrayLike) -> 'Tensor':
        other = tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f'matmul needs at least 2-D operands, got {a.shape} and {b.shape}')
        return Tensor._make(a @ b, (self, other),
                            lambda g: (g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g))

    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        shape = self.shape
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,),
                            lambda g: (_expand(g, shape, axis, keepdims),))

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        n = self.data.size / np.asarray(self.data.sum(axis=axis)).size
        return self.sum(axis, keepdims) / n

    def max(self, axis=None, keepdims: bool = False) -> 'Tensor':
        """The maximum, ties share the gradient equally."""
        a = self.data
        out = a.max(axis=axis, keepdims=True)
        hit = (a == out).astype(np.float64)
        share = hit / hit.sum(axis=axis, keepdims=True)
        value = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
        return Tensor._make(value, (self,), lambda g: (share * _expand(g, a.shape, axis, keepdims),))

    # shapes

    def reshape(self, *shape) -> 'Tensor':
        old = self.shape
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> 'Tensor':
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> 'Tensor':
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx) -> 'Tensor':
        shape = self.shape
        def backward(g):
            z = np.zeros(shape)
            np.add.at(z, idx, g)
            return (z,)
        return Tensor._make(self.data[idx], (self,), backward)

    def masked_fill(self, mask: np.ndarray, value: float) -> 'Tensor':
        """Replace entries where mask is True by a constant, which gets no gradient."""
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), self.shape)
        return Tensor._make(np.where(mask, value, self.data), (self,), lambda g: (np.where(mask, 0.0, g),))

    # elementwise functions

    def exp(self) -> 'Tensor':
        e = np.exp(self.data)
        return Tensor._make(e, (self,), lambda g: (g * e,))

    def log(self) -> 'Tensor':
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> 'Tensor':
        r = np.sqrt(self.data)
        return Tensor._make(r, (self,), lambda g: (g / (2 * r),))

    def abs(self) -> 'Tensor':
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,))

    def clamp_min(self, lo: float) -> 'Tensor':
        keep = self.data >= lo
        return Tensor._make(np.maximum(self.data, lo), (self,), lambda g: (g * keep,))

    def relu(self) -> 'Tensor':
        keep = self.data > 0
        return Tensor._make(self.data * keep, (self,), lambda g: (g * keep,))

    def tanh(self) -> 'Tensor':
        t = np.tanh(self.data)
        return Tensor._make(t, (self,), lambda g: (g * (1 - t * t),))

    def sigmoid(self) -> 'Tensor':
        s = _stable_sigmoid(self.data)
        return Tensor._make(s, (self,), lambda g: (g * s * (1 - s),))

    def softplus(self) -> 'Tensor':
        """log(1 + exp(x)) without overflow."""
        a = self.data
        return Tensor._make(np.logaddexp(0, a), (self,), lambda g: (g * _stable_sigmoid(a),))

    def gelu(self) -> 'Tensor':
        """The tanh approximation of GELU."""
        a = self.data
        u = _GELU_C * (a + 0.044715 * a ** 3)
        t = np.tanh(u)
        du = _GELU_C * (1 + 3 * 0.044715 * a * a)
        return Tensor._make(0.5 * a * (1 + t), (self,),
                            lambda g: (g * (0.5 * (1 + t) + 0.5 * a * (1 - t * t) * du),))

    def softmax(self, axis: int = -1) -> 'Tensor':
        a = self.data
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)
        return Tensor._make(s, (self,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, axis: int = -1) -> 'Tensor':
        a = self.data
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        s = np.exp(out)
        return Tensor._make(out, (self,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


class Parameter(Tensor):
    """A trainable leaf tensor."""
    def __init__(self, data: ArrayLike, name: str = '') -> None:
        super().__init__(data, requires_grad=True, name=name)


def tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                        lambda g: tuple(np.split(g, sizes, axis=axis)))

def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors,
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Convolve along time.

    :param x: B x T x C_in.
    :param weight: K x C_in x C_out.
    :param padding: Zeros added on both sides of the time axis.
    :return: B x (T + 2*padding - K + 1) x C_out.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ValueError(f'conv1d shapes {x.shape} and {weight.shape} do not match')
    K = weight.shape[0]
    T = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    if xp.shape[1] < K:
        raise ValueError(f'{T} steps with padding {padding} are shorter than kernel {K}')
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)  # B x T' x C_in x K
    w = weight.data
    out = np.einsum('btck,kco->bto', win, w)
    def backward(g):
        gw = np.einsum('btck,bto->kco', win, g)
        gxp = np.zeros_like(xp)
        Tp = g.shape[1]
        for k in range(K):
            gxp[:, k:k + Tp, :] += g @ w[k].T
        return gxp[:, padding:padding + T, :], gw
    y = Tensor._make(out, (x, weight), backward)
    return y + bias if bias is not None else y

def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout, the identity when not training."""
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1 - p)
    return x * keep


import unittest

class TestAutograd(unittest.TestCase):
    def test_product_rule(self):
        x, y = Parameter(3.0), Parameter(-2.0)
        (x * y).backward()
        self.assertEqual(x.grad, -2.0)
        self.assertEqual(y.grad, 3.0)

    def test_broadcast(self):
        a = Parameter(np.ones((2, 3)))
        b = Parameter(np.arange(3.0))
        ((a * b) + b).sum().backward()
        self.assertEqual(a.grad.tolist(), [[0, 1, 2], [0, 1, 2]])
        self.assertEqual(b.grad.tolist(), [3, 3, 3])

    def test_accumulation(self):
        x = Parameter(np.array([1.0, 2.0]))
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        self.assertTrue(np.array_equal(x.grad, 2 * first))
        x.zero_grad()
        self.assertEqual(x.grad.tolist(), [0, 0])

    def test_shared_node(self):
        x = Parameter(2.0)
        y = x * x
        (y + y * 3).backward()
        self.assertEqual(x.grad, 16.0)

    def test_non_scalar(self):
        with self.assertRaises(ValueError):
            (Parameter(np.ones(3)) * 2).backward()

    def test_no_grad(self):
        x = Parameter(1.0)
        with no_grad():
            y = x * 2
            self.assertFalse(is_grad_enabled())
        self.assertFalse(y.requires_grad)
        self.assertTrue(is_grad_enabled())

    def test_getitem(self):
        x = Parameter(np.arange(4.0))
        x[np.array([0, 0, 3])].sum().backward()
        self.assertEqual(x.grad.tolist(), [2, 0, 0, 1])

    def test_softmax(self):
        x = Tensor(np.array([[1.0, 2.0, 1000.0], [0.0, 0.0, 0.0]]))
        s = x.softmax(-1).data
        self.assertTrue(np.allclose(s.sum(-1), 1, atol=1e-12))
        self.assertTrue(np.allclose(np.exp(x.log_softmax(-1).data), s))
        self.assertAlmostEqual(s[1, 0], 1 / 3)

    def test_conv1d(self):
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(2, 7, 3)), rng.normal(size=(5, 3, 4))
        y = conv1d(Tensor(x), Tensor(w), padding=2).data
        self.assertEqual(y.shape, (2, 7, 4))
        xp = np.pad(x, ((0, 0), (2, 2), (0, 0)))
        naive = sum(xp[:, k:k + 7, :] @ w[k] for k in range(5))
        self.assertTrue(np.allclose(y, naive))

    def test_dropout(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((100, 100)))
        self.assertIs(dropout(x, 0.5, rng, training=False), x)
        y = dropout(x, 0.5, rng).data
        self.assertTrue(set(np.unique(y)) <= {0.0, 2.0})
        self.assertAlmostEqual(y.mean(), 1.0, delta=0.05)


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
