"""Neural network layers on top of :mod:`nosekit.nn.autograd`.

Sequence layers take B x T x C tensors together with a boolean ``padding``
array of shape B x T in which True marks padding steps.
"""
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from nosekit.nn.autograd import Parameter, Tensor, concat, conv1d, dropout, stack, tensor

__all__ = ['Module', 'Sequential', 'Linear', 'LayerNorm', 'BatchNorm', 'Dropout', 'GELU',
           'Conv1d', 'LSTM', 'MultiHeadAttention', 'TransformerEncoderLayer',
           'make_padding', 'masked_mean_pool', 'masked_max_pool', 'positional_encoding',
           'POOL_EPS', 'NEG_INF']

POOL_EPS = 1e-6
NEG_INF = -1e30

class Module:
    """The base class of layers and models.

    Parameters, buffers and sub-modules are discovered from instance attributes
    in assignment order, including lists of modules.
    """
    def __init__(self) -> None:
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f'{name}.{i}', v

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(f'{prefix}{name}.')

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f'{prefix}{name}.')

    def modules(self) -> Iterator['Module']:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> 'Module':
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f'param/{n}': p.data.copy() for n, p in self.named_parameters()}
        state.update({f'buffer/{n}': b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = {f'param/{n}' for n in params} | {f'buffer/{n}' for n, _ in self.named_buffers()}
        if set(state) != expected:
            raise ValueError(f'state keys differ: missing {sorted(expected - set(state))}, '
                             f'unexpected {sorted(set(state) - expected)}')
        for n, p in params.items():
            if state[f'param/{n}'].shape != p.shape:
                raise ValueError(f'{n} has shape {p.shape}, state has {state[f"param/{n}"].shape}')
            p.data = np.array(state[f'param/{n}'], dtype=np.float64)
        for m_name, m in self._named_modules():
            for b in m._buffers:
                m._buffers[b] = np.array(state[f'buffer/{m_name}{b}'], dtype=np.float64)

    def _named_modules(self, prefix: str = '') -> Iterator[Tuple[str, 'Module']]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f'{prefix}{name}.')

class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)

class Linear(Module):
    """y = x W + b with W of shape in x out."""
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True) -> None:
        super().__init__()
        self.weight = Parameter(_kaiming_uniform(rng, in_features, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y

class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var + self.eps).sqrt() * self.gamma + self.beta

class BatchNorm(Module):
    """Batch normalization over the valid steps of B x T x C inputs.

    Running statistics are buffers and are used in evaluation mode.
    """
    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self._buffers['running_mean'] = np.zeros(dim)
        self._buffers['running_var'] = np.ones(dim)

    def forward(self, x: Tensor, padding: Optional[np.ndarray] = None) -> Tensor:
        if not self.training:
            mean = self._buffers['running_mean']
            var = self._buffers['running_var']
            return (x - mean) / np.sqrt(var + self.eps) * self.gamma + self.beta
        valid = np.ones(x.shape[:2]) if padding is None else (~padding).astype(np.float64)
        m = valid[:, :, None]
        n = valid.sum()
        mu = (x * m).sum(axis=(0, 1)) / n
        xc = x - mu
        var = (xc * xc * m).sum(axis=(0, 1)) / n
        unbiased = var.data * n / max(n - 1, 1)
        self._buffers['running_mean'] = (1 - self.momentum) * self._buffers['running_mean'] + self.momentum * mu.data
        self._buffers['running_var'] = (1 - self.momentum) * self._buffers['running_var'] + self.momentum * unbiased
        return xc / (var + self.eps).sqrt() * self.gamma + self.beta

class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.p, self.rng = p, rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)

class GELU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.gelu()

class Conv1d(Module):
    """A 1-D convolution over time with same padding k//2."""
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator) -> None:
        super().__init__()
        self.padding = kernel_size // 2
        self.weight = Parameter(_kaiming_uniform(rng, in_channels * kernel_size,
                                                 (kernel_size, in_channels, out_channels)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.padding)

class LSTM(Module):
    """A single-layer LSTM, optionally bidirectional.

    At padding steps the state is held and the output is zero, so a padded
    batch gives the same outputs at valid steps as each example alone.
    """
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 bidirectional: bool = True) -> None:
        super().__init__()
        self.hidden_size = hidden_size
        self.bidirectional = bidirectional
        self.cells = [LSTM._Cell(input_size, hidden_size, rng) for _ in range(2 if bidirectional else 1)]

    class _Cell(Module):
        def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator) -> None:
            super().__init__()
            bound = 1 / np.sqrt(hidden_size)
            self.w_x = Parameter(rng.uniform(-bound, bound, size=(input_size, 4 * hidden_size)))
            self.w_h = Parameter(rng.uniform(-bound, bound, size=(hidden_size, 4 * hidden_size)))
            b = np.zeros(4 * hidden_size)
            b[hidden_size:2 * hidden_size] = 1.0  # forget gate
            self.bias = Parameter(b)

        def forward(self, x_t: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
            H = h.shape[-1]
            z = x_t @ self.w_x + h @ self.w_h + self.bias
            i, f = z[:, :H].sigmoid(), z[:, H:2 * H].sigmoid()
            g, o = z[:, 2 * H:3 * H].tanh(), z[:, 3 * H:].sigmoid()
            c = f * c + i * g
            return o * c.tanh(), c

    def _run(self, cell: '_Cell', x: Tensor, valid: np.ndarray, reverse: bool) -> Tuple[List[Tensor], Tensor]:
        B, T, _ = x.shape
        h = Tensor(np.zeros((B, self.hidden_size)))
        c = Tensor(np.zeros((B, self.hidden_size)))
        outs: List[Optional[Tensor]] = [None] * T
        for t in (reversed(range(T)) if reverse else range(T)):
            m = valid[:, t:t + 1]
            h_new, c_new = cell(x[:, t, :], h, c)
            h = h_new * m + h * (1 - m)
            c = c_new * m + c * (1 - m)
            outs[t] = h_new * m
        return outs, h

    def forward(self, x: Tensor, padding: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Return the B x T x (2)H outputs and the B x (2)H final states."""
        valid = np.ones(x.shape[:2]) if padding is None else (~padding).astype(np.float64)
        fwd, h_f = self._run(self.cells[0], x, valid, False)
        if not self.bidirectional:
            return stack(fwd, axis=1), h_f
        bwd, h_b = self._run(self.cells[1], x, valid, True)
        return concat([stack(fwd, axis=1), stack(bwd, axis=1)], axis=-1), concat([h_f, h_b], axis=-1)

class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over H heads; padded keys get zero weight."""
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dropout: float = 0.0) -> None:
        super().__init__()
        if dim % num_heads:
            raise ValueError(f'dim {dim} is not divisible by {num_heads} heads')
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.drop = Dropout(dropout, rng)
        self.last_attention: Optional[np.ndarray] = None

    def _heads(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return x.reshape(B, T, self.num_heads, D // self.num_heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, padding: Optional[np.ndarray] = None) -> Tensor:
        B, T, D = x.shape
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        scores = q @ k.swapaxes(-1, -2) / np.sqrt(D // self.num_heads)
        if padding is not None:
            scores = scores + np.where(padding, NEG_INF, 0.0)[:, None, None, :]
        attn = scores.softmax(axis=-1)
        self.last_attention = attn.data
        y = self.drop(attn) @ v
        return self.out(y.transpose(0, 2, 1, 3).reshape(B, T, D))

class TransformerEncoderLayer(Module):
    """A pre-norm encoder layer: x + Attn(LN(x)), then x + FFN(LN(x))."""
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator,
                 dropout: float = 0.1) -> None:
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng, dropout)
        self.drop1 = Dropout(dropout, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = Sequential(Linear(dim, ffn_dim, rng), GELU(), Dropout(dropout, rng),
                              Linear(ffn_dim, dim, rng))
        self.drop2 = Dropout(dropout, rng)

    def forward(self, x: Tensor, padding: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.drop1(self.attn(self.norm1(x), padding))
        return x + self.drop2(self.ffn(self.norm2(x)))

def make_padding(lengths: Sequence[int], num_steps: int) -> np.ndarray:
    """The B x T padding mask, True at t >= length."""
    lengths = np.asarray(lengths)
    return np.arange(num_steps)[None, :] >= lengths[:, None]

def _check_valid(padding: np.ndarray) -> None:
    empty = np.flatnonzero(padding.all(axis=1))
    if len(empty):
        raise ValueError(f'examples {empty.tolist()} have no valid step')

def masked_mean_pool(hidden: Tensor, padding: Optional[np.ndarray] = None) -> Tensor:
    """sum_t m_t h_t / max(sum_t m_t, 1e-6) with m = not padding."""
    if padding is None:
        return hidden.mean(axis=1)
    if padding.shape != hidden.shape[:2]:
        raise ValueError(f'padding {padding.shape} does not match hidden {hidden.shape}')
    _check_valid(padding)
    m = (~padding).astype(np.float64)
    return (hidden * m[:, :, None]).sum(axis=1) / np.maximum(m.sum(axis=1), POOL_EPS)[:, None]

def masked_max_pool(hidden: Tensor, padding: Optional[np.ndarray] = None) -> Tensor:
    if padding is not None:
        _check_valid(padding)
        hidden = hidden.masked_fill(padding[:, :, None], NEG_INF)
    return hidden.max(axis=1)

def positional_encoding(num_steps: int, dim: int) -> np.ndarray:
    """Sinusoidal encodings, sin on even and cos on odd dimensions."""
    pos = np.arange(num_steps)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((num_steps, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[:dim // 2])
    return pe


import unittest

class TestLayers(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_parameters(self):
        layer = TransformerEncoderLayer(8, 2, 16, self.rng)
        names = [n for n, _ in layer.named_parameters()]
        self.assertIn('ffn.layers.0.weight', names)
        self.assertEqual(len(names), len(set(names)))
        bn = BatchNorm(4)
        self.assertEqual(sorted(bn.state_dict()), ['buffer/running_mean', 'buffer/running_var',
                                                   'param/beta', 'param/gamma'])

    def test_state_dict(self):
        a, b = Linear(3, 2, np.random.default_rng(1)), Linear(3, 2, np.random.default_rng(2))
        b.load_state_dict(a.state_dict())
        self.assertTrue(np.array_equal(a.weight.data, b.weight.data))
        with self.assertRaises(ValueError):
            b.load_state_dict({})

    def test_layer_norm(self):
        y = LayerNorm(5)(Tensor(self.rng.normal(3, 2, size=(4, 5)))).data
        self.assertTrue(np.allclose(y.mean(-1), 0))
        self.assertTrue(np.allclose(y.std(-1), 1, atol=1e-4))

    def test_attention_mask(self):
        attn = MultiHeadAttention(8, 2, self.rng)
        x = self.rng.normal(size=(2, 5, 8))
        padding = make_padding([5, 3], 5)
        y = attn(Tensor(x), padding).data
        w = attn.last_attention
        self.assertTrue(np.allclose(w.sum(-1), 1, atol=1e-6))
        self.assertTrue(np.all(w[1, :, :, 3:] == 0))
        x2 = x.copy()
        x2[1, 3:] = 100.0
        y2 = attn(Tensor(x2), padding).data
        self.assertLess(np.abs(y[1, :3] - y2[1, :3]).max(), 1e-9)

    def test_pre_norm_identity(self):
        layer = TransformerEncoderLayer(8, 2, 16, self.rng)
        for p in [layer.attn.out.weight, layer.attn.out.bias, layer.ffn.layers[-1].weight,
                  layer.ffn.layers[-1].bias]:
            p.data[...] = 0
        x = self.rng.normal(size=(2, 4, 8))
        self.assertTrue(np.array_equal(layer(Tensor(x)).data, x))

    def test_lstm_variable_length(self):
        lstm = LSTM(3, 4, self.rng)
        x = self.rng.normal(size=(2, 6, 3))
        out, h = lstm(Tensor(x), make_padding([6, 4], 6))
        alone, h_alone = lstm(Tensor(x[1:, :4]))
        self.assertLess(np.abs(out.data[1, :4] - alone.data[0]).max(), 1e-9)
        self.assertLess(np.abs(h.data[1] - h_alone.data[0]).max(), 1e-9)
        self.assertTrue(np.all(out.data[1, 4:] == 0))

    def test_pool(self):
        h = Tensor(self.rng.normal(size=(2, 4, 3)))
        self.assertTrue(np.allclose(masked_mean_pool(h).data, h.data.mean(1)))
        pooled = masked_mean_pool(h, make_padding([4, 1], 4)).data
        self.assertTrue(np.allclose(pooled[1], h.data[1, 0]))
        self.assertTrue(np.allclose(masked_max_pool(h, make_padding([4, 2], 4)).data[1],
                                    h.data[1, :2].max(0)))
        with self.assertRaises(ValueError):
            masked_mean_pool(h, make_padding([4, 0], 4))

    def test_batch_norm(self):
        bn = BatchNorm(3)
        x = self.rng.normal(5, 2, size=(4, 6, 3))
        y = bn(Tensor(x)).data
        self.assertTrue(np.allclose(y.reshape(-1, 3).mean(0), 0))
        self.assertFalse(np.allclose(bn._buffers['running_mean'], 0))
        bn.eval()
        self.assertEqual(bn(Tensor(x)).shape, x.shape)

    def test_positional(self):
        pe = positional_encoding(10, 6)
        self.assertEqual(pe.shape, (10, 6))
        self.assertTrue(np.allclose(pe[0], [0, 1, 0, 1, 0, 1]))


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
