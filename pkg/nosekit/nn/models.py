"""Sensor encoders, their heads and the GC-MS encoder.

A :class:`SensorModel` maps a B x T x d window batch with a padding mask to an
embedding h of size D, then to class logits or to mixture presence logits and
proportions. All four families share this interface.
"""
import dataclasses
import json
import pathlib
from typing import Dict, Optional, Tuple, Union

import numpy as np

from nosekit import core
from nosekit.nn.autograd import Parameter, Tensor, concat, tensor
from nosekit.nn.layers import (GELU, LSTM, BatchNorm, Conv1d, Dropout, LayerNorm, Linear, Module,
                               Sequential, TransformerEncoderLayer, make_padding, masked_max_pool,
                               masked_mean_pool, positional_encoding)

__all__ = ['FAMILIES', 'POOLINGS', 'ModelConfig', 'SensorModel', 'GcmsEncoder', 'build_model',
           'save_checkpoint', 'load_checkpoint', 'CHECKPOINT_FORMAT']

FAMILIES = ('mlp', 'cnn', 'lstm', 'transformer')
POOLINGS = ('mean', 'cls', 'last', 'max')
HEADS = ('classify', 'mixture')
CHECKPOINT_FORMAT = 'nosekit-checkpoint'
CHECKPOINT_VERSION = 1

_DEFAULT_DROPOUT = {'mlp': 0.1, 'cnn': 0.2, 'lstm': 0.1, 'transformer': 0.1}
_FAMILY_POOLINGS = {'mlp': ('mean', 'max'), 'cnn': ('mean', 'max'), 'lstm': ('mean', 'last', 'max'),
                    'transformer': ('mean', 'cls', 'max')}

@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """The architecture of a sensor model.

    :param family: One of ``mlp``, ``cnn``, ``lstm``, ``transformer``.
    :param input_dim: Channels d of the input windows.
    :param latent_dim: The embedding size D of the transformer and LSTM.
    :param dropout: None takes the family default.
    :param pooling: How steps are pooled into h.
    :param head: ``classify`` gives ``num_classes`` logits, ``mixture`` gives
        presence logits and proportions over ``num_odorants``.
    :param gcms_dim: Input size of a GC-MS encoder, 0 for no encoder.
    """
    family: str = 'transformer'
    input_dim: int = 6
    latent_dim: int = 256
    num_layers: int = 4
    num_heads: int = 8
    ffn_mult: int = 4
    dropout: Optional[float] = None
    pooling: str = 'mean'
    use_positional: bool = True
    use_cls: bool = False
    cnn_channels: Tuple[int, ...] = (64, 128, 256)
    kernel_size: int = 5
    mlp_hidden: Tuple[int, ...] = (256, 256)
    bidirectional: bool = True
    head: str = 'classify'
    num_classes: int = 50
    num_odorants: int = core.NUM_ODORANTS
    gcms_dim: int = 0
    gcms_hidden: Tuple[int, ...] = (512, 256)
    gcms_dropout: float = 0.1
    gcms_layer_norm: bool = True
    gcms_l2: bool = False

    def __post_init__(self):
        for key in ('cnn_channels', 'mlp_hidden', 'gcms_hidden'):
            object.__setattr__(self, key, tuple(int(v) for v in getattr(self, key)))
        if self.dropout is None:
            object.__setattr__(self, 'dropout', _DEFAULT_DROPOUT.get(self.family, 0.1))
        def _fail(msg, key):
            raise core.ConfigError(msg, f'model.{key}')
        if self.family not in FAMILIES:
            _fail(f'{self.family} is not in {FAMILIES}', 'family')
        if self.pooling not in _FAMILY_POOLINGS[self.family]:
            _fail(f'{self.family} supports poolings {_FAMILY_POOLINGS[self.family]}, got {self.pooling}', 'pooling')
        if self.pooling == 'cls' and not self.use_cls:
            _fail('cls pooling needs use_cls', 'pooling')
        if self.head not in HEADS:
            _fail(f'{self.head} is not in {HEADS}', 'head')
        if not 0 <= self.dropout < 1:
            _fail(f'{self.dropout} is not in [0, 1)', 'dropout')
        for key in ('input_dim', 'latent_dim', 'num_layers', 'num_heads', 'num_classes', 'kernel_size'):
            if getattr(self, key) < 1:
                _fail(f'{getattr(self, key)} is not positive', key)
        if self.family == 'transformer' and self.latent_dim % self.num_heads:
            _fail(f'{self.latent_dim} is not divisible by {self.num_heads} heads', 'latent_dim')
        if self.family == 'lstm' and self.bidirectional and self.latent_dim % 2:
            _fail(f'a bidirectional LSTM needs an even latent_dim, got {self.latent_dim}', 'latent_dim')

    @property
    def embed_dim(self) -> int:
        if self.family == 'mlp':
            return self.mlp_hidden[-1]
        if self.family == 'cnn':
            return self.cnn_channels[-1]
        return self.latent_dim

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


class GcmsEncoder(Module):
    """An MLP from a GC-MS vector to the sensor embedding space."""
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, hidden=(512, 256),
                 dropout: float = 0.1, layer_norm: bool = True, l2: bool = False) -> None:
        super().__init__()
        layers = []
        d = in_dim
        for h in hidden:
            layers += [Linear(d, h, rng)] + ([LayerNorm(h)] if layer_norm else []) + [GELU(), Dropout(dropout, rng)]
            d = h
        layers.append(Linear(d, out_dim, rng))
        self.net = Sequential(*layers)
        self.l2 = l2

    def forward(self, g) -> Tensor:
        z = self.net(tensor(g))
        if self.l2:
            z = z / ((z * z).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
        return z


class SensorModel(Module):
    """A sensor encoder of any family with classification or mixture heads.

    :param config: The architecture.
    :param rng: Draws the initial weights and the dropout masks.
    """
    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        c = config
        D = c.embed_dim
        if c.family == 'transformer':
            self.stem = Linear(c.input_dim, D, rng)
            self.stem_norm = LayerNorm(D)
            self.cls = Parameter(rng.normal(0, 0.02, size=D)) if c.use_cls else None
            self.encoder = [TransformerEncoderLayer(D, c.num_heads, c.ffn_mult * D, rng, c.dropout)
                            for _ in range(c.num_layers)]
            self.norm = LayerNorm(D)
        elif c.family == 'cnn':
            chans = (c.input_dim,) + c.cnn_channels
            self.convs = [Conv1d(a, b, c.kernel_size, rng) for a, b in zip(chans[:-1], chans[1:])]
            self.bns = [BatchNorm(b) for b in c.cnn_channels]
            self.drop = Dropout(c.dropout, rng)
        elif c.family == 'mlp':
            dims = (c.input_dim,) + c.mlp_hidden
            self.mlp = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
            self.drop = Dropout(c.dropout, rng)
        else:
            self.lstm = LSTM(c.input_dim, D // 2 if c.bidirectional else D, rng, c.bidirectional)
            self.drop = Dropout(c.dropout, rng)
        if c.head == 'classify':
            self.classifier = Sequential(Linear(D, D // 2, rng), GELU(), Dropout(c.dropout, rng),
                                         Linear(D // 2, c.num_classes, rng))
        else:
            self.presence = Linear(D, c.num_odorants, rng)
            self.proportion = Linear(D, c.num_odorants, rng)
        self.gcms_encoder = GcmsEncoder(c.gcms_dim, D, rng, c.gcms_hidden, c.gcms_dropout,
                                        c.gcms_layer_norm, c.gcms_l2) if c.gcms_dim else None

    def _check(self, x: Tensor, padding: Optional[np.ndarray]) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.config.input_dim:
            raise ValueError(f'expect B x T x {self.config.input_dim} input, got {x.shape}')
        if x.shape[1] == 0:
            raise ValueError('windows have no step')
        if not np.isfinite(x.data).all():
            raise ValueError('input windows are not finite')
        if padding is None:
            return np.zeros(x.shape[:2], dtype=bool)
        padding = np.asarray(padding, dtype=bool)
        if padding.shape != x.shape[:2]:
            raise ValueError(f'padding {padding.shape} does not match input {x.shape}')
        if padding.all(axis=1).any():
            raise ValueError(f'examples {np.flatnonzero(padding.all(axis=1)).tolist()} have no valid step')
        return padding

    def _pool(self, h: Tensor, padding: np.ndarray) -> Tensor:
        if self.config.pooling == 'max':
            return masked_max_pool(h, padding)
        return masked_mean_pool(h, padding)

    def embed(self, x, padding: Optional[np.ndarray] = None) -> Tensor:
        """Return the B x D embeddings h of a window batch."""
        x = tensor(x)
        padding = self._check(x, padding)
        c = self.config
        zero_pad = (~padding).astype(np.float64)[:, :, None]
        if c.family == 'transformer':
            h = self.stem_norm(self.stem(x))
            if c.use_positional:
                h = h + positional_encoding(x.shape[1], c.latent_dim)
            if self.cls is not None:
                B = x.shape[0]
                h = concat([self.cls.reshape(1, 1, -1) + np.zeros((B, 1, c.latent_dim)), h], axis=1)
                padding = np.concatenate([np.zeros((B, 1), dtype=bool), padding], axis=1)
            for layer in self.encoder:
                h = layer(h, padding)
            h = self.norm(h)
            if c.pooling == 'cls':
                return h[:, 0, :]
            return self._pool(h, padding)
        if c.family == 'cnn':
            h = x
            for conv, bn in zip(self.convs, self.bns):
                h = self.drop(bn(conv(h * zero_pad), padding).relu())
            return self._pool(h, padding)
        if c.family == 'mlp':
            h = x
            for layer in self.mlp:
                h = self.drop(layer(h).relu())
            return self._pool(h, padding)
        out, last = self.lstm(x, padding)
        if c.pooling == 'last':
            return self.drop(last)
        return self.drop(self._pool(out, padding))

    def classify(self, x, padding: Optional[np.ndarray] = None) -> Tensor:
        if self.config.head != 'classify':
            raise core.ConfigError('the model has mixture heads', 'model.head')
        return self.classifier(self.embed(x, padding))

    def mixture_heads(self, x, padding: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Return presence logits and proportions on the simplex, both from one h."""
        if self.config.head != 'mixture':
            raise core.ConfigError('the model has a classification head', 'model.head')
        h = self.embed(x, padding)
        return self.presence(h), self.proportion(h).softmax(axis=-1)

    def encode_gcms(self, g) -> Tensor:
        if self.gcms_encoder is None:
            raise core.ConfigError('the model has no GC-MS encoder', 'model.gcms_dim')
        return self.gcms_encoder(g)

    def forward(self, x, padding: Optional[np.ndarray] = None):
        if self.config.head == 'classify':
            return self.classify(x, padding)
        return self.mixture_heads(x, padding)

def build_model(config: ModelConfig, seed: int = 42) -> SensorModel:
    return SensorModel(config, np.random.default_rng(seed))

def save_checkpoint(model: SensorModel, path: Union[str, pathlib.Path], extra: Optional[Dict] = None) -> None:
    """Save parameters and buffers as ``.npz`` with a JSON header."""
    header = {'format': CHECKPOINT_FORMAT, 'version': CHECKPOINT_VERSION,
              'model': model.config.to_dict(), 'extra': extra or {}}
    arrays = model.state_dict()
    arrays['__header__'] = np.array(json.dumps(header, sort_keys=True))
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as f:
        np.savez(f, **arrays)

def load_checkpoint(path: Union[str, pathlib.Path]) -> Tuple[SensorModel, Dict]:
    """Load a model saved by :func:`save_checkpoint`, in evaluation mode."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise core.DataError(f'cannot read checkpoint {path}: {e}')
    if '__header__' not in arrays:
        raise core.DataError(f'{path} has no checkpoint header')
    header = json.loads(str(arrays.pop('__header__')))
    if header.get('format') != CHECKPOINT_FORMAT or header.get('version') != CHECKPOINT_VERSION:
        raise core.DataError(f'{path} is not a version {CHECKPOINT_VERSION} nosekit checkpoint')
    model = build_model(ModelConfig(**header['model']))
    model.load_state_dict(arrays)
    return model.eval(), header


import tempfile
import unittest

def _small(family: str, **kwargs) -> ModelConfig:
    return ModelConfig(family=family, input_dim=3, latent_dim=8, num_layers=2, num_heads=2,
                       cnn_channels=(4, 6), mlp_hidden=(5, 6), num_classes=5, **kwargs)

class TestModels(unittest.TestCase):
    def test_defaults(self):
        c = ModelConfig()
        self.assertEqual((c.num_heads, c.num_layers, c.ffn_mult, c.dropout, c.pooling),
                         (8, 4, 4, 0.1, 'mean'))
        self.assertTrue(c.use_positional)
        self.assertFalse(c.use_cls)
        self.assertEqual(ModelConfig(family='cnn').dropout, 0.2)
        self.assertEqual(ModelConfig(family='cnn').embed_dim, 256)
        self.assertEqual(ModelConfig(family='lstm').embed_dim, 256)
        with self.assertRaises(core.ConfigError):
            ModelConfig(family='gru')
        with self.assertRaises(core.ConfigError):
            ModelConfig(pooling='cls')
        with self.assertRaises(core.ConfigError):
            ModelConfig(family='lstm', pooling='cls')

    def test_shapes(self):
        x = np.random.default_rng(0).normal(size=(4, 10, 3))
        for family in FAMILIES:
            model = build_model(_small(family)).eval()
            logits = model.classify(x).data
            self.assertEqual(logits.shape, (4, 5))
            p = Tensor(logits).softmax(-1).data
            self.assertTrue(np.allclose(p.sum(-1), 1, atol=1e-6))

    def test_padding_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 8, 3))
        padding = make_padding([8, 5], 8)
        for family in FAMILIES:
            for pooling in _FAMILY_POOLINGS[family]:
                kwargs = {'use_cls': True} if pooling == 'cls' else {}
                model = build_model(_small(family, pooling=pooling, **kwargs)).eval()
                a = model.embed(x, padding).data
                x2 = x.copy()
                x2[1, 5:] = rng.normal(size=(3, 3)) * 50
                b = model.embed(x2, padding).data
                self.assertLess(np.abs(a - b).max(), 1e-9, f'{family}/{pooling}')

    def test_padding_vs_truncation(self):
        x = np.random.default_rng(2).normal(size=(1, 6, 3))
        padded = np.concatenate([x, np.zeros((1, 4, 3))], axis=1)
        for family in FAMILIES:
            model = build_model(_small(family)).eval()
            a = model.embed(padded, make_padding([6], 10)).data
            b = model.embed(x).data
            self.assertLess(np.abs(a - b).max(), 1e-9, family)

    def test_all_padding(self):
        model = build_model(_small('transformer'))
        with self.assertRaises(ValueError):
            model.embed(np.zeros((2, 4, 3)), make_padding([4, 0], 4))
        with self.assertRaises(ValueError):
            model.embed(np.zeros((2, 0, 3)))

    def test_determinism(self):
        x = np.random.default_rng(3).normal(size=(2, 6, 3))
        a = build_model(_small('transformer'), seed=7).eval().embed(x).data
        b = build_model(_small('transformer'), seed=7).eval().embed(x).data
        self.assertTrue(np.array_equal(a, b))

    def test_mixture_heads(self):
        model = build_model(_small('transformer', head='mixture')).eval()
        x = np.random.default_rng(4).normal(size=(3, 6, 3))
        u, z = model.mixture_heads(x)
        self.assertEqual(u.shape, (3, 12))
        self.assertTrue(np.allclose(z.data.sum(-1), 1, atol=1e-6))
        model.proportion.weight.data[...] = 0
        model.proportion.bias.data[...] = 0
        _, z = model.mixture_heads(x)
        self.assertTrue(np.allclose(z.data, 1 / 12))
        with self.assertRaises(core.ConfigError):
            model.classify(x)

    def test_gcms_encoder(self):
        model = build_model(_small('cnn', gcms_dim=20, gcms_hidden=(16, 8)))
        z = model.encode_gcms(np.ones((5, 20)))
        self.assertEqual(z.shape, (5, 6))
        enc = GcmsEncoder(4, 3, np.random.default_rng(0), (8,), l2=True)
        z = enc(np.ones((2, 4))).data
        self.assertTrue(np.allclose(np.linalg.norm(z, axis=1), 1))

    def test_checkpoint(self):
        model = build_model(_small('cnn', gcms_dim=4, gcms_hidden=(8,)))
        x = np.random.default_rng(5).normal(size=(2, 6, 3))
        model.classify(x)
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp)/'model.npz'
            save_checkpoint(model, path, {'stats_id': 'abc'})
            loaded, header = load_checkpoint(path)
            self.assertEqual(header['extra'], {'stats_id': 'abc'})
            self.assertEqual(loaded.config, model.config)
            self.assertTrue(np.array_equal(loaded.classify(x).data, model.eval().classify(x).data))
            (pathlib.Path(tmp)/'bad.npz').write_bytes(b'junk')
            with self.assertRaises(core.DataError):
                load_checkpoint(pathlib.Path(tmp)/'bad.npz')


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
