"""Desk-scale networks with hand-written forward and backward passes.

Each network maps a batch to per-sample losses and back-propagates the summed
loss. The output gradients recorded in a LayerTape are therefore per-sample
gradients g_n = d(sum_n loss_n)/dy_n, and the gradient of the mean loss with
respect to a weight matrix is (1/N) sum_n g_n a_n^T.

Conventions
-----------
A weight matrix W has shape (R, C) = (outputs, inputs) and acts on row-vector
samples as y = a W^T. The N samples of a char-LM batch are its (sequence,
position) pairs flattened in row-major order.
"""

import abc
from collections.abc import Mapping
import dataclasses

import numpy as np
from scipy import special

from ..utils import errors
from . import config as config_lib
from . import constants as cs
from . import corpus

Batch = corpus.Batch
ModelConfig = config_lib.ModelConfig

_LAYER_NORM_EPS = 1e-5


@dataclasses.dataclass(frozen=True)
class LayerSpec:
  """Name, role and shape of one weight matrix."""

  name: str
  kind: cs.LayerKind
  shape: tuple[int, int]
  prunable: bool = True


@dataclasses.dataclass
class LayerTape:
  """Inputs and output gradients of one layer over N samples."""

  layer_name: str
  activations: np.ndarray
  out_grads: np.ndarray

  def __post_init__(self):
    if np.ndim(self.activations) != 2 or np.ndim(self.out_grads) != 2:
      raise errors.HarnessError(
          f'{self.layer_name}: tapes must be 2D, found'
          f' {np.shape(self.activations)} and {np.shape(self.out_grads)}.'
      )
    if self.activations.shape[0] != self.out_grads.shape[0]:
      raise errors.HarnessError(
          f'{self.layer_name}: {self.activations.shape[0]} activation rows but'
          f' {self.out_grads.shape[0]} gradient rows.'
      )

  @property
  def sample_count(self) -> int:
    return int(self.activations.shape[0])

  def weight_grad(self) -> np.ndarray:
    """(1/N) sum_n g_n a_n^T."""
    return self.out_grads.T @ self.activations / self.sample_count


def concat_tapes(tapes: list[LayerTape]) -> LayerTape:
  """Stacks the samples of several tapes of the same layer."""
  if not tapes:
    raise errors.HarnessError('Cannot concatenate an empty list of tapes.')
  names = {t.layer_name for t in tapes}
  if len(names) != 1:
    raise errors.HarnessError(f'Tapes of different layers: {sorted(names)}.')
  return LayerTape(
      layer_name=tapes[0].layer_name,
      activations=np.concatenate([t.activations for t in tapes], axis=0),
      out_grads=np.concatenate([t.out_grads for t in tapes], axis=0),
  )


@dataclasses.dataclass
class PassResult:
  """Loss and gradients of one forward/backward pass.

  Attributes
  ----------
  loss : float
      Mean loss over the N samples.
  num_samples : int
      N.
  tapes : dict of str to LayerTape
      One tape per weight matrix, keyed by layer name.
  weight_grads : dict of str to np.ndarray
      Gradient of the mean loss for each weight matrix.
  param_grads : dict of str to np.ndarray
      Gradient of the mean loss for biases, norms and positional tensors.
  """

  loss: float
  num_samples: int
  tapes: dict[str, LayerTape]
  weight_grads: dict[str, np.ndarray]
  param_grads: dict[str, np.ndarray]


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int):
  bound = 1.0 / np.sqrt(fan_in)
  return rng.uniform(-bound, bound, size=shape).astype(cs.DTYPE)


def _cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
  """Mean NLL and the per-sample logit gradients of the summed NLL."""
  log_probs = special.log_softmax(logits, axis=-1)
  rows = np.arange(logits.shape[0])
  loss = -float(np.mean(log_probs[rows, targets]))
  grads = np.exp(log_probs)
  grads[rows, targets] -= 1.0
  return loss, grads


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
  mean = np.mean(x, axis=-1, keepdims=True)
  inv_std = 1.0 / np.sqrt(np.var(x, axis=-1, keepdims=True) + _LAYER_NORM_EPS)
  xhat = (x - mean) * inv_std
  return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_backward(
    dy: np.ndarray, gain: np.ndarray, cache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
  xhat, inv_std = cache
  width = xhat.shape[-1]
  dxhat = dy * gain
  dx = (inv_std / width) * (
      width * dxhat
      - np.sum(dxhat, axis=-1, keepdims=True)
      - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
  )
  dgain = np.sum(dy * xhat, axis=0)
  dbias = np.sum(dy, axis=0)
  return dx, dgain, dbias


def _one_hot(tokens: np.ndarray, depth: int) -> np.ndarray:
  flat = np.ravel(tokens)
  out = np.zeros((flat.size, depth), dtype=cs.DTYPE)
  out[np.arange(flat.size), flat] = 1.0
  return out


class Network(abc.ABC):
  """A model family: parameter layout plus forward/backward."""

  loss_kind: cs.LossKind = cs.LossKind.CROSS_ENTROPY

  def __init__(self, config: ModelConfig):
    self.config = config

  @abc.abstractmethod
  def layer_specs(self) -> list[LayerSpec]:
    """Weight matrices in forward order."""

  @abc.abstractmethod
  def param_shapes(self) -> dict[str, tuple[int, ...]]:
    """Shapes of every non-matrix (never pruned) parameter."""

  @abc.abstractmethod
  def init_params(
      self, rng: np.random.Generator
  ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Draws (weights, params) in a fixed order."""

  @abc.abstractmethod
  def run(
      self,
      weights: Mapping[str, np.ndarray],
      params: Mapping[str, np.ndarray],
      batch: Batch,
      backward: bool = True,
  ) -> PassResult:
    """Forward pass, and the backward pass when `backward` is set."""

  def check_batch(self, batch: Batch) -> None:
    if batch.loss_kind is not self.loss_kind:
      raise errors.HarnessError(
          f'{type(self).__name__} expects {self.loss_kind.value} batches, got'
          f' {batch.loss_kind.value}.'
      )
    if self.loss_kind is cs.LossKind.CROSS_ENTROPY:
      if np.ndim(batch.token_ids) != 2:
        raise errors.HarnessError(
            f'token_ids must be B x S, found {np.shape(batch.token_ids)}.'
        )
      if np.min(batch.token_ids) < 0 or batch.max_token() >= self.config.vocab_size:
        raise errors.HarnessError(
            f'Token ids must lie in [0, {self.config.vocab_size}), found'
            f' [{np.min(batch.token_ids)}, {batch.max_token()}].'
        )


class MlpLM(Network):
  """Fixed-context MLP next-character model.

  The input of position t is the concatenation of one-hot vectors of the
  `context` tokens ending at t (zeros before the sequence start). An
  embedding matrix without bias or nonlinearity maps it to `embed_dim`, tanh
  hidden layers follow, and an output matrix produces logits.
  """

  def _names(self) -> list[str]:
    hidden = [f'fc{i + 1}' for i in range(len(self.config.hidden_dims))]
    return ['emb'] + hidden + ['out']

  def layer_specs(self) -> list[LayerSpec]:
    c = self.config
    widths = [c.embed_dim] + list(c.hidden_dims)
    specs = [
        LayerSpec(
            'emb',
            cs.LayerKind.EMBEDDING,
            (c.embed_dim, c.context * c.vocab_size),
            c.prune_embedding,
        )
    ]
    for i, width in enumerate(c.hidden_dims):
      specs.append(
          LayerSpec(f'fc{i + 1}', cs.LayerKind.LINEAR, (width, widths[i]))
      )
    specs.append(LayerSpec('out', cs.LayerKind.LINEAR, (c.vocab_size, widths[-1])))
    return specs

  def param_shapes(self) -> dict[str, tuple[int, ...]]:
    return {
        f'{s.name}.bias': (s.shape[0],)
        for s in self.layer_specs()
        if s.name != 'emb'
    }

  def init_params(self, rng):
    weights = {}
    for spec in self.layer_specs():
      weights[spec.name] = _uniform(rng, spec.shape, spec.shape[1])
    params = {
        name: np.zeros(shape, dtype=cs.DTYPE)
        for name, shape in self.param_shapes().items()
    }
    return weights, params

  def context_inputs(self, token_ids: np.ndarray) -> np.ndarray:
    """N x (context * V) concatenated one-hot inputs."""
    c = self.config
    num_seq, seq_len = token_ids.shape
    padded = np.concatenate(
        [np.full((num_seq, c.context - 1), -1, dtype=np.int64), token_ids],
        axis=1,
    )
    inputs = np.zeros((num_seq * seq_len, c.context * c.vocab_size), cs.DTYPE)
    rows = np.arange(num_seq * seq_len)
    for j in range(c.context):
      tokens = np.ravel(padded[:, j : j + seq_len])
      valid = tokens >= 0
      inputs[rows[valid], j * c.vocab_size + tokens[valid]] = 1.0
    return inputs

  def run(self, weights, params, batch, backward=True):
    self.check_batch(batch)
    names = self._names()
    acts = [self.context_inputs(np.asarray(batch.token_ids))]
    h = acts[0] @ weights['emb'].T
    for name in names[1:-1]:
      acts.append(h)
      h = np.tanh(h @ weights[name].T + params[f'{name}.bias'])
    acts.append(h)
    logits = h @ weights['out'].T + params['out.bias']
    targets = np.ravel(batch.targets)
    loss, g = _cross_entropy(logits, targets)
    n = logits.shape[0]
    if not backward:
      return PassResult(loss, n, {}, {}, {})

    tapes, weight_grads, param_grads = {}, {}, {}
    for i in reversed(range(len(names))):
      name = names[i]
      if 0 < i < len(names) - 1:
        # acts[i + 1] is the tanh output of layer i.
        g = g * (1.0 - acts[i + 1] ** 2)
      tapes[name] = LayerTape(name, acts[i], g)
      weight_grads[name] = g.T @ acts[i] / n
      if name != 'emb':
        param_grads[f'{name}.bias'] = np.sum(g, axis=0) / n
      g = g @ weights[name]
    tapes = {name: tapes[name] for name in names}
    return PassResult(loss, n, tapes, weight_grads, param_grads)


class TransformerLM(Network):
  """One pre-layernorm single-head causal transformer block.

  Token embedding plus a learned positional parameter feed a block of
  LN -> attention -> residual and LN -> tanh MLP -> residual, followed by a
  final layernorm and an output matrix.
  """

  _PROJECTIONS = ('wq', 'wk', 'wv', 'wo')

  def layer_specs(self) -> list[LayerSpec]:
    c = self.config
    d, ff = c.embed_dim, c.hidden_dims[0]
    attention = cs.LayerKind.ATTENTION_PROJECTION
    return [
        LayerSpec('emb', cs.LayerKind.EMBEDDING, (d, c.vocab_size), c.prune_embedding),
        *[LayerSpec(p, attention, (d, d)) for p in self._PROJECTIONS],
        LayerSpec('up', cs.LayerKind.LINEAR, (ff, d)),
        LayerSpec('down', cs.LayerKind.LINEAR, (d, ff)),
        LayerSpec('out', cs.LayerKind.LINEAR, (c.vocab_size, d)),
    ]

  def param_shapes(self) -> dict[str, tuple[int, ...]]:
    c = self.config
    d = c.embed_dim
    shapes = {'pos': (c.max_len, d)}
    for norm in ('ln1', 'ln2', 'lnf'):
      shapes[f'{norm}.gain'] = (d,)
      shapes[f'{norm}.bias'] = (d,)
    for spec in self.layer_specs()[1:]:
      shapes[f'{spec.name}.bias'] = (spec.shape[0],)
    return shapes

  def init_params(self, rng):
    weights = {}
    for spec in self.layer_specs():
      fan_in = spec.shape[0] if spec.name == 'emb' else spec.shape[1]
      weights[spec.name] = _uniform(rng, spec.shape, fan_in)
    params = {}
    for name, shape in self.param_shapes().items():
      if name == 'pos':
        params[name] = _uniform(rng, shape, shape[1])
      elif name.endswith('.gain'):
        params[name] = np.ones(shape, dtype=cs.DTYPE)
      else:
        params[name] = np.zeros(shape, dtype=cs.DTYPE)
    return weights, params

  def check_batch(self, batch: Batch) -> None:
    super().check_batch(batch)
    seq_len = np.shape(batch.token_ids)[1]
    if seq_len > self.config.max_len:
      raise errors.HarnessError(
          f'Sequence length {seq_len} exceeds max_len {self.config.max_len}.'
      )

  def run(self, weights, params, batch, backward=True):
    self.check_batch(batch)
    w, p = weights, params
    token_ids = np.asarray(batch.token_ids)
    num_seq, seq_len = token_ids.shape
    n, d = num_seq * seq_len, self.config.embed_dim
    scale = 1.0 / np.sqrt(d)

    onehot = _one_hot(token_ids, self.config.vocab_size)
    pos = np.tile(p['pos'][:seq_len], (num_seq, 1))
    h0 = onehot @ w['emb'].T + pos
    u1, ln1 = _layer_norm(h0, p['ln1.gain'], p['ln1.bias'])
    q = u1 @ w['wq'].T + p['wq.bias']
    k = u1 @ w['wk'].T + p['wk.bias']
    v = u1 @ w['wv'].T + p['wv.bias']
    q3, k3, v3 = (x.reshape(num_seq, seq_len, d) for x in (q, k, v))
    scores = np.einsum('bid,bjd->bij', q3, k3) * scale
    future = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    att = special.softmax(scores, axis=-1)
    ctx = np.einsum('bij,bjd->bid', att, v3).reshape(n, d)
    h1 = h0 + ctx @ w['wo'].T + p['wo.bias']
    u2, ln2 = _layer_norm(h1, p['ln2.gain'], p['ln2.bias'])
    m = np.tanh(u2 @ w['up'].T + p['up.bias'])
    h2 = h1 + m @ w['down'].T + p['down.bias']
    u3, lnf = _layer_norm(h2, p['lnf.gain'], p['lnf.bias'])
    logits = u3 @ w['out'].T + p['out.bias']
    loss, g_out = _cross_entropy(logits, np.ravel(batch.targets))
    if not backward:
      return PassResult(loss, n, {}, {}, {})

    tapes, wg, pg = {}, {}, {}

    def record(name, a, g):
      tapes[name] = LayerTape(name, a, g)
      wg[name] = g.T @ a / n
      if f'{name}.bias' in p:
        pg[f'{name}.bias'] = np.sum(g, axis=0) / n
      return g @ w[name]

    def norm(name, dy, cache):
      dx, dgain, dbias = _layer_norm_backward(dy, p[f'{name}.gain'], cache)
      pg[f'{name}.gain'] = dgain / n
      pg[f'{name}.bias'] = dbias / n
      return dx

    du3 = record('out', u3, g_out)
    dh2 = norm('lnf', du3, lnf)
    dm = record('down', m, dh2)
    dz = dm * (1.0 - m**2)
    du2 = record('up', u2, dz)
    dh1 = dh2 + norm('ln2', du2, ln2)
    dctx = record('wo', ctx, dh1).reshape(num_seq, seq_len, d)

    datt = np.einsum('bid,bjd->bij', dctx, v3)
    dv = np.einsum('bij,bid->bjd', att, dctx).reshape(n, d)
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    dq = (np.einsum('bij,bjd->bid', dscores, k3) * scale).reshape(n, d)
    dk = (np.einsum('bij,bid->bjd', dscores, q3) * scale).reshape(n, d)
    du1 = record('wq', u1, dq) + record('wk', u1, dk) + record('wv', u1, dv)
    dh0 = dh1 + norm('ln1', du1, ln1)
    record('emb', onehot, dh0)
    dpos = np.zeros_like(p['pos'])
    dpos[:seq_len] = np.sum(dh0.reshape(num_seq, seq_len, d), axis=0) / n
    pg['pos'] = dpos

    order = [s.name for s in self.layer_specs()]
    tapes = {name: tapes[name] for name in order}
    wg = {name: wg[name] for name in order}
    return PassResult(loss, n, tapes, wg, pg)


class RegressionNet(Network):
  """A stack of linear layers with squared-error loss 0.5 |y_hat - y|^2."""

  loss_kind = cs.LossKind.SQUARED_ERROR

  def layer_specs(self) -> list[LayerSpec]:
    c = self.config
    dims = [c.input_dim] + list(c.hidden_dims) + [c.output_dim]
    return [
        LayerSpec(f'fc{i + 1}', cs.LayerKind.LINEAR, (dims[i + 1], dims[i]))
        for i in range(len(dims) - 1)
    ]

  def param_shapes(self) -> dict[str, tuple[int, ...]]:
    if not self.config.use_bias:
      return {}
    return {f'{s.name}.bias': (s.shape[0],) for s in self.layer_specs()}

  def init_params(self, rng):
    weights = {
        s.name: _uniform(rng, s.shape, s.shape[1]) for s in self.layer_specs()
    }
    params = {
        name: np.zeros(shape, dtype=cs.DTYPE)
        for name, shape in self.param_shapes().items()
    }
    return weights, params

  def check_batch(self, batch: Batch) -> None:
    super().check_batch(batch)
    c = self.config
    if np.shape(batch.features)[1] != c.input_dim:
      raise errors.HarnessError(
          f'Features have width {np.shape(batch.features)[1]}, model expects'
          f' {c.input_dim}.'
      )
    if np.shape(batch.targets)[1] != c.output_dim:
      raise errors.HarnessError(
          f'Targets have width {np.shape(batch.targets)[1]}, model expects'
          f' {c.output_dim}.'
      )

  def run(self, weights, params, batch, backward=True):
    self.check_batch(batch)
    names = [s.name for s in self.layer_specs()]
    nonlinear = self.config.nonlinear
    acts = []
    h = np.asarray(batch.features, dtype=cs.DTYPE)
    for i, name in enumerate(names):
      acts.append(h)
      h = h @ weights[name].T + params.get(f'{name}.bias', 0.0)
      if nonlinear and i < len(names) - 1:
        h = np.tanh(h)
    residual = h - batch.targets
    n = h.shape[0]
    loss = 0.5 * float(np.sum(residual**2)) / n
    if not backward:
      return PassResult(loss, n, {}, {}, {})

    tapes, weight_grads, param_grads = {}, {}, {}
    g = residual
    for i in reversed(range(len(names))):
      name = names[i]
      tapes[name] = LayerTape(name, acts[i], g)
      weight_grads[name] = g.T @ acts[i] / n
      if f'{name}.bias' in params:
        param_grads[f'{name}.bias'] = np.sum(g, axis=0) / n
      g = g @ weights[name]
      if nonlinear and i > 0:
        g = g * (1.0 - acts[i] ** 2)
    tapes = {name: tapes[name] for name in names}
    weight_grads = {name: weight_grads[name] for name in names}
    return PassResult(loss, n, tapes, weight_grads, param_grads)


_NETWORKS = {
    cs.Architecture.MLP: MlpLM,
    cs.Architecture.TRANSFORMER: TransformerLM,
    cs.Architecture.REGRESSION: RegressionNet,
}


def network_for(config: ModelConfig) -> Network:
  return _NETWORKS[config.architecture](config)
