"""Byte-level corpus ingestion and batch construction."""

import dataclasses
import math
import pathlib
from typing import Optional, Union

import numpy as np

from ..utils import errors
from . import constants as cs

PathLike = Union[str, pathlib.Path]

DEFAULT_SEQ_LEN = 64
DEFAULT_NUM_BATCHES = 32
DEFAULT_BATCH_SIZE = 8
DEFAULT_TEST_FRACTION = 0.1


@dataclasses.dataclass
class Batch:
  """One batch of samples.

  Char-LM batches carry `token_ids` (B x S) and next-token `targets` (B x S).
  Regression batches carry `features` (N x C_in) and `targets` (N x R_out).
  """

  loss_kind: cs.LossKind
  targets: np.ndarray
  token_ids: Optional[np.ndarray] = None
  features: Optional[np.ndarray] = None

  def __post_init__(self):
    if self.loss_kind is cs.LossKind.CROSS_ENTROPY:
      if self.token_ids is None:
        raise errors.HarnessError('Cross-entropy batches need token_ids.')
      if np.shape(self.token_ids) != np.shape(self.targets):
        raise errors.HarnessError(
            f'token_ids {np.shape(self.token_ids)} and targets'
            f' {np.shape(self.targets)} differ in shape.'
        )
    elif self.features is None:
      raise errors.HarnessError('Squared-error batches need features.')

  @property
  def num_samples(self) -> int:
    """Number of KFAC samples: (sequence, position) pairs or rows."""
    if self.loss_kind is cs.LossKind.CROSS_ENTROPY:
      return int(np.size(self.token_ids))
    return int(np.shape(self.features)[0])

  def max_token(self) -> int:
    if self.token_ids is None:
      return -1
    return int(max(np.max(self.token_ids), np.max(self.targets)))


@dataclasses.dataclass
class Corpus:
  """A byte string mapped onto a compact byte vocabulary."""

  tokens: np.ndarray
  vocab: tuple[int, ...]

  @property
  def vocab_size(self) -> int:
    return len(self.vocab)

  def decode(self, tokens: np.ndarray) -> bytes:
    return bytes(self.vocab[int(t)] for t in np.ravel(tokens))


def read_corpus(path: PathLike) -> Corpus:
  """Reads `path` as raw bytes; the vocabulary is its sorted distinct bytes."""
  try:
    raw = pathlib.Path(path).read_bytes()
  except OSError as e:
    raise errors.IngestionError(f'Cannot read corpus {path}: {e}')
  if not raw:
    raise errors.IngestionError(f'Corpus {path} is empty.')
  data = np.frombuffer(raw, dtype=np.uint8)
  vocab, tokens = np.unique(data, return_inverse=True)
  return Corpus(
      tokens=tokens.astype(np.int64),
      vocab=tuple(int(v) for v in vocab),
  )


def count_windows(num_tokens: int, seq_len: int) -> int:
  """Full (input, shifted-target) windows of `seq_len` in `num_tokens`."""
  if seq_len < 1:
    raise errors.ConfigurationError(f'seq_len must be >= 1, got {seq_len}.')
  return max(0, (num_tokens - 1) // seq_len)


def split_windows(
    num_windows: int, test_fraction: float
) -> tuple[np.ndarray, np.ndarray]:
  """Window ids of the train split and of the final test fraction."""
  if not 0.0 < test_fraction < 1.0:
    raise errors.ConfigurationError(
        f'test_fraction must lie in (0, 1), got {test_fraction}.'
    )
  if num_windows < 2:
    raise errors.IngestionError(
        f'Need at least 2 windows to split train/test, found {num_windows}.'
    )
  num_test = min(num_windows - 1, max(1, math.ceil(test_fraction * num_windows)))
  ids = np.arange(num_windows)
  return ids[: num_windows - num_test], ids[num_windows - num_test :]


def _windows_to_batch(
    tokens: np.ndarray, window_ids: np.ndarray, seq_len: int
) -> Batch:
  starts = window_ids * seq_len
  offsets = np.arange(seq_len + 1)
  windows = tokens[starts[:, np.newaxis] + offsets[np.newaxis, :]]
  return Batch(
      loss_kind=cs.LossKind.CROSS_ENTROPY,
      token_ids=windows[:, :-1],
      targets=windows[:, 1:],
  )


def _group(ids: np.ndarray, batch_size: int) -> list[np.ndarray]:
  groups = [ids[i : i + batch_size] for i in range(0, len(ids), batch_size)]
  if len(groups) > 1 and len(groups[-1]) < batch_size:
    groups = groups[:-1]
  return groups


def corpus_batches(
    corpus: Corpus,
    split: cs.Split,
    seq_len: int = DEFAULT_SEQ_LEN,
    num_batches: int = DEFAULT_NUM_BATCHES,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
    test_fraction: float = DEFAULT_TEST_FRACTION,
) -> list[Batch]:
  """Deterministic batches of one split of `corpus`.

  Training windows are drawn without replacement in a seeded order and at
  most `num_batches` batches are returned. The test split is the final
  `test_fraction` of windows, in file order, always returned in full.
  """
  if batch_size < 1 or num_batches < 1:
    raise errors.ConfigurationError(
        f'batch_size and num_batches must be >= 1, got {batch_size},'
        f' {num_batches}.'
    )
  num_windows = count_windows(len(corpus.tokens), seq_len)
  train_ids, test_ids = split_windows(num_windows, test_fraction)
  if split is cs.Split.TRAIN:
    order = np.random.default_rng(seed).permutation(train_ids)
    groups = _group(order, batch_size)[:num_batches]
  else:
    groups = _group(test_ids, batch_size)
  return [_windows_to_batch(corpus.tokens, g, seq_len) for g in groups]


def load_corpus(
    path: PathLike,
    split: Union[cs.Split, str],
    seq_len: int = DEFAULT_SEQ_LEN,
    num_batches: int = DEFAULT_NUM_BATCHES,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
    test_fraction: float = DEFAULT_TEST_FRACTION,
) -> list[Batch]:
  """Reads `path` and returns the batches of `split`."""
  return corpus_batches(
      read_corpus(path),
      cs.Split(split),
      seq_len=seq_len,
      num_batches=num_batches,
      batch_size=batch_size,
      seed=seed,
      test_fraction=test_fraction,
  )


def regression_batch(features: np.ndarray, targets: np.ndarray) -> Batch:
  """Wraps a synthetic regression problem as a squared-error batch."""
  features = np.asarray(features, dtype=cs.DTYPE)
  targets = np.asarray(targets, dtype=cs.DTYPE)
  if features.ndim != 2 or targets.ndim != 2:
    raise errors.HarnessError('Regression features and targets must be 2D.')
  if features.shape[0] != targets.shape[0]:
    raise errors.HarnessError(
        f'{features.shape[0]} feature rows but {targets.shape[0]} target rows.'
    )
  return Batch(
      loss_kind=cs.LossKind.SQUARED_ERROR, targets=targets, features=features
  )
