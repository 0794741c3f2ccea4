"""Tests for byte-level corpus ingestion."""

import pathlib

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from src.pruning.surgery import constants as cs
from src.pruning.surgery import corpus
from src.pruning.utils import errors


def _write(directory: str, payload: bytes) -> pathlib.Path:
  path = pathlib.Path(directory) / 'corpus.txt'
  path.write_bytes(payload)
  return path


class WindowTest(parameterized.TestCase):

  @parameterized.parameters(
      (1024, 64, 15),
      (65, 64, 1),
      (64, 64, 0),
      (8192, 16, 511),
  )
  def test_count_windows(self, num_tokens, seq_len, expected):
    self.assertEqual(corpus.count_windows(num_tokens, seq_len), expected)

  def test_count_windows_rejects_zero_length(self):
    with self.assertRaises(errors.ConfigurationError):
      corpus.count_windows(10, 0)

  def test_split_is_disjoint_and_test_is_last(self):
    train, test = corpus.split_windows(15, 0.1)
    self.assertEmpty(np.intersect1d(train, test))
    self.assertLen(test, 2)
    np.testing.assert_array_equal(test, [13, 14])
    np.testing.assert_array_equal(np.concatenate([train, test]), np.arange(15))

  def test_split_needs_two_windows(self):
    with self.assertRaises(errors.IngestionError):
      corpus.split_windows(1, 0.1)


class LoadCorpusTest(absltest.TestCase):

  def test_vocabulary_is_sorted_distinct_bytes(self):
    path = _write(self.create_tempdir().full_path, b'banana band')
    data = corpus.read_corpus(path)
    self.assertEqual(data.vocab, tuple(sorted(set(b'banana band'))))
    self.assertEqual(data.decode(data.tokens), b'banana band')

  def test_empty_file_is_rejected(self):
    path = _write(self.create_tempdir().full_path, b'')
    with self.assertRaises(errors.IngestionError):
      corpus.read_corpus(path)

  def test_missing_file_is_rejected(self):
    with self.assertRaises(errors.IngestionError):
      corpus.read_corpus('/nonexistent/corpus.txt')

  def test_targets_are_shifted_inputs(self):
    rng = np.random.default_rng(0)
    payload = bytes(rng.integers(97, 101, size=1024).astype(np.uint8))
    path = _write(self.create_tempdir().full_path, payload)
    batches = corpus.load_corpus(
        path, cs.Split.TEST, seq_len=64, batch_size=1
    )
    self.assertLen(batches, 2)
    for batch in batches:
      self.assertEqual(batch.token_ids.shape, (1, 64))
      np.testing.assert_array_equal(batch.token_ids[0, 1:], batch.targets[0, :-1])

  def test_train_and_test_windows_are_disjoint(self):
    rng = np.random.default_rng(1)
    payload = bytes(rng.integers(97, 123, size=1040).astype(np.uint8))
    path = _write(self.create_tempdir().full_path, payload)
    train = corpus.load_corpus(
        path, 'train', seq_len=13, batch_size=1, num_batches=1000
    )
    test = corpus.load_corpus(path, 'test', seq_len=13, batch_size=1)
    num_windows = corpus.count_windows(len(payload), 13)
    self.assertLen(train, num_windows - len(test))

    data = corpus.read_corpus(path)
    windows = {
        tuple(data.tokens[i * 13 : i * 13 + 14]): i for i in range(num_windows)
    }
    self.assertLen(windows, num_windows)

    def window_ids(batches):
      return {
          windows[tuple(b.token_ids[0]) + (b.targets[0, -1],)] for b in batches
      }

    self.assertEmpty(window_ids(train) & window_ids(test))

  def test_batches_are_deterministic(self):
    path = _write(self.create_tempdir().full_path, bytes(range(97, 123)) * 20)
    first = corpus.load_corpus(path, 'train', seq_len=8, batch_size=2, seed=3)
    second = corpus.load_corpus(path, 'train', seq_len=8, batch_size=2, seed=3)
    self.assertLen(first, len(second))
    for a, b in zip(first, second):
      np.testing.assert_array_equal(a.token_ids, b.token_ids)
      np.testing.assert_array_equal(a.targets, b.targets)

  def test_num_batches_caps_train_batches(self):
    path = _write(self.create_tempdir().full_path, bytes(range(97, 123)) * 20)
    batches = corpus.load_corpus(
        path, 'train', seq_len=8, batch_size=2, num_batches=3
    )
    self.assertLen(batches, 3)
    self.assertEqual(batches[0].num_samples, 16)

  def test_too_short_corpus_is_rejected(self):
    path = _write(self.create_tempdir().full_path, b'abcdef')
    with self.assertRaises(errors.IngestionError):
      corpus.load_corpus(path, 'train', seq_len=4)


class RegressionBatchTest(absltest.TestCase):

  def test_mismatched_rows_are_rejected(self):
    with self.assertRaises(errors.HarnessError):
      corpus.regression_batch(np.zeros((3, 2)), np.zeros((4, 1)))

  def test_num_samples(self):
    batch = corpus.regression_batch(np.zeros((5, 2)), np.zeros((5, 1)))
    self.assertEqual(batch.num_samples, 5)
    self.assertEqual(batch.loss_kind, cs.LossKind.SQUARED_ERROR)


if __name__ == '__main__':
  absltest.main()
