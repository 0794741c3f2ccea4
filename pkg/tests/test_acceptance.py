"""End-to-end quality checks.

The checks on trained toy models train five models and prune each several
times, so they only run when RUN_ACCEPTANCE is set in the environment. Every
comparison is made on the median test loss over the five seeds.
"""

import os
import pathlib
import unittest
from unittest import mock

from absl import logging
from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from src.pruning import cli
from src.pruning.surgery import config as config_lib
from src.pruning.surgery import curvature
from src.pruning.surgery import harness
from src.pruning.surgery import surgeon
from src.pruning.surgery import training
from tests import testing_util

_ENABLED = bool(os.environ.get('RUN_ACCEPTANCE'))
_SEEDS = range(5)


@unittest.skipUnless(_ENABLED, 'set RUN_ACCEPTANCE=1 to run')
class AcceptanceTest(parameterized.TestCase):

  @classmethod
  def setUpClass(cls):
    super().setUpClass()
    cls.train = testing_util.bundled_batches('train', num_batches=32)
    cls.test = testing_util.bundled_batches('test')
    cls.models = {}
    for seed in _SEEDS:
      config = config_lib.TrainConfig(
          model=testing_util.tiny_mlp_config(hidden_dims=(32,), embed_dim=16),
          epochs=20,
          seed=seed,
      )
      cls.models[seed] = training.train_model(config, cls.train, cls.test).model

  def _median_loss(self, **prune):
    losses = []
    for seed in _SEEDS:
      config = config_lib.PruneConfig(seed=seed, **prune)
      result = surgeon.run(self.models[seed], self.train, config)
      losses.append(harness.mean_loss(result.model, self.test))
    median = float(np.median(losses))
    logging.info('Median test loss of %s: %.4f.', prune, median)
    return median

  @parameterized.parameters(('structured', 0.5, 10), ('unstructured', 0.5, 5))
  def test_multiple_shots_help(self, mode, alpha, shots):
    single = self._median_loss(mode=mode, alpha=alpha, shots=1)
    multi = self._median_loss(mode=mode, alpha=alpha, shots=shots)
    logging.info('%s: %d shots gain %.4f over one.', mode, shots, single - multi)
    self.assertLessEqual(multi, single)

  @parameterized.parameters(0.8, 0.7)
  def test_structured_method_ordering(self, alpha):
    losses = {
        method: self._median_loss(mode='structured', alpha=alpha, method=method)
        for method in ('surgeon', 'surgeon-independent', 'k-obd', 'magnitude')
    }
    self.assertLessEqual(losses['surgeon'], losses['k-obd'])
    self.assertLessEqual(losses['k-obd'], losses['magnitude'])
    self.assertLessEqual(losses['surgeon'], losses['surgeon-independent'])


class AllocationTest(absltest.TestCase):

  def test_removals_follow_the_low_curvature_layer(self):
    rng = np.random.default_rng(0)
    model = harness.build_model(
        testing_util.regression_config(
            input_dim=16, output_dim=16, hidden_dims=(16,)
        ),
        seed=0,
    )
    # Both layers hold the same weights, so only curvature tells them apart.
    weights = np.linspace(1.0, 2.0, 256).reshape(16, 16)
    weights *= rng.choice([-1.0, 1.0], size=(16, 16))
    for name in ('fc1', 'fc2'):
      model.layer(name).weight = weights.copy()
    batches = [testing_util.regression_batch(rng, 64, 16, 16)]

    def scaled_curvature(tapes, config, warm):
      del tapes, config, warm
      return {
          name: curvature.KronCurvature(
              name, G=scale * np.eye(16), A=np.eye(16), sample_count=1
          )
          for name, scale in (('fc1', 100.0), ('fc2', 1.0))
      }, {}

    directory = pathlib.Path(self.create_tempdir().full_path)
    with mock.patch.object(
        surgeon, '_estimate_curvature', side_effect=scaled_curvature
    ):
      surgeon.run(
          model,
          batches,
          config_lib.PruneConfig(alpha=0.75, shots=1),
          output_dir=directory / 'run',
      )
    summary = cli.cmd_report(
        directory / 'run' / surgeon.SHOTS_FILE, directory / 'report'
    )
    removed = {r['layer']: r['removed'] for r in summary['layers']}
    self.assertEqual(sum(removed.values()), 128)
    self.assertGreaterEqual(removed['fc2'] / 128, 0.9)
    self.assertTrue((directory / 'report' / 'layers.csv').exists())


if __name__ == '__main__':
  absltest.main()
