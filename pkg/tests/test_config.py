"""Tests for configuration dataclasses and their resolution."""

import json
import pathlib

from absl.testing import absltest
from absl.testing import parameterized

from src.pruning.surgery import config as config_lib
from src.pruning.surgery import constants as cs
from src.pruning.utils import errors


class PruneConfigTest(parameterized.TestCase):

  @parameterized.parameters(
      ('structured', 10, 0.1),
      ('unstructured', 5, 0.01),
      ('semi-2:4', 5, 0.01),
  )
  def test_mode_defaults(self, mode, shots, damp_g):
    config = config_lib.PruneConfig(mode=mode, alpha=0.5).resolved()
    self.assertEqual(config.shots, shots)
    self.assertEqual(config.damp_g, damp_g)
    self.assertEqual(config.damp_a, cs.DAMP_A)

  @parameterized.parameters(
      ('magnitude', cs.CostPolicy.MAGNITUDE, cs.UpdateKind.NONE),
      ('k-obd', cs.CostPolicy.K_OBD, cs.UpdateKind.NONE),
      ('surgeon', cs.CostPolicy.KFAC_OBS, cs.UpdateKind.FULL_CORRELATION),
  )
  def test_method_presets(self, method, policy, update):
    config = config_lib.PruneConfig(method=method).resolved()
    self.assertEqual(config.cost_policy, policy)
    self.assertEqual(config.update, update)

  def test_explicit_policy_wins_over_preset(self):
    config = config_lib.PruneConfig(
        method='surgeon', update='independent-structure'
    ).resolved()
    self.assertEqual(config.update, cs.UpdateKind.INDEPENDENT_STRUCTURE)
    self.assertEqual(config.cost_policy, cs.CostPolicy.KFAC_OBS)

  @parameterized.parameters(0.0, -0.1, 1.5)
  def test_alpha_out_of_range(self, alpha):
    with self.assertRaises(errors.ConfigurationError):
      config_lib.PruneConfig(alpha=alpha).resolved()

  def test_semi_below_half_is_infeasible(self):
    with self.assertRaises(errors.InfeasibleTargetError):
      config_lib.PruneConfig(mode='semi-2:4', alpha=0.4).resolved()

  def test_unknown_enum_value(self):
    with self.assertRaises(errors.ConfigurationError):
      config_lib.PruneConfig(mode='diagonal')

  def test_unknown_field(self):
    with self.assertRaises(errors.ConfigurationError):
      config_lib.PruneConfig.from_dict({'alhpa': 0.3})

  def test_dict_round_trip(self):
    config = config_lib.PruneConfig(
        mode='structured', alpha=0.7, lora={'enabled': True, 'rank': 2}
    ).resolved()
    restored = config_lib.PruneConfig.from_dict(
        json.loads(json.dumps(config.to_dict()))
    )
    self.assertEqual(restored, config)
    self.assertTrue(restored.lora.enabled)


class ResolutionTest(absltest.TestCase):

  def test_flags_beat_file_beat_defaults(self):
    path = pathlib.Path(self.create_tempdir().full_path) / 'config.json'
    path.write_text(
        json.dumps({'alpha': 0.7, 'shots': 3, 'data': {'seq_len': 32}})
    )
    config = config_lib.resolve_prune_config(
        path, {'alpha': 0.6, 'data': {'batch_size': 2}}
    )
    self.assertEqual(config.alpha, 0.6)
    self.assertEqual(config.shots, 3)
    self.assertEqual(config.data.seq_len, 32)
    self.assertEqual(config.data.batch_size, 2)
    self.assertEqual(config.data.num_batches, config_lib.DataConfig().num_batches)

  def test_missing_file(self):
    with self.assertRaises(errors.ConfigurationError):
      config_lib.resolve_prune_config('/nonexistent/config.json')

  def test_non_object_file(self):
    path = pathlib.Path(self.create_tempdir().full_path) / 'config.json'
    path.write_text('[1, 2]')
    with self.assertRaises(errors.ConfigurationError):
      config_lib.resolve_prune_config(path)

  def test_train_config_nests_model(self):
    config = config_lib.resolve_train_config(
        None, {'model': {'architecture': 'transformer', 'hidden_dims': [8]}}
    )
    self.assertEqual(config.model.architecture, cs.Architecture.TRANSFORMER)
    self.assertEqual(config.model.hidden_dims, (8,))

  def test_write_resolved_emits_every_field(self):
    path = pathlib.Path(self.create_tempdir().full_path) / 'resolved.json'
    config = config_lib.resolve_prune_config(None, {})
    config_lib.write_resolved(config, path)
    written = json.loads(path.read_text())
    self.assertEqual(
        set(written), {f for f in config_lib.PruneConfig.__dataclass_fields__}
    )
    self.assertEqual(written['shots'], 5)
    self.assertEqual(written['cost_policy'], 'kfac-obs')


class ModelConfigTest(absltest.TestCase):

  def test_transformer_needs_hidden_width(self):
    with self.assertRaises(errors.ConfigurationError):
      config_lib.ModelConfig(architecture='transformer', hidden_dims=())

  def test_negative_width(self):
    with self.assertRaises(errors.ConfigurationError):
      config_lib.ModelConfig(hidden_dims=(4, -1))


if __name__ == '__main__':
  absltest.main()
