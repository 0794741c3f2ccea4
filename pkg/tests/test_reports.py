"""Tests for run summaries."""

import json
import pathlib

from absl.testing import absltest
import numpy as np

from src.pruning.surgery import reports
from src.pruning.surgery import surgeon
from src.pruning.utils import errors


def _record(name, kind, depth, size, live, rows=0, cols=0):
  return {
      'layer': name,
      'type': kind,
      'depth': depth,
      'size': size,
      'live': live,
      'live_rows': 4 - rows,
      'live_cols': 4 - cols,
      'rows_removed': rows,
      'cols_removed': cols,
      'elements_removed': size - live,
      'update_norm': 0.5,
  }


def _report(shot=1, tau=0.25):
  return surgeon.ShotReport(
      shot=shot,
      alpha_t=0.75,
      realized_size=0.75,
      tau=tau,
      layers=[
          _record('out', 'head', 2, 16, 16),
          _record('fc1', 'mlp', 0, 16, 8, rows=2),
          _record('fc2', 'mlp', 1, 16, 12, cols=1),
      ],
      train_loss_before=1.0,
      train_loss_after=1.2,
      test_loss=1.3,
  )


class FrameTest(absltest.TestCase):

  def test_layer_frame_is_ordered_by_depth(self):
    frame = reports.layer_frame(_report())
    self.assertEqual(list(frame.columns), reports.LAYER_COLUMNS)
    self.assertEqual(frame['layer'].tolist(), ['fc1', 'fc2', 'out'])
    np.testing.assert_allclose(frame['sparsity'], [0.5, 0.25, 0.0])

  def test_type_frame_accounts_for_every_removal(self):
    frame = reports.type_frame(_report()).set_index('type')
    self.assertEqual(frame.loc['mlp', 'removed'], 12)
    self.assertEqual(frame.loc['head', 'removed'], 0)
    self.assertAlmostEqual(frame['share_of_removed'].sum(), 1.0)
    self.assertEqual(frame['removed'].sum(), 48 - 36)

  def test_global_sparsity(self):
    self.assertAlmostEqual(reports.global_sparsity(_report()), 0.25)

  def test_empty_layers(self):
    report = _report()
    report.layers = []
    self.assertEmpty(reports.layer_frame(report))
    self.assertEmpty(reports.type_frame(report))

  def test_shots_frame(self):
    frame = reports.shots_frame([_report(1), _report(2, tau=-np.inf)])
    self.assertEqual(list(frame.columns), reports.SHOT_COLUMNS)
    self.assertEqual(frame['shot'].tolist(), [1, 2])
    self.assertTrue(np.isnan(frame['tau'].iloc[1]))


class WriteReportTest(absltest.TestCase):

  def test_round_trip_through_jsonl(self):
    directory = pathlib.Path(self.create_tempdir().full_path)
    path = directory / surgeon.SHOTS_FILE
    path.write_text(
        ''.join(json.dumps(r.to_dict()) + '\n' for r in [_report(1), _report(2)])
    )
    parsed = reports.read_shot_reports(path)
    self.assertLen(parsed, 2)
    self.assertEqual(parsed[1].layers, _report().layers)

    summary = reports.write_report(parsed, directory / 'summary')
    for name in ('shots.csv', 'layers.csv', 'types.csv', 'summary.json'):
      self.assertTrue((directory / 'summary' / name).exists())
    self.assertEqual(summary['shots'], 2)
    self.assertAlmostEqual(summary['global_sparsity'], 0.25)
    on_disk = json.loads((directory / 'summary' / 'summary.json').read_text())
    self.assertEqual(on_disk['realized_size'], 0.75)

  def test_no_reports(self):
    with self.assertRaises(errors.IngestionError):
      reports.write_report([], self.create_tempdir().full_path)

  def test_malformed_file(self):
    path = pathlib.Path(self.create_tempdir().full_path) / 'shots.jsonl'
    path.write_text('{"shot": 1\n')
    with self.assertRaises(errors.IngestionError):
      reports.read_shot_reports(path)

  def test_missing_file(self):
    with self.assertRaises(errors.IngestionError):
      reports.read_shot_reports('/nonexistent/shots.jsonl')


if __name__ == '__main__':
  absltest.main()
