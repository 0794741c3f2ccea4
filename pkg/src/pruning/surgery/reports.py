"""Tabular summaries of pruning runs."""

from collections.abc import Sequence
import json
import pathlib
from typing import Any, Union

import pandas as pd

from ..utils import errors
from . import surgeon

PathLike = Union[str, pathlib.Path]
ShotReport = surgeon.ShotReport

SHOT_COLUMNS = [
    'shot',
    'alpha_t',
    'realized_size',
    'tau',
    'train_loss_before',
    'train_loss_after',
    'test_loss',
]
LAYER_COLUMNS = [
    'layer',
    'type',
    'depth',
    'size',
    'live',
    'removed',
    'sparsity',
    'live_rows',
    'live_cols',
]
TYPE_COLUMNS = ['type', 'size', 'live', 'removed', 'sparsity', 'share_of_removed']


def read_shot_reports(path: PathLike) -> list[ShotReport]:
  """Parses a shot-report JSONL file."""
  path = pathlib.Path(path)
  try:
    lines = [l for l in path.read_text().splitlines() if l.strip()]
    return [ShotReport.from_dict(json.loads(l)) for l in lines]
  except (OSError, json.JSONDecodeError, TypeError) as e:
    raise errors.IngestionError(f'Cannot read shot reports {path}: {e}') from e


def shots_frame(reports: Sequence[ShotReport]) -> pd.DataFrame:
  """One row per shot."""
  rows = [{c: r.to_dict()[c] for c in SHOT_COLUMNS} for r in reports]
  return pd.DataFrame(rows, columns=SHOT_COLUMNS)


def layer_frame(report: ShotReport) -> pd.DataFrame:
  """Per-layer sparsity after `report`'s shot, ordered by depth."""
  frame = pd.DataFrame(report.layers)
  if frame.empty:
    return pd.DataFrame(columns=LAYER_COLUMNS)
  frame['removed'] = frame['size'] - frame['live']
  frame['sparsity'] = frame['removed'] / frame['size']
  return frame.sort_values('depth', kind='stable')[LAYER_COLUMNS].reset_index(
      drop=True
  )


def type_frame(report: ShotReport) -> pd.DataFrame:
  """Sparsity aggregated by layer type; removed counts sum to the total."""
  layers = layer_frame(report)
  if layers.empty:
    return pd.DataFrame(columns=TYPE_COLUMNS)
  grouped = (
      layers.groupby('type', sort=True)[['size', 'live', 'removed']]
      .sum()
      .reset_index()
  )
  grouped['sparsity'] = grouped['removed'] / grouped['size']
  total_removed = grouped['removed'].sum()
  grouped['share_of_removed'] = (
      grouped['removed'] / total_removed if total_removed else 0.0
  )
  return grouped[TYPE_COLUMNS]


def global_sparsity(report: ShotReport) -> float:
  layers = layer_frame(report)
  return float(layers['removed'].sum() / layers['size'].sum())


def write_report(
    reports: Sequence[ShotReport], output_dir: PathLike
) -> dict[str, Any]:
  """Writes shots.csv, layers.csv and types.csv for the last shot.

  Returns the JSON summary also written as summary.json.
  """
  if not reports:
    raise errors.IngestionError('No shot reports to summarise.')
  directory = pathlib.Path(output_dir)
  directory.mkdir(parents=True, exist_ok=True)
  last = reports[-1]
  shots_frame(reports).to_csv(directory / 'shots.csv', index=False)
  layers = layer_frame(last)
  layers.to_csv(directory / 'layers.csv', index=False)
  types = type_frame(last)
  types.to_csv(directory / 'types.csv', index=False)
  summary = {
      'shots': len(reports),
      'final_alpha_t': last.alpha_t,
      'realized_size': last.realized_size,
      'global_sparsity': global_sparsity(last),
      'layers': layers.to_dict(orient='records'),
      'types': types.to_dict(orient='records'),
  }
  (directory / 'summary.json').write_text(
      json.dumps(summary, indent=2, sort_keys=True, default=float)
  )
  return summary
