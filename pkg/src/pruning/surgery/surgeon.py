"""Multi-shot pruning loop.

Each shot re-estimates curvature on the current (masked) weights, prices
every removal candidate, selects a network-wide removal set at the shot's
target size, compensates the remaining weights and optionally fits a
low-rank correction. Targets follow the linear schedule
alpha_t = 1 - t (1 - alpha) / T.
"""

from collections.abc import Mapping, Sequence
import dataclasses
import json
import pathlib
import time
from typing import Any, Optional, Union

from absl import logging
import numpy as np

from ..utils import errors
from . import config as config_lib
from . import constants as cs
from . import costs
from . import curvature
from . import harness
from . import low_rank
from . import selection as selection_lib
from . import updates

PathLike = Union[str, pathlib.Path]
PruneConfig = config_lib.PruneConfig

STATE_FILE = 'state.json'
SHOTS_FILE = 'shots.jsonl'
TIMINGS_FILE = 'timings.jsonl'


@dataclasses.dataclass
class Schedule:
  """Target sizes alphas[0] = 1 > alphas[1] > ... > alphas[T] = alpha."""

  alphas: np.ndarray

  @property
  def shots(self) -> int:
    return len(self.alphas) - 1


def make_schedule(alpha: float, shots: int) -> Schedule:
  """Linear schedule from 1 to `alpha` in `shots` steps.

  Raises:
    ConfigurationError: unless 0 < alpha < 1 and shots >= 1.
  """
  if not 0.0 < alpha < 1.0:
    raise errors.ConfigurationError(f'alpha must lie in (0, 1), got {alpha}.')
  if shots < 1:
    raise errors.ConfigurationError(f'shots must be >= 1, got {shots}.')
  t = np.arange(shots + 1, dtype=cs.DTYPE)
  alphas = 1.0 - t * (1.0 - alpha) / shots
  alphas[0] = 1.0
  alphas[-1] = alpha
  return Schedule(alphas=alphas)


@dataclasses.dataclass
class ShotReport:
  """What one shot did.

  Attributes
  ----------
  shot : int
      1-based shot index t.
  alpha_t : float
      Target size of this shot.
  realized_size : float
      Fraction of prunable weights live after the shot.
  tau : float
      Selection threshold.
  layers : list of dict
      Per-layer records: type, depth, size, live count, removed rows,
      columns and elements, and the Frobenius norm of the applied update.
  train_loss_before, train_loss_after : float
      Curvature-data loss around the shot.
  test_loss : float or None
      Test loss after the shot when test batches are given.
  lora : dict or None
      Low-rank correction summary when enabled.
  wall_time : float
      Seconds spent on the shot.
  """

  shot: int
  alpha_t: float
  realized_size: float
  tau: float
  layers: list[dict[str, Any]]
  train_loss_before: float
  train_loss_after: float
  test_loss: Optional[float] = None
  lora: Optional[dict[str, Any]] = None
  wall_time: float = 0.0

  def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
    values = dataclasses.asdict(self)
    values['tau'] = None if not np.isfinite(self.tau) else self.tau
    if not include_timing:
      values.pop('wall_time')
    return values

  @classmethod
  def from_dict(cls, values: Mapping[str, Any]) -> 'ShotReport':
    values = dict(values)
    if values.get('tau') is None:
      values['tau'] = -np.inf
    return cls(**values)


@dataclasses.dataclass
class ShotOutcome:
  """A pruned copy of the model plus everything the shot produced."""

  model: harness.ModelCheckpoint
  report: ShotReport
  selection: selection_lib.RemovalSelection
  cost_tables: list[costs.CostTable]
  nkp_factors: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclasses.dataclass
class RunResult:
  model: harness.ModelCheckpoint
  reports: list[ShotReport]
  selection: Optional[selection_lib.RemovalSelection] = None


def _needs_curvature(config: PruneConfig) -> bool:
  return (
      config.cost_policy.needs_curvature
      or config.update is not cs.UpdateKind.NONE
  )


def _estimate_curvature(
    tapes: Mapping[str, harness.LayerTape],
    config: PruneConfig,
    warm: Optional[Mapping[str, tuple[np.ndarray, np.ndarray]]],
) -> tuple[dict[str, curvature.KronCurvature], dict[str, tuple]]:
  """Dampened curvature per layer and the raw nearest-Kronecker factors."""
  curvs, factors = {}, {}
  for name, tape in tapes.items():
    if config.curvature is cs.CurvatureKind.KFAC:
      raw = curvature.accumulate_kfac(tape)
    else:
      init = None if warm is None else warm.get(name)
      result = curvature.nkp_power_method(
          tape,
          init=init,
          iters=cs.NKP_WARM_ITERS if init is not None else config.nkp_iters,
      )
      factors[name] = (result.G, result.A)
      raw = curvature.KronCurvature(
          layer_name=name,
          G=result.G,
          A=result.A,
          sample_count=tape.sample_count,
      )
    curvs[name] = curvature.dampen(raw, config.damp_g, config.damp_a)
  return curvs, factors


def run_shot(
    model: harness.ModelCheckpoint,
    batches: Sequence[harness.Batch],
    config: PruneConfig,
    alpha_t: float,
    shot: int = 1,
    test_batches: Optional[Sequence[harness.Batch]] = None,
    warm_factors: Optional[Mapping[str, tuple[np.ndarray, np.ndarray]]] = None,
) -> ShotOutcome:
  """One shot at target size `alpha_t`, applied to a copy of `model`.

  `config` must be resolved. The caller's model is never modified, so a
  failing shot leaves it intact.
  """
  start = time.perf_counter()
  work = model.copy()
  work.apply_masks()
  layers = work.prunable_layers()

  curvs, factors = {}, {}
  if _needs_curvature(config):
    loss_before, tapes = harness.capture_tapes(work, batches)
    curvs, factors = _estimate_curvature(tapes, config, warm_factors)
  else:
    loss_before = harness.mean_loss(work, batches)

  tables = [
      costs.cost_table(l.name, l.weight, curvs.get(l.name), config.cost_policy)
      for l in layers
  ]
  masks = {l.name: l.mask for l in layers}
  removal = selection_lib.select(config.mode, tables, alpha_t, masks)

  policy = updates.UpdatePolicy(config.update, config.max_correlated)
  records = []
  for depth, (layer, table) in enumerate(zip(layers, tables)):
    chosen = removal.layers[layer.name]
    delta = updates.layer_delta(
        config.mode,
        layer.weight,
        chosen,
        curvs.get(layer.name),
        policy,
        element_order=np.argsort(np.ravel(table.element_costs), kind='stable'),
        strategy=config.joint_strategy,
    )
    mask = layer.mask * chosen.keep_mask(layer.shape)
    new_weight = np.where(mask != 0, layer.weight + delta, 0.0)
    if not np.all(np.isfinite(new_weight)):
      raise errors.NumericFailureError(
          f'Update of layer {layer.name} produced non-finite weights.'
      )
    update_norm = float(np.linalg.norm(new_weight - layer.weight))
    layer.weight, layer.mask = new_weight, mask
    live_rows, live_cols = layer.live_dims()
    records.append({
        'layer': layer.name,
        'type': layer.kind.report_type,
        'depth': depth,
        'size': layer.size,
        'live': layer.live_count(),
        'live_rows': live_rows,
        'live_cols': live_cols,
        'rows_removed': int(chosen.rows.size),
        'cols_removed': int(chosen.cols.size),
        'elements_removed': int(layer.size - layer.live_count()),
        'update_norm': update_norm,
    })

  lora_summary = None
  if config.lora.enabled:
    lora = low_rank.lora_correct(
        work,
        batches,
        rank=config.lora.rank,
        steps=config.lora.steps,
        learning_rate=config.lora.learning_rate,
        seed=config.seed + shot,
    )
    work = lora.model
    lora_summary = {
        'rank': config.lora.rank,
        'steps': config.lora.steps,
        'loss_before': lora.loss_before,
        'loss_after': lora.loss_after,
        'reverted': lora.reverted,
    }

  loss_after = harness.mean_loss(work, batches)
  test_loss = harness.mean_loss(work, test_batches) if test_batches else None
  report = ShotReport(
      shot=shot,
      alpha_t=float(alpha_t),
      realized_size=work.realized_size(),
      tau=removal.tau,
      layers=records,
      train_loss_before=loss_before,
      train_loss_after=loss_after,
      test_loss=test_loss,
      lora=lora_summary,
      wall_time=time.perf_counter() - start,
  )
  logging.info(
      'Shot %d: alpha_t %.4f, realized %.4f, loss %.4f -> %.4f.',
      shot,
      alpha_t,
      report.realized_size,
      loss_before,
      loss_after,
  )
  for record in records:
    logging.debug(
        '  %s: %d of %d live.', record['layer'], record['live'], record['size']
    )
  return ShotOutcome(work, report, removal, tables, factors)


def _write_state(
    directory: pathlib.Path,
    completed: int,
    schedule: Schedule,
    config: PruneConfig,
    factors: Mapping[str, tuple[np.ndarray, np.ndarray]],
) -> None:
  checkpoint = f'shot_{completed:03d}.json'
  state = {
      'completed_shots': completed,
      'alphas': schedule.alphas.tolist(),
      'checkpoint': checkpoint,
      'factors': None,
      'config': config.to_dict(),
  }
  if factors:
    state['factors'] = f'factors_{completed:03d}.json'
    curvature.save_factors(directory / state['factors'], factors)
  (directory / STATE_FILE).write_text(json.dumps(state, indent=2, sort_keys=True))


def _read_reports(path: pathlib.Path, count: int) -> list[ShotReport]:
  lines = path.read_text().splitlines() if path.exists() else []
  if len(lines) < count:
    raise errors.IngestionError(
        f'{path} holds {len(lines)} shot reports, state expects {count}.'
    )
  return [ShotReport.from_dict(json.loads(line)) for line in lines[:count]]


def run(
    model: harness.ModelCheckpoint,
    batches: Sequence[harness.Batch],
    config: PruneConfig,
    test_batches: Optional[Sequence[harness.Batch]] = None,
    output_dir: Optional[PathLike] = None,
    resume: bool = False,
) -> RunResult:
  """Prunes `model` to `config.alpha` over `config.shots` shots.

  With `output_dir`, every completed shot writes an intermediate checkpoint,
  its report line, its cost table and a resume state. With `resume`, the run
  continues after the last completed shot recorded there.
  """
  config = config.resolved()
  if config.alpha >= 1.0:
    logging.info('alpha is 1; nothing to prune.')
    return RunResult(model=model.copy(), reports=[])
  schedule = make_schedule(config.alpha, config.shots)
  directory = pathlib.Path(output_dir) if output_dir is not None else None
  if resume and directory is None:
    raise errors.ConfigurationError('Resuming needs an output directory.')

  current = model.copy()
  reports, warm, first = [], None, 1
  if directory is not None:
    directory.mkdir(parents=True, exist_ok=True)
    if resume and (directory / STATE_FILE).exists():
      state = json.loads((directory / STATE_FILE).read_text())
      if not np.allclose(state['alphas'], schedule.alphas, rtol=0, atol=1e-12):
        raise errors.ConfigurationError(
            f'Resume state in {directory} was written for another schedule.'
        )
      first = state['completed_shots'] + 1
      current = harness.load_checkpoint(directory / state['checkpoint'])
      reports = _read_reports(directory / SHOTS_FILE, first - 1)
      # Drop report lines of a shot that never reached its state write.
      (directory / SHOTS_FILE).write_text(''.join(
          json.dumps(r.to_dict(), sort_keys=True) + '\n' for r in reports
      ))
      if state['factors']:
        warm = curvature.load_factors(directory / state['factors'])
      logging.info('Resuming after shot %d of %d.', first - 1, schedule.shots)
    else:
      for name in (SHOTS_FILE, TIMINGS_FILE):
        (directory / name).write_text('')

  outcome = None
  for shot in range(first, schedule.shots + 1):
    outcome = run_shot(
        current,
        batches,
        config,
        schedule.alphas[shot],
        shot=shot,
        test_batches=test_batches,
        warm_factors=warm,
    )
    current, warm = outcome.model, outcome.nkp_factors or None
    reports.append(outcome.report)
    if directory is not None:
      current.meta.update({
          'label': 'intermediate' if shot < schedule.shots else 'final',
          'shot': shot,
          'alpha_t': float(schedule.alphas[shot]),
      })
      harness.save_checkpoint(current, directory / f'shot_{shot:03d}.json')
      costs.cost_table_frame(outcome.cost_tables).to_csv(
          directory / f'costs_{shot:03d}.csv', index=False
      )
      with open(directory / SHOTS_FILE, 'a') as f:
        f.write(json.dumps(outcome.report.to_dict(), sort_keys=True) + '\n')
      with open(directory / TIMINGS_FILE, 'a') as f:
        f.write(
            json.dumps({'shot': shot, 'wall_time': outcome.report.wall_time})
            + '\n'
        )
      _write_state(directory, shot, schedule, config, outcome.nkp_factors)

  return RunResult(
      model=current,
      reports=reports,
      selection=outcome.selection if outcome is not None else None,
  )
