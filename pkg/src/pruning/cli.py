"""Command-line interface: train, prune, eval, report and verify.

Usage:
  python -m src.pruning.cli train --output_dir=runs/base
  python -m src.pruning.cli prune --checkpoint=runs/base/model.json \
      --mode=structured --alpha=0.8 --output_dir=runs/pruned
  python -m src.pruning.cli eval --checkpoint=runs/pruned/pruned.json
  python -m src.pruning.cli report --reports=runs/pruned/shots.jsonl \
      --output_dir=runs/pruned/report
  python -m src.pruning.cli verify

Flags override the JSON file given by --config, which overrides defaults.
Only flags given on the command line override anything. Exit codes: 0 on
success, 2 for configuration errors, 3 for infeasible targets and 4 for
numerical failures.
"""

from collections.abc import Sequence
import json
import pathlib
from typing import Any, Optional, Union

from absl import app
from absl import flags
from absl import logging
import numpy as np

from .surgery import config as config_lib
from .surgery import constants as cs
from .surgery import corpus
from .surgery import harness
from .surgery import reports
from .surgery import surgeon
from .surgery import training
from .surgery import verification
from .utils import errors

PathLike = Union[str, pathlib.Path]

COMMANDS = ('train', 'prune', 'eval', 'report', 'verify')
BUNDLED_CORPUS = pathlib.Path(__file__).parent / 'data' / 'tiny_corpus.txt'

_CONFIG = flags.DEFINE_string('config', None, 'JSON config file.')
_OUTPUT_DIR = flags.DEFINE_string('output_dir', 'runs', 'Output directory.')
_CHECKPOINT = flags.DEFINE_string('checkpoint', None, 'Checkpoint manifest.')
_REPORTS = flags.DEFINE_string('reports', None, 'Shot-report JSONL file.')
_RESUME = flags.DEFINE_bool('resume', False, 'Resume an interrupted prune.')
_INSTANCES = flags.DEFINE_integer('instances', 50, 'Random verify instances.')

# PruneConfig.
flags.DEFINE_enum('mode', None, [m.value for m in cs.PruneMode], 'Granularity.')
flags.DEFINE_float('alpha', None, 'Target fraction of weights to keep.')
flags.DEFINE_integer('shots', None, 'Number of shots T.')
flags.DEFINE_enum('method', None, sorted(cs.METHODS), 'Method preset.')
flags.DEFINE_enum(
    'cost_policy', None, [p.value for p in cs.CostPolicy], 'Cost policy.'
)
flags.DEFINE_enum('update', None, [u.value for u in cs.UpdateKind], 'Update.')
flags.DEFINE_integer('max_correlated', None, 'Correlated-update batch cap m.')
flags.DEFINE_float('damp_g', None, 'Dampening fraction of G.')
flags.DEFINE_float('damp_a', None, 'Dampening fraction of A.')
flags.DEFINE_enum(
    'curvature', None, [k.value for k in cs.CurvatureKind], 'Curvature fit.'
)
flags.DEFINE_integer('nkp_iters', None, 'Cold-start power iterations.')
flags.DEFINE_enum(
    'joint_strategy', None, [s.value for s in cs.JointStrategy],
    'Joint row and column update strategy.',
)
flags.DEFINE_bool('lora', None, 'Interleave low-rank corrections.')
flags.DEFINE_integer('lora_rank', None, 'Low-rank correction rank.')
flags.DEFINE_integer('lora_steps', None, 'Low-rank correction steps.')
flags.DEFINE_float('lora_lr', None, 'Low-rank correction learning rate.')
flags.DEFINE_integer('seed', None, 'Random seed.')

# DataConfig.
flags.DEFINE_string('corpus', None, 'Training corpus (defaults to bundled).')
flags.DEFINE_integer('seq_len', None, 'Sequence length.')
flags.DEFINE_integer('batch_size', None, 'Sequences per batch.')
flags.DEFINE_integer('num_batches', None, 'Curvature batches.')
flags.DEFINE_float('test_fraction', None, 'Final fraction used for test.')

# TrainConfig.
flags.DEFINE_enum(
    'architecture', None, [a.value for a in cs.Architecture], 'Model family.'
)
flags.DEFINE_list('hidden_dims', None, 'Hidden widths.')
flags.DEFINE_integer('embed_dim', None, 'Embedding / model width.')
flags.DEFINE_integer('context', None, 'MLP context length.')
flags.DEFINE_integer('epochs', None, 'Training epochs.')
flags.DEFINE_float('learning_rate', None, 'Training learning rate.')
flags.DEFINE_float('momentum', None, 'Training momentum.')

FLAGS = flags.FLAGS

_PRUNE_FLAGS = {
    'mode': ('mode',),
    'alpha': ('alpha',),
    'shots': ('shots',),
    'method': ('method',),
    'cost_policy': ('cost_policy',),
    'update': ('update',),
    'max_correlated': ('max_correlated',),
    'damp_g': ('damp_g',),
    'damp_a': ('damp_a',),
    'curvature': ('curvature',),
    'nkp_iters': ('nkp_iters',),
    'joint_strategy': ('joint_strategy',),
    'lora': ('lora', 'enabled'),
    'lora_rank': ('lora', 'rank'),
    'lora_steps': ('lora', 'steps'),
    'lora_lr': ('lora', 'learning_rate'),
    'seed': ('seed',),
}
_DATA_FLAGS = {
    'corpus': ('data', 'train_path'),
    'seq_len': ('data', 'seq_len'),
    'batch_size': ('data', 'batch_size'),
    'num_batches': ('data', 'num_batches'),
    'test_fraction': ('data', 'test_fraction'),
}
_TRAIN_FLAGS = {
    'architecture': ('model', 'architecture'),
    'hidden_dims': ('model', 'hidden_dims'),
    'embed_dim': ('model', 'embed_dim'),
    'context': ('model', 'context'),
    'epochs': ('epochs',),
    'learning_rate': ('learning_rate',),
    'momentum': ('momentum',),
    'seed': ('seed',),
}


def flag_overrides(mapping: dict[str, tuple[str, ...]]) -> dict[str, Any]:
  """Nested overrides from the flags present on the command line."""
  overrides = {}
  for flag_name, path in mapping.items():
    if not FLAGS[flag_name].present:
      continue
    value = FLAGS[flag_name].value
    if flag_name == 'hidden_dims':
      value = [int(v) for v in value]
    node = overrides
    for key in path[:-1]:
      node = node.setdefault(key, {})
    node[path[-1]] = value
  return overrides


def _write_json(path: pathlib.Path, values: Any) -> pathlib.Path:
  path.parent.mkdir(parents=True, exist_ok=True)
  path.write_text(json.dumps(values, indent=2, sort_keys=True))
  return path


def _corpus_path(data: config_lib.DataConfig) -> pathlib.Path:
  return pathlib.Path(data.train_path) if data.train_path else BUNDLED_CORPUS


def _split(
    text: corpus.Corpus, data: config_lib.DataConfig, split: cs.Split, seed: int
) -> list[corpus.Batch]:
  return corpus.corpus_batches(
      text,
      split,
      seq_len=data.seq_len,
      num_batches=data.num_batches,
      batch_size=data.batch_size,
      seed=seed,
      test_fraction=data.test_fraction,
  )


def check_vocabulary(model: harness.ModelCheckpoint, text: corpus.Corpus) -> None:
  """Raises HarnessError if the corpus vocabulary differs from the model's."""
  expected = model.meta.get('vocab')
  if expected is not None and list(expected) != list(text.vocab):
    raise errors.HarnessError(
        f'Vocabulary mismatch: model has {len(expected)} symbols, corpus'
        f' {text.vocab_size} ({bytes(text.vocab)!r}).'
    )
  if text.vocab_size != model.config.vocab_size:
    raise errors.HarnessError(
        f'Vocabulary mismatch: model expects {model.config.vocab_size} symbols,'
        f' corpus has {text.vocab_size}.'
    )


def cmd_train(
    config: config_lib.TrainConfig, output_dir: PathLike
) -> pathlib.Path:
  """Trains a toy model; writes model.json, training_log.json and config."""
  directory = pathlib.Path(output_dir)
  text = corpus.read_corpus(_corpus_path(config.data))
  if text.vocab_size != config.model.vocab_size:
    logging.info(
        'Setting vocab_size to the corpus vocabulary (%d).', text.vocab_size
    )
    config.model.vocab_size = text.vocab_size
  config.validate()
  config_lib.write_resolved(config, directory / 'resolved_config.json')
  result = training.train_model(
      config,
      _split(text, config.data, cs.Split.TRAIN, config.seed),
      _split(text, config.data, cs.Split.TEST, config.seed),
  )
  result.model.meta['vocab'] = list(text.vocab)
  result.model.meta['baseline_loss'] = result.baseline_loss
  _write_json(directory / 'training_log.json', result.log)
  path = harness.save_checkpoint(result.model, directory / 'model.json')
  logging.info('Trained model written to %s.', path)
  return path


def cmd_prune(
    config: config_lib.PruneConfig,
    checkpoint: PathLike,
    output_dir: PathLike,
    resume: bool = False,
) -> pathlib.Path:
  """Prunes a checkpoint; writes pruned.json, shots.jsonl and selection.json."""
  directory = pathlib.Path(output_dir)
  config = config.resolved()
  model = harness.load_checkpoint(checkpoint)
  text = corpus.read_corpus(_corpus_path(config.data))
  check_vocabulary(model, text)
  config_lib.write_resolved(config, directory / 'resolved_config.json')
  result = surgeon.run(
      model,
      _split(text, config.data, cs.Split.TRAIN, config.seed),
      config,
      test_batches=_split(text, config.data, cs.Split.TEST, config.seed),
      output_dir=directory,
      resume=resume,
  )
  if result.selection is not None:
    records = result.selection.to_records()
  else:
    records = [
        {'layer': l.name, 'rows': [], 'cols': [], 'elements': []}
        for l in model.prunable_layers()
    ]
  _write_json(directory / 'selection.json', records)
  result.model.meta['label'] = 'final'
  path = harness.save_checkpoint(result.model, directory / 'pruned.json')
  logging.info(
      'Pruned model written to %s (realized size %.4f).',
      path,
      result.model.realized_size(),
  )
  return path


def cmd_eval(
    checkpoint: PathLike, data: config_lib.DataConfig, seed: int = 0
) -> dict[str, Any]:
  """Test loss, perplexity and live-parameter count of a checkpoint."""
  model = harness.load_checkpoint(checkpoint)
  text = corpus.read_corpus(_corpus_path(data))
  check_vocabulary(model, text)
  loss = harness.mean_loss(model, _split(text, data, cs.Split.TEST, seed))
  metrics = {
      'test_loss': loss,
      'perplexity': float(np.exp(loss)),
      'live_parameters': model.live_parameters(),
      'total_parameters': model.prunable_size(),
  }
  logging.info('Metrics of %s: %s', checkpoint, metrics)
  return metrics


def cmd_report(reports_path: PathLike, output_dir: PathLike) -> dict[str, Any]:
  return reports.write_report(reports.read_shot_reports(reports_path), output_dir)


def cmd_verify(
    instances: int, seed: int, output_dir: Optional[PathLike] = None
) -> verification.VerificationReport:
  """Runs the oracle suite; raises NumericFailureError on any violation."""
  report = verification.run_suite(instances=instances, seed=seed)
  if output_dir is not None:
    directory = pathlib.Path(output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    report.frame.to_csv(directory / 'verification.csv', index=False)
  if not report.passed:
    failed = report.frame.loc[~report.frame['passed'], 'check'].tolist()
    raise errors.NumericFailureError(f'Oracle checks failed: {failed}.')
  logging.info('All oracle checks passed in %.1f s.', report.seconds)
  return report


def run_command(command: str) -> int:
  """Runs `command` with the parsed flags and returns its exit code."""
  try:
    if command == 'train':
      overrides = flag_overrides(_TRAIN_FLAGS)
      overrides.update(flag_overrides(_DATA_FLAGS))
      config = config_lib.resolve_train_config(_CONFIG.value, overrides)
      cmd_train(config, _OUTPUT_DIR.value)
    elif command == 'prune':
      if _CHECKPOINT.value is None:
        raise errors.ConfigurationError('prune needs --checkpoint.')
      overrides = flag_overrides(_PRUNE_FLAGS)
      overrides.update(flag_overrides(_DATA_FLAGS))
      config = config_lib.resolve_prune_config(_CONFIG.value, overrides)
      cmd_prune(config, _CHECKPOINT.value, _OUTPUT_DIR.value, _RESUME.value)
    elif command == 'eval':
      if _CHECKPOINT.value is None:
        raise errors.ConfigurationError('eval needs --checkpoint.')
      config = config_lib.resolve_prune_config(
          _CONFIG.value, flag_overrides(_DATA_FLAGS)
      )
      metrics = cmd_eval(_CHECKPOINT.value, config.data, config.seed)
      _write_json(pathlib.Path(_OUTPUT_DIR.value) / 'metrics.json', metrics)
    elif command == 'report':
      path = _REPORTS.value or pathlib.Path(_OUTPUT_DIR.value) / 'shots.jsonl'
      cmd_report(path, _OUTPUT_DIR.value)
    elif command == 'verify':
      seed = FLAGS.seed if FLAGS.seed is not None else 0
      cmd_verify(_INSTANCES.value, seed, _OUTPUT_DIR.value)
    else:
      raise errors.ConfigurationError(
          f'Unknown command {command!r}; expected one of {", ".join(COMMANDS)}.'
      )
  except errors.SurgeryError as e:
    logging.error('%s failed: %s', command, e)
    return e.exit_code
  return 0


def main(argv: Sequence[str]) -> int:
  if len(argv) != 2:
    logging.error('Usage: cli {%s} [flags]', '|'.join(COMMANDS))
    return errors.ConfigurationError.exit_code
  return run_command(argv[1])


if __name__ == '__main__':
  app.run(main)
