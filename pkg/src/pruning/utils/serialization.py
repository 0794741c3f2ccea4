"""Manifest + blob tensor storage.

A store is a JSON manifest listing every tensor by name, shape, dtype and
byte range, next to a single binary blob holding the tensors back to back as
little-endian, row-major float64. Round trips are bit exact.
"""

from collections.abc import Mapping
import dataclasses
import json
import pathlib
from typing import Any, Union

import numpy as np

from . import errors

PathLike = Union[str, pathlib.Path]

_DTYPE_NAME = 'f64'
_WIRE_DTYPE = np.dtype('<f8')
_FORMAT_VERSION = 1


@dataclasses.dataclass
class TensorEntry:
  """Location of one tensor inside the blob."""

  name: str
  shape: tuple[int, ...]
  dtype: str
  offset: int
  length: int

  def to_dict(self) -> dict[str, Any]:
    return {
        'name': self.name,
        'shape': list(self.shape),
        'dtype': self.dtype,
        'offset': self.offset,
        'length': self.length,
    }


def blob_path(manifest_path: PathLike) -> pathlib.Path:
  """The blob file paired with `manifest_path`."""
  return pathlib.Path(manifest_path).with_suffix('.bin')


def write_store(
    manifest_path: PathLike,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping[str, Any],
) -> pathlib.Path:
  """Writes `tensors` (in iteration order) and `meta` to a manifest + blob."""
  manifest_path = pathlib.Path(manifest_path)
  manifest_path.parent.mkdir(parents=True, exist_ok=True)
  entries = []
  chunks = []
  offset = 0
  for name, value in tensors.items():
    array = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
    raw = array.astype(_WIRE_DTYPE, copy=False).tobytes(order='C')
    entries.append(
        TensorEntry(
            name=name,
            shape=tuple(int(d) for d in array.shape),
            dtype=_DTYPE_NAME,
            offset=offset,
            length=len(raw),
        )
    )
    chunks.append(raw)
    offset += len(raw)

  blob = blob_path(manifest_path)
  blob.write_bytes(b''.join(chunks))
  manifest = {
      'format_version': _FORMAT_VERSION,
      'blob': blob.name,
      'tensors': [e.to_dict() for e in entries],
      'meta': dict(meta),
  }
  manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
  return manifest_path


def read_store(
    manifest_path: PathLike,
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
  """Reads a manifest + blob written by `write_store`."""
  manifest_path = pathlib.Path(manifest_path)
  try:
    manifest = json.loads(manifest_path.read_text())
  except (OSError, json.JSONDecodeError) as e:
    raise errors.IngestionError(f'Cannot read manifest {manifest_path}: {e}')

  try:
    raw = (manifest_path.parent / manifest['blob']).read_bytes()
  except (OSError, KeyError) as e:
    raise errors.IngestionError(f'Cannot read blob of {manifest_path}: {e}')
  tensors = {}
  for entry in manifest['tensors']:
    if entry['dtype'] != _DTYPE_NAME:
      raise errors.IngestionError(
          f'Tensor {entry["name"]} has unsupported dtype {entry["dtype"]}.'
      )
    start, stop = entry['offset'], entry['offset'] + entry['length']
    if stop > len(raw):
      raise errors.IngestionError(
          f'Tensor {entry["name"]} overruns the blob ({stop} > {len(raw)}).'
      )
    values = np.frombuffer(raw[start:stop], dtype=_WIRE_DTYPE)
    tensors[entry['name']] = values.astype(np.float64).reshape(entry['shape'])
  return tensors, manifest.get('meta', {})
