"""Common types for the pruning toolkit."""

from typing import Any

ArrayLike = Any
