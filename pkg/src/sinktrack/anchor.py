"""Information sources that get anchored onto the BOS position."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, InfoSourceError
from .model import ModelWeights, embed
from .tensor import as_tensor, mean_pool_rows


class SourceForm(str, Enum):
    POOLED = "pooled"
    FULL = "full"


class Origin(str, Enum):
    PROMPT_EMBEDDINGS = "prompt_embeddings"
    EXTERNAL = "external"


@dataclass(frozen=True)
class InfoSource:
    """Feature rows to inject. ``rows`` is ``(m, d_model)``; pooled sources have ``m == 1``."""

    form: SourceForm
    rows: np.ndarray
    origin: Origin

    def __post_init__(self):
        form = SourceForm(self.form)
        rows = as_tensor(self.rows, "info rows").copy()
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise InfoSourceError(f"info rows must be a non-empty matrix, got shape {rows.shape}")
        if form is SourceForm.POOLED and rows.shape[0] != 1:
            raise InfoSourceError(f"pooled source must have exactly one row, got {rows.shape[0]}")
        rows.setflags(write=False)
        object.__setattr__(self, "form", form)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "origin", Origin(self.origin))

    @property
    def d_model(self) -> int:
        return self.rows.shape[1]

    @property
    def vector(self) -> np.ndarray:
        """The single d-vector of a pooled source."""
        if self.form is not SourceForm.POOLED:
            raise InfoSourceError("only pooled sources expose a single vector")
        return self.rows[0]

    def pooled(self) -> "InfoSource":
        if self.form is SourceForm.POOLED:
            return self
        return InfoSource(SourceForm.POOLED, mean_pool_rows(self.rows)[None, :], self.origin)


def default_span(n_tokens: int) -> tuple:
    """Every prompt position except BOS."""
    return (1, n_tokens)


def from_prompt(
    tokens: Sequence[int],
    weights: ModelWeights,
    form: SourceForm | str = SourceForm.POOLED,
    span: Optional[tuple] = None,
) -> InfoSource:
    """Build f_info from the input embeddings of a prompt span.

    ``span`` is a half-open ``(start, stop)`` range of token indices and
    must not include position 0: BOS never anchors its own embedding.
    """
    form = SourceForm(form)
    start, stop = span if span is not None else default_span(len(tokens))
    if start < 1:
        raise InfoSourceError("span must exclude position 0 (BOS)")
    if stop > len(tokens):
        raise InfoSourceError(f"span {start}:{stop} exceeds prompt of {len(tokens)} tokens")
    if stop <= start:
        raise InfoSourceError(f"span {start}:{stop} is empty")
    rows = embed(tokens, weights)[start:stop]
    if form is SourceForm.POOLED:
        rows = mean_pool_rows(rows)[None, :]
    return InfoSource(form, rows, Origin.PROMPT_EMBEDDINGS)


def from_external(matrix, form: SourceForm | str, d_model: int) -> InfoSource:
    """Wrap externally computed features (e.g. from a vision encoder)."""
    form = SourceForm(form)
    matrix = as_tensor(matrix, "external features")
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2:
        raise DimensionError(f"external features must be a matrix, got shape {matrix.shape}")
    if matrix.shape[1] != d_model:
        raise DimensionError(
            f"external features have {matrix.shape[1]} columns, model expects d_model={d_model}"
        )
    if form is SourceForm.POOLED:
        matrix = mean_pool_rows(matrix)[None, :]
    return InfoSource(form, matrix, Origin.EXTERNAL)
