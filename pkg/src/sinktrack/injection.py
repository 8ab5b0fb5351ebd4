"""Context-anchoring interventions on the BOS position.

Three modes are supported on top of the plain runtime:

* ``hard``: overwrite the cached BOS value rows with ``f_info`` after the
  layer has run.
* ``soft``: blend the BOS post-FFN hidden state with ``f_info``,
  ``alpha * h0 + (1 - alpha) * f_info``.
* ``sinktrack``: inside the attention sub-layer, BOS cross-attends to the
  info rows (track 1) while every other token runs ordinary causal
  self-attention over the unmodified sequence (track 2); the two outputs
  are concatenated before the shared output projection.

Cross-attention reuses the layer's own W_Q/W_K/W_V/W_O; nothing is learned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Collection, Optional

import numpy as np

from . import errors
from .anchor import InfoSource, SourceForm
from .model import (
    KVCache,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    attend,
    decoder_block,
    finish_block,
    merge_heads,
    output_projection,
    split_heads,
)
from .tensor import DTYPE, as_tensor, matmul, softmax


class Mode(str, Enum):
    NONE = "none"
    HARD = "hard"
    SOFT = "soft"
    SINKTRACK = "sinktrack"


class ScheduleKind(str, Enum):
    ALL = "all"
    EVERY_K = "every_k"
    EXPLICIT = "explicit"


class StrengthKind(str, Enum):
    CONSTANT = "constant"
    LINEAR_DECAY = "linear_decay"
    LINEAR_INCREASE = "linear_increase"


@dataclass(frozen=True)
class LayerSchedule:
    kind: ScheduleKind | str = ScheduleKind.EVERY_K
    k: int = 5
    offset: int = 0
    layers: tuple = ()

    @classmethod
    def all(cls) -> "LayerSchedule":
        return cls(ScheduleKind.ALL)

    @classmethod
    def every(cls, k: int = 5, offset: int = 0) -> "LayerSchedule":
        return cls(ScheduleKind.EVERY_K, k=k, offset=offset)

    @classmethod
    def explicit(cls, layers) -> "LayerSchedule":
        return cls(ScheduleKind.EXPLICIT, layers=tuple(layers))

    def resolve(self, n_layers: int) -> tuple:
        try:
            kind = ScheduleKind(self.kind)
        except ValueError:
            raise errors.ScheduleError(f"unknown schedule kind {self.kind!r}") from None
        if kind is ScheduleKind.ALL:
            return tuple(range(n_layers))
        if kind is ScheduleKind.EVERY_K:
            if int(self.k) < 1:
                raise errors.ScheduleError(f"every_k needs k >= 1, got {self.k}")
            if int(self.offset) < 0:
                raise errors.ScheduleError(f"every_k offset must be >= 0, got {self.offset}")
            if self.offset >= n_layers:
                raise errors.LayerRangeError(
                    f"every_k offset {self.offset} is not a layer of a {n_layers}-layer model"
                )
            return tuple(range(int(self.offset), n_layers, int(self.k)))
        layers = tuple(int(l) for l in self.layers)
        if not layers:
            raise errors.ScheduleError("explicit schedule needs at least one layer")
        if list(layers) != sorted(set(layers)):
            raise errors.ScheduleError(f"explicit layers must be sorted and unique, got {layers}")
        bad = [l for l in layers if not 0 <= l < n_layers]
        if bad:
            raise errors.LayerRangeError(f"layers {bad} outside [0, {n_layers})")
        return layers


@dataclass(frozen=True)
class StrengthSchedule:
    """Per-layer soft-injection strength ``alpha`` (the weight kept on h0).

    Since ``1 - alpha`` is the injected fraction, ``linear_decay`` (injection
    fading with depth) runs alpha upward from ``alpha_start`` to
    ``alpha_end``, and ``linear_increase`` runs it downward.
    """

    kind: StrengthKind | str = StrengthKind.CONSTANT
    alpha_start: float = 1.0
    alpha_end: Optional[float] = None

    @classmethod
    def constant(cls, alpha: float) -> "StrengthSchedule":
        return cls(StrengthKind.CONSTANT, alpha)

    def alphas(self, n: int) -> tuple:
        """Strengths for ``n`` scheduled layers in ascending layer order."""
        kind = StrengthKind(self.kind)
        if kind is StrengthKind.CONSTANT or n == 1:
            return (float(self.alpha_start),) * n
        a, b = float(self.alpha_start), float(self.alpha_end)
        return tuple(a + (b - a) * i / (n - 1) for i in range(n))


@dataclass(frozen=True)
class InjectionPlan:
    mode: Mode | str = Mode.SINKTRACK
    schedule: LayerSchedule = field(default_factory=LayerSchedule)
    strength: Optional[StrengthSchedule] = None
    # None picks the mode default: full for sinktrack, pooled for hard/soft.
    source_form: Optional[SourceForm | str] = None


NONE_PLAN = InjectionPlan(Mode.NONE)


@dataclass(frozen=True)
class ResolvedPlan:
    mode: Mode
    layers: tuple
    alphas: tuple  # aligned with layers; empty unless soft
    source_form: Optional[SourceForm]
    n_layers: int

    @property
    def layer_set(self) -> frozenset:
        return frozenset(self.layers)

    def alpha_for(self, layer: int) -> float:
        return self.alphas[self.layers.index(layer)]


def _check_alpha(value, label):
    if value is None:
        raise errors.StrengthMissingError(f"{label} is required")
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise errors.StrengthRangeError(f"{label}={value} outside [0, 1]")
    return value


def validate_plan(plan: InjectionPlan | ResolvedPlan, config: ModelConfig) -> ResolvedPlan:
    """Check every plan invariant against ``config`` and resolve the layer list."""
    if isinstance(plan, ResolvedPlan):
        if plan.n_layers != config.n_layers:
            raise errors.LayerRangeError(
                f"plan resolved for {plan.n_layers} layers, model has {config.n_layers}"
            )
        return plan
    try:
        mode = Mode(plan.mode)
    except ValueError:
        raise errors.UnknownModeError(f"unknown injection mode {plan.mode!r}") from None

    layers = plan.schedule.resolve(config.n_layers)

    alphas: tuple = ()
    if mode is Mode.SOFT:
        st = plan.strength
        if st is None:
            raise errors.StrengthMissingError("soft mode needs a strength schedule")
        try:
            kind = StrengthKind(st.kind)
        except ValueError:
            raise errors.PlanError(f"unknown strength kind {st.kind!r}") from None
        start = _check_alpha(st.alpha_start, "alpha_start")
        if kind is StrengthKind.CONSTANT:
            if st.alpha_end is not None and float(st.alpha_end) != start:
                raise errors.StrengthOrderError("constant strength cannot have a different alpha_end")
        else:
            end = _check_alpha(st.alpha_end, "alpha_end")
            if kind is StrengthKind.LINEAR_DECAY and not start < end:
                raise errors.StrengthOrderError(
                    f"linear_decay needs alpha_start < alpha_end, got {start} and {end}"
                )
            if kind is StrengthKind.LINEAR_INCREASE and not start > end:
                raise errors.StrengthOrderError(
                    f"linear_increase needs alpha_start > alpha_end, got {start} and {end}"
                )
        alphas = st.alphas(len(layers))
    elif plan.strength is not None:
        raise errors.StrengthNotAllowedError(f"{mode.value} mode takes no strength schedule")

    form = None
    if mode is not Mode.NONE:
        default = SourceForm.FULL if mode is Mode.SINKTRACK else SourceForm.POOLED
        try:
            form = SourceForm(plan.source_form) if plan.source_form is not None else default
        except ValueError:
            raise errors.SourceFormError(f"unknown source form {plan.source_form!r}") from None
        if mode in (Mode.HARD, Mode.SOFT) and form is not SourceForm.POOLED:
            raise errors.SourceFormError(f"{mode.value} mode needs a pooled information source")

    return ResolvedPlan(mode, layers, alphas, form, config.n_layers)


def prepare_info(plan: ResolvedPlan, info: Optional[InfoSource], config: ModelConfig):
    """Bring ``info`` into the form the plan needs (pooling a full source if asked)."""
    if plan.mode is Mode.NONE:
        return info
    if info is None:
        raise errors.InfoSourceError(f"{plan.mode.value} mode needs an information source")
    if info.d_model != config.d_model:
        raise errors.DimensionError(
            f"info rows have width {info.d_model}, model d_model={config.d_model}"
        )
    if plan.source_form is SourceForm.POOLED:
        return info.pooled()
    if info.form is not SourceForm.FULL:
        raise errors.SourceFormError("plan asks for the full source but a pooled one was given")
    return info


def hard_inject(cache: KVCache, layer: int, f_info) -> None:
    """Overwrite the cached BOS value rows of ``layer`` with ``f_info``.

    Head ``h`` receives the contiguous slice ``f_info[h*dh:(h+1)*dh]``.
    Keys are untouched.
    """
    cfg = cache.config
    f_info = as_tensor(f_info, "f_info")
    if f_info.shape != (cfg.d_model,):
        raise errors.DimensionError(f"f_info has shape {f_info.shape}, expected ({cfg.d_model},)")
    cache.set_bos_value(layer, f_info.reshape(cfg.n_heads, cfg.d_head))


def soft_inject(h0, f_info, alpha: float) -> np.ndarray:
    h0 = as_tensor(h0, "h0")
    f_info = as_tensor(f_info, "f_info")
    if h0.shape != f_info.shape:
        raise errors.DimensionError(f"soft_inject shape mismatch: {h0.shape} vs {f_info.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise errors.StrengthRangeError(f"alpha={alpha} outside [0, 1]")
    # One rounding at the end keeps every component between h0 and f_info.
    a = float(alpha)
    return (a * h0.astype(np.float64) + (1.0 - a) * f_info.astype(np.float64)).astype(DTYPE)


def _cross_heads(q_first: np.ndarray, rows: np.ndarray, lw: LayerWeights, n_heads: int):
    """Per-head cross-attention of one query onto the info rows.

    ``q_first`` is ``(H, 1, dh)``. Returns the head outputs merged into a
    ``(1, d)`` row (pre output projection) and the ``(H, m)`` weights.
    """
    d = rows.shape[1]
    kv = matmul(rows, lw.wkv)
    k = split_heads(kv[:, :d], n_heads)
    v = split_heads(kv[:, d:], n_heads)
    dh = q_first.shape[-1]
    scores = matmul(q_first, k.transpose(0, 2, 1)) * DTYPE(1.0 / math.sqrt(dh))
    probs = softmax(scores)
    return merge_heads(matmul(probs, v)), probs[:, 0, :]


def cross_attend_bos(h0, f_info_rows, lw: LayerWeights, n_heads: int) -> np.ndarray:
    """BOS as query, info rows as keys and values, through the layer's own projections."""
    h0 = as_tensor(h0, "h0")
    rows = as_tensor(f_info_rows, "f_info rows")
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[0] == 0:
        raise errors.EmptyInputError("cross-attention needs at least one info row")
    if rows.shape[1] != h0.shape[0]:
        raise errors.DimensionError(f"info rows {rows.shape} do not match h0 {h0.shape}")
    q = split_heads(matmul(h0[None, :], lw.wq), n_heads)
    o, _ = _cross_heads(q, rows, lw, n_heads)
    return output_projection(o, lw)[0]


def dual_track_attention(
    h: np.ndarray,
    layer: int,
    f_info_rows,
    cache: KVCache,
    weights: ModelWeights,
    *,
    scheduled_layers: Collection[int],
    recorder=None,
    step: int = 0,
) -> np.ndarray:
    """Attention sub-layer output with BOS on the injection track.

    Rows ``1..n-1`` come from causal self-attention over the original
    sequence and are bitwise what the plain layer would produce. Row 0 is
    replaced by BOS's cross-attention onto the info rows. The cache receives
    the K/V of the original sequence.
    """
    if layer not in scheduled_layers:
        raise errors.ContractError(f"layer {layer} is not scheduled for injection")
    if cache.layer_length(layer) != 0:
        raise errors.ContractError("dual-track attention runs during prefill only (BOS at row 0)")
    rows = np.asarray(f_info_rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise errors.EmptyInputError("dual-track attention needs at least one info row")
    cfg = weights.config
    lw = weights.layers[layer]
    o, q = attend(h, lw, cache, layer, recorder, step, return_q=True)
    o_first, _ = _cross_heads(q[:, :1], rows, lw, cfg.n_heads)
    o[0] = o_first[0]
    return output_projection(o, lw)


def apply_plan_at_layer(
    h: np.ndarray,
    layer: int,
    plan: ResolvedPlan,
    info: Optional[InfoSource],
    cache: KVCache,
    weights: ModelWeights,
    recorder=None,
    step: int = 0,
) -> np.ndarray:
    """One decoder block under ``plan``. Unscheduled layers take the plain path."""
    if plan.mode is Mode.NONE or layer not in plan.layer_set:
        return decoder_block(h, layer, weights, cache, recorder, step)
    if plan.mode is Mode.HARD:
        out = decoder_block(h, layer, weights, cache, recorder, step)
        hard_inject(cache, layer, info.vector)
        return out
    if plan.mode is Mode.SOFT:
        out = decoder_block(h, layer, weights, cache, recorder, step)
        out[0] = soft_inject(out[0], info.vector, plan.alpha_for(layer))
        return out
    lw = weights.layers[layer]
    attn = dual_track_attention(
        h, layer, info.rows, cache, weights,
        scheduled_layers=plan.layer_set, recorder=recorder, step=step,
    )
    return finish_block(h, attn, lw, weights.config.ln_eps)
