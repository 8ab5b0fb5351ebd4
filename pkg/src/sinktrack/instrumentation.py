"""Attention traces and the analyses run over them.

Trace file format (JSON lines). Attention records::

    {"step": 3, "layer": 0, "head": 1, "qpos": 66, "weights": [...]}

``step`` 0 is the prefill pass, step ``g >= 1`` is the decode step that
processes generated token ``g``. ``weights`` spans every key present when
the query ran, so prefill rows carry explicit zeros for future positions.
An optional ``"query"`` array holds the query vector when captured.
BOS value snapshots, taken after prefill, use separate lines::

    {"layer": 0, "bos_value": [...]}
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal, localcontext
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, InputError, TraceError
from .tensor import DTYPE, l1_norm

SUM_TOL = 1e-6


@dataclass
class TraceRecord:
    step: int
    layer: int
    head: int
    qpos: int
    weights: np.ndarray
    query: Optional[np.ndarray] = None

    def to_json(self) -> dict:
        d = {
            "step": self.step,
            "layer": self.layer,
            "head": self.head,
            "qpos": self.qpos,
            "weights": self.weights.tolist(),
        }
        if self.query is not None:
            d["query"] = self.query.tolist()
        return d


def _validate_weights(weights: np.ndarray, qpos: int) -> None:
    if weights.ndim != 1 or weights.size < qpos + 1:
        raise TraceError(f"weights of shape {weights.shape} cannot cover query position {qpos}")
    if not np.isfinite(weights).all() or (weights < 0).any():
        raise TraceError("attention weights must be finite and non-negative")
    total = float(weights.astype(np.float64).sum())
    if abs(total - 1.0) > SUM_TOL:
        raise TraceError(f"attention weights sum to {total!r}, not 1")
    if (weights[qpos + 1:] != 0).any():
        raise TraceError(f"attention mass beyond query position {qpos}")


class AttentionTrace:
    """Collects attention records for one generation session.

    With ``path`` set, records stream to a JSON-lines file as they arrive;
    ``keep=False`` then drops them from memory.
    """

    def __init__(self, path=None, *, keep: bool = True, capture_queries: bool = False):
        self.records: list = []
        self.bos_values: Optional[list] = None
        self.keep = keep
        self.capture_queries = capture_queries
        self.path = Path(path) if path is not None else None
        self._fh = open(self.path, "w", encoding="utf-8") if self.path is not None else None
        self.n_records = 0

    def __len__(self) -> int:
        return self.n_records

    def __iter__(self):
        return iter(self.records)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _append(self, rec: TraceRecord) -> None:
        if self.keep:
            self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec.to_json()) + "\n")
        self.n_records += 1

    def record(self, step, layer, head, qpos, weights, query=None) -> None:
        weights = np.array(weights, dtype=DTYPE)
        _validate_weights(weights, int(qpos))
        q = None if query is None else np.array(query, dtype=DTYPE)
        self._append(TraceRecord(int(step), int(layer), int(head), int(qpos), weights, q))

    def record_block(self, step, layer, q_start, probs, queries=None) -> None:
        """Record a ``(H, nq, nk)`` block of causal attention weights."""
        n_heads, nq, nk = probs.shape
        sums = probs.astype(np.float64).sum(axis=-1)
        if np.abs(sums - 1.0).max() > SUM_TOL:
            raise TraceError("attention rows do not sum to 1")
        future = np.arange(nk)[None, :] > np.arange(q_start, q_start + nq)[:, None]
        if (probs[:, future] != 0).any():
            raise TraceError("attention mass on future positions")
        for h in range(n_heads):
            for i in range(nq):
                q = None if queries is None else queries[h, i].copy()
                self._append(TraceRecord(step, layer, h, q_start + i, probs[h, i].copy(), q))

    def set_bos_values(self, vectors: Sequence[np.ndarray]) -> None:
        self.bos_values = [np.array(v, dtype=DTYPE) for v in vectors]
        if self._fh is not None:
            for layer, v in enumerate(self.bos_values):
                self._fh.write(json.dumps({"layer": layer, "bos_value": v.tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "AttentionTrace":
        trace = cls()
        bos = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise TraceError(f"{path}:{lineno}: {exc}") from None
                if "bos_value" in obj:
                    bos[int(obj["layer"])] = np.array(obj["bos_value"], dtype=DTYPE)
                    continue
                try:
                    trace.record(obj["step"], obj["layer"], obj["head"], obj["qpos"],
                                 obj["weights"], obj.get("query"))
                except KeyError as exc:
                    raise TraceError(f"{path}:{lineno}: missing key {exc}") from None
        if bos:
            trace.bos_values = [bos[l] for l in sorted(bos)]
        return trace

    def replay(self) -> "AttentionTrace":
        """A trace with records in memory, re-reading the file if they were dropped."""
        if self.keep:
            return self
        if self.path is None:
            raise TraceError("records were neither kept nor written to a file")
        if self._fh is not None:
            self._fh.flush()
        return AttentionTrace.load(self.path)

    def steps(self) -> list:
        return sorted({r.step for r in self.records})

    def by_step(self, step: int) -> list:
        return [r for r in self.records if r.step == step]

    def n_layers(self) -> int:
        return 1 + max(r.layer for r in self.records)


# ---------------------------------------------------------------- drift

@dataclass
class DriftRow:
    generated_index: int
    sequence_position: int
    attn_to_bos: float
    max_attn_others: float
    ratio: float
    per_layer_attn_to_bos: list = field(default_factory=list)


@dataclass
class DriftReport:
    rows: list

    COLUMNS = ("generated_index", "sequence_position", "attn_to_bos", "max_attn_others", "ratio")


def drift_metrics(avg: np.ndarray, bos_position: int = 0) -> tuple:
    """(attn to BOS, max attention elsewhere, ratio) for one averaged row."""
    avg = np.asarray(avg, dtype=np.float64)
    bos = float(avg[bos_position])
    others = np.delete(avg, bos_position)
    max_others = float(others.max()) if others.size else 0.0
    ratio = bos / max_others if max_others > 0 else math.inf
    return bos, max_others, ratio


def drift_report(trace: AttentionTrace, bos_position: int = 0) -> DriftReport:
    """Per decode step: the newest token's attention, averaged over heads and layers."""
    if len(trace.records) == 0:
        raise TraceError("drift report needs a non-empty trace")
    rows = []
    grouped: dict = {}
    for r in trace.records:
        if r.step >= 1:
            grouped.setdefault(r.step, []).append(r)
    for step in sorted(grouped):
        recs = grouped[step]
        qpos = max(r.qpos for r in recs)
        recs = [r for r in recs if r.qpos == qpos]
        stack = np.stack([r.weights[: qpos + 1].astype(np.float64) for r in recs])
        bos, max_others, ratio = drift_metrics(stack.mean(axis=0), bos_position)
        layers = sorted({r.layer for r in recs})
        per_layer = [
            float(np.mean([r.weights[bos_position] for r in recs if r.layer == l], dtype=np.float64))
            for l in layers
        ]
        rows.append(DriftRow(step, qpos + 1, bos, max_others, ratio, per_layer))
    return DriftReport(rows)


# ---------------------------------------------------------------- spearman

@dataclass
class SpearmanResult:
    rho: float
    p_value: float
    n: int

    COLUMNS = ("rho", "p_value", "n")


def average_ranks(values: Sequence[float]) -> list:
    """1-based ranks, ties sharing the mean of their positions (as Fractions)."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [Fraction(0)] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        r = Fraction(i + j + 2, 2)
        for t in range(i, j + 1):
            ranks[order[t]] = r
        i = j + 1
    return ranks


def _exact_pearson(rx: Sequence[Fraction], ry: Sequence[Fraction]) -> float:
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        raise InputError("rank correlation is undefined for constant input")
    if vx == vy:
        return float(cov / vx)
    r2 = cov * cov / (vx * vy)
    with localcontext() as ctx:
        ctx.prec = 50
        root = (Decimal(r2.numerator) / Decimal(r2.denominator)).sqrt()
    return math.copysign(float(root), cov)


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp)


def _permutation_p(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    perms = _permutations(len(ry))
    x = rx - rx.mean()
    y = ry[perms] - ry.mean()
    denom = math.sqrt(float((x * x).sum()) * float((y[0] * y[0]).sum()))
    rhos = (y @ x) / denom
    return float(np.mean(np.abs(rhos) >= abs(rho) - 1e-12))


def spearman_layers(before: Sequence[float], after: Sequence[float]) -> SpearmanResult:
    """Spearman's rho between two per-layer profiles, with a two-sided p-value.

    Ranks use average ties; rho is computed in exact arithmetic and rounded
    once. The p-value enumerates all permutations when there are at most 8
    layers and falls back to the normal approximation above that.
    """
    before = [float(x) for x in before]
    after = [float(x) for x in after]
    if len(before) != len(after):
        raise DimensionError(f"layer counts differ: {len(before)} vs {len(after)}")
    n = len(before)
    if n < 3:
        raise InputError(f"need at least 3 layers, got {n}")
    rx, ry = average_ranks(before), average_ranks(after)
    rho = max(-1.0, min(1.0, _exact_pearson(rx, ry)))
    if n <= 8:
        p = _permutation_p(np.array(rx, dtype=float), np.array(ry, dtype=float), rho)
    else:
        p = math.erfc(abs(rho) * math.sqrt(n - 1) / math.sqrt(2.0))
    return SpearmanResult(rho, p, n)


def bos_attention_by_layer(trace: AttentionTrace, steps: Optional[Iterable[int]] = None) -> list:
    """Mean attention paid to BOS at each layer.

    Averages over heads and over every query except BOS itself, optionally
    restricted to ``steps``.
    """
    wanted = None if steps is None else set(steps)
    sums: dict = {}
    counts: dict = {}
    for r in trace.records:
        if r.qpos == 0 or (wanted is not None and r.step not in wanted):
            continue
        sums[r.layer] = sums.get(r.layer, 0.0) + float(r.weights[0])
        counts[r.layer] = counts.get(r.layer, 0) + 1
    if not sums:
        raise TraceError("trace has no queries attending to BOS")
    return [sums[l] / counts[l] for l in sorted(sums)]


def layerwise_vector_spearman(before: AttentionTrace, after: AttentionTrace, step=None) -> dict:
    """Secondary statistic: per layer, rank-correlate the head-averaged weight
    vectors of the newest query at ``step`` (default: last step), then average.
    """
    if step is None:
        step = max(before.steps())
    per_layer = []
    for layer in range(before.n_layers()):
        vecs = []
        for tr in (before, after):
            recs = [r for r in tr.records if r.step == step and r.layer == layer]
            if not recs:
                raise TraceError(f"no records for step {step}, layer {layer}")
            qpos = max(r.qpos for r in recs)
            vecs.append(np.mean([r.weights[: qpos + 1] for r in recs if r.qpos == qpos], axis=0))
        per_layer.append(spearman_layers(vecs[0], vecs[1]).rho)
    return {"mean_rho": float(np.mean(per_layer)), "per_layer_rho": per_layer}


# ---------------------------------------------------------------- value norms

@dataclass
class ValueNormRow:
    layer: int
    l1_before: float
    l1_after: float
    difference: float


@dataclass
class ValueNormReport:
    rows: list

    COLUMNS = ("layer", "l1_before", "l1_after", "difference")

    @property
    def differences(self) -> list:
        return [r.difference for r in self.rows]


def bos_value_vectors(run) -> list:
    """Per-layer BOS value vectors from a trace, generation output, cache or list."""
    from .model import GenerationOutput, KVCache

    if isinstance(run, GenerationOutput):
        run = run.cache
    if isinstance(run, KVCache):
        return [run.bos_value(l) for l in range(run.config.n_layers)]
    if isinstance(run, AttentionTrace):
        if run.bos_values is None:
            raise TraceError("trace carries no BOS value snapshots")
        return run.bos_values
    return [np.asarray(v, dtype=DTYPE) for v in run]


def value_norm_report(run_before, run_after) -> ValueNormReport:
    before = bos_value_vectors(run_before)
    after = bos_value_vectors(run_after)
    if len(before) != len(after):
        raise DimensionError(f"layer counts differ: {len(before)} vs {len(after)}")
    rows = []
    for layer, (b, a) in enumerate(zip(before, after)):
        lb, la = l1_norm(b), l1_norm(a)
        rows.append(ValueNormRow(layer, lb, la, la - lb))
    return ValueNormReport(rows)


# ---------------------------------------------------------------- drift test

@dataclass
class DriftTestResult:
    rows: list
    trace: AttentionTrace
    prompt_len: int
    tokens: list


def drift_test(
    weights,
    plan,
    prompt: Sequence[int],
    gen_steps: int,
    checkpoints: Optional[Sequence[int]] = None,
    *,
    info=None,
    trace: Optional[AttentionTrace] = None,
) -> DriftTestResult:
    """Generate ``gen_steps`` tokens and sample the drift metrics at ``checkpoints``."""
    from .model import generate

    if gen_steps < 0:
        raise InputError("gen_steps must be non-negative")
    checkpoints = list(range(1, gen_steps + 1)) if checkpoints is None else sorted(set(checkpoints))
    bad = [c for c in checkpoints if not 1 <= c <= gen_steps]
    if bad:
        raise InputError(f"checkpoints {bad} outside [1, {gen_steps}]")
    if plan is not None and info is None:
        from .anchor import from_prompt
        from .injection import Mode, validate_plan

        resolved = validate_plan(plan, weights.config)
        if resolved.mode is not Mode.NONE:
            info = from_prompt(prompt, weights, resolved.source_form)
        plan = resolved
    trace = trace if trace is not None else AttentionTrace()
    out = generate(prompt, weights, plan, info, max_new_tokens=gen_steps, trace=trace)
    if gen_steps == 0:
        return DriftTestResult([], trace, len(prompt), out.tokens)
    wanted = set(checkpoints)
    rows = [r for r in drift_report(trace.replay()).rows if r.generated_index in wanted]
    return DriftTestResult(rows, trace, len(prompt), out.tokens)


# ---------------------------------------------------------------- emitters

def report_rows(report) -> tuple:
    """(columns, list of row tuples) for any report type."""
    if isinstance(report, SpearmanResult):
        return SpearmanResult.COLUMNS, [(report.rho, report.p_value, report.n)]
    if isinstance(report, DriftTestResult):
        report = DriftReport(report.rows)
    cols = report.COLUMNS
    return cols, [tuple(getattr(r, c) for c in cols) for r in report.rows]


def to_json(report) -> str:
    if isinstance(report, SpearmanResult):
        return json.dumps(asdict(report), indent=2)
    if isinstance(report, DriftTestResult):
        report = DriftReport(report.rows)
    return json.dumps({"rows": [asdict(r) for r in report.rows]}, indent=2)


def to_csv(report) -> str:
    cols, rows = report_rows(report)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    writer.writerows(rows)
    return buf.getvalue()
