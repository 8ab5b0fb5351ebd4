"""Prefill latency with and without injection."""

from __future__ import annotations

import gc
import math
import statistics
import time
from dataclasses import asdict, dataclass

from .anchor import from_prompt
from .injection import NONE_PLAN, Mode, prepare_info, validate_plan
from .model import prefill


@dataclass
class PrefillBench:
    repetitions: int
    prompt_len: int
    mode: str
    mean_ms_without: float
    std_ms_without: float
    mean_ms_with: float
    std_ms_with: float
    overhead_ms: float
    overhead_se_ms: float

    @property
    def overhead_ratio(self) -> float:
        return self.overhead_ms / self.mean_ms_without

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overhead_ratio"] = self.overhead_ratio
        return d


def bench_prefill(weights, plan, prompt, repetitions: int = 500, *, info=None, warmup: int = 10,
                  baseline=None) -> PrefillBench:
    """Time prefill under ``plan`` against ``baseline`` (mode none by default).

    Arms alternate in ABBA order so slow drifts hit both equally. Building
    the information source happens outside the timed region; the injected
    arm pays for pooling it if the plan asks for a pooled source.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    cfg = weights.config
    treated = validate_plan(plan, cfg)
    base = validate_plan(baseline if baseline is not None else NONE_PLAN, cfg)

    def info_for(p):
        if p.mode is Mode.NONE:
            return None
        src = info if info is not None else from_prompt(prompt, weights, p.source_form)
        return prepare_info(p, src, cfg)

    info_treated, info_base = info_for(treated), info_for(base)

    for _ in range(warmup):
        prefill(prompt, weights, base, info_base)
        prefill(prompt, weights, treated, info_treated)

    without, with_ = [], []
    clock = time.perf_counter_ns
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(repetitions):
            order = ((base, info_base, without), (treated, info_treated, with_))
            if i % 4 in (1, 2):
                order = order[::-1]
            for p, inf, sink in order:
                t0 = clock()
                prefill(prompt, weights, p, inf)
                sink.append((clock() - t0) / 1e6)
    finally:
        if was_enabled:
            gc.enable()

    def std(xs):
        return statistics.pstdev(xs) if len(xs) > 1 else 0.0

    m0, m1 = statistics.mean(without), statistics.mean(with_)
    s0, s1 = std(without), std(with_)
    n = repetitions
    return PrefillBench(
        repetitions=n,
        prompt_len=len(prompt),
        mode=treated.mode.value,
        mean_ms_without=m0,
        std_ms_without=s0,
        mean_ms_with=m1,
        std_ms_with=s1,
        overhead_ms=m1 - m0,
        overhead_se_ms=math.sqrt(s0 * s0 / n + s1 * s1 / n),
    )
