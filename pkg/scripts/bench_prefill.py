"""Prefill latency of each injection mode against mode none on the canonical model."""

import argparse
import json

from sinktrack import CANONICAL_CONFIG, CANONICAL_SEED, make_toy_model
from sinktrack.bench import bench_prefill
from sinktrack.injection import InjectionPlan, LayerSchedule, Mode, StrengthSchedule
from sinktrack.weights_io import make_prompt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--prompt-len", type=int, default=64)
    args = ap.parse_args()

    weights = make_toy_model(CANONICAL_CONFIG, CANONICAL_SEED)
    prompt = make_prompt(args.prompt_len, weights.config)
    plans = {
        "sinktrack/full": InjectionPlan(Mode.SINKTRACK),
        "sinktrack/pooled": InjectionPlan(Mode.SINKTRACK, source_form="pooled"),
        "sinktrack/all-layers": InjectionPlan(Mode.SINKTRACK, LayerSchedule.all()),
        "hard": InjectionPlan(Mode.HARD),
        "soft": InjectionPlan(Mode.SOFT, strength=StrengthSchedule.constant(0.5)),
    }
    for name, plan in plans.items():
        res = bench_prefill(weights, plan, prompt, args.reps)
        summary = {k: round(v, 4) if isinstance(v, float) else v for k, v in res.to_dict().items()}
        print(name, json.dumps(summary))


if __name__ == "__main__":
    main()
