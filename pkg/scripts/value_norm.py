"""Per-layer L1 norm of the BOS value vector, mode none vs each injection mode."""

import argparse

from sinktrack import ModelConfig, make_toy_model
from sinktrack.anchor import from_prompt
from sinktrack.injection import InjectionPlan, LayerSchedule, Mode, StrengthSchedule, validate_plan
from sinktrack.instrumentation import to_csv, value_norm_report
from sinktrack.model import prefill
from sinktrack.weights_io import make_prompt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--prompt-len", type=int, default=32)
    args = ap.parse_args()

    cfg = ModelConfig(n_layers=args.layers, d_model=32, n_heads=4, d_ff=64, vocab_size=64)
    weights = make_toy_model(cfg, 42)
    prompt = make_prompt(args.prompt_len, cfg)
    baseline = prefill(prompt, weights).cache
    plans = {
        "sinktrack": InjectionPlan(schedule=LayerSchedule.every(5)),
        "soft-0.5": InjectionPlan(Mode.SOFT, LayerSchedule.every(5), StrengthSchedule.constant(0.5)),
    }
    for name, plan in plans.items():
        resolved = validate_plan(plan, cfg)
        info = from_prompt(prompt, weights, resolved.source_form)
        report = value_norm_report(baseline, prefill(prompt, weights, resolved, info).cache)
        print(f"# {name} (injected at layers {list(resolved.layers)})")
        print(to_csv(report), end="")


if __name__ == "__main__":
    main()
