"""Does injection reorder which layers attend to BOS?

Runs the canonical model with and without SinkTrack on a batch of prompts
and rank-correlates the per-layer mean attention paid to BOS.
"""

import argparse

from sinktrack import ModelConfig, make_toy_model
from sinktrack.anchor import from_prompt
from sinktrack.injection import InjectionPlan, LayerSchedule
from sinktrack.instrumentation import (
    AttentionTrace,
    bos_attention_by_layer,
    layerwise_vector_spearman,
    spearman_layers,
)
from sinktrack.model import generate
from sinktrack.weights_io import make_prompt


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--prompts", type=int, default=8)
    ap.add_argument("--steps", type=int, default=16)
    args = ap.parse_args()

    cfg = ModelConfig(n_layers=args.layers, d_model=32, n_heads=4, d_ff=64, vocab_size=64)
    weights = make_toy_model(cfg, 42)
    plan = InjectionPlan(schedule=LayerSchedule.every(5))
    print("prompt  rho      p        vector_rho")
    for i in range(args.prompts):
        prompt = make_prompt(32, cfg, seed=i)
        before, after = AttentionTrace(), AttentionTrace()
        generate(prompt, weights, max_new_tokens=args.steps, trace=before)
        generate(prompt, weights, plan, from_prompt(prompt, weights, "full"),
                 max_new_tokens=args.steps, trace=after)
        res = spearman_layers(bos_attention_by_layer(before), bos_attention_by_layer(after))
        vec = layerwise_vector_spearman(before, after)["mean_rho"]
        print(f"{i:<7} {res.rho:+.4f}  {res.p_value:.2e} {vec:+.4f}")


if __name__ == "__main__":
    main()
