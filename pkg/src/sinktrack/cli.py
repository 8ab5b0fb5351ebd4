"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error (bad flags,
invalid plan, missing or malformed inputs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

from . import errors
from .anchor import from_external, from_prompt
from .injection import InjectionPlan, LayerSchedule, Mode, StrengthSchedule, validate_plan
from .instrumentation import (
    AttentionTrace,
    bos_attention_by_layer,
    drift_report,
    spearman_layers,
    to_csv,
    to_json,
    value_norm_report,
    DriftReport,
)
from .model import CANONICAL_CONFIG, CANONICAL_SEED, ModelConfig, generate
from .weights_io import load_model, load_tensors, make_prompt, make_toy_model, save_model, seed_from_env


class UsageError(Exception):
    pass


def _int_list(text) -> list:
    if isinstance(text, list):
        return [int(x) for x in text]
    text = str(text).strip()
    if not text:
        return []
    return [int(x) for x in text.replace(",", " ").split()]


def _span(text):
    if text is None or isinstance(text, (list, tuple)):
        return tuple(text) if text is not None else None
    start, _, stop = str(text).partition(":")
    return int(start), int(stop)


@dataclass
class RunConfig:
    """Everything one ``gen`` or ``bench-prefill`` run needs, as parsed from flags or --config."""

    model: str
    prompt: list = field(default_factory=list)
    mode: str = "none"
    schedule: str = "every_k"
    k: int = 5
    offset: int = 0
    layers: list = field(default_factory=list)
    alpha_kind: Optional[str] = None
    alpha: Optional[float] = None
    alpha_end: Optional[float] = None
    source: Optional[str] = None
    span: Optional[tuple] = None
    info_tensor: Optional[str] = None
    info_name: Optional[str] = None
    max_new_tokens: int = 16
    trace: Optional[str] = None
    format: str = "json"

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        prompt = []
        if getattr(ns, "prompt_file", None):
            with open(ns.prompt_file, encoding="utf-8") as fh:
                prompt = _int_list(fh.read())
        elif getattr(ns, "prompt", None) is not None:
            prompt = _int_list(ns.prompt)
        return cls(
            model=ns.model,
            prompt=prompt,
            mode=ns.mode,
            schedule=ns.schedule,
            k=ns.k,
            offset=ns.offset,
            layers=_int_list(ns.layers) if ns.layers is not None else [],
            alpha_kind=ns.alpha_kind,
            alpha=ns.alpha,
            alpha_end=ns.alpha_end,
            source=ns.source,
            span=_span(ns.span),
            info_tensor=ns.info_tensor,
            info_name=ns.info_name,
            max_new_tokens=getattr(ns, "max_new_tokens", 16),
            trace=getattr(ns, "trace", None),
            format=getattr(ns, "format", "json"),
        )

    def plan(self) -> InjectionPlan:
        if self.schedule == "explicit":
            schedule = LayerSchedule.explicit(self.layers)
        else:
            schedule = LayerSchedule(self.schedule, k=self.k, offset=self.offset)
        strength = None
        if self.alpha_kind is not None or self.alpha is not None or self.alpha_end is not None:
            strength = StrengthSchedule(self.alpha_kind or "constant", self.alpha, self.alpha_end)
        return InjectionPlan(self.mode, schedule, strength, self.source)

    def info(self, weights, prompt, plan):
        if plan.mode is Mode.NONE:
            return None
        if self.info_tensor:
            tensors, _ = load_tensors(self.info_tensor)
            if self.info_name:
                if self.info_name not in tensors:
                    raise UsageError(f"{self.info_tensor} has no tensor {self.info_name!r}")
                matrix = tensors[self.info_name]
            elif len(tensors) == 1:
                matrix = next(iter(tensors.values()))
            else:
                raise UsageError("--info-name is required when the tensor file holds several tensors")
            return from_external(matrix, plan.source_form, weights.config.d_model)
        return from_prompt(prompt, weights, plan.source_form, self.span)


def _add_plan_args(p: argparse.ArgumentParser, default_mode: str = "none") -> None:
    g = p.add_argument_group("injection plan")
    g.add_argument("--mode", choices=[m.value for m in Mode], default=default_mode)
    g.add_argument("--schedule", choices=["all", "every_k", "explicit"], default="every_k")
    g.add_argument("--k", type=int, default=5, help="interval for every_k (default 5)")
    g.add_argument("--offset", type=int, default=0, help="first layer for every_k")
    g.add_argument("--layers", help="explicit layer list, e.g. 0,3")
    g.add_argument("--alpha-kind", choices=["constant", "linear_decay", "linear_increase"])
    g.add_argument("--alpha", type=float, help="soft strength (start value for ramps)")
    g.add_argument("--alpha-end", type=float)
    g.add_argument("--source", choices=["pooled", "full"], help="info source form")
    g.add_argument("--span", help="prompt span START:STOP used for f_info (default 1:len)")
    g.add_argument("--info-tensor", help="tensor file with external f_info rows")
    g.add_argument("--info-name", help="tensor name inside --info-tensor")


def _add_prompt_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--prompt", help="token ids, comma or space separated, starting with BOS")
    g.add_argument("--prompt-file", help="file of whitespace/comma separated token ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinktrack", description="BOS context-anchoring toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("make-toy-model", help="write a seeded random model file")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=CANONICAL_CONFIG.n_layers)
    p.add_argument("--d-model", type=int, default=CANONICAL_CONFIG.d_model)
    p.add_argument("--heads", type=int, default=CANONICAL_CONFIG.n_heads)
    p.add_argument("--d-ff", type=int, default=CANONICAL_CONFIG.d_ff)
    p.add_argument("--vocab", type=int, default=CANONICAL_CONFIG.vocab_size)
    p.add_argument("--max-seq", type=int, default=CANONICAL_CONFIG.max_seq)
    p.add_argument("--bos-id", type=int, default=CANONICAL_CONFIG.bos_id)
    p.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                   help=f"PRNG seed (default $STKW_SEED, else {CANONICAL_SEED})")
    p.set_defaults(func=cmd_make_toy_model)

    p = sub.add_parser("gen", help="greedy generation under an injection plan")
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--model")
    _add_prompt_args(p)
    _add_plan_args(p)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--trace", help="write the attention trace here (JSON lines)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("analyze", help="analyses over saved traces")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("spearman", help="rank correlation of per-layer attention to BOS")
    a.add_argument("--before", required=True)
    a.add_argument("--after", required=True)
    a.add_argument("--format", choices=["json", "csv"], default="json")
    a.set_defaults(func=cmd_analyze)
    a = asub.add_parser("drift", help="attention-to-BOS drift per decode step")
    a.add_argument("--trace", required=True)
    a.add_argument("--checkpoints", help="generated indices to report, e.g. 1,16,32")
    a.add_argument("--format", choices=["json", "csv"], default="json")
    a.set_defaults(func=cmd_analyze)
    a = asub.add_parser("l1norm", help="BOS value-vector L1 norm per layer, before vs after")
    a.add_argument("--before", required=True)
    a.add_argument("--after", required=True)
    a.add_argument("--format", choices=["json", "csv"], default="json")
    a.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench-prefill", help="prefill latency with vs without injection")
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--model")
    _add_prompt_args(p)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--prompt-seed", type=int, default=0)
    _add_plan_args(p, default_mode="sinktrack")
    p.add_argument("--baseline-mode", choices=[m.value for m in Mode], default="none")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_bench_prefill)
    return parser


def cmd_make_toy_model(args) -> int:
    config = ModelConfig(
        n_layers=args.layers, d_model=args.d_model, n_heads=args.heads, d_ff=args.d_ff,
        vocab_size=args.vocab, max_seq=args.max_seq, bos_id=args.bos_id,
    )
    seed = args.seed if args.seed is not None else seed_from_env(CANONICAL_SEED)
    save_model(make_toy_model(config, seed), args.out)
    summary = dict(config.to_dict(), seed=seed, path=args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_run(args):
    if not args.model:
        raise UsageError("--model is required")
    run = RunConfig.from_args(args)
    weights = load_model(run.model)
    return run, weights


def cmd_gen(args) -> int:
    run, weights = _load_run(args)
    if not run.prompt:
        raise UsageError("a prompt is required (--prompt or --prompt-file)")
    plan = validate_plan(run.plan(), weights.config)
    info = run.info(weights, run.prompt, plan)
    trace = AttentionTrace(run.trace, keep=False) if run.trace else None
    try:
        out = generate(run.prompt, weights, plan, info, run.max_new_tokens, trace=trace)
    finally:
        if trace is not None:
            trace.close()
    for tok in out.tokens:
        print(tok)
    return 0


def _load_trace(path) -> AttentionTrace:
    if not os.path.exists(path):
        raise UsageError(f"trace file {path} does not exist")
    trace = AttentionTrace.load(path)
    if len(trace) == 0 and trace.bos_values is None:
        raise errors.TraceError(f"{path}: trace is empty")
    return trace


def cmd_analyze(args) -> int:
    emit = to_csv if args.format == "csv" else to_json
    if args.analysis == "spearman":
        before, after = _load_trace(args.before), _load_trace(args.after)
        report = spearman_layers(bos_attention_by_layer(before), bos_attention_by_layer(after))
    elif args.analysis == "drift":
        report = drift_report(_load_trace(args.trace))
        if args.checkpoints:
            wanted = set(_int_list(args.checkpoints))
            report = DriftReport([r for r in report.rows if r.generated_index in wanted])
    else:
        report = value_norm_report(_load_trace(args.before), _load_trace(args.after))
    sys.stdout.write(emit(report).rstrip("\n") + "\n")
    return 0


def cmd_bench_prefill(args) -> int:
    from .bench import bench_prefill

    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    run, weights = _load_run(args)
    prompt = run.prompt or make_prompt(args.prompt_len, weights.config, args.prompt_seed)
    plan = validate_plan(run.plan(), weights.config)
    info = run.info(weights, prompt, plan)
    result = bench_prefill(weights, plan, prompt, args.reps, info=info,
                           baseline=InjectionPlan(args.baseline_mode))
    d = result.to_dict()
    if args.format == "csv":
        cols = list(d)
        print(",".join(cols))
        print(",".join(str(d[c]) for c in cols))
    else:
        print(json.dumps(d, indent=2))
    return 0


def _apply_config_file(parser, argv, args):
    path = getattr(args, "config", None)
    if not path:
        return args
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise UsageError("--config must hold a JSON object")
    sub = parser.subcommands[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(config) - known)
    if unknown:
        raise UsageError(f"unknown keys in {path}: {', '.join(unknown)}")
    sub.set_defaults(**config)
    return parser.parse_args(argv)


USAGE_ERRORS = (
    UsageError,
    errors.PlanError,
    errors.ConfigError,
    errors.InfoSourceError,
    errors.InputError,
    errors.VocabularyError,
    errors.DimensionError,
    errors.TraceError,
    json.JSONDecodeError,
)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(parser, argv, args)
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, errors.SinkTrackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
