"""Command line entry points.

Every subcommand exits 0 on success; on failure it prints a single JSON
object {"error": <type>, "message": <text>} to stderr and exits nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench
from .metrics import rouge_l, rouge_n, tokenize
from .model import ModelConfig, greedy_decode, init_model
from .trainmath import MpoWeights, PrefBatch, mpo_joint_loss


def _load_config(args) -> dict:
    if args.config:
        config = bench.load_config(args.config)
    else:
        config = {"seed": 0}
    if args.seed is not None:
        config["seed"] = args.seed
    bench.validate_config(config)
    return config


def _emit(args, report: dict, name: str):
    if args.out:
        paths = bench.write_report(report, args.out, name, fmt=args.format)
        print(json.dumps({"written": [str(p) for p in paths]}))
    else:
        json.dump(report, sys.stdout, indent=2, default=str)
        print()


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else 0
    config = _load_config(args) if args.config else {"seed": seed}
    model = init_model(ModelConfig(**config.get("model", {})), config["seed"])
    rng = np.random.default_rng(config["seed"])
    prompt = (json.loads(args.prompt) if args.prompt
              else [int(x) for x in rng.integers(0, model.config.vocab_size,
                                                 size=8)])
    tokens = greedy_decode(model, prompt, args.max_new)
    print(json.dumps({"prompt": prompt, "tokens": tokens}))
    return 0


def cmd_evict(args) -> int:
    _emit(args, bench.run_evict_bench(_load_config(args)), "evict")
    return 0


def cmd_spec(args) -> int:
    _emit(args, bench.run_spec_bench(_load_config(args)), "spec")
    return 0


def cmd_quant(args) -> int:
    _emit(args, bench.run_quant_bench(_load_config(args)), "quant")
    return 0


def cmd_lora_demo(args) -> int:
    _emit(args, bench.run_lora_demo(_load_config(args)), "lora_demo")
    return 0


def cmd_losses(args) -> int:
    with open(args.input) as f:
        data = json.load(f)
    batch = PrefBatch(data["lp_theta_c"], data["lp_0_c"],
                      data["lp_theta_r"], data["lp_0_r"])
    weights = MpoWeights(**data.get("weights", {}))
    total, parts = mpo_joint_loss(batch, weights, data["token_logprobs"])
    print(json.dumps({"total": total, "breakdown": parts}))
    return 0


def cmd_rouge(args) -> int:
    with open(args.reference) as f:
        ref = tokenize(f.read())
    with open(args.hypothesis) as f:
        hyp = tokenize(f.read())
    out = {}
    for name, score in (("rouge1", rouge_n(ref, hyp, 1)),
                        ("rouge2", rouge_n(ref, hyp, 2)),
                        ("rougeL", rouge_l(ref, hyp))):
        out[name] = {"precision": score.precision, "recall": score.recall,
                     "f1": score.f1}
    print(json.dumps(out))
    return 0


def cmd_report(args) -> int:
    with open(args.input) as f:
        report = json.load(f)
    ok = bench.verify_report(report)
    print(json.dumps({"verified": ok, "trials": len(report["trials"])}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgelm",
                                description="toy LLM serving lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="report output directory")
        sp.add_argument("--format", choices=["json", "csv"], default="json")

    sp = sub.add_parser("gen", help="greedy generation from a fresh model")
    common(sp)
    sp.add_argument("--prompt", help="JSON list of token ids")
    sp.add_argument("--max-new", type=int, default=16)
    sp.set_defaults(func=cmd_gen)

    for name, fn, help_text in (
            ("evict", cmd_evict, "KV eviction policy benchmark"),
            ("spec", cmd_spec, "speculative decoding benchmark"),
            ("quant", cmd_quant, "quantization bpw/overlap benchmark"),
            ("lora-demo", cmd_lora_demo, "adapter registry + fitting demo")):
        sp = sub.add_parser(name, help=help_text)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("losses", help="evaluate alignment losses on a batch")
    sp.add_argument("input", help="JSON file with log-prob arrays")
    sp.set_defaults(func=cmd_losses)

    sp = sub.add_parser("rouge", help="ROUGE-1/2/L between two text files")
    sp.add_argument("reference")
    sp.add_argument("hypothesis")
    sp.set_defaults(func=cmd_rouge)

    sp = sub.add_parser("report", help="verify a report's aggregates")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # contract: machine-readable failure on stderr
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
