"""Command-line interface: one subcommand per pipeline.

  search-thresholds  CETT calibration -> threshold profile JSON
  generate           prompt continuation under a chosen FFN strategy
  analyze-inertia    13-sample similarity battery + flocking heatmaps
  bench              latency / FLOP / fidelity comparison across strategies
  emergence          toy-network sparsity-emergence trajectories
  make-toy-model     random model fixture in the flat-tensor format

Exit codes: 0 success (including noisy-but-valid benchmarks), 2 usage error,
3 data/contract error, 4 numerical divergence. All outputs are
byte-reproducible under fixed seeds; BLAS threading is capped at --threads
(default 1) to keep numerics machine-stable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, bench, emergence, samples, sparsity, tokenizer, weights_io
from .errors import DivergenceError, DynactError
from .model import GenerationRequest, ModelConfig, Sampling, generate, prefill
from .sparsity import ThresholdProfile


def _out_path(args, name) -> Path:
    p = Path(name)
    if p.is_absolute():
        return p
    base = Path(args.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    return base / p


def _load_model(args):
    config_path = args.config or args.model + ".json"
    config = ModelConfig.load(config_path)
    return weights_io.load_weights(args.model, config)


def _log(args, message):
    if args.verbose:
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# search-thresholds


def cmd_search_thresholds(args) -> int:
    calib_path = Path(args.calibration)
    if not calib_path.exists():
        print(f"error: calibration file not found: {calib_path}", file=sys.stderr)
        return 2
    text = calib_path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        print("error: calibration file is empty", file=sys.stderr)
        return 2

    weights = _load_model(args)
    cfg = weights.config
    _log(args, f"loaded model: {cfg.n_layers} layers, d_ff={cfg.d_ff}")

    hidden_per_layer = [[] for _ in range(cfg.n_layers)]
    total_tokens = 0
    for line in lines:
        ids = tokenizer.tokenize(line)
        _, _, trace = prefill(weights, ids)
        total_tokens += trace.n_tokens
        for li in range(cfg.n_layers):
            hidden_per_layer[li].append(trace.hidden[li])

    eps = []
    for li, layer in enumerate(weights.layers):
        hidden = np.concatenate(hidden_per_layer[li], axis=0)
        eps.append(sparsity.search_threshold_from_hidden(
            layer, hidden, args.cett_target,
            definition=args.magnitude, constraint=args.constraint,
        ))

    profile = ThresholdProfile(
        cett_target=args.cett_target,
        per_layer_epsilon=eps,
        magnitude_def=args.magnitude,
        aggregation=args.aggregation,
        calibration={"n_tokens": total_tokens, "dataset_tag": calib_path.name},
    )
    out = _out_path(args, args.out)
    profile.save(out)

    print(f"calibrated {cfg.n_layers} layers at CETT target {args.cett_target} "
          f"({total_tokens} tokens)")
    print("layer  epsilon")
    for li, e in enumerate(eps):
        print(f"{li:5d}  {e:.6g}")
    print(f"profile written to {out}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    # usage validation must precede any model load
    if args.strategy in ("tt", "tda") and not args.profile:
        print(f"error: --strategy {args.strategy} requires --profile", file=sys.stderr)
        return 2
    if args.max_new_tokens < 0:
        print("error: --max-new-tokens must be >= 0", file=sys.stderr)
        return 2
    if args.dump_masks and args.strategy not in ("griffin", "tda"):
        print("error: --dump-masks needs a mask-based strategy (griffin/tda)",
              file=sys.stderr)
        return 2

    profile = ThresholdProfile.load(args.profile) if args.profile else None
    weights = _load_model(args)

    strategy = sparsity.make_strategy(
        args.strategy, profile=profile, sparsity=args.sparsity,
        refresh_interval=args.refresh_interval,
    )
    sampling = (
        Sampling("temperature", temperature=args.temperature, seed=args.sample_seed)
        if args.temperature is not None else Sampling("greedy")
    )
    prompt_ids = tokenizer.tokenize(args.prompt)
    request = GenerationRequest(prompt_ids, args.max_new_tokens, strategy, sampling)
    result = generate(weights, request)
    continuation = tokenizer.detokenize(result.new_tokens)

    print(continuation)
    stats = result.strategy_stats
    print(f"# strategy={args.strategy} new_tokens={len(result.new_tokens)}", file=sys.stderr)
    print(f"# mean_active_fraction={stats['mean_active_fraction']:.6f} "
          f"ffn_macs={stats['ffn_macs']}", file=sys.stderr)
    print(f"# prefill_seconds={result.prefill_seconds:.6f} "
          f"generation_seconds={result.generation_seconds:.6f}", file=sys.stderr)

    if args.out:
        out = _out_path(args, args.out)
        out.write_text(continuation, encoding="utf-8")
        _log(args, f"continuation written to {out}")
    if args.dump_masks:
        mpath = _out_path(args, args.dump_masks)
        mpath.write_text(strategy.masks.to_hex_text(), encoding="utf-8")
        _log(args, f"masks written to {mpath}")
    return 0


# ---------------------------------------------------------------------------
# analyze-inertia


def cmd_analyze_inertia(args) -> int:
    if args.samples:
        spath = Path(args.samples)
        if not spath.exists():
            print(f"error: samples file not found: {spath}", file=sys.stderr)
            return 2
        try:
            battery = json.loads(spath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            print(f"error: samples file is not valid JSON: {exc}", file=sys.stderr)
            return 3
        if (not isinstance(battery, list)
                or not all(isinstance(s, dict) and "text" in s for s in battery)):
            print("error: samples file must be a JSON list of objects with "
                  "'text' fields", file=sys.stderr)
            return 3
    else:
        battery = samples.INERTIA_SAMPLES

    profile = ThresholdProfile.load(args.profile) if args.profile else None
    weights = _load_model(args)

    matrix, report = analysis.inertia_battery(
        weights, battery, metric=args.metric, layer=args.layer,
        profile=profile, pretrained=args.pretrained,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix.save(out_dir / "similarity_matrix.csv")
    (out_dir / "ordinal_report.json").write_text(
        json.dumps(report, indent=2) + "\n", encoding="utf-8"
    )

    # flocking heatmaps for the first sample's tokens, both modes
    heat_layer = args.layer if args.layer is not None else 0
    ids = tokenizer.tokenize(battery[0]["text"])
    for mode, fname in (("per_token", "heatmap_per_token.csv"),
                        ("as_sequence", "heatmap_as_sequence.csv")):
        patterns = analysis.extract_pattern(
            weights, ids, mode, heat_layer, profile=profile
        )
        analysis.flocking_export(patterns, out_dir / fname)

    n_pass = sum(1 for c in report["checks"] if c["pass"])
    print(f"similarity matrix: {len(battery)}x{len(battery)} "
          f"({args.metric}, layer={report['layer']})")
    print(f"ordinal checks: {n_pass}/{len(report['checks'])} pass "
          f"[{report['checks_status']}]")
    print(f"outputs in {out_dir}")
    if args.pretrained and report["checks"] and n_pass < len(report["checks"]):
        print("error: ordinal checks failed on a pretrained checkpoint", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            print(f"error: bench spec not found: {spec_path}", file=sys.stderr)
            return 2
        spec = bench.BenchSpec.from_json(spec_path.read_text(encoding="utf-8"))
    else:
        if not args.model:
            print("error: bench requires --model or --spec", file=sys.stderr)
            return 2
        spec = bench.BenchSpec(
            model_path=args.model,
            config_path=args.config,
            prompt_len=args.prompt_len,
            new_tokens=args.new_tokens,
            strategies=args.strategies.split(","),
            repetitions=args.repetitions,
            warmup=args.warmup,
            seed=args.seed,
            sparsity=args.sparsity,
            profile_path=args.profile,
            cett_target=args.cett_target,
        )
    report = bench.run_bench(spec)
    text = bench.emit_report(report, args.format,
                             _out_path(args, args.out) if args.out else None)
    print(text, end="")
    if report.noisy:
        print("# warning: timing variance exceeded 25% of the median (noisy)",
              file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# emergence


def cmd_emergence(args) -> int:
    config = emergence.EmergenceConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    variants = ("relu", "swiglu") if args.variant == "both" else (args.variant,)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    finals = {}
    for variant in variants:
        traj = emergence.run_emergence(config, variant)
        path = out_dir / f"trajectory_{variant}.csv"
        traj.save(path)
        finals[variant] = (traj.init_near_zero_fraction, traj.final_near_zero_fraction)
        print(f"{variant}: near-zero fraction {finals[variant][0]:.4f} -> "
              f"{finals[variant][1]:.4f} ({path})")
    if len(variants) == 2:
        r, s = finals["relu"][1], finals["swiglu"][1]
        verdict = "relu > swiglu" if r > s else "relu <= swiglu"
        print(f"final near-zero fractions: relu={r:.4f} swiglu={s:.4f} ({verdict})")
    return 0


# ---------------------------------------------------------------------------
# make-toy-model


def cmd_make_toy_model(args) -> int:
    config = ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        d_ff=args.d_ff,
        n_heads=args.heads,
        vocab_size=args.vocab_size,
        activation_kind=args.activation,
        max_seq_len=args.max_seq_len,
        positional_encoding=args.positional_encoding,
    )
    out = _out_path(args, args.out)
    weights_io.make_toy_model(config, args.seed, out)
    print(f"wrote {out} and {out}.json "
          f"(layers={config.n_layers} d_model={config.d_model} d_ff={config.d_ff})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynact",
        description="Desk-scale transformer inference with dynamic FFN activation sparsity.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1, keeps runs reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_required=True):
        p.add_argument("--model", required=model_required, help="weight file path")
        p.add_argument("--config", default=None,
                       help="model config JSON (default: <model>.json)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default=os.environ.get("DYNACT_OUT_DIR", "."),
                       help="directory for output files (env DYNACT_OUT_DIR)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("search-thresholds",
                       help="CETT threshold calibration over a text file")
    common(p)
    p.add_argument("--calibration", required=True, help="UTF-8 text, one sample per line")
    p.add_argument("--cett-target", type=float, default=0.2)
    p.add_argument("--magnitude", choices=sparsity.MAGNITUDE_DEFS, default="down_weighted")
    p.add_argument("--aggregation", choices=sparsity.AGGREGATIONS, default="flocking")
    p.add_argument("--constraint", choices=("mean", "max"), default="mean")
    p.add_argument("--out", default="profile.json")
    p.set_defaults(func=cmd_search_thresholds)

    p = sub.add_parser("generate", help="generate a continuation for a prompt")
    common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--strategy", choices=("dense", "tt", "griffin", "tda"),
                   default="dense")
    p.add_argument("--profile", default=None, help="threshold profile (tt/tda)")
    p.add_argument("--sparsity", type=float, default=0.5, help="griffin sparsity")
    p.add_argument("--refresh-interval", type=int, default=0,
                   help="rebuild tda masks every k steps (0 = never)")
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--temperature", type=float, default=None,
                   help="enable temperature sampling (default: greedy)")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the continuation to this file")
    p.add_argument("--dump-masks", default=None,
                   help="write the layer masks as hex bitmaps (griffin/tda)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze-inertia",
                       help="similarity battery + flocking heatmaps")
    common(p)
    p.add_argument("--samples", default=None,
                   help="JSON battery [{index,text,treatment}]; default: built-in 13")
    p.add_argument("--metric", choices=analysis.SIMILARITY_METRICS, default="jaccard")
    p.add_argument("--layer", type=int, default=None,
                   help="single layer (default: mean over layers)")
    p.add_argument("--profile", default=None, help="binarization thresholds")
    p.add_argument("--pretrained", action="store_true",
                   help="checkpoint carries semantics: fail on ordinal check failures")
    p.set_defaults(func=cmd_analyze_inertia)

    p = sub.add_parser("bench", help="strategy latency/FLOP/fidelity comparison")
    common(p, model_required=False)
    p.add_argument("--spec", default=None, help="BenchSpec JSON file")
    p.add_argument("--prompt-len", type=int, default=128)
    p.add_argument("--new-tokens", type=int, default=128)
    p.add_argument("--strategies", default="dense,tt,griffin,tda")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--profile", default=None)
    p.add_argument("--cett-target", type=float, default=0.2)
    p.add_argument("--format", choices=("json", "csv", "markdown_table"),
                   default="markdown_table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("emergence", help="toy-network sparsity trajectories")
    p.add_argument("--variant", choices=("relu", "swiglu", "both"), default="both")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=os.environ.get("DYNACT_OUT_DIR", "."))
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_emergence)

    p = sub.add_parser("make-toy-model", help="write a random model fixture")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=257)
    p.add_argument("--activation", choices=("relu", "silu", "relu_squared"),
                   default="silu")
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--positional-encoding", choices=("none", "sinusoidal"),
                   default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--out-dir", default=os.environ.get("DYNACT_OUT_DIR", "."))
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_make_toy_model)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DynactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
