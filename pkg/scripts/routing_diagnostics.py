#!/usr/bin/env python3
"""One-stop routing diagnostics for a trained routed checkpoint.

Dumps per-token routing decisions, measures adjacent-layer agreement
(Cramer's V), per-symbol routing entropy, expert usage with aligned
labels, and WER degradation under random expert permutations.

Example:
    python3 scripts/routing_diagnostics.py \
        --checkpoint ab_out/seed0/omni_final.ckpt \
        --data ab_out/seed0/holdout_corpus --out diag_out
"""

import argparse
import json
import sys
from collections import defaultdict
from pathlib import Path

from moekit import analytics
from moekit.data import Tokenizer, load_corpus
from moekit.encoder import load_checkpoint


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True, help="corpus directory")
    ap.add_argument("--out", default="diag_out")
    ap.add_argument("--p", default="0,0.1,0.3,0.5",
                    help="permutation probabilities to sweep")
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--top-k", type=int, default=100)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = load_checkpoint(args.checkpoint)
    if not model.routed_blocks:
        print("error: dense checkpoint has no routing to analyze",
              file=sys.stderr)
        return 1
    utts = load_corpus(args.data)
    tokenizer = Tokenizer(model.config.vocab_size - 1)
    layers = len(model.routed_blocks)
    experts = model.config.experts
    print(f"{len(utts)} utterances, {layers} routed layers, "
          f"{experts} experts ({model.config.variant})", file=sys.stderr)

    records = analytics.dump_routes(model, utts)
    analytics.write_routes_csv(records, out / "routes.csv", out / "routes_probs.csv")
    print(f"wrote {len(records)} routing records")

    pairs = analytics.adjacent_cramers_v(records, layers, experts)
    print("\nadjacent-layer agreement (Cramer's V):")
    for (lo, hi), v in pairs:
        print(f"  layers {lo}->{hi}: {v:.4f}")
    analytics.write_analysis_csv(
        [{"layer_lo": lo, "layer_hi": hi, "cramers_v": v} for (lo, hi), v in pairs],
        ["layer_lo", "layer_hi", "cramers_v"], out / "cramers.csv")

    tables = [analytics.contingency(records, l, experts)
              for l in range(layers - 1)]
    alignments = (analytics.align_labels(tables) if tables
                  else [list(range(experts))])
    grid = analytics.usage_map(records, [list(map(int, a)) for a in alignments])
    analytics.write_json({"alignments": [list(map(int, a)) for a in alignments],
                          "utterances": grid}, out / "usage_map.json")

    labels = analytics.frame_argmax_labels(model, utts)
    report = analytics.routing_entropy(records, labels, top_k=args.top_k)
    by_layer = defaultdict(list)
    for (sym, layer), h in report.entropy.items():
        by_layer[layer].append(h)
    print("\nrouting entropy over decoded symbols (bits, lower = more "
          "specialized):")
    for layer in sorted(by_layer):
        vals = by_layer[layer]
        print(f"  layer {layer}: mean {sum(vals) / len(vals):.3f} "
              f"over {len(vals)} symbols")
    analytics.write_analysis_csv(
        [{"symbol": sym, "layer": layer, "entropy_bits": h}
         for (sym, layer), h in sorted(report.entropy.items())],
        ["symbol", "layer", "entropy_bits"], out / "entropy.csv")

    p_values = [float(x) for x in args.p.split(",") if x.strip() != ""]
    rows = analytics.permutation_experiment(model, utts, tokenizer, p_values,
                                            trials=args.trials, seed=args.seed)
    print("\nexpert-permutation robustness:")
    for r in rows:
        print(f"  p={r['p']:.1f}: baseline WER {r['baseline_wer']:.4f}, "
              f"mean relative change {r['mean_change']:+.4f}")
    analytics.write_analysis_csv(rows, ["p", "baseline_wer", "mean_change",
                                        "absolute"], out / "permute.csv")
    (out / "report.json").write_text(json.dumps(
        {"records": len(records),
         "cramers_v": {f"{lo}-{hi}": v for (lo, hi), v in pairs},
         "permutation": rows}, indent=2, sort_keys=True))
    print(f"\nartifacts under {out}/", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
