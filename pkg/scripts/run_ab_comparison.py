#!/usr/bin/env python3
"""Multi-seed A/B comparison of the dense, per-layer-routed, and
shared-router encoder variants on a synthetic corpus.

Trains every requested variant under identical hyperparameters, data
order, and augmentation draws per seed, then prints a verdict table:
held-out WER per variant plus how often the shared-router variant ends
with a training CTC loss at or below the per-layer-routed one.

Example:
    python3 scripts/run_ab_comparison.py --seeds 0,1,2 --out ab_out
"""

import argparse
import json
import sys
import time
from pathlib import Path

from moekit.data import SynthSpec, Tokenizer, generate
from moekit.encoder import ModelConfig
from moekit.training import AugmentConfig, TrainConfig, run_experiment


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="ab_out", help="output directory")
    ap.add_argument("--seeds", default="0", help="comma-separated training seeds")
    ap.add_argument("--variants", default="dense,switch,omni")
    ap.add_argument("--utterances", type=int, default=2000)
    ap.add_argument("--alphabet", type=int, default=16)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--embed-dim", type=int, default=64)
    ap.add_argument("--ffn-dim", type=int, default=256)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--experts", type=int, default=2)
    ap.add_argument("--steps", type=int, default=3500)
    ap.add_argument("--peak-lr", type=float, default=2e-3)
    ap.add_argument("--aux-weight", type=float, default=0.1)
    ap.add_argument("--data-seed", type=int, default=0)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]

    spec = SynthSpec(alphabet_size=args.alphabet, min_tokens=4, max_tokens=10,
                     min_frames=12, max_frames=16, feat_dim=80,
                     template_noise_sigma=0.08, channel_noise_sigma=0.08,
                     frame_stack=4, seed=args.data_seed)
    utts = generate(spec, args.utterances)
    tokenizer = Tokenizer(args.alphabet)
    print(f"corpus: {len(utts)} utterances, alphabet {args.alphabet}",
          file=sys.stderr)

    def model_cfg(variant):
        return ModelConfig(variant=variant, layers=args.layers,
                           embed_dim=args.embed_dim, ffn_dim=args.ffn_dim,
                           heads=args.heads,
                           experts=1 if variant == "dense" else args.experts,
                           vocab_size=args.alphabet + 1, frame_stack=4,
                           feat_dim=80)

    def train_cfg(seed):
        warm = min(100, args.steps // 10)
        return TrainConfig(peak_lr=args.peak_lr, warmup_steps=warm,
                           cosine_steps=max(args.steps - 200, warm + 1),
                           step_decay_factor=0.05, clip_norm=0.1,
                           aux_weight=args.aux_weight, weight_decay=0.01,
                           max_steps=args.steps, batch_max_frames=800,
                           holdout_fraction=0.1, seed=seed,
                           augment=AugmentConfig(freq_masks=2, freq_width=10,
                                                 time_masks=2, time_width=8,
                                                 time_ratio=0.2, enabled=True))

    rows = {}
    for seed in seeds:
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        pairs = [(model_cfg(v), train_cfg(seed)) for v in variants]
        t0 = time.perf_counter()
        report = run_experiment(pairs, utts, tokenizer, seed_dir)
        report.write_summary(seed_dir / "summary.json")
        for r in report.results:
            rows[(seed, r.variant)] = (r.holdout_wer, r.log.smoothed_final_ctc())
            print(f"seed {seed} {r.variant:6s}  wer {r.holdout_wer:.4f}  "
                  f"smoothed ctc {r.log.smoothed_final_ctc():.4f}  "
                  f"params {r.param_counts['total']:,}")
        print(f"seed {seed} done in {time.perf_counter() - t0:.0f}s",
              file=sys.stderr)

    if "omni" in variants and "switch" in variants:
        wins = [s for s in seeds
                if rows[(s, "omni")][1] <= rows[(s, "switch")][1]]
        print(f"omni final smoothed CTC <= switch in {len(wins)}/{len(seeds)} "
              f"seeds: {wins}")

    verdict = {f"seed{s}": {v: {"wer": rows[(s, v)][0], "ctc": rows[(s, v)][1]}
                            for v in variants} for s in seeds}
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
