"""Command-line front end.

Subcommands: ``train``, ``evaluate``, ``analyze`` (modes ``routes``,
``cramers``, ``entropy``, ``permute``) and ``inspect``. Configuration
comes from an optional ``key=value`` file plus repeated ``--key value``
overrides; unknown keys are rejected. Machine outputs are JSON or CSV;
progress and diagnostics go to stderr.

Exit codes: 0 success, 1 runtime failure (e.g. diverged training),
2 config/schema violation, 3 missing or corrupt data, 4 checkpoint
problems, 5 asking for routing analysis on a dense model.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from moekit import analytics
from moekit.data import (CorpusError, SynthSpec, Tokenizer, generate, load_corpus,
                         save_corpus)
from moekit.encoder import (CheckpointError, CheckpointMismatchError, ModelConfig,
                            count_parameters, load_checkpoint)
from moekit.errors import ConfigError
from moekit.training import (AugmentConfig, TrainConfig, TrainingDiverged,
                             run_experiment, split_corpus)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_DENSE_ANALYSIS = 5

OUTPUT_DIR_ENV = "MOEKIT_OUTPUT_DIR"


class DenseAnalysisError(Exception):
    """Routing analysis requested on a model without routers."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    "variant": (str, "dense"),
    "layers": (int, 4),
    "embed_dim": (int, 64),
    "ffn_dim": (int, 256),
    "heads": (int, 4),
    "experts": (int, 1),
    "frame_stack": (int, 4),
    "feat_dim": (int, 80),
    "peak_lr": (float, 1e-3),
    "warmup_steps": (int, 200),
    "cosine_steps": (int, 2000),
    "step_decay_factor": (float, 0.5),
    "clip_norm": (float, 0.1),
    "aux_weight": (float, 10.0),
    "weight_decay": (float, 0.01),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.98),
    "adam_eps": (float, 1e-8),
    "max_steps": (int, 2000),
    "batch_max_frames": (int, 800),
    "holdout_fraction": (float, 0.1),
    "checkpoint_every": (int, 0),
    "seed": (int, 0),
    "augment": (_bool, True),
    "freq_masks": (int, 2),
    "freq_width": (int, 30),
    "time_masks": (int, 10),
    "time_width": (int, 50),
    "time_ratio": (float, 0.1),
    "synth_utterances": (int, 0),
    "alphabet_size": (int, 16),
    "min_tokens": (int, 5),
    "max_tokens": (int, 15),
    "min_frames": (int, 8),
    "max_frames": (int, 14),
    "template_noise_sigma": (float, 0.05),
    "channel_noise_sigma": (float, 0.1),
    "data_seed": (int, 0),
    "data_dir": (str, ""),
    "out_dir": (str, ""),
}


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Merge defaults, config file, and --key value overrides; reject
    unknown keys and unparseable values."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}

    def set_kv(key: str, raw: str, origin: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        parse = SCHEMA[key][0]
        try:
            cfg[key] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r} ({origin}): {e}") from None

    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            set_kv(key.strip(), raw.strip(), f"{path}:{lineno}")

    if len(overrides) % 2 != 0:
        raise ConfigError(f"dangling override flag {overrides[-1]!r} (expected --key value)")
    for flag, raw in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"unexpected argument {flag!r} (expected --key value)")
        set_kv(flag[2:], raw, "command line")
    return cfg


def resolve_out_dir(cfg_value: str, fallback: str) -> Path:
    if cfg_value:
        return Path(cfg_value)
    env = os.environ.get(OUTPUT_DIR_ENV, "")
    if env:
        return Path(env)
    return Path(fallback)


def _model_config(cfg: dict, variant: str) -> ModelConfig:
    experts = 1 if variant == "dense" else cfg["experts"]
    return ModelConfig(
        variant=variant, layers=cfg["layers"], embed_dim=cfg["embed_dim"],
        ffn_dim=cfg["ffn_dim"], heads=cfg["heads"], experts=experts,
        vocab_size=cfg["alphabet_size"] + 1, frame_stack=cfg["frame_stack"],
        feat_dim=cfg["feat_dim"])


def _train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(
        peak_lr=cfg["peak_lr"], warmup_steps=cfg["warmup_steps"],
        cosine_steps=cfg["cosine_steps"], step_decay_factor=cfg["step_decay_factor"],
        clip_norm=cfg["clip_norm"], aux_weight=cfg["aux_weight"],
        weight_decay=cfg["weight_decay"], adam_beta1=cfg["adam_beta1"],
        adam_beta2=cfg["adam_beta2"], adam_eps=cfg["adam_eps"],
        max_steps=cfg["max_steps"], batch_max_frames=cfg["batch_max_frames"],
        holdout_fraction=cfg["holdout_fraction"], checkpoint_every=cfg["checkpoint_every"],
        seed=cfg["seed"],
        augment=AugmentConfig(
            freq_masks=cfg["freq_masks"], freq_width=cfg["freq_width"],
            time_masks=cfg["time_masks"], time_width=cfg["time_width"],
            time_ratio=cfg["time_ratio"], enabled=cfg["augment"]))
    tc.validate()
    return tc


def _synth_spec(cfg: dict) -> SynthSpec:
    spec = SynthSpec(
        alphabet_size=cfg["alphabet_size"], min_tokens=cfg["min_tokens"],
        max_tokens=cfg["max_tokens"], min_frames=cfg["min_frames"],
        max_frames=cfg["max_frames"], feat_dim=cfg["feat_dim"],
        template_noise_sigma=cfg["template_noise_sigma"],
        channel_noise_sigma=cfg["channel_noise_sigma"],
        frame_stack=cfg["frame_stack"], seed=cfg["data_seed"])
    spec.validate()
    return spec


def _load_utterances(cfg: dict, synth: bool):
    if synth:
        if cfg["synth_utterances"] < 1:
            raise ConfigError("synth mode needs synth_utterances >= 1")
        return generate(_synth_spec(cfg), cfg["synth_utterances"])
    if not cfg["data_dir"]:
        raise ConfigError("either --synth or a data_dir is required")
    utts = load_corpus(cfg["data_dir"])
    if not utts:
        raise CorpusError(f"corpus at {cfg['data_dir']} is empty")
    return utts


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    variants = [v.strip() for v in cfg["variant"].split(",") if v.strip()]
    if not variants:
        raise ConfigError("no variant given")
    for v in variants:
        if v not in ("dense", "switch", "omni"):
            raise ConfigError(f"unknown variant {v!r}")
        if v == "dense" and len(variants) == 1 and cfg["experts"] not in (0, 1):
            raise ConfigError("dense variant is inconsistent with experts > 1")
        if v in ("switch", "omni") and cfg["experts"] < 2:
            raise ConfigError(f"{v} variant needs experts >= 2, got {cfg['experts']}")
    out_dir = resolve_out_dir(cfg["out_dir"], "run_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    utts = _load_utterances(cfg, args.synth)
    tokenizer = Tokenizer(cfg["alphabet_size"])
    train_cfg = _train_config(cfg)
    pairs = [(_model_config(cfg, v), train_cfg) for v in variants]
    for mc, _ in pairs:
        mc.validate()
    if args.synth:
        save_corpus(utts, out_dir / "corpus")
        _log(f"wrote synthetic corpus ({len(utts)} utterances) to {out_dir / 'corpus'}")
    _log(f"training {', '.join(variants)} for {train_cfg.max_steps} steps "
         f"on {len(utts)} utterances")
    report = run_experiment(pairs, utts, tokenizer, out_dir)
    _, held = split_corpus(utts, train_cfg.holdout_fraction, train_cfg.seed)
    if held:
        save_corpus(held, out_dir / "holdout_corpus")
    report.write_summary(out_dir / "summary.json")
    for r in report.results:
        _log(f"{r.variant}: holdout WER {r.holdout_wer:.4f}, "
             f"final smoothed CTC {r.log.smoothed_final_ctc():.4f}")
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def _load_model(path: str):
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _corpus_for_model(model, data_dir: str):
    utts = load_corpus(data_dir)
    if not utts:
        raise CorpusError(f"corpus at {data_dir} is empty")
    feat_dim = utts[0].features.shape[1]
    if feat_dim != model.config.feat_dim:
        raise CheckpointMismatchError(
            f"checkpoint expects feat_dim {model.config.feat_dim}, corpus has {feat_dim}")
    return utts


def cmd_evaluate(args) -> int:
    from moekit.training import evaluate_wer

    model = _load_model(args.checkpoint)
    utts = _corpus_for_model(model, args.data)
    tokenizer = Tokenizer(model.config.vocab_size - 1)
    for u in utts:
        try:
            tokenizer.tokenize(u.transcript)
        except Exception:
            raise CorpusError(
                f"utterance {u.id}: transcript outside the checkpoint alphabet") from None
    wer_value, rows = evaluate_wer(model, utts, tokenizer)
    out = {"aggregate_wer": wer_value, "utterances": rows}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _analysis_records(args, model, utts):
    return analytics.dump_routes(model, utts)


def cmd_analyze(args) -> int:
    out_dir = resolve_out_dir(args.out or "", "analysis_out")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "cramers" and args.from_dump:
        records = analytics.read_routes_csv(args.from_dump)
        layers = max(r.layer for r in records) + 1
        rows = [{"layer_lo": pair[0], "layer_hi": pair[1], "cramers_v": v}
                for pair, v in analytics.adjacent_cramers_v(records, layers)]
        analytics.write_analysis_csv(rows, ["layer_lo", "layer_hi", "cramers_v"],
                                     out_dir / "cramers.csv")
        print(json.dumps({"pairs": rows}, sort_keys=True))
        return EXIT_OK

    model = _load_model(args.checkpoint)
    if not model.routed_blocks:
        raise DenseAnalysisError(
            f"{args.checkpoint} is a dense model; routing analysis needs switch or omni")
    utts = _corpus_for_model(model, args.data)
    tokenizer = Tokenizer(model.config.vocab_size - 1)

    if args.mode == "routes":
        records = _analysis_records(args, model, utts)
        probs_path = out_dir / "routes_probs.csv" if args.probs else None
        analytics.write_routes_csv(records, out_dir / "routes.csv", probs_path)
        layers = len(model.routed_blocks)
        tables = [analytics.contingency(records, l, model.config.experts)
                  for l in range(layers - 1)]
        alignments = (analytics.align_labels(tables) if tables
                      else [list(range(model.config.experts))])
        grid = analytics.usage_map(records, [list(map(int, a)) for a in alignments]
                                   if tables else alignments)
        analytics.write_json({"alignments": [list(map(int, a)) for a in alignments],
                              "utterances": grid}, out_dir / "usage_map.json")
        _log(f"wrote {len(records)} routing records to {out_dir / 'routes.csv'}")
        print(json.dumps({"records": len(records), "layers": layers}, sort_keys=True))
        return EXIT_OK

    if args.mode == "cramers":
        records = _analysis_records(args, model, utts)
        layers = len(model.routed_blocks)
        pairs = analytics.adjacent_cramers_v(records, layers, model.config.experts)
        rows = [{"layer_lo": p[0], "layer_hi": p[1], "cramers_v": v} for p, v in pairs]
        analytics.write_analysis_csv(rows, ["layer_lo", "layer_hi", "cramers_v"],
                                     out_dir / "cramers.csv")
        print(json.dumps({"pairs": rows}, sort_keys=True))
        return EXIT_OK

    if args.mode == "entropy":
        records = _analysis_records(args, model, utts)
        labels = analytics.frame_argmax_labels(model, utts)
        report = analytics.routing_entropy(records, labels, top_k=args.top_k,
                                           use_probabilities=args.prob_averaged)
        rows = [{"symbol": sym, "layer": layer, "entropy_bits": h}
                for (sym, layer), h in sorted(report.entropy.items())]
        analytics.write_analysis_csv(rows, ["symbol", "layer", "entropy_bits"],
                                     out_dir / "entropy.csv")
        meta = {"groups": {str(k): v for k, v in report.groups.items()},
                "skipped_cells": report.skipped}
        analytics.write_json(meta, out_dir / "entropy_meta.json")
        print(json.dumps({"cells": len(rows), "skipped": report.skipped}, sort_keys=True))
        return EXIT_OK

    if args.mode == "permute":
        p_values = [float(x) for x in args.p.split(",") if x.strip() != ""]
        rows = analytics.permutation_experiment(
            model, utts, tokenizer, p_values, trials=args.trials, seed=args.seed,
            exclude_original=args.exclude_original)
        analytics.write_analysis_csv(rows, ["p", "baseline_wer", "mean_change", "absolute"],
                                     out_dir / "permute.csv")
        print(json.dumps({"rows": rows}, sort_keys=True))
        return EXIT_OK

    raise ConfigError(f"unknown analyze mode {args.mode!r}")


def cmd_inspect(args) -> int:
    model = _load_model(args.checkpoint)
    cfg = model.config
    counts = count_parameters(model)
    routers = 0 if cfg.variant == "dense" else (1 if cfg.variant == "omni" else cfg.layers)
    out = {
        "config": asdict(cfg),
        "parameters": counts,
        "router_tensors": routers,
        "router_shared": cfg.variant == "omni",
        "experts_per_layer": cfg.experts,
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moekit", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one or more variants")
    p_train.add_argument("--config", default=None, help="key=value config file")
    p_train.add_argument("--synth", action="store_true",
                         help="generate a synthetic corpus instead of reading data_dir")

    p_eval = sub.add_parser("evaluate", help="greedy-decode a corpus and report WER")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)

    p_an = sub.add_parser("analyze", help="routing diagnostics")
    p_an.add_argument("mode", choices=["routes", "cramers", "entropy", "permute"])
    p_an.add_argument("--checkpoint", default=None)
    p_an.add_argument("--data", default=None)
    p_an.add_argument("--out", default=None)
    p_an.add_argument("--probs", action="store_true",
                      help="routes: also write the probability sidecar CSV")
    p_an.add_argument("--from-dump", default=None,
                      help="cramers: read a routes.csv instead of running the model")
    p_an.add_argument("--top-k", type=int, default=100)
    p_an.add_argument("--prob-averaged", action="store_true",
                      help="entropy: use mean routing probabilities instead of counts")
    p_an.add_argument("--p", default="0,0.1,0.3,0.5")
    p_an.add_argument("--trials", type=int, default=5)
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--exclude-original", action="store_true")

    p_ins = sub.add_parser("inspect", help="print checkpoint structure as JSON")
    p_ins.add_argument("--checkpoint", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    args.overrides = extra
    if args.command != "train" and extra:
        print(f"error: unexpected arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "analyze":
            if args.mode != "cramers" or not args.from_dump:
                if not args.checkpoint or not args.data:
                    raise ConfigError("analyze needs --checkpoint and --data "
                                      "(or cramers --from-dump)")
            return cmd_analyze(args)
        if args.command == "inspect":
            return cmd_inspect(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CorpusError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DenseAnalysisError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DENSE_ANALYSIS
    except TrainingDiverged as e:
        print(f"training diverged: {json.dumps(e.diagnostic)}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
