"""Training loop: AdamW, warmup/cosine/step-decay schedule, spectrogram
masking, and the multi-variant experiment driver.

The learning rate warms up linearly from zero, follows a cosine from the
peak down to peak * step_decay_factor over ``cosine_steps``, then keeps
multiplying by ``step_decay_factor`` at every further interval of the same
length; the cosine floor is chosen so the hand-off is continuous.

The total objective is mean CTC loss over the batch plus
``aux_weight`` times the routing balance loss (routed variants only). Any
non-finite loss or gradient aborts training with a diagnostic that names
the step and the offending term.

Determinism: batch order, augmentation, and the held-out split each use a
named stream derived from the config seed, so one seed fixes the entire
run bit-for-bit on a given build.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from moekit import tensor as T
from moekit.ctc import corpus_wer, ctc_loss_batch, greedy_decode, normalize_text
from moekit.data import Batch, Tokenizer, Utterance, make_batch
from moekit.encoder import Model, ModelConfig, build_model, count_parameters, save_checkpoint
from moekit.errors import ConfigError, ContractError
from moekit.moe import load_balance_loss
from moekit.rng import named_rng
from moekit.tensor import Tape, Tensor

SMOOTH_WINDOW = 50


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite.

    Carries a ``diagnostic`` dict naming the step and the term that broke.
    """

    def __init__(self, diagnostic: dict):
        super().__init__(f"training diverged at step {diagnostic.get('step')}: "
                         f"{diagnostic.get('term')} = {diagnostic.get('value')}")
        self.diagnostic = diagnostic


@dataclass
class AugmentConfig:
    """Spectrogram masking knobs (defaults follow the common large-scale recipe)."""

    freq_masks: int = 2
    freq_width: int = 30
    time_masks: int = 10
    time_width: int = 50
    time_ratio: float = 0.1
    enabled: bool = True


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    cosine_steps: int = 2000
    step_decay_factor: float = 0.5
    clip_norm: float = 0.1
    aux_weight: float = 10.0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    max_steps: int = 2000
    batch_max_frames: int = 800
    holdout_fraction: float = 0.1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        for name in ("peak_lr", "clip_norm", "batch_max_frames", "max_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("warmup_steps", "cosine_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not (0.0 < self.step_decay_factor <= 1.0):
            raise ConfigError(
                f"step_decay_factor must lie in (0, 1], got {self.step_decay_factor}")
        if self.aux_weight < 0 or self.weight_decay < 0:
            raise ConfigError("aux_weight and weight_decay must be non-negative")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ConfigError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate at an integer step (0-based).

    Linear warmup to peak over warmup_steps, cosine to
    peak * step_decay_factor over the next cosine_steps, then a further
    multiply by step_decay_factor per cosine_steps interval.
    """
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    peak, sdf = cfg.peak_lr, cfg.step_decay_factor
    if step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    floor = peak * sdf
    if t <= cfg.cosine_steps:
        return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * t / cfg.cosine_steps))
    # The cosine lands exactly on the floor, which the first step-decay
    # interval then holds; each further interval multiplies by the factor.
    extra = (t - cfg.cosine_steps - 1) // cfg.cosine_steps
    return floor * sdf ** extra


class AdamW:
    """Adam with decoupled weight decay.

    The decay term subtracts lr * weight_decay * value directly, so a
    parameter with zero gradient still shrinks by exactly that amount each
    step.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * update + lr * self.weight_decay * p.data


def clip_gradients(params: dict[str, Tensor], clip_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most clip_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > clip_norm and norm > 0:
        factor = clip_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def apply_masking(features: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Zero random frequency bands and time spans of one utterance.

    Draw order per mask: width first, then start position, both uniform
    inclusive. Frequency widths are clamped to the feature dimension; time
    widths to min(time_width, floor(time_ratio * T)). Returns a copy.
    """
    out = np.array(features)
    t_len, n_freq = out.shape
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, min(cfg.freq_width, n_freq) + 1))
        s = int(rng.integers(0, n_freq - w + 1))
        out[:, s:s + w] = 0.0
    t_cap = min(cfg.time_width, int(cfg.time_ratio * t_len))
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, t_cap + 1))
        s = int(rng.integers(0, t_len - w + 1))
        out[s:s + w, :] = 0.0
    return out


@dataclass
class TrainRecord:
    step: int
    lr: float
    ctc_loss: float
    balance_loss: float
    total_loss: float
    grad_norm: float
    expert_fractions: list  # per routed layer, list of f_j


class TrainLog:
    """Step records plus CSV serialization with a stable column order."""

    def __init__(self, routed_layers: int, num_experts: int):
        self.routed_layers = routed_layers
        self.num_experts = num_experts
        self.records: list[TrainRecord] = []

    def append(self, rec: TrainRecord) -> None:
        self.records.append(rec)

    def columns(self) -> list[str]:
        cols = ["step", "lr", "ctc_loss", "balance_loss", "total_loss", "grad_norm"]
        for l in range(self.routed_layers):
            for j in range(self.num_experts):
                cols.append(f"f_layer{l}_expert{j}")
        return cols

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(self.columns()) + "\n")
            for r in self.records:
                row = [str(r.step), repr(r.lr), repr(r.ctc_loss), repr(r.balance_loss),
                       repr(r.total_loss), repr(r.grad_norm)]
                for frac in r.expert_fractions:
                    row.extend(repr(float(x)) for x in frac)
                f.write(",".join(row) + "\n")

    def smoothed_final_ctc(self, window: int = SMOOTH_WINDOW) -> float:
        if not self.records:
            raise ContractError("empty training log")
        tail = self.records[-window:]
        return sum(r.ctc_loss for r in tail) / len(tail)


def _check_finite(value: float, step: int, term: str) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged({"step": step, "term": term, "value": value})
    return value


def train_step(model: Model, optimizer: AdamW, batch: Batch, cfg: TrainConfig,
               step: int, augment_rng) -> TrainRecord:
    """One optimization step; returns the log record."""
    feats = batch.features
    if cfg.augment.enabled:
        feats = np.array(batch.features)
        for b, length in enumerate(batch.lengths):
            feats[b, :length] = apply_masking(batch.features[b, :length],
                                              cfg.augment, augment_rng)
        batch = Batch(features=feats, lengths=batch.lengths,
                      targets=batch.targets, ids=batch.ids)
    model.zero_grad()
    lr = lr_at(step, cfg)
    try:
        with Tape():
            result = model.forward(batch)
            log_probs = [T.log_softmax(lg) for lg in result.logits]
            ctc = ctc_loss_batch(log_probs, batch.targets)
            if result.dispatches:
                balance = load_balance_loss(result.dispatches, model.config.experts)
                total = T.add(ctc, T.scale(balance, cfg.aux_weight))
                balance_value = _check_finite(balance.item(), step, "balance_loss")
            else:
                balance_value = 0.0
                total = ctc
            ctc_value = _check_finite(ctc.item(), step, "ctc_loss")
            total_value = _check_finite(total.item(), step, "total_loss")
            T.backward(total)
    except T.NumericError as e:
        # Non-finite activations trip the softmax checks before any loss
        # value exists; report them through the same divergence channel.
        raise TrainingDiverged({"step": step, "term": "forward",
                                "value": float("nan")}) from e
    params = model.named_parameters()
    norm = _check_finite(clip_gradients(params, cfg.clip_norm), step, "grad_norm")
    optimizer.step(lr)
    fractions = []
    for d in result.dispatches:
        counts = np.bincount(d.assignment, minlength=model.config.experts)
        fractions.append((counts / d.num_tokens).tolist())
    return TrainRecord(step=step, lr=lr, ctc_loss=ctc_value, balance_loss=balance_value,
                       total_loss=total_value, grad_norm=norm, expert_fractions=fractions)


def pack_batches(order, utterances: list[Utterance], tokenizer: Tokenizer,
                 max_frames: int, frame_stack: int) -> list[Batch]:
    """Greedily pack utterances (in the given order) up to max_frames per batch."""
    batches = []
    bucket = []
    used = 0
    for i in order:
        u = utterances[i]
        t_len = u.features.shape[0]
        if bucket and used + t_len > max_frames:
            batches.append(make_batch(bucket, tokenizer, frame_stack))
            bucket, used = [], 0
        bucket.append(u)
        used += t_len
    if bucket:
        batches.append(make_batch(bucket, tokenizer, frame_stack))
    return batches


def split_corpus(utterances: list[Utterance], holdout_fraction: float, seed: int):
    """Deterministic train/held-out split driven by the config seed."""
    n = len(utterances)
    k = int(round(n * holdout_fraction))
    order = named_rng(seed, "split").permutation(n)
    held = sorted(order[:k].tolist())
    train = sorted(order[k:].tolist())
    return [utterances[i] for i in train], [utterances[i] for i in held]


def evaluate_wer(model: Model, utterances: list[Utterance], tokenizer: Tokenizer):
    """Greedy-decode a corpus; returns (pooled WER, per-utterance rows)."""
    refs, hyps, rows = [], [], []
    for u in utterances:
        logits, _ = model.forward_utterance(u.features)
        decoded = greedy_decode(logits)
        hyp_text = tokenizer.detokenize(decoded)
        ref_words = normalize_text(u.transcript)
        hyp_words = normalize_text(hyp_text)
        refs.append(ref_words)
        hyps.append(hyp_words)
        rows.append({"id": u.id, "reference": u.transcript, "hypothesis": hyp_text})
    return corpus_wer(refs, hyps), rows


@dataclass
class VariantResult:
    variant: str
    model: Model
    log: TrainLog
    holdout_wer: float
    param_counts: dict
    final_checkpoint: str | None


@dataclass
class ComparisonReport:
    results: list[VariantResult]
    holdout_ids: list[str]
    seed: int

    def summary(self) -> dict:
        out = {"seed": self.seed, "holdout_ids": self.holdout_ids, "variants": {}}
        for r in self.results:
            out["variants"][r.variant] = {
                "steps": len(r.log.records),
                "final_ctc_smoothed": r.log.smoothed_final_ctc(),
                "final_total_loss": r.log.records[-1].total_loss,
                "holdout_wer": r.holdout_wer,
                "params": r.param_counts,
                "checkpoint": r.final_checkpoint,
            }
        return out

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def train_variant(model_cfg: ModelConfig, train_cfg: TrainConfig,
                  train_utts: list[Utterance], tokenizer: Tokenizer,
                  out_dir=None) -> tuple[Model, TrainLog]:
    """Train one variant to max_steps over the given utterances."""
    train_cfg.validate()
    model = build_model(model_cfg, train_cfg.seed)
    params = model.named_parameters()
    optimizer = AdamW(params, beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2,
                      eps=train_cfg.adam_eps, weight_decay=train_cfg.weight_decay)
    routed = len(model.routed_blocks)
    log = TrainLog(routed, model_cfg.experts if routed else 0)
    order_rng = named_rng(train_cfg.seed, "batch-order")
    augment_rng = named_rng(train_cfg.seed, "augment")
    step = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    while step < train_cfg.max_steps:
        order = order_rng.permutation(len(train_utts))
        for batch in pack_batches(order, train_utts, tokenizer,
                                  train_cfg.batch_max_frames, model_cfg.frame_stack):
            if step >= train_cfg.max_steps:
                break
            log.append(train_step(model, optimizer, batch, train_cfg, step, augment_rng))
            step += 1
            if (out_dir is not None and train_cfg.checkpoint_every > 0
                    and step % train_cfg.checkpoint_every == 0):
                save_checkpoint(model, out_dir / f"{model_cfg.variant}_step{step}.ckpt")
    return model, log


def run_experiment(variant_configs: list[tuple[ModelConfig, TrainConfig]],
                   utterances: list[Utterance], tokenizer: Tokenizer,
                   out_dir=None) -> ComparisonReport:
    """Train several variants under identical data streams and compare.

    All TrainConfigs must be identical (the comparison is only meaningful
    with shared hyperparameters), and every variant sees the same
    train/held-out split, batch order, and augmentation draws.
    """
    if not variant_configs:
        raise ContractError("run_experiment needs at least one variant")
    ref = asdict(variant_configs[0][1])
    for _, tc in variant_configs[1:]:
        if asdict(tc) != ref:
            raise ContractError("all variants must share one TrainConfig")
    train_cfg = variant_configs[0][1]
    train_utts, held_utts = split_corpus(utterances, train_cfg.holdout_fraction,
                                         train_cfg.seed)
    if not train_utts:
        raise ContractError("no training utterances after the held-out split")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for model_cfg, tc in variant_configs:
        model, log = train_variant(model_cfg, tc, train_utts, tokenizer, out_dir)
        wer_value, _ = evaluate_wer(model, held_utts, tokenizer) if held_utts else (float("nan"), [])
        ckpt_path = None
        if out_dir is not None:
            ckpt_path = str(out_dir / f"{model_cfg.variant}_final.ckpt")
            save_checkpoint(model, ckpt_path)
            log.to_csv(out_dir / f"{model_cfg.variant}_trainlog.csv")
        results.append(VariantResult(
            variant=model_cfg.variant, model=model, log=log, holdout_wer=wer_value,
            param_counts=count_parameters(model), final_checkpoint=ckpt_path))
    return ComparisonReport(results=results,
                            holdout_ids=[u.id for u in held_utts],
                            seed=train_cfg.seed)
