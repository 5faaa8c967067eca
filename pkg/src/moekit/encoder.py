"""Pre-norm transformer encoder over stacked features, in three variants.

The frontend stacks ``frame_stack`` consecutive input frames (zero padding
the tail), projects to the embedding width, and adds fixed sinusoidal
position encodings. Each block applies layer norm -> multi-head
self-attention -> residual, then layer norm -> feed-forward -> residual,
where the feed-forward sublayer is an ordinary :class:`~moekit.moe.ExpertFFN`
for the dense variant and a routed :class:`~moekit.moe.MoELayer` otherwise.
The ``omni`` variant hands the *same* router object to every block, so one
weight tensor (and one gradient accumulator) serves all layers. A final
layer norm feeds a bias-free projection to vocabulary logits.

All linear maps here are bias-free; the only per-feature offsets live in
the layer norms. Checkpoints are a little-endian binary format with magic
``OMNI`` holding the config and every named parameter as raw float32.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from moekit import tensor as T
from moekit.errors import ConfigError
from moekit.moe import DispatchResult, ExpertFFN, MoELayer, Router, moe_forward
from moekit.rng import named_rng
from moekit.tensor import NEG_FILL, Tensor

VARIANTS = ("dense", "switch", "omni")

CHECKPOINT_MAGIC = b"OMNI"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload."""


class CheckpointMismatchError(CheckpointError):
    """Stored parameters disagree with the stored config."""


@dataclass
class ModelConfig:
    variant: str = "dense"
    layers: int = 4
    embed_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    experts: int = 1
    vocab_size: int = 17
    frame_stack: int = 4
    feat_dim: int = 80

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("layers", "embed_dim", "ffn_dim", "heads", "experts",
                     "vocab_size", "frame_stack", "feat_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.variant == "dense" and self.experts != 1:
            raise ConfigError(f"dense variant requires experts=1, got {self.experts}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must cover blank plus one symbol, got {self.vocab_size}")


def sinusoidal_positions(length: int, dim: int, dtype) -> np.ndarray:
    """Fixed sin/cos position table [length x dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return table.astype(dtype)


class Attention:
    """Scaled dot-product multi-head self-attention, bias-free projections."""

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.heads = heads

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        t_len, dim = x.shape
        head_dim = dim // self.heads
        q = T.matmul(x, self.wq)
        k = T.matmul(x, self.wk)
        v = T.matmul(x, self.wv)
        masked = not mask.all()
        if masked:
            # Keys at padded positions are unreachable from every query.
            key_block = np.broadcast_to(~mask[None, :], (t_len, t_len))
        outs = []
        for h in range(self.heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(head_dim))
            if masked:
                scores = T.mask_fill(scores, key_block, NEG_FILL)
            outs.append(T.matmul(T.softmax(scores), vh))
        return T.matmul(T.concat_cols(outs), self.wo)


class LayerNorm:
    def __init__(self, gain: Tensor, bias: Tensor):
        self.gain = gain
        self.bias = bias

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, T.LN_EPS)


class EncoderBlock:
    """ln -> attention -> residual, ln -> feed-forward -> residual."""

    def __init__(self, ln1: LayerNorm, attn: Attention, ln2: LayerNorm, ffn):
        self.ln1 = ln1
        self.attn = attn
        self.ln2 = ln2
        self.ffn = ffn  # ExpertFFN (dense) or MoELayer (routed)

    @property
    def routed(self) -> bool:
        return isinstance(self.ffn, MoELayer)

    def forward(self, x: Tensor, mask: np.ndarray, perturb=None):
        x = T.add(x, self.attn.forward(self.ln1.forward(x), mask))
        h = self.ln2.forward(x)
        dispatch = None
        if self.routed:
            y, dispatch = moe_forward(self.ffn, h, perturb=perturb)
        else:
            y = self.ffn.forward(h)
        return T.add(x, y), dispatch


@dataclass
class ForwardResult:
    """Per-utterance logits plus batch-pooled routing outcomes.

    logits       : one Tensor [T'_u x V] per utterance
    dispatches   : one DispatchResult per routed layer, covering the
                   concatenation of all utterances' stacked frames
    token_counts : stacked-frame count T'_u per utterance, giving the
                   offsets that slice each dispatch back per utterance
    """

    logits: list
    dispatches: list
    token_counts: list

    def utterance_offsets(self) -> list[int]:
        offs = [0]
        for n in self.token_counts:
            offs.append(offs[-1] + n)
        return offs


class Model:
    def __init__(self, config: ModelConfig, params: dict, frontend: Tensor,
                 blocks: list[EncoderBlock], final_ln: LayerNorm, head: Tensor,
                 shared_router: Router | None):
        self.config = config
        self._params = params  # name -> Tensor, insertion-ordered, shared router once
        self.frontend = frontend
        self.blocks = blocks
        self.final_ln = final_ln
        self.head = head
        self.shared_router = shared_router

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    @property
    def routed_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.routed]

    def stack_frames(self, feats: np.ndarray) -> np.ndarray:
        """[T x feat] -> [ceil(T / frame_stack) x frame_stack * feat]."""
        fs = self.config.frame_stack
        t_len, feat = feats.shape
        stacked_len = -(-t_len // fs)
        padded = np.zeros((stacked_len * fs, feat), dtype=feats.dtype)
        padded[:t_len] = feats
        return padded.reshape(stacked_len, fs * feat)

    def forward_utterance(self, feats: np.ndarray, perturb=None):
        """Run one utterance of raw features [T x feat_dim].

        Returns (logits Tensor [T' x V], list of DispatchResult per routed
        layer). Only genuine frames may be passed in; callers slice away
        batch padding first, which is how padded positions stay out of
        attention and of the routing statistics.
        """
        if feats.ndim != 2 or feats.shape[1] != self.config.feat_dim:
            raise T.ShapeError(
                f"expected [T x {self.config.feat_dim}] features, got {feats.shape}")
        stacked = self.stack_frames(feats.astype(T.default_dtype()))
        x = T.matmul(T.constant(stacked), self.frontend)
        pos = sinusoidal_positions(stacked.shape[0], self.config.embed_dim, x.data.dtype)
        x = T.add(x, T.constant(pos))
        mask = np.ones(stacked.shape[0], dtype=bool)
        dispatches = []
        for block in self.blocks:
            x, d = block.forward(x, mask, perturb=perturb)
            if d is not None:
                dispatches.append(d)
        x = self.final_ln.forward(x)
        logits = T.matmul(x, self.head)
        return logits, dispatches

    def forward(self, batch, perturb=None) -> ForwardResult:
        """Run every utterance of a batch; pool dispatches per routed layer."""
        logits = []
        per_utt = []
        counts = []
        for feats, length in zip(batch.features, batch.lengths):
            lg, ds = self.forward_utterance(feats[:length], perturb=perturb)
            logits.append(lg)
            per_utt.append(ds)
            counts.append(int(lg.shape[0]))
        dispatches = []
        if per_utt and per_utt[0]:
            n_layers = len(per_utt[0])
            for l in range(n_layers):
                layer_ds = [ds[l] for ds in per_utt]
                dispatches.append(DispatchResult(
                    assignment=np.concatenate([d.assignment for d in layer_ds]),
                    gate=T.concat_rows([d.gate for d in layer_ds]),
                    probs=T.concat_rows([d.probs for d in layer_ds]),
                ))
        return ForwardResult(logits=logits, dispatches=dispatches, token_counts=counts)


def _init_linear(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def build_model(config: ModelConfig, seed: int) -> Model:
    """Construct a model with per-parameter init streams.

    Each parameter draws from its own named stream (seed, "init", name), so
    two variants built from the same seed share the values of every
    identically-named parameter regardless of construction order.
    """
    config.validate()
    dtype = T.default_dtype()
    params: dict[str, Tensor] = {}

    def lin(name: str, fan_in: int, fan_out: int) -> Tensor:
        p = T.parameter(_init_linear(named_rng(seed, "init", name), fan_in, fan_out), dtype=dtype)
        params[name] = p
        return p

    def ln(name: str) -> LayerNorm:
        gain = T.parameter(np.ones(config.embed_dim), dtype=dtype)
        bias = T.parameter(np.zeros(config.embed_dim), dtype=dtype)
        params[f"{name}.gain"] = gain
        params[f"{name}.bias"] = bias
        return LayerNorm(gain, bias)

    frontend = lin("frontend.weight", config.frame_stack * config.feat_dim, config.embed_dim)

    shared_router = None
    if config.variant == "omni":
        shared_router = Router(lin("shared_router.weight", config.embed_dim, config.experts))

    blocks = []
    for i in range(config.layers):
        ln1 = ln(f"blocks.{i}.ln1")
        attn = Attention(
            lin(f"blocks.{i}.attn.wq", config.embed_dim, config.embed_dim),
            lin(f"blocks.{i}.attn.wk", config.embed_dim, config.embed_dim),
            lin(f"blocks.{i}.attn.wv", config.embed_dim, config.embed_dim),
            lin(f"blocks.{i}.attn.wo", config.embed_dim, config.embed_dim),
            config.heads,
        )
        ln2 = ln(f"blocks.{i}.ln2")
        if config.variant == "dense":
            ffn = ExpertFFN(
                lin(f"blocks.{i}.ffn.w1", config.embed_dim, config.ffn_dim),
                lin(f"blocks.{i}.ffn.w2", config.ffn_dim, config.embed_dim),
            )
        else:
            experts = [
                ExpertFFN(
                    lin(f"blocks.{i}.moe.experts.{j}.w1", config.embed_dim, config.ffn_dim),
                    lin(f"blocks.{i}.moe.experts.{j}.w2", config.ffn_dim, config.embed_dim),
                )
                for j in range(config.experts)
            ]
            if config.variant == "switch":
                router = Router(lin(f"blocks.{i}.moe.router.weight",
                                    config.embed_dim, config.experts))
            else:
                router = shared_router
            ffn = MoELayer(router, experts)
        blocks.append(EncoderBlock(ln1, attn, ln2, ffn))

    final_ln = ln("final_ln")
    head = lin("head.weight", config.embed_dim, config.vocab_size)
    return Model(config, params, frontend, blocks, final_ln, head, shared_router)


def count_parameters(model: Model) -> dict[str, int]:
    """Parameter totals by component; the shared router counts once."""
    groups = {"frontend": 0, "attention": 0, "layer_norm": 0,
              "feed_forward": 0, "router": 0, "head": 0}
    for name, p in model.named_parameters().items():
        if name.startswith("frontend"):
            key = "frontend"
        elif ".attn." in name:
            key = "attention"
        elif ".ln1." in name or ".ln2." in name or name.startswith("final_ln"):
            key = "layer_norm"
        elif ".ffn." in name or ".experts." in name:
            key = "feed_forward"
        elif "router" in name:
            key = "router"
        elif name.startswith("head"):
            key = "head"
        else:
            raise AssertionError(f"unclassified parameter {name}")
        groups[key] += int(p.size)
    groups["total"] = sum(groups.values())
    return groups


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, config JSON, then named float32 blobs.
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", p.ndim))
        for dim in p.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"checkpoint ended while reading {what}")
    return data


def load_checkpoint(path) -> Model:
    """Rebuild a model from disk; bit-exact inverse of save for float32 builds."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            cfg_dict = json.loads(_read_exact(f, cfg_len, "config").decode("utf-8"))
            config = ModelConfig(**cfg_dict)
            config.validate()
        except (ValueError, TypeError) as e:
            raise CheckpointFormatError(f"invalid stored config: {e}") from e
        model = build_model(config, seed=0)
        expected = model.named_parameters()
        (n_params,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        if n_params != len(expected):
            raise CheckpointMismatchError(
                f"checkpoint stores {n_params} parameters, config implies {len(expected)}")
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            if name not in expected:
                raise CheckpointMismatchError(f"unexpected parameter {name!r}")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4, "dimension"))[0]
                          for _ in range(ndim))
            p = expected[name]
            if shape != tuple(p.shape):
                raise CheckpointMismatchError(
                    f"parameter {name!r} has shape {shape}, config implies {tuple(p.shape)}")
            raw = _read_exact(f, 4 * int(np.prod(shape, dtype=np.int64)), f"data of {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            p.data = arr.astype(T.default_dtype())
        trailing = f.read(1)
        if trailing:
            raise CheckpointFormatError("trailing bytes after final parameter")
    return model
