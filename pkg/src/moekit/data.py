"""Synthetic feature corpora, the character tokenizer, and corpus files.

Each alphabet symbol owns a fixed unit-norm template vector. An utterance
is a sequence of words over the letter symbols separated by single spaces
(the space is an ordinary symbol with its own template, standing in for
silence). Rendering a token draws a duration, perturbs the template once
per token block (``template_noise_sigma``), then adds independent
per-frame noise (``channel_noise_sigma``). With both sigmas at zero the
frames inside a block are identical copies of the template.

Durations are re-drawn until the utterance satisfies the decodability
bound floor(T / frame_stack) >= 2 * len(transcript) + 1, so every corpus
item is a legal CTC target after frame stacking.

On disk a corpus is one ``.feat`` file per utterance plus a tab-separated
``manifest.tsv`` (id, relative path, frame count, transcript). Feature
files are little-endian: magic ``FEAT``, version u32, frame count u32,
feature dimension u32, then row-major float32 data.
"""

from __future__ import annotations

import string
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from moekit.errors import ConfigError, ContractError
from moekit.rng import named_rng

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
MANIFEST_NAME = "manifest.tsv"


class CorpusError(ValueError):
    """Base class for corpus load failures."""


class BadMagicError(CorpusError):
    """A feature file does not start with the FEAT magic."""


class TruncatedFileError(CorpusError):
    """A feature file ended before its declared payload."""


class ManifestMismatchError(CorpusError):
    """Manifest row disagrees with the feature file it points to."""


@dataclass
class SynthSpec:
    """Knobs for the synthetic corpus generator.

    ``alphabet_size`` counts all symbols including the space separator, so
    the matching CTC vocabulary has alphabet_size + 1 entries (blank plus
    symbols). ``min_frames``/``max_frames`` bound the duration drawn per
    token; ``frame_stack`` must match the model frontend so the
    decodability re-draw bound is computed against the right frame rate.
    """

    alphabet_size: int = 16
    min_tokens: int = 5
    max_tokens: int = 15
    min_frames: int = 8
    max_frames: int = 14
    feat_dim: int = 80
    template_noise_sigma: float = 0.05
    channel_noise_sigma: float = 0.1
    frame_stack: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.alphabet_size < 2 or self.alphabet_size > 27:
            raise ConfigError(
                f"alphabet_size must be in [2, 27] (space plus letters), got {self.alphabet_size}")
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise ConfigError(
                f"need 1 <= min_tokens <= max_tokens, got {self.min_tokens}/{self.max_tokens}")
        if not (1 <= self.min_frames <= self.max_frames):
            raise ConfigError(
                f"need 1 <= min_frames <= max_frames, got {self.min_frames}/{self.max_frames}")
        if self.feat_dim < 1:
            raise ConfigError(f"feat_dim must be positive, got {self.feat_dim}")
        if self.frame_stack < 1:
            raise ConfigError(f"frame_stack must be positive, got {self.frame_stack}")
        if self.template_noise_sigma < 0 or self.channel_noise_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")


@dataclass
class Utterance:
    features: np.ndarray  # [T x feat_dim] float32
    transcript: str
    id: str


@dataclass
class Batch:
    """Zero-padded feature batch plus per-utterance truth."""

    features: np.ndarray  # [B x T_max x feat_dim]
    lengths: list[int]
    targets: list[list[int]]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.lengths)


def alphabet_chars(alphabet_size: int) -> list[str]:
    """The symbol inventory: space plus the first alphabet_size - 1 letters."""
    return [" "] + list(string.ascii_lowercase[: alphabet_size - 1])


class Tokenizer:
    """Character tokenizer; id 0 is reserved for the CTC blank."""

    def __init__(self, alphabet_size: int):
        self.chars = alphabet_chars(alphabet_size)
        self._to_id = {c: i + 1 for i, c in enumerate(self.chars)}
        self._to_char = {i + 1: c for i, c in enumerate(self.chars)}

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 1

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self._to_id[c] for c in text]
        except KeyError as e:
            raise ContractError(f"character {e.args[0]!r} not in the alphabet") from None

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == 0:
                raise ContractError("blank id 0 has no character")
            if i not in self._to_char:
                raise ContractError(f"id {i} outside the vocabulary")
            out.append(self._to_char[i])
        return "".join(out)


def _draw_transcript(spec: SynthSpec, rng) -> str:
    """Words of one to four letters joined by single spaces; the symbol
    total (letters plus separators) lands exactly on a draw from
    [min_tokens, max_tokens]."""
    letters = alphabet_chars(spec.alphabet_size)[1:]
    target = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    words = []
    used = 0
    while used < target:
        sep = 1 if words else 0
        room = target - used - sep
        # A leftover room of exactly 1 after this word would be a dead
        # separator slot, so that word length is excluded up front.
        options = [w for w in (2, 3, 4) if w <= room and w != room - 1]
        w_len = options[rng.integers(0, len(options))] if options else room
        words.append("".join(letters[rng.integers(0, len(letters))]
                             for _ in range(w_len)))
        used += sep + w_len
    return " ".join(words)


def _render(spec: SynthSpec, templates: np.ndarray, tokenizer: Tokenizer,
            transcript: str, rng):
    """Draw durations (re-drawing until CTC-decodable), then emit frames.

    Returns (features [T x feat_dim] float32, per-frame symbol ids).
    """
    token_ids = tokenizer.tokenize(transcript)
    need = 2 * len(token_ids) + 1
    for _ in range(1000):
        durations = rng.integers(spec.min_frames, spec.max_frames + 1, size=len(token_ids))
        if int(durations.sum()) // spec.frame_stack >= need:
            break
    else:
        raise ContractError(
            "could not draw CTC-decodable durations; raise max_frames or lower max_tokens")
    frames = []
    labels = []
    for tok, dur in zip(token_ids, durations):
        block = templates[tok - 1]
        if spec.template_noise_sigma > 0:
            block = block + spec.template_noise_sigma * rng.standard_normal(spec.feat_dim)
        chunk = np.tile(block, (dur, 1))
        if spec.channel_noise_sigma > 0:
            chunk = chunk + spec.channel_noise_sigma * rng.standard_normal(chunk.shape)
        frames.append(chunk)
        labels.extend([tok] * int(dur))
    return np.concatenate(frames).astype(np.float32), labels


def symbol_templates(spec: SynthSpec) -> np.ndarray:
    """Unit-norm template per symbol, row order matching token ids 1..A."""
    rng = named_rng(spec.seed, "templates")
    t = rng.standard_normal((spec.alphabet_size, spec.feat_dim))
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def generate(spec: SynthSpec, count: int) -> list[Utterance]:
    utts, _ = generate_with_alignments(spec, count)
    return utts


def generate_with_alignments(spec: SynthSpec, count: int):
    """Like generate, but also returns per-frame symbol ids per utterance.

    Each utterance draws from its own stream (seed, "utt", index), so any
    subset can be regenerated independently and in any order.
    """
    spec.validate()
    templates = symbol_templates(spec)
    tokenizer = Tokenizer(spec.alphabet_size)
    utts = []
    alignments = []
    for i in range(count):
        rng = named_rng(spec.seed, "utt", i)
        transcript = _draw_transcript(spec, rng)
        feats, labels = _render(spec, templates, tokenizer, transcript, rng)
        utts.append(Utterance(features=feats, transcript=transcript, id=f"utt{i:05d}"))
        alignments.append(labels)
    return utts, alignments


def make_batch(utterances: list[Utterance], tokenizer: Tokenizer,
               frame_stack: int = 1) -> Batch:
    """Pad features to a common length and tokenize transcripts.

    Verifies each target fits its utterance after frame stacking.
    """
    if not utterances:
        raise ContractError("make_batch needs at least one utterance")
    feat_dim = utterances[0].features.shape[1]
    t_max = max(u.features.shape[0] for u in utterances)
    feats = np.zeros((len(utterances), t_max, feat_dim), dtype=np.float32)
    lengths, targets, ids = [], [], []
    for b, u in enumerate(utterances):
        t_len = u.features.shape[0]
        feats[b, :t_len] = u.features
        target = tokenizer.tokenize(u.transcript)
        stacked = -(-t_len // frame_stack)
        if stacked < 2 * len(target) + 1:
            raise ContractError(
                f"utterance {u.id}: {stacked} stacked frames cannot emit "
                f"{len(target)} tokens")
        lengths.append(t_len)
        targets.append(target)
        ids.append(u.id)
    return Batch(features=feats, lengths=lengths, targets=targets, ids=ids)


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def write_feat(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ContractError(f"feature array must be [T x feat_dim], got {features.shape}")
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<I", FEAT_VERSION))
        f.write(struct.pack("<I", features.shape[0]))
        f.write(struct.pack("<I", features.shape[1]))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_feat(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(FEAT_MAGIC))
        if magic != FEAT_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        header = f.read(12)
        if len(header) != 12:
            raise TruncatedFileError(f"{path}: truncated header")
        version, t_len, feat_dim = struct.unpack("<III", header)
        if version != FEAT_VERSION:
            raise BadMagicError(f"{path}: unsupported version {version}")
        raw = f.read(4 * t_len * feat_dim)
        if len(raw) != 4 * t_len * feat_dim:
            raise TruncatedFileError(f"{path}: expected {t_len}x{feat_dim} floats")
        if f.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4").reshape(t_len, feat_dim).copy()


def save_corpus(utterances: list[Utterance], directory) -> None:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        rel = f"features/{u.id}.feat"
        write_feat(directory / rel, u.features)
        if "\t" in u.transcript or "\n" in u.transcript:
            raise ContractError(f"utterance {u.id}: transcript contains tab or newline")
        lines.append(f"{u.id}\t{rel}\t{u.features.shape[0]}\t{u.transcript}\n")
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        f.writelines(lines)


def load_corpus(directory) -> list[Utterance]:
    """Read a corpus directory, validating every file against the manifest."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise CorpusError(f"{directory}: no {MANIFEST_NAME}")
    utts = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestMismatchError(
                    f"{manifest}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            uid, rel, count_str, transcript = parts
            try:
                declared = int(count_str)
            except ValueError:
                raise ManifestMismatchError(
                    f"{manifest}:{lineno}: frame count {count_str!r} is not an integer") from None
            feat_path = directory / rel
            if not feat_path.exists():
                raise ManifestMismatchError(
                    f"{manifest}:{lineno}: utterance {uid}: missing file {rel}")
            feats = read_feat(feat_path)
            if feats.shape[0] != declared:
                raise ManifestMismatchError(
                    f"{manifest}:{lineno}: utterance {uid}: manifest says {declared} "
                    f"frames, file has {feats.shape[0]}")
            utts.append(Utterance(features=feats, transcript=transcript, id=uid))
    return utts
