"""Conversation chunking and assembly of the interleaved multimodal context."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.feature_extraction import FeatureHasher

from .corpus import Conversation, Utterance
from .denoiser import ChunkTensors, Context
from .errors import ConfigError, DataError

ABLATIONS = ("none", "drop_text", "drop_acoustic", "drop_all")
HASH_SEED = "diffprosody"


@dataclass(frozen=True)
class ConversationChunk:
    conv_id: str
    context_turns: tuple
    target_turn: Utterance

    @property
    def chunk_id(self) -> str:
        return self.target_turn.utt_id


def chunk_conversation(conv: Conversation, chunk_len: int = 5, stride: int = 1) -> list[ConversationChunk]:
    """Sliding windows of ``chunk_len`` consecutive turns; the last turn is the target."""
    if chunk_len < 2:
        raise ConfigError("chunk_len must be >= 2")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    turns = conv.turns
    return [
        ConversationChunk(conv.conv_id, tuple(turns[i:i + chunk_len - 1]), turns[i + chunk_len - 1])
        for i in range(0, len(turns) - chunk_len + 1, stride)
    ]


def _features(tokens: Sequence[str], seed: str) -> list[str]:
    feats = [f"{seed}|u|{tok}" for tok in tokens]
    feats += [f"{seed}|b|{a} {b}" for a, b in zip(tokens, tokens[1:])]
    return feats


def embed_text(tokens: Sequence[str], d_s: int = 32, seed: str = HASH_SEED) -> np.ndarray:
    """Signed feature hashing of unigrams and bigrams, L2-normalised.

    Empty text maps to the zero vector.
    """
    if d_s < 1:
        raise ConfigError("d_s must be >= 1")
    if len(tokens) == 0:
        return np.zeros(d_s)
    hasher = FeatureHasher(n_features=d_s, input_type="string", alternate_sign=True)
    vec = hasher.transform([_features(list(tokens), seed)]).toarray()[0].astype(np.float64)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


@dataclass(frozen=True)
class ContextSequence:
    """``c = [s_1, p_1, ..., s_N, p_N]`` stored as aligned text/prosody rows."""

    text: np.ndarray  # (N, d_s)
    prosody: np.ndarray  # (N, m*d)
    text_active: bool = True
    prosody_active: bool = True

    def slots(self) -> list[np.ndarray]:
        out = []
        for s, p in zip(self.text, self.prosody):
            out.extend([s, p])
        return out

    def parity(self) -> list[str]:
        return ["s", "p"] * len(self.text)

    def ablate(self, ablation: str) -> "ContextSequence":
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}")
        drop_text = ablation in ("drop_text", "drop_all")
        drop_prosody = ablation in ("drop_acoustic", "drop_all")
        return ContextSequence(
            np.zeros_like(self.text) if drop_text else self.text,
            np.zeros_like(self.prosody) if drop_prosody else self.prosody,
            self.text_active and not drop_text,
            self.prosody_active and not drop_prosody,
        )


def assemble_context(
    chunk: ConversationChunk,
    prosody_lookup: Mapping[str, np.ndarray],
    ablation: str = "none",
    d_s: int = 32,
) -> tuple[ContextSequence, np.ndarray]:
    """Build ``c`` for ``chunk`` and the (never ablated) current-sentence embedding."""
    text, prosody = [], []
    for utt in chunk.context_turns:
        if utt.utt_id not in prosody_lookup:
            raise DataError(f"no prosody embedding for context turn {utt.utt_id}")
        text.append(embed_text(utt.tokens, d_s))
        prosody.append(np.asarray(prosody_lookup[utt.utt_id], dtype=np.float64).reshape(-1))
    seq = ContextSequence(np.stack(text), np.stack(prosody)).ablate(ablation)
    return seq, embed_text(chunk.target_turn.tokens, d_s)


def chunk_tensors(
    chunks: Sequence[ConversationChunk],
    prosody_lookup: Mapping[str, np.ndarray],
    ablation: str = "none",
    d_s: int = 32,
    with_targets: bool = True,
) -> ChunkTensors:
    """Stack assembled contexts (and target embeddings) into float32 model inputs."""
    if not chunks:
        raise DataError("no chunks")
    s_cur, ctx_t, ctx_p, tgt = [], [], [], []
    for ch in chunks:
        seq, s = assemble_context(ch, prosody_lookup, ablation, d_s)
        s_cur.append(s)
        ctx_t.append(seq.text)
        ctx_p.append(seq.prosody)
        if with_targets:
            if ch.target_turn.utt_id not in prosody_lookup:
                raise DataError(f"no prosody embedding for target {ch.target_turn.utt_id}")
            tgt.append(np.asarray(prosody_lookup[ch.target_turn.utt_id]).reshape(-1))

    def f32(rows):
        return torch.as_tensor(np.stack(rows), dtype=torch.float32)

    target = f32(tgt) if with_targets else torch.zeros(len(chunks), ctx_p[0].shape[-1])
    return ChunkTensors(f32(s_cur), Context(f32(ctx_t), f32(ctx_p)), target)
