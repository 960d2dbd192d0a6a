"""Fixed-length prosody embeddings from variable-length frame contours.

A bank of ``m`` learnable queries attends over the projected frames of
one utterance; each query's attention row is a softmax over frames, so
the pooled output has shape ``(m, d)`` whatever the frame count.  Frames
carry no positional code by default, which makes pooling invariant to
frame order and to duplicating every frame.

The extractor is trained against a small attention decoder that
reconstructs the frames from the pooled tokens; the decoder is thrown
away once training is done.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, DivergenceError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorConfig:
    d_f: int = 3
    m: int = 4
    d: int = 16
    positional: bool = False
    decoder_dim: int = 32
    steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3

    def __post_init__(self):
        if min(self.d_f, self.m, self.d, self.decoder_dim) < 1:
            raise ConfigError("extractor sizes must be >= 1")


def frame_position_code(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal code of relative frame position ``i / n`` in ``[0, 1)``."""
    pos = torch.arange(n, dtype=torch.float64)[:, None] / n
    k = torch.arange(dim // 2, dtype=torch.float64)[None, :]
    ang = math.pi * pos * (2.0 ** k)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).to(dtype)


class ProsodyExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.m, cfg.d) / math.sqrt(cfg.d))
        self.key = nn.Linear(cfg.d_f, cfg.d)
        self.value = nn.Linear(cfg.d_f, cfg.d)
        if cfg.positional:
            self.pos = nn.Linear(cfg.d, cfg.d, bias=False)

    def attention(self, frames: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Attention weights ``(B, m, n)``; ``mask`` is True on valid frames."""
        k = self.key(frames)
        if self.cfg.positional:
            k = k + self.pos(frame_position_code(frames.shape[1], self.cfg.d, frames.dtype))
        scores = torch.einsum("md,bnd->bmn", self.queries, k) / math.sqrt(self.cfg.d)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, frames: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Pool ``(B, n, d_f)`` frames into ``(B, m, d)`` embeddings."""
        if frames.shape[1] == 0:
            raise DataError("empty frame sequence")
        return torch.einsum("bmn,bnd->bmd", self.attention(frames, mask), self.value(frames))


class FrameDecoder(nn.Module):
    """Reconstructs frames: position-coded queries attend over the pooled tokens."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        h = cfg.decoder_dim
        self.pos_in = nn.Linear(h, h)
        self.key = nn.Linear(cfg.d, h)
        self.value = nn.Linear(cfg.d, h)
        self.out = nn.Sequential(nn.Linear(2 * h, h), nn.GELU(), nn.Linear(h, cfg.d_f))
        self.global_in = nn.Linear(cfg.m * cfg.d, h)
        self.h = h

    def forward(self, pooled: torch.Tensor, n: int) -> torch.Tensor:
        B = pooled.shape[0]
        q = self.pos_in(frame_position_code(n, self.h, pooled.dtype))
        scores = torch.einsum("nh,bmh->bnm", q, self.key(pooled)) / math.sqrt(self.h)
        ctx = torch.einsum("bnm,bmh->bnh", torch.softmax(scores, -1), self.value(pooled))
        glob = self.global_in(pooled.reshape(B, -1))[:, None, :].expand(-1, n, -1)
        return self.out(torch.cat([ctx, glob], dim=-1))


def pad_frames(frame_list: Sequence[np.ndarray], dtype=torch.float32):
    """Stack ragged ``(n_i, d_f)`` arrays into a padded batch and validity mask."""
    if any(len(f) == 0 for f in frame_list):
        raise DataError("empty frame sequence")
    n_max = max(len(f) for f in frame_list)
    d_f = np.asarray(frame_list[0]).shape[1]
    out = torch.zeros(len(frame_list), n_max, d_f, dtype=dtype)
    mask = torch.zeros(len(frame_list), n_max, dtype=torch.bool)
    for i, f in enumerate(frame_list):
        out[i, : len(f)] = torch.as_tensor(np.asarray(f), dtype=dtype)
        mask[i, : len(f)] = True
    return out, mask


def pool_prosody(extractor: ProsodyExtractor, frames) -> torch.Tensor:
    """Embed one utterance (``(n, d_f)``) or a ragged list of utterances.

    Returns ``(m, d)`` for a single array, ``(B, m, d)`` for a list.
    """
    single = not isinstance(frames, (list, tuple))
    batch = [frames] if single else list(frames)
    if not batch:
        return torch.zeros(0, extractor.cfg.m, extractor.cfg.d)
    padded, mask = pad_frames(batch, dtype=next(extractor.parameters()).dtype)
    with torch.no_grad():
        out = extractor(padded, mask)
    return out[0] if single else out


def _recon_loss(extractor, decoder, frames, mask) -> torch.Tensor:
    pooled = extractor(frames, mask)
    recon = decoder(pooled, frames.shape[1])
    err = ((recon - frames) ** 2).sum(-1)
    return (err * mask).sum() / (mask.sum() * frames.shape[-1])


def train_extractor(
    frame_list: Sequence[np.ndarray],
    cfg: ExtractorConfig,
    generator: torch.Generator,
    extractor: ProsodyExtractor | None = None,
) -> tuple[ProsodyExtractor, FrameDecoder, list[float]]:
    """Fit extractor and decoder on reconstruction error; returns the frozen extractor."""
    if len(frame_list) == 0:
        raise DataError("no utterances to train the extractor on")
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
        extractor = extractor or ProsodyExtractor(cfg)
        decoder = FrameDecoder(cfg)
    trace: list[float] = []
    if cfg.steps > 0:
        params = list(extractor.parameters()) + list(decoder.parameters())
        optim = torch.optim.Adam(params, lr=cfg.lr)
        n = len(frame_list)
        bs = min(cfg.batch_size, n)
        for step in range(cfg.steps):
            idx = torch.randint(0, n, (bs,), generator=generator).tolist()
            frames, mask = pad_frames([frame_list[i] for i in idx])
            loss = _recon_loss(extractor, decoder, frames, mask)
            if not torch.isfinite(loss):
                raise DivergenceError(f"extractor step {step}: non-finite loss")
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            trace.append(loss.item())
            if step % 500 == 0:
                logger.info("extractor step %d recon %.4f", step, trace[-1])
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor, decoder, trace
