"""Transformer noise predictor conditioned on the current sentence and context.

Token layout inside each block::

    [ s_current | latent_1 .. latent_m ]  --self-attn-->  itself
                                           --cross-attn--> [ s_1, p_1, ..., s_N, p_N ]

In ``"diffusion"`` mode the latent tokens are projections of the noised
latent plus a timestep code.  In ``"baseline"`` mode a learned constant
replaces them and no timestep is used, so the trunk is shared but the
network regresses the prosody embedding directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, diffusion_loss
from .errors import ConfigError, DivergenceError

logger = logging.getLogger(__name__)

MODES = ("diffusion", "baseline")


@dataclass(frozen=True)
class DenoiserConfig:
    n_blocks: int = 2
    model_dim: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    m: int = 4
    d: int = 16
    d_s: int = 32
    n_context: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError("model_dim must be divisible by n_heads")
        if self.model_dim % 2:
            raise ConfigError("model_dim must be even for the timestep code")
        if min(self.m, self.d, self.d_s, self.n_context, self.n_blocks) < 1:
            raise ConfigError("m, d, d_s, n_context and n_blocks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def latent_dim(self) -> int:
        return self.m * self.d


class Context(NamedTuple):
    """Batched context slots; ``text[:, i]`` is s_i and ``prosody[:, i]`` is p_i."""

    text: torch.Tensor  # (B, N, d_s)
    prosody: torch.Tensor  # (B, N, m*d)

    def index(self, idx) -> "Context":
        return Context(self.text[idx], self.prosody[idx])

    def expand(self, count: int) -> "Context":
        return Context(
            self.text.expand(count, *self.text.shape[1:]),
            self.prosody.expand(count, *self.prosody.shape[1:]),
        )


def timestep_embed(t, dim: int) -> torch.Tensor:
    """Sinusoidal step code, interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]``.

    Frequencies are ``f_k = 10000 ** (-2k / dim)``.
    """
    if dim % 2:
        raise ValueError(f"timestep code dimension must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if torch.any(t < 0):
        raise ValueError("timestep must be non-negative")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * 2.0 * k / dim)
    angles = t[:, None] * freqs[None, :]
    code = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return code.reshape(t.shape[0], dim)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        D = cfg.model_dim
        self.norm_self = nn.LayerNorm(D)
        self.self_attn = nn.MultiheadAttention(D, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.norm_cross = nn.LayerNorm(D)
        self.cross_attn = nn.MultiheadAttention(D, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.norm_ff = nn.LayerNorm(D)
        self.ff = nn.Sequential(
            nn.Linear(D, cfg.ff_dim), nn.GELU(), nn.Linear(cfg.ff_dim, D), nn.Dropout(cfg.dropout)
        )

    def forward(self, h: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        x = self.norm_self(h)
        h = h + self.self_attn(x, x, x, need_weights=False)[0]
        x = self.norm_cross(h)
        h = h + self.cross_attn(x, ctx, ctx, need_weights=False)[0]
        return h + self.ff(self.norm_ff(h))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, mode: str = "diffusion"):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.cfg = cfg
        self.mode = mode
        D, m = cfg.model_dim, cfg.m

        self.text_in = nn.Linear(cfg.d_s, D)
        if mode == "diffusion":
            self.latent_in = nn.Linear(cfg.d, D)
            self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        else:
            self.latent_const = nn.Parameter(0.02 * torch.randn(m, D))
        # identity of each latent token (no other positional code)
        self.latent_id = nn.Parameter(0.02 * torch.randn(m, D))

        self.ctx_text_in = nn.Linear(cfg.d_s, D)
        self.ctx_prosody_in = nn.Linear(cfg.latent_dim, D)
        self.ctx_pos = nn.Parameter(0.02 * torch.randn(2 * cfg.n_context, D))
        self.ctx_type = nn.Parameter(0.02 * torch.randn(2, D))
        self.ctx_norm = nn.LayerNorm(D)

        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.out_norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, cfg.d)

    def _context_tokens(self, context: Optional[Context], B: int, ref: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        N = cfg.n_context
        if context is None:
            text = ref.new_zeros(B, N, cfg.d_s)
            prosody = ref.new_zeros(B, N, cfg.latent_dim)
        else:
            text, prosody = context
            if text.shape != (B, N, cfg.d_s) or prosody.shape != (B, N, cfg.latent_dim):
                raise ValueError(
                    f"context shapes {tuple(text.shape)}, {tuple(prosody.shape)} "
                    f"do not match batch {B} and config"
                )
        s_tok = self.ctx_text_in(text) + self.ctx_type[0]
        p_tok = self.ctx_prosody_in(prosody) + self.ctx_type[1]
        # interleave to [s_1, p_1, ..., s_N, p_N]
        tokens = torch.stack([s_tok, p_tok], dim=2).reshape(B, 2 * N, -1)
        return self.ctx_norm(tokens + self.ctx_pos)

    def _trunk(self, latent_tokens: torch.Tensor, s_current: torch.Tensor, context) -> torch.Tensor:
        B = s_current.shape[0]
        s_tok = self.text_in(s_current)[:, None, :]
        h = torch.cat([s_tok, latent_tokens], dim=1)
        ctx = self._context_tokens(context, B, s_current)
        for i, block in enumerate(self.blocks):
            h = block(h, ctx)
            if not torch.all(torch.isfinite(h)):
                raise DivergenceError(f"non-finite activations after block {i}")
        h = self.out_norm(h[:, 1:])
        return self.head(h).reshape(B, self.cfg.latent_dim)

    def predict_noise(self, z_t: torch.Tensor, s_current: torch.Tensor, t, context=None) -> torch.Tensor:
        if self.mode != "diffusion":
            raise RuntimeError("predict_noise needs a diffusion-mode network")
        cfg = self.cfg
        B = z_t.shape[0]
        if z_t.shape != (B, cfg.latent_dim) or s_current.shape != (B, cfg.d_s):
            raise ValueError(f"bad input shapes {tuple(z_t.shape)}, {tuple(s_current.shape)}")
        steps = torch.as_tensor(t).reshape(-1).expand(B)
        temb = self.time_mlp(timestep_embed(steps, cfg.model_dim).to(z_t.dtype))
        tokens = self.latent_in(z_t.reshape(B, cfg.m, cfg.d)) + self.latent_id + temb[:, None, :]
        return self._trunk(tokens, s_current, context)

    def predict_deterministic(self, s_current: torch.Tensor, context=None) -> torch.Tensor:
        if self.mode != "baseline":
            raise RuntimeError("predict_deterministic needs a baseline-mode network")
        B = s_current.shape[0]
        tokens = (self.latent_const + self.latent_id).expand(B, -1, -1)
        return self._trunk(tokens, s_current, context)

    def forward(self, z_t, s_current, t, context=None):
        return self.predict_noise(z_t, s_current, t, context)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 1e-3
    grad_clip: float = 1.0
    ema_decay: float = 0.0  # 0 disables weight averaging
    cosine_decay: bool = False  # anneal the learning rate to zero over the run


class ChunkTensors(NamedTuple):
    """Model-facing training set: one row per conversation chunk."""

    s_current: torch.Tensor  # (n, d_s)
    context: Context
    target: torch.Tensor  # (n, m*d)

    def __len__(self) -> int:
        return self.s_current.shape[0]

    def index(self, idx) -> "ChunkTensors":
        return ChunkTensors(self.s_current[idx], self.context.index(idx), self.target[idx])


def batch_loss(model: Denoiser, batch: ChunkTensors, sched: Optional[NoiseSchedule], generator) -> torch.Tensor:
    if model.mode == "diffusion":
        return diffusion_loss(
            batch.target, (batch.s_current, batch.context), model.predict_noise, sched, generator
        )
    pred = model.predict_deterministic(batch.s_current, batch.context)
    loss = torch.mean((pred - batch.target) ** 2)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite regression loss {loss.item()}")
    return loss


def train(
    model: Denoiser,
    data: ChunkTensors,
    opt: TrainConfig,
    generator: torch.Generator,
    sched: Optional[NoiseSchedule] = None,
) -> list[float]:
    """Adam on minibatches drawn without replacement per epoch; returns the loss trace."""
    if model.mode == "diffusion" and sched is None:
        raise ConfigError("diffusion training needs a noise schedule")
    if len(data) == 0:
        raise ConfigError("empty training set")
    trace: list[float] = []
    if opt.steps <= 0:
        return trace
    optim = torch.optim.Adam(model.parameters(), lr=opt.lr)
    anneal = torch.optim.lr_scheduler.CosineAnnealingLR(optim, opt.steps) if opt.cosine_decay else None
    ema = [p.detach().clone() for p in model.parameters()] if opt.ema_decay > 0 else None
    model.train()
    n = len(data)
    bs = min(opt.batch_size, n)
    order = torch.randperm(n, generator=generator)
    cursor = 0
    for step in range(opt.steps):
        if cursor + bs > n:
            order = torch.randperm(n, generator=generator)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        try:
            loss = batch_loss(model, data.index(idx), sched, generator)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        optim.zero_grad(set_to_none=True)
        loss.backward()
        if opt.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optim.step()
        if anneal is not None:
            anneal.step()
        if ema is not None:
            with torch.no_grad():
                for shadow, p in zip(ema, model.parameters()):
                    shadow.lerp_(p, 1.0 - opt.ema_decay)
        trace.append(loss.item())
        if step % 1000 == 0:
            logger.info("%s step %d loss %.4f", model.mode, step, trace[-1])
    if ema is not None:
        with torch.no_grad():
            for shadow, p in zip(ema, model.parameters()):
                p.copy_(shadow)
    model.eval()
    return trace


def smoothed(trace, window: int = 20) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) < window:
        return trace.copy()
    kernel = np.ones(window) / window
    return np.convolve(trace, kernel, mode="valid")
