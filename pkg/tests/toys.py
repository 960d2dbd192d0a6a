"""Small synthetic datasets shared by the denoiser and acceptance tests."""

import torch

from diffprosody.denoiser import ChunkTensors, Context, DenoiserConfig

TINY = DenoiserConfig(n_blocks=1, model_dim=8, n_heads=2, ff_dim=16, m=2, d=3, d_s=4, n_context=2)
SMALL = DenoiserConfig(n_blocks=2, model_dim=32, n_heads=4, ff_dim=64, m=2, d=2, d_s=4, n_context=2)


def random_inputs(cfg: DenoiserConfig, batch: int, seed: int = 0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, cfg.latent_dim, generator=g, dtype=dtype)
    s = torch.randn(batch, cfg.d_s, generator=g, dtype=dtype)
    ctx = Context(
        torch.randn(batch, cfg.n_context, cfg.d_s, generator=g, dtype=dtype),
        torch.randn(batch, cfg.n_context, cfg.latent_dim, generator=g, dtype=dtype),
    )
    t = torch.randint(1, 50, (batch,), generator=g)
    return z, s, ctx, t


def constant_condition(cfg: DenoiserConfig, n: int, seed: int = 0):
    """One fixed (s_current, context) repeated ``n`` times."""
    _, s, ctx, _ = random_inputs(cfg, 1, seed)
    return s.expand(n, -1).clone(), Context(ctx.text.expand(n, -1, -1).clone(),
                                            ctx.prosody.expand(n, -1, -1).clone())


def point_dataset(cfg: DenoiserConfig, point: torch.Tensor, n: int = 256) -> ChunkTensors:
    s, ctx = constant_condition(cfg, n)
    return ChunkTensors(s, ctx, point.reshape(1, -1).expand(n, -1).clone())


def two_mode_dataset(cfg: DenoiserConfig, v: torch.Tensor, n: int = 512, seed: int = 0) -> ChunkTensors:
    """Targets +v or -v with equal weight under one shared context."""
    g = torch.Generator().manual_seed(seed)
    sign = torch.where(torch.rand(n, generator=g) < 0.5, -1.0, 1.0)
    s, ctx = constant_condition(cfg, n)
    return ChunkTensors(s, ctx, sign[:, None] * v.reshape(1, -1))
