"""Trained prosody predictor: network, embedding normalisation and schedule.

The network works in a normalised embedding space (per-dimension mean
removed, one global scale).  Ablated context slots are zeroed in that
space, so a dropped prosody slot reads as the average embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .context import ABLATIONS, chunk_tensors
from .denoiser import ChunkTensors, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, sample_prosody
from .errors import ConfigError, DataError
from .tensorio import load_tensors, save_tensors

NET_PREFIX = "net."


@dataclass(frozen=True)
class Normalizer:
    shift: np.ndarray  # (m*d,)
    scale: float

    @classmethod
    def fit(cls, rows) -> "Normalizer":
        x = np.asarray(rows, dtype=np.float64)
        x = x.reshape(len(x), -1)
        if len(x) < 2:
            raise DataError("need at least two embeddings to fit the normaliser")
        scale = float(np.sqrt(x.var(axis=0).mean()))
        if not scale > 0:
            raise DataError("embeddings have zero variance")
        # rounded to float32 so a reloaded checkpoint normalises identically
        return cls(x.mean(axis=0).astype(np.float32).astype(np.float64), scale)

    def forward(self, rows) -> np.ndarray:
        x = np.asarray(rows, dtype=np.float64)
        return (x.reshape(len(x), -1) - self.shift) / self.scale

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.shift


@dataclass
class Predictor:
    net: Denoiser
    norm: Normalizer
    ablation: str = "none"
    sched: Optional[NoiseSchedule] = None
    sigma: str = "std"
    d_s: int = 32

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.net.mode == "diffusion" and self.sched is None:
            raise ConfigError("a diffusion predictor needs its noise schedule")

    @property
    def mode(self) -> str:
        return self.net.mode

    def tensors(self, chunks, table: Mapping[str, np.ndarray], with_targets: bool = True) -> ChunkTensors:
        """Normalise the embedding table, then assemble (and ablate) contexts."""
        ids = list(table)
        z = self.norm.forward(np.stack([np.asarray(table[i]).reshape(-1) for i in ids]))
        normed = dict(zip(ids, z))
        return chunk_tensors(chunks, normed, self.ablation, self.d_s, with_targets)

    @torch.no_grad()
    def sample(self, chunk, table: Mapping[str, np.ndarray], count: int,
               generator: torch.Generator) -> np.ndarray:
        """``count`` embeddings ``(count, m, d)`` for one chunk, in the raw space."""
        cfg = self.net.cfg
        if count < 1:
            raise ConfigError("count must be >= 1")
        data = self.tensors([chunk], table, with_targets=False)
        s = data.s_current.expand(count, -1)
        ctx = data.context.expand(count)
        self.net.eval()
        if self.mode == "diffusion":
            z = sample_prosody(self.net.predict_noise, s, ctx, self.sched, generator,
                               cfg.latent_dim, sigma=self.sigma)
        else:
            z = self.net.predict_deterministic(s, ctx)
        return self.norm.inverse(z.double().numpy()).reshape(count, cfg.m, cfg.d)

    def save(self, path, *, config_hash: str, seed: int, meta: dict | None = None):
        tensors = {NET_PREFIX + k: v for k, v in self.net.state_dict().items()}
        tensors["norm.shift"] = self.norm.shift
        info = {
            "mode": self.mode,
            "ablation": self.ablation,
            "denoiser": asdict(self.net.cfg),
            "norm_scale": self.norm.scale,
            "sigma": self.sigma,
            "d_s": self.d_s,
            "schedule": self.sched.to_dict() if self.sched is not None else None,
            **(meta or {}),
        }
        return save_tensors(path, tensors, module=f"predictor-{self.mode}",
                            config_hash=config_hash, seed=seed, meta=info)

    @classmethod
    def load(cls, path, expect_hash: str | None = None, expect_seed: int | None = None) -> "Predictor":
        tensors, manifest = load_tensors(path, expect_hash=expect_hash, expect_seed=expect_seed)
        if not manifest["module"].startswith("predictor-"):
            raise DataError(f"{path}: not a predictor checkpoint ({manifest['module']})")
        meta = manifest["meta"]
        net = Denoiser(DenoiserConfig(**meta["denoiser"]), meta["mode"])
        state = {k[len(NET_PREFIX):]: torch.from_numpy(v) for k, v in tensors.items()
                 if k.startswith(NET_PREFIX)}
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise DataError(f"{path}: parameters do not fit the network ({exc})") from exc
        net.eval()
        norm = Normalizer(tensors["norm.shift"].astype(np.float64), float(meta["norm_scale"]))
        sched = NoiseSchedule.from_beta(meta["schedule"]["beta"]) if meta["schedule"] else None
        return cls(net, norm, meta["ablation"], sched, meta["sigma"], meta["d_s"])


def fit_normalizer(chunks: Sequence, table: Mapping[str, np.ndarray]) -> Normalizer:
    """Statistics of the training targets only."""
    rows = [np.asarray(table[ch.target_turn.utt_id]).reshape(-1) for ch in chunks]
    return Normalizer.fit(rows)
