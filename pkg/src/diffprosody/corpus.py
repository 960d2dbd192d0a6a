"""Synthetic conversations with a known conditional prosody distribution.

Each turn carries hidden labels:

* ``state``  - dialogue state, a sticky Markov chain over ``n_states``;
  revealed by topic words in the turn's own text.
* ``mode``   - prosodic tone.  With probability ``acoustic_informativeness``
  a turn keeps the previous turn's mode, otherwise it draws from its
  state's ``mode_weights``.  Only the previous turn's *prosody* reveals it.
* ``cue``    - a uniformly drawn cue word placed in the turn's text.
* ``focus``  - binary emphasis.  With probability ``text_informativeness``
  it equals the previous turn's cue, otherwise it is a fair coin.

Tone and state set the levels of a piecewise-linear three-channel
contour (pitch, energy, duration); focus adds a terminal rise.  Because
tone is only visible through acoustic context and focus only through
textual context, zeroing either modality removes a known, separate
amount of information about the next turn.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

N_KNOTS = 3
N_CHANNELS = 3
N_FOCUS = 2
N_TOPIC_WORDS = 1
N_CUE_WORDS = 1
N_FILLER_WORDS = 20
CONTENT_REPEATS = 3  # keeps state and cue linearly decodable through the 32-bucket text hash


@dataclass(frozen=True)
class CorpusConfig:
    n_conversations: int = 500
    turns_per_conversation: int = 8
    n_states: int = 3
    n_modes: int = 2
    mode_weights: Optional[tuple] = None  # (n_states, n_modes); uniform when None
    mode_means: Optional[tuple] = None  # (n_states, n_modes, 9); built-in templates when None
    text_informativeness: float = 0.5
    acoustic_informativeness: float = 0.9
    state_persistence: float = 0.7
    frames_min: int = 20
    frames_max: int = 60
    noise_scale: float = 0.15
    frame_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_conversations < 0 or self.turns_per_conversation < 1:
            raise ConfigError("need n_conversations >= 0 and turns_per_conversation >= 1")
        if self.n_states < 1 or self.n_modes < 1:
            raise ConfigError("need at least one state and one mode")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ConfigError("frame-count range is empty")
        for name in ("text_informativeness", "acoustic_informativeness", "state_persistence"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.noise_scale < 0 or self.frame_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        w = self.weights()
        if w.shape != (self.n_states, self.n_modes) or np.any(w < 0) or not np.allclose(w.sum(1), 1.0):
            raise ConfigError("mode_weights must be one simplex per state")
        if self.templates().shape != (self.n_states, self.n_modes, N_CHANNELS * N_KNOTS):
            raise ConfigError("mode_means must have shape (n_states, n_modes, 9)")

    def weights(self) -> np.ndarray:
        if self.mode_weights is None:
            return np.full((self.n_states, self.n_modes), 1.0 / self.n_modes)
        return np.asarray(self.mode_weights, dtype=np.float64)

    def templates(self) -> np.ndarray:
        if self.mode_means is not None:
            return np.asarray(self.mode_means, dtype=np.float64)
        return default_templates(self.n_states, self.n_modes)


def default_templates(n_states: int, n_modes: int) -> np.ndarray:
    """Knot values ``(state, mode, channel*3 + knot)`` for the contours."""
    state_level = np.linspace(-0.8, 0.8, n_states) if n_states > 1 else np.zeros(1)
    tone = np.linspace(-0.6, 0.6, n_modes) if n_modes > 1 else np.zeros(1)
    out = np.zeros((n_states, n_modes, N_CHANNELS, N_KNOTS))
    shape = np.array([0.0, 0.3, -0.2])
    for s in range(n_states):
        for j in range(n_modes):
            out[s, j, 0] = state_level[s] + 2.0 * tone[j] + shape  # pitch
            out[s, j, 1] = 1.6 * tone[j] - 0.4 * state_level[s] + 0.5 * shape  # energy
            out[s, j, 2] = 0.75 * state_level[s] - 0.5 * tone[j]  # duration
    return out.reshape(n_states, n_modes, N_CHANNELS * N_KNOTS)


# focus raises the end of the pitch contour and the middle of the energy contour
FOCUS_OFFSET = np.array([0.0, 0.2, 1.1, 0.0, 0.7, 0.2, 0.0, 0.0, 0.3])


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    tokens: list
    frames: np.ndarray
    oracle: Optional[dict] = None

    def to_json(self, strip_oracle: bool = False) -> dict:
        out = {
            "utt_id": self.utt_id,
            "speaker": self.speaker,
            "tokens": list(self.tokens),
            "frames": [[float(v) for v in row] for row in self.frames],
        }
        if self.oracle is not None and not strip_oracle:
            out["oracle"] = dict(self.oracle)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        frames = np.asarray(obj["frames"], dtype=np.float64)
        if frames.ndim != 2 or len(frames) == 0 or not np.all(np.isfinite(frames)):
            raise DataError(f"utterance {obj.get('utt_id')}: bad frames")
        if not obj["tokens"]:
            raise DataError(f"utterance {obj.get('utt_id')}: empty text")
        return cls(obj["utt_id"], obj["speaker"], list(obj["tokens"]), frames, obj.get("oracle"))


@dataclass
class Conversation:
    conv_id: str
    turns: list = field(default_factory=list)

    def to_json(self, strip_oracle: bool = False) -> dict:
        return {"conv_id": self.conv_id, "turns": [u.to_json(strip_oracle) for u in self.turns]}

    @classmethod
    def from_json(cls, obj: dict) -> "Conversation":
        return cls(obj["conv_id"], [Utterance.from_json(t) for t in obj["turns"]])


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def render_frames(
    state: int, mode: int, focus: int, cfg: CorpusConfig, rng: np.random.Generator
) -> np.ndarray:
    """One utterance's ``(n, 3)`` contour for the given hidden labels."""
    n = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    knots = cfg.templates()[state, mode] + focus * FOCUS_OFFSET
    knots = knots + cfg.noise_scale * rng.standard_normal(knots.shape)
    knots = knots.reshape(N_CHANNELS, N_KNOTS)
    x = np.linspace(0.0, 1.0, n)
    grid = np.linspace(0.0, 1.0, N_KNOTS)
    frames = np.stack([np.interp(x, grid, knots[c]) for c in range(N_CHANNELS)], axis=1)
    frames = frames + cfg.frame_noise * rng.standard_normal(frames.shape)
    return np.round(frames, 4)


def render_tokens(state: int, cue: int, rng: np.random.Generator) -> list:
    n_filler = int(rng.integers(2, 5))
    words = [f"topic{state}_{int(i)}" for i in rng.integers(0, N_TOPIC_WORDS, size=CONTENT_REPEATS)]
    words += [f"cue{cue}_{int(i)}" for i in rng.integers(0, N_CUE_WORDS, size=CONTENT_REPEATS)]
    words += [f"w{int(i)}" for i in rng.integers(0, N_FILLER_WORDS, size=n_filler)]
    return [words[i] for i in rng.permutation(len(words))]


def next_labels(prev: Optional[dict], cfg: CorpusConfig, rng: np.random.Generator) -> dict:
    """Sample one turn's hidden labels given the previous turn's (or None)."""
    weights = cfg.weights()
    if prev is None:
        state = int(rng.integers(cfg.n_states))
        mode = int(rng.choice(cfg.n_modes, p=weights[state]))
        focus = int(rng.integers(N_FOCUS))
    else:
        if rng.random() < cfg.state_persistence:
            state = prev["state"]
        else:
            state = int(rng.integers(cfg.n_states))
        mode = transition_mode(prev["mode"], state, cfg, rng)
        focus = transition_focus(prev["cue"], cfg, rng)
    cue = int(rng.integers(N_FOCUS))
    return {"state": state, "mode": mode, "focus": focus, "cue": cue}


def transition_mode(prev_mode: int, state: int, cfg: CorpusConfig, rng: np.random.Generator) -> int:
    if rng.random() < cfg.acoustic_informativeness:
        return int(prev_mode)
    return int(rng.choice(cfg.n_modes, p=cfg.weights()[state]))


def transition_focus(prev_cue: int, cfg: CorpusConfig, rng: np.random.Generator) -> int:
    if rng.random() < cfg.text_informativeness:
        return int(prev_cue)
    return int(rng.integers(N_FOCUS))


def generate_conversation(index: int, cfg: CorpusConfig) -> Conversation:
    rng = derive_rng(cfg.seed, f"conversation:{index}")
    conv = Conversation(f"c{index:05d}")
    prev = None
    for k in range(cfg.turns_per_conversation):
        labels = next_labels(prev, cfg, rng)
        conv.turns.append(
            Utterance(
                utt_id=f"{conv.conv_id}_t{k:02d}",
                speaker="AB"[k % 2],
                tokens=render_tokens(labels["state"], labels["cue"], rng),
                frames=render_frames(labels["state"], labels["mode"], labels["focus"], cfg, rng),
                oracle=labels,
            )
        )
        prev = labels
    return conv


def generate_corpus(cfg: CorpusConfig) -> list[Conversation]:
    return [generate_conversation(i, cfg) for i in range(cfg.n_conversations)]


def write_jsonl(convs: Iterable[Conversation], path, strip_oracle: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for conv in convs:
            fh.write(json.dumps(conv.to_json(strip_oracle), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[Conversation]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    convs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                convs.append(Conversation.from_json(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed conversation ({exc})") from exc
    return convs


# --- oracle -----------------------------------------------------------------


@dataclass(frozen=True)
class OracleMixture:
    """Conditional distribution of the target turn's hidden prosody labels."""

    state: int
    components: tuple  # ((mode, focus), ...)
    weights: np.ndarray

    def mode_marginal(self, n_modes: int) -> np.ndarray:
        out = np.zeros(n_modes)
        for (mode, _), w in zip(self.components, self.weights):
            out[mode] += w
        return out

    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())


def _labels(utt: Utterance) -> dict:
    if utt.oracle is None:
        raise DataError(f"utterance {utt.utt_id} has no hidden labels")
    return utt.oracle


def mode_posterior(prev_mode: Optional[int], state: int, cfg: CorpusConfig) -> np.ndarray:
    w = cfg.weights()[state]
    if prev_mode is None:
        return w.copy()
    rho = cfg.acoustic_informativeness
    return rho * np.eye(cfg.n_modes)[prev_mode] + (1.0 - rho) * w


def focus_posterior(prev_cue: Optional[int], cfg: CorpusConfig) -> np.ndarray:
    uniform = np.full(N_FOCUS, 1.0 / N_FOCUS)
    if prev_cue is None:
        return uniform
    rho = cfg.text_informativeness
    return rho * np.eye(N_FOCUS)[prev_cue] + (1.0 - rho) * uniform


def posterior_from_labels(prev: Optional[dict], state: int, cfg: CorpusConfig) -> OracleMixture:
    pm = mode_posterior(None if prev is None else prev["mode"], state, cfg)
    pf = focus_posterior(None if prev is None else prev["cue"], cfg)
    comps = tuple((j, f) for j in range(cfg.n_modes) for f in range(N_FOCUS))
    weights = np.array([pm[j] * pf[f] for j, f in comps])
    return OracleMixture(state, comps, weights)


def oracle_posterior(chunk, cfg: CorpusConfig) -> OracleMixture:
    """Exact mixture over the target's (mode, focus) given the chunk's context.

    Given the last context turn's mode and cue and the target's state
    (which its own text reveals), the target labels are independent of
    everything earlier.
    """
    prev = _labels(chunk.context_turns[-1]) if chunk.context_turns else None
    state = _labels(chunk.target_turn)["state"]
    return posterior_from_labels(prev, state, cfg)


def oracle_target_frames(chunk, cfg: CorpusConfig, count: int, rng: np.random.Generator) -> list:
    """Fresh target contours drawn from the true conditional of ``chunk``."""
    mix = oracle_posterior(chunk, cfg)
    picks = rng.choice(len(mix.components), size=count, p=mix.weights)
    out = []
    for c in picks:
        mode, focus = mix.components[int(c)]
        out.append(render_frames(mix.state, mode, focus, cfg, rng))
    return out


def oracle_target_samples(chunk, cfg: CorpusConfig, count: int, extractor, rng: np.random.Generator) -> np.ndarray:
    """Ground-truth embedding population ``(count, m*d)`` for one chunk."""
    from .extractor import pool_prosody

    m, d = extractor.cfg.m, extractor.cfg.d
    if count == 0:
        return np.zeros((0, m * d))
    frames = oracle_target_frames(chunk, cfg, count, rng)
    emb = pool_prosody(extractor, frames).reshape(count, m * d)
    return emb.double().numpy()


def regenerate_continuations(chunk, cfg: CorpusConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """Brute-force check of :func:`oracle_posterior`.

    Re-runs the generator's own turn transition from the chunk's last
    context turn ``count`` times, keeping runs whose sampled state matches
    the target's observed state; returns empirical (mode, focus) frequencies.
    """
    prev = _labels(chunk.context_turns[-1])
    state = _labels(chunk.target_turn)["state"]
    counts = np.zeros((cfg.n_modes, N_FOCUS))
    kept = 0
    while kept < count:
        labels = next_labels(prev, cfg, rng)
        if labels["state"] != state:
            continue
        counts[labels["mode"], labels["focus"]] += 1
        kept += 1
    return (counts / count).reshape(-1)


def _jsd(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def ablation_jsd_floor(cfg: CorpusConfig, ablation: str, state: int = 0) -> float:
    """Smallest expected component-level JSD a predictor blind to the ablated slots can reach.

    Averages over the last context turn's mode (drawn from the target
    state's mode weights) and cue; the blind predictor outputs the
    marginal over whatever it cannot see.
    """
    w = cfg.weights()[state]
    cue_prior = np.full(N_FOCUS, 1.0 / N_FOCUS)
    hide_mode = ablation in ("drop_acoustic", "drop_all")
    hide_cue = ablation in ("drop_text", "drop_all")
    if ablation not in ("none", "drop_text", "drop_acoustic", "drop_all"):
        raise ConfigError(f"unknown ablation {ablation!r}")

    def post(mode, cue):
        return np.outer(mode_posterior(mode, state, cfg), focus_posterior(cue, cfg)).reshape(-1)

    configs = [(i, u, w[i] * cue_prior[u]) for i in range(cfg.n_modes) for u in range(N_FOCUS)]
    total = 0.0
    for i, u, p in configs:
        blind = np.zeros(cfg.n_modes * N_FOCUS)
        norm = 0.0
        for i2, u2, p2 in configs:
            if (hide_mode or i2 == i) and (hide_cue or u2 == u):
                blind += p2 * post(i2, u2)
                norm += p2
        total += p * _jsd(post(i, u), blind / norm)
    return total


def corpus_hash(convs: Sequence[Conversation]) -> str:
    h = hashlib.sha256()
    for conv in convs:
        h.update(json.dumps(conv.to_json(), separators=(",", ":")).encode())
    return h.hexdigest()


def config_dict(cfg: CorpusConfig) -> dict:
    return asdict(cfg)
