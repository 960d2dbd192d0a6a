"""Staged experiment: corpus, extractor, predictors, sampling, evaluation.

Every stage reads its inputs from the run directory, checks that they were
produced under the same configuration hash and seed, and writes its own
artifacts back.  Randomness for each stage comes from a seed derived from
the global seed and a purpose string, so a stage rerun in isolation gives
the same bytes as one run in sequence.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import RunConfig, derive_seed
from .context import ABLATIONS, chunk_conversation
from .corpus import (
    CorpusConfig,
    ablation_jsd_floor,
    corpus_hash,
    generate_corpus,
    oracle_target_samples,
    read_jsonl,
    write_jsonl,
)
from .denoiser import MODES, Denoiser, train
from .diffusion import linear_beta_schedule
from .errors import ConfigError, DataError
from .extractor import ExtractorConfig, ProsodyExtractor, pool_prosody, train_extractor
from .metrics import compare, fit_bins
from .predictor import Predictor, fit_normalizer
from .tensorio import load_tensors, save_tensors

logger = logging.getLogger(__name__)


class Layout:
    """File names inside one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    corpus = property(lambda self: self.root / "corpus.jsonl")
    model_corpus = property(lambda self: self.root / "corpus.model.jsonl")
    corpus_meta = property(lambda self: self.root / "corpus.meta.json")
    extractor = property(lambda self: self.root / "extractor")
    prosody = property(lambda self: self.root / "prosody")
    ground_truth = property(lambda self: self.root / "samples" / "ground_truth")
    ablation_dir = property(lambda self: self.root / "ablation")

    @staticmethod
    def tag(mode: str, ablation: str) -> str:
        return f"{mode}-{ablation}"

    def model(self, mode, ablation):
        return self.root / "models" / self.tag(mode, ablation)

    def samples(self, mode, ablation):
        return self.root / "samples" / self.tag(mode, ablation)

    def eval_dir(self, tag):
        return self.root / "eval" / tag


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _check_mode(mode: str, ablation: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"unknown model {mode!r}; choose from {MODES}")
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")


def corpus_config(cfg: RunConfig) -> CorpusConfig:
    return dataclasses.replace(cfg.corpus, seed=cfg.seed)


# --- corpus -----------------------------------------------------------------


def gen_data(cfg: RunConfig, out) -> list:
    lay = Layout(out)
    lay.root.mkdir(parents=True, exist_ok=True)
    convs = generate_corpus(corpus_config(cfg))
    write_jsonl(convs, lay.corpus)
    write_jsonl(convs, lay.model_corpus, strip_oracle=True)
    _write_json(lay.corpus_meta, {
        **_stamp(cfg),
        "corpus_sha256": corpus_hash(convs),
        "n_conversations": len(convs),
        "n_utterances": sum(len(c.turns) for c in convs),
    })
    logger.info("wrote %d conversations to %s", len(convs), lay.corpus)
    return convs


def _check_corpus(cfg: RunConfig, lay: Layout) -> None:
    if not lay.corpus_meta.exists():
        raise DataError(f"no corpus in {lay.root}; run gen-data first")
    meta = json.loads(lay.corpus_meta.read_text())
    if meta["config_hash"] != cfg.hash() or meta["seed"] != cfg.seed:
        raise DataError(f"corpus in {lay.root} was generated under a different config or seed")


def load_corpus(cfg: RunConfig, out, with_oracle: bool = False) -> list:
    lay = Layout(out)
    _check_corpus(cfg, lay)
    return read_jsonl(lay.corpus if with_oracle else lay.model_corpus)


def split(cfg: RunConfig, convs: list) -> tuple[list, list]:
    """Conversation-level split; the last ``test_fraction`` of conversations is held out."""
    n_test = max(1, int(round(cfg.data.test_fraction * len(convs))))
    if n_test >= len(convs):
        raise DataError(f"{len(convs)} conversations are too few for a train/test split")
    return convs[:-n_test], convs[-n_test:]


def chunks_of(cfg: RunConfig, convs: list) -> list:
    return [ch for c in convs for ch in chunk_conversation(c, cfg.data.chunk_len, cfg.data.stride)]


def probe_chunks(cfg: RunConfig, convs: list) -> list:
    """Held-out chunks whose continuation distributions are evaluated."""
    test = chunks_of(cfg, split(cfg, convs)[1])
    if not test:
        raise DataError("held-out conversations are shorter than one chunk")
    n = min(cfg.eval.n_probes, len(test))
    rng = np.random.default_rng(derive_seed(cfg.seed, "probes"))
    picks = sorted(rng.choice(len(test), size=n, replace=False).tolist())
    return [test[i] for i in picks]


# --- extractor --------------------------------------------------------------


def run_train_extractor(cfg: RunConfig, out) -> ProsodyExtractor:
    lay = Layout(out)
    convs = load_corpus(cfg, out)
    train_convs, _ = split(cfg, convs)
    frames = [u.frames for c in train_convs for u in c.turns]
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "extractor"))
    extractor, _, trace = train_extractor(frames, cfg.extractor, gen)
    save_tensors(lay.extractor, extractor.state_dict(), module="extractor",
                 meta={"extractor": asdict(cfg.extractor)}, **_stamp(cfg))
    _write_trace(lay.root / "extractor_loss.csv", trace)
    if trace:
        plotting.loss_curve(trace, lay.root / "extractor_loss.png", "extractor reconstruction")
    return extractor


def load_extractor(cfg: RunConfig, out) -> ProsodyExtractor:
    tensors, manifest = load_tensors(Layout(out).extractor, "extractor", cfg.hash(), cfg.seed)
    extractor = ProsodyExtractor(ExtractorConfig(**manifest["meta"]["extractor"]))
    extractor.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor


def extract_prosody(cfg: RunConfig, out) -> dict:
    lay = Layout(out)
    extractor = load_extractor(cfg, out)
    utts = [u for c in load_corpus(cfg, out) for u in c.turns]
    table = {}
    batch = 256
    for i in range(0, len(utts), batch):
        part = utts[i:i + batch]
        emb = pool_prosody(extractor, [u.frames for u in part]).numpy()
        table.update({u.utt_id: e for u, e in zip(part, emb)})
    save_tensors(lay.prosody, table, module="prosody-table",
                 meta={"m": cfg.extractor.m, "d": cfg.extractor.d}, **_stamp(cfg))
    return table


def load_table(cfg: RunConfig, out) -> dict:
    table, _ = load_tensors(Layout(out).prosody, "prosody-table", cfg.hash(), cfg.seed)
    return table


# --- predictors -------------------------------------------------------------


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def noise_schedule(cfg: RunConfig):
    s = cfg.schedule
    return linear_beta_schedule(s.T, s.beta_start, s.beta_end)


def train_predictor(cfg: RunConfig, out, mode: str = "diffusion", ablation: str = "none",
                    reuse: bool = False) -> Predictor:
    """Fit one predictor; with ``reuse`` an existing matching checkpoint is loaded instead."""
    _check_mode(mode, ablation)
    lay = Layout(out)
    path = lay.model(mode, ablation)
    if reuse and path.with_suffix(".json").exists():
        try:
            return Predictor.load(path, cfg.hash(), cfg.seed)
        except DataError:
            logger.info("stale checkpoint %s; retraining", path)
    convs = load_corpus(cfg, out)
    table = load_table(cfg, out)
    chunks = chunks_of(cfg, split(cfg, convs)[0])
    # initialisation and minibatch order are shared across ablations
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, f"init:{mode}"))
        net = Denoiser(cfg.denoiser, mode)
    sched = noise_schedule(cfg) if mode == "diffusion" else None
    pred = Predictor(net, fit_normalizer(chunks, table), ablation, sched, cfg.schedule.sigma, cfg.data.d_s)
    data = pred.tensors(chunks, table)
    opt = cfg.training if mode == "diffusion" else cfg.baseline_training
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, f"train:{mode}"))
    trace = train(net, data, opt, gen, sched)
    pred.save(path, meta={"train_chunks": len(data)}, **_stamp(cfg))
    _write_trace(path.parent / f"{path.name}_loss.csv", trace)
    if trace:
        plotting.loss_curve(trace, path.parent / f"{path.name}_loss.png", lay.tag(mode, ablation))
    return pred


def sample(cfg: RunConfig, out, mode: str = "diffusion", ablation: str = "none",
           count: int | None = None) -> dict:
    """Draw ``count`` embeddings for each probe context; returns ``chunk_id -> (count, m, d)``."""
    _check_mode(mode, ablation)
    lay = Layout(out)
    count = cfg.eval.count if count is None else int(count)
    if count < 1:
        raise ConfigError("count must be >= 1")
    pred = Predictor.load(lay.model(mode, ablation), cfg.hash(), cfg.seed)
    convs = load_corpus(cfg, out)
    table = load_table(cfg, out)
    blocks = {}
    for chunk in probe_chunks(cfg, convs):
        # same noise for every model and ablation on a given probe
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, f"sample:{chunk.chunk_id}"))
        blocks[chunk.chunk_id] = pred.sample(chunk, table, count, gen)
    save_tensors(lay.samples(mode, ablation), blocks, module="samples",
                 meta={"kind": "generated", "mode": mode, "ablation": ablation, "count": count},
                 **_stamp(cfg))
    return blocks


def ground_truth(cfg: RunConfig, out, count: int | None = None) -> dict:
    """Oracle continuations for each probe, pooled through the frozen extractor."""
    lay = Layout(out)
    count = cfg.eval.count if count is None else int(count)
    extractor = load_extractor(cfg, out)
    ccfg = corpus_config(cfg)
    blocks = {}
    for chunk in probe_chunks(cfg, load_corpus(cfg, out, with_oracle=True)):
        rng = np.random.default_rng(derive_seed(cfg.seed, f"oracle:{chunk.chunk_id}"))
        emb = oracle_target_samples(chunk, ccfg, count, extractor, rng)
        blocks[chunk.chunk_id] = emb.reshape(count, cfg.extractor.m, cfg.extractor.d)
    save_tensors(lay.ground_truth, blocks, module="samples",
                 meta={"kind": "oracle", "count": count}, **_stamp(cfg))
    return blocks


# --- evaluation -------------------------------------------------------------


def evaluate(cfg: RunConfig, out, mode: str = "diffusion", ablation: str = "none",
             bins: int | None = None, alpha: float | None = None,
             generated=None, truth=None, plots: bool = True) -> dict:
    """Per-probe NDB/JSD of a generated sample block against oracle samples.

    ``generated`` and ``truth`` override the default block paths; without
    ``truth`` the oracle population is drawn afresh.
    """
    lay = Layout(out)
    k = cfg.eval.bins if bins is None else int(bins)
    alpha = cfg.eval.alpha if alpha is None else float(alpha)
    if generated is None:
        _check_mode(mode, ablation)
        generated = lay.samples(mode, ablation)
        tag = lay.tag(mode, ablation)
    else:
        tag = Path(generated).with_suffix("").name
    gen, gen_manifest = load_tensors(generated, "samples", cfg.hash(), cfg.seed)
    if truth is None:
        ground_truth(cfg, out)
        truth = lay.ground_truth
    gt, _ = load_tensors(truth, "samples", cfg.hash(), cfg.seed)
    missing = sorted(set(gt) - set(gen))
    if missing:
        raise DataError(f"generated block lacks probes {missing}")

    dest = lay.eval_dir(tag)
    dest.mkdir(parents=True, exist_ok=True)
    probes = {}
    rows = []
    for pid in sorted(gt):
        bm = fit_bins(gt[pid], k, derive_seed(cfg.seed, f"bins:{pid}") % 2**32, cfg.eval.kmeans_restarts)
        rep = compare(gt[pid], gen[pid], k, alpha, bins=bm)
        probes[pid] = rep.to_dict()
        for i, (g, h, z, s) in enumerate(zip(rep.gt_hist, rep.gen_hist, rep.z, rep.significant())):
            rows.append([pid, i, f"{g:.6f}", f"{h:.6f}", f"{z:.6f}", int(s)])
        if plots:
            name = pid.replace("/", "_")
            plotting.bin_proportions(rep.gt_hist, rep.gen_hist, rep.significant(),
                                     dest / f"bins_{name}.png", f"{tag}  {pid}")
            plotting.projection_scatter(gt[pid], gen[pid], bm.centroids,
                                        dest / f"scatter_{name}.png", f"{tag}  {pid}")
    result = {
        **_stamp(cfg),
        "run": tag,
        "mode": gen_manifest["meta"].get("mode"),
        "ablation": gen_manifest["meta"].get("ablation"),
        "bins": k,
        "alpha": alpha,
        "mean_jsd": float(np.mean([p["jsd"] for p in probes.values()])),
        "mean_ndb": float(np.mean([p["ndb"] for p in probes.values()])),
        "max_ndb": int(max(p["ndb"] for p in probes.values())),
        "probes": probes,
    }
    _write_json(dest / "report.json", result)
    with open(dest / "bins.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "bin", "gt_proportion", "gen_proportion", "z", "significant"])
        w.writerows(rows)
    logger.info("%s: mean JSD %.4f, mean NDB %.2f", tag, result["mean_jsd"], result["mean_ndb"])
    return result


def ablate(cfg: RunConfig, out, reuse: bool = True) -> list[dict]:
    """Train, sample and evaluate the diffusion predictor under every context ablation."""
    lay = Layout(out)
    ccfg = corpus_config(cfg)
    ground_truth(cfg, out)
    rows = []
    for ablation in ABLATIONS:
        train_predictor(cfg, out, "diffusion", ablation, reuse=reuse)
        sample(cfg, out, "diffusion", ablation)
        res = evaluate(cfg, out, "diffusion", ablation, truth=lay.ground_truth)
        floor = float(np.mean([ablation_jsd_floor(ccfg, ablation, s) for s in range(ccfg.n_states)]))
        rows.append({
            "ablation": ablation,
            "mean_jsd": res["mean_jsd"],
            "mean_ndb": res["mean_ndb"],
            "label_jsd_floor": floor,
        })
    lay.ablation_dir.mkdir(parents=True, exist_ok=True)
    _write_json(lay.ablation_dir / "table.json", {**_stamp(cfg), "rows": rows})
    with open(lay.ablation_dir / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ablation", "mean_jsd", "mean_ndb", "label_jsd_floor"])
        for r in rows:
            w.writerow([r["ablation"], f"{r['mean_jsd']:.6f}", f"{r['mean_ndb']:.3f}",
                        f"{r['label_jsd_floor']:.6f}"])
    plotting.metric_bars([r["ablation"] for r in rows], [r["mean_jsd"] for r in rows],
                         [r["mean_ndb"] for r in rows], lay.ablation_dir / "table.png",
                         "context ablations")
    return rows


def report(runs, dest) -> dict:
    """Collate evaluation reports from one or more run directories.

    Runs may differ in seed but must share one configuration hash.
    """
    entries = []
    for run in runs:
        for path in sorted(Path(run).glob("eval/*/report.json")):
            rep = json.loads(path.read_text())
            entries.append({
                "dir": str(Path(run)),
                "run": rep["run"],
                "config_hash": rep["config_hash"],
                "seed": rep["seed"],
                "mode": rep["mode"],
                "ablation": rep["ablation"],
                "bins": rep["bins"],
                "alpha": rep["alpha"],
                "mean_jsd": rep["mean_jsd"],
                "mean_ndb": rep["mean_ndb"],
                "max_ndb": rep["max_ndb"],
            })
    if not entries:
        raise DataError("no evaluation reports found")
    hashes = sorted({e["config_hash"] for e in entries})
    if len(hashes) > 1:
        raise DataError(f"refusing to mix runs from different configs: {[h[:12] for h in hashes]}")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    summary = {"config_hash": hashes[0], "runs": entries}
    _write_json(dest / "summary.json", summary)
    cols = ["dir", "run", "seed", "mode", "ablation", "bins", "alpha", "mean_jsd", "mean_ndb", "max_ndb"]
    with open(dest / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(entries)
    labels = [f"{e['run']}/s{e['seed']}" for e in entries]
    plotting.metric_bars(labels, [e["mean_jsd"] for e in entries], [e["mean_ndb"] for e in entries],
                         dest / "summary.png", "evaluation summary")
    return summary


def run_all(cfg: RunConfig, out, baseline: bool = True) -> dict:
    """Every stage in order; returns the evaluation results keyed by run tag."""
    gen_data(cfg, out)
    run_train_extractor(cfg, out)
    extract_prosody(cfg, out)
    results = {}
    for mode in ("diffusion", "baseline") if baseline else ("diffusion",):
        train_predictor(cfg, out, mode)
        sample(cfg, out, mode)
        results[mode] = evaluate(cfg, out, mode)
    return results
