"""Bin-based diversity metrics: NDB and JSD between sample populations.

Ground-truth samples are clustered into ``k`` bins; both populations are
histogrammed by nearest centroid and compared bin by bin.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class BinModel:
    centroids: np.ndarray  # (k, dim)
    seed: int
    n_fit: int

    @property
    def k(self) -> int:
        return len(self.centroids)


def _flat(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    return arr.reshape(len(arr), int(np.prod(arr.shape[1:])))


def fit_bins(gt_samples, k: int = 20, seed: int = 0, n_init: int = 5) -> BinModel:
    """k-means (k-means++ seeding, best of ``n_init`` restarts) on flattened samples."""
    x = _flat(gt_samples)
    if k < 1:
        raise ConfigError("need k >= 1")
    if len(x) < k:
        raise DataError(f"{len(x)} samples cannot fill {k} bins")
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=300, tol=1e-6, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(x)
    return BinModel(np.asarray(km.cluster_centers_, dtype=np.float64), seed, len(x))


def assign(samples, bins: BinModel) -> np.ndarray:
    """Nearest-centroid index per sample; ties go to the lowest index."""
    x = _flat(samples)
    d2 = ((x[:, None, :] - bins.centroids[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def histogram(samples, bins: BinModel) -> np.ndarray:
    x = _flat(samples)
    if len(x) == 0:
        raise DataError("cannot histogram an empty sample set")
    counts = np.bincount(assign(x, bins), minlength=bins.k)
    return counts / counts.sum()


def _check_simplex(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector")


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    total = p + q

    def kl(a):
        # a / m written as 2a / (p + q) so subnormal entries do not underflow the midpoint
        nz = a > 0
        return float(np.sum(a[nz] * np.log(2.0 * a[nz] / total[nz])))

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def proportion_z(gt_hist, gt_n: int, gen_hist, gen_n: int) -> np.ndarray:
    """Pooled two-proportion z statistic per bin (0 where the pooled rate is 0 or 1)."""
    p1 = np.asarray(gt_hist, dtype=np.float64)
    p2 = np.asarray(gen_hist, dtype=np.float64)
    pooled = (p1 * gt_n + p2 * gen_n) / (gt_n + gen_n)
    se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / gt_n + 1.0 / gen_n))
    z = np.zeros_like(p1)
    ok = se > 0
    z[ok] = (p1[ok] - p2[ok]) / se[ok]
    return z


def ndb(gt_hist, gt_n: int, gen_hist, gen_n: int, alpha: float = 0.05) -> int:
    """Number of bins whose proportions differ at two-sided level ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if gt_n < 1 or gen_n < 1:
        raise ValueError("sample counts must be >= 1")
    z = proportion_z(gt_hist, gt_n, gen_hist, gen_n)
    return int(np.sum(np.abs(z) > norm.ppf(1.0 - alpha / 2.0)))


@dataclass
class DiversityReport:
    gt_hist: list
    gen_hist: list
    gt_n: int
    gen_n: int
    jsd: float
    ndb: int
    alpha: float
    z: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.gt_hist)

    def significant(self) -> list[bool]:
        crit = norm.ppf(1.0 - self.alpha / 2.0)
        return [abs(v) > crit for v in self.z]

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_bins_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "gt_proportion", "gen_proportion", "z", "significant"])
            for i, (g, h, z, s) in enumerate(zip(self.gt_hist, self.gen_hist, self.z, self.significant())):
                w.writerow([i, f"{g:.6f}", f"{h:.6f}", f"{z:.6f}", int(s)])


def compare(gt_samples, gen_samples, k: int = 20, alpha: float = 0.05, seed: int = 0,
            bins: BinModel | None = None) -> DiversityReport:
    """Fit bins on the ground truth (unless given) and score the generated set."""
    gt = _flat(gt_samples)
    gen = _flat(gen_samples)
    if bins is None:
        bins = fit_bins(gt, k, seed)
    p = histogram(gt, bins)
    q = histogram(gen, bins)
    z = proportion_z(p, len(gt), q, len(gen))
    return DiversityReport(
        gt_hist=p.tolist(),
        gen_hist=q.tolist(),
        gt_n=len(gt),
        gen_n=len(gen),
        jsd=jsd(p, q),
        ndb=ndb(p, len(gt), q, len(gen), alpha),
        alpha=alpha,
        z=z.tolist(),
    )
