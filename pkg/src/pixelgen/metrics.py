"""Feature-space Fréchet distance and k-NN precision/recall."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from pixelgen.errors import ConfigError, DimensionError
from pixelgen.tensor import no_tape

RIDGE = 1e-6


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats: np.ndarray, ridge: float = RIDGE) -> "GaussianFit":
        feats = np.asarray(feats, dtype=np.float64)
        n, d = feats.shape
        if n < d:
            warnings.warn(f"fitting a {d}-dim Gaussian to only {n} samples", stacklevel=2)
        mu = feats.mean(axis=0)
        centred = feats - mu
        cov = centred.T @ centred / max(n - 1, 1)
        cov = 0.5 * (cov + cov.T) + ridge * np.eye(d)
        return cls(mu, cov, n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """‖μa-μb‖² + Tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"Gaussian fits differ in dimension: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov)
    cross = _psd_sqrt(root_a @ b.cov @ root_a)
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.clip(sq, 0.0, None))


def knn_radii(feats: np.ndarray, k: int) -> np.ndarray:
    d = _pairwise_dist(feats, feats)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def knn_precision_recall(real: np.ndarray, gen: np.ndarray, k: int = 3) -> tuple[float, float]:
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if not 1 <= k < min(len(real), len(gen)):
        raise ConfigError(f"k={k} must satisfy 1 <= k < min(n_real, n_gen) = {min(len(real), len(gen))}")
    r_real, r_gen = knn_radii(real, k), knn_radii(gen, k)
    d = _pairwise_dist(gen, real)  # gen × real
    precision = float(np.mean((d <= r_real[None, :]).any(axis=1)))
    recall = float(np.mean((d.T <= r_gen[None, :]).any(axis=1)))
    return precision, recall


@dataclass
class MetricsReport:
    frechet: float
    precision: float
    recall: float
    n_real: int
    n_gen: int
    k: int

    CSV_HEADER = "frechet,precision,recall,n_real,n_gen,k"

    def csv_row(self) -> str:
        return f"{self.frechet!r},{self.precision!r},{self.recall!r},{self.n_real},{self.n_gen},{self.k}"

    def __str__(self) -> str:
        return (f"frechet={self.frechet:.6f} precision={self.precision:.4f} recall={self.recall:.4f} "
                f"(n_real={self.n_real}, n_gen={self.n_gen}, k={self.k})")

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("CSV_HEADER", None)
        return d


def pooled_features(net, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Mean over patches of the global extractor's features, one row per image."""
    rows = []
    with no_tape():
        for i in range(0, len(images), chunk):
            rows.append(net(images[i : i + chunk]).data.mean(axis=1))
    return np.concatenate(rows).astype(np.float64)


def compare_features(real: np.ndarray, gen: np.ndarray, k: int = 3) -> MetricsReport:
    fd = frechet_distance(GaussianFit.from_features(real), GaussianFit.from_features(gen))
    p, r = knn_precision_recall(real, gen, k)
    return MetricsReport(fd, p, r, len(real), len(gen), k)


EVAL_EXTRACTOR_SEED = 7
REAL_INDEX_OFFSET = 1 << 20


def eval_extractor(seed: int = EVAL_EXTRACTOR_SEED):
    """Global feature net used only for evaluation, seeded apart from the training one."""
    from pixelgen.perception import GlobalFeatureNet

    return GlobalFeatureNet(seed=seed)


def real_images(n: int, dataset_seed: int = 0, offset: int = REAL_INDEX_OFFSET, threads: int = 1) -> np.ndarray:
    """Held-out real images drawn from indices far beyond any training epoch."""
    from pixelgen.data import gen_batch

    return gen_batch(dataset_seed, range(offset, offset + n), threads)[0]


def generate(model, sampler_cfg, n: int, seed: int, chunk: int = 256) -> np.ndarray:
    """``n`` class-balanced samples; chunking does not change pixels."""
    from pixelgen.samplers import sample

    classes = np.arange(n) % model.cfg.num_classes
    parts = [sample(model, min(chunk, n - s), classes[s : s + chunk], sampler_cfg, seed, start=s)
             for s in range(0, n, chunk)]
    return np.concatenate(parts)


def evaluate(model, sampler_cfg, n: int = 1024, *, seed: int = 1234, dataset_seed: int = 0, k: int = 3,
             net=None, threads: int = 1) -> MetricsReport:
    """Sample ``n`` images with a fixed seed and compare pooled features against ``n`` real ones."""
    net = eval_extractor() if net is None else net
    real = pooled_features(net, real_images(n, dataset_seed, threads=threads))
    gen = pooled_features(net, generate(model, sampler_cfg, n, seed))
    return compare_features(real, gen, k)
