"""Embedding extraction, cosine-similarity statistics and 2D projections."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .losses import MultiScaleEmbedding
from .priornet import AEModel
from .segnet import SegModel
from .synthgen import SlicePair

log = logging.getLogger(__name__)


@torch.no_grad()
def extract_embeddings(model: SegModel | AEModel, slices: Sequence[SlicePair],
                       scales: Sequence[int] | None = None, batch_size: int = 32) -> MultiScaleEmbedding:
    """Eval-mode pooled embeddings of ``slices``, grouped per scale.

    Segmentation models embed the images; auto-encoders embed the target
    masks, skipping masks that are background only.
    """
    is_ae = isinstance(model, AEModel)
    if is_ae:
        slices = [s for s in slices if s.target[1:].any()]
    if not slices:
        raise ValueError("no slices to embed")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    per_scale: dict[int, list[torch.Tensor]] = {}
    labels = []
    by_domain: dict[int, list[SlicePair]] = {}
    for s in slices:
        by_domain.setdefault(s.domain_id, []).append(s)
    try:
        for k in sorted(by_domain):
            group = by_domain[k]
            for start in range(0, len(group), batch_size):
                chunk = group[start:start + batch_size]
                if is_ae:
                    y = torch.as_tensor(np.stack([c.target for c in chunk]), dtype=dtype)
                    taps = model(model.layout.to_model_target(k, y), k).embeddings
                else:
                    x = torch.as_tensor(np.stack([c.image for c in chunk]), dtype=dtype)[:, None]
                    taps = model(x, k).embeddings
                for i, t in enumerate(taps):
                    per_scale.setdefault(i + 1, []).append(t)
                labels.extend([k] * len(chunk))
    finally:
        model.train(was_training)
    emb = MultiScaleEmbedding({s: torch.cat(v) for s, v in per_scale.items()}, labels)
    return emb.restrict(scales) if scales is not None else emb


@dataclass
class SimilarityReport:
    domains: list[int]
    mean: dict[int, np.ndarray]
    std: dict[int, np.ndarray]
    count: dict[int, np.ndarray]
    seed: int = 0
    n_pairs: int = 0
    extra: dict = field(default_factory=dict)

    def intra(self, scale: int) -> np.ndarray:
        return np.diag(self.mean[scale])

    def inter(self, scale: int) -> np.ndarray:
        m = self.mean[scale]
        return m[~np.eye(len(self.domains), dtype=bool)]

    def rows(self) -> list[dict]:
        out = []
        for s in sorted(self.mean):
            for a, da in enumerate(self.domains):
                for b, db in enumerate(self.domains):
                    out.append({"scale": s, "domain_a": da, "domain_b": db,
                                "kind": "intra" if a == b else "inter",
                                "mean": float(self.mean[s][a, b]), "std": float(self.std[s][a, b]),
                                "n_pairs": int(self.count[s][a, b])})
        return out


def cosine_similarity_stats(emb: MultiScaleEmbedding, n_pairs: int = 100_000, seed: int = 0,
                            scales: Sequence[int] | None = None) -> SimilarityReport:
    """Mean/std cosine similarity of randomly sampled pairs within and between domains.

    Pairs are drawn uniformly with replacement (distinct indices inside a
    domain). Each unordered domain pair is sampled once and mirrored.
    """
    labels = emb.domain_labels.numpy()
    domains = sorted(set(labels.tolist()))
    members = {k: np.flatnonzero(labels == k) for k in domains}
    if any(len(v) < 2 for v in members.values()):
        raise ValueError("every domain needs at least 2 samples")
    use = sorted(emb.scales) if scales is None else list(scales)
    K = len(domains)
    rng = np.random.default_rng(seed)
    draws = {}
    for a in range(K):
        for b in range(a, K):
            ia, ib = members[domains[a]], members[domains[b]]
            i = rng.integers(0, len(ia), size=n_pairs)
            if a == b:
                j = rng.integers(0, len(ia) - 1, size=n_pairs)
                j = j + (j >= i)
                draws[a, b] = (ia[i], ia[j])
            else:
                draws[a, b] = (ia[i], ib[rng.integers(0, len(ib), size=n_pairs)])
    mean, std, count = {}, {}, {}
    for s in use:
        z = emb.scales[s].detach().double().numpy()
        m, sd, c = np.zeros((K, K)), np.zeros((K, K)), np.zeros((K, K), dtype=int)
        for (a, b), (i, j) in draws.items():
            sims = np.einsum("nd,nd->n", z[i], z[j])
            m[a, b] = m[b, a] = sims.mean()
            sd[a, b] = sd[b, a] = sims.std()
            c[a, b] = c[b, a] = n_pairs
        mean[s], std[s], count[s] = m, sd, c
    return SimilarityReport(domains, mean, std, count, seed, n_pairs)


def pca_fit(rows: np.ndarray, target_dim: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, top principal axes (target_dim, d) and their variances."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 1e-12 * max(1.0, np.abs(x).max() ** 2):
        raise ValueError("data has rank 0")
    k = min(target_dim, x.shape[1])
    return mean, evecs[:, :k].T, evals[:k]


def pca_reduce(rows: np.ndarray, target_dim: int = 50) -> np.ndarray:
    """Project onto the top principal components; rows with d <= target_dim pass through."""
    x = np.asarray(rows, dtype=np.float64)
    if x.shape[1] <= target_dim:
        if x.shape[0] < 2:
            raise ValueError("PCA needs at least 2 rows")
        return x
    mean, axes, _ = pca_fit(x, target_dim)
    return (x - mean) @ axes.T


def project_2d(rows: np.ndarray, perplexity: float = 30.0, learning_rate: float = 200.0,
               seed: int = 0) -> np.ndarray:
    """t-SNE layout (after PCA to 50 dims when needed); deterministic given ``seed``."""
    from sklearn.manifold import TSNE

    x = np.asarray(rows, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise ValueError("t-SNE projection needs at least 5 points")
    x = pca_reduce(x, 50)
    if n <= 3 * perplexity:
        log.warning("only %d points for perplexity %.1f; lowering perplexity", n, perplexity)
        perplexity = max(1.0, (n - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=perplexity, learning_rate=learning_rate, init="pca",
                random_state=seed, method="barnes_hut")
    return tsne.fit_transform(x)
