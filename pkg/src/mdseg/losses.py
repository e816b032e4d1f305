"""Training objectives: multi-domain cross-entropy, contrastive regularization,
anatomical-prior distance and their weighted combinations.

Everything is written with differentiable torch ops, so gradients come from
autograd and are checked against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from .priornet import AEModel

CLIP = 1e-7
BOTTLENECK_SCALE = 5


@dataclass
class LossWeights:
    tau: float | Sequence[float] = 0.1
    lambda1: float = 0.05
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda_ssc: float = 0.1
    scales: tuple[int, ...] | None = None  # None = every available tap
    # "mean" divides the squared code distance by the code size so lambda3 does not scale with it
    mjap_reduction: str = "mean"

    def __post_init__(self):
        taus = self.tau if isinstance(self.tau, (list, tuple)) else [self.tau]
        if any(t <= 0 for t in taus):
            raise ValueError("temperature must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda_ssc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mjap_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown prior-loss reduction {self.mjap_reduction!r}")
        if self.scales is not None:
            self.scales = tuple(int(s) for s in self.scales)
            if not self.scales:
                raise ValueError("scale set must be non-empty")
        if isinstance(self.tau, list):
            self.tau = tuple(self.tau)


@dataclass
class MultiScaleEmbedding:
    """Per-scale (n, d_s) unit-norm rows sharing one domain label vector.

    Scales are keyed 1..|S| in network order (encoder first, bottleneck in the
    middle, decoder last).
    """

    scales: dict[int, torch.Tensor]
    domain_labels: torch.Tensor
    splits: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.domain_labels = torch.as_tensor(self.domain_labels, dtype=torch.long)
        n = self.domain_labels.shape[0]
        for s, z in self.scales.items():
            if z.dim() != 2 or z.shape[0] != n:
                raise ValueError(f"scale {s}: expected ({n}, d) rows, got {tuple(z.shape)}")

    @classmethod
    def from_taps(cls, taps: Sequence[Sequence[torch.Tensor]], domains: Sequence[int]) -> "MultiScaleEmbedding":
        """Concatenate per-domain tap lists (each a list over scales of (n_k, d_s))."""
        n_scales = len(taps[0])
        scales = {s + 1: torch.cat([t[s] for t in taps], dim=0) for s in range(n_scales)}
        labels = torch.cat([torch.full((t[0].shape[0],), int(k), dtype=torch.long) for t, k in zip(taps, domains)])
        return cls(scales, labels)

    def __len__(self) -> int:
        return int(self.domain_labels.shape[0])

    def restrict(self, scales: Sequence[int]) -> "MultiScaleEmbedding":
        missing = [s for s in scales if s not in self.scales]
        if missing:
            raise ValueError(f"scales {missing} not available (have {sorted(self.scales)})")
        return MultiScaleEmbedding({s: self.scales[s] for s in scales}, self.domain_labels, list(self.splits))

    def positive_sets(self) -> list[list[int]]:
        lab = self.domain_labels.tolist()
        return [[j for j in range(len(lab)) if j != i and lab[j] == lab[i]] for i in range(len(lab))]


def _check_pair(pred: torch.Tensor, target: torch.Tensor, k) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"domain {k}: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.shape[0] == 0:
        raise ValueError(f"domain {k} has no samples")


def ce_multi(preds: Mapping[int, torch.Tensor], targets: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """Cross-entropy averaged over domains, samples and classes.

    ``preds[k]`` and ``targets[k]`` are (n_k, |C_k|, H, W) probability and
    one-hot stacks; the pixel sum is replaced by a pixel mean.
    """
    if not preds:
        raise ValueError("no domains given")
    if set(preds) != set(targets):
        raise ValueError("prediction and target domains differ")
    total = 0.0
    for k in preds:
        p, y = preds[k], targets[k]
        _check_pair(p, y, k)
        n, c = p.shape[:2]
        logp = torch.log(p.clamp(CLIP, 1.0))
        per_pixel = (y * logp).sum(dim=1)  # (n, ...)
        total = total + per_pixel.flatten(1).mean(dim=1).sum() / (n * c)
    return -total / len(preds)


def _tau_for(tau, scale: int) -> float:
    """Temperature of scale ``scale`` (1-based); sequences are indexed by scale."""
    if isinstance(tau, (list, tuple)):
        if len(tau) == 1:
            return float(tau[0])
        if not 1 <= scale <= len(tau):
            raise ValueError(f"no temperature given for scale {scale}")
        return float(tau[scale - 1])
    return float(tau)


def msc_loss(emb: MultiScaleEmbedding, tau: float | Sequence[float] = 0.1,
             scales: Sequence[int] | None = None) -> torch.Tensor:
    """Supervised contrastive loss over domain labels, averaged over scales.

    For anchor i the positives are the other samples of its domain; the
    denominator runs over every sample except the anchor itself.
    """
    labels = emb.domain_labels
    use = sorted(emb.scales) if scales is None else list(scales)
    if not use:
        raise ValueError("empty scale set")
    same = labels[:, None] == labels[None, :]
    n = labels.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    n_pos = pos.sum(dim=1)
    if (n_pos == 0).any():
        raise ValueError("every domain needs at least 2 samples for the contrastive loss")
    total = 0.0
    for s in use:
        z = emb.scales[s]
        sim = z @ z.T / _tau_for(tau, s)
        log_den = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
        log_prob = sim - log_den[:, None]
        per_anchor = (log_prob * pos).sum(dim=1) / n_pos
        total = total + per_anchor.sum()
    return -total / (n * len(use))


def ssc_loss(emb: MultiScaleEmbedding, tau: float | Sequence[float] = 0.1,
             scale: int = BOTTLENECK_SCALE) -> torch.Tensor:
    """Contrastive loss restricted to the bottleneck scale."""
    if scale not in emb.scales:
        raise ValueError(f"scale {scale} not available")
    return msc_loss(emb, tau, [scale])


def mjap_loss(preds: Mapping[int, torch.Tensor], targets: Mapping[int, torch.Tensor],
              prior: AEModel, fingerprint: str | None = None, reduction: str = "mean") -> torch.Tensor:
    """Squared Euclidean distance between frozen-encoder codes of target and prediction.

    Averaged over samples, then domains. ``reduction="sum"`` keeps the plain
    squared norm of each code difference; ``"mean"`` divides it by the number
    of code elements.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    prior.check_frozen(fingerprint)
    if not preds:
        raise ValueError("no domains given")
    total = 0.0
    for k in preds:
        p, y = preds[k], targets[k]
        _check_pair(p, y, k)
        with torch.no_grad():
            code_y, _ = prior.encode(y, k)
        code_p, _ = prior.encode(p, k)
        sq = (code_y - code_p).pow(2).flatten(1)
        per_sample = sq.mean(dim=1) if reduction == "mean" else sq.sum(dim=1)
        total = total + per_sample.mean()
    return total / len(preds)


def ae_objective_terms(recon, targets, emb: MultiScaleEmbedding | None, weights: LossWeights) -> dict:
    ce = ce_multi(recon, targets)
    msc = msc_loss(emb, weights.tau, weights.scales) if weights.lambda1 > 0 else ce.new_zeros(())
    return {"ce": ce, "msc": msc, "mjap": ce.new_zeros(()), "total": ce + weights.lambda1 * msc}


def ae_objective(recon, targets, emb, weights: LossWeights) -> torch.Tensor:
    """Reconstruction cross-entropy plus lambda1 times the contrastive term."""
    return ae_objective_terms(recon, targets, emb, weights)["total"]


def seg_objective_terms(preds, targets, emb: MultiScaleEmbedding | None, prior: AEModel | None,
                        weights: LossWeights, contrastive: str = "msc", fingerprint: str | None = None,
                        prior_preds=None, prior_targets=None) -> dict:
    """Components of CE + lambda2 * contrastive + lambda3 * anatomical prior.

    ``contrastive`` picks the multi-scale ("msc") or bottleneck-only ("ssc")
    term; the latter is weighted by ``lambda_ssc`` instead of ``lambda2``. ``prior_preds``/``prior_targets`` override what the prior sees
    (the shared strategy feeds union-space stacks to a union-space encoder).
    """
    ce = ce_multi(preds, targets)
    zero = ce.new_zeros(())
    if contrastive not in ("msc", "ssc"):
        raise ValueError(f"unknown contrastive term {contrastive!r}")
    con_weight = weights.lambda2 if contrastive == "msc" else weights.lambda_ssc
    if con_weight > 0:
        if emb is None:
            raise ValueError("contrastive weight set but no embeddings given")
        con = msc_loss(emb, weights.tau, weights.scales) if contrastive == "msc" else ssc_loss(emb, weights.tau)
    else:
        con = zero
    if weights.lambda3 > 0:
        if prior is None:
            raise ValueError("anatomical prior weight set but no prior given")
        prior_term = mjap_loss(prior_preds if prior_preds is not None else preds,
                               prior_targets if prior_targets is not None else targets, prior, fingerprint,
                               weights.mjap_reduction)
    else:
        prior_term = zero
    total = ce + con_weight * con + weights.lambda3 * prior_term
    return {"ce": ce, "msc": con, "mjap": prior_term, "total": total}


def seg_objective(preds, targets, emb, prior, weights: LossWeights, contrastive: str = "msc") -> torch.Tensor:
    return seg_objective_terms(preds, targets, emb, prior, weights, contrastive)["total"]
