"""Two-phase training (auto-encoder, then segmenter), strategies and leave-one-out evaluation."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import evalkit, io
from .losses import LossWeights, MultiScaleEmbedding, ae_objective_terms, seg_objective_terms
from .priornet import AEModel, PriorError
from .segnet import ArchConfig, SegModel
from .synthgen import (BatchMode, BatchSampler, LabeledVolume, SlicePair, augment, normalize_intensity,
                       resize_labels, slice_and_resize)

log = logging.getLogger(__name__)

STRATEGIES = ("individual", "transfer", "shared", "dsl")
DETERMINISTIC_ENV = "MDSEG_DETERMINISTIC"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Schedule:
    batch_size: int
    epochs: int
    lr: float


def default_seg_schedule() -> Schedule:
    return Schedule(18, 6, 5e-4)


def default_ae_schedule() -> Schedule:
    return Schedule(24, 8, 1e-4)


def desk_arch() -> ArchConfig:
    return ArchConfig(widths=(8, 16, 32, 64, 128))


@dataclass
class TrainConfig:
    strategy: str = "dsl"
    source_domain: int | None = None
    msc: bool = False
    ssc: bool = False
    mjap: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    seg: Schedule = field(default_factory=default_seg_schedule)
    ae: Schedule = field(default_factory=default_ae_schedule)
    arch: ArchConfig = field(default_factory=desk_arch)
    ae_arch: ArchConfig = field(default_factory=desk_arch)
    resolution: tuple[int, int] = (64, 64)
    augment: bool = True
    # intensity normalization is per volume, augmentation per slice afterwards
    preprocessing: str = "normalize_then_augment"
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)

    def validate(self, n_domains: int | None = None) -> "TrainConfig":
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.msc and self.ssc:
            raise ValueError("msc and ssc are mutually exclusive")
        if (self.msc or self.ssc) and self.strategy != "dsl":
            raise ValueError("contrastive regularization can only be integrated in the dsl strategy")
        if self.strategy == "transfer":
            if n_domains is not None and n_domains < 2:
                raise ValueError("transfer strategy needs at least 2 domains")
            if self.source_domain is None:
                raise ValueError("transfer strategy needs a source_domain")
        if self.preprocessing != "normalize_then_augment":
            raise ValueError("only normalize_then_augment preprocessing is implemented")
        for s in (self.seg, self.ae):
            if s.batch_size < 1 or s.epochs < 0 or not s.lr > 0:
                raise ValueError("invalid schedule")
        return self

    @property
    def contrastive(self) -> str | None:
        return "msc" if self.msc else "ssc" if self.ssc else None

    def effective_weights(self) -> LossWeights:
        """Ablation flags zero the corresponding weights."""
        return replace(self.weights,
                       lambda2=self.weights.lambda2 if self.msc else 0.0,
                       lambda_ssc=self.weights.lambda_ssc if self.ssc else 0.0,
                       lambda3=self.weights.lambda3 if self.mjap else 0.0)

    @property
    def model_strategy(self) -> str:
        return {"shared": "shared_bn", "dsl": "dsl"}.get(self.strategy, "individual")

    @property
    def prior_strategy(self) -> str:
        return "shared_bn" if self.strategy == "shared" else "dsl"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["ae_arch"] = self.ae_arch.to_dict()
        d["resolution"] = list(self.resolution)
        w = d["weights"]
        if isinstance(w["tau"], tuple):
            w["tau"] = list(w["tau"])
        if w["scales"] is not None:
            w["scales"] = list(w["scales"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("seg", "ae"):
            if key in d and not isinstance(d[key], Schedule):
                d[key] = Schedule(**d[key])
        for key in ("arch", "ae_arch"):
            if key in d and not isinstance(d[key], ArchConfig):
                d[key] = ArchConfig.from_dict(d[key])
        return cls(**d)


def ablation_configs(base: TrainConfig) -> dict[str, TrainConfig]:
    """The dsl ablation grid: configs that differ only in regularizer flags."""
    grid = {"dsl": (False, False), "dsl+msc": (True, False), "dsl+mjap": (False, True),
            "dsl+msc+mjap": (True, True)}
    return {name: replace(base, strategy="dsl", msc=msc, ssc=False, mjap=mjap)
            for name, (msc, mjap) in grid.items()}


def configure_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    if os.environ.get(DETERMINISTIC_ENV, "1") != "0":
        torch.use_deterministic_algorithms(True)


# ----------------------------------------------------------------- data prep

def prepare_slices(volumes: Sequence[LabeledVolume], resolution) -> list[SlicePair]:
    out = []
    for v in volumes:
        out.extend(slice_and_resize(normalize_intensity(v), resolution))
    return out


def prepare_pools(datasets: Mapping[int, Sequence[LabeledVolume]], resolution) -> dict[int, list[SlicePair]]:
    return {int(k): prepare_slices(v, resolution) for k, v in sorted(datasets.items())}


def _domain_classes(pools: Mapping[int, Sequence[SlicePair]]) -> dict[int, int]:
    return {k: int(v[0].target.shape[0]) for k, v in pools.items()}


def _batch_tensors(slices: Sequence[SlicePair], aug_seed, do_augment: bool, dtype):
    if do_augment:
        slices = [augment(s, list(aug_seed) + [i]) for i, s in enumerate(slices)]
    x = torch.as_tensor(np.stack([s.image for s in slices]), dtype=dtype)[:, None]
    y = torch.as_tensor(np.stack([s.target for s in slices]), dtype=dtype)
    return x, y


def _check_finite(terms: dict, where: str) -> None:
    bad = {k: float(v.detach()) for k, v in terms.items() if not torch.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"non-finite loss at {where}: {bad}")


def _row(phase: str, epoch: int, step: int, terms: dict) -> dict:
    v = {k: float(t.detach()) for k, t in terms.items()}
    return {"phase": phase, "epoch": epoch, "step": step, "L_CE": v["ce"], "L_MSC": v["msc"],
            "L_MJAP": v["mjap"], "total": v["total"]}


# --------------------------------------------------------------- auto-encoder

def train_autoencoder(datasets, config: TrainConfig, history: list | None = None,
                      pools: Mapping[int, Sequence[SlicePair]] | None = None) -> AEModel:
    """Train the multi-joint auto-encoder on ground-truth masks, then freeze it.

    ``datasets`` maps domain id -> training volumes (or pass prepared ``pools``).
    """
    config.validate()
    pools = pools if pools is not None else prepare_pools(datasets, config.resolution)
    if not pools:
        raise ValueError("no domains given")
    configure_determinism(config.seed)
    model = AEModel(config.ae_arch, _domain_classes(pools), config.prior_strategy)
    weights = config.weights
    use_msc = weights.lambda1 > 0 and model.layout.strategy == "dsl" and len(pools) > 1
    if not use_msc:
        weights = replace(weights, lambda1=0.0)
    history = history if history is not None else []
    sched = config.ae
    mode = BatchMode.SHARED_SPLIT if len(pools) > 1 else BatchMode.SINGLE_DOMAIN
    sampler = BatchSampler(pools, sched.batch_size, mode, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=sched.lr)
    model.train()
    step = 0
    for epoch in range(sched.epochs):
        for b, batch in enumerate(sampler.epoch(epoch)):
            recon, targets, taps, domains = {}, {}, [], []
            groups = batch.by_domain()
            if model.layout.shared:
                ks = sorted(groups)
                ys = [_batch_tensors(groups[k], (config.seed, 1, epoch, b, k), config.augment, torch.float32)[1]
                      for k in ks]
                ys = [model.layout.to_model_target(k, y) for k, y in zip(ks, ys)]
                out = model(torch.cat(ys), ks[0])
                start = 0
                for k, y in zip(ks, ys):
                    recon[k], targets[k] = out.probs[start:start + len(y)], y
                    start += len(y)
            else:
                for k in sorted(groups):
                    _, y = _batch_tensors(groups[k], (config.seed, 1, epoch, b, k), config.augment, torch.float32)
                    out = model(y, k)
                    recon[k], targets[k] = out.probs, y
                    taps.append(out.embeddings)
                    domains.append(k)
            emb = MultiScaleEmbedding.from_taps(taps, domains) if use_msc else None
            terms = ae_objective_terms(recon, targets, emb, weights)
            _check_finite(terms, f"prior epoch {epoch} step {step}")
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            history.append(_row("prior", epoch, step, terms))
            step += 1
        log.info("prior epoch %d: loss %.4f", epoch, history[-1]["total"] if history else float("nan"))
    model.freeze()
    return model


# ------------------------------------------------------------------ segmenter

@dataclass
class SegmenterBundle:
    """Trained model(s) for one strategy; ``models[k]`` serves domain k."""

    strategy: str
    models: dict[int, SegModel]
    history: list[dict] = field(default_factory=list)
    prior_fingerprint: str | None = None

    def unique_models(self) -> list[SegModel]:
        seen, out = set(), []
        for k in sorted(self.models):
            m = self.models[k]
            if id(m) not in seen:
                seen.add(id(m))
                out.append(m)
        return out

    def parameter_report(self) -> dict:
        splits = [m.parameter_split() for m in self.unique_models()]
        total = sum(s["total"] for s in splits)
        specific = sum(s["domain_specific"] for s in splits)
        return {"n_models": len(splits), "total": total, "domain_specific": specific,
                "domain_specific_fraction": specific / total}


def _fit_segmenter(model: SegModel, pools, config: TrainConfig, prior: AEModel | None,
                   history: list, phase: str) -> SegModel:
    weights = config.effective_weights()
    contrastive = config.contrastive or "msc"
    fingerprint = prior.frozen_fingerprint if prior is not None else None
    sched = config.seg
    multi = len(pools) > 1
    mode = BatchMode.SHARED_SPLIT if multi else BatchMode.SINGLE_DOMAIN
    sampler = BatchSampler(pools, sched.batch_size, mode, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=sched.lr)
    layout = model.layout
    model.train()
    step = 0
    for epoch in range(sched.epochs):
        for b, batch in enumerate(sampler.epoch(epoch)):
            groups = batch.by_domain()
            ks = sorted(groups)
            data = {k: _batch_tensors(groups[k], (config.seed, 2, epoch, b, k), config.augment, torch.float32)
                    for k in ks}
            preds, targets, taps = {}, {}, []
            if layout.shared:
                out = model(torch.cat([data[k][0] for k in ks]), ks[0])
                start = 0
                for k in ks:
                    n = len(data[k][0])
                    preds[k] = out.probs[start:start + n]
                    targets[k] = layout.to_model_target(k, data[k][1])
                    start += n
            else:
                for k in ks:
                    out = model(data[k][0], k)
                    preds[k], targets[k] = out.probs, data[k][1]
                    taps.append(out.embeddings)
            emb = MultiScaleEmbedding.from_taps(taps, ks) if taps and config.contrastive else None
            terms = seg_objective_terms(preds, targets, emb, prior, weights, contrastive, fingerprint)
            _check_finite(terms, f"{phase} epoch {epoch} step {step}")
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            history.append(_row(phase, epoch, step, terms))
            step += 1
        log.info("%s epoch %d: loss %.4f", phase, epoch, history[-1]["total"] if history else float("nan"))
    return model


def _transfer_init(target: SegModel, source: SegModel) -> None:
    """Copy every tensor whose name and shape match; mismatched heads keep their init."""
    src = source.state_dict()
    state = target.state_dict()
    for name, t in state.items():
        if name in src and src[name].shape == t.shape:
            state[name] = src[name].clone()
    target.load_state_dict(state)


def train_segmenter(datasets, config: TrainConfig, prior: AEModel | None = None,
                    pools: Mapping[int, Sequence[SlicePair]] | None = None) -> SegmenterBundle:
    pools = pools if pools is not None else prepare_pools(datasets, config.resolution)
    config.validate(len(pools))
    if config.mjap:
        if prior is None:
            raise PriorError("the anatomical prior term needs a trained auto-encoder")
        prior.check_frozen()
        if prior.layout.strategy != config.prior_strategy:
            raise PriorError(f"{config.strategy} strategy needs a {config.prior_strategy} auto-encoder")
    else:
        prior = None
    fingerprint = prior.frozen_fingerprint if prior is not None else None
    classes = _domain_classes(pools)
    history: list[dict] = []
    configure_determinism(config.seed)
    models: dict[int, SegModel] = {}
    if config.strategy in ("dsl", "shared"):
        model = SegModel(config.arch, classes, config.model_strategy)
        _fit_segmenter(model, pools, config, prior, history, "seg")
        models = {k: model for k in classes}
    elif config.strategy == "individual":
        for k in classes:
            torch.manual_seed(config.seed + 1000 * (k + 1))
            model = SegModel(config.arch, {k: classes[k]}, "individual")
            models[k] = _fit_segmenter(model, {k: pools[k]}, config, prior, history, f"seg:d{k}")
    else:
        src = int(config.source_domain)
        if src not in classes:
            raise ValueError(f"source domain {src} not in datasets")
        source = SegModel(config.arch, {src: classes[src]}, "individual")
        _fit_segmenter(source, {src: pools[src]}, config, prior, history, f"seg:source{src}")
        for k in classes:
            if k == src:
                continue
            torch.manual_seed(config.seed + 1000 * (k + 1))
            model = SegModel(config.arch, {k: classes[k]}, "individual")
            _transfer_init(model, source)
            models[k] = _fit_segmenter(model, {k: pools[k]}, config, prior, history, f"seg:d{k}")
    if prior is not None:
        prior.check_frozen(fingerprint)
    for m in models.values():
        m.eval()
    return SegmenterBundle(config.strategy, models, history, fingerprint)


# ----------------------------------------------------------------- evaluation

@torch.no_grad()
def predict_volume(model: SegModel, volume: LabeledVolume, domain: int, resolution,
                   batch_size: int = 16) -> tuple[np.ndarray, np.ndarray | None, list[np.ndarray]]:
    """Eval-mode slice-wise prediction.

    Returns local-label-space probabilities (Z, C_k, H, W), the union-space
    argmax for shared models (else None) and the highest-resolution
    attention map per slice batch.
    """
    model.eval()
    slices = prepare_slices([volume], resolution)
    dtype = next(model.parameters()).dtype
    probs, union_labels, attention = [], [], []
    for start in range(0, len(slices), batch_size):
        chunk = slices[start:start + batch_size]
        x = torch.as_tensor(np.stack([s.image for s in chunk]), dtype=dtype)[:, None]
        out = model(x, domain)
        p = out.probs
        if model.layout.shared:
            union_labels.append(p.argmax(1).numpy())
            p = model.layout.local_probs(domain, p)
        probs.append(p.numpy())
        if out.attention:
            attention.append(out.attention[-1][:, 0].numpy())
    union = np.concatenate(union_labels) if union_labels else None
    return np.concatenate(probs), union, attention


def _slice_scores(gt: np.ndarray, pred: np.ndarray, n_classes: int) -> list[dict]:
    """Per-slice mean Dice/sensitivity/specificity over structures present in the slice."""
    rows = []
    for z in range(gt.shape[0]):
        present = [c for c in range(1, n_classes) if (gt[z] == c).any()]
        if not present:
            continue
        d = [evalkit.dice(gt[z] == c, pred[z] == c) for c in present]
        se = [evalkit.sensitivity(gt[z] == c, pred[z] == c) for c in present]
        sp = [evalkit.specificity(gt[z] == c, pred[z] == c) for c in present]
        rows.append({"slice": z, "dice": float(np.mean(d)), "sensitivity": float(np.mean(se)),
                     "specificity": float(np.mean(sp))})
    return rows


def evaluate_volume(model: SegModel, volume: LabeledVolume, resolution) -> evalkit.MetricReport:
    k = volume.domain_id
    if k not in model.domain_ids:
        raise ValueError(f"model has no head for domain {k}")
    probs, union, _ = predict_volume(model, volume, k, resolution)
    labels = None
    foreign = 0.0
    if union is not None:
        labels = model.layout.local_labels(k, union)
        foreign = float(((union > 0) & (labels == 0)).mean() * 100.0)
    result = evalkit.postprocess(probs, labels)
    gt = resize_labels(volume.labels, resolution)
    zs, ys, xs = volume.spacing_mm
    spacing = (zs, ys * volume.labels.shape[1] / resolution[0], xs * volume.labels.shape[2] / resolution[1])
    names = volume.label_names or tuple(f"class{c}" for c in range(probs.shape[1]))
    report = evalkit.evaluate_labels(gt, result.labels, spacing, names, volume.name, k)
    report.extra = {"empty_structures": result.empty_structures, "foreign_voxel_percent": foreign,
                    "slice_scores": _slice_scores(gt, result.labels, len(names))}
    return report


def evaluate_fold(bundle: SegmenterBundle, test_volumes: Mapping[int, Sequence[LabeledVolume]],
                  resolution) -> list[evalkit.MetricReport]:
    reports = []
    for k in sorted(test_volumes):
        if k not in bundle.models:
            raise ValueError(f"no model serves domain {k}")
        for v in test_volumes[k]:
            reports.append(evaluate_volume(bundle.models[k], v, resolution))
    return reports


# ------------------------------------------------------------- leave-one-out

@dataclass
class Fold:
    index: int
    test: dict[int, int]
    validation: dict[int, int]
    train: dict[int, list[int]]


def plan_folds(sizes: Mapping[int, int]) -> list[Fold]:
    """One fold per volume of the smallest dataset; fold i tests volume i of every domain."""
    if not sizes:
        raise ValueError("no datasets")
    small = {k: n for k, n in sizes.items() if n < 3}
    if small:
        raise ValueError(f"leave-one-out needs >= 3 volumes per domain, got {small}")
    n_folds = min(sizes.values())
    folds = []
    for i in range(n_folds):
        test = {k: i for k in sizes}
        val = {k: (i + 1) % n for k, n in sizes.items()}
        train = {k: [j for j in range(n) if j not in (test[k], val[k])] for k, n in sizes.items()}
        folds.append(Fold(i, test, val, train))
    return folds


@dataclass
class ExperimentReport:
    strategy: str
    folds: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def volume_reports(self) -> list[dict]:
        return [r for f in self.folds for r in f["reports"]]

    def aggregate(self) -> dict:
        out = {}
        by_domain: dict[int, list[dict]] = {}
        for r in self.volume_reports():
            by_domain.setdefault(r["domain_id"], []).append(r["mean"])
        for k, means in sorted(by_domain.items()):
            out[str(k)] = {}
            for m in evalkit.METRICS:
                vals = [x[m] for x in means if x[m] is not None]
                out[str(k)][m] = {"mean": float(np.mean(vals)) if vals else None,
                                  "std": float(np.std(vals)) if vals else None, "n": len(vals)}
        all_dice = [r["mean"]["dice"] for r in self.volume_reports() if r["mean"]["dice"] is not None]
        out["overall_dice"] = float(np.mean(all_dice)) if all_dice else None
        return out

    def as_dict(self) -> dict:
        return {"strategy": self.strategy, "folds": self.folds, "aggregate": self.aggregate()}


def leave_one_out(datasets: Mapping[int, Sequence[LabeledVolume]], config: TrainConfig,
                  max_folds: int | None = None, on_fold: Callable | None = None) -> ExperimentReport:
    """Train and test per fold; the smallest dataset sets the number of folds."""
    config.validate(len(datasets))
    folds = plan_folds({k: len(v) for k, v in datasets.items()})
    if max_folds is not None:
        folds = folds[:max_folds]
    report = ExperimentReport(config.strategy)
    for fold in folds:
        train = {k: [datasets[k][j] for j in fold.train[k]] for k in sorted(datasets)}
        test = {k: [datasets[k][fold.test[k]]] for k in sorted(datasets)}
        if config.strategy == "transfer":
            test.pop(int(config.source_domain), None)
        pools = prepare_pools(train, config.resolution)
        prior = None
        if config.mjap:
            prior_history: list[dict] = []
            prior = train_autoencoder(None, config, prior_history, pools=pools)
            report.history.extend({**r, "fold": fold.index} for r in prior_history)
        bundle = train_segmenter(None, config, prior, pools=pools)
        report.history.extend({**r, "fold": fold.index} for r in bundle.history)
        reports = evaluate_fold(bundle, test, config.resolution)
        report.folds.append({
            "fold": fold.index,
            "split": {"test": {str(k): datasets[k][fold.test[k]].name for k in sorted(datasets)},
                      "validation": {str(k): datasets[k][fold.validation[k]].name for k in sorted(datasets)},
                      "train": {str(k): [datasets[k][j].name for j in fold.train[k]] for k in sorted(datasets)}},
            "parameters": bundle.parameter_report(),
            "reports": [r.as_dict() for r in reports],
        })
        if on_fold is not None:
            on_fold(fold, bundle, prior)
    return report


def moving_average_nonincreasing(values: Sequence[float], window: int = 5) -> bool:
    """Loose sanity check that a loss curve trends downwards."""
    if len(values) < 2 * window:
        return True
    ma = np.convolve(np.asarray(values, dtype=float), np.ones(window) / window, mode="valid")
    return bool(ma[-1] <= ma[0])


# ---------------------------------------------------------------- checkpoints

def save_model(model: SegModel | AEModel, directory, extra: Mapping | None = None):
    """Raw-blob checkpoint: one tensor file per state entry plus a JSON manifest."""
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    manifest = {
        "kind": "prior" if isinstance(model, AEModel) else "seg",
        "arch": model.arch.to_dict(),
        "layout": model.layout.to_dict(),
        "frozen_fingerprint": getattr(model, "frozen_fingerprint", None),
        **dict(extra or {}),
    }
    return io.save_tensors(directory, tensors, manifest)


def load_model(directory) -> tuple[SegModel | AEModel, dict]:
    manifest, tensors = io.load_tensors(directory)
    arch = ArchConfig.from_dict(manifest["arch"])
    classes = {int(k): v for k, v in manifest["layout"]["domain_classes"].items()}
    cls = AEModel if manifest["kind"] == "prior" else SegModel
    model = cls(arch, classes, manifest["layout"]["strategy"])
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint {directory} lacks {sorted(missing)[:3]}")
    model.load_state_dict({k: torch.as_tensor(tensors[k]).to(state[k].dtype) for k in state})
    model.eval()
    if manifest["kind"] == "prior":
        fp = manifest.get("frozen_fingerprint")
        model.freeze()
        if fp is not None and model.frozen_fingerprint != fp:
            raise PriorError(f"checkpoint {directory}: encoder weights do not match the recorded fingerprint")
    return model, manifest
