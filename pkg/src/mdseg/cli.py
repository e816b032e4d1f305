"""Command-line entry point: gen-data, train-prior, train-seg, evaluate, analyze-reps."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import subprocess
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import config as cfgmod
from . import evalkit, io, plotting, represent, trainer
from .config import ConfigError, ExperimentConfig
from .losses import MultiScaleEmbedding
from .priornet import PriorError
from .synthgen import generate_dataset

log = logging.getLogger("mdseg")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_STRICT = 0, 1, 2, 3

LOSS_FIELDS = ["phase", "fold", "epoch", "step", "L_CE", "L_MSC", "L_MJAP", "total"]


class StrictModeFailure(RuntimeError):
    pass


# ------------------------------------------------------------------- helpers

def write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return path


def _dump_report(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _domain_dir(spec) -> str:
    return f"d{spec.domain_id}_{spec.name}" if spec.name else f"d{spec.domain_id}"


def _snapshot(cfg: ExperimentConfig, run_dir: Path) -> None:
    cfgmod.dump(cfg, run_dir / "config.yaml")


# ------------------------------------------------------------------ datasets

def gen_data(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = cfg.data_dir
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        manifest = out / "manifest.json"
        if not manifest.exists():
            raise ConfigError(f"{out} does not look like a generated dataset; refusing to overwrite")
        for spec in json.loads(manifest.read_text())["domains"]:
            shutil.rmtree(out / spec["dir"], ignore_errors=True)
        manifest.unlink()
    out.mkdir(parents=True, exist_ok=True)
    entries, domains = [], []
    for spec in cfg.data.domains:
        sub = _domain_dir(spec)
        vols = generate_dataset(spec, cfg.data.volumes_per_domain, cfg.data.volume_shape, cfg.seed,
                                cfg.data.spacing_mm)
        for v in vols:
            header = io.save_mdvol(v, out / sub / f"{v.name}.json")
            payloads = io.read_mdvol_header(header)["payloads"]
            entries.append({"domain_id": spec.domain_id, "name": v.name,
                            "header": str(header.relative_to(out)),
                            "sha256": {k: io.sha256_file(header.parent / p["file"]) for k, p in payloads.items()}})
        domains.append({**spec.to_dict(), "dir": sub})
    manifest = {"seed": cfg.seed, "volume_shape": list(cfg.data.volume_shape),
                "spacing_mm": list(cfg.data.spacing_mm), "domains": domains, "volumes": entries}
    io.dump_json(out / "manifest.json", manifest)
    log.info("wrote %d volumes to %s", len(entries), out)
    return out / "manifest.json"


def load_datasets(cfg: ExperimentConfig, verify: bool = True) -> dict[int, list]:
    out = cfg.data_dir
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest at {manifest_path}; run gen-data first")
    manifest = json.loads(manifest_path.read_text())
    data: dict[int, list] = {}
    for e in manifest["volumes"]:
        header = out / e["header"]
        if verify:
            payloads = io.read_mdvol_header(header)["payloads"]
            for k, p in payloads.items():
                if io.sha256_file(header.parent / p["file"]) != e["sha256"][k]:
                    raise RuntimeError(f"checksum mismatch for {header} ({k})")
        data.setdefault(int(e["domain_id"]), []).append(io.load_mdvol(header))
    return {k: data[k] for k in sorted(data)}


def fixed_split(cfg: ExperimentConfig, datasets) -> trainer.Fold:
    folds = trainer.plan_folds({k: len(v) for k, v in datasets.items()})
    if not 0 <= cfg.evaluation.fold < len(folds):
        raise ConfigError(f"fold {cfg.evaluation.fold} outside 0..{len(folds) - 1}")
    return folds[cfg.evaluation.fold]


def _subset(datasets, idx: dict[int, list[int]]):
    return {k: [datasets[k][j] for j in idx[k]] for k in sorted(datasets)}


# ------------------------------------------------------------------ training

def train_prior(cfg: ExperimentConfig) -> Path:
    run = cfg.run_dir
    datasets = load_datasets(cfg)
    fold = fixed_split(cfg, datasets)
    history: list[dict] = []
    tc = cfg.train
    model = trainer.train_autoencoder(_subset(datasets, fold.train), tc, history)
    ckpt = run / "checkpoints" / "prior"
    trainer.save_model(model, ckpt, {"fold": fold.index, "seed": tc.seed})
    write_csv(run / "logs" / "losses_prior.csv", history, LOSS_FIELDS)
    plotting.plot_losses(history, run / "figures" / "losses_prior.png", "auto-encoder")
    _snapshot(cfg, run)
    log.info("prior fingerprint %s", model.frozen_fingerprint)
    return ckpt


def _prior_path(cfg: ExperimentConfig) -> Path:
    return cfg.resolve(cfg.prior_checkpoint) if cfg.prior_checkpoint else cfg.run_dir / "checkpoints" / "prior"


def load_prior(cfg: ExperimentConfig):
    path = _prior_path(cfg)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"the anatomical prior term needs a prior checkpoint; none at {path}")
    model, _ = trainer.load_model(path)
    return model


def train_seg(cfg: ExperimentConfig) -> Path:
    run = cfg.run_dir
    datasets = load_datasets(cfg)
    fold = fixed_split(cfg, datasets)
    tc = cfg.train
    prior = load_prior(cfg) if tc.mjap else None
    fingerprint = prior.frozen_fingerprint if prior is not None else None
    bundle = trainer.train_segmenter(_subset(datasets, fold.train), tc, prior)
    if prior is not None:
        prior.check_frozen(fingerprint)
    ckroot = run / "checkpoints"
    unique = bundle.unique_models()
    for m in unique:
        name = "seg" if len(unique) == 1 else f"seg_d{m.domain_ids[0]}"
        trainer.save_model(m, ckroot / name, {"strategy": tc.strategy, "prior_fingerprint": fingerprint,
                                               "fold": fold.index})
    write_csv(run / "logs" / "losses.csv", bundle.history, LOSS_FIELDS)
    _dump_report(run / "logs" / "parameters.json", bundle.parameter_report())
    plotting.plot_losses(bundle.history, run / "figures" / "losses.png", f"segmenter ({tc.strategy})")
    _snapshot(cfg, run)
    return ckroot


def load_segmenters(cfg: ExperimentConfig) -> dict[int, object]:
    ckroot = cfg.run_dir / "checkpoints"
    dirs = sorted(p for p in ckroot.glob("seg*") if (p / "manifest.json").exists()) if ckroot.exists() else []
    if not dirs:
        raise ConfigError(f"no segmentation checkpoints under {ckroot}; run train-seg first")
    models = {}
    for d in dirs:
        m, _ = trainer.load_model(d)
        for k in m.domain_ids:
            models[k] = m
    return models


def run_ablation_grid(cfg: ExperimentConfig, config_path: str | None, overrides: Sequence[str], jobs: int) -> list[Path]:
    """Four sibling runs that differ only in regularizer flags."""
    grid = trainer.ablation_configs(cfg.train)
    runs = []
    commands = []
    for name, tc in grid.items():
        sub = cfg.run_dir / name.replace("+", "_")
        runs.append(sub)
        extra = [f"output_dir={sub}", f"train.msc={str(tc.msc).lower()}", f"train.mjap={str(tc.mjap).lower()}",
                 "train.strategy=dsl", "train.ssc=false"]
        if tc.mjap and not cfg.prior_checkpoint:
            extra.append(f"prior_checkpoint={_prior_path(cfg)}")
        cmd = [sys.executable, "-m", "mdseg", "train-seg"]
        if config_path:
            cmd += ["--config", str(config_path)]
        for o in list(overrides) + extra:
            cmd += ["--set", o]
        commands.append(cmd)
    pending = list(commands)
    active: list[subprocess.Popen] = []
    failures = 0
    while pending or active:
        while pending and len(active) < max(1, jobs):
            active.append(subprocess.Popen(pending.pop(0)))
        proc = active.pop(0)
        failures += proc.wait() != 0
    if failures:
        raise RuntimeError(f"{failures} ablation runs failed")
    return runs


# ---------------------------------------------------------------- evaluation

METRIC_FIELDS = ["fold", "volume", "domain_id", "structure"] + list(evalkit.METRICS) + ["flags"]
REPORT_FIELDS = ["domain_id", "metric", "mean", "std", "n"]


def _metric_rows(report: dict) -> list[dict]:
    rows = []
    for f in report["folds"]:
        for r in f["reports"]:
            for s in r["structures"]:
                rows.append({"fold": f["fold"], "volume": r["volume"], "domain_id": r["domain_id"],
                             **{k: s[k] for k in ["structure", *evalkit.METRICS]}, "flags": ";".join(s["flags"])})
    return rows


def _summary_rows(aggregate: dict) -> list[dict]:
    rows = []
    for k in sorted(x for x in aggregate if x.isdigit()):
        for m in evalkit.METRICS:
            rows.append({"domain_id": k, "metric": m, **aggregate[k][m]})
    return rows


def _write_evaluation(run: Path, report: dict, history: Sequence[dict] = ()) -> Path:
    path = _dump_report(run / "report.json", report)
    write_csv(run / "report.csv", _summary_rows(report["aggregate"]), REPORT_FIELDS)
    write_csv(run / "logs" / "metrics.csv", _metric_rows(report), METRIC_FIELDS)
    if history:
        write_csv(run / "logs" / "losses.csv", history, LOSS_FIELDS)
    plotting.plot_dice_summary(report["aggregate"], run / "figures" / "dice.png")
    return path


def _attention_figures(models, datasets, fold, cfg: ExperimentConfig, run: Path) -> None:
    for k in sorted(models):
        m = models[k]
        if not m.arch.attention_gates:
            continue
        vol = datasets[k][fold.test[k]]
        _, _, att = trainer.predict_volume(m, vol, k, cfg.train.resolution)
        alpha = np.concatenate(att)
        z = int(np.argmax((vol.labels > 0).reshape(vol.labels.shape[0], -1).sum(1)))
        img = trainer.prepare_slices([vol], cfg.train.resolution)[z].image
        io.save_map_mdvol(alpha, run / "attention" / f"{vol.name}.json", k, vol.spacing_mm, vol.name)
        plotting.plot_attention(img, alpha[z], run / "figures" / f"attention_{vol.name}.png", f"domain {k}")


def evaluate(cfg: ExperimentConfig, loo: bool = False, strict: bool = False) -> Path:
    run = cfg.run_dir
    datasets = load_datasets(cfg)
    history: list[dict] = []
    if loo:
        exp = trainer.leave_one_out(datasets, cfg.train, cfg.evaluation.max_folds)
        history = exp.history
        report = {"protocol": "leave_one_out", **exp.as_dict()}
    else:
        models = load_segmenters(cfg)
        fold = fixed_split(cfg, datasets)
        tests = {k: [datasets[k][fold.test[k]]] for k in sorted(datasets) if k in models}
        bundle = trainer.SegmenterBundle(cfg.train.strategy, models)
        reports = trainer.evaluate_fold(bundle, tests, cfg.train.resolution)
        exp = trainer.ExperimentReport(cfg.train.strategy, [{
            "fold": fold.index,
            "split": {"test": {str(k): tests[k][0].name for k in tests}},
            "parameters": bundle.parameter_report(),
            "reports": [r.as_dict() for r in reports],
        }])
        report = {"protocol": "fixed_split", **exp.as_dict()}
        _attention_figures(models, datasets, fold, cfg, run)
    path = _write_evaluation(run, report, history)
    _snapshot(cfg, run)
    if strict:
        flagged = [r["volume"] for f in report["folds"] for r in f["reports"] if r["flagged"]]
        if flagged:
            raise StrictModeFailure(f"undefined metrics flagged for {flagged}")
    return path


def _split_embeddings(model, datasets, fold, domains, resolution, scales):
    parts = []
    for split in ("train", "validation", "test"):
        vols = []
        for k in domains:
            idx = getattr(fold, split)[k]
            vols.extend(datasets[k][j] for j in (idx if isinstance(idx, list) else [idx]))
        try:
            emb = represent.extract_embeddings(model, trainer.prepare_slices(vols, resolution), scales)
        except ValueError:
            continue
        parts.append((split, emb))
    merged = {s: torch.cat([e.scales[s] for _, e in parts]) for s in scales}
    labels = torch.cat([e.domain_labels for _, e in parts])
    splits = [name for name, e in parts for _ in range(len(e))]
    return MultiScaleEmbedding(merged, labels, splits)


def analyze_reps(cfg: ExperimentConfig) -> Path:
    run = cfg.run_dir
    datasets = load_datasets(cfg)
    fold = fixed_split(cfg, datasets)
    targets = {"seg": load_segmenters(cfg)}
    if (_prior_path(cfg) / "manifest.json").exists():
        prior = load_prior(cfg)
        targets["prior"] = {k: prior for k in prior.domain_ids}
    out = run / "reps"
    a = cfg.analysis
    sim_rows, proj_rows = [], []
    for kind, per_domain in targets.items():
        groups: dict[int, tuple] = {}
        for k, m in sorted(per_domain.items()):
            groups.setdefault(id(m), (m, []))[1].append(k)
        for m, ks in groups.values():
            if len(ks) < 2:
                log.info("%s model for domain %s serves one domain; skipped", kind, ks)
                continue
            every = list(range(1, m.arch.n_scales + 1))
            scales = [s for s in a.scales if s in every]
            emb = _split_embeddings(m, datasets, fold, ks, cfg.train.resolution, every)
            io.save_tensors(out / f"{kind}_embeddings", {f"s{s}": emb.scales[s].numpy() for s in every},
                            {"domains": emb.domain_labels.tolist(), "splits": emb.splits, "scales": every})
            rep = represent.cosine_similarity_stats(emb, a.n_pairs, cfg.seed)
            sim_rows.extend({"model": kind, **r} for r in rep.rows())
            rng = np.random.default_rng(cfg.seed)
            pick = np.sort(rng.choice(len(emb), size=min(len(emb), a.max_points), replace=False))
            labels = emb.domain_labels.numpy()[pick]
            splits = [emb.splits[i] for i in pick]
            for s in scales:
                coords = represent.project_2d(emb.scales[s].numpy()[pick], a.perplexity, a.learning_rate, cfg.seed)
                proj_rows.extend({"model": kind, "scale": s, "x": float(x), "y": float(y), "domain": int(d),
                                  "split": sp} for (x, y), d, sp in zip(coords, labels, splits))
                plotting.plot_embedding_2d(coords, labels, run / "figures" / f"tsne_{kind}_s{s}.png",
                                           f"{kind} s{s}")
                plotting.plot_similarity(rep.mean[s], rep.domains, run / "figures" / f"similarity_{kind}_s{s}.png",
                                         f"{kind} s{s}")
    write_csv(out / "similarity.csv", sim_rows,
              ["model", "scale", "domain_a", "domain_b", "kind", "mean", "std", "n_pairs"])
    write_csv(out / "projection.csv", proj_rows, ["model", "scale", "x", "y", "domain", "split"])
    return out / "similarity.csv"


# ----------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", help="experiment YAML file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.seg.epochs=2")
        return sp

    add("gen-data", "generate the synthetic multi-domain dataset").add_argument("--force", action="store_true")
    add("train-prior", "train and freeze the multi-joint auto-encoder")
    sp = add("train-seg", "train the segmentation network")
    sp.add_argument("--ablation-grid", action="store_true", help="run dsl, +msc, +mjap and +msc+mjap siblings")
    sp.add_argument("--jobs", type=int, default=1)
    sp = add("evaluate", "evaluate trained models and write report.json / report.csv")
    sp.add_argument("--loo", action="store_true", help="run the full leave-one-out protocol")
    sp.add_argument("--strict", action="store_true", help="exit 3 when any metric is undefined")
    add("analyze-reps", "cosine-similarity and t-SNE analysis of the learnt representations")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.set)
        if args.command == "gen-data":
            gen_data(cfg, args.force)
        elif args.command == "train-prior":
            train_prior(cfg)
        elif args.command == "train-seg":
            if args.ablation_grid:
                run_ablation_grid(cfg, args.config, args.set, args.jobs)
            else:
                train_seg(cfg)
        elif args.command == "evaluate":
            print(evaluate(cfg, args.loo, args.strict))
        elif args.command == "analyze-reps":
            print(analyze_reps(cfg))
    except StrictModeFailure as e:
        print(f"strict mode: {e}", file=sys.stderr)
        return EXIT_STRICT
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PriorError, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
