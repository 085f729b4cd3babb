"""Run orchestration: datasets, models, and the train/eval/ablate/sweep flows.

Everything here is shared by the command-line client and the HTTP service.
Each run writes its artifacts (checkpoints, CSV curves, JSON summaries) into
an output directory and finishes with an atomically written manifest.
"""

from __future__ import annotations

import json
import os
import subprocess
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .bioeval import build_verification_pairs, identification_run, roc_eer_auc
from .config import ConfigError, RunConfig, config_to_dict
from .data import Dataset, DatasetError, load_embeddings, load_image_dir, split_classes
from .encoder import encoder_preset
from .graphs import EpisodeSpec
from .model import ModelConfig, ProtoModel
from .numerics import CheckpointError, load_tensors, save_tensors
from .pgnn import PGNNConfig, pgnn_preset_dims
from .protoloss import PrototypeRegistry
from .synthetic import SyntheticSpec, generate_synthetic, write_image_dir
from .trainer import TrainConfig, evaluate_episodic, evaluate_overall, train

__all__ = [
    "ABLATION_VARIANTS",
    "build_dataset",
    "build_model",
    "run_train",
    "run_eval",
    "run_ablate",
    "run_sweep_lambda",
    "run_gen_synthetic",
]

ABLATION_VARIANTS = ("single_impression", "no_cross_graph", "query_alignment",
                     "no_prototype_node")

CHECKPOINT_FINAL = "model_final.ckpt"
CHECKPOINT_BEST = "model_best.ckpt"


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_json(path: str, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class _Manifest:
    def __init__(self, cfg: RunConfig, command: str):
        self.started = time.time()
        self.data = {
            "command": command,
            "config": config_to_dict(cfg),
            "seed": cfg.seed,
            "source_revision": _source_revision(),
            "package_version": __version__,
            "outputs": [],
            "phases": {},
        }

    def phase(self, name: str, status: str) -> None:
        self.data["phases"][name] = status

    def add_output(self, path: str) -> None:
        self.data["outputs"].append(os.path.basename(path))

    def finish(self, out_dir: str) -> None:
        self.data["wall_clock_seconds"] = round(time.time() - self.started, 3)
        _write_json(os.path.join(out_dir, "manifest.json"), self.data)


def build_dataset(cfg: RunConfig) -> Dataset:
    """Materialize the configured data source; exactly one must be set."""
    if cfg.synthetic:
        c, i = cfg.synthetic_shape()
        hw = encoder_preset(cfg.preset).input_hw
        spec = SyntheticSpec(num_classes=c, impressions_per_class=i, image_hw=hw,
                             noise_sigma=cfg.synthetic_noise,
                             max_shift=cfg.synthetic_shift, seed=cfg.seed)
        return generate_synthetic(spec)
    if cfg.images_dir:
        return load_image_dir(cfg.images_dir)
    if cfg.embeddings_csv:
        return load_embeddings(cfg.embeddings_csv)
    raise DatasetError(
        "no data source configured: set images_dir, embeddings_csv or synthetic")


def _episode_spec(cfg: RunConfig) -> EpisodeSpec:
    return EpisodeSpec(cfg.ways, cfg.graphs_per_class, cfg.images_per_graph,
                       cfg.query_graphs)


def build_model(cfg: RunConfig, dataset: Dataset,
                variant: str | None = None) -> ProtoModel:
    """Assemble the model for a run, applying an ablation variant if given."""
    dims = pgnn_preset_dims(cfg.preset)
    if dataset.kind == "embeddings":
        encoder = None
        dims = (dataset.dim,) + dims[1:]
    else:
        encoder = encoder_preset(cfg.preset)
    pgnn = PGNNConfig(
        layer_dims=dims,
        align_strength=cfg.align_strength,
        projection_head=cfg.projection_head,
        no_cross_graph_alignment=(variant == "no_cross_graph"),
        no_prototype_node=(variant == "no_prototype_node"),
        query_alignment_enabled=(variant == "query_alignment"),
    )
    mcfg = ModelConfig(pgnn=pgnn, encoder=encoder,
                       single_impression=(variant == "single_impression"))
    return ProtoModel(mcfg, seed=cfg.seed)


def _variant_config(cfg: RunConfig, variant: str | None) -> RunConfig:
    if variant == "single_impression":
        return replace(cfg, graphs_per_class=1, images_per_graph=1)
    return cfg


def _train_once(cfg: RunConfig, dataset: Dataset, variant: str | None = None,
                ) -> tuple[ProtoModel, PrototypeRegistry, "TrainReportBundle"]:
    cfg = _variant_config(cfg, variant)
    splits = split_classes(dataset, cfg.seed,
                           (cfg.split_train, cfg.split_val, cfg.split_test))
    spec = _episode_spec(cfg)
    if len(splits["train"]) < spec.ways:
        raise DatasetError(
            f"training split has {len(splits['train'])} classes but episodes "
            f"need {spec.ways}")
    model = build_model(cfg, dataset, variant)
    tcfg = TrainConfig(
        epochs=cfg.epochs, episodes_per_epoch=cfg.episodes_per_epoch,
        episode_spec=spec, lambda_loss=cfg.lambda_loss, lr=cfg.lr,
        seed=cfg.seed, registry_momentum=cfg.registry_momentum,
        val_episodes=cfg.val_episodes, augment=cfg.augment)
    report, registry, best_state = train(model, dataset, splits["train"], tcfg,
                                         val_classes=splits["val"])
    return model, registry, TrainReportBundle(report, best_state, splits, cfg)


class TrainReportBundle:
    def __init__(self, report, best_state, splits, cfg):
        self.report = report
        self.best_state = best_state
        self.splits = splits
        self.cfg = cfg


def _checkpoint_meta(cfg: RunConfig, variant: str | None) -> dict:
    return {
        "format": 1,
        "preset": cfg.preset,
        "seed": cfg.seed,
        "lambda_loss": cfg.lambda_loss,
        "align_strength": cfg.align_strength,
        "projection_head": cfg.projection_head,
        "variant": variant or "full",
        "embeddings_source": bool(cfg.embeddings_csv),
    }


def _save_model(path: str, model: ProtoModel, registry: PrototypeRegistry,
                meta: dict, state: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(state) if state is not None else model.state_tensors()
    tensors.update(registry.to_tensors())
    save_tensors(path, tensors, meta=meta)


def load_model(cfg: RunConfig, dataset: Dataset,
               checkpoint_path: str) -> tuple[ProtoModel, PrototypeRegistry, dict]:
    """Rebuild a model+registry from a checkpoint, validating dimensions."""
    try:
        tensors, meta = load_tensors(checkpoint_path)
    except FileNotFoundError:
        raise DatasetError(f"checkpoint not found: {checkpoint_path}")
    except CheckpointError as exc:
        raise ConfigError(str(exc))
    variant = meta.get("variant", "full")
    model = build_model(cfg, dataset, None if variant == "full" else variant)
    model_state = {k: v for k, v in tensors.items() if not k.startswith("registry.")}
    try:
        model.load_state_tensors(model_state)
    except ValueError as exc:
        raise ConfigError(f"{checkpoint_path}: {exc}")
    registry = PrototypeRegistry.from_tensors(tensors, cfg.registry_momentum)
    return model, registry, meta


def run_train(cfg: RunConfig, variant: str | None = None) -> dict:
    """Train, checkpoint, and report; returns the JSON-able run summary."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = _Manifest(cfg, "train" if variant is None else f"train[{variant}]")
    dataset = build_dataset(cfg)
    manifest.phase("dataset", f"ok:{dataset.num_classes} classes")
    model, registry, bundle = _train_once(cfg, dataset, variant)
    manifest.phase("train", "ok")
    meta = _checkpoint_meta(bundle.cfg, variant)
    final_path = os.path.join(cfg.out_dir, CHECKPOINT_FINAL)
    best_path = os.path.join(cfg.out_dir, CHECKPOINT_BEST)
    _save_model(final_path, model, registry, meta)
    _save_model(best_path, model, registry, meta, state=bundle.best_state)
    report_csv = os.path.join(cfg.out_dir, "train_report.csv")
    _write_text(report_csv, bundle.report.to_csv())
    summary = bundle.report.summary()
    summary["splits"] = bundle.splits
    summary_path = os.path.join(cfg.out_dir, "train_summary.json")
    _write_json(summary_path, summary)
    for p in (final_path, best_path, report_csv, summary_path):
        manifest.add_output(p)
    manifest.finish(cfg.out_dir)
    return {"summary": summary,
            "files": {"checkpoint_final": final_path, "checkpoint_best": best_path,
                      "train_report": report_csv, "train_summary": summary_path}}


EVAL_MODES = ("episodic", "overall", "identify", "verify", "biometric")


def run_eval(cfg: RunConfig, checkpoint_path: str, mode: str) -> dict:
    """Evaluate a checkpoint.

    Episodic accuracy is measured on the held-out class split; the
    closed-set protocols (overall, identify, verify, biometric) enroll
    every identity in the dataset and hold out impressions instead.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; choose from {EVAL_MODES}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = _Manifest(cfg, f"eval[{mode}]")
    dataset = build_dataset(cfg)
    cfg_v = cfg
    model, registry, meta = load_model(cfg, dataset, checkpoint_path)
    if meta.get("variant", "full") == "single_impression":
        cfg_v = _variant_config(cfg, "single_impression")
    splits = split_classes(dataset, cfg.seed,
                           (cfg.split_train, cfg.split_val, cfg.split_test))
    eval_classes = splits["eval"]
    bio_classes = sorted(dataset.class_ids())
    summary: dict[str, float] = {}
    files: dict[str, str] = {}
    k, n = cfg_v.graphs_per_class, cfg_v.images_per_graph
    if mode == "episodic":
        spec = _episode_spec(cfg_v)
        if len(eval_classes) < spec.ways:
            raise DatasetError(
                f"eval split has {len(eval_classes)} classes, episodes need {spec.ways}")
        acc = evaluate_episodic(model, dataset, eval_classes, spec,
                                cfg.eval_episodes, seed_key=(cfg.seed, 0xEA1))
        summary["episodic_acc"] = acc
    if mode == "overall":
        summary["overall_acc"] = evaluate_overall(model, dataset, bio_classes,
                                                  k, n, cfg.seed)
    if mode in ("identify", "biometric"):
        curve, rank1 = identification_run(model, dataset, bio_classes, k, n, cfg.seed)
        cmc_path = os.path.join(cfg.out_dir, "cmc.csv")
        _write_text(cmc_path, curve.to_csv("rank", "accuracy"))
        files["cmc"] = cmc_path
        manifest.add_output(cmc_path)
        summary.update(curve.summary)
    if mode in ("verify", "biometric"):
        scores = build_verification_pairs(model, dataset, bio_classes, k, n,
                                          cfg.pairs_per_kind, cfg.seed,
                                          sigma_frac=cfg.backfill_sigma)
        curve = roc_eer_auc(scores)
        roc_path = os.path.join(cfg.out_dir, "roc.csv")
        _write_text(roc_path, curve.to_csv("far", "tpr"))
        files["roc"] = roc_path
        manifest.add_output(roc_path)
        summary.update(curve.summary)
    summary_path = os.path.join(cfg.out_dir, f"{mode}_summary.json")
    _write_json(summary_path, summary)
    files["summary"] = summary_path
    manifest.add_output(summary_path)
    manifest.phase("eval", "ok")
    manifest.finish(cfg.out_dir)
    return {"summary": summary, "files": files, "registry_classes": len(registry)}


def _rank1_eer(cfg: RunConfig, dataset: Dataset, model: ProtoModel,
               eval_classes: list[str]) -> tuple[float, float, float]:
    k, n = cfg.graphs_per_class, cfg.images_per_graph
    curve, rank1 = identification_run(model, dataset, eval_classes, k, n, cfg.seed)
    scores = build_verification_pairs(model, dataset, eval_classes, k, n,
                                      cfg.pairs_per_kind, cfg.seed,
                                      sigma_frac=cfg.backfill_sigma)
    roc = roc_eer_auc(scores)
    rank5 = curve.summary["rank5"]
    return rank1, rank5, roc.summary["eer"]


def run_ablate(cfg: RunConfig, variant: str) -> dict:
    """Train the full model and one variant under the same seed; compare."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(
            f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = _Manifest(cfg, f"ablate[{variant}]")
    dataset = build_dataset(cfg)
    rows = []
    for name in ("full", variant):
        v = None if name == "full" else name
        model, registry, bundle = _train_once(cfg, dataset, v)
        rank1, rank5, eer = _rank1_eer(bundle.cfg, dataset, model,
                                       sorted(dataset.class_ids()))
        rows.append({"variant": name, "rank1": rank1, "rank5": rank5, "eer": eer})
        manifest.phase(f"train[{name}]", "ok")
    csv_lines = ["variant,rank1,rank5,eer"]
    for r in rows:
        csv_lines.append(f"{r['variant']},{r['rank1']!r},{r['rank5']!r},{r['eer']!r}")
    table_path = os.path.join(cfg.out_dir, "ablate_report.csv")
    _write_text(table_path, "\n".join(csv_lines) + "\n")
    json_path = os.path.join(cfg.out_dir, "ablate_report.json")
    _write_json(json_path, {"rows": rows})
    manifest.add_output(table_path)
    manifest.add_output(json_path)
    manifest.finish(cfg.out_dir)
    return {"rows": rows, "files": {"table": table_path, "json": json_path}}


def run_sweep_lambda(cfg: RunConfig, lambdas: list[float]) -> dict:
    """One training + overall evaluation per loss weight, shared seed."""
    if not lambdas:
        raise ConfigError("sweep needs at least one lambda value")
    if len(set(lambdas)) != len(lambdas):
        raise ConfigError(f"duplicate lambda values in {lambdas}")
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = _Manifest(cfg, "sweep-lambda")
    dataset = build_dataset(cfg)
    rows = []
    for lam in lambdas:
        sub = replace(cfg, lambda_loss=lam)
        model, registry, bundle = _train_once(sub, dataset)
        k, n = sub.graphs_per_class, sub.images_per_graph
        overall_acc = evaluate_overall(model, dataset, sorted(dataset.class_ids()),
                                       k, n, sub.seed)
        rows.append({"lambda": lam, "overall_acc": overall_acc})
        ckpt = os.path.join(cfg.out_dir, f"model_lambda_{lam!r}.ckpt")
        _save_model(ckpt, model, registry, _checkpoint_meta(sub, None))
        manifest.add_output(ckpt)
        manifest.phase(f"lambda[{lam!r}]", "ok")
    csv_lines = ["lambda,overall_acc"]
    for r in rows:
        csv_lines.append(f"{r['lambda']!r},{r['overall_acc']!r}")
    sweep_path = os.path.join(cfg.out_dir, "sweep_lambda.csv")
    _write_text(sweep_path, "\n".join(csv_lines) + "\n")
    manifest.add_output(sweep_path)
    manifest.finish(cfg.out_dir)
    return {"rows": rows, "files": {"csv": sweep_path}}


def run_gen_synthetic(cfg: RunConfig, kind: str = "images") -> dict:
    """Write a synthetic dataset to out_dir (image tree or embedding CSV)."""
    if not cfg.synthetic:
        raise ConfigError("gen-synthetic requires the synthetic size (CxI)")
    if kind not in ("images", "embeddings"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    c, i = cfg.synthetic_shape()
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = _Manifest(cfg, "gen-synthetic")
    hw = encoder_preset(cfg.preset).input_hw
    dims = pgnn_preset_dims(cfg.preset)
    spec = SyntheticSpec(num_classes=c, impressions_per_class=i, image_hw=hw,
                         noise_sigma=cfg.synthetic_noise, max_shift=cfg.synthetic_shift,
                         seed=cfg.seed, kind=kind, embed_dim=dims[0])
    dataset = generate_synthetic(spec)
    if kind == "images":
        target = os.path.join(cfg.out_dir, "synthetic_images")
        write_image_dir(dataset, target)
    else:
        from .data import save_embeddings
        target = os.path.join(cfg.out_dir, "synthetic_embeddings.csv")
        save_embeddings(target, dataset)
    manifest.add_output(target)
    manifest.phase("generate", "ok")
    manifest.finish(cfg.out_dir)
    return {"path": target, "classes": c, "impressions_per_class": i,
            "kind": kind}
