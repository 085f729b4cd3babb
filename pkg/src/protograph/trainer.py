"""Episodic training loop with validation-based model selection.

One episode: sample -> encode -> build graphs -> refine -> hybrid loss ->
backward -> Adam step -> registry update.  Everything is driven by seeded
generators, so a (config, seed, dataset) triple fully determines the run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bioeval import enroll_gallery, identify, probe_prototypes
from .data import Dataset
from .graphs import EpisodeSpec, sample_episode
from .model import EpisodeOutput, ProtoModel
from .numerics import AdamConfig, AdamState, Tape, adam_step, detach
from .protoloss import PrototypeRegistry, episodic_loss, hybrid_loss, overall_loss

__all__ = ["TrainConfig", "TrainReport", "TrainAbort", "train",
           "evaluate_episodic", "evaluate_overall", "episode_metrics"]

log = logging.getLogger(__name__)


class TrainAbort(Exception):
    """Raised when the loss stops being finite; carries the diagnostic."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    episodes_per_epoch: int
    episode_spec: EpisodeSpec
    lambda_loss: float = 0.4
    lr: float = 0.001
    seed: int = 42
    registry_momentum: float = 0.9
    val_episodes: int = 20
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ValueError("epochs and episodes_per_epoch must be positive")
        if not 0.0 <= self.lambda_loss <= 1.0:
            raise ValueError(f"lambda_loss must be in [0, 1], got {self.lambda_loss}")


@dataclass
class EpochRow:
    epoch: int
    loss: float
    episodic_acc: float
    overall_acc: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,loss,episodic_acc,overall_acc"]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.loss!r},{r.episodic_acc!r},{r.overall_acc!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        last = self.rows[-1]
        return {
            "epochs": len(self.rows),
            "final_loss": last.loss,
            "final_episodic_acc": last.episodic_acc,
            "final_overall_acc": last.overall_acc,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
        }


def episode_metrics(out: EpisodeOutput,
                    registry: PrototypeRegistry) -> tuple[float, float]:
    """(episodic, overall) query accuracy in percent, computed off-tape.

    Overall accuracy scores each query against the union of registry classes
    and the episode's fresh prototypes, mirroring the overall loss candidates.
    """
    class_mat = np.vstack([p.data for p in out.class_protos])
    candidates = sorted(set(registry.class_ids()) | set(out.class_ids))
    cand_rows = []
    for cid in candidates:
        if cid in out.class_ids:
            cand_rows.append(out.class_protos[out.class_ids.index(cid)].data[0])
        else:
            cand_rows.append(registry.vector(cid))
    cand_mat = np.vstack(cand_rows)
    epi_hits = 0
    all_hits = 0
    for q, lab in zip(out.query_protos, out.query_labels):
        v = q.data[0]
        d_epi = ((class_mat - v) ** 2).sum(axis=1)
        epi_hits += int(np.argmin(d_epi) == lab)
        d_all = ((cand_mat - v) ** 2).sum(axis=1)
        all_hits += int(candidates[int(np.argmin(d_all))] == out.class_ids[lab])
    n = len(out.query_protos)
    return 100.0 * epi_hits / n, 100.0 * all_hits / n


def _episode_losses(out: EpisodeOutput, registry: PrototypeRegistry, lam: float):
    le = lo = None
    if lam < 1.0:
        le = episodic_loss(out.query_protos, out.query_labels, out.class_protos)
    if lam > 0.0:
        episode_protos = dict(zip(out.class_ids, out.class_protos))
        qids = [out.class_ids[i] for i in out.query_labels]
        lo = overall_loss(out.query_protos, qids, episode_protos, registry)
    if lam == 0.0:
        return le
    if lam == 1.0:
        return lo
    return hybrid_loss(le, lo, lam)


def train(model: ProtoModel, dataset: Dataset, train_classes: list[str],
          cfg: TrainConfig, val_classes: list[str] | None = None,
          ) -> tuple[TrainReport, PrototypeRegistry, dict[str, np.ndarray]]:
    """Run the episodic loop; returns (report, registry, best state tensors).

    Validation runs after every epoch on val_classes (ways clamped to the
    split size when it is small); the best-validation state is returned and
    the model itself is left at the final epoch's parameters.
    """
    registry = PrototypeRegistry(cfg.registry_momentum)
    adam = AdamState(AdamConfig(lr=cfg.lr))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A41]))
    report = TrainReport()
    best_state: dict[str, np.ndarray] | None = None
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        epi_accs = []
        all_accs = []
        for ep_i in range(cfg.episodes_per_epoch):
            episode = sample_episode(dataset, cfg.episode_spec, rng,
                                     class_ids=train_classes)
            model.zero_grads()
            with Tape() as tape:
                out = model.forward_episode(episode, dataset, training=True,
                                            augment_rng=rng if cfg.augment else None)
                loss = _episode_losses(out, registry, cfg.lambda_loss)
                if not np.isfinite(loss.data):
                    raise TrainAbort(
                        f"non-finite loss {loss.data!r} at epoch {epoch}, "
                        f"episode {ep_i + 1}")
                tape.backward(loss)
            adam_step(model.params, adam)
            e_acc, o_acc = episode_metrics(out, registry)
            for cid, proto in zip(out.class_ids, out.class_protos):
                registry.update(cid, detach(proto).data[0])
            losses.append(float(loss.data))
            epi_accs.append(e_acc)
            all_accs.append(o_acc)
        row = EpochRow(epoch, float(np.mean(losses)), float(np.mean(epi_accs)),
                       float(np.mean(all_accs)))
        report.rows.append(row)
        log.info("epoch %d: loss %.4f episodic %.2f%% overall %.2f%%",
                 epoch, row.loss, row.episodic_acc, row.overall_acc)
        if val_classes and len(val_classes) >= 2:
            val_spec = cfg.episode_spec
            if len(val_classes) < val_spec.ways:
                val_spec = EpisodeSpec(len(val_classes), val_spec.graphs_per_class,
                                       val_spec.images_per_graph, val_spec.query_graphs)
            val_acc = evaluate_episodic(model, dataset, val_classes, val_spec,
                                        cfg.val_episodes,
                                        seed_key=(cfg.seed, 0x5A1, epoch))
            if best_state is None or val_acc > report.best_val_acc:
                report.best_val_acc = val_acc
                report.best_epoch = epoch
                best_state = model.state_tensors()
    if best_state is None:
        report.best_epoch = cfg.epochs
        report.best_val_acc = report.rows[-1].episodic_acc
        best_state = model.state_tensors()
    return report, registry, best_state


def evaluate_overall(model: ProtoModel, dataset: Dataset, class_ids: list[str],
                     k: int, n: int, seed: int) -> float:
    """Closed-set accuracy (percent): held-out graphs against every class.

    Each class enrolls a gallery prototype from K support graphs; every
    held-out N-chunk becomes one query graph scored against all galleries.
    """
    gallery, partitions = enroll_gallery(model, dataset, class_ids, k, n, seed)
    probes = probe_prototypes(model, dataset, partitions, n, seed)
    if not probes:
        raise ValueError("no held-out impressions to query")
    hits = sum(1 for cid, vec in probes if identify(vec, gallery)[0] == cid)
    return 100.0 * hits / len(probes)


def evaluate_episodic(model: ProtoModel, dataset: Dataset, class_ids: list[str],
                      spec: EpisodeSpec, num_episodes: int,
                      seed_key: tuple[int, ...] = (0, 0xE7A1)) -> float:
    """Mean per-episode query accuracy (percent) over fresh sampled episodes."""
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_key)))
    accs = []
    for _ in range(num_episodes):
        episode = sample_episode(dataset, spec, rng, class_ids=class_ids)
        out = model.forward_episode(episode, dataset, training=False)
        class_mat = np.vstack([p.data for p in out.class_protos])
        hits = 0
        for q, lab in zip(out.query_protos, out.query_labels):
            d = ((class_mat - q.data[0]) ** 2).sum(axis=1)
            hits += int(np.argmin(d) == lab)
        accs.append(100.0 * hits / len(out.query_protos))
    return float(np.mean(accs))
