"""End-to-end model: impressions -> embeddings -> class graphs -> prototypes.

Works from raw images (trainable convolutional encoder) or from a
precomputed embedding table (no encoder parameters).  The single-impression
mode bypasses the graph machinery entirely: each class is represented by
raw embeddings alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, DatasetError
from .encoder import EncoderConfig, encode_batch, init_encoder, prepare_images
from .graphs import Episode, GraphDraw, build_graph
from .numerics import Tensor, narrow, tmean
from .pgnn import PGNNConfig, forward_episode, init_pgnn
from .protoloss import class_prototype

__all__ = ["ModelConfig", "EpisodeOutput", "ProtoModel"]


def _augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-only: per-image horizontal flip (p=0.5) plus mild pixel noise."""
    out = images.copy()
    flips = rng.random(len(out)) < 0.5
    out[flips] = out[flips, :, ::-1, :]
    noise = rng.normal(0.0, 0.02 * 255.0, out.shape)
    return np.clip(np.round(out.astype(np.float64) + noise), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry plus mode switches shared by training and evaluation."""

    pgnn: PGNNConfig
    encoder: EncoderConfig | None = None   # None: precomputed embeddings
    single_impression: bool = False

    def __post_init__(self):
        if self.encoder is not None and self.encoder.embed_dim != self.pgnn.layer_dims[0]:
            raise ValueError(
                f"encoder width {self.encoder.embed_dim} != graph input width "
                f"{self.pgnn.layer_dims[0]}")

    @property
    def proto_dim(self) -> int:
        if self.single_impression:
            return self.pgnn.layer_dims[0]
        return self.pgnn.out_dim


@dataclass
class EpisodeOutput:
    """Refined prototypes of one episode, in tape-connected form.

    class_protos[i] matches class_ids[i]; query_protos is flat with parallel
    query_labels (indices into class_ids).
    """

    class_ids: list[str]
    class_protos: list[Tensor]
    support_graph_protos: list[list[Tensor]]
    query_protos: list[Tensor]
    query_labels: list[int]


class ProtoModel:
    """Owns all learnable tensors and the batch-norm running buffers."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        if cfg.encoder is not None:
            enc_params, enc_buffers = init_encoder(cfg.encoder, rng)
            self.params.update(enc_params)
            self.buffers.update(enc_buffers)
        if not cfg.single_impression:
            self.params.update(init_pgnn(cfg.pgnn, rng))

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.params.items()}
        out.update({f"buffer.{name}": arr.copy() for name, arr in self.buffers.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in tensors:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != t.data.shape:
                raise ValueError(
                    f"checkpoint shape {tensors[name].shape} != model shape "
                    f"{t.data.shape} for parameter {name!r}")
            t.data = tensors[name].copy()
        for name, arr in self.buffers.items():
            key = f"buffer.{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing buffer {name!r}")
            arr[...] = tensors[key]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- embedding ---------------------------------------------------------

    def _embed_draws(self, draws: list[GraphDraw], dataset: Dataset,
                     training: bool,
                     augment_rng: np.random.Generator | None = None) -> list[Tensor]:
        """Per-graph (N, d) embedding blocks, one shared encoder batch."""
        if dataset.kind == "embeddings":
            blocks = []
            for draw in draws:
                rows = np.stack([dataset.get(draw.class_id, i)
                                 for i in draw.impression_ids])
                if rows.shape[1] != self.cfg.pgnn.layer_dims[0]:
                    raise DatasetError(
                        f"embedding width {rows.shape[1]} != model input width "
                        f"{self.cfg.pgnn.layer_dims[0]}")
                blocks.append(Tensor(rows))
            return blocks
        if self.cfg.encoder is None:
            raise DatasetError("image dataset requires a model with an encoder")
        images = np.stack([dataset.get(d.class_id, i)
                           for d in draws for i in d.impression_ids])
        if augment_rng is not None:
            images = _augment(images, augment_rng)
        batch = prepare_images(images, self.cfg.encoder)
        emb = encode_batch(batch, self.params, self.buffers, self.cfg.encoder,
                           training=training)
        blocks = []
        offset = 0
        for draw in draws:
            n = len(draw.impression_ids)
            blocks.append(narrow(emb, 0, offset, n))
            offset += n
        return blocks

    # -- forward -----------------------------------------------------------

    def forward_episode(self, episode: Episode, dataset: Dataset,
                        training: bool,
                        augment_rng: np.random.Generator | None = None) -> EpisodeOutput:
        """Encode, build graphs, refine, and aggregate one episode."""
        sup_draws = [d for per_class in episode.support for d in per_class]
        qry_draws = [d for per_class in episode.query for d in per_class]
        blocks = self._embed_draws(sup_draws + qry_draws, dataset, training,
                                   augment_rng=augment_rng)
        sup_blocks = blocks[: len(sup_draws)]
        qry_blocks = blocks[len(sup_draws):]

        if self.cfg.single_impression:
            # No graphs: a class is the mean of its raw support embeddings,
            # a query is the mean of its own rows.
            k = len(episode.support[0])
            sup_protos = [tmean(b, axis=0, keepdims=True) for b in sup_blocks]
            qry_protos = [tmean(b, axis=0, keepdims=True) for b in qry_blocks]
        else:
            sup_graphs = [build_graph(b, d.class_id, d.role)
                          for b, d in zip(sup_blocks, sup_draws)]
            qry_graphs = [build_graph(b, d.class_id, d.role)
                          for b, d in zip(qry_blocks, qry_draws)]
            sup_protos, qry_protos = forward_episode(
                sup_graphs, qry_graphs, self.params, self.cfg.pgnn)
            k = len(episode.support[0])

        class_protos = []
        grouped: list[list[Tensor]] = []
        for ci in range(len(episode.class_ids)):
            group = sup_protos[ci * k: (ci + 1) * k]
            grouped.append(group)
            class_protos.append(class_prototype(group))
        q = len(episode.query[0])
        query_labels = [ci for ci in range(len(episode.class_ids)) for _ in range(q)]
        return EpisodeOutput(
            class_ids=list(episode.class_ids),
            class_protos=class_protos,
            support_graph_protos=grouped,
            query_protos=qry_protos,
            query_labels=query_labels,
        )

    def refine_class_graphs(self, draws: list[GraphDraw], dataset: Dataset,
                            items_override: list[np.ndarray] | None = None) -> list[Tensor]:
        """Refine one class's graphs jointly, isolated from other classes.

        Used by the enrollment/verification protocols: the graphs align only
        with each other (same class), never across classes.  Evaluation
        mode, no buffer side effects.  items_override supplies raw items
        directly (noise-backfilled copies) in draw order.
        """
        if self.cfg.single_impression:
            blocks = self._embed_items(draws, dataset, items_override)
            return [tmean(b, axis=0, keepdims=True) for b in blocks]
        blocks = self._embed_items(draws, dataset, items_override)
        graphs = [build_graph(b, d.class_id, d.role) for b, d in zip(blocks, draws)]
        support = [g for g in graphs if g.role == "support"]
        query = [g for g in graphs if g.role == "query"]
        sup_protos, qry_protos = forward_episode(
            support, query, self.params, self.cfg.pgnn)
        out: list[Tensor] = []
        si = qi = 0
        for g in graphs:
            if g.role == "support":
                out.append(sup_protos[si])
                si += 1
            else:
                out.append(qry_protos[qi])
                qi += 1
        return out

    def _embed_items(self, draws: list[GraphDraw], dataset: Dataset,
                     items_override: list[np.ndarray] | None) -> list[Tensor]:
        if items_override is None:
            return self._embed_draws(draws, dataset, training=False)
        if dataset.kind == "embeddings":
            blocks = []
            offset = 0
            for draw in draws:
                n = len(draw.impression_ids)
                blocks.append(Tensor(np.stack(items_override[offset: offset + n])))
                offset += n
            return blocks
        if self.cfg.encoder is None:
            raise DatasetError("image dataset requires a model with an encoder")
        images = np.stack(items_override)
        batch = prepare_images(images, self.cfg.encoder)
        emb = encode_batch(batch, self.params, self.buffers, self.cfg.encoder,
                           training=False)
        blocks = []
        offset = 0
        for draw in draws:
            n = len(draw.impression_ids)
            blocks.append(narrow(emb, 0, offset, n))
            offset += n
        return blocks

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())
