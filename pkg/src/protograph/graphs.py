"""Per-class impression graphs and episodic task assembly.

A class graph holds N impression nodes on a cycle plus one prototype node
connected to every impression node (star).  Episodes are C-way few-shot
tasks: K support graphs and Q query graphs per sampled class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .numerics import Tensor, tmean

__all__ = [
    "ClassGraph",
    "EpisodeSpec",
    "GraphDraw",
    "Episode",
    "cycle_star_adjacency",
    "build_graph",
    "sample_episode",
]

log = logging.getLogger(__name__)


@dataclass
class ClassGraph:
    """N impression nodes plus a prototype node (index N in the adjacency)."""

    node_feats: Tensor      # (N, d)
    proto_feat: Tensor      # (1, d), mean of node rows at construction
    adjacency: np.ndarray   # (N+1, N+1) uint8, symmetric, zero diagonal
    class_id: str
    role: str               # "support" or "query"


@dataclass(frozen=True)
class EpisodeSpec:
    """C-way / K-graph / N-image episode geometry."""

    ways: int
    graphs_per_class: int
    images_per_graph: int
    query_graphs: int = 1

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError(f"ways must be >= 2, got {self.ways}")
        if self.graphs_per_class < 1 or self.images_per_graph < 1 or self.query_graphs < 1:
            raise ValueError("graphs_per_class, images_per_graph, query_graphs must be >= 1")


@dataclass(frozen=True)
class GraphDraw:
    """One graph's impression selection, before any features are computed."""

    class_id: str
    impression_ids: tuple[str, ...]
    role: str


@dataclass
class Episode:
    """Sampled draws for one episode; graphs materialize at forward time."""

    class_ids: list[str]
    support: list[list[GraphDraw]]   # [C][K]
    query: list[list[GraphDraw]]     # [C][Q]


def cycle_star_adjacency(n: int) -> np.ndarray:
    """Adjacency of the n-impression graph; node n is the prototype.

    n=1 has no cycle edge (the self-loop is suppressed); n=2 collapses the
    two directed cycle edges into one undirected edge.
    """
    if n < 1:
        raise ValueError(f"need at least one impression node, got {n}")
    a = np.zeros((n + 1, n + 1), dtype=np.uint8)
    for i in range(n):
        if n >= 2:
            a[i, (i + 1) % n] = 1
            a[(i + 1) % n, i] = 1
        a[i, n] = 1
        a[n, i] = 1
    return a


def build_graph(embeddings: Tensor, class_id: str, role: str) -> ClassGraph:
    """Wrap an (N, d) embedding block into a class graph.

    The prototype feature is initialized to the mean of the rows and stays
    on the gradient tape, so upstream encoders receive gradients through it.
    """
    if embeddings.data.ndim != 2:
        raise ValueError(f"embeddings must be (N, d), got {embeddings.data.shape}")
    n = embeddings.data.shape[0]
    proto = tmean(embeddings, axis=0, keepdims=True)
    return ClassGraph(
        node_feats=embeddings,
        proto_feat=proto,
        adjacency=cycle_star_adjacency(n),
        class_id=class_id,
        role=role,
    )


def _draw_graph(rng: np.random.Generator, pool: list[str], n: int) -> tuple[str, ...]:
    if len(pool) >= n:
        idx = rng.choice(len(pool), size=n, replace=False)
    else:
        idx = rng.choice(len(pool), size=n, replace=True)
    return tuple(pool[i] for i in idx)


def sample_episode(dataset: Dataset, spec: EpisodeSpec,
                   rng: np.random.Generator | int,
                   class_ids: list[str] | None = None) -> Episode:
    """Draw one episode from a dataset (or from an explicit class subset).

    Classes are drawn without replacement; impressions with replacement
    across graphs.  When a class has at least N*(K+Q) impressions the
    support and query draws come from disjoint impression pools; otherwise
    the pools overlap (logged at debug level).
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.random.SeedSequence([int(rng), 0xE7]))
    classes = sorted(class_ids) if class_ids is not None else dataset.class_ids()
    if len(classes) < spec.ways:
        raise ValueError(
            f"episode needs {spec.ways} classes, dataset split has {len(classes)}")
    chosen_idx = rng.choice(len(classes), size=spec.ways, replace=False)
    chosen = [classes[i] for i in chosen_idx]
    k, n, q = spec.graphs_per_class, spec.images_per_graph, spec.query_graphs
    support: list[list[GraphDraw]] = []
    query: list[list[GraphDraw]] = []
    for cid in chosen:
        imps = dataset.impression_ids(cid)
        if len(imps) >= n * (k + q):
            perm = [imps[i] for i in rng.permutation(len(imps))]
            support_pool = perm[: n * k]
            query_pool = perm[n * k: n * (k + q)]
        else:
            support_pool = query_pool = imps
            log.debug("class %s has %d impressions < N(K+Q)=%d; pools overlap",
                      cid, len(imps), n * (k + q))
        support.append([GraphDraw(cid, _draw_graph(rng, support_pool, n), "support")
                        for _ in range(k)])
        query.append([GraphDraw(cid, _draw_graph(rng, query_pool, n), "query")
                      for _ in range(q)])
    return Episode(class_ids=chosen, support=support, query=query)
