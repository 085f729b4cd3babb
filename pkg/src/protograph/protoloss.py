"""Class prototypes, distance-softmax classification, and the hybrid loss.

Episodic loss scores each query against the episode's class prototypes;
overall loss scores it against every class the model has seen, using a
momentum registry of past prototypes.  The hybrid loss blends the two,
returning the pure loss object itself at either endpoint so endpoint runs
are bit-identical to single-loss training.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    Tensor,
    concat,
    log_softmax,
    mul,
    neg,
    pick,
    reshape,
    softmax,
    sq_euclid,
    tmean,
)

__all__ = [
    "class_prototype",
    "distance_logits",
    "classify",
    "nll_from_logits",
    "episodic_loss",
    "PrototypeRegistry",
    "overall_loss",
    "hybrid_loss",
]


def class_prototype(graph_protos: list[Tensor]) -> Tensor:
    """Mean of a class's refined (1, d) graph prototypes."""
    if not graph_protos:
        raise ValueError("class_prototype of empty list")
    if len(graph_protos) == 1:
        return graph_protos[0]
    return tmean(concat(graph_protos, axis=0), axis=0, keepdims=True)


def distance_logits(query_proto: Tensor, class_protos: list[Tensor]) -> Tensor:
    """(C,) vector of negative squared distances, softmax-ready."""
    if not class_protos:
        raise ValueError("no class prototypes to score against")
    terms = [reshape(neg(sq_euclid(query_proto, p)), (1,)) for p in class_protos]
    return concat(terms, axis=0)


def classify(query_proto: Tensor, class_protos: list[Tensor]) -> Tensor:
    """Per-class probabilities from negative squared Euclidean distances."""
    if len(class_protos) < 2:
        raise ValueError("classification needs at least 2 classes")
    return softmax(distance_logits(query_proto, class_protos), axis=0)


def nll_from_logits(logits: Tensor, true_index: int) -> Tensor:
    return neg(pick(log_softmax(logits, axis=0), true_index))


def episodic_loss(query_protos: list[Tensor], query_labels: list[int],
                  class_protos: list[Tensor]) -> Tensor:
    """Mean NLL of queries against the episode's class prototypes.

    query_labels index into class_protos.
    """
    if len(query_protos) != len(query_labels):
        raise ValueError("one label per query prototype required")
    c = len(class_protos)
    for lab in query_labels:
        if not 0 <= lab < c:
            raise ValueError(f"label {lab} outside episode classes 0..{c - 1}")
    losses = [reshape(nll_from_logits(distance_logits(q, class_protos), lab), (1,))
              for q, lab in zip(query_protos, query_labels)]
    return tmean(concat(losses, axis=0))


class PrototypeRegistry:
    """Momentum store of one prototype vector per class ever seen.

    Stored vectors are plain arrays (no gradient); the overall loss swaps in
    fresh tape-connected prototypes for the classes present in the current
    episode.
    """

    def __init__(self, momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.entries: dict[str, tuple[np.ndarray, int]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def class_ids(self) -> list[str]:
        return sorted(self.entries)

    def vector(self, class_id: str) -> np.ndarray:
        return self.entries[class_id][0]

    def update(self, class_id: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if class_id in self.entries:
            old, count = self.entries[class_id]
            if old.shape != vec.shape:
                raise ValueError(
                    f"registry width {old.shape[0]} != update width {vec.shape[0]}")
            mu = self.momentum
            self.entries[class_id] = (mu * old + (1.0 - mu) * vec, count + 1)
        else:
            self.entries[class_id] = (vec.copy(), 1)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for cid, (vec, count) in self.entries.items():
            out[f"registry.vec.{cid}"] = vec
            out[f"registry.count.{cid}"] = np.asarray(float(count))
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray],
                     momentum: float = 0.9) -> "PrototypeRegistry":
        reg = cls(momentum)
        for name, arr in tensors.items():
            if name.startswith("registry.vec."):
                cid = name[len("registry.vec."):]
                count = int(tensors[f"registry.count.{cid}"])
                reg.entries[cid] = (np.asarray(arr, dtype=np.float64).copy(), count)
        return reg


def overall_loss(query_protos: list[Tensor], query_class_ids: list[str],
                 episode_protos: dict[str, Tensor],
                 registry: PrototypeRegistry) -> Tensor:
    """Mean NLL of queries against the union of registry and episode classes.

    Episode classes contribute their fresh, gradient-carrying prototypes;
    every other registry class contributes its stored constant vector.
    Candidate order is sorted class id, so results do not depend on
    insertion history.
    """
    candidates = sorted(set(registry.class_ids()) | set(episode_protos))
    index = {cid: i for i, cid in enumerate(candidates)}
    for cid in query_class_ids:
        if cid not in index:
            raise ValueError(f"query class {cid!r} absent from candidate set")
    protos: list[Tensor] = []
    for cid in candidates:
        if cid in episode_protos:
            protos.append(episode_protos[cid])
        else:
            protos.append(Tensor(registry.vector(cid).reshape(1, -1)))
    losses = [reshape(nll_from_logits(distance_logits(q, protos), index[cid]), (1,))
              for q, cid in zip(query_protos, query_class_ids)]
    return tmean(concat(losses, axis=0))


def hybrid_loss(loss_episode: Tensor, loss_overall: Tensor, lam: float) -> Tensor:
    """(1 - lam) * episodic + lam * overall; endpoints pass through untouched."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"loss weight must be in [0, 1], got {lam}")
    if lam == 0.0:
        return loss_episode
    if lam == 1.0:
        return loss_overall
    return mul(loss_episode, 1.0 - lam) + mul(loss_overall, lam)
