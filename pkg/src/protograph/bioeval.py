"""Identification (CMC) and verification (ROC/EER/AUC) protocols.

Enrollment and test impressions are kept strictly disjoint per class.
Gallery prototypes are built from K support graphs refined jointly within
their class; probes are single graphs refined in isolation.  ROC, EER and
AUC are computed with exact rational arithmetic over the score counts, so
they agree bit-for-bit with any exhaustive pairwise oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import Dataset
from .graphs import GraphDraw
from .model import ProtoModel

__all__ = [
    "EnrollmentPartition",
    "ScoreSet",
    "EvalCurve",
    "partition_enrollment",
    "identify",
    "cmc_curve",
    "roc_eer_auc",
    "enroll_gallery",
    "probe_prototypes",
    "identification_run",
    "build_verification_pairs",
]


@dataclass(frozen=True)
class EnrollmentPartition:
    enrollment: tuple[str, ...]
    test: tuple[str, ...]


@dataclass
class ScoreSet:
    genuine: list[float] = field(default_factory=list)
    imposter: list[float] = field(default_factory=list)


@dataclass
class EvalCurve:
    """Ordered curve points plus scalar summaries (rank-k or eer/auc)."""

    points: list[tuple[float, float]]
    summary: dict[str, float]

    def to_csv(self, x_name: str, y_name: str) -> str:
        lines = [f"{x_name},{y_name}"]
        for x, y in self.points:
            lines.append(f"{float(x)!r},{float(y)!r}")
        return "\n".join(lines) + "\n"


def partition_enrollment(impressions: list[str], k: int, n: int) -> EnrollmentPartition:
    """Split one class's impression ids into enrollment and test sets.

    More than K*N impressions: the first K*N (lexicographic) enroll, the
    rest are test probes.  Otherwise half (floor) enroll and the remainder
    is kept for testing.
    """
    r = len(impressions)
    if r < 2:
        raise ValueError(f"need at least 2 impressions to partition, got {r}")
    imps = sorted(impressions)
    cut = k * n if r > k * n else r // 2
    return EnrollmentPartition(tuple(imps[:cut]), tuple(imps[cut:]))


def identify(probe: np.ndarray, gallery: dict[str, np.ndarray]) -> list[str]:
    """Class ids sorted by ascending Euclidean distance; ties break by id."""
    if not gallery:
        raise ValueError("empty gallery")
    probe = np.asarray(probe, dtype=np.float64).reshape(-1)
    scored = []
    for cid in sorted(gallery):
        vec = np.asarray(gallery[cid], dtype=np.float64).reshape(-1)
        if vec.shape != probe.shape:
            raise ValueError(
                f"gallery width {vec.shape[0]} != probe width {probe.shape[0]}")
        scored.append((float(np.sqrt(((vec - probe) ** 2).sum())), cid))
    scored.sort()
    return [cid for _, cid in scored]


def cmc_curve(results: list[tuple[str, list[str]]],
              max_rank: int | None = None) -> EvalCurve:
    """Cumulative match curve from (true class, ranked class list) pairs."""
    if not results:
        raise ValueError("no identification results")
    depth = max_rank or max(len(r) for _, r in results)
    counts = np.zeros(depth, dtype=np.int64)
    for true_cid, ranking in results:
        try:
            rank = ranking.index(true_cid)
        except ValueError:
            continue
        if rank < depth:
            counts[rank] += 1
    cum = np.cumsum(counts)
    total = len(results)
    points = [(float(k + 1), float(cum[k]) / total) for k in range(depth)]
    summary = {"rank1": points[0][1],
               "rank5": points[min(4, depth - 1)][1]}
    return EvalCurve(points=points, summary=summary)


def _counts(scores: list[float]) -> tuple[list[float], list[int]]:
    arr = sorted(scores)
    vals: list[float] = []
    cnts: list[int] = []
    for s in arr:
        if vals and s == vals[-1]:
            cnts[-1] += 1
        else:
            vals.append(s)
            cnts.append(1)
    return vals, cnts


def roc_eer_auc(scores: ScoreSet) -> EvalCurve:
    """Threshold sweep over all distinct scores with exact rational counts.

    At threshold t: FAR(t) = fraction of imposter distances <= t, FRR(t) =
    fraction of genuine distances > t.  The curve is (FAR, 1-FRR) anchored
    at (0, 0); AUC is the trapezoid integral and EER the linear-interpolated
    crossing of FAR and FRR between bracketing thresholds.
    """
    if not scores.genuine or not scores.imposter:
        raise ValueError("both genuine and imposter scores are required")
    g_total = len(scores.genuine)
    i_total = len(scores.imposter)
    thresholds = sorted(set(scores.genuine) | set(scores.imposter))
    g_vals, g_cnts = _counts(scores.genuine)
    i_vals, i_cnts = _counts(scores.imposter)
    far: list[Fraction] = []
    tpr: list[Fraction] = []
    gi = ii = 0
    g_seen = i_seen = 0
    for t in thresholds:
        while gi < len(g_vals) and g_vals[gi] <= t:
            g_seen += g_cnts[gi]
            gi += 1
        while ii < len(i_vals) and i_vals[ii] <= t:
            i_seen += i_cnts[ii]
            ii += 1
        far.append(Fraction(i_seen, i_total))
        tpr.append(Fraction(g_seen, g_total))

    # AUC over the anchored curve.
    auc = Fraction(0)
    px, py = Fraction(0), Fraction(0)
    for x, y in zip(far, tpr):
        auc += (x - px) * (y + py) / 2
        px, py = x, y

    # EER: walk (FAR - FRR) from the virtual t=-inf point (0, 1) upward.
    eer = None
    pf, pr = Fraction(0), Fraction(1)
    for x, y in zip(far, tpr):
        frr = 1 - y
        if x >= frr:
            denom = (x - pf) + (pr - frr)
            if denom == 0:
                eer = x
            else:
                s = (pr - pf) / denom
                eer = pf + s * (x - pf)
            break
        pf, pr = x, frr
    assert eer is not None  # FAR=1, FRR=0 at the top threshold

    points = [(0.0, 0.0)] + [(float(x), float(y)) for x, y in zip(far, tpr)]
    return EvalCurve(points=points,
                     summary={"eer": float(eer), "auc": float(auc)})


# ---------------------------------------------------------------------------
# protocol drivers


def _noise_backfill(item: np.ndarray, rng: np.random.Generator,
                    sigma_frac: float) -> np.ndarray:
    """A perturbed copy of an impression; sigma scales with the item spread."""
    arr = np.asarray(item, dtype=np.float64)
    scale = float(arr.std())
    if scale == 0.0:
        scale = 1.0
    noisy = arr + rng.normal(0.0, sigma_frac * scale, arr.shape)
    if item.dtype == np.uint8:
        return np.clip(np.round(noisy), 0, 255).astype(np.uint8)
    return noisy


def _fill_graph_items(dataset: Dataset, cid: str, pool: list[str], n: int,
                      rng: np.random.Generator, sigma_frac: float,
                      ) -> tuple[tuple[str, ...], list[np.ndarray]]:
    """Pick N distinct impressions; short pools are completed by noisy copies."""
    if len(pool) >= n:
        idx = rng.choice(len(pool), size=n, replace=False)
        ids = tuple(pool[i] for i in idx)
        return ids, [dataset.get(cid, i) for i in ids]
    ids = list(pool)
    items = [dataset.get(cid, i) for i in ids]
    while len(items) < n:
        src = ids[int(rng.integers(len(pool)))]
        items.append(_noise_backfill(dataset.get(cid, src), rng, sigma_frac))
        ids.append(src + "+noise")
    return tuple(ids), items


def _class_prototype_from_pool(model: ProtoModel, dataset: Dataset, cid: str,
                               pool: list[str], k: int, n: int,
                               rng: np.random.Generator,
                               sigma_frac: float) -> np.ndarray:
    """Mean refined prototype of K jointly refined support graphs."""
    draws = []
    items: list[np.ndarray] = []
    for _ in range(k):
        ids, graph_items = _fill_graph_items(dataset, cid, pool, n, rng, sigma_frac)
        draws.append(GraphDraw(cid, ids, "support"))
        items.extend(graph_items)
    protos = model.refine_class_graphs(draws, dataset, items_override=items)
    return np.mean([p.data[0] for p in protos], axis=0)


def _probe_prototype(model: ProtoModel, dataset: Dataset, cid: str,
                     ids: tuple[str, ...],
                     items: list[np.ndarray]) -> np.ndarray:
    protos = model.refine_class_graphs([GraphDraw(cid, ids, "query")], dataset,
                                       items_override=items)
    return protos[0].data[0]


def enroll_gallery(model: ProtoModel, dataset: Dataset, class_ids: list[str],
                   k: int, n: int, seed: int,
                   sigma_frac: float = 0.01,
                   ) -> tuple[dict[str, np.ndarray], dict[str, EnrollmentPartition]]:
    """Build one gallery prototype per class from its enrollment impressions."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A11]))
    gallery: dict[str, np.ndarray] = {}
    partitions: dict[str, EnrollmentPartition] = {}
    for cid in sorted(class_ids):
        part = partition_enrollment(dataset.impression_ids(cid), k, n)
        partitions[cid] = part
        gallery[cid] = _class_prototype_from_pool(
            model, dataset, cid, list(part.enrollment), k, n, rng, sigma_frac)
    return gallery, partitions


def probe_prototypes(model: ProtoModel, dataset: Dataset,
                     partitions: dict[str, EnrollmentPartition], n: int,
                     seed: int, sigma_frac: float = 0.01,
                     ) -> list[tuple[str, np.ndarray]]:
    """One probe prototype per disjoint N-chunk of each class's test set."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x960B]))
    probes: list[tuple[str, np.ndarray]] = []
    for cid in sorted(partitions):
        test = list(partitions[cid].test)
        if not test:
            continue
        chunks = [test[i: i + n] for i in range(0, len(test), n)]
        for chunk in chunks:
            ids, items = _fill_graph_items(dataset, cid, chunk, n, rng, sigma_frac)
            probes.append((cid, _probe_prototype(model, dataset, cid, ids, items)))
    return probes


def identification_run(model: ProtoModel, dataset: Dataset, class_ids: list[str],
                       k: int, n: int, seed: int) -> tuple[EvalCurve, float]:
    """Full identification protocol; returns (CMC curve, rank-1 accuracy)."""
    gallery, partitions = enroll_gallery(model, dataset, class_ids, k, n, seed)
    probes = probe_prototypes(model, dataset, partitions, n, seed)
    if not probes:
        raise ValueError("no test impressions left after enrollment")
    results = [(cid, identify(vec, gallery)) for cid, vec in probes]
    curve = cmc_curve(results)
    return curve, curve.summary["rank1"]


def build_verification_pairs(model: ProtoModel, dataset: Dataset,
                             class_ids: list[str], k: int, n: int,
                             pairs_per_kind: int, seed: int,
                             sigma_frac: float = 0.01) -> ScoreSet:
    """Sample genuine and imposter 1xN-vs-KxN prototype pairs.

    The probe graph and the gallery prototype of a genuine pair use disjoint
    impression subsets whenever the class has at least N*(K+1) impressions;
    smaller classes fall back to overlapping draws.  Scores are root
    Euclidean distances.
    """
    eligible = [c for c in sorted(class_ids) if len(dataset.impression_ids(c)) >= 2]
    if not eligible:
        raise ValueError("no class has at least 2 impressions")
    if len(eligible) < 2:
        raise ValueError("imposter pairs need at least 2 eligible classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF41A]))
    scores = ScoreSet()

    def one_sided(cid: str, exclude: set[str] | None = None) -> np.ndarray:
        imps = dataset.impression_ids(cid)
        pool = [i for i in imps if not exclude or i not in exclude]
        if not pool:
            pool = imps
        return _class_prototype_from_pool(model, dataset, cid, pool, k, n,
                                          rng, sigma_frac)

    def probe_side(cid: str) -> tuple[np.ndarray, set[str]]:
        imps = dataset.impression_ids(cid)
        ids, items = _fill_graph_items(dataset, cid, imps, n, rng, sigma_frac)
        used = {i for i in ids if not i.endswith("+noise")}
        return _probe_prototype(model, dataset, cid, ids, items), used

    for _ in range(pairs_per_kind):
        cid = eligible[int(rng.integers(len(eligible)))]
        probe, used = probe_side(cid)
        exclude = used if len(dataset.impression_ids(cid)) >= n * (k + 1) else None
        gal = one_sided(cid, exclude)
        scores.genuine.append(float(np.sqrt(((probe - gal) ** 2).sum())))
    for _ in range(pairs_per_kind):
        a, b = rng.choice(len(eligible), size=2, replace=False)
        probe, _ = probe_side(eligible[int(a)])
        gal = one_sided(eligible[int(b)])
        scores.imposter.append(float(np.sqrt(((probe - gal) ** 2).sum())))
    return scores
